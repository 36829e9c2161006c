"""Needle simulator, stream synchronization, windowing, splitting and dataset files."""

from __future__ import annotations

import io
import json
import struct
import zlib
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.signal import lfilter

from .numerics import ContractError

OCT_RATE = 5500.0
FORCE_RATE = 500.0


class DataFormatError(ValueError):
    """A dataset file is truncated, corrupt or of an unsupported version."""


class ForceRangeError(ValueError):
    """A force outside the profile's ±f_max was requested."""


@dataclass(frozen=True)
class NeedleProfile:
    name: str
    a: float                # mN / um
    b: float                # mN / um^3
    p0: float               # rest interface position (px)
    layer_px: float         # epoxy thickness at rest (px)
    attenuation: float      # per-pixel intensity decay inside the epoxy
    speckle_sigma: float
    noise_floor: float
    f_max: float            # mN
    hysteresis_tau: float   # OCT samples
    px_per_um: float = 0.05
    peak_amp: float = 0.8
    epoxy_amp: float = 0.15
    peak_width: float = 1.5

    def __post_init__(self):
        if not (self.a > 0 and self.b >= 0 and self.f_max > 0 and self.hysteresis_tau >= 0):
            raise ContractError(f"invalid needle profile {self.name!r}")
        if not 0 < self.p0:
            raise ContractError(f"rest depth p0 must be positive, got {self.p0}")

    def check(self, d_c: int) -> None:
        if not self.p0 < d_c:
            raise ContractError(f"rest depth p0={self.p0} must lie inside the {d_c}-pixel crop")

    def to_dict(self) -> dict:
        return asdict(self)


PROFILES = {
    "soft": NeedleProfile("soft", a=1.6, b=2.19e-4, p0=44.0, layer_px=40.0, attenuation=0.02,
                          speckle_sigma=0.3, noise_floor=0.03, f_max=379.0, hysteresis_tau=40.0),
    "medium": NeedleProfile("medium", a=4.0, b=5.74e-4, p0=44.0, layer_px=40.0, attenuation=0.02,
                            speckle_sigma=0.3, noise_floor=0.03, f_max=974.0, hysteresis_tau=40.0),
    "stiff": NeedleProfile("stiff", a=13.0, b=1.902e-3, p0=44.0, layer_px=40.0, attenuation=0.02,
                           speckle_sigma=0.3, noise_floor=0.03, f_max=3202.0, hysteresis_tau=40.0),
}


def get_profile(name: str) -> NeedleProfile:
    try:
        return PROFILES[name]
    except KeyError:
        raise ContractError(f"unknown profile {name!r}; expected one of {', '.join(PROFILES)}") from None


# --- simulator -------------------------------------------------------------------

def compression(force, profile: NeedleProfile, rtol: float = 1e-9) -> np.ndarray:
    """Solve force = a*d + b*d^3 for the compression d (um) by bisection; odd in force."""
    f = np.asarray(force, dtype=np.float64)
    mag = np.abs(f)
    lo = np.zeros_like(mag)
    hi = mag / profile.a + 1.0  # a*d alone reaches |f| at d = |f|/a
    while True:
        mid = 0.5 * (lo + hi)
        above = profile.a * mid + profile.b * mid ** 3 > mag
        hi = np.where(above, mid, hi)
        lo = np.where(above, lo, mid)
        if np.all(hi - lo <= rtol * np.maximum(hi, 1e-300)):
            break
    return np.sign(f) * 0.5 * (lo + hi)


def peak_position(force, profile: NeedleProfile) -> np.ndarray:
    return profile.p0 - compression(force, profile) * profile.px_per_um


def simulate_ascans(forces, profile: NeedleProfile, rng: np.random.Generator | None, d_c: int = 64,
                    dtype=np.float32) -> np.ndarray:
    """Vectorized A-scan rendering for an array of forces -> (n, d_c). rng=None disables noise."""
    forces = np.atleast_1d(np.asarray(forces, dtype=np.float64))
    profile.check(d_c)
    if np.any(np.abs(forces) > profile.f_max):
        worst = float(np.max(np.abs(forces)))
        raise ForceRangeError(f"|force| {worst:.6g} mN exceeds f_max {profile.f_max} mN")
    p = peak_position(forces, profile)[:, None]
    idx = np.arange(d_c, dtype=np.float64)[None, :]
    surface = max(profile.p0 - profile.layer_px, 0.0)
    epoxy = (idx >= surface) & (idx < p)
    scan = np.where(epoxy, profile.epoxy_amp * np.exp(-profile.attenuation * (idx - surface)), 0.0)
    scan = scan + profile.peak_amp * np.exp(-0.5 * ((idx - p) / profile.peak_width) ** 2)
    if rng is not None:
        scan = scan * np.exp(profile.speckle_sigma * rng.standard_normal(scan.shape))
        scan = scan + np.abs(profile.noise_floor * rng.standard_normal(scan.shape))
    return np.clip(scan, 0.0, 1.0).astype(dtype)


def simulate_ascan(force: float, profile: NeedleProfile, rng: np.random.Generator | None,
                   d_c: int = 64) -> np.ndarray:
    return simulate_ascans([force], profile, rng, d_c)[0]


@dataclass
class TimedStream:
    timestamps: np.ndarray
    payloads: np.ndarray

    def __post_init__(self):
        self.timestamps = np.asarray(self.timestamps, dtype=np.float64)
        if len(self.timestamps) != len(self.payloads):
            raise ContractError("timestamps and payloads differ in length")
        if np.any(np.diff(self.timestamps) <= 0):
            raise ContractError("stream timestamps must be strictly increasing")

    def __len__(self) -> int:
        return len(self.timestamps)


def force_trajectory(profile: NeedleProfile, duration_s: float, rng: np.random.Generator,
                     rate: float = OCT_RATE) -> np.ndarray:
    """Random ramps and holds sampled on a uniform grid at ``rate``, smoothed by a 3-sample average."""
    n = int(np.ceil(duration_s * rate)) + 3
    knots_t, knots_f = [0.0], [0.0]
    t, f = 0.0, 0.0
    total = n / rate
    while t < total:
        if rng.random() < 0.25:
            target = 0.0
        else:
            target = rng.uniform(0.0, profile.f_max)
        speed = rng.uniform(0.1, 2.0) * profile.f_max
        t += abs(target - f) / speed
        f = target
        knots_t.append(t)
        knots_f.append(f)
        t += rng.uniform(0.0, 0.3)
        knots_t.append(t)
        knots_f.append(f)
    grid = np.arange(n) / rate
    raw = np.interp(grid, knots_t, knots_f)
    smooth = np.convolve(raw, np.ones(3) / 3.0, mode="same")
    smooth[0], smooth[-1] = raw[0], raw[-1]
    return np.clip(smooth, 0.0, profile.f_max)


def viscoelastic_lag(force: np.ndarray, tau: float) -> np.ndarray:
    """First-order lag (time constant ``tau`` samples) of the effective deforming force."""
    if tau <= 0:
        return force.copy()
    alpha = 1.0 - np.exp(-1.0 / tau)
    return lfilter([alpha], [1.0, alpha - 1.0], force, zi=[(1.0 - alpha) * force[0]])[0]


@dataclass
class Session:
    oct: TimedStream
    force: TimedStream
    deformation_force: np.ndarray  # lagged force that shaped each A-scan


def simulate_session(profile: NeedleProfile, duration_s: float, rng: np.random.Generator,
                     d_c: int = 64, noise: bool = True) -> Session:
    if duration_s <= 0:
        raise ContractError(f"duration must be positive, got {duration_s}")
    base = force_trajectory(profile, duration_s + 0.01, rng)
    lagged = viscoelastic_lag(base, profile.hysteresis_tau)
    grid = np.arange(len(base)) / OCT_RATE
    oct_t = rng.uniform(0.0, 1.0 / OCT_RATE) + np.arange(int(round(duration_s * OCT_RATE))) / OCT_RATE
    f_t = rng.uniform(0.0, 1.0 / FORCE_RATE) + np.arange(int(round(duration_s * FORCE_RATE))) / FORCE_RATE
    deform = np.minimum(np.interp(oct_t, grid, lagged), profile.f_max)
    scans = simulate_ascans(deform, profile, rng if noise else None, d_c)
    forces = np.interp(f_t, grid, base)
    return Session(TimedStream(oct_t, scans), TimedStream(f_t, forces), deform)


# --- synchronization and windowing --------------------------------------------------

def synchronize(oct: TimedStream, force: TimedStream) -> list[tuple[int, float]]:
    """Nearest A-scan for each force sample; ties go to the earlier A-scan."""
    if len(oct) == 0 or len(force) == 0:
        raise ContractError("synchronize needs two non-empty streams")
    return list(zip(nearest_indices(oct.timestamps, force.timestamps).tolist(),
                    np.asarray(force.payloads, dtype=np.float64).tolist()))


def nearest_indices(ref_t: np.ndarray, query_t: np.ndarray) -> np.ndarray:
    ref_t = np.asarray(ref_t, dtype=np.float64)
    query_t = np.asarray(query_t, dtype=np.float64)
    right = np.clip(np.searchsorted(ref_t, query_t, side="left"), 0, len(ref_t) - 1)
    left = np.clip(right - 1, 0, len(ref_t) - 1)
    take_left = np.abs(query_t - ref_t[left]) <= np.abs(ref_t[right] - query_t)
    return np.where(take_left, left, right)


@dataclass
class SequenceSample:
    window: np.ndarray
    force: float
    meta: dict = field(default_factory=dict)


def window(pairs, t_s: int, scans: np.ndarray | None = None) -> list[SequenceSample]:
    """One t_s-row window (oldest row first) per pair with enough A-scan history."""
    if t_s < 1:
        raise ContractError(f"t_s must be >= 1, got {t_s}")
    out = []
    for idx, f in pairs:
        if idx >= t_s - 1:
            rows = np.arange(idx - t_s + 1, idx + 1)
            w = scans[rows] if scans is not None else rows
            out.append(SequenceSample(w, float(f), {"anchor": int(idx), "sources": rows}))
    return out


class Dataset:
    """Windows over a shared A-scan buffer, addressed by anchor index."""

    def __init__(self, scans: np.ndarray, anchors, forces, t_s: int, profile: dict | None = None,
                 tags=None):
        self.scans = np.ascontiguousarray(scans, dtype=np.float32)
        self.anchors = np.asarray(anchors, dtype=np.int64)
        self.forces = np.asarray(forces, dtype=np.float32)
        self.t_s = int(t_s)
        self.d_c = self.scans.shape[1]
        self.profile = dict(profile or {})
        self.tags = None if tags is None else np.asarray(tags)
        if t_s < 1:
            raise ContractError(f"t_s must be >= 1, got {t_s}")
        if len(self.anchors) != len(self.forces):
            raise ContractError("anchors and forces differ in length")
        if len(self.anchors) and (self.anchors.min() < t_s - 1 or self.anchors.max() >= len(self.scans)):
            raise ContractError("anchor without enough A-scan history")
        self._view = sliding_window_view(self.scans, t_s, axis=0)  # (N - t_s + 1, d_c, t_s)

    def __len__(self) -> int:
        return len(self.anchors)

    @property
    def source_anchors(self) -> np.ndarray:
        """Anchor positions in the original OCT stream (differs from ``anchors`` after a file round trip)."""
        src = self.profile.get("source_anchors")
        return np.asarray(src, dtype=np.int64) if src is not None else self.anchors

    def windows(self, idx=None) -> np.ndarray:
        a = self.anchors if idx is None else self.anchors[idx]
        return self._view[a - self.t_s + 1].transpose(0, 2, 1)

    def sample(self, i: int) -> SequenceSample:
        a = int(self.anchors[i])
        src = int(self.source_anchors[i])
        return SequenceSample(self.windows([i])[0].copy(), float(self.forces[i]),
                              {"anchor": src, "sources": np.arange(src - self.t_s + 1, src + 1)})

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx, dtype=np.int64)
        prof = dict(self.profile)
        if "source_anchors" in prof:
            prof["source_anchors"] = self.source_anchors[idx].tolist()
        return Dataset(self.scans, self.anchors[idx], self.forces[idx], self.t_s, prof,
                       None if self.tags is None else self.tags[idx])


def session_dataset(session: Session, t_s: int, stride: int = 1, min_history: int | None = None,
                    meta: dict | None = None) -> Dataset:
    """Synchronize a session and window every ``stride``-th pair.

    Pairs are kept when their anchor has at least ``min_history`` (default
    t_s - 1) predecessors, so datasets built with different t_s from one
    session can share exactly the same anchors.
    """
    if stride < 1:
        raise ContractError(f"stride must be >= 1, got {stride}")
    need = t_s - 1 if min_history is None else max(min_history, t_s - 1)
    idx = nearest_indices(session.oct.timestamps, session.force.timestamps)
    forces = np.asarray(session.force.payloads)
    keep = np.flatnonzero(idx >= need)[::stride]
    info = dict(meta or {})
    info.update({"stride": stride, "n_oct": len(session.oct), "n_force": len(session.force)})
    return Dataset(session.oct.payloads, idx[keep], forces[keep], t_s, info)


def build_dataset(profile: NeedleProfile | str, duration_s: float, t_s: int, seed: int, d_c: int = 64,
                  stride: int = 1, min_history: int | None = None) -> Dataset:
    """Simulate a seeded session and window every ``stride``-th synchronized force sample."""
    if isinstance(profile, str):
        profile = get_profile(profile)
    session = simulate_session(profile, duration_s, np.random.default_rng(seed), d_c)
    meta = {"profile": profile.to_dict(), "seed": seed, "duration_s": duration_s}
    return session_dataset(session, t_s, stride, min_history, meta)


def split(dataset: Dataset, train_frac: float = 0.8, rng: np.random.Generator | None = None
          ) -> tuple[Dataset, Dataset]:
    """Contiguous time-block split: the earliest windows train, the latest test.

    Test windows whose rows would reach back into the training block are
    dropped, so the anchor gap at the boundary is at least t_s. ``rng`` is
    accepted for interface symmetry; the split itself is deterministic.
    """
    if not 0.0 < train_frac < 1.0:
        raise ContractError(f"train_frac must be in (0, 1), got {train_frac}")
    order = np.argsort(dataset.source_anchors, kind="stable")
    n = len(order)
    n_train = int(round(train_frac * n))
    if n_train < 1 or n_train >= n:
        raise ContractError(f"dataset of {n} windows is too small to split at {train_frac}")
    train_idx = order[:n_train]
    src = dataset.source_anchors
    last_train = src[train_idx].max()
    test_idx = order[n_train:]
    test_idx = test_idx[src[test_idx] - last_train >= dataset.t_s]
    if len(test_idx) == 0 or len(test_idx) < (n - n_train) - max(1, int(0.02 * n)):
        raise ContractError(f"dataset of {n} windows is too small to honor the no-overlap gap")
    return dataset.subset(train_idx), dataset.subset(test_idx)


# --- dataset files ---------------------------------------------------------------------
# little-endian: "OCTF" | u16 version | u32 t_s | u32 d_c | u64 n | u32 json_len, profile JSON |
# n x (f32 force, f32[t_s*d_c] window) | u32 CRC32 of everything before it

DATA_MAGIC = b"OCTF"
DATA_VERSION = 1


def dumps_dataset(ds: Dataset) -> bytes:
    buf = io.BytesIO()
    buf.write(DATA_MAGIC)
    buf.write(struct.pack("<HIIQ", DATA_VERSION, ds.t_s, ds.d_c, len(ds)))
    prof = dict(ds.profile)
    prof["source_anchors"] = ds.source_anchors.tolist()
    if ds.tags is not None:
        prof["tags"] = [str(t) for t in ds.tags]
    blob = json.dumps(prof, sort_keys=True).encode("utf-8")
    buf.write(struct.pack("<I", len(blob)))
    buf.write(blob)
    rec = np.empty((len(ds), 1 + ds.t_s * ds.d_c), dtype="<f4")
    if len(ds):
        rec[:, 0] = ds.forces
        rec[:, 1:] = ds.windows().reshape(len(ds), -1)
    buf.write(rec.tobytes())
    body = buf.getvalue()
    return body + struct.pack("<I", zlib.crc32(body))


def save_dataset(ds: Dataset, path) -> None:
    Path(path).write_bytes(dumps_dataset(ds))


def loads_dataset(data: bytes) -> Dataset:
    if len(data) < 4 or data[:4] != DATA_MAGIC:
        raise DataFormatError("bad magic at offset 0: not a dataset file")
    if len(data) < 26:
        raise DataFormatError(f"truncated header: {len(data)} bytes")
    version, t_s, d_c, n = struct.unpack_from("<HIIQ", data, 4)
    if version != DATA_VERSION:
        raise DataFormatError(f"unsupported dataset version {version} at offset 4")
    if t_s < 1 or d_c < 1:
        raise DataFormatError(f"invalid dimensions t_s={t_s}, d_c={d_c} at offset 6")
    blob_len = struct.unpack_from("<I", data, 22)[0]
    pos = 26
    if pos + blob_len > len(data):
        raise DataFormatError(f"truncated profile blob at offset {pos}")
    try:
        profile = json.loads(data[pos:pos + blob_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise DataFormatError(f"corrupt profile blob at offset {pos}: {exc}") from None
    pos += blob_len
    rec_size = 4 * (1 + t_s * d_c)
    available = max(len(data) - 4 - pos, 0)
    if available < n * rec_size:
        bad = available // rec_size
        raise DataFormatError(f"file truncated in record {bad} of {n} (offset {pos + bad * rec_size})")
    if available > n * rec_size:
        raise DataFormatError(f"{available - n * rec_size} unexpected bytes after record {n - 1}")
    end = pos + n * rec_size
    crc = struct.unpack_from("<I", data, end)[0]
    if zlib.crc32(data[:end]) != crc:
        raise DataFormatError(f"CRC mismatch at offset {end}")
    rec = np.frombuffer(data, dtype="<f4", count=n * (1 + t_s * d_c), offset=pos).reshape(n, -1)
    scans = rec[:, 1:].reshape(n * t_s, d_c).astype(np.float32)
    anchors = np.arange(n, dtype=np.int64) * t_s + t_s - 1
    tags = profile.pop("tags", None)
    if scans.shape[0] == 0:
        scans = np.zeros((t_s, d_c), dtype=np.float32)
    return Dataset(scans, anchors, rec[:, 0].copy(), t_s, profile, tags)


def load_dataset(path) -> Dataset:
    return loads_dataset(Path(path).read_bytes())
