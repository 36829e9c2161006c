"""The nine force-regression architectures, streaming inference and model files."""

from __future__ import annotations

import io
import json
import struct
import zlib
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import numerics as nx
from .layers import (
    GRU,
    ConvGRU,
    Dense,
    Module,
    ResNetTrunk,
    TrunkConfig,
    global_avg_pool,
)
from .numerics import ContractError, Tensor

KINDS = (
    "convgru_cnn_plus",
    "convgru_cnn",
    "gru",
    "cnn1d",
    "cnn_gru",
    "cnn_convgru",
    "cnn2d",
    "gru_cnn",
    "mip_gpm",
)
STREAMING_KINDS = frozenset({"convgru_cnn_plus", "convgru_cnn", "gru", "gru_cnn"})
CNN_KINDS = frozenset({"convgru_cnn_plus", "convgru_cnn", "cnn1d", "cnn_gru", "cnn_convgru", "cnn2d", "gru_cnn"})

DISPLAY_NAMES = {
    "convgru_cnn_plus": "convGRU-CNN+",
    "convgru_cnn": "convGRU-CNN",
    "gru": "GRU",
    "cnn1d": "1DCNN",
    "cnn_gru": "CNN-GRU",
    "cnn_convgru": "CNN-convGRU",
    "cnn2d": "2DCNN",
    "gru_cnn": "GRU-CNN",
    "mip_gpm": "MIP-GPM",
}


class CapabilityError(RuntimeError):
    """The model kind does not support the requested operation."""


class ModelFormatError(ValueError):
    """A model file is truncated, corrupt or of an unsupported version."""


@dataclass
class ArchSpec:
    kind: str
    t_s: int = 50
    d_c: int = 64
    cnn_groups: list = field(default_factory=lambda: [(32, 2), (64, 2), (128, 2)])
    gru_hidden: int = 128
    convgru_channels: int = 16
    convgru_width: int = 3
    stem_channels: int = 16
    stem_width: int = 5
    p_di: float = 0.1
    p_do: float = 0.2
    seed: int = 0

    def __post_init__(self):
        self.cnn_groups = [tuple(int(v) for v in g) for g in self.cnn_groups]

    def validate(self) -> "ArchSpec":
        if self.kind not in KINDS:
            raise ContractError(f"unknown model kind {self.kind!r}; expected one of {', '.join(KINDS)}")
        if self.t_s < 1:
            raise ContractError(f"t_s must be >= 1, got {self.t_s}")
        if self.d_c < 8:
            raise ContractError(f"d_c must be >= 8, got {self.d_c}")
        if self.kind in CNN_KINDS and not self.cnn_groups:
            raise ContractError(f"{self.kind} needs at least one CNN group")
        if any(f < 1 or n < 1 for f, n in self.cnn_groups):
            raise ContractError(f"invalid CNN groups {self.cnn_groups}")
        if min(self.gru_hidden, self.convgru_channels, self.convgru_width, self.stem_channels,
               self.stem_width) < 1:
            raise ContractError("layer sizes must be positive")
        if self.convgru_width % 2 == 0:
            raise ContractError(f"convGRU kernel width must be odd, got {self.convgru_width}")
        for p in (self.p_di, self.p_do):
            if not 0.0 <= p < 1.0:
                raise ContractError(f"dropout probability must be in [0, 1), got {p}")
        return self

    @property
    def effective_t_s(self) -> int:
        return 1 if self.kind in ("cnn1d", "mip_gpm") else self.t_s

    def to_dict(self) -> dict:
        d = asdict(self)
        d["cnn_groups"] = [list(g) for g in self.cnn_groups]
        return d


# --- networks ------------------------------------------------------------------
# Every network maps normalized windows x (B, T, d_c) to normalized forces (B,).

def _trunk(spec: ArchSpec, in_channels: int, rng, dtype, dim: int = 1) -> ResNetTrunk:
    return ResNetTrunk(TrunkConfig(in_channels, list(spec.cnn_groups), spec.stem_channels, spec.stem_width,
                                   3, dim), rng, dtype)


def _sequence_layout(x: Tensor) -> Tensor:
    """(B, T, L) -> (T, L, B, 1)."""
    B, T, L = x.shape
    return x.transpose(1, 2, 0).reshape(T, L, B, 1)


class ConvGRUCNN(Module):
    def __init__(self, spec: ArchSpec, rng, dtype, plus: bool):
        super().__init__()
        self.add_child("convgru", ConvGRU(1, spec.convgru_channels, spec.convgru_width, rng,
                                          t_max=spec.t_s if plus else None,
                                          p_di=spec.p_di if plus else 0.0,
                                          p_do=spec.p_do if plus else 0.0, dtype=dtype))
        self.add_child("trunk", _trunk(spec, spec.convgru_channels, rng, dtype))
        self.add_child("head", Dense(self.trunk.out_channels, 1, rng, dtype))

    def _readout(self, h: Tensor) -> Tensor:
        feat = self.trunk(h.transpose(1, 2, 0))
        return self.head(feat).reshape(-1)

    def __call__(self, x: Tensor, rng=None) -> Tensor:
        h = self.convgru(_sequence_layout(x), rng)
        return self._readout(self.convgru.emit(h, rng))

    def stream_init(self, d_c: int) -> list:
        return [self.convgru.initial_state(1, d_c)]

    def stream_step(self, hiddens: list, scan: Tensor, t: int) -> Tensor:
        h = self.convgru(_sequence_layout(scan.reshape(1, 1, -1)), t0=t, h0=hiddens[0])
        hiddens[0] = h
        return self._readout(h)


class GRUNet(Module):
    def __init__(self, spec: ArchSpec, rng, dtype, layers: int = 3):
        super().__init__()
        self.grus = []
        n_in = spec.d_c
        for i in range(layers):
            self.grus.append(self.add_child(f"gru{i}", GRU(n_in, spec.gru_hidden, rng, dtype)))
            n_in = spec.gru_hidden
        self.add_child("head", Dense(spec.gru_hidden, 1, rng, dtype))

    def __call__(self, x: Tensor, rng=None) -> Tensor:
        seq = x.transpose(1, 0, 2)
        outs = None
        for gru in self.grus:
            outs = gru(seq)
            seq = nx.stack(outs, axis=0)
        return self.head(outs[-1]).reshape(-1)

    def stream_init(self, d_c: int) -> list:
        return [g.initial_state(1) for g in self.grus]

    def stream_step(self, hiddens: list, scan: Tensor, t: int) -> Tensor:
        inp = scan.reshape(1, -1)
        for i, gru in enumerate(self.grus):
            hiddens[i] = gru.step(inp, hiddens[i])
            inp = hiddens[i].reshape(1, gru.hidden)
        return self.head(inp).reshape(-1)


class CNN1D(Module):
    def __init__(self, spec: ArchSpec, rng, dtype):
        super().__init__()
        self.add_child("trunk", _trunk(spec, 1, rng, dtype))
        self.add_child("head", Dense(self.trunk.out_channels, 1, rng, dtype))

    def __call__(self, x: Tensor, rng=None) -> Tensor:
        B, T, L = x.shape
        newest = x[:, T - 1:T, :]
        return self.head(self.trunk(newest)).reshape(-1)


class CNNGRU(Module):
    def __init__(self, spec: ArchSpec, rng, dtype):
        super().__init__()
        self.add_child("trunk", _trunk(spec, 1, rng, dtype))
        feat = self.trunk.out_channels
        self.add_child("gru0", GRU(feat, spec.gru_hidden, rng, dtype))
        self.add_child("gru1", GRU(spec.gru_hidden, spec.gru_hidden, rng, dtype))
        self.add_child("head", Dense(spec.gru_hidden, 1, rng, dtype))

    def __call__(self, x: Tensor, rng=None) -> Tensor:
        B, T, L = x.shape
        feats = self.trunk(x.reshape(B * T, 1, L)).reshape(B, T, -1).transpose(1, 0, 2)
        outs = self.gru0(feats)
        outs = self.gru1(nx.stack(outs, axis=0))
        return self.head(outs[-1]).reshape(-1)


class CNNConvGRU(Module):
    def __init__(self, spec: ArchSpec, rng, dtype):
        super().__init__()
        self.add_child("trunk", _trunk(spec, 1, rng, dtype))
        self.add_child("convgru", ConvGRU(self.trunk.out_channels, spec.convgru_channels, spec.convgru_width,
                                          rng, dtype=dtype))
        self.add_child("head", Dense(spec.convgru_channels, 1, rng, dtype))

    def __call__(self, x: Tensor, rng=None) -> Tensor:
        B, T, L = x.shape
        maps = self.trunk.features(x.reshape(B * T, 1, L))  # (B*T, F, L')
        _, F, Lp = maps.shape
        seq = maps.reshape(B, T, F, Lp).transpose(1, 3, 0, 2)  # (T, L', B, F)
        h = self.convgru(seq, rng)
        pooled = global_avg_pool(h.transpose(1, 2, 0))
        return self.head(pooled).reshape(-1)


class CNN2D(Module):
    def __init__(self, spec: ArchSpec, rng, dtype):
        super().__init__()
        self.add_child("trunk", _trunk(spec, 1, rng, dtype, dim=2))
        self.add_child("head", Dense(self.trunk.out_channels, 1, rng, dtype))

    def __call__(self, x: Tensor, rng=None) -> Tensor:
        B, T, L = x.shape
        return self.head(self.trunk(x.reshape(B, 1, T, L))).reshape(-1)


class GRUCNN(Module):
    def __init__(self, spec: ArchSpec, rng, dtype):
        super().__init__()
        self.add_child("gru", GRU(spec.d_c, spec.d_c, rng, dtype))
        self.add_child("trunk", _trunk(spec, 1, rng, dtype))
        self.add_child("head", Dense(self.trunk.out_channels, 1, rng, dtype))

    def _readout(self, h: Tensor) -> Tensor:
        B = h.size // self.gru.hidden
        return self.head(self.trunk(h.reshape(B, 1, self.gru.hidden))).reshape(-1)

    def __call__(self, x: Tensor, rng=None) -> Tensor:
        outs = self.gru(x.transpose(1, 0, 2))
        return self._readout(outs[-1])

    def stream_init(self, d_c: int) -> list:
        return [self.gru.initial_state(1)]

    def stream_step(self, hiddens: list, scan: Tensor, t: int) -> Tensor:
        hiddens[0] = self.gru.step(scan.reshape(1, -1), hiddens[0])
        return self._readout(hiddens[0])


def _make_net(spec: ArchSpec, rng, dtype) -> Module | None:
    kind = spec.kind
    if kind == "convgru_cnn_plus":
        return ConvGRUCNN(spec, rng, dtype, plus=True)
    if kind == "convgru_cnn":
        return ConvGRUCNN(spec, rng, dtype, plus=False)
    if kind == "gru":
        return GRUNet(spec, rng, dtype)
    if kind == "cnn1d":
        return CNN1D(spec, rng, dtype)
    if kind == "cnn_gru":
        return CNNGRU(spec, rng, dtype)
    if kind == "cnn_convgru":
        return CNNConvGRU(spec, rng, dtype)
    if kind == "cnn2d":
        return CNN2D(spec, rng, dtype)
    if kind == "gru_cnn":
        return GRUCNN(spec, rng, dtype)
    return None  # mip_gpm carries no trainable tensors


# --- model -----------------------------------------------------------------------

@dataclass
class Normalization:
    mean: np.ndarray
    std: np.ndarray
    force_scale: float = 1.0

    @classmethod
    def identity(cls, d_c: int) -> "Normalization":
        return cls(np.zeros(d_c, np.float32), np.ones(d_c, np.float32), 1.0)


@dataclass
class StreamState:
    hiddens: list
    t: int = 0
    _init: list = field(default_factory=list, repr=False)

    def reset(self) -> None:
        self.hiddens = [Tensor(np.zeros_like(h.data)) for h in self._init]
        self.t = 0


class Model:
    """A built architecture plus its input/output normalization."""

    def __init__(self, spec: ArchSpec, dtype=np.float32):
        self.spec = spec.validate()
        self.dtype = np.dtype(dtype)
        self.net = _make_net(spec, np.random.default_rng(spec.seed), self.dtype)
        self.norm = Normalization.identity(spec.d_c)
        self.gp = None  # fitted baseline for kind == "mip_gpm"
        self.metadata: dict = {}

    @property
    def kind(self) -> str:
        return self.spec.kind

    def named_parameters(self):
        return self.net.named_parameters() if self.net is not None else iter(())

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def param_count(self) -> int:
        return self.net.param_count() if self.net is not None else 0

    def train(self, mode: bool = True) -> "Model":
        if self.net is not None:
            self.net.train(mode)
        return self

    def eval(self) -> "Model":
        return self.train(False)

    # -- tensor plumbing --
    def normalize_input(self, windows: np.ndarray) -> np.ndarray:
        return ((np.asarray(windows, dtype=np.float64) - self.norm.mean) / self.norm.std).astype(self.dtype)

    def network_output(self, xn: Tensor, rng=None) -> Tensor:
        """Normalized predictions (B,) for normalized windows (B, T, d_c)."""
        return self.net(xn, rng)

    def _check_window(self, window: np.ndarray) -> np.ndarray:
        w = np.asarray(window.data if isinstance(window, Tensor) else window, dtype=np.float64)
        if w.ndim == 1:
            w = w[None, :]
        if w.ndim != 2 or w.shape[1] != self.spec.d_c:
            raise nx.DimensionError(f"window must be (rows, {self.spec.d_c}), got {w.shape}")
        if self.kind in STREAMING_KINDS:
            if w.shape[0] < 1:
                raise nx.DimensionError("window needs at least one row")
        elif self.kind not in ("cnn1d", "mip_gpm") and w.shape[0] != self.spec.t_s:
            raise nx.DimensionError(f"{self.kind} needs exactly t_s={self.spec.t_s} rows, got {w.shape[0]}")
        if not np.all(np.isfinite(w)):
            raise ContractError("window contains NaN or Inf")
        return w

    def forward(self, window, mode="eval") -> float:
        w = self._check_window(window)
        if self.kind == "mip_gpm":
            return float(self._mip_predict(w[None])[0])
        if mode not in ("eval", "train"):
            raise ContractError(f"mode must be 'train' or 'eval', got {mode!r}")
        prev = self.net.training
        self.net.train(mode == "train")
        try:
            out = self.net(Tensor(self.normalize_input(w[None])), np.random.default_rng(0))
        finally:
            self.net.train(prev)
        return float(out.data[0]) * self.norm.force_scale

    def predict(self, windows: np.ndarray, batch_size: int = 256) -> np.ndarray:
        """Eval-mode predictions (mN) for windows (N, T, d_c)."""
        windows = np.asarray(windows)
        if windows.ndim != 3 or windows.shape[2] != self.spec.d_c:
            raise nx.DimensionError(f"windows must be (N, T, {self.spec.d_c}), got {windows.shape}")
        if self.kind == "mip_gpm":
            return self._mip_predict(windows)
        self.eval()
        out = np.empty(len(windows), dtype=np.float64)
        for i in range(0, len(windows), batch_size):
            xb = Tensor(self.normalize_input(windows[i:i + batch_size]))
            out[i:i + batch_size] = self.net(xb).data
        return out * self.norm.force_scale

    def _mip_predict(self, windows: np.ndarray) -> np.ndarray:
        from .evaluation import gp_predict, mip_feature

        if self.gp is None:
            raise ContractError("MIP-GPM model has not been fitted")
        feats = np.array([mip_feature(w[-1]) for w in windows])
        mean, _ = gp_predict(self.gp, feats)
        return np.asarray(mean) + self.metadata.get("gp_offset", 0.0)

    # -- streaming --
    def stream_state(self) -> StreamState:
        if self.kind not in STREAMING_KINDS:
            raise CapabilityError(f"{self.kind} does not support streaming inference")
        init = self.net.stream_init(self.spec.d_c)
        return StreamState([Tensor(np.zeros_like(h.data)) for h in init], 0, init)

    def forward_stream(self, state: StreamState, ascan) -> float:
        if self.kind not in STREAMING_KINDS:
            raise CapabilityError(f"{self.kind} does not support streaming inference")
        a = np.asarray(ascan.data if isinstance(ascan, Tensor) else ascan, dtype=np.float64).reshape(-1)
        if a.shape[0] != self.spec.d_c:
            raise nx.DimensionError(f"A-scan must have {self.spec.d_c} pixels, got {a.shape[0]}")
        if not np.all(np.isfinite(a)):
            raise ContractError("A-scan contains NaN or Inf")
        self.eval()
        out = self.net.stream_step(state.hiddens, Tensor(self.normalize_input(a[None])[0]), state.t)
        state.t += 1
        return float(out.data[0]) * self.norm.force_scale


def build(spec: ArchSpec, dtype=np.float32) -> Model:
    return Model(spec, dtype)


def forward(model: Model, window, mode="eval") -> float:
    return model.forward(window, mode)


def forward_stream(model: Model, state: StreamState, ascan, mode="eval") -> tuple[float, StreamState]:
    if mode != "eval":
        raise ContractError("streaming inference runs in eval mode only")
    return model.forward_stream(state, ascan), state


# --- model files -------------------------------------------------------------------
# little-endian: "NFMD" | u16 version | spec block | normalization block |
# u32 n_entries, entries (u16 name_len, name, u8 rank, u32 dims[rank], f32 payload) |
# u32 metadata_len, metadata JSON | u32 CRC32 of everything before it

MAGIC = b"NFMD"
VERSION = 1


def _state_arrays(model: Model) -> list[tuple[str, np.ndarray]]:
    entries = []
    if model.net is not None:
        entries += [(n, p.data) for n, p in model.net.named_parameters()]
        entries += [(n, b) for n, b in model.net.named_buffers()]
    if model.gp is not None:
        entries += [("gp.x", model.gp.x), ("gp.y", model.gp.y),
                    ("gp.hyper", np.array([model.gp.length_scale, model.gp.signal_var, model.gp.noise_var]))]
    return entries


def dumps(model: Model) -> bytes:
    s = model.spec
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<H", VERSION))
    buf.write(struct.pack("<BII", KINDS.index(s.kind), s.t_s, s.d_c))
    buf.write(struct.pack("<B", len(s.cnn_groups)))
    for feat, blocks in s.cnn_groups:
        buf.write(struct.pack("<II", feat, blocks))
    buf.write(struct.pack("<IIIIIddQ", s.gru_hidden, s.convgru_channels, s.convgru_width, s.stem_channels,
                          s.stem_width, s.p_di, s.p_do, s.seed))
    buf.write(struct.pack("<I", s.d_c))
    buf.write(np.asarray(model.norm.mean, "<f4").tobytes())
    buf.write(np.asarray(model.norm.std, "<f4").tobytes())
    buf.write(struct.pack("<f", model.norm.force_scale))
    entries = _state_arrays(model)
    buf.write(struct.pack("<I", len(entries)))
    for name, arr in entries:
        raw = name.encode("utf-8")
        buf.write(struct.pack("<H", len(raw)))
        buf.write(raw)
        buf.write(struct.pack("<B", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    meta = json.dumps({"spec": s.to_dict(), **model.metadata}, sort_keys=True).encode("utf-8")
    buf.write(struct.pack("<I", len(meta)))
    buf.write(meta)
    body = buf.getvalue()
    return body + struct.pack("<I", zlib.crc32(body))


def save(model: Model, path) -> None:
    Path(path).write_bytes(dumps(model))


class _Reader:
    def __init__(self, data: bytes, error=ModelFormatError):
        self.data = data
        self.pos = 0
        self.error = error

    def take(self, n: int, what: str) -> bytes:
        if n < 0 or self.pos + n > len(self.data):
            raise self.error(f"truncated file: need {n} bytes for {what} at offset {self.pos}, "
                             f"{len(self.data) - self.pos} available")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str, what: str):
        vals = struct.unpack(fmt, self.take(struct.calcsize(fmt), what))
        return vals if len(vals) > 1 else vals[0]


def loads(data: bytes) -> Model:
    r = _Reader(data)
    if r.take(4, "magic") != MAGIC:
        raise ModelFormatError("bad magic at offset 0: not a model file")
    version = r.unpack("<H", "version")
    if version != VERSION:
        raise ModelFormatError(f"unsupported model file version {version} at offset 4")
    if len(data) < 10:
        raise ModelFormatError("file too short for a CRC trailer")
    expected_crc = struct.unpack("<I", data[-4:])[0]
    r.data = data[:-4]
    kind_code, t_s, d_c = r.unpack("<BII", "spec header")
    if kind_code >= len(KINDS):
        raise ModelFormatError(f"unknown model kind code {kind_code} at offset 6")
    n_groups = r.unpack("<B", "group count")
    groups = [r.unpack("<II", f"group {i}") for i in range(n_groups)]
    gru_hidden, cg_ch, cg_w, stem_ch, stem_w, p_di, p_do, seed = r.unpack("<IIIIIddQ", "spec sizes")
    spec = ArchSpec(KINDS[kind_code], t_s, d_c, [tuple(g) for g in groups], gru_hidden, cg_ch, cg_w,
                    stem_ch, stem_w, p_di, p_do, seed)
    norm_len = r.unpack("<I", "normalization length")
    if norm_len != d_c:
        raise ModelFormatError(f"normalization length {norm_len} != d_c {d_c} at offset {r.pos - 4}")
    mean = np.frombuffer(r.take(4 * d_c, "input mean"), "<f4").astype(np.float32)
    std = np.frombuffer(r.take(4 * d_c, "input std"), "<f4").astype(np.float32)
    scale = r.unpack("<f", "force scale")
    n_entries = r.unpack("<I", "entry count")
    arrays: dict[str, np.ndarray] = {}
    for i in range(n_entries):
        start = r.pos
        name_len = r.unpack("<H", f"entry {i} name length")
        try:
            name = r.take(name_len, f"entry {i} name").decode("utf-8")
        except UnicodeDecodeError:
            raise ModelFormatError(f"entry {i} name is not UTF-8 at offset {start + 2}") from None
        rank = r.unpack("<B", f"entry {i} rank")
        dims = r.unpack(f"<{rank}I", f"entry {i} dims") if rank else ()
        dims = (dims,) if isinstance(dims, int) else tuple(dims)
        count = int(np.prod(dims)) if dims else 1
        arrays[name] = np.frombuffer(r.take(4 * count, f"entry {i} ({name}) payload"), "<f4").reshape(dims)
    meta_len = r.unpack("<I", "metadata length")
    meta = json.loads(r.take(meta_len, "metadata").decode("utf-8"))
    if r.pos != len(r.data):
        raise ModelFormatError(f"{len(r.data) - r.pos} unexpected trailing bytes at offset {r.pos}")
    if zlib.crc32(r.data) != expected_crc:
        raise ModelFormatError(f"CRC mismatch at offset {len(r.data)}")

    model = Model(spec)
    model.norm = Normalization(mean, std, float(scale))
    meta.pop("spec", None)
    model.metadata = meta
    targets = dict(_state_arrays(model)) if model.net is not None else {}
    for name, target in targets.items():
        if name not in arrays:
            raise ModelFormatError(f"missing parameter {name!r}")
        src = arrays.pop(name)
        if src.shape != target.shape:
            raise ModelFormatError(f"parameter {name!r} has shape {src.shape}, expected {target.shape}")
        target[...] = src
    if spec.kind == "mip_gpm" and "gp.x" in arrays:
        from .evaluation import gp_fit

        hyper = arrays.pop("gp.hyper")
        model.gp = gp_fit(arrays.pop("gp.x").astype(np.float64), arrays.pop("gp.y").astype(np.float64),
                          (float(hyper[0]), float(hyper[1]), float(hyper[2])))
    if arrays:
        raise ModelFormatError(f"unexpected parameters {sorted(arrays)}")
    return model.eval()


def load(path) -> Model:
    return loads(Path(path).read_bytes())
