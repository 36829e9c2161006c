"""Metrics, significance testing, boxplot statistics, timing and the MIP-GPM baseline."""

from __future__ import annotations

import csv
import io
import itertools
import json
import math
import time
from dataclasses import asdict, dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.linalg import LinAlgError, cho_factor, cho_solve
from scipy.stats import norm

from .numerics import ContractError

EXACT_WILCOXON_MAX_N = 12
GP_CAP = 2000


class DegenerateTestError(ValueError):
    """All paired differences are zero."""


class UndefinedCorrelationError(ValueError):
    """A vector has zero variance."""


class ConditioningError(ValueError):
    """The GP system is not positive definite."""


def _pair(pred, target) -> tuple[np.ndarray, np.ndarray]:
    p = np.asarray(pred, dtype=np.float64).ravel()
    t = np.asarray(target, dtype=np.float64).ravel()
    if len(p) != len(t) or len(p) == 0:
        raise ContractError(f"need equal nonzero lengths, got {len(p)} and {len(t)}")
    return p, t


def mae(pred, target) -> tuple[float, float]:
    p, t = _pair(pred, target)
    err = np.abs(p - t)
    return float(err.mean()), float(err.std())


def rmae(pred, target, f_ref: float | None = None) -> tuple[float, float]:
    p, t = _pair(pred, target)
    if f_ref is None:
        f_ref = float(np.mean(np.abs(t)))
    if not f_ref > 0:
        raise ContractError(f"f_ref must be positive, got {f_ref}")
    err = np.abs(p - t) / f_ref
    return float(err.mean()), float(err.std())


def pearson_cc(pred, target) -> float:
    p, t = _pair(pred, target)
    pc, tc = p - p.mean(), t - t.mean()
    sp, st = np.sqrt(pc @ pc), np.sqrt(tc @ tc)
    if sp == 0 or st == 0:
        raise UndefinedCorrelationError("correlation is undefined for a zero-variance vector")
    return float(np.clip((pc @ tc) / (sp * st), -1.0, 1.0))


# --- Wilcoxon signed-rank -------------------------------------------------------------

def _midranks(x: np.ndarray) -> np.ndarray:
    order = np.argsort(x, kind="stable")
    ranks = np.empty(len(x))
    sx = x[order]
    i = 0
    while i < len(x):
        j = i
        while j + 1 < len(x) and sx[j + 1] == sx[i]:
            j += 1
        ranks[order[i:j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    return ranks


def wilcoxon_signed_rank(abs_err_a, abs_err_b) -> tuple[float, float]:
    """Two-sided paired test; returns (W = min(W+, W-), p)."""
    a, b = _pair(abs_err_a, abs_err_b)
    d = a - b
    d = d[d != 0]
    n = len(d)
    if n == 0:
        raise DegenerateTestError("all paired differences are zero")
    ranks = _midranks(np.abs(d))
    w_plus = float(ranks[d > 0].sum())
    w_minus = float(ranks[d < 0].sum())
    w = min(w_plus, w_minus)
    if n <= EXACT_WILCOXON_MAX_N:
        # every sign pattern over the observed ranks
        signs = np.array(list(itertools.product((0.0, 1.0), repeat=n)))
        wp = signs @ ranks
        stat = np.minimum(wp, ranks.sum() - wp)
        p = float(np.mean(stat <= w + 1e-9))
        return w, min(p, 1.0)
    mean = n * (n + 1) / 4.0
    _, counts = np.unique(np.abs(d), return_counts=True)
    var = n * (n + 1) * (2 * n + 1) / 24.0 - float(np.sum(counts ** 3 - counts)) / 48.0
    z = (abs(w - mean) - 0.5) / math.sqrt(var)
    p = 2.0 * norm.sf(max(z, 0.0))
    return w, float(min(p, 1.0))


# --- boxplots -------------------------------------------------------------------------

@dataclass
class BoxplotStats:
    median: float
    q1: float
    q3: float
    whisker_lo: float
    whisker_hi: float
    notch_lo: float
    notch_hi: float
    outliers: list = field(default_factory=list)


def boxplot_stats(values) -> BoxplotStats:
    v = np.sort(np.asarray(values, dtype=np.float64).ravel())
    n = len(v)
    if n < 5:
        raise ContractError(f"boxplot needs at least 5 values, got {n}")
    q1, med, q3 = np.quantile(v, [0.25, 0.5, 0.75], method="linear")
    iqr = q3 - q1
    inside = v[(v >= q1 - 1.5 * iqr) & (v <= q3 + 1.5 * iqr)]
    half = 1.57 * iqr / math.sqrt(n)
    outliers = v[(v < q1 - 1.5 * iqr) | (v > q3 + 1.5 * iqr)]
    return BoxplotStats(float(med), float(q1), float(q3), float(inside.min()), float(inside.max()),
                        float(med - half), float(med + half), outliers.tolist())


# --- timing ------------------------------------------------------------------------------

def time_inference(model, sample, reps: int = 100, warmup: int = 10) -> tuple[float, float]:
    """Mean and std (ms) of single forward passes after ``warmup`` untimed calls."""
    if reps < 2:
        raise ContractError(f"reps must be >= 2, got {reps}")
    for _ in range(warmup):
        model.forward(sample)
    times = np.empty(reps)
    for i in range(reps):
        t0 = time.perf_counter()
        model.forward(sample)
        times[i] = time.perf_counter() - t0
    times *= 1e3
    return float(times.mean()), float(times.std())


# --- MIP-GPM baseline ----------------------------------------------------------------------

def median_filter(x, k: int) -> np.ndarray:
    """Sliding median with edge replication."""
    if k < 1 or k % 2 == 0:
        raise ContractError(f"median kernel must be odd and >= 1, got {k}")
    x = np.asarray(x, dtype=np.float64)
    if k == 1:
        return x.copy()
    padded = np.pad(x, k // 2, mode="edge")
    return np.median(sliding_window_view(padded, k), axis=-1)


def mip_feature(ascan, median_k: int = 5) -> float:
    x = median_filter(ascan, median_k)
    return float(np.argmax(x)) / (len(x) - 1)


@dataclass
class GPModel:
    x: np.ndarray
    y: np.ndarray
    length_scale: float
    signal_var: float
    noise_var: float
    chol: tuple = field(repr=False, default=None)
    alpha: np.ndarray = field(repr=False, default=None)


def rbf_kernel(a, b, length_scale: float, signal_var: float) -> np.ndarray:
    d = np.subtract.outer(np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64))
    return signal_var * np.exp(-0.5 * (d / length_scale) ** 2)


def gp_fit(features, targets, hyper: tuple[float, float, float], cap: int = GP_CAP,
           rng: np.random.Generator | None = None) -> GPModel:
    """Exact GP regression with an RBF kernel; hyper = (length_scale, signal_var, noise_var)."""
    x = np.asarray(features, dtype=np.float64).ravel()
    y = np.asarray(targets, dtype=np.float64).ravel()
    if len(x) != len(y) or len(x) == 0:
        raise ContractError("features and targets must be equal nonzero length")
    ell, sf2, sn2 = hyper
    if not (ell > 0 and sf2 > 0):
        raise ContractError(f"length scale and signal variance must be positive, got {hyper}")
    if not sn2 > 0:
        raise ConditioningError(f"noise variance must be positive, got {sn2}")
    if len(x) > cap:
        rng = rng or np.random.default_rng(0)
        keep = np.sort(rng.choice(len(x), cap, replace=False))
        x, y = x[keep], y[keep]
    K = rbf_kernel(x, x, ell, sf2) + sn2 * np.eye(len(x))
    try:
        chol = cho_factor(K, lower=True)
    except LinAlgError as exc:
        raise ConditioningError(f"kernel matrix is not positive definite: {exc}") from None
    return GPModel(x, y, ell, sf2, sn2, chol, cho_solve(chol, y))


def gp_predict(gp: GPModel, features) -> tuple[np.ndarray, np.ndarray]:
    xs = np.atleast_1d(np.asarray(features, dtype=np.float64))
    Ks = rbf_kernel(xs, gp.x, gp.length_scale, gp.signal_var)
    mean = Ks @ gp.alpha
    v = cho_solve(gp.chol, Ks.T)
    var = np.maximum(gp.signal_var - np.sum(Ks * v.T, axis=1), 0.0)
    return mean, var


def fit_mip_gpm(model, windows: np.ndarray, forces: np.ndarray, val_windows=None, val_forces=None,
                median_k: int = 5, grid=None, cap: int = GP_CAP):
    """Fit the MIP-GPM baseline in place; hyperparameters grid-searched on validation MAE."""
    forces = np.asarray(forces, dtype=np.float64)
    feats = np.array([mip_feature(w[-1], median_k) for w in windows])
    offset = float(forces.mean())
    scale = float(forces.std()) or 1.0
    y = forces - offset
    grid = grid or [(ell, scale ** 2, (nf * scale) ** 2)
                    for ell in (0.02, 0.05, 0.1, 0.2) for nf in (0.05, 0.1, 0.3)]
    best = None
    if val_windows is not None and len(val_windows) and len(grid) > 1:
        vfeats = np.array([mip_feature(w[-1], median_k) for w in val_windows])
        for hyper in grid:
            try:
                gp = gp_fit(feats, y, hyper, cap)
            except ConditioningError:
                continue
            err = float(np.mean(np.abs(gp_predict(gp, vfeats)[0] + offset - val_forces)))
            if best is None or err < best[0]:
                best = (err, hyper)
    hyper = best[1] if best else grid[0]
    model.gp = gp_fit(feats, y, hyper, cap)
    model.metadata["gp_offset"] = offset
    model.metadata["median_k"] = median_k
    return model


# --- reports ---------------------------------------------------------------------------------

@dataclass
class ModelResult:
    name: str
    mae_mean: float
    mae_std: float
    rmae_mean: float
    rmae_std: float
    cc: float
    it_mean: float
    it_std: float
    boxplot: BoxplotStats


@dataclass
class EvalReport:
    results: list
    p_values: dict  # (name_a, name_b) -> p or None
    f_ref: float
    n_test: int

    def result(self, name: str) -> ModelResult:
        for r in self.results:
            if r.name == name:
                return r
        raise KeyError(name)

    def to_csv(self) -> str:
        """Accuracy metrics and p-values; wall-clock timings live in :meth:`timing_csv`."""
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        names = [r.name for r in self.results]
        w.writerow(["model", "mae_mean", "mae_std", "rmae_mean", "rmae_std", "cc"] + [f"p_vs_{n}" for n in names])
        for r in self.results:
            ps = [_fmt_p(self.p_values.get((r.name, n))) for n in names]
            w.writerow([r.name, f"{r.mae_mean:.6g}", f"{r.mae_std:.6g}", f"{r.rmae_mean:.6g}",
                        f"{r.rmae_std:.6g}", f"{r.cc:.6g}"] + ps)
        return buf.getvalue()

    def timing_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["model", "it_mean_ms", "it_std_ms"])
        for r in self.results:
            w.writerow([r.name, f"{r.it_mean:.6g}", f"{r.it_std:.6g}"])
        return buf.getvalue()

    def boxplot_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["model", "median", "q1", "q3", "whisker_lo", "whisker_hi", "notch_lo", "notch_hi",
                    "n_outliers"])
        for r in self.results:
            b = r.boxplot
            w.writerow([r.name] + [f"{v:.6g}" for v in (b.median, b.q1, b.q3, b.whisker_lo, b.whisker_hi,
                                                         b.notch_lo, b.notch_hi)] + [len(b.outliers)])
        return buf.getvalue()

    def to_json(self) -> str:
        return json.dumps({
            "f_ref": self.f_ref,
            "n_test": self.n_test,
            "rmae_normalizer": "mean |target| over the test set",
            "std": "population std over test samples",
            "models": [asdict(r) for r in self.results],
            "p_values": [{"a": a, "b": b, "p": p} for (a, b), p in sorted(self.p_values.items())],
        }, indent=2, sort_keys=True)

    def table(self) -> str:
        lines = ["rMAE normalized by mean |target|; std over test samples",
                 f"{'Model':<16}{'MAE [mN]':>20}{'rMAE':>20}{'CC':>10}{'IT [ms]':>18}"]
        for r in self.results:
            lines.append(f"{r.name:<16}{r.mae_mean:>11.2f} ± {r.mae_std:<6.2f}{r.rmae_mean:>11.4f} ± "
                         f"{r.rmae_std:<6.4f}{r.cc:>10.4f}{r.it_mean:>9.2f} ± {r.it_std:<5.2f}")
        return "\n".join(lines)


def _fmt_p(p) -> str:
    return "n/a" if p is None else f"{p:.6g}"


def compare_models(models: dict, test_windows: np.ndarray, test_forces: np.ndarray, reps: int = 100,
                   f_ref: float | None = None, predictions: dict | None = None) -> EvalReport:
    """Full metric suite for named models (anything with ``predict`` and ``forward``)."""
    target = np.asarray(test_forces, dtype=np.float64)
    if f_ref is None:
        f_ref = float(np.mean(np.abs(target)))
    preds = dict(predictions or {})
    results, errors = [], {}
    for name, model in models.items():
        p = preds[name] if name in preds else np.asarray(model.predict(test_windows), dtype=np.float64)
        err = np.abs(p - target)
        errors[name] = err
        m, s = mae(p, target)
        rm, rs = rmae(p, target, f_ref)
        try:
            cc = pearson_cc(p, target)
        except UndefinedCorrelationError:
            cc = float("nan")
        it_mean, it_std = time_inference(model, test_windows[0], reps) if reps >= 2 else (0.0, 0.0)
        results.append(ModelResult(name, m, s, rm, rs, cc, it_mean, it_std, boxplot_stats(err)))
    p_values = {}
    for a in models:
        for b in models:
            try:
                p_values[(a, b)] = wilcoxon_signed_rank(errors[a], errors[b])[1]
            except DegenerateTestError:
                p_values[(a, b)] = None
    return EvalReport(results, p_values, f_ref, len(target))
