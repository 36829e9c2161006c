"""MSE loss, Adam, the step-halving learning-rate schedule and the epoch loop."""

from __future__ import annotations

import csv
import io
import time
from dataclasses import dataclass, field, replace

import numpy as np

from . import numerics as nx
from .numerics import ContractError, Tensor


class TrainingDivergedError(RuntimeError):
    """The loss became NaN or infinite."""


def mse_loss(pred: Tensor, target: Tensor) -> Tensor:
    if pred.shape != target.shape:
        raise nx.DimensionError(f"mse_loss shape mismatch: {pred.shape} vs {target.shape}")
    return nx.mean(nx.square(pred - target))


@dataclass
class TrainConfig:
    batch_size: int = 100
    lr0: float = 1e-4
    halve_every: int = 30
    max_epochs: int = 300
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    shuffle: bool = True
    clip_norm: float = 5.0
    val_frac: float = 0.125

    def validate(self) -> "TrainConfig":
        if self.batch_size < 2:
            raise ContractError(f"batch size must be >= 2, got {self.batch_size}")
        if not self.lr0 > 0:
            raise ContractError(f"lr0 must be positive, got {self.lr0}")
        if self.halve_every < 1:
            raise ContractError(f"halve_every must be >= 1, got {self.halve_every}")
        if self.max_epochs < 0:
            raise ContractError(f"max_epochs must be >= 0, got {self.max_epochs}")
        return self


def desk_config(**overrides) -> TrainConfig:
    """30-epoch preset for CPU-scale runs: smaller batches and a larger step that halves every 10 epochs."""
    return replace(TrainConfig(batch_size=32, max_epochs=30, lr0=3e-3, halve_every=10), **overrides).validate()


def lr_schedule(epoch: int, config: TrainConfig) -> float:
    if epoch < 0:
        raise ContractError(f"epoch must be >= 0, got {epoch}")
    return config.lr0 * 0.5 ** (epoch // config.halve_every)


@dataclass
class AdamState:
    m: list
    v: list
    t: int = 0

    @classmethod
    def zeros(cls, params) -> "AdamState":
        return cls([np.zeros_like(p.data if isinstance(p, Tensor) else p) for p in params],
                   [np.zeros_like(p.data if isinstance(p, Tensor) else p) for p in params])


def adam_step(params: list, grads: list, state: AdamState, lr: float, beta1: float = 0.9,
              beta2: float = 0.999, eps: float = 1e-8) -> None:
    """In-place bias-corrected Adam update of arrays (or Tensors) ``params``."""
    if len(params) != len(grads) or len(params) != len(state.m):
        raise nx.DimensionError("adam_step: params, grads and state differ in length")
    state.t += 1
    c1 = 1.0 - beta1 ** state.t
    c2 = 1.0 - beta2 ** state.t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        arr = p.data if isinstance(p, Tensor) else p
        if g.shape != arr.shape:
            raise nx.DimensionError(f"adam_step: gradient {g.shape} vs parameter {arr.shape}")
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        arr -= (lr * (m / c1) / (np.sqrt(v / c2) + eps)).astype(arr.dtype)


@dataclass
class TrainHistory:
    loss: list = field(default_factory=list)
    val_mae: list = field(default_factory=list)
    lr: list = field(default_factory=list)
    seconds: list = field(default_factory=list)
    metadata: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.loss)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["epoch", "loss", "val_mae", "lr", "seconds"])
        for i in range(len(self)):
            w.writerow([i, f"{self.loss[i]:.9g}", f"{self.val_mae[i]:.9g}", f"{self.lr[i]:.9g}",
                        f"{self.seconds[i]:.6f}"])
        return buf.getvalue()


def fit_normalization(model, windows: np.ndarray, forces: np.ndarray) -> None:
    """Per-pixel z-score of the inputs and max-|F| scaling of the labels."""
    from .models import Normalization

    w = np.asarray(windows, dtype=np.float64)
    mean = w.mean(axis=(0, 1))
    std = w.std(axis=(0, 1))
    std = np.where(std > 1e-6, std, 1.0)
    scale = float(np.max(np.abs(forces))) if len(forces) else 1.0
    model.norm = Normalization(mean.astype(np.float32), std.astype(np.float32), scale if scale > 0 else 1.0)


def train_val_split(n: int, val_frac: float) -> tuple[np.ndarray, np.ndarray]:
    """Validation = the last ``val_frac`` of the (time-ordered) training windows."""
    n_val = int(round(val_frac * n))
    return np.arange(n - n_val), np.arange(n - n_val, n)


def clip_global_norm(grads: list, max_norm: float) -> list:
    """Rescale gradients so their joint L2 norm is at most ``max_norm`` (returns new arrays)."""
    total = float(np.sqrt(sum(float(np.sum(np.square(g, dtype=np.float64))) for g in grads)))
    if max_norm > 0 and total > max_norm:
        return [g * (max_norm / total) for g in grads]
    return grads


def train(model, dataset, config: TrainConfig, log=None):
    """Train ``model`` in place on ``dataset`` (train split); returns (model, TrainHistory).

    The last ``config.val_frac`` of the windows is held out for validation MAE.
    """
    from .evaluation import fit_mip_gpm

    config.validate()
    if dataset.t_s != model.spec.t_s or dataset.d_c != model.spec.d_c:
        raise ContractError(f"dataset (t_s={dataset.t_s}, d_c={dataset.d_c}) does not match model "
                            f"(t_s={model.spec.t_s}, d_c={model.spec.d_c})")
    windows = dataset.windows()
    forces = np.asarray(dataset.forces, dtype=np.float64)
    if not (np.all(np.isfinite(forces)) and np.all(np.isfinite(windows))):
        raise ContractError("training data contains non-finite forces or A-scans")
    tr, va = train_val_split(len(dataset), config.val_frac)
    history = TrainHistory(metadata={"shuffle": config.shuffle, "seed": config.seed,
                                     "batch_size": config.batch_size, "n_train": len(tr), "n_val": len(va)})

    if model.kind == "mip_gpm":
        t0 = time.perf_counter()
        fit_mip_gpm(model, windows[tr], forces[tr], windows[va], forces[va])
        val = float(np.mean(np.abs(model.predict(windows[va]) - forces[va]))) if len(va) else float("nan")
        history.loss.append(0.0)
        history.val_mae.append(val)
        history.lr.append(0.0)
        history.seconds.append(time.perf_counter() - t0)
        return model.eval(), history

    if len(tr) < config.batch_size:
        raise ContractError(f"{len(tr)} training windows cannot fill one batch of {config.batch_size}")
    fit_normalization(model, windows[tr], forces[tr])
    x_all = model.normalize_input(windows)
    y_all = (forces / model.norm.force_scale).astype(model.dtype)
    params = model.parameters()
    adam = AdamState.zeros(params)
    rng = np.random.default_rng(config.seed)
    n_batches = len(tr) // config.batch_size

    for epoch in range(config.max_epochs):
        t_start = time.perf_counter()
        lr = lr_schedule(epoch, config)
        order = rng.permutation(tr) if config.shuffle else tr
        drop_rng = np.random.default_rng([config.seed, epoch])
        model.train()
        losses = []
        for bi in range(n_batches):
            idx = np.sort(order[bi * config.batch_size:(bi + 1) * config.batch_size])
            xb = Tensor(x_all[idx])
            yb = Tensor(y_all[idx])
            with nx.Tape() as tape:
                loss = mse_loss(model.network_output(xb, drop_rng), yb)
                for p in params:
                    p.grad = None
                tape.backward(loss)
            value = float(loss.data)
            if not np.isfinite(value):
                raise TrainingDivergedError(f"non-finite loss {value} at epoch {epoch}, batch {bi}, lr {lr:g}")
            grads = [p.grad if p.grad is not None else np.zeros_like(p.data) for p in params]
            grads = clip_global_norm(grads, config.clip_norm)
            adam_step(params, grads, adam, lr, config.beta1, config.beta2, config.eps)
            losses.append(value)
        model.eval()
        val = float(np.mean(np.abs(model.predict(windows[va]) - forces[va]))) if len(va) else float("nan")
        history.loss.append(float(np.mean(losses)))
        history.val_mae.append(val)
        history.lr.append(lr)
        history.seconds.append(time.perf_counter() - t_start)
        if log is not None:
            log(f"epoch {epoch + 1}/{config.max_epochs} loss {history.loss[-1]:.5g} val_mae {val:.4g} "
                f"lr {lr:.3g} {history.seconds[-1]:.1f}s")
    for p in params:
        p.grad = None
    model.metadata["train"] = {"epochs": config.max_epochs, "seed": config.seed, "lr0": config.lr0,
                               "batch_size": config.batch_size, "shuffle": config.shuffle}
    return model.eval(), history
