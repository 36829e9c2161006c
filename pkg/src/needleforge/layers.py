"""Neural network layers built on :mod:`needleforge.numerics`.

Layers come in two flavours: plain functions that mirror the math of a
single step (``gru_cell_step``, ``convgru_cell_step``, ``resblock``...) and
small :class:`Module` classes that own parameters and run whole sequences
through the fused recurrent kernel. Recurrent modules keep their state in
spatial-major ``(L, B, C)`` layout internally; everything at module
boundaries uses ``(B, C, L)``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterator

import numpy as np

from . import numerics as nx
from .numerics import ContractError, DimensionError, Tensor
from .numerics.recurrent import gated_update, kernel_taps, sequence_tap_conv

BN_EPS = 1e-5
BN_MOMENTUM = 0.9
RBN_MOMENTUM = 0.99


def _training(mode) -> bool:
    if mode in ("train", True):
        return True
    if mode in ("eval", False):
        return False
    raise ContractError(f"mode must be 'train' or 'eval', got {mode!r}")


# --- initializers ----------------------------------------------------------

def glorot_uniform(shape: tuple, fan_in: int, fan_out: int, rng: np.random.Generator) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)


def orthogonal(n: int, rng: np.random.Generator) -> np.ndarray:
    q, r = np.linalg.qr(rng.normal(size=(n, n)))
    return q * np.sign(np.diag(r))


# --- module plumbing -------------------------------------------------------

class Module:
    """Named container of parameters, buffers and child modules."""

    def __init__(self):
        self._params: dict[str, Tensor] = {}
        self._buffers: dict[str, np.ndarray] = {}
        self._children: dict[str, Module] = {}
        self.training = False

    def add_param(self, name: str, value: np.ndarray, dtype) -> Tensor:
        t = Tensor(np.asarray(value, dtype=dtype), requires_grad=True, name=name)
        self._params[name] = t
        object.__setattr__(self, name, t)
        return t

    def add_buffer(self, name: str, value: np.ndarray, dtype) -> np.ndarray:
        arr = np.array(value, dtype=dtype)
        self._buffers[name] = arr
        object.__setattr__(self, name, arr)
        return arr

    def add_child(self, name: str, module: "Module") -> "Module":
        self._children[name] = module
        object.__setattr__(self, name, module)
        return module

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name, p in self._params.items():
            yield prefix + name, p
        for cname, child in self._children.items():
            yield from child.named_parameters(f"{prefix}{cname}.")

    def named_buffers(self, prefix: str = "") -> Iterator[tuple[str, np.ndarray]]:
        for name, b in self._buffers.items():
            yield prefix + name, b
        for cname, child in self._children.items():
            yield from child.named_buffers(f"{prefix}{cname}.")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def param_count(self) -> int:
        return int(sum(p.size for p in self.parameters()))

    def train(self, mode: bool = True) -> "Module":
        self.training = mode
        for child in self._children.values():
            child.train(mode)
        return self

    def eval(self) -> "Module":
        return self.train(False)


# --- dense -------------------------------------------------------------------

def dense(x: Tensor, W: Tensor, b: Tensor) -> Tensor:
    """W x + b for x of shape (n,) or (B, n)."""
    n = x.shape[-1]
    if W.ndim != 2 or W.shape[1] != n or b.shape != (W.shape[0],):
        raise DimensionError(f"dense shape mismatch: x {x.shape}, W {W.shape}, b {b.shape}")
    return nx.matmul(x, W.transpose()) + b


class Dense(Module):
    def __init__(self, n_in: int, n_out: int, rng: np.random.Generator, dtype=np.float32):
        super().__init__()
        self.add_param("weight", glorot_uniform((n_out, n_in), n_in, n_out, rng), dtype)
        self.add_param("bias", np.zeros(n_out), dtype)

    def __call__(self, x: Tensor) -> Tensor:
        return dense(x, self.weight, self.bias)


# --- batch normalization -------------------------------------------------------

@dataclass
class BNState:
    gamma: Tensor
    beta: Tensor
    running_mean: np.ndarray
    running_var: np.ndarray
    momentum: float = BN_MOMENTUM
    epsilon: float = BN_EPS


def _fold(running: np.ndarray, batch: np.ndarray, momentum: float) -> None:
    running *= momentum
    running += (1.0 - momentum) * batch.astype(running.dtype)


def batchnorm(x: Tensor, state: BNState, mode) -> Tensor:
    """Per-channel normalization of (B, C, ...) input; channel axis 1."""
    training = _training(mode)
    C = state.gamma.shape[0]
    if x.ndim < 2 or x.shape[1] != C:
        raise DimensionError(f"batchnorm over {C} channels got input {x.shape}")
    bshape = (1, C) + (1,) * (x.ndim - 2)
    axes = (0,) + tuple(range(2, x.ndim))
    if training and x.shape[0] < 2:
        raise ContractError(f"train-mode batchnorm needs batch size >= 2, got {x.shape}")
    running = None if training else (state.running_mean.reshape(bshape), state.running_var.reshape(bshape))
    y, mu, var = nx.batch_norm(x, state.gamma.reshape(bshape), state.beta.reshape(bshape), axes,
                               training, running, state.epsilon)
    if training:
        _fold(state.running_mean, mu.reshape(C), state.momentum)
        _fold(state.running_var, var.reshape(C), state.momentum)
    return y


class BatchNorm(Module):
    def __init__(self, channels: int, dtype=np.float32, gamma_init: float = 1.0):
        super().__init__()
        self.add_param("gamma", np.full(channels, gamma_init), dtype)
        self.add_param("beta", np.zeros(channels), dtype)
        self.add_buffer("running_mean", np.zeros(channels), dtype)
        self.add_buffer("running_var", np.ones(channels), dtype)

    @property
    def state(self) -> BNState:
        return BNState(self.gamma, self.beta, self.running_mean, self.running_var)

    def __call__(self, x: Tensor) -> Tensor:
        return batchnorm(x, self.state, "train" if self.training else "eval")


@dataclass
class RecurrentBNState:
    """Shared affine parameters with per-timestep running statistics."""

    gamma: Tensor
    beta: Tensor
    running_mean: np.ndarray  # (T_max, C)
    running_var: np.ndarray   # (T_max, C)
    momentum: float = RBN_MOMENTUM
    epsilon: float = BN_EPS

    @property
    def t_max(self) -> int:
        return self.running_mean.shape[0]


def recurrent_batchnorm_seq(x: Tensor, state: RecurrentBNState, mode, t0: int = 0) -> Tensor:
    """Normalize a (T, L, B, C) sequence with statistics indexed by timestep t0 + i."""
    training = _training(mode)
    T, _, _, C = x.shape
    if t0 < 0:
        raise ContractError(f"timestep must be >= 0, got {t0}")
    if training and x.shape[2] < 2:
        raise ContractError(f"train-mode recurrent batchnorm needs batch size >= 2, got {x.shape}")
    steps = np.arange(t0, t0 + T)
    idx = np.minimum(steps, state.t_max - 1)
    bshape = (1, 1, 1, C)
    running = None
    if not training:
        running = (state.running_mean[idx].reshape(T, 1, 1, C), state.running_var[idx].reshape(T, 1, 1, C))
    y, mu, var = nx.batch_norm(x, state.gamma.reshape(bshape), state.beta.reshape(bshape), (1, 2),
                               training, running, state.epsilon)
    if training:
        mu = mu.reshape(T, C)
        var = var.reshape(T, C)
        for i, t in enumerate(steps):
            if t < state.t_max:
                _fold(state.running_mean[t], mu[i], state.momentum)
                _fold(state.running_var[t], var[i], state.momentum)
    return y


def recurrent_batchnorm(x_t: Tensor, t: int, state: RecurrentBNState, mode) -> Tensor:
    """Batch-normalize one timestep x_t (B, C, L) with the statistics of step t (clamped to T_max - 1)."""
    if x_t.ndim != 3:
        raise DimensionError(f"recurrent_batchnorm expects (B, C, L), got {x_t.shape}")
    seq = x_t.transpose(2, 0, 1).reshape(1, x_t.shape[2], x_t.shape[0], x_t.shape[1])
    y = recurrent_batchnorm_seq(seq, state, mode, t0=t)
    return y.reshape(x_t.shape[2], x_t.shape[0], x_t.shape[1]).transpose(1, 2, 0)


class RecurrentBatchNorm(Module):
    def __init__(self, channels: int, t_max: int, dtype=np.float32, gamma_init: float = 0.1):
        super().__init__()
        self.add_param("gamma", np.full(channels, gamma_init), dtype)
        self.add_param("beta", np.zeros(channels), dtype)
        self.add_buffer("running_mean", np.zeros((t_max, channels)), dtype)
        self.add_buffer("running_var", np.ones((t_max, channels)), dtype)

    @property
    def state(self) -> RecurrentBNState:
        return RecurrentBNState(self.gamma, self.beta, self.running_mean, self.running_var)


# --- dropout -------------------------------------------------------------------

def dropout_mask(shape: tuple, p: float, rng: np.random.Generator, dtype=np.float32) -> np.ndarray:
    if not 0.0 <= p < 1.0:
        raise ContractError(f"dropout probability must be in [0, 1), got {p}")
    keep = rng.random(shape) >= p
    return keep.astype(dtype) / np.asarray(1.0 - p, dtype=dtype)


def dropout(x: Tensor, p: float, mode, mask_policy: str = "per_call",
            rng: np.random.Generator | None = None, time_axis: int = 0) -> Tensor:
    """Inverted dropout.

    With ``mask_policy="per_sequence"`` one mask is drawn with ``time_axis``
    collapsed and reused for every timestep.
    """
    if not 0.0 <= p < 1.0:
        raise ContractError(f"dropout probability must be in [0, 1), got {p}")
    if not _training(mode) or p == 0.0:
        return x
    if rng is None:
        raise ContractError("train-mode dropout needs an rng")
    if mask_policy == "per_call":
        shape = x.shape
    elif mask_policy == "per_sequence":
        shape = tuple(1 if i == time_axis else n for i, n in enumerate(x.shape))
    else:
        raise ContractError(f"unknown mask policy {mask_policy!r}")
    return x * Tensor(dropout_mask(shape, p, rng, x.dtype))


# --- GRU -----------------------------------------------------------------------

@dataclass
class GRUParams:
    W_z: Tensor
    W_r: Tensor
    W_c: Tensor
    U_z: Tensor
    U_r: Tensor
    U_c: Tensor
    b_z: Tensor
    b_r: Tensor
    b_c: Tensor

    @property
    def hidden(self) -> int:
        return self.U_z.shape[0]


def gru_cell_step(x_t: Tensor, h_prev: Tensor, params: GRUParams) -> Tensor:
    """Reference GRU step composed from primitive ops (x_t (n,)|(B,n), h_prev (m,)|(B,m))."""
    p = params
    if x_t.shape[-1] != p.W_z.shape[1] or h_prev.shape[-1] != p.hidden:
        raise DimensionError(f"gru_cell_step: x {x_t.shape}, h {h_prev.shape} vs W {p.W_z.shape}, U {p.U_z.shape}")
    z = nx.sigmoid(dense(h_prev, p.U_z, p.b_z) + nx.matmul(x_t, p.W_z.transpose()))
    r = nx.sigmoid(dense(h_prev, p.U_r, p.b_r) + nx.matmul(x_t, p.W_r.transpose()))
    c = nx.tanh(dense(r * h_prev, p.U_c, p.b_c) + nx.matmul(x_t, p.W_c.transpose()))
    return z * c + (1.0 - z) * h_prev


class GRU(Module):
    """Single GRU layer over (T, B, n) sequences."""

    def __init__(self, n_in: int, hidden: int, rng: np.random.Generator, dtype=np.float32):
        super().__init__()
        self.n_in, self.hidden = n_in, hidden
        for g in "zrc":
            self.add_param(f"W_{g}", glorot_uniform((hidden, n_in), n_in, hidden, rng), dtype)
        for g in "zrc":
            self.add_param(f"U_{g}", orthogonal(hidden, rng), dtype)
        self.add_param("b_z", np.full(hidden, -1.0), dtype)
        self.add_param("b_r", np.zeros(hidden), dtype)
        self.add_param("b_c", np.zeros(hidden), dtype)

    @property
    def params(self) -> GRUParams:
        return GRUParams(*(getattr(self, n) for n in
                           ("W_z", "W_r", "W_c", "U_z", "U_r", "U_c", "b_z", "b_r", "b_c")))

    def kernels(self) -> tuple[Tensor, Tensor, Tensor, Tensor]:
        """Fused-layout weights: input matrix (n, 3m), bias (3m,), hidden taps (1, m, 2m) and (1, m, m)."""
        w_in = nx.concat([self.W_z, self.W_r, self.W_c], axis=0).transpose()
        bias = nx.concat([self.b_z, self.b_r, self.b_c], axis=0)
        u_zr = nx.concat([self.U_z, self.U_r], axis=0).transpose().reshape(1, self.hidden, 2 * self.hidden)
        u_c = self.U_c.transpose().reshape(1, self.hidden, self.hidden)
        return w_in, bias, u_zr, u_c

    def initial_state(self, batch: int) -> Tensor:
        return Tensor(np.zeros((1, batch, self.hidden), dtype=self.W_z.dtype))

    def step(self, x_t: Tensor, h: Tensor, kernels=None) -> Tensor:
        """x_t (B, n), h (1, B, m) -> (1, B, m)."""
        w_in, bias, u_zr, u_c = kernels or self.kernels()
        gx = (nx.matmul(x_t, w_in) + bias).reshape(1, x_t.shape[0], 3 * self.hidden)
        return gated_update(gx, h, u_zr, u_c)

    def __call__(self, x: Tensor, h0: Tensor | None = None) -> list[Tensor]:
        """Run over x (T, B, n); returns the T hidden states, each (B, m)."""
        T, B, n = x.shape
        if n != self.n_in:
            raise DimensionError(f"GRU expects {self.n_in} input features, got {x.shape}")
        w_in, bias, u_zr, u_c = self.kernels()
        gx_all = (nx.matmul(x, w_in) + bias).reshape(T, 1, B, 3 * self.hidden)
        h = h0 if h0 is not None else self.initial_state(B)
        outs = []
        for gx in nx.unstack(gx_all, 0):
            h = gated_update(gx, h, u_zr, u_c)
            outs.append(h)
        return [o.reshape(B, self.hidden) for o in outs]


# --- convolutional GRU ------------------------------------------------------------

@dataclass
class ConvGRUParams:
    K_z: Tensor
    K_r: Tensor
    K_c: Tensor
    L_z: Tensor
    L_r: Tensor
    L_c: Tensor
    b_z: Tensor
    b_r: Tensor
    b_c: Tensor
    rbn: RecurrentBNState | None = None
    p_di: float = 0.1
    p_do: float = 0.2

    def __post_init__(self):
        ch, _, w = self.K_z.shape
        for k in (self.K_z, self.K_r, self.K_c):
            if k.shape != (ch, ch, w):
                raise DimensionError(f"hidden kernels must all be ({ch}, {ch}, {w}), got {k.shape}")
        for k in (self.L_z, self.L_r, self.L_c):
            if k.shape[0] != ch or k.shape[2] != w or k.shape != self.L_z.shape:
                raise DimensionError(f"input kernels must share ({ch}, c_in, {w}), got {k.shape}")
        for p in (self.p_di, self.p_do):
            if not 0.0 <= p < 1.0:
                raise ContractError(f"dropout probability must be in [0, 1), got {p}")

    @property
    def hidden(self) -> int:
        return self.K_z.shape[0]

    @property
    def in_channels(self) -> int:
        return self.L_z.shape[1]

    @property
    def width(self) -> int:
        return self.K_z.shape[2]


def convgru_input_projection(x: Tensor, params: ConvGRUParams, mode, t0: int = 0,
                             in_mask: np.ndarray | None = None) -> Tensor:
    """Input path of all three gates for a (T, L, B, C_in) sequence -> (T, L, B, 3*c_h).

    Applies RBN (when configured), the input dropout mask, the L kernels and the biases.
    """
    if params.rbn is not None:
        x = recurrent_batchnorm_seq(x, params.rbn, mode, t0)
    if in_mask is not None:
        x = x * Tensor(in_mask)
    k_in = nx.concat([params.L_z, params.L_r, params.L_c], axis=0)
    bias = nx.concat([params.b_z, params.b_r, params.b_c], axis=0)
    return sequence_tap_conv(x, k_in) + bias


def convgru_hidden_kernels(params: ConvGRUParams) -> tuple[Tensor, Tensor]:
    return kernel_taps(nx.concat([params.K_z, params.K_r], axis=0)), kernel_taps(params.K_c)


def convgru_cell_step(x_t: Tensor, h_prev: Tensor, params: ConvGRUParams, t: int = 0, mode="eval",
                      rng: np.random.Generator | None = None) -> Tensor:
    """One convGRU step; x_t (c_in, L) or (B, c_in, L), h_prev (c_h, L) or (B, c_h, L).

        z = sigmoid(K_z * h + L_z * RBN(x) + b_z)
        r = sigmoid(K_r * h + L_r * RBN(x) + b_r)
        c = tanh(K_c * (r . h) + L_c * RBN(x) + b_c)
        h' = z . c + (1 - z) . h

    Returns the carried state; output dropout is the caller's concern.
    """
    unbatched = x_t.ndim == 2
    if unbatched:
        x_t = x_t.reshape(1, *x_t.shape)
        h_prev = h_prev.reshape(1, *h_prev.shape)
    B, cin, L = x_t.shape
    if h_prev.shape != (B, params.hidden, L) or cin != params.in_channels:
        raise DimensionError(f"convgru_cell_step: x {x_t.shape}, h {h_prev.shape} vs c_h={params.hidden}, "
                             f"c_in={params.in_channels}")
    training = _training(mode)
    in_mask = None
    if training and params.p_di > 0:
        if rng is None:
            raise ContractError("train-mode convGRU step with dropout needs an rng")
        in_mask = dropout_mask((1, L, B, cin), params.p_di, rng, x_t.dtype)
    seq = x_t.transpose(2, 0, 1).reshape(1, L, B, cin)
    gx = convgru_input_projection(seq, params, mode, t, in_mask).reshape(L, B, 3 * params.hidden)
    k_zr, k_c = convgru_hidden_kernels(params)
    h = gated_update(gx, h_prev.transpose(2, 0, 1), k_zr, k_c).transpose(1, 2, 0)
    return h.reshape(params.hidden, L) if unbatched else h


class ConvGRU(Module):
    """Convolutional GRU layer over (T, L, B, C_in) sequences."""

    def __init__(self, in_channels: int, hidden: int, width: int, rng: np.random.Generator,
                 t_max: int | None = None, p_di: float = 0.0, p_do: float = 0.0, dtype=np.float32):
        super().__init__()
        self.in_channels, self.hidden, self.width = in_channels, hidden, width
        self.p_di, self.p_do = p_di, p_do
        fan_in = in_channels * width
        for g in "zrc":
            self.add_param(f"L_{g}", glorot_uniform((hidden, in_channels, width), fan_in, hidden * width, rng),
                           dtype)
        for g in "zrc":
            k = np.zeros((hidden, hidden, width))
            k[:, :, (width - 1) // 2] = orthogonal(hidden, rng)
            self.add_param(f"K_{g}", k, dtype)
        self.add_param("b_z", np.full(hidden, -1.0), dtype)
        self.add_param("b_r", np.zeros(hidden), dtype)
        self.add_param("b_c", np.zeros(hidden), dtype)
        self.rbn = self.add_child("rbn", RecurrentBatchNorm(in_channels, t_max, dtype)) if t_max else None

    @property
    def params(self) -> ConvGRUParams:
        return ConvGRUParams(self.K_z, self.K_r, self.K_c, self.L_z, self.L_r, self.L_c,
                             self.b_z, self.b_r, self.b_c,
                             self.rbn.state if self.rbn is not None else None, self.p_di, self.p_do)

    def initial_state(self, batch: int, length: int) -> Tensor:
        return Tensor(np.zeros((length, batch, self.hidden), dtype=self.K_z.dtype))

    def __call__(self, x: Tensor, rng: np.random.Generator | None = None, t0: int = 0,
                 h0: Tensor | None = None) -> Tensor:
        """Final carried state (L, B, c_h) after running x (T, L, B, C_in) from h0 (zeros by default)."""
        T, L, B, cin = x.shape
        if cin != self.in_channels:
            raise DimensionError(f"ConvGRU expects {self.in_channels} input channels, got {x.shape}")
        params = self.params
        mode = "train" if self.training else "eval"
        in_mask = None
        if self.training and self.p_di > 0:
            in_mask = dropout_mask((1, L, B, cin), self.p_di, rng, x.dtype)
        gx_all = convgru_input_projection(x, params, mode, t0, in_mask)
        k_zr, k_c = convgru_hidden_kernels(params)
        h = h0 if h0 is not None else self.initial_state(B, L)
        for gx in nx.unstack(gx_all, 0):
            h = gated_update(gx, h, k_zr, k_c)
        return h

    def emit(self, h: Tensor, rng: np.random.Generator | None = None) -> Tensor:
        """Apply output dropout to a state handed to the next layer (identity in eval mode)."""
        if self.training and self.p_do > 0:
            return h * Tensor(dropout_mask(h.shape, self.p_do, rng, h.dtype))
        return h


# --- residual blocks ------------------------------------------------------------

@dataclass(frozen=True)
class ResBlockSpec:
    in_channels: int
    out_channels: int
    stride: int = 1
    kernel_width: int = 3
    dim: int = 1

    def __post_init__(self):
        if self.stride not in (1, 2):
            raise ContractError(f"ResBlock stride must be 1 or 2, got {self.stride}")
        if self.dim not in (1, 2):
            raise ContractError(f"ResBlock dim must be 1 or 2, got {self.dim}")

    @property
    def projects(self) -> bool:
        return self.stride != 1 or self.in_channels != self.out_channels


@dataclass
class ResBlockParams:
    conv1: Tensor
    bn1: BNState
    conv2: Tensor
    bn2: BNState
    proj: Tensor | None = None


def _conv(x: Tensor, k: Tensor, stride: int, dim: int) -> Tensor:
    return nx.conv1d(x, k, stride, "same") if dim == 1 else nx.conv2d(x, k, stride, "same")


def resblock(x: Tensor, spec: ResBlockSpec, params: ResBlockParams, mode) -> Tensor:
    """relu(BN(conv(relu(BN(conv(x, stride))))) + shortcut(x)) on (B, C, L) or (B, C, H, W)."""
    if x.ndim != spec.dim + 2 or x.shape[1] != spec.in_channels:
        raise DimensionError(f"resblock expects {spec.in_channels} channels in {spec.dim}-D, got {x.shape}")
    y = nx.relu(batchnorm(_conv(x, params.conv1, spec.stride, spec.dim), params.bn1, mode))
    y = batchnorm(_conv(y, params.conv2, 1, spec.dim), params.bn2, mode)
    shortcut = _conv(x, params.proj, spec.stride, spec.dim) if spec.projects else x
    return nx.relu(y + shortcut)


def _conv_kernel(out_ch: int, in_ch: int, width: int, dim: int, rng: np.random.Generator) -> np.ndarray:
    shape = (out_ch, in_ch) + (width,) * dim
    receptive = width ** dim
    return glorot_uniform(shape, in_ch * receptive, out_ch * receptive, rng)


class ResBlock(Module):
    def __init__(self, spec: ResBlockSpec, rng: np.random.Generator, dtype=np.float32):
        super().__init__()
        self.spec = spec
        s = spec
        self.add_param("conv1", _conv_kernel(s.out_channels, s.in_channels, s.kernel_width, s.dim, rng), dtype)
        self.add_child("bn1", BatchNorm(s.out_channels, dtype))
        self.add_param("conv2", _conv_kernel(s.out_channels, s.out_channels, s.kernel_width, s.dim, rng), dtype)
        self.add_child("bn2", BatchNorm(s.out_channels, dtype))
        if s.projects:
            self.add_param("proj", _conv_kernel(s.out_channels, s.in_channels, 1, s.dim, rng), dtype)

    @property
    def params(self) -> ResBlockParams:
        return ResBlockParams(self.conv1, self.bn1.state, self.conv2, self.bn2.state,
                              self._params.get("proj"))

    def __call__(self, x: Tensor) -> Tensor:
        return resblock(x, self.spec, self.params, "train" if self.training else "eval")


def global_avg_pool(x: Tensor) -> Tensor:
    """(C, L...) -> (C,), or batched (B, C, L...) -> (B, C) when ndim >= 3."""
    return nx.global_avg_pool(x, channel_axis=0 if x.ndim == 2 else 1)


@dataclass
class TrunkConfig:
    in_channels: int
    groups: list = field(default_factory=lambda: [(32, 2), (64, 2), (128, 2)])
    stem_channels: int = 16
    stem_width: int = 5
    kernel_width: int = 3
    dim: int = 1


class ResNetTrunk(Module):
    """Stem conv + BN + ReLU, then groups of ResBlocks whose first block strides by 2."""

    def __init__(self, cfg: TrunkConfig, rng: np.random.Generator, dtype=np.float32):
        super().__init__()
        self.cfg = cfg
        stem_w = cfg.stem_width if cfg.dim == 1 else cfg.kernel_width
        self.add_param("stem", _conv_kernel(cfg.stem_channels, cfg.in_channels, stem_w, cfg.dim, rng), dtype)
        self.add_child("stem_bn", BatchNorm(cfg.stem_channels, dtype))
        self.blocks: list[ResBlock] = []
        ch = cfg.stem_channels
        for gi, (feat, nblocks) in enumerate(cfg.groups):
            for bi in range(nblocks):
                spec = ResBlockSpec(ch, feat, 2 if bi == 0 else 1, cfg.kernel_width, cfg.dim)
                self.blocks.append(self.add_child(f"g{gi}b{bi}", ResBlock(spec, rng, dtype)))
                ch = feat
        self.out_channels = ch

    def features(self, x: Tensor) -> Tensor:
        """Feature map before pooling."""
        y = nx.relu(self.stem_bn(_conv(x, self.stem, 1, self.cfg.dim)))
        for block in self.blocks:
            y = block(y)
        return y

    def __call__(self, x: Tensor) -> Tensor:
        return global_avg_pool(self.features(x))
