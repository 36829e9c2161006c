"""Dense tensors with tape-based reverse-mode differentiation.

Operations are recorded only while a :class:`Tape` is active (``with Tape()
as tape:``) and at least one input requires a gradient. Outside a tape every
op is a plain numpy computation, which is what inference paths rely on.
"""

from __future__ import annotations

import threading
from typing import Callable, Iterable, Sequence

import numpy as np


class DimensionError(ValueError):
    """Raised when operand shapes are incompatible."""


class ContractError(ValueError):
    """Raised when a documented precondition is violated."""


_local = threading.local()


def _tape_stack() -> list:
    stack = getattr(_local, "stack", None)
    if stack is None:
        stack = _local.stack = []
    return stack


def active_tape() -> "Tape | None":
    stack = _tape_stack()
    return stack[-1] if stack else None


class Node:
    __slots__ = ("op", "inputs", "outputs", "backward_fn", "multi")

    def __init__(self, op: str, inputs: tuple, outputs: tuple, backward_fn: Callable, multi: bool = False):
        self.op = op
        self.inputs = inputs
        self.outputs = outputs
        self.backward_fn = backward_fn
        self.multi = multi  # backward_fn takes a list of output grads even for a single output

    def __repr__(self) -> str:
        return f"Node({self.op}, in={[t.shape for t in self.inputs]}, out={[t.shape for t in self.outputs]})"


class Tape:
    """Ordered record of differentiable operations.

    Tapes are thread-local: a tape opened in one thread never sees ops
    executed in another.
    """

    def __init__(self):
        self.nodes: list[Node] = []
        self._produced: set[int] = set()

    def __enter__(self) -> "Tape":
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        stack = _tape_stack()
        if not stack or stack[-1] is not self:
            raise RuntimeError("tape stack corrupted")
        stack.pop()

    def __len__(self) -> int:
        return len(self.nodes)

    def record(self, node: Node) -> None:
        self.nodes.append(node)
        for out in node.outputs:
            self._produced.add(id(out))

    def backward(self, loss: "Tensor") -> None:
        if loss.data.size != 1:
            raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
        if id(loss) not in self._produced:
            raise ContractError("loss was not produced on this tape")

        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        leaves: dict[int, Tensor] = {}
        for node in reversed(self.nodes):
            out_grads = [grads.pop(id(o), None) for o in node.outputs]
            if all(g is None for g in out_grads):
                continue
            for o, g in zip(node.outputs, out_grads):
                if g is not None:
                    o.grad = g
            in_grads = node.backward_fn(out_grads if node.multi else out_grads[0])
            for inp, g in zip(node.inputs, in_grads):
                if g is None or not inp.requires_grad:
                    continue
                key = id(inp)
                prev = grads.get(key)
                grads[key] = g if prev is None else prev + g
                if key not in self._produced:
                    leaves[key] = inp
        for key, t in leaves.items():
            g = grads[key]
            if g.shape != t.shape:
                raise DimensionError(f"gradient shape {g.shape} != tensor shape {t.shape}")
            if not g.flags.writeable:
                g = np.array(g)
            t.grad = g if t.grad is None else t.grad + g


def backward(loss: "Tensor", tape: Tape) -> None:
    tape.backward(loss)


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    if grad.shape == shape:
        return grad
    ndiff = grad.ndim - len(shape)
    if ndiff:
        grad = grad.sum(axis=tuple(range(ndiff)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "name", "__weakref__")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind not in "f":
            arr = arr.astype(np.float64)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.name = name

    # --- introspection -------------------------------------------------
    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        rg = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{rg})"

    def __len__(self) -> int:
        return self.data.shape[0]

    # --- arithmetic ----------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, p: float):
        return power(self, p)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def sum(self, axis=None, keepdims: bool = False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return mean(self, axis, keepdims)


def _to_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype))


def make_op(op: str, data: np.ndarray, inputs: Sequence[Tensor], backward_fn: Callable) -> Tensor:
    """Wrap ``data`` as the output of ``op`` and record it on the active tape."""
    out = Tensor(data)
    tape = active_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        tape.record(Node(op, tuple(inputs), (out,), backward_fn))
    return out


def make_multi_op(op: str, datas: Iterable[np.ndarray], inputs: Sequence[Tensor],
                  backward_fn: Callable) -> list[Tensor]:
    """Multi-output variant of :func:`make_op`; ``backward_fn`` gets a list of grads (None if unused)."""
    outs = [Tensor(d) for d in datas]
    tape = active_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        for o in outs:
            o.requires_grad = True
        tape.record(Node(op, tuple(inputs), tuple(outs), backward_fn, multi=True))
    return outs


# --- elementwise -------------------------------------------------------

def add(a, b) -> Tensor:
    a = _to_tensor(a, b if isinstance(b, Tensor) else None)
    b = _to_tensor(b, a)
    sa, sb = a.shape, b.shape
    return make_op("add", a.data + b.data, (a, b),
                   lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a = _to_tensor(a, b if isinstance(b, Tensor) else None)
    b = _to_tensor(b, a)
    sa, sb = a.shape, b.shape
    return make_op("sub", a.data - b.data, (a, b),
                   lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    a = _to_tensor(a, b if isinstance(b, Tensor) else None)
    b = _to_tensor(b, a)
    ad, bd = a.data, b.data

    def bw(g):
        ga = _unbroadcast(g * bd, ad.shape) if a.requires_grad else None
        gb = _unbroadcast(g * ad, bd.shape) if b.requires_grad else None
        return ga, gb

    return make_op("mul", ad * bd, (a, b), bw)


def div(a, b) -> Tensor:
    a = _to_tensor(a, b if isinstance(b, Tensor) else None)
    b = _to_tensor(b, a)
    ad, bd = a.data, b.data

    def bw(g):
        ga = _unbroadcast(g / bd, ad.shape) if a.requires_grad else None
        gb = _unbroadcast(-g * ad / (bd * bd), bd.shape) if b.requires_grad else None
        return ga, gb

    return make_op("div", ad / bd, (a, b), bw)


def neg(a: Tensor) -> Tensor:
    return make_op("neg", -a.data, (a,), lambda g: (-g,))


def power(a: Tensor, p: float) -> Tensor:
    ad = a.data
    return make_op("pow", ad ** p, (a,), lambda g: (g * p * ad ** (p - 1),))


def square(a: Tensor) -> Tensor:
    ad = a.data
    return make_op("square", ad * ad, (a,), lambda g: (2.0 * g * ad,))


def exp(a: Tensor) -> Tensor:
    y = np.exp(a.data)
    return make_op("exp", y, (a,), lambda g: (g * y,))


def sigmoid(a: Tensor) -> Tensor:
    # tanh form avoids overflow warnings for large |x|
    y = 0.5 * (1.0 + np.tanh(0.5 * a.data))
    return make_op("sigmoid", y, (a,), lambda g: (g * y * (1.0 - y),))


def tanh(a: Tensor) -> Tensor:
    y = np.tanh(a.data)
    return make_op("tanh", y, (a,), lambda g: (g * (1.0 - y * y),))


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return make_op("relu", a.data * mask, (a,), lambda g: (g * mask,))


_ACTIVATIONS = {"sigmoid": sigmoid, "tanh": tanh, "relu": relu}


def activation(kind: str, x: Tensor) -> Tensor:
    try:
        fn = _ACTIVATIONS[kind]
    except KeyError:
        raise ContractError(f"unknown activation {kind!r}; expected one of {sorted(_ACTIVATIONS)}") from None
    return fn(x)


# --- reductions and shape ops -----------------------------------------

def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    shape = a.shape

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape),)

    return make_op("sum", np.sum(a.data, axis=axis, keepdims=keepdims), (a,), bw)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    shape = a.shape
    if axis is None:
        n = a.size
    else:
        axes = (axis,) if isinstance(axis, int) else axis
        n = int(np.prod([shape[i] for i in axes]))

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / n, shape),)

    return make_op("mean", np.mean(a.data, axis=axis, keepdims=keepdims), (a,), bw)


def reshape(a: Tensor, shape) -> Tensor:
    orig = a.shape
    return make_op("reshape", a.data.reshape(shape), (a,), lambda g: (g.reshape(orig),))


def transpose(a: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inv = tuple(np.argsort(axes))
    return make_op("transpose", a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),))


def getitem(a: Tensor, index) -> Tensor:
    shape, dtype = a.shape, a.dtype

    def bw(g):
        full = np.zeros(shape, dtype=dtype)
        if _is_fancy(index):
            np.add.at(full, index, g)
        else:
            full[index] = g
        return (full,)

    return make_op("getitem", a.data[index], (a,), bw)


def _is_fancy(index) -> bool:
    items = index if isinstance(index, tuple) else (index,)
    return any(isinstance(i, (list, np.ndarray)) for i in items)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = list(tensors)
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum(sizes)[:-1]

    def bw(g):
        return tuple(np.split(g, bounds, axis=axis))

    return make_op("concat", np.concatenate([t.data for t in tensors], axis=axis), tensors, bw)


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = list(tensors)

    def bw(g):
        return tuple(np.moveaxis(g, axis, 0))

    return make_op("stack", np.stack([t.data for t in tensors], axis=axis), tensors, bw)


def unstack(a: Tensor, axis: int = 0) -> list[Tensor]:
    """Split along ``axis`` into views; backward assembles one buffer."""
    parts = list(np.moveaxis(a.data, axis, 0))
    shape, dtype = a.shape, a.dtype

    def bw(grads):
        full = np.zeros(shape, dtype=dtype)
        moved = np.moveaxis(full, axis, 0)
        for i, g in enumerate(grads):
            if g is not None:
                moved[i] = g
        return (full,)

    return make_multi_op("unstack", parts, (a,), bw)


def split(a: Tensor, sizes: Sequence[int], axis: int = 0) -> list[Tensor]:
    bounds = np.cumsum(sizes)[:-1]
    parts = np.split(a.data, bounds, axis=axis)
    shapes = [p.shape for p in parts]
    dtype = a.dtype

    def bw(grads):
        filled = [g if g is not None else np.zeros(s, dtype=dtype) for g, s in zip(grads, shapes)]
        return (np.concatenate(filled, axis=axis),)

    return make_multi_op("split", parts, (a,), bw)


# --- linear algebra -----------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product; ``a`` may carry leading batch dims, ``b`` is 2-D or batched alike."""
    a = _to_tensor(a)
    b = _to_tensor(b, a)
    if a.ndim < 1 or b.ndim < 1:
        raise DimensionError(f"matmul needs arrays, got {a.shape} and {b.shape}")
    ka = a.shape[-1]
    kb = b.shape[-2] if b.ndim >= 2 else b.shape[0]
    if ka != kb:
        raise DimensionError(f"matmul inner dimensions disagree: {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data

    def bw(g):
        ga = gb = None
        if a.requires_grad:
            if bd.ndim == 1:
                ga = np.multiply.outer(g, bd)
            else:
                ga = _unbroadcast(g @ np.swapaxes(bd, -1, -2), ad.shape)
        if b.requires_grad:
            if ad.ndim == 1:
                gb = np.multiply.outer(ad, g)
            elif bd.ndim == 1:
                gb = (ad.reshape(-1, ka) * g.reshape(-1, 1)).sum(axis=0)
            elif bd.ndim == 2:
                gb = ad.reshape(-1, ka).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = _unbroadcast(np.swapaxes(ad, -1, -2) @ g, bd.shape)
        return ga, gb

    return make_op("matmul", ad @ bd, (a, b), bw)


def parameter(data, dtype=np.float32, name: str | None = None) -> Tensor:
    return Tensor(np.array(data, dtype=dtype), requires_grad=True, name=name)
