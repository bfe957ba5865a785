"""Dense f64 tensors with a reverse-mode tape and a MAC counter.

Operations record themselves on the active :class:`Tape` whenever one of
their inputs requires a gradient. ``matmul`` and ``linear`` report their
multiply-accumulate counts to every active :class:`MacCounter`, labelled
with the innermost :func:`mac_label` scope.
"""
from __future__ import annotations

import builtins
import hashlib
import math
from contextlib import contextmanager
from typing import Callable, Iterable, Sequence

import numpy as np

LN_EPS = 1e-5


class NonFiniteError(FloatingPointError):
    pass


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "name", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else self.data.item()

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag}, requires_grad={self.requires_grad})"

    # operator sugar
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

    def __matmul__(self, other):
        return matmul(self, other)


# --------------------------------------------------------------------------
# tape


class Node:
    __slots__ = ("op", "inputs", "output", "backward")

    def __init__(self, op: str, inputs: tuple[Tensor, ...], output: Tensor, backward: Callable):
        self.op = op
        self.inputs = inputs
        self.output = output
        self.backward = backward


class Tape:
    """Ordered record of primitive operations for one forward/backward pass."""

    def __init__(self, validate: bool = False):
        self.nodes: list[Node] = []
        self.validate = validate
        self._prev: Tape | None = None

    def __enter__(self):
        global _ACTIVE_TAPE
        self._prev = _ACTIVE_TAPE
        _ACTIVE_TAPE = self
        return self

    def __exit__(self, *exc):
        global _ACTIVE_TAPE
        _ACTIVE_TAPE = self._prev
        return False

    def __len__(self):
        return len(self.nodes)

    def record(self, op, inputs, output, backward):
        if self.validate and not np.all(np.isfinite(output.data)):
            raise NonFiniteError(f"op {op!r} produced non-finite values (node {len(self.nodes)})")
        self.nodes.append(Node(op, inputs, output, backward))

    def first_nonfinite(self) -> tuple[int, str] | None:
        """Index and op name of the first recorded node with NaN/Inf output."""
        for i, node in enumerate(self.nodes):
            if not np.all(np.isfinite(node.output.data)):
                return i, node.op
        return None


_ACTIVE_TAPE: Tape | None = None


class BranchLog:
    """Fingerprint of the branches taken by non-smooth ops (abs, clamp_min, max).

    Two evaluations with equal fingerprints lie on the same smooth piece of the
    function, which is what a central difference needs.
    """

    def __init__(self):
        self._hash = hashlib.blake2b(digest_size=16)
        self._prev = None

    def add(self, pattern: np.ndarray) -> None:
        self._hash.update(np.ascontiguousarray(pattern).tobytes())

    def digest(self) -> bytes:
        return self._hash.digest()

    def __enter__(self):
        global _BRANCH_LOG
        self._prev, _BRANCH_LOG = _BRANCH_LOG, self
        return self

    def __exit__(self, *exc):
        global _BRANCH_LOG
        _BRANCH_LOG = self._prev
        return False


_BRANCH_LOG: BranchLog | None = None


def _branch(pattern: np.ndarray) -> None:
    if _BRANCH_LOG is not None:
        _BRANCH_LOG.add(pattern)


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _emit(op: str, out_data: np.ndarray, inputs: Sequence[Tensor], backward: Callable) -> Tensor:
    needs = any(t.requires_grad for t in inputs)
    out = Tensor(out_data, requires_grad=needs)
    if needs and _ACTIVE_TAPE is not None:
        _ACTIVE_TAPE.record(op, tuple(inputs), out, backward)
    return out


def backward(tape: Tape, loss: Tensor, wrt: Iterable[Tensor] | None = None) -> dict[int, np.ndarray]:
    """Propagate d(loss) back through ``tape``.

    Every leaf touched by the tape (and every tensor in ``wrt``) gets its
    ``.grad`` set; leaves the loss does not reach receive zeros. Returns a
    mapping from ``id(tensor)`` to gradient.
    """
    if loss.size != 1:
        raise ValueError(f"loss must be scalar, got shape {loss.shape}")
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    produced = set()
    for node in reversed(tape.nodes):
        produced.add(id(node.output))
        g = grads.get(id(node.output))
        if g is None:
            continue
        in_grads = node.backward(g)
        for t, gi in zip(node.inputs, in_grads):
            if gi is None or not t.requires_grad:
                continue
            prev = grads.get(id(t))
            grads[id(t)] = gi if prev is None else prev + gi
    leaves: dict[int, Tensor] = {}
    for node in tape.nodes:
        for t in node.inputs:
            if t.requires_grad and id(t) not in produced:
                leaves[id(t)] = t
    for t in wrt or ():
        leaves[id(t)] = t
    for key, t in leaves.items():
        g = grads.get(key)
        t.grad = np.zeros_like(t.data) if g is None else g
        grads[key] = t.grad
    return grads


def check_finite(*tensors: Tensor) -> None:
    for t in tensors:
        if not np.all(np.isfinite(t.data)):
            raise NonFiniteError(f"non-finite values in {t!r}")


# --------------------------------------------------------------------------
# MAC accounting


class MacCounter:
    """Counts scalar multiply-accumulates issued by matmul/linear."""

    def __init__(self):
        self.macs = 0
        self.by_label: dict[str, int] = {}

    def add(self, n: int, label: str | None):
        self.macs += n
        key = label or "unlabelled"
        self.by_label[key] = self.by_label.get(key, 0) + n

    def __enter__(self):
        _COUNTERS.append(self)
        return self

    def __exit__(self, *exc):
        _COUNTERS.remove(self)
        return False


_COUNTERS: list[MacCounter] = []
_LABELS: list[str] = []


@contextmanager
def mac_label(label: str):
    _LABELS.append(label)
    try:
        yield
    finally:
        _LABELS.pop()


def _count(n: int):
    if _COUNTERS:
        label = _LABELS[-1] if _LABELS else None
        for c in _COUNTERS:
            c.add(int(n), label)


# --------------------------------------------------------------------------
# elementwise primitives


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


def add(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)

    def bw(g):
        return (_unbroadcast(g, a.shape) if a.requires_grad else None,
                _unbroadcast(g, b.shape) if b.requires_grad else None)

    return _emit("add", a.data + b.data, (a, b), bw)


def sub(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)

    def bw(g):
        return (_unbroadcast(g, a.shape) if a.requires_grad else None,
                _unbroadcast(-g, b.shape) if b.requires_grad else None)

    return _emit("sub", a.data - b.data, (a, b), bw)


def mul(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)

    def bw(g):
        return (_unbroadcast(g * b.data, a.shape) if a.requires_grad else None,
                _unbroadcast(g * a.data, b.shape) if b.requires_grad else None)

    return _emit("mul", a.data * b.data, (a, b), bw)


def div(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    out = a.data / b.data

    def bw(g):
        gq = g / b.data
        return (_unbroadcast(gq, a.shape) if a.requires_grad else None,
                _unbroadcast(-gq * out, b.shape) if b.requires_grad else None)

    return _emit("div", out, (a, b), bw)


def neg(a) -> Tensor:
    a = _wrap(a)
    return _emit("neg", -a.data, (a,), lambda g: (-g,))


def abs(a) -> Tensor:  # noqa: A001 - mirrors numpy naming
    a = _wrap(a)
    _branch(np.sign(a.data).astype(np.int8))
    return _emit("abs", np.abs(a.data), (a,), lambda g: (g * np.sign(a.data),))


def sign(a) -> Tensor:
    """Elementwise sign; carries no gradient."""
    a = _wrap(a)
    return Tensor(np.sign(a.data))


def cos(a) -> Tensor:
    a = _wrap(a)
    return _emit("cos", np.cos(a.data), (a,), lambda g: (-g * np.sin(a.data),))


def sin(a) -> Tensor:
    a = _wrap(a)
    return _emit("sin", np.sin(a.data), (a,), lambda g: (g * np.cos(a.data),))


def versine(a, freq: float = 1.0, scale: float = 1.0) -> Tensor:
    """scale * (1 - cos(freq * a)) as one fused op."""
    a = _wrap(a)
    arg = freq * a.data
    return _emit("versine", scale * (1.0 - np.cos(arg)), (a,), lambda g: (g * (scale * freq) * np.sin(arg),))


def sqrt(a) -> Tensor:
    a = _wrap(a)
    out = np.sqrt(a.data)
    return _emit("sqrt", out, (a,), lambda g: (g * 0.5 / out,))


def exp(a) -> Tensor:
    a = _wrap(a)
    out = np.exp(a.data)
    return _emit("exp", out, (a,), lambda g: (g * out,))


def log(a) -> Tensor:
    a = _wrap(a)
    return _emit("log", np.log(a.data), (a,), lambda g: (g / a.data,))


def softplus(a) -> Tensor:
    a = _wrap(a)
    out = np.logaddexp(0.0, a.data)
    return _emit("softplus", out, (a,), lambda g: (g * 0.5 * (1.0 + np.tanh(0.5 * a.data)),))


def clamp_min(a, lo: float) -> Tensor:
    """max(a, lo); gradient flows only where a > lo."""
    a = _wrap(a)
    keep = a.data > lo
    _branch(keep)
    return _emit("clamp_min", np.where(keep, a.data, lo), (a,), lambda g: (g * keep,))


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(a) -> Tensor:
    """tanh-approximated GELU."""
    a = _wrap(a)
    x = a.data
    x2 = x * x
    t = np.tanh(_GELU_C * x * (1.0 + 0.044715 * x2))
    out = 0.5 * x * (1.0 + t)

    def bw(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * x2)
        return (g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner),)

    return _emit("gelu", out, (a,), bw)


# --------------------------------------------------------------------------
# reductions


def _axes(axis, ndim) -> tuple[int, ...]:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(sorted(ax % ndim for ax in axis))


def sum(a, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    a = _wrap(a)
    axes = _axes(axis, a.ndim)
    out = a.data.sum(axis=axes, keepdims=keepdims)

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _emit("sum", out, (a,), bw)


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _wrap(a)
    axes = _axes(axis, a.ndim)
    n = int(np.prod([a.shape[ax] for ax in axes])) if axes else 1
    out = a.data.mean(axis=axes, keepdims=keepdims)

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g / n, a.shape).copy(),)

    return _emit("mean", out, (a,), bw)


def max(a, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    """Maximum over ``axis``; the gradient goes to the first argmax only."""
    a = _wrap(a)
    axes = _axes(axis, a.ndim)
    rest = tuple(ax for ax in range(a.ndim) if ax not in axes)
    perm = rest + axes
    moved = a.data.transpose(perm)
    lead = moved.shape[: len(rest)]
    flat = moved.reshape(lead + (-1,))
    idx = flat.argmax(axis=-1)
    _branch(idx)
    red = np.take_along_axis(flat, idx[..., None], axis=-1)[..., 0]
    out = red
    if keepdims:
        out = np.expand_dims(red, axes)

    def bw(g):
        g = np.asarray(g).reshape(lead)
        gflat = np.zeros(flat.shape)
        np.put_along_axis(gflat, idx[..., None], g[..., None], axis=-1)
        gm = gflat.reshape(moved.shape)
        return (gm.transpose(np.argsort(perm)),)

    return _emit("max", out, (a,), bw)


# --------------------------------------------------------------------------
# shape ops


def reshape(a, shape) -> Tensor:
    a = _wrap(a)
    return _emit("reshape", a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def transpose(a, axes=None) -> Tensor:
    a = _wrap(a)
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inv = np.argsort(axes)
    return _emit("transpose", a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),))


def swap_last(a) -> Tensor:
    axes = list(range(a.ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return transpose(a, axes)


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = [_wrap(t) for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def bw(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _emit("concat", out, tuple(tensors), bw)


def split(a, sizes: Sequence[int], axis: int = -1) -> list[Tensor]:
    a = _wrap(a)
    if builtins.sum(sizes) != a.shape[axis]:
        raise ValueError(f"split sizes {sizes} do not cover extent {a.shape[axis]}")
    out, start = [], 0
    for n in sizes:
        out.append(take_slice(a, start, start + n, axis))
        start += n
    return out


def take_slice(a, start: int, stop: int, axis: int = -1) -> Tensor:
    a = _wrap(a)
    ax = axis % a.ndim
    index = [slice(None)] * a.ndim
    index[ax] = slice(start, stop)
    index = tuple(index)

    def bw(g):
        full = np.zeros_like(a.data)
        full[index] = g
        return (full,)

    return _emit("slice", a.data[index], (a,), bw)


def gather(a, indices: np.ndarray, axis: int = 0) -> Tensor:
    """``np.take`` along one axis; repeated indices accumulate gradient."""
    a = _wrap(a)
    indices = np.asarray(indices, dtype=np.intp)
    ax = axis % a.ndim
    out = np.take(a.data, indices, axis=ax)

    def bw(g):
        full = np.zeros(a.shape[:ax] + (a.shape[ax],) + a.shape[ax + 1:])
        moved = np.moveaxis(full, ax, 0)
        gm = np.moveaxis(g, list(range(ax, ax + indices.ndim)), list(range(indices.ndim)))
        np.add.at(moved, indices, gm)
        return (full,)

    return _emit("gather", out, (a,), bw)


# --------------------------------------------------------------------------
# products and normalization


def matmul(a, b) -> Tensor:
    """Batched product ``[..., m, k] @ [..., k, n]``.

    Batch extents must be equal; a 2-D right operand is shared across the batch.
    """
    a, b = _wrap(a), _wrap(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ValueError(f"matmul needs rank >= 2 operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ValueError(f"inner extents differ: {a.shape} @ {b.shape}")
    if b.ndim > 2 and a.shape[:-2] != b.shape[:-2]:
        raise ValueError(f"batch extents differ: {a.shape} @ {b.shape}")
    out = np.matmul(a.data, b.data)
    m, k = a.shape[-2:]
    n = b.shape[-1]
    batch = int(np.prod(a.shape[:-2])) if a.ndim > 2 else 1
    _count(batch * m * n * k)

    def bw(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        if b.ndim == 2:
            gb = a.data.reshape(-1, k).T @ g.reshape(-1, n)
        else:
            gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return ga, gb

    return _emit("matmul", out, (a, b), bw)


def linear(x, weight, bias=None) -> Tensor:
    """Affine map over the last axis: ``x @ weight + bias``."""
    x, weight = _wrap(x), _wrap(weight)
    d_in, d_out = weight.shape
    if x.shape[-1] != d_in:
        raise ValueError(f"linear expects last extent {d_in}, got {x.shape}")
    if bias is not None:
        bias = _wrap(bias)
        if bias.shape != (d_out,):
            raise ValueError(f"bias shape {bias.shape} != ({d_out},)")
    x2 = x.data.reshape(-1, d_in)
    out2 = x2 @ weight.data
    if bias is not None:
        out2 = out2 + bias.data
    _count(x2.shape[0] * d_in * d_out)
    out = out2.reshape(x.shape[:-1] + (d_out,))

    def bw(g):
        g2 = g.reshape(-1, d_out)
        gx = (g2 @ weight.data.T).reshape(x.shape)
        gw = x2.T @ g2
        if bias is None:
            return gx, gw
        return gx, gw, g2.sum(axis=0)

    inputs = (x, weight) if bias is None else (x, weight, bias)
    return _emit("linear", out, inputs, bw)


def layer_norm(x, gamma=None, beta=None, eps: float = LN_EPS) -> Tensor:
    """Normalize over the last axis, then apply the optional affine."""
    x = _wrap(x)
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    denom = np.sqrt(var + eps)
    xhat = np.divide(xc, denom, out=np.zeros_like(xc), where=denom > 0)
    inv = np.divide(1.0, denom, out=np.zeros_like(denom), where=denom > 0)
    g_arr = _wrap(gamma).data if gamma is not None else None
    out = xhat if g_arr is None else xhat * g_arr
    if beta is not None:
        out = out + _wrap(beta).data

    def bw(g):
        gxhat = g if g_arr is None else g * g_arr
        gx = inv * (gxhat - gxhat.mean(axis=-1, keepdims=True)
                    - xhat * (gxhat * xhat).mean(axis=-1, keepdims=True))
        grads = [gx]
        lead = tuple(range(x.ndim - 1))
        if gamma is not None:
            grads.append((g * xhat).sum(axis=lead))
        if beta is not None:
            grads.append(g.sum(axis=lead))
        return tuple(grads)

    inputs = [x]
    if gamma is not None:
        inputs.append(_wrap(gamma))
    if beta is not None:
        inputs.append(_wrap(beta))
    return _emit("layer_norm", out, tuple(inputs), bw)


def l1_normalize(x, axis: int = -1, eps: float = 1e-8) -> Tensor:
    """x / (sum |x| + eps) along ``axis``, composed from tape primitives."""
    return div(x, add(sum(abs(x), axis=axis, keepdims=True), eps))
