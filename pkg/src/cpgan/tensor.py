"""Dense tensors with tape-free reverse-mode differentiation.

Every op returns a fresh :class:`Tensor`; when gradient recording is on and any
input requires a gradient, the output carries a :class:`Node` pointing at its
inputs and a closure mapping the output gradient to input gradients.
``Tensor.backward`` orders the nodes topologically and replays them in reverse.

Shapes are explicit. Binary elementwise ops accept two tensors of identical
shape or a tensor and a Python scalar; anything else must go through
:func:`expand` first.
"""

from __future__ import annotations

import contextlib
import logging
from typing import Callable, Iterable, Optional, Sequence, Union

import numpy as np

logger = logging.getLogger(__name__)

Scalar = Union[int, float]

_state = {"dtype": np.dtype(np.float32), "grad": True}


def get_dtype() -> np.dtype:
    return _state["dtype"]


def set_precision(mode: str) -> None:
    """Select ``"float32"`` (training) or ``"float64"`` (oracles, grad checks)."""
    if mode not in ("float32", "float64"):
        raise ValueError(f"unknown precision mode {mode!r}")
    _state["dtype"] = np.dtype(mode)


@contextlib.contextmanager
def precision(mode: str):
    prev = _state["dtype"]
    set_precision(mode)
    try:
        yield
    finally:
        _state["dtype"] = prev


@contextlib.contextmanager
def no_grad():
    prev = _state["grad"]
    _state["grad"] = False
    try:
        yield
    finally:
        _state["grad"] = prev


def grad_enabled() -> bool:
    return _state["grad"]


@contextlib.contextmanager
def deterministic():
    """Single-ordered mode: BLAS reductions pinned to one thread."""
    from threadpoolctl import threadpool_limits

    with threadpool_limits(limits=1):
        yield


class Node:
    """One executed op: its inputs and the rule for pulling gradients back."""

    __slots__ = ("op", "inputs", "backward")

    def __init__(self, op: str, inputs: tuple, backward: Callable):
        self.op = op
        self.inputs = inputs
        self.backward = backward

    def __repr__(self):
        return f"Node({self.op})"


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_node", "name", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: Optional[str] = None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data, dtype=dtype or get_dtype())
        if arr.ndim == 0:
            arr = arr.reshape(())
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self._node: Optional[Node] = None
        self.name = name

    # -- basic properties -------------------------------------------------
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

    @property
    def is_leaf(self) -> bool:
        return self._node is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.item())

    def detach(self) -> "Tensor":
        return Tensor(self.data, dtype=self.data.dtype)

    def zero_grad(self) -> None:
        if self.requires_grad:
            self.grad = np.zeros_like(self.data)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def __len__(self):
        return self.shape[0]

    # -- autodiff ---------------------------------------------------------
    def backward(self, grad: Optional[np.ndarray] = None) -> None:
        if not self.requires_grad:
            raise RuntimeError("backward() on a tensor that does not require grad")
        if grad is None:
            if self.size != 1:
                raise RuntimeError(f"backward() needs an explicit gradient for shape {self.shape}")
            grad = np.ones_like(self.data)
        Graph.trace(self).run_backward(np.asarray(grad, dtype=self.dtype))

    # -- operators --------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return add(neg(self), other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return mul(reciprocal(self), other)

    def __neg__(self):
        return neg(self)

    def __pow__(self, exponent):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    # method forms used throughout the models
    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    @property
    def T(self):
        if self.ndim != 2:
            raise ValueError(f".T is defined for 2-D tensors only, got shape {self.shape}")
        return transpose(self, (1, 0))

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)

    def tanh(self):
        return tanh(self)


class Graph:
    """Ordered record of the ops that produced a tensor.

    ``nodes`` is a topological order (inputs before consumers); backward
    replay walks it in reverse, visiting every node exactly once.
    """

    def __init__(self, output: Tensor, order: list):
        self.output = output
        self.order = order

    @classmethod
    def trace(cls, output: Tensor) -> "Graph":
        order: list = []
        seen: set = set()
        stack = [(output, False)]
        while stack:
            t, expanded = stack.pop()
            if expanded:
                order.append(t)
                continue
            if id(t) in seen:
                continue
            seen.add(id(t))
            stack.append((t, True))
            if t._node is not None:
                for inp in t._node.inputs:
                    if inp.requires_grad and id(inp) not in seen:
                        stack.append((inp, False))
        return cls(output, order)

    @property
    def nodes(self) -> list:
        return [t._node for t in self.order if t._node is not None]

    @property
    def leaves(self) -> list:
        return [t for t in self.order if t._node is None]

    def run_backward(self, grad: np.ndarray) -> list:
        """Accumulate gradients into leaves; returns the nodes in visit order."""
        grads = {id(self.output): grad}
        visited = []
        for t in reversed(self.order):
            g = grads.pop(id(t), None)
            if g is None:
                continue
            if t._node is None:
                if t.grad is None:
                    t.grad = np.zeros_like(t.data)
                t.grad += g
                continue
            visited.append(t._node)
            in_grads = t._node.backward(g)
            for inp, ig in zip(t._node.inputs, in_grads):
                if ig is None or not inp.requires_grad:
                    continue
                if ig.shape != inp.shape:
                    raise AssertionError(f"{t._node.op}: grad shape {ig.shape} != input shape {inp.shape}")
                if id(inp) in grads:
                    grads[id(inp)] = grads[id(inp)] + ig
                else:
                    grads[id(inp)] = ig
        return visited

    def clear(self) -> None:
        """Zero leaf gradients; parameter values are untouched."""
        for t in self.leaves:
            if t.requires_grad:
                t.grad = np.zeros_like(t.data)


# ---------------------------------------------------------------------------
# construction helpers


def tensor(data, requires_grad: bool = False, name: Optional[str] = None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, name=name)


def zeros(shape, requires_grad: bool = False) -> Tensor:
    return Tensor(np.zeros(shape, dtype=get_dtype()), requires_grad=requires_grad)


def ones(shape, requires_grad: bool = False) -> Tensor:
    return Tensor(np.ones(shape, dtype=get_dtype()), requires_grad=requires_grad)


def randn(shape, rng: np.random.Generator, scale: float = 1.0, requires_grad: bool = False) -> Tensor:
    """Random-normal fill (not differentiable; a source, not an op)."""
    return Tensor(rng.standard_normal(shape) * scale, requires_grad=requires_grad)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(op: str, data: np.ndarray, inputs: tuple, backward: Callable) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.name = None
    out._node = None
    out.requires_grad = False
    if _state["grad"] and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out._node = Node(op, inputs, backward)
    return out


def _check_same(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise ValueError(f"{op}: shape mismatch {a.shape} vs {b.shape} (use expand() to broadcast)")


# ---------------------------------------------------------------------------
# elementwise


def add(a: Tensor, b) -> Tensor:
    if not isinstance(b, Tensor):
        c = float(b)
        return _result("add_scalar", a.data + a.dtype.type(c), (a,), lambda g: (g,))
    _check_same("add", a, b)
    return _result("add", a.data + b.data, (a, b), lambda g: (g, g))


def sub(a: Tensor, b) -> Tensor:
    if not isinstance(b, Tensor):
        return add(a, -float(b))
    _check_same("sub", a, b)
    return _result("sub", a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a: Tensor, b) -> Tensor:
    if not isinstance(b, Tensor):
        c = a.dtype.type(float(b))
        return _result("mul_scalar", a.data * c, (a,), lambda g: (g * c,))
    _check_same("mul", a, b)
    ad, bd = a.data, b.data
    return _result("mul", ad * bd, (a, b), lambda g: (g * bd, g * ad))


def div(a: Tensor, b) -> Tensor:
    if not isinstance(b, Tensor):
        c = a.dtype.type(float(b))
        return _result("div_scalar", a.data / c, (a,), lambda g: (g / c,))
    _check_same("div", a, b)
    ad, bd = a.data, b.data
    out = ad / bd
    return _result("div", out, (a, b), lambda g: (g / bd, -g * out / bd))


def neg(a: Tensor) -> Tensor:
    return _result("neg", -a.data, (a,), lambda g: (-g,))


def reciprocal(a: Tensor) -> Tensor:
    out = 1.0 / a.data
    return _result("reciprocal", out, (a,), lambda g: (-g * out * out,))


def power(a: Tensor, exponent: Scalar) -> Tensor:
    p = float(exponent)
    ad = a.data
    return _result("pow", ad**p, (a,), lambda g: (g * p * ad ** (p - 1),))


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _result("exp", out, (a,), lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    ad = a.data
    return _result("log", np.log(ad), (a,), lambda g: (g / ad,))


def sqrt(a: Tensor) -> Tensor:
    out = np.sqrt(a.data)
    return _result("sqrt", out, (a,), lambda g: (g * 0.5 / out,))


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)
    return _result("tanh", out, (a,), lambda g: (g * (1.0 - out * out),))


def sigmoid(a: Tensor) -> Tensor:
    x = a.data
    # split by sign so exp never overflows
    e = np.exp(-np.abs(x))
    out = np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(x.dtype)
    return _result("sigmoid", out, (a,), lambda g: (g * out * (1.0 - out),))


def leaky_relu(a: Tensor, slope: float = 0.2) -> Tensor:
    x = a.data
    scale = np.where(x > 0, 1.0, slope).astype(x.dtype)
    return _result("leaky_relu", x * scale, (a,), lambda g: (g * scale,))


def relu(a: Tensor) -> Tensor:
    x = a.data
    on = (x > 0).astype(x.dtype)
    return _result("relu", x * on, (a,), lambda g: (g * on,))


# ---------------------------------------------------------------------------
# shape ops


def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(int(s) for s in shape)
    src = a.shape
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ValueError(f"reshape: cannot view {src} as {shape}") from None
    return _result("reshape", out, (a,), lambda g: (g.reshape(src),))


def transpose(a: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _result("transpose", np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inv),))


def expand(a: Tensor, shape) -> Tensor:
    """Explicit broadcast (numpy rules); the backward pass sums the copies."""
    shape = tuple(shape)
    src = a.shape
    try:
        out = np.broadcast_to(a.data, shape)
    except ValueError:
        raise ValueError(f"expand: cannot broadcast {src} to {shape}") from None
    lead = len(shape) - len(src)
    keep_axes = tuple(i + lead for i, s in enumerate(src) if s == 1 and shape[i + lead] != 1)

    def backward(g):
        if lead:
            g = g.sum(axis=tuple(range(lead)))
        if keep_axes:
            g = g.sum(axis=tuple(i - lead for i in keep_axes), keepdims=True)
        return (g,)

    return _result("expand", np.ascontiguousarray(out), (a,), backward)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = tuple(tensors)
    if not tensors:
        raise ValueError("concat: empty tensor list")
    ndim = tensors[0].ndim
    ax = axis % ndim
    for t in tensors[1:]:
        if t.ndim != ndim or any(t.shape[i] != tensors[0].shape[i] for i in range(ndim) if i != ax):
            raise ValueError(f"concat: incompatible shapes {[t.shape for t in tensors]} on axis {axis}")
    out = np.concatenate([t.data for t in tensors], axis=ax)
    bounds = np.cumsum([0] + [t.shape[ax] for t in tensors])

    def backward(g):
        return tuple(np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=ax) for i in range(len(tensors)))

    return _result("concat", out, tensors, backward)


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = tuple(tensors)
    return concat([reshape(t, t.shape[:axis % (t.ndim + 1)] + (1,) + t.shape[axis % (t.ndim + 1):]) for t in tensors], axis)


def getitem(a: Tensor, idx) -> Tensor:
    out = a.data[idx]
    src_shape, dtype = a.shape, a.dtype
    basic = _is_basic_index(idx)

    def backward(g):
        full = np.zeros(src_shape, dtype=dtype)
        if basic:
            full[idx] += g
        else:
            np.add.at(full, idx, g)
        return (full,)

    return _result("getitem", np.array(out, copy=True), (a,), backward)


def _is_basic_index(idx) -> bool:
    items = idx if isinstance(idx, tuple) else (idx,)
    return all(isinstance(i, (int, np.integer, slice)) or i is None or i is Ellipsis for i in items)


def take(a: Tensor, indices, axis: int = 0) -> Tensor:
    """Gather along ``axis`` (embedding lookup); repeated indices accumulate."""
    indices = np.asarray(indices, dtype=np.int64)
    ax = axis % a.ndim
    if indices.size and (indices.min() < 0 or indices.max() >= a.shape[ax]):
        raise IndexError(f"take: index out of range for axis {axis} of extent {a.shape[ax]}")
    out = np.take(a.data, indices, axis=ax)
    src_shape, dtype = a.shape, a.dtype

    def backward(g):
        full = np.zeros(src_shape, dtype=dtype)
        g_moved = np.moveaxis(g.reshape(src_shape[:ax] + (indices.size,) + src_shape[ax + 1:]), ax, 0)
        full_moved = np.moveaxis(full, ax, 0)
        np.add.at(full_moved, indices.reshape(-1), g_moved)
        return (full,)

    return _result("take", out, (a,), backward)


# ---------------------------------------------------------------------------
# reductions


def _norm_axis(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        return (axis % ndim,)
    return tuple(a % ndim for a in axis)


def sum_(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axis(axis, a.ndim)
    out = a.data.sum(axis=axes, keepdims=keepdims)
    src = a.shape

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, src).copy(),)

    return _result("sum", np.asarray(out), (a,), backward)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axis(axis, a.ndim)
    n = int(np.prod([a.shape[i] for i in axes]))
    return mul(sum_(a, axis, keepdims), 1.0 / n)


def _masked_logits(x: np.ndarray, mask: Optional[np.ndarray]) -> np.ndarray:
    if mask is None:
        return x
    return np.where(mask, x, np.finfo(x.dtype).min / 4)


def softmax(a: Tensor, axis: int = -1, mask: Optional[np.ndarray] = None) -> Tensor:
    """Max-subtracted softmax; ``mask`` (bool, broadcastable) zeroes excluded slots."""
    if a.shape[axis] == 0:
        raise ValueError(f"softmax: empty extent on axis {axis} of shape {a.shape}")
    x = _masked_logits(a.data, mask)
    z = np.exp(x - x.max(axis=axis, keepdims=True))
    if mask is not None:
        z = z * mask
    out = z / z.sum(axis=axis, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _result("softmax", out, (a,), backward)


def log_softmax(a: Tensor, axis: int = -1, mask: Optional[np.ndarray] = None) -> Tensor:
    """Log of :func:`softmax`; masked slots read 0 and pass no gradient."""
    if a.shape[axis] == 0:
        raise ValueError(f"log_softmax: empty extent on axis {axis} of shape {a.shape}")
    x = _masked_logits(a.data, mask)
    shifted = x - x.max(axis=axis, keepdims=True)
    z = np.exp(shifted)
    if mask is not None:
        z = z * mask
    lse = np.log(z.sum(axis=axis, keepdims=True))
    out = shifted - lse
    if mask is not None:
        out = np.where(mask, out, 0.0).astype(x.dtype)
    probs = z / z.sum(axis=axis, keepdims=True)

    def backward(g):
        if mask is not None:
            g = g * mask
        return (g - probs * g.sum(axis=axis, keepdims=True),)

    return _result("log_softmax", out, (a,), backward)


def logsumexp(a: Tensor, axis: int = -1, mask: Optional[np.ndarray] = None) -> Tensor:
    x = _masked_logits(a.data, mask)
    m = x.max(axis=axis, keepdims=True)
    z = np.exp(x - m)
    if mask is not None:
        z = z * mask
    s = z.sum(axis=axis, keepdims=True)
    out = (np.log(s) + m).squeeze(axis)
    probs = z / s

    def backward(g):
        return (np.expand_dims(g, axis) * probs,)

    return _result("logsumexp", out, (a,), backward)


def argmax(a: Tensor, axis: int = -1) -> np.ndarray:
    """Not differentiable; returns an index array (first maximum wins)."""
    return np.argmax(a.data, axis=axis)


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes; leading axes must match exactly."""
    if a.ndim < 2 or b.ndim < 2 or a.shape[:-2] != b.shape[:-2] or a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    ad, bd = a.data, b.data
    out = ad @ bd

    def backward(g):
        return (g @ np.swapaxes(bd, -1, -2), np.swapaxes(ad, -1, -2) @ g)

    return _result("matmul", out, (a, b), backward)


def linear(x: Tensor, w: Tensor, b: Optional[Tensor] = None) -> Tensor:
    """Dense layer over the last axis: ``x @ w.T + b`` with ``w`` of shape (out, in)."""
    if w.ndim != 2 or x.shape[-1] != w.shape[1] or (b is not None and b.shape != (w.shape[0],)):
        raise ValueError(f"linear: x {x.shape}, w {w.shape}, b {None if b is None else b.shape}")
    xd, wd = x.data, w.data
    x2 = xd.reshape(-1, xd.shape[-1])
    out = x2 @ wd.T
    if b is not None:
        out = out + b.data
    out = out.reshape(xd.shape[:-1] + (wd.shape[0],))
    inputs = (x, w) if b is None else (x, w, b)

    def backward(g):
        g2 = g.reshape(-1, wd.shape[0])
        grads = [(g2 @ wd).reshape(xd.shape), g2.T @ x2]
        if b is not None:
            grads.append(g2.sum(axis=0))
        return tuple(grads)

    return _result("linear", out, inputs, backward)


def l2_norm(a: Tensor, axis: int = -1) -> Tensor:
    """Euclidean norm along ``axis`` (rows by default); subgradient 0 at the origin."""
    x = a.data
    n = np.sqrt((x * x).sum(axis=axis))
    safe = np.where(n > 0, n, 1.0)

    def backward(g):
        return (np.expand_dims(g / safe * (n > 0), axis) * x,)

    return _result("l2_norm", n, (a,), backward)


def cosine(a: Tensor, b: Tensor, axis: int = -1) -> Tensor:
    """Cosine similarity of paired rows; defined as 0 when either row is zero."""
    _check_same("cosine", a, b)
    x, y = a.data, b.data
    nx = np.sqrt((x * x).sum(axis=axis, keepdims=True))
    ny = np.sqrt((y * y).sum(axis=axis, keepdims=True))
    valid = (nx != 0) & (ny != 0)  # NaN norms stay valid so NaN propagates
    nx_s = np.where(valid, nx, 1.0)
    ny_s = np.where(valid, ny, 1.0)
    dot = (x * y).sum(axis=axis, keepdims=True)
    c = np.where(valid, dot / (nx_s * ny_s), 0.0).astype(x.dtype)

    def backward(g):
        ge = np.expand_dims(g, axis) * valid
        gx = ge * (y / (nx_s * ny_s) - c * x / (nx_s * nx_s))
        gy = ge * (x / (nx_s * ny_s) - c * y / (ny_s * ny_s))
        return (gx, gy)

    return _result("cosine", c.squeeze(axis), (a, b), backward)


# ---------------------------------------------------------------------------
# convolution and resampling (NCHW)


def _im2col(xp: np.ndarray, kh: int, kw: int, stride: int, ho: int, wo: int) -> np.ndarray:
    xp = np.ascontiguousarray(xp)
    sb, sc, sh, sw = xp.strides
    win = np.lib.stride_tricks.as_strided(
        xp, (xp.shape[0], ho, wo, xp.shape[1], kh, kw), (sb, sh * stride, sw * stride, sc, sh, sw), writeable=False
    )
    # (B, Ho, Wo, C, kh, kw) -> (B*Ho*Wo, C*kh*kw)
    return win.reshape(-1, xp.shape[1] * kh * kw)


def _pad(x: np.ndarray, p: int) -> np.ndarray:
    B, C, H, W = x.shape
    out = np.zeros((B, C, H + 2 * p, W + 2 * p), dtype=x.dtype)
    out[:, :, p : p + H, p : p + W] = x
    return out


def conv2d(x: Tensor, w: Tensor, b: Optional[Tensor] = None, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation with zero padding; ``w`` is (out, in, kh, kw)."""
    if x.ndim != 4 or w.ndim != 4 or x.shape[1] != w.shape[1]:
        raise ValueError(f"conv2d: input {x.shape} incompatible with weight {w.shape}")
    if b is not None and b.shape != (w.shape[0],):
        raise ValueError(f"conv2d: bias {b.shape} does not match {w.shape[0]} output channels")
    B, C, H, W = x.shape
    O, _, kh, kw = w.shape
    ho = (H + 2 * padding - kh) // stride + 1
    wo = (W + 2 * padding - kw) // stride + 1
    if ho <= 0 or wo <= 0:
        raise ValueError(f"conv2d: kernel {kh}x{kw} too large for input {H}x{W} with padding {padding}")
    xp = _pad(x.data, padding) if padding else x.data
    cols = _im2col(xp, kh, kw, stride, ho, wo)
    wm = w.data.reshape(O, -1)
    out = cols @ wm.T
    if b is not None:
        out += b.data
    out = out.reshape(B, ho, wo, O).transpose(0, 3, 1, 2)
    inputs = (x, w) if b is None else (x, w, b)
    xp_shape = xp.shape

    def backward(g):
        g2 = g.transpose(0, 2, 3, 1).reshape(-1, O)
        gw = (g2.T @ cols).reshape(w.shape)
        grads = [None, gw]
        if x.requires_grad:
            dcols = (g2 @ wm).reshape(B, ho, wo, C, kh, kw)
            dxp = np.zeros(xp_shape, dtype=g.dtype)
            for i in range(kh):
                for j in range(kw):
                    dxp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += dcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
            grads[0] = dxp[:, :, padding : padding + H, padding : padding + W] if padding else dxp
        if b is not None:
            grads.append(g2.sum(axis=0))
        return tuple(grads)

    return _result("conv2d", np.ascontiguousarray(out), inputs, backward)


def upsample2x(x: Tensor) -> Tensor:
    """Nearest-neighbour 2x spatial upsampling of an NCHW tensor."""
    if x.ndim != 4:
        raise ValueError(f"upsample2x expects NCHW, got {x.shape}")
    B, C, H, W = x.shape
    out = np.repeat(np.repeat(x.data, 2, axis=2), 2, axis=3)
    return _result("upsample2x", out, (x,), lambda g: (g.reshape(B, C, H, 2, W, 2).sum(axis=(3, 5)),))


def avg_pool2x(x: Tensor) -> Tensor:
    if x.ndim != 4 or x.shape[2] % 2 or x.shape[3] % 2:
        raise ValueError(f"avg_pool2x expects NCHW with even extents, got {x.shape}")
    B, C, H, W = x.shape
    out = x.data.reshape(B, C, H // 2, 2, W // 2, 2).mean(axis=(3, 5))

    def backward(g):
        return (np.repeat(np.repeat(g, 2, axis=2), 2, axis=3) * 0.25,)

    return _result("avg_pool2x", out, (x,), backward)


def parameters_finite(params: Iterable[Tensor]) -> bool:
    return all(np.isfinite(p.data).all() and (p.grad is None or np.isfinite(p.grad).all()) for p in params)
