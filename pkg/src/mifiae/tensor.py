"""Small reverse-mode autodiff engine over float64 numpy arrays.

Every op checks shapes on entry, refuses to broadcast anything except a
scalar against a tensor, and rejects non-finite results.  Gradients are
collected by replaying the recorded ops in reverse registration order.
"""

from __future__ import annotations

import contextlib
import itertools
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

__all__ = [
    "Tensor", "GradTape", "ShapeError", "NonFiniteError", "no_grad", "tensor",
    "add", "sub", "mul", "neg", "scale", "matmul", "linear", "relu", "exp", "log",
    "sum", "mean", "reshape", "permute", "concat", "split", "expand", "pad",
    "softmax", "log_softmax", "layer_norm", "conv3d", "max_pool3d",
    "nearest_upsample3d", "backward", "AdamState", "adam_step",
]


class ShapeError(ValueError):
    """Operand shapes are incompatible for the requested op."""


class NonFiniteError(FloatingPointError):
    """An op produced NaN or Inf."""


_seq = itertools.count()
_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "name", "_parents", "_backward", "_seq")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.array(data, dtype=np.float64)
        if not np.isfinite(arr).all():
            raise NonFiniteError(f"tensor {name or ''} built from non-finite data")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._backward = None
        self._seq = -1

    # -- introspection -------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(()))

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{tag})"

    # -- operators -----------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return add(neg(self), other)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("tensor/tensor division is not supported")
        return scale(self, 1.0 / float(other))

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return _index(self, index)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def permute(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return permute(self, axes)

    def sum(self, axis=None, keepdims=False):
        return sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)


def tensor(data, requires_grad: bool = False, name: str | None = None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, name=name)


def _as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x)


def _result(data: np.ndarray, parents: Sequence[Tensor], backward, op: str) -> Tensor:
    if not np.isfinite(data).all():
        raise NonFiniteError(f"{op} produced non-finite values")
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.name = None
    needs = _grad_enabled and any(p.requires_grad for p in parents)
    out.requires_grad = needs
    if needs:
        out._parents = tuple(parents)
        out._backward = backward
        out._seq = next(_seq)
    else:
        out._parents = ()
        out._backward = None
        out._seq = -1
    return out


# ---------------------------------------------------------------------------
# Elementwise arithmetic
# ---------------------------------------------------------------------------

def _is_scalar(t: Tensor) -> bool:
    return t.data.ndim == 0


def _binary_shapes(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape and not (_is_scalar(a) or _is_scalar(b)):
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} differ (only scalar broadcasting)")


def _unbroadcast(g: np.ndarray, t: Tensor) -> np.ndarray:
    if _is_scalar(t) and g.ndim:
        return np.asarray(g.sum())
    return g


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _binary_shapes(a, b, "add")

    def bw(g):
        return _unbroadcast(g, a), _unbroadcast(g, b)

    return _result(a.data + b.data, (a, b), bw, "add")


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _binary_shapes(a, b, "sub")

    def bw(g):
        return _unbroadcast(g, a), _unbroadcast(-g, b)

    return _result(a.data - b.data, (a, b), bw, "sub")


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _binary_shapes(a, b, "mul")

    def bw(g):
        return _unbroadcast(g * b.data, a), _unbroadcast(g * a.data, b)

    return _result(a.data * b.data, (a, b), bw, "mul")


def neg(a: Tensor) -> Tensor:
    return _result(-a.data, (a,), lambda g: (-g,), "neg")


def scale(a: Tensor, c: float) -> Tensor:
    """Multiply by a constant python float."""
    c = float(c)
    return _result(a.data * c, (a,), lambda g: (g * c,), "scale")


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _result(np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,), "relu")


def exp(x: Tensor) -> Tensor:
    with np.errstate(over="ignore"):
        y = np.exp(x.data)
    return _result(y, (x,), lambda g: (g * y,), "exp")


def log(x: Tensor) -> Tensor:
    with np.errstate(divide="ignore", invalid="ignore"):
        y = np.log(x.data)
    return _result(y, (x,), lambda g: (g / x.data,), "log")


# ---------------------------------------------------------------------------
# Reductions and shape manipulation
# ---------------------------------------------------------------------------

def _norm_axes(axis, ndim: int) -> tuple[int, ...]:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(sorted(a % ndim for a in axis))


def sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    axes = _norm_axes(axis, x.ndim)
    y = x.data.sum(axis=axes, keepdims=keepdims)

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _result(np.asarray(y), (x,), bw, "sum")


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axes(axis, x.ndim)
    count = int(np.prod([x.shape[a] for a in axes])) if axes else 1
    return scale(sum(x, axes, keepdims), 1.0 / count)


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(int(s) for s in shape)
    try:
        y = x.data.reshape(shape)
    except ValueError as exc:
        raise ShapeError(f"reshape: cannot view {x.shape} as {shape}") from exc
    return _result(y, (x,), lambda g: (g.reshape(x.shape),), "reshape")


def permute(x: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(int(a) for a in axes)
    if sorted(a % x.ndim for a in axes) != list(range(x.ndim)):
        raise ShapeError(f"permute: {axes} is not a permutation of {x.ndim} axes")
    inverse = tuple(np.argsort(axes))
    y = np.ascontiguousarray(x.data.transpose(axes))
    return _result(y, (x,), lambda g: (g.transpose(inverse),), "permute")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    if not tensors:
        raise ShapeError("concat: empty input")
    ndim = tensors[0].ndim
    axis = axis % ndim
    for t in tensors:
        if t.ndim != ndim or any(
            t.shape[d] != tensors[0].shape[d] for d in range(ndim) if d != axis
        ):
            raise ShapeError(f"concat: incompatible shapes {[t.shape for t in tensors]} on axis {axis}")
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum(sizes)[:-1]

    def bw(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _result(np.concatenate([t.data for t in tensors], axis=axis), tensors, bw, "concat")


def _index(x: Tensor, index) -> Tensor:
    if not isinstance(index, tuple):
        index = (index,)
    for i in index:
        if not (isinstance(i, (slice, int)) or i is Ellipsis):
            raise TypeError("only basic slicing is supported")
    y = np.array(x.data[index])

    def bw(g):
        full = np.zeros_like(x.data)
        full[index] = g
        return (full,)

    return _result(y, (x,), bw, "index")


def split(x: Tensor, sizes: Sequence[int], axis: int = 0) -> list[Tensor]:
    axis = axis % x.ndim
    if int(np.sum(sizes)) != x.shape[axis] or any(s <= 0 for s in sizes):
        raise ShapeError(f"split: sizes {list(sizes)} do not partition extent {x.shape[axis]}")
    out, start = [], 0
    for s in sizes:
        sl = [slice(None)] * x.ndim
        sl[axis] = slice(start, start + s)
        out.append(_index(x, tuple(sl)))
        start += s
    return out


def expand(x: Tensor, shape: Sequence[int]) -> Tensor:
    """Explicit broadcast of ``x`` to ``shape`` (numpy rules)."""
    shape = tuple(shape)
    try:
        y = np.broadcast_to(x.data, shape).copy()
    except ValueError as exc:
        raise ShapeError(f"expand: cannot broadcast {x.shape} to {shape}") from exc
    lead = len(shape) - x.ndim
    kept = tuple(i + lead for i, s in enumerate(x.shape) if s == 1 and shape[i + lead] != 1)

    def bw(g):
        g = g.sum(axis=tuple(range(lead)) + kept, keepdims=True)
        return (g.reshape(x.shape),)

    return _result(y, (x,), bw, "expand")


def pad(x: Tensor, widths: Sequence[tuple[int, int]]) -> Tensor:
    """Zero padding, ``widths`` as in ``np.pad``."""
    widths = [tuple(w) for w in widths]
    if len(widths) != x.ndim:
        raise ShapeError(f"pad: {len(widths)} widths for {x.ndim}-d tensor")
    index = tuple(slice(lo, lo + n) for (lo, _), n in zip(widths, x.shape))
    return _result(np.pad(x.data, widths), (x,), lambda g: (g[index],), "pad")


# ---------------------------------------------------------------------------
# Linear algebra
# ---------------------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Batched matrix product over the last two axes.

    Leading axes must match exactly unless one operand is a plain matrix,
    which is then shared across the other's batch.
    """
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul: operands must be at least 2-d, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: inner extents differ in {a.shape} @ {b.shape}")
    if a.ndim > 2 and b.ndim > 2 and a.shape[:-2] != b.shape[:-2]:
        raise ShapeError(f"matmul: batch extents differ in {a.shape} @ {b.shape}")

    def bw(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        if a.ndim == 2 and g.ndim > 2:
            ga = ga.reshape(-1, *a.shape).sum(0)
        if b.ndim == 2 and g.ndim > 2:
            gb = a.data.reshape(-1, a.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        return ga, gb

    return _result(a.data @ b.data, (a, b), bw, "matmul")


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x @ weight.T + bias`` over the last axis; weight is ``[out, in]``."""
    if weight.ndim != 2 or x.shape[-1] != weight.shape[1]:
        raise ShapeError(f"linear: input {x.shape} does not match weight {weight.shape}")
    if bias is not None and bias.shape != (weight.shape[0],):
        raise ShapeError(f"linear: bias {bias.shape} does not match weight {weight.shape}")
    y = x.data @ weight.data.T
    if bias is not None:
        y = y + bias.data
    parents = (x, weight) if bias is None else (x, weight, bias)

    def bw(g):
        g2 = g.reshape(-1, weight.shape[0])
        gx = g @ weight.data
        gw = g2.T @ x.data.reshape(-1, weight.shape[1])
        if bias is None:
            return gx, gw
        return gx, gw, g2.sum(0)

    return _result(y, parents, bw, "linear")


# ---------------------------------------------------------------------------
# Normalisation
# ---------------------------------------------------------------------------

def softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return _result(y, (x,), bw, "softmax")


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    y = z - np.log(np.exp(z).sum(axis=axis, keepdims=True))
    p = np.exp(y)

    def bw(g):
        return (g - p * g.sum(axis=axis, keepdims=True),)

    return _result(y, (x,), bw, "log_softmax")


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalise over the last axis, then apply the affine ``gamma``/``beta``."""
    n = x.shape[-1]
    if gamma.shape != (n,) or beta.shape != (n,):
        raise ShapeError(f"layer_norm: affine {gamma.shape}/{beta.shape} vs features {n}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    y = xhat * gamma.data + beta.data

    def bw(g):
        lead = tuple(range(g.ndim - 1))
        gg = (g * xhat).sum(axis=lead)
        gb = g.sum(axis=lead)
        gh = g * gamma.data
        gx = inv * (gh - gh.mean(axis=-1, keepdims=True)
                    - xhat * (gh * xhat).mean(axis=-1, keepdims=True))
        return gx, gg, gb

    return _result(y, (x, gamma, beta), bw, "layer_norm")


# ---------------------------------------------------------------------------
# Volumetric ops.  Inputs are [C, H, W, D] or batched [B, C, H, W, D].
# ---------------------------------------------------------------------------

def _batched(x: Tensor, op: str) -> tuple[np.ndarray, bool]:
    if x.ndim == 4:
        return x.data[None], True
    if x.ndim == 5:
        return x.data, False
    raise ShapeError(f"{op}: expected [C,H,W,D] or [B,C,H,W,D], got {x.shape}")


def conv3d(x: Tensor, kernel: Tensor, bias: Tensor | None = None,
           stride: int = 1, pad: int = 0) -> Tensor:
    """3-D cross-correlation with a cubic odd kernel ``[C_out, C_in, k, k, k]``."""
    xb, squeeze = _batched(x, "conv3d")
    if kernel.ndim != 5 or len(set(kernel.shape[2:])) != 1:
        raise ShapeError(f"conv3d: kernel must be [C_out,C_in,k,k,k], got {kernel.shape}")
    c_out, c_in, k = kernel.shape[0], kernel.shape[1], kernel.shape[2]
    if k % 2 == 0:
        raise ShapeError(f"conv3d: kernel extent {k} must be odd")
    if xb.shape[1] != c_in:
        raise ShapeError(f"conv3d: input channels {xb.shape[1]} vs kernel {kernel.shape}")
    if bias is not None and bias.shape != (c_out,):
        raise ShapeError(f"conv3d: bias {bias.shape} vs {c_out} output channels")
    if stride < 1 or pad < 0:
        raise ShapeError(f"conv3d: invalid stride={stride} pad={pad}")
    spatial = xb.shape[2:]
    if any(s + 2 * pad < k for s in spatial):
        raise ShapeError(f"conv3d: kernel {k} larger than padded input {spatial} (pad={pad})")
    out_sp = tuple((s + 2 * pad - k) // stride + 1 for s in spatial)
    nb = xb.shape[0]
    xp = np.pad(xb, ((0, 0), (0, 0), (pad, pad), (pad, pad), (pad, pad))) if pad else xb
    win = sliding_window_view(xp, (k, k, k), axis=(2, 3, 4))
    win = win[:, :, ::stride, ::stride, ::stride][:, :, :out_sp[0], :out_sp[1], :out_sp[2]]
    cols = win.transpose(0, 1, 5, 6, 7, 2, 3, 4).reshape(nb, c_in * k ** 3, -1)
    wmat = kernel.data.reshape(c_out, -1)
    y = wmat @ cols
    if bias is not None:
        y = y + bias.data[:, None]
    y = y.reshape(nb, c_out, *out_sp)
    parents = (x, kernel) if bias is None else (x, kernel, bias)

    def bw(g):
        gb = g if not squeeze else g[None]
        g2 = gb.reshape(nb, c_out, -1)
        gw = (g2 @ cols.transpose(0, 2, 1)).sum(axis=0).reshape(kernel.shape)
        gcols = (wmat.T @ g2).reshape(nb, c_in, k, k, k, *out_sp)
        gxp = np.zeros_like(xp)
        sh, sw, sd = (stride * (o - 1) + 1 for o in out_sp)
        for a in range(k):
            for b in range(k):
                for c in range(k):
                    gxp[:, :, a:a + sh:stride, b:b + sw:stride, c:c + sd:stride] += gcols[:, :, a, b, c]
        if pad:
            gxp = gxp[:, :, pad:-pad, pad:-pad, pad:-pad]
        gx = gxp[0] if squeeze else gxp
        if bias is None:
            return gx, gw
        return gx, gw, g2.sum(axis=(0, 2))

    return _result(y[0] if squeeze else y, parents, bw, "conv3d")


def max_pool3d(x: Tensor, size: int = 2) -> Tensor:
    """Non-overlapping max pooling over the last three axes."""
    sp = x.shape[-3:]
    if x.ndim < 3 or any(s % size for s in sp):
        raise ShapeError(f"max_pool3d: spatial extents {sp} not divisible by {size}")
    lead = x.shape[:-3]
    blocks = x.data.reshape(*lead, sp[0] // size, size, sp[1] // size, size, sp[2] // size, size)
    n = len(lead)
    order = tuple(range(n)) + (n, n + 2, n + 4, n + 1, n + 3, n + 5)
    flat = blocks.transpose(order).reshape(*lead, sp[0] // size, sp[1] // size, sp[2] // size, -1)
    arg = flat.argmax(axis=-1)
    y = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]

    def bw(g):
        gflat = np.zeros_like(flat)
        np.put_along_axis(gflat, arg[..., None], g[..., None], axis=-1)
        gblocks = gflat.reshape(*lead, sp[0] // size, sp[1] // size, sp[2] // size, size, size, size)
        inv = tuple(range(n)) + (n, n + 3, n + 1, n + 4, n + 2, n + 5)
        return (gblocks.transpose(inv).reshape(x.shape),)

    return _result(y, (x,), bw, "max_pool3d")


def nearest_upsample3d(x: Tensor, factor: int = 2) -> Tensor:
    """Repeat each voxel ``factor`` times along each of the last three axes."""
    if x.ndim < 3 or factor < 1:
        raise ShapeError(f"nearest_upsample3d: bad input {x.shape} / factor {factor}")
    y = x.data
    for ax in (-3, -2, -1):
        y = np.repeat(y, factor, axis=ax)
    lead = x.shape[:-3]
    h, w, d = x.shape[-3:]

    def bw(g):
        g = g.reshape(*lead, h, factor, w, factor, d, factor)
        n = len(lead)
        return (g.sum(axis=(n + 1, n + 3, n + 5)),)

    return _result(y, (x,), bw, "nearest_upsample3d")


# ---------------------------------------------------------------------------
# Reverse pass
# ---------------------------------------------------------------------------

class GradTape:
    """The recorded ops reachable from one root, in registration order."""

    def __init__(self, nodes: list[Tensor]):
        self.nodes = nodes

    @classmethod
    def record(cls, root: Tensor) -> "GradTape":
        seen: set[int] = set()
        nodes: list[Tensor] = []
        stack = [root]
        while stack:
            t = stack.pop()
            if id(t) in seen or t._backward is None:
                continue
            seen.add(id(t))
            nodes.append(t)
            stack.extend(t._parents)
        nodes.sort(key=lambda t: t._seq)
        return cls(nodes)

    def replay(self, root: Tensor, seed: np.ndarray) -> None:
        grads: dict[int, np.ndarray] = {id(root): seed}
        leaves: dict[int, Tensor] = {}
        for node in reversed(self.nodes):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            node.grad = g
            for parent, pg in zip(node._parents, node._backward(g)):
                if not parent.requires_grad or pg is None:
                    continue
                pg = np.asarray(pg, dtype=np.float64).reshape(parent.shape)
                key = id(parent)
                grads[key] = grads[key] + pg if key in grads else pg
                if parent._backward is None:
                    leaves[key] = parent
        for key, leaf in leaves.items():
            g = grads[key]
            leaf.grad = g.copy() if leaf.grad is None else leaf.grad + g
        for node in self.nodes:
            node._backward = None
            node._parents = ()


def backward(root: Tensor) -> None:
    """Populate ``.grad`` on everything ``root`` depends on; consumes the graph."""
    if root.size != 1:
        raise ShapeError(f"backward: root must be scalar, got shape {root.shape}")
    if not root.requires_grad:
        return
    if root._backward is None:
        root.grad = np.ones_like(root.data) if root.grad is None else root.grad + 1.0
        return
    GradTape.record(root).replay(root, np.ones_like(root.data))


# ---------------------------------------------------------------------------
# Optimiser
# ---------------------------------------------------------------------------

@dataclass
class AdamState:
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(params: dict[str, Tensor], grads: dict[str, np.ndarray], state: AdamState,
              lr: float = 1e-3, betas: tuple[float, float] = (0.9, 0.999),
              eps: float = 1e-8) -> AdamState:
    """One bias-corrected Adam update, applied to ``params`` in place.

    Parameters missing from ``grads`` are treated as having zero gradient.
    """
    b1, b2 = betas
    state.step += 1
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p.data)
        elif g.shape != p.shape:
            raise ShapeError(f"adam_step: grad {g.shape} vs param {name} {p.shape}")
        m = state.m.get(name)
        v = state.v.get(name)
        if m is None:
            m = np.zeros_like(p.data)
            v = np.zeros_like(p.data)
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * (g * g)
        state.m[name] = m
        state.v[name] = v
        p.data = p.data - lr * (m / c1) / (np.sqrt(v / c2) + eps)
    return state


def parameters_grads(params: dict[str, Tensor]) -> dict[str, np.ndarray]:
    return {k: p.grad for k, p in params.items() if p.grad is not None}


def zero_grads(params: Iterable[Tensor]) -> None:
    for p in params:
        p.grad = None
