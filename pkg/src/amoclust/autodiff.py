"""Minimal reverse-mode autodiff on numpy arrays.

The op set is closed on purpose: exactly the tensor operations the clustering
model and its losses need, nothing more, so the whole substrate stays small
enough to audit. Every operation that runs while gradients are enabled records
its parent tensors and a backward closure on the output tensor; tensors carry
a monotonically increasing creation id, so creation order is already a valid
topological order of the computation graph (an op can only consume tensors
that exist). `backward` walks the reachable subgraph in reverse creation
order.

Numerics: 64-bit is the default and what all gradient checks run in; 32-bit
works end to end for training. softmax subtracts the row max, `log` floors its
argument at LOG_EPS.
"""

from __future__ import annotations

import contextlib
from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np
from scipy.special import erf as _erf
from scipy.special import expit as _sigmoid

LOG_EPS = 1e-12     # floor inside log(); keeps near-zero probabilities finite
LN_EPS = 1e-5       # layer-norm variance epsilon
L2_EPS = 1e-12      # floor for L2-normalize denominators

_INV_SQRT2 = 1.0 / np.sqrt(2.0)
_INV_SQRT2PI = 1.0 / np.sqrt(2.0 * np.pi)


class ShapeError(ValueError):
    """Operands do not conform to an op's shape rule."""


_grad_enabled = True
_tensor_count = 0


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (values only, no backward)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    """A numpy array plus optional gradient bookkeeping.

    Leaves created with requires_grad=True collect gradients in `.grad` after
    a `backward` call on some scalar descendant. Tensors produced by ops own a
    backward closure; their `.grad` is transient scratch during backward and
    released afterwards.
    """

    __slots__ = ("data", "requires_grad", "grad", "_nid", "_parents", "_bw",
                 "_op", "_grad_owned", "_backward_done")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float64)
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        global _tensor_count
        _tensor_count += 1
        self._nid = _tensor_count
        self._parents: tuple = ()
        self._bw: Optional[Callable] = None
        self._op = "leaf"
        self._grad_owned = False
        self._backward_done = False

    # -- basic introspection -------------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError(f"item() on tensor of shape {self.data.shape}")
        return float(self.data.reshape(()))

    def __repr__(self):
        flag = ", grad" if self.requires_grad else ""
        return f"Tensor({self._op}, shape={self.data.shape}{flag})"

    # -- graph control ---------------------------------------------------------

    def detach(self) -> "Tensor":
        """Value-identical tensor through which backward never propagates."""
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None
        self._grad_owned = False

    def backward(self):
        """Accumulate d(self)/d(leaf) into every requires_grad leaf."""
        if self.data.size != 1:
            raise ValueError(f"backward root must be scalar, got shape {self.data.shape}")
        if self._bw is None:
            raise ValueError("backward on a detached or constant tensor (no graph)")
        if self._backward_done:
            raise RuntimeError("backward already ran from this root; rebuild the graph first")
        self._backward_done = True

        order = _reachable(self)
        self.grad = np.ones_like(self.data)
        self._grad_owned = True
        for node in order:          # descending creation id = reverse topological
            bw = node._bw
            if bw is None:
                continue
            g = node.grad
            if g is None:           # no consumer contributed (dead branch)
                continue
            bw(g)
            if node is not self:    # free intermediate buffers early
                node.grad = None
                node._grad_owned = False


def _reachable(root: Tensor):
    """All graph ancestors of root, sorted by descending creation id."""
    seen = {id(root): root}
    stack = [root]
    while stack:
        for p in stack.pop()._parents:
            if id(p) not in seen:
                seen[id(p)] = p
                if p._bw is not None:
                    stack.append(p)
    return sorted(seen.values(), key=lambda t: -t._nid)


def _acc(t: Tensor, g: np.ndarray):
    """Accumulate a gradient contribution into t.grad.

    First contribution is stored by reference (may alias a child's buffer or a
    view); later ones reallocate, after which in-place accumulation is safe.
    """
    if t.grad is None:
        t.grad = g
        t._grad_owned = False
    elif t._grad_owned:
        t.grad += g
    else:
        t.grad = t.grad + g
        t._grad_owned = True


def _as_tensor(x, like: Optional[Tensor] = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.data.dtype if like is not None else np.float64
    return Tensor(np.asarray(x, dtype=dtype))


def _recording(*tensors: Tensor) -> bool:
    return _grad_enabled and any(t.requires_grad for t in tensors)


def _node(data, parents, bw, op: str) -> Tensor:
    out = Tensor(data)
    out.requires_grad = True
    out._parents = parents
    out._bw = bw
    out._op = op
    return out


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    """Reduce a broadcast gradient back to `shape`."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _check_broadcast(op: str, a: Tensor, b: Tensor):
    try:
        np.broadcast_shapes(a.data.shape, b.data.shape)
    except ValueError:
        raise ShapeError(f"{op}: shapes {a.data.shape} and {b.data.shape} do not broadcast") from None


# ---------------------------------------------------------------------------
# elementwise arithmetic
# ---------------------------------------------------------------------------

def add(a, b) -> Tensor:
    a = _as_tensor(a, like=b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, like=a)
    _check_broadcast("add", a, b)
    out = a.data + b.data
    if not _recording(a, b):
        return Tensor(out)

    def bw(g):
        if a.requires_grad:
            _acc(a, _unbroadcast(g, a.data.shape))
        if b.requires_grad:
            _acc(b, _unbroadcast(g, b.data.shape))

    return _node(out, (a, b), bw, "add")


def sub(a, b) -> Tensor:
    a = _as_tensor(a, like=b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, like=a)
    _check_broadcast("sub", a, b)
    out = a.data - b.data
    if not _recording(a, b):
        return Tensor(out)

    def bw(g):
        if a.requires_grad:
            _acc(a, _unbroadcast(g, a.data.shape))
        if b.requires_grad:
            _acc(b, _unbroadcast(-g, b.data.shape))

    return _node(out, (a, b), bw, "sub")


def mul(a, b) -> Tensor:
    a = _as_tensor(a, like=b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, like=a)
    _check_broadcast("mul", a, b)
    out = a.data * b.data
    if not _recording(a, b):
        return Tensor(out)

    def bw(g):
        if a.requires_grad:
            _acc(a, _unbroadcast(g * b.data, a.data.shape))
        if b.requires_grad:
            _acc(b, _unbroadcast(g * a.data, b.data.shape))

    return _node(out, (a, b), bw, "mul")


def div(a, b) -> Tensor:
    a = _as_tensor(a, like=b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, like=a)
    _check_broadcast("div", a, b)
    out = a.data / b.data
    if not _recording(a, b):
        return Tensor(out)

    def bw(g):
        if a.requires_grad:
            _acc(a, _unbroadcast(g / b.data, a.data.shape))
        if b.requires_grad:
            _acc(b, _unbroadcast(-g * out / b.data, b.data.shape))

    return _node(out, (a, b), bw, "div")


def neg(a) -> Tensor:
    a = _as_tensor(a)
    if not _recording(a):
        return Tensor(-a.data)

    def bw(g):
        _acc(a, -g)

    return _node(-a.data, (a,), bw, "neg")


def scale(a, s: float) -> Tensor:
    """Multiply by a python scalar (non-learnable)."""
    a = _as_tensor(a)
    s = float(s)
    out = a.data * s
    if not _recording(a):
        return Tensor(out)

    def bw(g):
        _acc(a, g * s)

    return _node(out, (a,), bw, "scale")


# ---------------------------------------------------------------------------
# linear algebra / structure
# ---------------------------------------------------------------------------

def matmul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise ShapeError(f"matmul: operands must be at least 2-D, got {a.data.shape} @ {b.data.shape}")
    if a.data.shape[-1] != b.data.shape[-2]:
        raise ShapeError(f"matmul: inner dimensions differ, {a.data.shape} @ {b.data.shape}")
    out = a.data @ b.data
    if not _recording(a, b):
        return Tensor(out)

    def bw(g):
        if a.requires_grad:
            ga = g @ np.swapaxes(b.data, -1, -2)
            _acc(a, _unbroadcast(ga, a.data.shape))
        if b.requires_grad:
            gb = np.swapaxes(a.data, -1, -2) @ g
            _acc(b, _unbroadcast(gb, b.data.shape))

    return _node(out, (a, b), bw, "matmul")


def transpose(a) -> Tensor:
    """Swap the last two axes."""
    return swapaxes(a, -1, -2)


def swapaxes(a, ax1: int, ax2: int) -> Tensor:
    a = _as_tensor(a)
    out = np.swapaxes(a.data, ax1, ax2)
    if not _recording(a):
        return Tensor(out)

    def bw(g):
        _acc(a, np.swapaxes(g, ax1, ax2))

    return _node(out, (a,), bw, "swapaxes")


def reshape(a, shape) -> Tensor:
    a = _as_tensor(a)
    out = a.data.reshape(shape)
    if not _recording(a):
        return Tensor(out)

    def bw(g):
        _acc(a, g.reshape(a.data.shape))

    return _node(out, (a,), bw, "reshape")


def expand(a, shape) -> Tensor:
    """Broadcast to `shape` (gradient sums over the broadcast axes)."""
    a = _as_tensor(a)
    try:
        out = np.broadcast_to(a.data, shape)
    except ValueError:
        raise ShapeError(f"expand: cannot broadcast {a.data.shape} to {tuple(shape)}") from None
    if not _recording(a):
        return Tensor(out)

    def bw(g):
        _acc(a, _unbroadcast(g, a.data.shape))

    return _node(out, (a,), bw, "expand")


def concat(tensors: Sequence, axis: int = -1) -> Tensor:
    ts = [_as_tensor(t) for t in tensors]
    if not ts:
        raise ShapeError("concat: empty input list")
    out = np.concatenate([t.data for t in ts], axis=axis)
    if not _recording(*ts):
        return Tensor(out)

    sizes = [t.data.shape[axis] for t in ts]

    def bw(g):
        offset = 0
        for t, s in zip(ts, sizes):
            if t.requires_grad:
                idx = [slice(None)] * g.ndim
                idx[axis] = slice(offset, offset + s)
                _acc(t, g[tuple(idx)])
            offset += s

    return _node(out, tuple(ts), bw, "concat")


def narrow(a, axis: int, start: int, length: int) -> Tensor:
    """Slice `length` entries starting at `start` along `axis`."""
    a = _as_tensor(a)
    if not (0 <= start and start + length <= a.data.shape[axis]):
        raise ShapeError(f"narrow: [{start}:{start + length}] out of bounds for axis {axis} "
                         f"of shape {a.data.shape}")
    idx = [slice(None)] * a.data.ndim
    idx[axis] = slice(start, start + length)
    idx = tuple(idx)
    out = a.data[idx]
    if not _recording(a):
        return Tensor(out)

    def bw(g):
        full = np.zeros_like(a.data)
        full[idx] = g
        _acc(a, full)

    return _node(out, (a,), bw, "narrow")


def take_flat(a, indices) -> Tensor:
    """Gather entries of the flattened tensor at fixed integer indices."""
    a = _as_tensor(a)
    idx = np.asarray(indices, dtype=np.intp).reshape(-1)
    if idx.size and (idx.min() < 0 or idx.max() >= a.data.size):
        raise ShapeError(f"take_flat: index out of range for size {a.data.size}")
    out = a.data.reshape(-1)[idx]
    if not _recording(a):
        return Tensor(out)

    def bw(g):
        flat = np.zeros(a.data.size, dtype=a.data.dtype)
        np.add.at(flat, idx, g.reshape(-1))
        _acc(a, flat.reshape(a.data.shape))

    return _node(out, (a,), bw, "take_flat")


# ---------------------------------------------------------------------------
# reductions
# ---------------------------------------------------------------------------

def rsum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _as_tensor(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)
    if not _recording(a):
        return Tensor(out)

    def bw(g):
        if axis is None:
            _acc(a, np.broadcast_to(g, a.data.shape).astype(a.data.dtype, copy=True))
        else:
            gg = g if keepdims else np.expand_dims(g, axis)
            _acc(a, np.broadcast_to(gg, a.data.shape).astype(a.data.dtype, copy=True))

    return _node(out, (a,), bw, "sum")


def rmean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _as_tensor(a)
    out = a.data.mean(axis=axis, keepdims=keepdims)
    if not _recording(a):
        return Tensor(out)
    count = a.data.size if axis is None else a.data.shape[axis]

    def bw(g):
        if axis is None:
            gg = np.broadcast_to(g / count, a.data.shape)
        else:
            gg = g if keepdims else np.expand_dims(g, axis)
            gg = np.broadcast_to(gg / count, a.data.shape)
        _acc(a, gg.astype(a.data.dtype, copy=True))

    return _node(out, (a,), bw, "mean")


# ---------------------------------------------------------------------------
# nonlinearities and normalizers (all over the last axis)
# ---------------------------------------------------------------------------

def softmax(a) -> Tensor:
    a = _as_tensor(a)
    z = a.data - a.data.max(axis=-1, keepdims=True)
    np.exp(z, out=z)
    y = z / z.sum(axis=-1, keepdims=True)
    if not _recording(a):
        return Tensor(y)

    def bw(g):
        tmp = g * y
        _acc(a, tmp - y * tmp.sum(axis=-1, keepdims=True))

    return _node(y, (a,), bw, "softmax")


def layer_norm(a, eps: float = LN_EPS) -> Tensor:
    """Normalize the last axis to mean 0, variance 1 (no affine here)."""
    a = _as_tensor(a)
    mu = a.data.mean(axis=-1, keepdims=True)
    xc = a.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    y = xc * inv
    if not _recording(a):
        return Tensor(y)

    def bw(g):
        gm = g.mean(axis=-1, keepdims=True)
        gy = (g * y).mean(axis=-1, keepdims=True)
        _acc(a, inv * (g - gm - y * gy))

    return _node(y, (a,), bw, "layer_norm")


def l2_normalize(a, eps: float = L2_EPS) -> Tensor:
    a = _as_tensor(a)
    norm = np.sqrt((a.data * a.data).sum(axis=-1, keepdims=True))
    norm = np.maximum(norm, eps)
    y = a.data / norm
    if not _recording(a):
        return Tensor(y)

    def bw(g):
        gy = (g * y).sum(axis=-1, keepdims=True)
        _acc(a, (g - y * gy) / norm)

    return _node(y, (a,), bw, "l2_normalize")


def gelu(a) -> Tensor:
    """Exact (erf) GELU."""
    a = _as_tensor(a)
    phi = 0.5 * (1.0 + _erf(a.data * _INV_SQRT2))
    y = a.data * phi
    if not _recording(a):
        return Tensor(y)

    def bw(g):
        pdf = np.exp(-0.5 * a.data * a.data) * _INV_SQRT2PI
        _acc(a, g * (phi + a.data * pdf))

    return _node(y, (a,), bw, "gelu")


def softplus(a) -> Tensor:
    a = _as_tensor(a)
    y = np.logaddexp(np.zeros((), dtype=a.data.dtype), a.data)
    if not _recording(a):
        return Tensor(y)

    def bw(g):
        _acc(a, g * _sigmoid(a.data))

    return _node(y, (a,), bw, "softplus")


def exp(a) -> Tensor:
    a = _as_tensor(a)
    y = np.exp(a.data)
    if not _recording(a):
        return Tensor(y)

    def bw(g):
        _acc(a, g * y)

    return _node(y, (a,), bw, "exp")


def log(a, eps: float = LOG_EPS) -> Tensor:
    """Natural log with the argument floored at `eps`."""
    a = _as_tensor(a)
    floored = np.maximum(a.data, eps)
    y = np.log(floored)
    if not _recording(a):
        return Tensor(y)

    def bw(g):
        _acc(a, g / floored)

    return _node(y, (a,), bw, "log")


def masked_fill(a, mask, value: float) -> Tensor:
    """Replace entries where `mask` is true by `value`; gradient is 0 there."""
    a = _as_tensor(a)
    m = np.asarray(mask, dtype=bool)
    _check_broadcast("masked_fill", a, Tensor(np.zeros(m.shape, dtype=a.data.dtype)))
    out = np.where(m, np.asarray(value, dtype=a.data.dtype), a.data)
    if not _recording(a):
        return Tensor(out)

    def bw(g):
        _acc(a, _unbroadcast(np.where(m, 0.0, g), a.data.shape))

    return _node(out, (a,), bw, "masked_fill")


# ---------------------------------------------------------------------------
# operator sugar on Tensor
# ---------------------------------------------------------------------------

Tensor.__add__ = lambda self, other: add(self, other)
Tensor.__radd__ = lambda self, other: add(other, self)
Tensor.__sub__ = lambda self, other: sub(self, other)
Tensor.__rsub__ = lambda self, other: sub(other, self)
Tensor.__mul__ = lambda self, other: mul(self, other)
Tensor.__rmul__ = lambda self, other: mul(other, self)
Tensor.__truediv__ = lambda self, other: div(self, other)
Tensor.__rtruediv__ = lambda self, other: div(other, self)
Tensor.__matmul__ = lambda self, other: matmul(self, other)
Tensor.__neg__ = lambda self: neg(self)
Tensor.sum = lambda self, axis=None, keepdims=False: rsum(self, axis, keepdims)
Tensor.mean = lambda self, axis=None, keepdims=False: rmean(self, axis, keepdims)
Tensor.reshape = lambda self, shape: reshape(self, shape)
Tensor.swapaxes = lambda self, ax1, ax2: swapaxes(self, ax1, ax2)
Tensor.T2 = property(lambda self: transpose(self))


# ---------------------------------------------------------------------------
# generic dispatch + finite differences
# ---------------------------------------------------------------------------

OPS = {
    "add": add,
    "sub": sub,
    "mul": mul,
    "div": div,
    "neg": neg,
    "scale": scale,
    "matmul": matmul,
    "transpose": transpose,
    "swapaxes": swapaxes,
    "reshape": reshape,
    "expand": expand,
    "concat": concat,
    "narrow": narrow,
    "take_flat": take_flat,
    "sum": rsum,
    "mean": rmean,
    "softmax": softmax,
    "layer_norm": layer_norm,
    "l2_normalize": l2_normalize,
    "gelu": gelu,
    "softplus": softplus,
    "exp": exp,
    "log": log,
    "masked_fill": masked_fill,
}


def forward_op(kind: str, *inputs, **kwargs) -> Tensor:
    """Dispatch an op by registry name (the op set is closed)."""
    try:
        fn = OPS[kind]
    except KeyError:
        raise ValueError(f"unknown op kind '{kind}'") from None
    return fn(*inputs, **kwargs)


@dataclass
class FDReport:
    """Result of a finite-difference gradient comparison."""
    max_rel_err: float
    passed: bool
    worst_index: tuple
    n_entries: int

    def __str__(self):
        status = "pass" if self.passed else "FAIL"
        return (f"{status}: max_rel_err={self.max_rel_err:.3e} over {self.n_entries} entries"
                f" (worst at {self.worst_index})")


def finite_difference_check(f: Callable[[Tensor], Tensor], x, step: float = 1e-5,
                            tol: float = 1e-4) -> FDReport:
    """Compare analytic gradients of scalar-valued f against central differences.

    Relative error per entry is |analytic - numeric| / max(|analytic|, |numeric|, 1e-8).
    `f` must be deterministic; raises if it returns a non-finite value at any
    probe point.
    """
    if step <= 0:
        raise ValueError("step must be positive")
    base = np.asarray(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
    leaf = Tensor(base.copy(), requires_grad=True)
    out = f(leaf)
    if out.data.size != 1:
        raise ValueError("finite_difference_check needs a scalar-valued function")
    out.backward()
    analytic = leaf.grad
    if analytic is None:
        analytic = np.zeros_like(base)
    analytic = np.asarray(analytic, dtype=np.float64).reshape(base.shape)

    max_rel = 0.0
    worst = ()
    flat = base.reshape(-1)
    for i in range(flat.size):
        probe = flat.copy()
        probe[i] += step
        with no_grad():
            hi = float(f(Tensor(probe.reshape(base.shape))).data.reshape(()))
        probe[i] -= 2.0 * step
        with no_grad():
            lo = float(f(Tensor(probe.reshape(base.shape))).data.reshape(()))
        if not (np.isfinite(hi) and np.isfinite(lo)):
            raise ValueError(f"f non-finite at probe entry {i}")
        numeric = (hi - lo) / (2.0 * step)
        a = analytic.reshape(-1)[i]
        rel = abs(a - numeric) / max(abs(a), abs(numeric), 1e-8)
        if rel > max_rel:
            max_rel = rel
            worst = np.unravel_index(i, base.shape)
    return FDReport(max_rel_err=max_rel, passed=max_rel <= tol,
                    worst_index=tuple(int(v) for v in worst), n_entries=flat.size)
