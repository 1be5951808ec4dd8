"""Dense tensors with reverse-mode automatic differentiation.

Numpy holds the flat data; this module owns the graph. Every operation
records its parents and a backward closure on the output tensor, and
`Tensor.backward` replays the closures in reverse topological order,
accumulating gradients additively where a tensor feeds several
consumers. Tensors produced by ops are treated as immutable; only the
optimizer writes into parameter `.data` between steps.

Precision is 64-bit by default, 32-bit selectable per run ("f32").
Elementwise broadcasting is deliberately limited to python-number
scalars; all tensor-tensor elementwise ops require exactly equal shapes
so every backward rule is unambiguous. The only shape-polymorphic op is
`linear`, which applies a 2-D weight to any stack of row vectors and
sums the weight gradient over the leading axes.

Every op output is checked finite; a NaN/Inf raises NumericError at the
op that produced it.
"""

from __future__ import annotations

import functools
import math
from contextlib import contextmanager
from typing import Callable, Iterable, Optional, Sequence

import numpy as np

from .errors import ConfigError, DimensionError, LabelError, NumericError

DTYPES = {"f64": np.float64, "f32": np.float32}

_GELU_C0 = math.sqrt(2.0 / math.pi)
_GELU_C1 = 0.044715

_TRACE: Optional[list] = None


def resolve_dtype(precision) -> np.dtype:
    """Map "f64"/"f32" (or a numpy float dtype) to the numpy dtype."""
    if isinstance(precision, str):
        try:
            return np.dtype(DTYPES[precision])
        except KeyError:
            raise ConfigError(f"unknown precision {precision!r}; expected one of {sorted(DTYPES)}")
    dt = np.dtype(precision)
    if dt not in (np.dtype(np.float64), np.dtype(np.float32)):
        raise ConfigError(f"unsupported dtype {dt}")
    return dt


@contextmanager
def op_trace():
    """Record the (name, shape) sequence of ops executed in this block."""
    global _TRACE
    prev, _TRACE = _TRACE, []
    try:
        yield _TRACE
    finally:
        _TRACE = prev


def _check_finite(data: np.ndarray, op: str) -> None:
    if not np.isfinite(data).all():
        raise NumericError(f"non-finite values produced by {op}")


def _quiet(fn):
    """Silence numpy overflow/invalid warnings inside an op; the post-op
    finiteness check is the real contract and raises NumericError."""

    @functools.wraps(fn)
    def wrapper(*args, **kwargs):
        with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
            return fn(*args, **kwargs)

    return wrapper


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_backward_fn")

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        if dtype is not None:
            arr = np.asarray(data, dtype=resolve_dtype(dtype))
        else:
            arr = np.asarray(data)
            if arr.dtype not in (np.float64, np.float32):
                arr = arr.astype(np.float64)
        _check_finite(arr, "tensor construction")
        self.data = arr
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = bool(requires_grad)
        self.name = name
        self._parents: tuple = ()
        self._backward_fn: Optional[Callable[[np.ndarray], None]] = None

    # -- introspection ----------------------------------------------------

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}{tag}, requires_grad={self.requires_grad})"

    def item(self) -> float:
        if self.data.size != 1:
            raise DimensionError(f"item() needs a scalar, got shape {self.shape}")
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    # -- graph ------------------------------------------------------------

    def backward(self) -> None:
        """Reverse-mode sweep from a scalar; visits each node exactly once."""
        if self.data.size != 1:
            raise DimensionError(f"backward() needs a scalar output, got shape {self.shape}")
        if not self.requires_grad:
            return
        order = _topo_order(self)
        self.grad = np.ones_like(self.data)
        with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
            for node in reversed(order):
                if node._backward_fn is not None and node.grad is not None:
                    node._backward_fn(node.grad)

    # -- operator sugar ---------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return self.scale(-1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def scale(self, gamma: float) -> "Tensor":
        return scale(gamma, self)

    @property
    def T(self) -> "Tensor":
        if self.data.ndim != 2:
            raise DimensionError(".T is defined for 2-D tensors only")
        return transpose(self, (1, 0))

    def reshape(self, shape) -> "Tensor":
        return reshape(self, shape)

    def sum(self) -> "Tensor":
        return tsum(self)

    def mean(self) -> "Tensor":
        return tmean(self)


def _topo_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen:
                stack.append((p, False))
    return order


def iter_graph(root: Tensor) -> Iterable[Tensor]:
    return iter(_topo_order(root))


def _accum(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.array(g, dtype=t.data.dtype, copy=True)
    else:
        t.grad += g


def _from_op(name: str, data: np.ndarray, parents: tuple, backward: Callable) -> Tensor:
    _check_finite(data, name)
    if _TRACE is not None:
        _TRACE.append((name, data.shape))
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.name = None
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward_fn = backward
    else:
        # requires_grad=False: keep no graph references and never a grad buffer
        out.requires_grad = False
        out._parents = ()
        out._backward_fn = None
    return out


def _as_scalar(x, dtype) -> float | None:
    """Python numbers act as the one permitted elementwise broadcast."""
    if isinstance(x, (int, float)):
        return dtype.type(x)
    return None


def _check_same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise DimensionError(f"{op}: shapes {a.shape} and {b.shape} must match exactly")
    if a.data.dtype != b.data.dtype:
        raise ConfigError(f"{op}: mixed dtypes {a.data.dtype} and {b.data.dtype}")


# -- elementwise ----------------------------------------------------------


@_quiet
def add(a: Tensor, b) -> Tensor:
    s = _as_scalar(b, a.data.dtype)
    if s is not None:
        def bw(g, a=a):
            _accum(a, g)
        return _from_op("add", a.data + s, (a,), bw)
    _check_same_shape(a, b, "add")

    def bw(g, a=a, b=b):
        _accum(a, g)
        _accum(b, g)

    return _from_op("add", a.data + b.data, (a, b), bw)


@_quiet
def sub(a: Tensor, b) -> Tensor:
    s = _as_scalar(b, a.data.dtype)
    if s is not None:
        def bw(g, a=a):
            _accum(a, g)
        return _from_op("sub", a.data - s, (a,), bw)
    _check_same_shape(a, b, "sub")

    def bw(g, a=a, b=b):
        _accum(a, g)
        _accum(b, -g)

    return _from_op("sub", a.data - b.data, (a, b), bw)


@_quiet
def mul(a: Tensor, b) -> Tensor:
    s = _as_scalar(b, a.data.dtype)
    if s is not None:
        return scale(float(s), a)
    _check_same_shape(a, b, "mul")

    def bw(g, a=a, b=b):
        _accum(a, g * b.data)
        _accum(b, g * a.data)

    return _from_op("mul", a.data * b.data, (a, b), bw)


@_quiet
def scale(gamma: float, x: Tensor) -> Tensor:
    g0 = x.data.dtype.type(gamma)

    def bw(g, x=x, g0=g0):
        _accum(x, g * g0)

    return _from_op("scale", x.data * g0, (x,), bw)


@_quiet
def gelu(x: Tensor) -> Tensor:
    """GELU, tanh approximation: 0.5*x*(1 + tanh(sqrt(2/pi)*(x + 0.044715*x^3)))."""
    dt = x.data.dtype
    c0, c1 = dt.type(_GELU_C0), dt.type(_GELU_C1)
    u = c0 * (x.data + c1 * x.data**3)
    t = np.tanh(u)
    out = dt.type(0.5) * x.data * (1.0 + t)

    def bw(g, x=x, t=t, c0=c0, c1=c1):
        du = c0 * (1.0 + 3.0 * c1 * x.data**2)
        d = 0.5 * (1.0 + t) + 0.5 * x.data * (1.0 - t * t) * du
        _accum(x, g * d)

    return _from_op("gelu", out, (x,), bw)


# -- matrix products ------------------------------------------------------


@_quiet
def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product on the last two axes.

    Either both operands are 2-D, or they carry identical leading
    (batch) axes; no batch broadcasting, so backward is the plain
    dA = dC @ B^T, dB = A^T @ dC per slice.
    """
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise DimensionError("matmul operands must be at least 2-D")
    if a.data.shape[-1] != b.data.shape[-2]:
        raise DimensionError(f"matmul: inner dimensions disagree {a.shape} x {b.shape}")
    if a.data.shape[:-2] != b.data.shape[:-2]:
        raise DimensionError(f"matmul: leading axes {a.shape[:-2]} and {b.shape[:-2]} must match")
    if a.data.dtype != b.data.dtype:
        raise ConfigError(f"matmul: mixed dtypes {a.data.dtype} and {b.data.dtype}")
    out = a.data @ b.data

    def bw(g, a=a, b=b):
        _accum(a, g @ np.swapaxes(b.data, -1, -2))
        _accum(b, np.swapaxes(a.data, -1, -2) @ g)

    return _from_op("matmul", out, (a, b), bw)


@_quiet
def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """y = x @ W^T (+ bias); x is (..., n), W is (m, n), bias (m,).

    The weight gradient sums over all leading axes of x; this is the one
    op that applies a 2-D parameter to a whole batch.
    """
    if w.data.ndim != 2:
        raise DimensionError(f"linear: weight must be 2-D, got {w.shape}")
    if x.data.ndim < 1 or x.data.shape[-1] != w.data.shape[1]:
        raise DimensionError(f"linear: input width {x.shape} does not match weight {w.shape}")
    if x.data.dtype != w.data.dtype:
        raise ConfigError(f"linear: mixed dtypes {x.data.dtype} and {w.data.dtype}")
    out = x.data @ w.data.T
    if b is not None:
        if b.data.shape != (w.data.shape[0],):
            raise DimensionError(f"linear: bias shape {b.shape} does not match weight {w.shape}")
        out = out + b.data

    def bw(g, x=x, w=w, b=b):
        _accum(x, g @ w.data)
        g2 = g.reshape(-1, g.shape[-1])
        x2 = x.data.reshape(-1, x.data.shape[-1])
        _accum(w, g2.T @ x2)
        if b is not None:
            _accum(b, g2.sum(axis=0))

    parents = (x, w) if b is None else (x, w, b)
    return _from_op("linear", out, parents, bw)


# -- shape ops ------------------------------------------------------------


@_quiet
def reshape(x: Tensor, shape) -> Tensor:
    shape = tuple(shape)

    def bw(g, x=x):
        _accum(x, g.reshape(x.data.shape))

    return _from_op("reshape", x.data.reshape(shape), (x,), bw)


@_quiet
def transpose(x: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))

    def bw(g, x=x, inv=inv):
        _accum(x, g.transpose(inv))

    return _from_op("transpose", np.ascontiguousarray(x.data.transpose(axes)), (x,), bw)


@_quiet
def select(x: Tensor, axis: int, index: int) -> Tensor:
    """Pick one slice along `axis`, dropping the axis (e.g. class-token readout)."""
    out = np.take(x.data, index, axis=axis)

    def bw(g, x=x, axis=axis, index=index):
        full = np.zeros_like(x.data)
        sl = [slice(None)] * x.data.ndim
        sl[axis] = index
        full[tuple(sl)] = g
        _accum(x, full)

    return _from_op("select", np.ascontiguousarray(out), (x,), bw)


@_quiet
def concat(parts: Sequence[Tensor], axis: int) -> Tensor:
    if not parts:
        raise DimensionError("concat of zero tensors")
    out = np.concatenate([p.data for p in parts], axis=axis)
    sizes = [p.data.shape[axis] for p in parts]

    def bw(g, parts=tuple(parts), sizes=tuple(sizes), axis=axis):
        off = 0
        for p, s in zip(parts, sizes):
            sl = [slice(None)] * g.ndim
            sl[axis] = slice(off, off + s)
            _accum(p, g[tuple(sl)])
            off += s

    return _from_op("concat", out, tuple(parts), bw)


@_quiet
def repeat0(x: Tensor, n: int) -> Tensor:
    """Tile x along a new leading axis; backward sums the axis away."""
    out = np.ascontiguousarray(np.broadcast_to(x.data[None], (n,) + x.data.shape))

    def bw(g, x=x):
        _accum(x, g.sum(axis=0))

    return _from_op("repeat0", out, (x,), bw)


# -- reductions and normalization ------------------------------------------


@_quiet
def tsum(x: Tensor) -> Tensor:
    def bw(g, x=x):
        _accum(x, np.full_like(x.data, g))

    return _from_op("sum", np.asarray(x.data.sum(), dtype=x.data.dtype), (x,), bw)


@_quiet
def tmean(x: Tensor) -> Tensor:
    n = x.data.size

    def bw(g, x=x, n=n):
        _accum(x, np.full_like(x.data, g / n))

    return _from_op("mean", np.asarray(x.data.mean(), dtype=x.data.dtype), (x,), bw)


@_quiet
def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Zero mean / unit variance over the last axis, then affine gain+bias."""
    if eps <= 0:
        raise ConfigError("layer_norm: eps must be > 0")
    d = x.data.shape[-1] if x.data.ndim else 0
    if d == 0:
        raise DimensionError("layer_norm: empty normalized axis")
    if gain.data.shape != (d,) or bias.data.shape != (d,):
        raise DimensionError(f"layer_norm: gain/bias must have shape ({d},)")
    mu = x.data.mean(axis=-1, keepdims=True)
    var = x.data.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + x.data.dtype.type(eps))
    xhat = (x.data - mu) * inv
    out = gain.data * xhat + bias.data

    def bw(g, x=x, gain=gain, bias=bias, xhat=xhat, inv=inv, d=d):
        if gain.requires_grad:
            _accum(gain, (g * xhat).reshape(-1, d).sum(axis=0))
        if bias.requires_grad:
            _accum(bias, g.reshape(-1, d).sum(axis=0))
        dxhat = g * gain.data
        m1 = dxhat.mean(axis=-1, keepdims=True)
        m2 = (dxhat * xhat).mean(axis=-1, keepdims=True)
        _accum(x, inv * (dxhat - m1 - xhat * m2))

    return _from_op("layer_norm", out, (x, gain, bias), bw)


@_quiet
def softmax(x: Tensor) -> Tensor:
    """Softmax over the last axis (attention weights)."""
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=-1, keepdims=True)

    def bw(g, x=x, y=y):
        _accum(x, (g - (g * y).sum(axis=-1, keepdims=True)) * y)

    return _from_op("softmax", y, (x,), bw)


@_quiet
def softmax_cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean over the batch of -log softmax(logits)[label].

    Backward is (softmax - onehot) / B. Labels are integer class indices
    in [0, c); anything outside raises LabelError.
    """
    if logits.data.ndim != 2:
        raise DimensionError(f"cross entropy needs (batch, classes) logits, got {logits.shape}")
    lab = np.asarray(labels)
    if lab.ndim != 1 or lab.shape[0] != logits.data.shape[0]:
        raise DimensionError(f"labels shape {lab.shape} does not match logits {logits.shape}")
    if not np.issubdtype(lab.dtype, np.integer):
        raise LabelError("labels must be integers")
    nb, nc = logits.data.shape
    if lab.min() < 0 or lab.max() >= nc:
        raise LabelError(f"label out of range [0, {nc})")
    zmax = logits.data.max(axis=-1, keepdims=True)
    z = logits.data - zmax
    lse = np.log(np.exp(z).sum(axis=-1)) + zmax[:, 0]
    picked = logits.data[np.arange(nb), lab]
    loss = np.asarray((lse - picked).sum() / nb, dtype=logits.data.dtype)

    def bw(g, logits=logits, lab=lab, nb=nb):
        zz = logits.data - logits.data.max(axis=-1, keepdims=True)
        ee = np.exp(zz)
        sm = ee / ee.sum(axis=-1, keepdims=True)
        sm[np.arange(nb), lab] -= 1.0
        _accum(logits, sm * (g / nb))

    return _from_op("softmax_cross_entropy", loss, (logits,), bw)


# -- gradient checking ------------------------------------------------------


def grad_check(
    f: Callable[[], Tensor],
    params: Sequence[Tensor],
    eps: float = 1e-5,
    mode: str = "central",
    max_coords_per_param: int | None = None,
    rng=None,
    denom_floor: float = 1e-4,
) -> float:
    """Max relative error between autodiff and finite-difference gradients.

    `f` rebuilds and returns the scalar loss from the current parameter
    values. Run in 64-bit mode; 32-bit rounding would swamp the
    comparison. For large parameters, `max_coords_per_param` samples
    coordinates with `rng` instead of probing all of them.
    """
    if mode not in ("central", "forward"):
        raise ConfigError(f"unknown finite-difference mode {mode!r}")
    params = list(params)
    for p in params:
        if p.data.dtype != np.float64:
            raise ConfigError("grad_check requires 64-bit parameters")
        p.grad = None
    loss = f()
    if loss.data.size != 1:
        raise DimensionError("grad_check: f must be scalar-valued")
    loss.backward()
    analytic = [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params]
    f0 = loss.item() if mode == "forward" else None

    worst = 0.0
    for p, ag in zip(params, analytic):
        flat = p.data.reshape(-1)
        aflat = ag.reshape(-1)
        if max_coords_per_param is not None and flat.size > max_coords_per_param:
            if rng is None:
                raise ConfigError("sampled grad_check needs an rng")
            coords = rng.sample_without_replacement(flat.size, max_coords_per_param)
        else:
            coords = range(flat.size)
        for i in coords:
            orig = flat[i]
            flat[i] = orig + eps
            f_plus = f().item()
            if mode == "central":
                flat[i] = orig - eps
                f_minus = f().item()
                fd = (f_plus - f_minus) / (2.0 * eps)
            else:
                fd = (f_plus - f0) / eps
            flat[i] = orig
            ad = float(aflat[i])
            rel = abs(ad - fd) / max(abs(ad), abs(fd), denom_floor)
            if rel > worst:
                worst = rel
    return worst
