"""Dense arrays with define-by-run reverse-mode differentiation.

Every value is a plain ``numpy.ndarray``. A :class:`Tensor` wraps one and
remembers how it was produced, so :func:`backward` can replay the tape in
reverse. The op set is small on purpose: elementwise arithmetic and
activations, matmul, reductions, indexing, and a handful of fused kernels
(layer norm, masked attention, pairwise rotation) that the attention layers
are built from.

Two switches change how forward values are computed:

* :func:`precision` selects float32 (default) or float64 storage.
* :func:`exact_mode` swaps in row-stable kernels: every output row is
  produced by the same sequence of floating point operations no matter how
  many other rows are in the batch. Incremental decoders use the same
  kernels, which is what makes their outputs bit-identical to a full
  re-forward.
"""

from __future__ import annotations

import contextlib
import contextvars
import tracemalloc
from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.special import expit

NEG_INF = -1e9

_dtype = contextvars.ContextVar("dtype", default=np.dtype(np.float32))
_exact = contextvars.ContextVar("exact", default=False)
_grad_enabled = contextvars.ContextVar("grad_enabled", default=True)


class NonFiniteError(FloatingPointError):
    """An op produced NaN or Inf."""


class ShapeError(ValueError):
    pass


class BackwardError(RuntimeError):
    pass


class NonDeterministicError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# global modes


def default_dtype() -> np.dtype:
    return _dtype.get()


@contextlib.contextmanager
def precision(dtype):
    """Temporarily change the storage dtype for new tensors."""
    token = _dtype.set(np.dtype(dtype))
    try:
        yield
    finally:
        _dtype.reset(token)


def set_default_dtype(dtype) -> None:
    _dtype.set(np.dtype(dtype))


def is_exact() -> bool:
    return _exact.get()


@contextlib.contextmanager
def exact_mode(enabled: bool = True):
    """Use row-stable kernels for the duration of the block."""
    token = _exact.set(enabled)
    try:
        yield
    finally:
        _exact.reset(token)


@contextlib.contextmanager
def no_grad():
    token = _grad_enabled.set(False)
    try:
        yield
    finally:
        _grad_enabled.reset(token)


def grad_enabled() -> bool:
    return _grad_enabled.get()


@dataclass
class MemoryReading:
    peak: int = 0
    current: int = 0


@contextlib.contextmanager
def peak_memory():
    """Measure the peak of traced allocations (numpy buffers included)."""
    reading = MemoryReading()
    started = not tracemalloc.is_tracing()
    if started:
        tracemalloc.start()
    base, _ = tracemalloc.get_traced_memory()
    tracemalloc.reset_peak()
    try:
        yield reading
    finally:
        current, peak = tracemalloc.get_traced_memory()
        reading.peak = max(0, peak - base)
        reading.current = max(0, current - base)
        if started:
            tracemalloc.stop()


# ---------------------------------------------------------------------------
# tensor and tape


class Tensor:
    __slots__ = ("value", "grad", "requires_grad", "op", "_parents", "_backward", "_consumed")

    def __init__(self, value, requires_grad: bool = False, op: str = "leaf"):
        self.value = value
        self.grad = None
        self.requires_grad = requires_grad
        self.op = op
        self._parents: tuple = ()
        self._backward = None
        self._consumed = False

    @property
    def shape(self) -> tuple:
        return self.value.shape

    @property
    def ndim(self) -> int:
        return self.value.ndim

    @property
    def size(self) -> int:
        return self.value.size

    @property
    def dtype(self):
        return self.value.dtype

    def numpy(self) -> np.ndarray:
        return self.value

    def item(self) -> float:
        return float(self.value.reshape(-1)[0])

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        backward(self)

    def __repr__(self):
        return f"Tensor(op={self.op}, shape={self.shape}, dtype={self.dtype})"

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

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)


def tensor(value, requires_grad: bool = False) -> Tensor:
    """Wrap ``value`` as a tensor of the current default dtype."""
    arr = np.array(value, dtype=default_dtype())
    return Tensor(arr, requires_grad=requires_grad)


def parameter(value) -> Tensor:
    return tensor(value, requires_grad=True)


def as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=default_dtype()))


def make_op(value: np.ndarray, parents: Sequence[Tensor], backward_fn: Callable, op: str) -> Tensor:
    """Record a new node on the tape.

    ``backward_fn`` maps the output adjoint to a tuple of adjoints, one per
    parent (``None`` for parents that do not need one).
    """
    if not np.all(np.isfinite(value)):
        raise NonFiniteError(f"non-finite value produced by op '{op}'")
    needs = grad_enabled() and any(p.requires_grad for p in parents)
    out = Tensor(value, requires_grad=needs, op=op)
    if needs:
        out._parents = tuple(parents)
        out._backward = backward_fn
    return out


def _toposort(root: Tensor) -> list:
    order, seen = [], set()
    stack = [(root, False)]
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
            if id(p) not in seen and p.requires_grad:
                stack.append((p, False))
    return order


def backward(root: Tensor) -> None:
    """Populate ``.grad`` on every leaf reachable from the scalar ``root``.

    The tape is released afterwards; running backward twice over the same
    graph raises :class:`BackwardError`.
    """
    if root.size != 1:
        raise BackwardError(f"backward needs a scalar root, got shape {root.shape}")
    if root._consumed:
        raise BackwardError("backward already ran on this graph; rebuild it first")
    if not root.requires_grad:
        root._consumed = True
        return
    order = _toposort(root)
    grads = {id(root): np.ones_like(root.value)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            if node.op == "leaf":
                node.grad = g if node.grad is None else node.grad + g
            continue
        parent_grads = node._backward(g)
        for p, pg in zip(node._parents, parent_grads):
            if pg is None or not p.requires_grad:
                continue
            if pg.shape != p.shape:
                raise ShapeError(f"adjoint shape {pg.shape} != value shape {p.shape} in op '{node.op}'")
            key = id(p)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
    for node in order:
        if node.op != "leaf":
            node._backward = None
            node._parents = ()
            node._consumed = True
    root._consumed = True


def zero_grad(params: Iterable[Tensor]) -> None:
    for p in params:
        p.grad = None


# ---------------------------------------------------------------------------
# shared numeric kernels (also used by the incremental decoders)


def sigmoid_kernel(x: np.ndarray) -> np.ndarray:
    return expit(x)


def silu_kernel(x: np.ndarray) -> np.ndarray:
    return x * expit(x)


def linear_rows(x: np.ndarray, w: np.ndarray) -> np.ndarray:
    """Row-stable ``x @ w`` for a 2-d ``w``: one small product per row."""
    return np.matmul(x[..., None, :], w)[..., 0, :]


def layer_norm_kernel(x, gain, bias, eps):
    mu = x.mean(-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    return xhat * gain + bias, xhat, inv


def attend_row(q: np.ndarray, k: np.ndarray, v: np.ndarray, scale: float):
    """Softmax attention of one query row over the visible keys ``k``."""
    s = np.matmul(q[None, :], k.T)[0] * scale
    m = s.max()
    e = np.exp(s - m)
    p = e / e.sum()
    return np.matmul(p, v), p


def rotate_pairs_kernel(x: np.ndarray, cos: np.ndarray, sin: np.ndarray) -> np.ndarray:
    r = 2 * cos.shape[-1]
    out = x.copy()
    xe = x[..., 0:r:2]
    xo = x[..., 1:r:2]
    out[..., 0:r:2] = xe * cos - xo * sin
    out[..., 1:r:2] = xe * sin + xo * cos
    return out


def visible_span(row: np.ndarray):
    """Return ``(lo, hi)`` when the visible columns are contiguous, else the index array."""
    idx = np.flatnonzero(row)
    if idx.size == 0:
        raise ShapeError("attention row has no visible key")
    lo, hi = int(idx[0]), int(idx[-1]) + 1
    if hi - lo == idx.size:
        return lo, hi
    return idx


# ---------------------------------------------------------------------------
# elementwise


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _broadcast_shape(a: Tensor, b: Tensor, op: str) -> tuple:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast") from None


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "add")
    return make_op(
        a.value + b.value,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
        "add",
    )


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "sub")
    return make_op(
        a.value - b.value,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
        "sub",
    )


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "mul")
    return make_op(
        a.value * b.value,
        (a, b),
        lambda g: (
            _unbroadcast(g * b.value, a.shape) if a.requires_grad else None,
            _unbroadcast(g * a.value, b.shape) if b.requires_grad else None,
        ),
        "mul",
    )


def neg(a) -> Tensor:
    a = as_tensor(a)
    return make_op(-a.value, (a,), lambda g: (-g,), "neg")


def scale(a, c: float) -> Tensor:
    a = as_tensor(a)
    c = a.value.dtype.type(c)
    return make_op(a.value * c, (a,), lambda g: (g * c,), "scale")


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    s = sigmoid_kernel(a.value)
    return make_op(s, (a,), lambda g: (g * s * (1 - s),), "sigmoid")


def silu(a) -> Tensor:
    a = as_tensor(a)
    s = expit(a.value)
    y = a.value * s
    return make_op(y, (a,), lambda g: (g * (s + a.value * s * (1 - s)),), "silu")


def tanh(a) -> Tensor:
    a = as_tensor(a)
    t = np.tanh(a.value)
    return make_op(t, (a,), lambda g: (g * (1 - t * t),), "tanh")


def elementwise(kind: str, a, b=None) -> Tensor:
    """Dispatch by name; ``scale`` takes a python number as ``b``."""
    binary = {"add": add, "sub": sub, "mul": mul}
    unary = {"sigmoid": sigmoid, "silu": silu, "tanh": tanh, "neg": neg}
    if kind in binary:
        if b is None:
            raise ShapeError(f"{kind} needs two operands")
        return binary[kind](a, b)
    if kind == "scale":
        return scale(a, b)
    if kind in unary:
        return unary[kind](a)
    raise ValueError(f"unknown elementwise kind {kind!r}")


# ---------------------------------------------------------------------------
# linear algebra and shape ops


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError("matmul operands need at least 2 dims")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner extents differ: {a.shape} @ {b.shape}")
    if is_exact() and b.ndim == 2:
        value = linear_rows(a.value, b.value)
    else:
        value = np.matmul(a.value, b.value)

    def bw(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(np.matmul(g, np.swapaxes(b.value, -1, -2)), a.shape)
        if b.requires_grad:
            if b.ndim == 2:
                k, n = b.shape
                gb = a.value.reshape(-1, k).T @ g.reshape(-1, n)
            else:
                gb = _unbroadcast(np.matmul(np.swapaxes(a.value, -1, -2), g), b.shape)
        return ga, gb

    return make_op(value, (a, b), bw, "matmul")


def transpose(a) -> Tensor:
    """Swap the last two axes."""
    a = as_tensor(a)
    return make_op(np.swapaxes(a.value, -1, -2), (a,), lambda g: (np.swapaxes(g, -1, -2),), "transpose")


def permute(a, axes: Sequence[int]) -> Tensor:
    a = as_tensor(a)
    inv = np.argsort(axes)
    return make_op(np.transpose(a.value, axes), (a,), lambda g: (np.transpose(g, inv),), "permute")


def reshape(a, shape: Sequence[int]) -> Tensor:
    a = as_tensor(a)
    return make_op(a.value.reshape(shape), (a,), lambda g: (g.reshape(a.shape),), "reshape")


def sum(a, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    a = as_tensor(a)
    value = np.asarray(a.value.sum(axis=axis, keepdims=keepdims))

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return make_op(value, (a,), bw, "sum")


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    count = a.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return scale(sum(a, axis=axis, keepdims=keepdims), 1.0 / count)


def getitem(a, idx) -> Tensor:
    a = as_tensor(a)
    value = a.value[idx]
    fancy = any(isinstance(i, (np.ndarray, list)) for i in (idx if isinstance(idx, tuple) else (idx,)))

    def bw(g):
        out = np.zeros_like(a.value)
        if fancy:
            np.add.at(out, idx, g)
        else:
            out[idx] = g
        return (out,)

    return make_op(np.array(value, copy=True), (a,), bw, "getitem")


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    value = np.concatenate([t.value for t in ts], axis=axis)
    splits = np.cumsum([t.shape[axis] for t in ts])[:-1]
    return make_op(value, ts, lambda g: tuple(np.split(g, splits, axis=axis)), "concat")


def embedding(table, ids) -> Tensor:
    """Gather rows of ``table`` (any trailing shape) at integer ``ids``."""
    table = as_tensor(table)
    ids = np.asarray(ids)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise IndexError(f"embedding id out of range [0, {table.shape[0]})")

    def bw(g):
        out = np.zeros_like(table.value)
        np.add.at(out, ids, g)
        return (out,)

    return make_op(table.value[ids], (table,), bw, "embedding")


# ---------------------------------------------------------------------------
# normalisation, softmax, attention


def softmax_lastaxis(x) -> Tensor:
    x = as_tensor(x)
    if x.shape[-1] < 1:
        raise ShapeError("softmax needs a non-empty last axis")
    if not np.all(np.isfinite(x.value)):
        raise NonFiniteError("non-finite input to softmax")
    e = np.exp(x.value - x.value.max(-1, keepdims=True))
    p = e / e.sum(-1, keepdims=True)

    def bw(g):
        return (p * (g - (g * p).sum(-1, keepdims=True)),)

    return make_op(p, (x,), bw, "softmax")


def layer_norm(x, gain, bias, eps: float = 1e-5) -> Tensor:
    x, gain, bias = as_tensor(x), as_tensor(gain), as_tensor(bias)
    y, xhat, inv = layer_norm_kernel(x.value, gain.value, bias.value, eps)

    def bw(g):
        gx_hat = g * gain.value
        gx = inv * (gx_hat - gx_hat.mean(-1, keepdims=True) - xhat * (gx_hat * xhat).mean(-1, keepdims=True))
        return gx, _unbroadcast(g * xhat, gain.shape), _unbroadcast(g, bias.shape)

    return make_op(y, (x, gain, bias), bw, "layer_norm")


def dropout(x, rate: float, rng: np.random.Generator | None) -> Tensor:
    """Inverted dropout; the identity when ``rng`` is None or ``rate`` is 0."""
    x = as_tensor(x)
    if rng is None or rate <= 0.0:
        return x
    keep = (rng.random(x.shape) >= rate).astype(x.dtype) / x.dtype.type(1.0 - rate)
    return make_op(x.value * keep, (x,), lambda g: (g * keep,), "dropout")


def attention(q, k, v, mask=None, scale: float = 1.0, dropout_rate: float = 0.0, rng=None) -> Tensor:
    """Scaled dot-product attention over the last two axes.

    ``mask`` is a boolean visibility array broadcastable to ``(..., Tq, Tk)``;
    hidden scores are replaced with a large negative constant before the
    softmax. Leading axes of ``q``, ``k`` and ``v`` must agree.
    """
    q, k, v = as_tensor(q), as_tensor(k), as_tensor(v)
    if q.shape[-1] != k.shape[-1] or k.shape[-2] != v.shape[-2]:
        raise ShapeError(f"attention shapes q{q.shape} k{k.shape} v{v.shape} disagree")
    tq, tk = q.shape[-2], k.shape[-2]
    lead = q.shape[:-2]
    drop = rng is not None and dropout_rate > 0.0
    dt = q.dtype
    if mask is not None:
        mask = np.broadcast_to(np.asarray(mask, dtype=bool), lead + (tq, tk))

    if is_exact() and not drop:
        qv = np.ascontiguousarray(q.value)
        kv = np.ascontiguousarray(k.value)
        vv = np.ascontiguousarray(v.value)
        p = np.zeros(lead + (tq, tk), dtype=dt)
        out = np.empty(lead + (tq, v.shape[-1]), dtype=dt)
        for li in np.ndindex(*lead):
            for i in range(tq):
                span = (0, tk) if mask is None else visible_span(mask[li + (i,)])
                if isinstance(span, tuple):
                    sl = slice(*span)
                    out[li + (i,)], p[li + (i, sl)] = attend_row(qv[li + (i,)], kv[li][sl], vv[li][sl], scale)
                else:
                    out[li + (i,)], p[li + (i, span)] = attend_row(qv[li + (i,)], kv[li][span], vv[li][span], scale)
        pd = p
        keep = None
    else:
        s = np.matmul(q.value, np.swapaxes(k.value, -1, -2))
        s *= dt.type(scale)
        if mask is not None:
            s = np.where(mask, s, dt.type(NEG_INF))
        s -= s.max(-1, keepdims=True)
        np.exp(s, out=s)
        s /= s.sum(-1, keepdims=True)
        p = s
        if drop:
            keep = (rng.random(p.shape) >= dropout_rate).astype(dt) / dt.type(1.0 - dropout_rate)
            pd = p * keep
        else:
            keep = None
            pd = p
        out = np.matmul(pd, v.value)

    def bw(g):
        gp = np.matmul(g, np.swapaxes(v.value, -1, -2))
        if keep is not None:
            gp *= keep
        gv = np.matmul(np.swapaxes(pd, -1, -2), g)
        gs = p * (gp - (gp * p).sum(-1, keepdims=True))
        gs *= dt.type(scale)
        gq = np.matmul(gs, k.value)
        gk = np.matmul(np.swapaxes(gs, -1, -2), q.value)
        return gq, gk, gv

    return make_op(out, (q, k, v), bw, "attention")


def rotate_pairs(x, cos: np.ndarray, sin: np.ndarray) -> Tensor:
    """Rotate consecutive feature pairs by fixed angles (leading ``2 * cos.shape[-1]`` features)."""
    x = as_tensor(x)
    r = 2 * cos.shape[-1]
    if r > x.shape[-1]:
        raise ShapeError(f"cannot rotate {r} features of a {x.shape[-1]}-wide input")
    y = rotate_pairs_kernel(x.value, cos, sin)

    def bw(g):
        out = g.copy()
        ge = g[..., 0:r:2]
        go = g[..., 1:r:2]
        out[..., 0:r:2] = ge * cos + go * sin
        out[..., 1:r:2] = go * cos - ge * sin
        return (out,)

    return make_op(y, (x,), bw, "rotate_pairs")


# ---------------------------------------------------------------------------
# finite differences


def fd_gradient_oracle(f: Callable[[], object], params: Sequence[Tensor], h: float = 1e-5) -> list:
    """Central-difference gradient of the scalar ``f()`` w.r.t. each tensor in ``params``.

    ``f`` is re-evaluated after every in-place nudge of a parameter element,
    so it must read the parameters' current values. Values must be float64.
    """

    def evaluate() -> float:
        out = f()
        return out.item() if isinstance(out, Tensor) else float(out)

    for p in params:
        if p.value.dtype != np.float64:
            raise TypeError("finite-difference checks need float64 parameters")
    with no_grad():
        first, second = evaluate(), evaluate()
        if first != second:
            raise NonDeterministicError(f"f is not deterministic: {first!r} != {second!r}")
        grads = []
        for p in params:
            g = np.zeros_like(p.value)
            flat = p.value.reshape(-1)
            gflat = g.reshape(-1)
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + h
                fp = evaluate()
                flat[i] = orig - h
                fm = evaluate()
                flat[i] = orig
                gflat[i] = (fp - fm) / (2 * h)
            grads.append(g)
    return grads


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """``|a - n| / max(|a|, |n|)`` in the infinity norm, 0 when both vanish."""
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    denom = max(np.abs(a).max(initial=0.0), np.abs(n).max(initial=0.0))
    if denom == 0.0:
        return 0.0
    return float(np.abs(a - n).max() / denom)


def check_gradients(f: Callable[[], Tensor], params: Sequence[Tensor], h: float = 1e-5) -> list:
    """Relative error between tape gradients and finite differences, one entry per parameter."""
    zero_grad(params)
    root = f()
    backward(root)
    analytic = [np.zeros_like(p.value) if p.grad is None else p.grad for p in params]
    numeric = fd_gradient_oracle(f, params, h)
    return [relative_error(a, n) for a, n in zip(analytic, numeric)]
