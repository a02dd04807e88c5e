"""Dense tensors with tape-based reverse-mode autodiff on numpy storage.

Values are float32 by default; wrap code in ``precision("float64")`` for
gradient checking. Ops record onto the active tape only inside a
``record()`` block, so inference runs tape-free.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "Tape",
    "tensor",
    "record",
    "precision",
    "default_dtype",
    "NumericError",
    "ShapeError",
    "MaskError",
    "matmul",
    "transpose",
    "reshape",
    "concat",
    "index",
    "add",
    "sub",
    "mul",
    "scale",
    "add_const",
    "softmax",
    "layer_norm",
    "gelu",
    "relu",
    "linear",
    "embedding",
    "cross_entropy",
    "attention",
    "abs_",
    "log",
    "softplus",
    "mean",
    "total",
    "grad_check",
    "Adam",
]

NEG_INF = -1e9  # finite mask bias; exp underflows to exactly 0 after shift


class NumericError(RuntimeError):
    """A forward op produced NaN or Inf."""


class ShapeError(ValueError):
    """Operand shapes violate an op precondition."""


class MaskError(ValueError):
    """An attention mask leaves a query row with no visible keys."""


_DTYPE = np.float32
_TAPE: "Tape | None" = None


def default_dtype():
    return _DTYPE


@contextlib.contextmanager
def precision(name: str):
    """Temporarily switch the dtype new tensors are created with."""
    global _DTYPE
    prev = _DTYPE
    _DTYPE = {"float32": np.float32, "float64": np.float64}[name]
    try:
        yield
    finally:
        _DTYPE = prev


class Tensor:
    """A dense array plus an optional gradient buffer."""

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=_DTYPE)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def zero_grad(self):
        self.grad = None

    def _accumulate(self, g: np.ndarray):
        if self.grad is None:
            self.grad = g.astype(self.data.dtype, copy=True)
        else:
            self.grad = self.grad + g

    def __repr__(self):
        return f"Tensor(shape={tuple(self.shape)}, dtype={self.data.dtype.name})"

    # operator sugar; scalars are python floats
    def __add__(self, other):
        return add(self, other) if isinstance(other, Tensor) else scale(self, 1.0, float(other))

    def __radd__(self, other):
        return self.__add__(other)

    def __sub__(self, other):
        return sub(self, other) if isinstance(other, Tensor) else scale(self, 1.0, -float(other))

    def __mul__(self, other):
        return mul(self, other) if isinstance(other, Tensor) else scale(self, float(other))

    def __rmul__(self, other):
        return self.__mul__(other)

    def __neg__(self):
        return scale(self, -1.0)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("tensor/tensor division unsupported; multiply by a reciprocal op")
        return scale(self, 1.0 / float(other))

    def __matmul__(self, other):
        return matmul(self, other)


def tensor(data, requires_grad: bool = False) -> Tensor:
    return Tensor(data, requires_grad=requires_grad)


class Tape:
    """Ordered op records; execution order is already topological."""

    __slots__ = ("nodes",)

    def __init__(self):
        self.nodes: list[tuple[Tensor, Callable[[np.ndarray], None]]] = []

    def backward(self, loss: Tensor):
        if loss.size != 1:
            raise ShapeError("backward expects a scalar loss")
        loss._accumulate(np.ones_like(loss.data))
        for out, back in reversed(self.nodes):
            if out.grad is None:
                continue
            back(out.grad)


@contextlib.contextmanager
def record():
    """Activate a fresh tape; yields it for backward()."""
    global _TAPE
    prev = _TAPE
    _TAPE = Tape()
    try:
        yield _TAPE
    finally:
        _TAPE = prev


def _make(out_data: np.ndarray, parents: Sequence[Tensor], back: Callable, name: str) -> Tensor:
    if not np.isfinite(out_data).all():
        raise NumericError(f"non-finite values produced by {name}")
    out = Tensor.__new__(Tensor)
    out.data = out_data
    out.grad = None
    if _TAPE is not None and any(p.requires_grad for p in parents):
        out.requires_grad = True
        _TAPE.nodes.append((out, back))
    else:
        out.requires_grad = False
    return out


# ---------------------------------------------------------------- basic ops


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Batched matrix product; leading batch dims must match exactly."""
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise ShapeError("matmul expects rank >= 2 operands")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dims differ: {a.shape} @ {b.shape}")
    if a.shape[:-2] != b.shape[:-2]:
        raise ShapeError(f"matmul batch dims differ: {a.shape} vs {b.shape}")
    out_data = a.data @ b.data

    def back(g: np.ndarray):
        if a.requires_grad:
            a._accumulate(g @ np.swapaxes(b.data, -1, -2))
        if b.requires_grad:
            b._accumulate(np.swapaxes(a.data, -1, -2) @ g)

    return _make(out_data, (a, b), back, "matmul")


def transpose(t: Tensor, ax0: int, ax1: int) -> Tensor:
    out_data = np.swapaxes(t.data, ax0, ax1)

    def back(g):
        if t.requires_grad:
            t._accumulate(np.swapaxes(g, ax0, ax1))

    return _make(out_data, (t,), back, "transpose")


def reshape(t: Tensor, shape) -> Tensor:
    orig = t.shape
    out_data = t.data.reshape(shape)

    def back(g):
        if t.requires_grad:
            t._accumulate(g.reshape(orig))

    return _make(out_data, (t,), back, "reshape")


def concat(parts: Sequence[Tensor], axis: int = 0) -> Tensor:
    if not parts:
        raise ShapeError("concat of zero tensors")
    out_data = np.concatenate([p.data for p in parts], axis=axis)
    sizes = [p.shape[axis] for p in parts]
    offsets = np.cumsum([0] + sizes)

    def back(g):
        for p, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
            if p.requires_grad:
                sl = [slice(None)] * g.ndim
                sl[axis] = slice(lo, hi)
                p._accumulate(g[tuple(sl)])

    return _make(out_data, tuple(parts), back, "concat")


def index(t: Tensor, idx) -> Tensor:
    """Basic slicing (no fancy indexing); backward scatters into zeros."""
    out_data = t.data[idx]

    def back(g):
        if t.requires_grad:
            buf = np.zeros_like(t.data)
            buf[idx] = g
            t._accumulate(buf)

    return _make(np.ascontiguousarray(out_data), (t,), back, "index")


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"add shapes differ: {a.shape} vs {b.shape}")
    out_data = a.data + b.data

    def back(g):
        if a.requires_grad:
            a._accumulate(g)
        if b.requires_grad:
            b._accumulate(g)

    return _make(out_data, (a, b), back, "add")


def sub(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"sub shapes differ: {a.shape} vs {b.shape}")
    out_data = a.data - b.data

    def back(g):
        if a.requires_grad:
            a._accumulate(g)
        if b.requires_grad:
            b._accumulate(-g)

    return _make(out_data, (a, b), back, "sub")


def mul(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"mul shapes differ: {a.shape} vs {b.shape}")
    out_data = a.data * b.data

    def back(g):
        if a.requires_grad:
            a._accumulate(g * b.data)
        if b.requires_grad:
            b._accumulate(g * a.data)

    return _make(out_data, (a, b), back, "mul")


def scale(t: Tensor, k: float, shift: float = 0.0) -> Tensor:
    out_data = t.data * k + shift if shift else t.data * k

    def back(g):
        if t.requires_grad:
            t._accumulate(g * k)

    return _make(out_data, (t,), back, "scale")


def add_const(t: Tensor, c: np.ndarray) -> Tensor:
    """Add a non-differentiable constant array (e.g. a mask bias)."""
    out_data = t.data + c

    def back(g):
        if t.requires_grad:
            t._accumulate(g)

    return _make(out_data, (t,), back, "add_const")


# ------------------------------------------------------------- activations


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out_data = e / e.sum(axis=axis, keepdims=True)

    def back(g):
        if x.requires_grad:
            s = out_data
            dot = (g * s).sum(axis=axis, keepdims=True)
            x._accumulate(s * (g - dot))

    return _make(out_data, (x,), back, "softmax")


_GELU_C = float(np.sqrt(2.0 / np.pi))
_GELU_A = 0.044715


def gelu(x: Tensor) -> Tensor:
    u = _GELU_C * (x.data + _GELU_A * x.data**3)
    th = np.tanh(u)
    out_data = 0.5 * x.data * (1.0 + th)

    def back(g):
        if x.requires_grad:
            du = _GELU_C * (1.0 + 3.0 * _GELU_A * x.data**2)
            d = 0.5 * (1.0 + th) + 0.5 * x.data * (1.0 - th**2) * du
            x._accumulate(g * d)

    return _make(out_data, (x,), back, "gelu")


def relu(x: Tensor) -> Tensor:
    out_data = np.maximum(x.data, 0.0)

    def back(g):
        if x.requires_grad:
            x._accumulate(g * (x.data > 0))

    return _make(out_data, (x,), back, "relu")


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalization over the last axis."""
    n = x.shape[-1]
    if gamma.shape != (n,) or beta.shape != (n,):
        raise ShapeError("layer_norm parameter shapes must match the last axis")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc**2).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out_data = xhat * gamma.data + beta.data

    def back(g):
        if gamma.requires_grad:
            gamma._accumulate((g * xhat).reshape(-1, n).sum(axis=0))
        if beta.requires_grad:
            beta._accumulate(g.reshape(-1, n).sum(axis=0))
        if x.requires_grad:
            dxhat = g * gamma.data
            term = dxhat - dxhat.mean(axis=-1, keepdims=True) - xhat * (dxhat * xhat).mean(
                axis=-1, keepdims=True
            )
            x._accumulate(term * inv)

    return _make(out_data, (x, gamma, beta), back, "layer_norm")


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """x[..., in] @ w[in, out] (+ b[out])."""
    if x.shape[-1] != w.shape[0]:
        raise ShapeError(f"linear: {x.shape} @ {w.shape}")
    out_data = x.data @ w.data
    if b is not None:
        out_data = out_data + b.data

    def back(g):
        if x.requires_grad:
            x._accumulate(g @ w.data.T)
        if w.requires_grad:
            g2 = g.reshape(-1, g.shape[-1])
            x2 = x.data.reshape(-1, x.shape[-1])
            w._accumulate(x2.T @ g2)
        if b is not None and b.requires_grad:
            b._accumulate(g.reshape(-1, g.shape[-1]).sum(axis=0))

    parents = (x, w) if b is None else (x, w, b)
    return _make(out_data, parents, back, "linear")


def embedding(table: Tensor, ids) -> Tensor:
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise ShapeError("embedding index out of range")
    out_data = table.data[ids]

    def back(g):
        if table.requires_grad:
            buf = np.zeros_like(table.data)
            np.add.at(buf, ids, g)
            table._accumulate(buf)

    return _make(out_data, (table,), back, "embedding")


def cross_entropy(logits: Tensor, targets) -> Tensor:
    """Mean negative log-likelihood over rows of logits[n, c] (or a single row)."""
    data = logits.data if logits.data.ndim == 2 else logits.data[None, :]
    t = np.atleast_1d(np.asarray(targets, dtype=np.int64))
    if t.shape[0] != data.shape[0]:
        raise ShapeError("cross_entropy target count mismatch")
    shifted = data - data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    logp = shifted - lse
    n = data.shape[0]
    out_data = np.asarray(-logp[np.arange(n), t].mean(), dtype=data.dtype)

    def back(g):
        if logits.requires_grad:
            p = np.exp(logp)
            p[np.arange(n), t] -= 1.0
            grad = (g * p / n).astype(data.dtype)
            logits._accumulate(grad if logits.data.ndim == 2 else grad[0])

    return _make(out_data, (logits,), back, "cross_entropy")


def attention(q: Tensor, k: Tensor, v: Tensor, mask: np.ndarray | None = None) -> Tensor:
    """Scaled dot-product attention over [h, q, d] x [h, s, d] -> [h, q, d].

    mask is a boolean [q, s] array; False positions are hidden from the query.
    """
    if q.data.ndim != 3 or k.data.ndim != 3 or v.data.ndim != 3:
        raise ShapeError("attention expects [heads, tokens, dim] operands")
    h, nq, d = q.shape
    hk, ns, dk = k.shape
    if hk != h or v.shape[0] != h:
        raise ShapeError("attention head counts differ")
    if dk != d:
        raise ShapeError("attention key dim differs from query dim")
    if v.shape[1] != ns:
        raise ShapeError("attention key/value token counts differ")
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        if mask.shape != (nq, ns):
            raise ShapeError(f"attention mask shape {mask.shape} != {(nq, ns)}")
        if not mask.any(axis=1).all():
            raise MaskError("attention mask hides every key for some query row")
    logits = matmul(q, transpose(k, -1, -2))
    logits = scale(logits, 1.0 / float(np.sqrt(d)))
    if mask is not None:
        bias = np.where(mask, 0.0, NEG_INF).astype(logits.data.dtype)
        logits = add_const(logits, bias[None, :, :])
    weights = softmax(logits, axis=-1)
    return matmul(weights, v)


def abs_(x: Tensor) -> Tensor:
    out_data = np.abs(x.data)

    def back(g):
        if x.requires_grad:
            x._accumulate(g * np.sign(x.data))

    return _make(out_data, (x,), back, "abs")


def log(x: Tensor) -> Tensor:
    out_data = np.log(x.data)

    def back(g):
        if x.requires_grad:
            x._accumulate(g / x.data)

    return _make(out_data, (x,), back, "log")


def softplus(x: Tensor) -> Tensor:
    out_data = np.log1p(np.exp(-np.abs(x.data))) + np.maximum(x.data, 0.0)

    def back(g):
        if x.requires_grad:
            sig = 1.0 / (1.0 + np.exp(-x.data))
            x._accumulate(g * sig)

    return _make(out_data, (x,), back, "softplus")


def mean(x: Tensor) -> Tensor:
    out_data = np.asarray(x.data.mean(), dtype=x.data.dtype)
    n = x.size

    def back(g):
        if x.requires_grad:
            x._accumulate(np.full_like(x.data, g / n))

    return _make(out_data, (x,), back, "mean")


def total(x: Tensor) -> Tensor:
    out_data = np.asarray(x.data.sum(), dtype=x.data.dtype)

    def back(g):
        if x.requires_grad:
            x._accumulate(np.full_like(x.data, g))

    return _make(out_data, (x,), back, "total")


# ------------------------------------------------------------ verification


def grad_check(fn: Callable[..., Tensor], inputs: Sequence[Tensor], eps: float = 1e-5) -> float:
    """Max relative error between tape gradients and central differences.

    Run under ``precision("float64")``; the tolerance contract assumes it.
    """
    if default_dtype() is not np.float64:
        raise RuntimeError("grad_check requires float64 precision mode")
    for t in inputs:
        t.zero_grad()
    with record() as tape:
        loss = fn(*inputs)
        tape.backward(loss)
    worst = 0.0
    for t in inputs:
        analytic = np.zeros_like(t.data) if t.grad is None else t.grad
        flat = t.data.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            hi = fn(*inputs).item()
            flat[i] = orig - eps
            lo = fn(*inputs).item()
            flat[i] = orig
            num = (hi - lo) / (2.0 * eps)
            ana = analytic.reshape(-1)[i]
            rel = abs(ana - num) / max(abs(ana), abs(num), 1e-3)
            worst = max(worst, rel)
    return worst


class Adam(object):
    """Adam with per-group learning rates; state keyed by parameter identity."""

    def __init__(self, groups: Iterable[tuple[Sequence[Tensor], float]],
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.groups = [(list(params), float(lr)) for params, lr in groups]
        for params, lr in self.groups:
            if lr <= 0:
                raise ValueError("learning rate must be positive")
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self._m: dict[int, np.ndarray] = {}
        self._v: dict[int, np.ndarray] = {}

    def zero_grad(self):
        for params, _ in self.groups:
            for p in params:
                p.zero_grad()

    def step(self):
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1**self.t
        c2 = 1.0 - b2**self.t
        for params, lr in self.groups:
            for p in params:
                if p.grad is None:
                    continue
                key = id(p)
                m = self._m.get(key)
                if m is None:
                    m = np.zeros_like(p.data)
                    self._m[key] = m
                    self._v[key] = np.zeros_like(p.data)
                v = self._v[key]
                m *= b1
                m += (1.0 - b1) * p.grad
                v *= b2
                v += (1.0 - b2) * p.grad**2
                p.data -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
