"""Small reverse-mode autodiff engine on top of numpy.

Values are float64 numpy arrays wrapped in :class:`Tensor`. Operations are
recorded on the innermost active :class:`Tape` only when at least one operand
is tracked (``requires_grad``), so evaluation code that runs outside a tape
pays nothing for bookkeeping.

Example:
    >>> w = Tensor([1.0, 2.0], requires_grad=True)
    >>> with Tape() as tape:
    ...     loss = sqnorm(w)
    >>> tape.gradient(loss, [w])[0]
    array([2., 4.])
"""

from __future__ import annotations

import threading
from typing import Callable, Sequence

import numpy as np
import scipy.sparse as sp

from .errors import ContractError, ShapeError

_local = threading.local()


def _tape_stack() -> list:
    stack = getattr(_local, "stack", None)
    if stack is None:
        stack = _local.stack = []
    return stack


def active_tape() -> "Tape | None":
    stack = _tape_stack()
    return stack[-1] if stack else None


class Tensor:
    """A float64 array plus an opt-in gradient-tracking flag."""

    __slots__ = ("data", "requires_grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

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
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __truediv__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, 1.0 / other)
        return NotImplemented


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


class Tape:
    """Ordered record of primitive operations for one backward sweep.

    Records are appended in execution order, which is a topological order of
    the computation, so replaying them reversed is a valid reverse sweep.

    Args:
        check_finite: raise ``FloatingPointError`` as soon as any recorded
            forward value contains NaN or Inf.
    """

    def __init__(self, check_finite: bool = False):
        self.records: list[tuple[Tensor, tuple[Tensor, ...], Callable]] = []
        self.check_finite = check_finite

    def __enter__(self) -> "Tape":
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        stack = _tape_stack()
        if stack and stack[-1] is self:
            stack.pop()

    def record(self, out: Tensor, inputs: tuple, backward: Callable) -> None:
        if self.check_finite and not np.all(np.isfinite(out.data)):
            raise FloatingPointError(f"non-finite value produced by op with output shape {out.shape}")
        self.records.append((out, inputs, backward))

    def gradient(self, loss: Tensor, sources: Sequence[Tensor]) -> list[np.ndarray]:
        """Gradients of scalar ``loss`` with respect to each tensor in ``sources``.

        Sources the loss does not depend on get a zero array of their shape.
        """
        if loss.data.size != 1:
            raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
        wanted = {id(s) for s in sources}
        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        found: dict[int, np.ndarray] = {}
        if id(loss) in wanted:
            found[id(loss)] = grads[id(loss)]
        for out, inputs, backward in reversed(self.records):
            g = grads.pop(id(out), None)
            if g is None:
                continue
            if id(out) in wanted:
                found[id(out)] = g
            in_grads = backward(g)
            for inp, ig in zip(inputs, in_grads):
                if ig is None or not isinstance(inp, Tensor) or not inp.requires_grad:
                    continue
                ig = _unbroadcast(ig, inp.data.shape)
                key = id(inp)
                prev = grads.get(key)
                grads[key] = ig if prev is None else prev + ig
        for s in sources:
            if id(s) in grads:
                found[id(s)] = grads[id(s)]
        return [found.get(id(s), np.zeros_like(s.data)) for s in sources]


def backward(loss: Tensor, params: dict[str, Tensor], tape: Tape) -> dict[str, np.ndarray]:
    """Gradient map over named parameters (zero for untouched ones)."""
    names = list(params)
    grads = tape.gradient(loss, [params[n] for n in names])
    return dict(zip(names, grads))


def grad_wrt_inputs(loss: Tensor, inputs: Sequence[Tensor], tape: Tape) -> list[np.ndarray]:
    """Gradient of ``loss`` with respect to chosen (tracked) input tensors."""
    return tape.gradient(loss, inputs)


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g.reshape(shape)


def _make(data: np.ndarray, inputs: tuple, backward: Callable) -> Tensor:
    tracked = any(isinstance(t, Tensor) and t.requires_grad for t in inputs)
    tape = active_tape() if tracked else None
    out = Tensor(data, requires_grad=tape is not None)
    if tape is not None:
        tape.record(out, inputs, backward)
    return out


def _check_broadcast(a: np.ndarray, b: np.ndarray, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from None


# ---------------------------------------------------------------- primitives


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a.data, b.data, "add")
    return _make(a.data + b.data, (a, b), lambda g: (g, g))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a.data, b.data, "sub")
    return _make(a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a.data, b.data, "mul")
    ad, bd = a.data, b.data
    return _make(ad * bd, (a, b), lambda g: (g * bd, g * ad))


def scale(a, c: float) -> Tensor:
    a = as_tensor(a)
    c = float(c)
    return _make(a.data * c, (a,), lambda g: (g * c,))


def matmul(a, b) -> Tensor:
    """``a @ b`` for ``a`` of shape (..., m, k) and a 2-D ``b`` of shape (k, n)."""
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    if bd.ndim != 2 or ad.ndim < 1 or ad.shape[-1] != bd.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {ad.shape} and {bd.shape}")

    def bw(g):
        ga = g @ bd.T
        gb = ad.reshape(-1, ad.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        return ga, gb

    return _make(ad @ bd, (a, b), bw)


def transpose(a) -> Tensor:
    a = as_tensor(a)
    if a.data.ndim != 2:
        raise ShapeError(f"transpose: expected a matrix, got shape {a.shape}")
    return _make(a.data.T, (a,), lambda g: (g.T,))


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    old = a.data.shape
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot view {old} as {tuple(shape)}") from None
    return _make(out, (a,), lambda g: (g.reshape(old),))


def concat(tensors: Sequence, axis: int = -1) -> Tensor:
    """Concatenate along the last axis (other axes must agree)."""
    ts = [as_tensor(t) for t in tensors]
    lead = {t.data.shape[:-1] for t in ts}
    if len(lead) != 1:
        raise ShapeError("concat: leading shapes differ: " + ", ".join(str(t.shape) for t in ts))
    widths = [t.data.shape[-1] for t in ts]
    bounds = np.cumsum([0] + widths)

    def bw(g):
        return tuple(g[..., bounds[i]:bounds[i + 1]] for i in range(len(ts)))

    return _make(np.concatenate([t.data for t in ts], axis=-1), tuple(ts), bw)


def stack_rows(tensors: Sequence) -> Tensor:
    """Concatenate along the first axis (trailing shapes must agree)."""
    ts = [as_tensor(t) for t in tensors]
    tail = {t.data.shape[1:] for t in ts}
    if len(tail) != 1:
        raise ShapeError("stack_rows: trailing shapes differ: " + ", ".join(str(t.shape) for t in ts))
    bounds = np.cumsum([0] + [t.data.shape[0] for t in ts])

    def bw(g):
        return tuple(g[bounds[i]:bounds[i + 1]] for i in range(len(ts)))

    return _make(np.concatenate([t.data for t in ts], axis=0), tuple(ts), bw)


def sum(a, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001 - mirrors numpy
    a = as_tensor(a)
    shape = a.data.shape

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _make(np.sum(a.data, axis=axis, keepdims=keepdims), (a,), bw)


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    n = a.data.size if axis is None else a.data.shape[axis]
    return scale(sum(a, axis=axis, keepdims=keepdims), 1.0 / n)


def mean_rows(a) -> Tensor:
    """Mean over the first axis; an empty set of rows yields zeros."""
    a = as_tensor(a)
    if a.data.shape[0] == 0:
        return Tensor(np.zeros(a.data.shape[1:]))
    return mean(a, axis=0)


def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0
    return _make(np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,))


def sigmoid_np(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x, dtype=np.float64)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    s = sigmoid_np(a.data)
    return _make(s, (a,), lambda g: (g * s * (1.0 - s),))


def silu(a) -> Tensor:
    a = as_tensor(a)
    x = a.data
    s = sigmoid_np(x)
    return _make(x * s, (a,), lambda g: (g * (s * (1.0 + x * (1.0 - s))),))


def exp(a) -> Tensor:
    a = as_tensor(a)
    e = np.exp(a.data)
    return _make(e, (a,), lambda g: (g * e,))


_LOG_FLOOR = 1e-300


def log(a) -> Tensor:
    """Natural log; inputs are floored at 1e-300 so a zero probability stays finite."""
    a = as_tensor(a)
    x = np.maximum(a.data, _LOG_FLOOR)
    return _make(np.log(x), (a,), lambda g: (g / x,))


def sqnorm(a, axis=-1) -> Tensor:
    """Squared L2 norm along ``axis`` (all entries when ``axis`` is None)."""
    a = as_tensor(a)
    x = a.data
    if axis is None:
        return _make(np.sum(x * x), (a,), lambda g: (2.0 * g * x,))
    return _make(np.sum(x * x, axis=axis), (a,), lambda g: (2.0 * np.expand_dims(g, axis) * x,))


def norm(a, axis=-1) -> Tensor:
    """L2 norm along ``axis``; the subgradient at the zero vector is taken as zero."""
    a = as_tensor(a)
    x = a.data
    n = np.sqrt(np.sum(x * x, axis=axis))

    def bw(g):
        safe = np.where(n > 0, n, 1.0)
        coef = np.where(n > 0, g / safe, 0.0)
        return (np.expand_dims(coef, axis) * x,)

    return _make(n, (a,), bw)


def softmax(a) -> Tensor:
    a = as_tensor(a)
    z = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=-1, keepdims=True)

    def bw(g):
        return (s * (g - np.sum(g * s, axis=-1, keepdims=True)),)

    return _make(s, (a,), bw)


def log_softmax(a) -> Tensor:
    a = as_tensor(a)
    z = a.data - a.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    out = z - lse
    s = np.exp(out)

    def bw(g):
        return (g - s * np.sum(g, axis=-1, keepdims=True),)

    return _make(out, (a,), bw)


def gather_rows(a, index) -> Tensor:
    """Rows ``a[index]``; repeated indices accumulate in backward."""
    a = as_tensor(a)
    idx = np.asarray(index, dtype=np.int64)
    shape = a.data.shape

    def bw(g):
        out = np.zeros(shape)
        np.add.at(out, idx, g)
        return (out,)

    return _make(a.data[idx], (a,), bw)


def pick(a, index) -> Tensor:
    """Per-row element ``a[i, index[i]]`` of a matrix."""
    a = as_tensor(a)
    idx = np.asarray(index, dtype=np.int64)
    rows = np.arange(a.data.shape[0])
    shape = a.data.shape

    def bw(g):
        out = np.zeros(shape)
        out[rows, idx] = g
        return (out,)

    return _make(a.data[rows, idx], (a,), bw)


def dropout(a, p: float, rng: np.random.Generator | None, train: bool) -> Tensor:
    """Inverted dropout: identity in eval mode, mask scaled by 1/(1-p) in train mode."""
    a = as_tensor(a)
    if not train or p <= 0.0:
        return a
    if rng is None:
        raise ContractError("dropout in train mode needs a seeded generator")
    keep = (rng.random(a.data.shape) >= p) / (1.0 - p)
    return _make(a.data * keep, (a,), lambda g: (g * keep,))


def spmm(matrix: sp.spmatrix, a) -> Tensor:
    """Constant sparse matrix times a tracked dense matrix."""
    a = as_tensor(a)
    if matrix.shape[1] != a.data.shape[0]:
        raise ShapeError(f"spmm: incompatible shapes {matrix.shape} and {a.shape}")
    mt = matrix.T.tocsr()
    return _make(np.asarray(matrix @ a.data), (a,), lambda g: (np.asarray(mt @ g),))


# ----------------------------------------------------------------- optimizer


class Adam:
    """Adam with bias correction over a named parameter dict.

    Moments are created lazily with the parameter's shape; ``t`` counts steps.
    """

    def __init__(self, lr: float = 1e-3, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def step(self, params: dict[str, Tensor], grads: dict[str, np.ndarray]) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        for name, g in grads.items():
            p = params[name]
            if g.shape != p.data.shape:
                raise ShapeError(f"adam: gradient {g.shape} does not match parameter {name} {p.data.shape}")
            m = self.m.get(name)
            if m is None:
                m = self.m[name] = np.zeros_like(p.data)
                self.v[name] = np.zeros_like(p.data)
            v = self.v[name]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            p.data = p.data - self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def state_arrays(self) -> dict[str, np.ndarray]:
        out = {"t": np.array([float(self.t)])}
        for name in self.m:
            out[f"m/{name}"] = self.m[name]
            out[f"v/{name}"] = self.v[name]
        return out

    def load_state_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        self.t = int(arrays["t"][0])
        self.m = {k[2:]: v.copy() for k, v in arrays.items() if k.startswith("m/")}
        self.v = {k[2:]: v.copy() for k, v in arrays.items() if k.startswith("v/")}


def adam_step(state: Adam, params: dict[str, Tensor], grads: dict[str, np.ndarray]) -> None:
    state.step(params, grads)


def numeric_gradient(f: Callable[[], float], x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central finite differences of ``f`` with respect to array ``x`` (perturbed in place)."""
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = x[i]
        x[i] = old + h
        fp = f()
        x[i] = old - h
        fm = f()
        x[i] = old
        g[i] = (fp - fm) / (2.0 * h)
    return g
