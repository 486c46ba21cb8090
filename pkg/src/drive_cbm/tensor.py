"""Dense float64 tensors with a small reverse-mode autodiff engine.

Only the operations needed by the concept-bottleneck model and its losses are
provided. Shapes are explicit: the only broadcast allowed is a row vector added
to (or subtracted from) a matrix.
"""
from __future__ import annotations

import math
from typing import Callable, Sequence

import numpy as np
from scipy.special import erf

__all__ = [
    "Tensor", "DimensionError", "DegenerateInputError", "NonFiniteError", "ContractError",
    "tensor", "constant", "matmul", "add", "sub", "scalar_mul", "elementwise_mul",
    "sum", "mean", "abs", "sqrt", "l2_norm", "relu", "gelu", "concat",
    "reshape", "slice_by_indices", "window_mean_pool", "cosine_rows", "backward", "grad_check",
    "set_finite_checks",
]

_SQRT2 = math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)
_CHECK_FINITE = True


class ContractError(ValueError):
    pass


class DimensionError(ContractError):
    pass


class DegenerateInputError(ContractError):
    pass


class NonFiniteError(FloatingPointError):
    pass


def set_finite_checks(enabled: bool) -> bool:
    """Toggle NaN/Inf checks at op boundaries. Returns the previous setting."""
    global _CHECK_FINITE
    prev = _CHECK_FINITE
    _CHECK_FINITE = bool(enabled)
    return prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_backward", "_op")

    def __init__(self, data, requires_grad: bool = False, name: str = "",
                 _parents: tuple = (), _op: str = ""):
        arr = np.array(data, dtype=np.float64)  # always a private copy
        if _CHECK_FINITE and not np.isfinite(arr).all():
            where = _op or name or "leaf"
            raise NonFiniteError(f"non-finite value produced by {where}")
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad or any(p.requires_grad for p in _parents))
        self.name = name
        self._parents = _parents
        self._backward: Callable[[np.ndarray], tuple] | None = None
        self._op = _op

    @classmethod
    def _result(cls, data: np.ndarray, parents: tuple, op: str) -> "Tensor":
        # avoids the defensive copy in __init__ for freshly computed arrays
        out = cls.__new__(cls)
        if data.dtype != np.float64:
            data = data.astype(np.float64)
        if _CHECK_FINITE and not np.isfinite(data).all():
            raise NonFiniteError(f"non-finite value produced by {op}")
        out.data = data
        out.grad = None
        out.name = ""
        out._parents = parents
        out._op = op
        out._backward = None
        out.requires_grad = any(p.requires_grad for p in parents)
        return out

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor(self.data, name=self.name)

    def zero_grad(self) -> None:
        self.grad = None

    def _accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.array(g, dtype=np.float64).reshape(self.data.shape)
        else:
            self.grad = self.grad + g.reshape(self.data.shape)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __add__(self, other):
        return add(self, _wrap(other, self.shape))

    def __radd__(self, other):
        return add(_wrap(other, self.shape), self)

    def __sub__(self, other):
        return sub(self, _wrap(other, self.shape))

    def __rsub__(self, other):
        return sub(_wrap(other, self.shape), self)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return elementwise_mul(self, other)
        return scalar_mul(self, float(other))

    __rmul__ = __mul__

    def __neg__(self):
        return scalar_mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def _wrap(x, shape) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.broadcast_to(np.asarray(x, dtype=np.float64), shape))


def tensor(data, requires_grad: bool = False, name: str = "") -> Tensor:
    return Tensor(data, requires_grad=requires_grad, name=name)


def constant(data, name: str = "") -> Tensor:
    return Tensor(data, requires_grad=False, name=name)


# -- elementwise / arithmetic -------------------------------------------------

def _row_broadcast(a: Tensor, b: Tensor, op: str) -> bool:
    """True when b is a row vector to be applied to every row of matrix a."""
    if a.shape == b.shape:
        return False
    if a.data.ndim == 2 and (b.shape == (a.shape[1],) or b.shape == (1, a.shape[1])):
        return True
    raise DimensionError(f"{op}: incompatible shapes {a.shape} and {b.shape}")


def add(a: Tensor, b: Tensor) -> Tensor:
    row = _row_broadcast(a, b, "add")
    out = Tensor._result(a.data + (b.data.reshape(1, -1) if row else b.data), (a, b), "add")
    out._backward = lambda g: (g, g.sum(axis=0).reshape(b.shape) if row else g)
    return out


def sub(a: Tensor, b: Tensor) -> Tensor:
    row = _row_broadcast(a, b, "sub")
    out = Tensor._result(a.data - (b.data.reshape(1, -1) if row else b.data), (a, b), "sub")
    out._backward = lambda g: (g, -(g.sum(axis=0).reshape(b.shape) if row else g))
    return out


def scalar_mul(a: Tensor, c: float) -> Tensor:
    c = float(c)
    out = Tensor._result(a.data * c, (a,), "scalar_mul")
    out._backward = lambda g: (g * c,)
    return out


def elementwise_mul(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise DimensionError(f"elementwise_mul: shapes {a.shape} and {b.shape} differ")
    out = Tensor._result(a.data * b.data, (a, b), "elementwise_mul")
    out._backward = lambda g: (g * b.data, g * a.data)
    return out


def sum(a: Tensor, axis: int | None = None) -> Tensor:  # noqa: A001
    out = Tensor._result(np.asarray(a.data.sum(axis=axis)), (a,), "sum")

    def _backward(g):
        if axis is None:
            return (np.full(a.shape, float(g)),)
        return (np.broadcast_to(np.expand_dims(g, axis), a.shape),)
    out._backward = _backward
    return out


def mean(a: Tensor, axis: int | None = None) -> Tensor:
    n = a.size if axis is None else a.shape[axis]
    if n == 0:
        raise ContractError("mean of an empty tensor")
    return scalar_mul(sum(a, axis=axis), 1.0 / n)


def abs(a: Tensor) -> Tensor:  # noqa: A001
    out = Tensor._result(np.abs(a.data), (a,), "abs")
    out._backward = lambda g: (g * np.sign(a.data),)
    return out


def sqrt(a: Tensor) -> Tensor:
    if (a.data < 0).any():
        raise DegenerateInputError("sqrt of a negative value")
    val = np.sqrt(a.data)
    out = Tensor._result(val, (a,), "sqrt")

    def _backward(g):
        # zero subgradient at the kink
        safe = np.where(val > 0, val, 1.0)
        return (np.where(val > 0, g * 0.5 / safe, 0.0),)
    out._backward = _backward
    return out


def l2_norm(a: Tensor, axis: int | None = None) -> Tensor:
    """Euclidean norm over all entries, or along ``axis``."""
    return sqrt(sum(elementwise_mul(a, a), axis=axis))


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    out = Tensor._result(np.where(mask, a.data, 0.0), (a,), "relu")
    out._backward = lambda g: (g * mask,)
    return out


def gelu(a: Tensor) -> Tensor:
    """Exact GELU, ``0.5 x (1 + erf(x / sqrt 2))``."""
    x = a.data
    cdf = 0.5 * (1.0 + erf(x / _SQRT2))
    out = Tensor._result(x * cdf, (a,), "gelu")

    def _backward(g):
        pdf = _INV_SQRT_2PI * np.exp(-0.5 * x * x)
        return (g * (cdf + x * pdf),)
    out._backward = _backward
    return out


# -- linear algebra -----------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise DimensionError(f"matmul expects matrices, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: inner dimensions differ, {a.shape} x {b.shape}")
    out = Tensor._result(a.data @ b.data, (a, b), "matmul")

    def _backward(g):
        return (g @ b.data.T if a.requires_grad else None,
                a.data.T @ g if b.requires_grad else None)
    out._backward = _backward
    return out


def cosine_rows(a: Tensor, b: Tensor) -> Tensor:
    """Cosine similarity of every row of ``a`` with every row of ``b``.

    ``a`` is ``n x l`` (or a single length-``l`` vector), ``b`` is ``m x l``.
    Returns ``n x m`` (or length ``m`` for vector input).
    """
    vec = a.data.ndim == 1
    A = a.data.reshape(1, -1) if vec else a.data
    B = b.data
    if B.ndim != 2 or A.shape[1] != B.shape[1]:
        raise DimensionError(f"cosine_rows: shapes {a.shape} and {b.shape} are incompatible")
    na = np.sqrt((A * A).sum(axis=1))
    nb = np.sqrt((B * B).sum(axis=1))
    if (na == 0).any() or (nb == 0).any():
        raise DegenerateInputError("cosine_rows: zero-norm vector")
    Ah = A / na[:, None]
    Bh = B / nb[:, None]
    C = Ah @ Bh.T
    out = Tensor._result(C.reshape(-1) if vec else C, (a, b), "cosine_rows")

    def _backward(g):
        G = g.reshape(C.shape)
        gA = gB = None
        if a.requires_grad:
            # d/dA_i of <Ah_i, Bh_j> = (Bh_j - C_ij Ah_i) / |A_i|
            gA = ((G @ Bh - (G * C).sum(axis=1, keepdims=True) * Ah) / na[:, None]).reshape(a.shape)
        if b.requires_grad:
            gB = (G.T @ Ah - (G * C).sum(axis=0)[:, None] * Bh) / nb[:, None]
        return gA, gB
    out._backward = _backward
    return out


# -- structural ---------------------------------------------------------------

def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = list(tensors)
    if not tensors:
        raise ContractError("concat of nothing")
    try:
        data = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        raise DimensionError(f"concat: {exc}") from None
    sizes = np.cumsum([t.shape[axis] for t in tensors])[:-1]
    out = Tensor._result(data, tuple(tensors), "concat")
    out._backward = lambda g: tuple(np.split(g, sizes, axis=axis))
    return out


def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(int(s) for s in shape)
    try:
        data = a.data.reshape(shape)
    except ValueError as exc:
        raise DimensionError(f"reshape: {exc}") from None
    out = Tensor._result(data.copy(), (a,), "reshape")
    out._backward = lambda g: (g.reshape(a.shape),)
    return out


def slice_by_indices(a: Tensor, indices) -> Tensor:
    """Gather on a fixed index set; the backward pass scatters.

    * vector ``a`` with 1-D ``indices``: picks entries.
    * matrix ``a`` with 1-D ``indices``: picks rows (repeats allowed).
    * matrix ``a`` with 2-D ``indices``: picks ``indices[r]`` from row ``r``.
    """
    idx = np.asarray(indices, dtype=np.intp)
    if a.data.ndim == 2 and idx.ndim == 2:
        if idx.shape[0] != a.shape[0]:
            raise DimensionError(f"slice_by_indices: {idx.shape[0]} index rows for {a.shape[0]} rows")
        rows = np.arange(a.shape[0])[:, None]
        data = a.data[rows, idx]

        def scatter(g):
            full = np.zeros(a.shape)
            np.add.at(full, (np.broadcast_to(rows, idx.shape), idx), g)
            return full
    elif idx.ndim == 1 and a.data.ndim in (1, 2):
        if idx.size and (idx.min() < 0 or idx.max() >= a.shape[0]):
            raise ContractError("slice_by_indices: index out of range")
        data = a.data[idx]

        def scatter(g):
            full = np.zeros(a.shape)
            np.add.at(full, idx, g)
            return full
    else:
        raise DimensionError(f"slice_by_indices: unsupported shapes {a.shape} / {idx.shape}")
    out = Tensor._result(np.array(data), (a,), "slice_by_indices")
    out._backward = lambda g: (scatter(g),)
    return out


def window_mean_pool(a: Tensor, window: int) -> Tensor:
    """Average consecutive blocks of ``window`` rows: ``(n*window) x c -> n x c``."""
    if a.data.ndim != 2 or window < 1 or a.shape[0] % window:
        raise DimensionError(f"window_mean_pool: cannot pool {a.shape} with window {window}")
    n, c = a.shape[0] // window, a.shape[1]
    out = Tensor._result(a.data.reshape(n, window, c).mean(axis=1), (a,), "window_mean_pool")
    out._backward = lambda g: (np.repeat(g / window, window, axis=0),)
    return out


# -- autodiff driver ----------------------------------------------------------

def _tape(root: Tensor) -> list[Tensor]:
    """Nodes reachable from ``root`` in topological order (inputs first)."""
    order: list[Tensor] = []
    seen: set[int] = set()
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
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` on every ``requires_grad`` leaf reachable from ``loss``.

    Gradients accumulate into existing ``.grad`` arrays, so call ``zero_grad``
    on leaves between independent passes.
    """
    if loss.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    order = _tape(loss)
    pending: dict[int, np.ndarray] = {id(loss): np.ones(loss.shape)}
    for node in reversed(order):
        g = pending.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node._accumulate(g)
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            prev = pending.get(id(parent))
            pending[id(parent)] = pg if prev is None else prev + pg


def grad_check(fn: Callable[[Tensor], Tensor], point, step: float = 1e-5) -> float:
    """Max relative error between autodiff and central differences.

    ``fn`` maps a Tensor to a scalar Tensor.
    """
    x0 = np.array(point.data if isinstance(point, Tensor) else point, dtype=np.float64)
    x = Tensor(x0, requires_grad=True)
    backward(fn(x))
    analytic = np.zeros_like(x0) if x.grad is None else x.grad
    numeric = np.zeros_like(x0)
    flat = x0.reshape(-1)
    for i in range(flat.size):
        hi = flat.copy()
        lo = flat.copy()
        hi[i] += step
        lo[i] -= step
        f_hi = fn(Tensor(hi.reshape(x0.shape))).item()
        f_lo = fn(Tensor(lo.reshape(x0.shape))).item()
        numeric.reshape(-1)[i] = (f_hi - f_lo) / (2.0 * step)
    err = np.abs(analytic - numeric) / (np.abs(analytic) + np.abs(numeric) + 1e-12)
    return float(err.max()) if err.size else 0.0
