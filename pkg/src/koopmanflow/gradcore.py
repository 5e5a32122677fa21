"""Dense float64 tensors with a reverse-mode gradient tape.

The op set is deliberately small: exactly what the backbone and the losses
need. Elementwise ops broadcast only scalar-vs-tensor or equal shapes; any
other shape coupling goes through a dedicated structural op (bias_add,
expand, narrow, concat, ...) so mismatches fail loudly.

Ops record onto the innermost active ``Tape`` (a ``with`` context). Outside any
tape they run as plain numpy, which is the no-grad path used for teacher
evaluations and deployment forwards.
"""

from __future__ import annotations

import threading
from functools import lru_cache
from typing import Callable, Sequence

import numpy as np
from scipy.linalg import cho_factor, cho_solve as _scipy_cho_solve

from . import kernels
from .errors import ContractError, DimensionError, NumericError

_tls = threading.local()


def _tape_stack() -> list:
    stack = getattr(_tls, "stack", None)
    if stack is None:
        stack = []
        _tls.stack = stack
    return stack


def active_tape():
    stack = _tape_stack()
    return stack[-1] if stack else None


class _Record:
    __slots__ = ("name", "inputs", "output", "backward")

    def __init__(self, name, inputs, output, backward):
        self.name = name
        self.inputs = inputs
        self.output = output
        self.backward = backward


class Tape:
    """Ordered log of recorded ops; one reverse sweep populates grads.

    An op's inputs are always recorded before the op itself, so a single
    reversed traversal is a valid topological order. Repeated ``backward``
    calls without ``zero_grad`` accumulate into ``.grad``.
    """

    def __init__(self):
        self._records: list[_Record] = []
        self._output_ids: set[int] = set()
        self._leaves: dict[int, "DiffTensor"] = {}

    def __enter__(self) -> "Tape":
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc) -> bool:
        _tape_stack().pop()
        return False

    def __len__(self) -> int:
        return len(self._records)

    @property
    def records(self) -> tuple:
        return tuple(self._records)

    def record(self, name: str, inputs: Sequence, output: "DiffTensor",
               backward: Callable[[np.ndarray], Sequence]) -> None:
        output._needs_grad = True
        self._records.append(_Record(name, tuple(inputs), output, backward))
        self._output_ids.add(id(output))
        for t in inputs:
            if isinstance(t, DiffTensor) and t.requires_grad:
                self._leaves[id(t)] = t

    def backward(self, loss: "DiffTensor") -> None:
        if not isinstance(loss, DiffTensor) or loss.data.shape != ():
            raise ContractError("backward expects a scalar DiffTensor loss")
        if id(loss) not in self._output_ids:
            raise ContractError("loss is not connected to this tape")
        grads: dict[int, np.ndarray] = {id(loss): np.ones(())}
        for rec in reversed(self._records):
            g = grads.pop(id(rec.output), None)
            if g is None:
                continue
            for t, ig in zip(rec.inputs, rec.backward(g)):
                if ig is None or not isinstance(t, DiffTensor) or not t._needs_grad:
                    continue
                key = id(t)
                if key in grads:
                    grads[key] = grads[key] + ig
                else:
                    grads[key] = ig
        for key, t in self._leaves.items():
            g = grads.get(key)
            if g is None:
                continue
            g = np.asarray(g, dtype=np.float64).reshape(t.data.shape)
            t.grad = g.copy() if t.grad is None else t.grad + g


class DiffTensor:
    """Dense float64 value with an optional same-shape gradient buffer.

    Value-semantic: construction copies, and op outputs own fresh arrays.
    NaN/Inf are rejected at creation and after every op.
    """

    __slots__ = ("data", "requires_grad", "grad", "_needs_grad")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.array(data, dtype=np.float64)
        if not np.isfinite(arr.sum()):  # one pass; any nan/inf poisons the sum
            raise NumericError("non-finite values at tensor creation")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._needs_grad = bool(requires_grad)

    @classmethod
    def _wrap(cls, arr: np.ndarray) -> "DiffTensor":
        out = object.__new__(cls)
        out.data = arr
        out.requires_grad = False
        out.grad = None
        out._needs_grad = False
        return out

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError("item() expects a single-element tensor")
        return float(self.data.reshape(()))

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"DiffTensor(shape={self.data.shape}{flag})"

    # operator sugar -------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def as_tensor(x) -> DiffTensor:
    if isinstance(x, DiffTensor):
        return x
    return DiffTensor(np.asarray(x, dtype=np.float64))


def param(data) -> DiffTensor:
    return DiffTensor(data, requires_grad=True)


def _apply(name: str, inputs: Sequence, out_data: np.ndarray,
           backward: Callable[[np.ndarray], Sequence]) -> DiffTensor:
    if not np.isfinite(out_data.sum()):
        raise NumericError(f"{name}: non-finite result")
    out = DiffTensor._wrap(np.asarray(out_data, dtype=np.float64))
    tape = active_tape()
    if tape is not None and any(
        isinstance(t, DiffTensor) and t._needs_grad for t in inputs
    ):
        tape.record(name, inputs, out, backward)
    return out


def _swap(a: np.ndarray) -> np.ndarray:
    return np.swapaxes(a, -1, -2)


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a: DiffTensor, b: DiffTensor) -> DiffTensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError("matmul expects tensors of rank >= 2")
    if a.shape[-1] != b.shape[-2] or a.shape[:-2] != b.shape[:-2]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data

    def backward(g):
        return g @ _swap(bd), _swap(ad) @ g

    return _apply("matmul", (a, b), ad @ bd, backward)


def spd_solve(A: DiffTensor, B: DiffTensor) -> DiffTensor:
    """Solve A X = B for symmetric positive definite A via Cholesky.

    Backward uses the implicit rule: grad_B = A^-1 g, grad_A = -grad_B X^T.
    """
    A, B = as_tensor(A), as_tensor(B)
    if A.ndim != 2 or A.shape[0] != A.shape[1]:
        raise DimensionError("spd_solve expects a square 2-D matrix A")
    if B.ndim != 2 or B.shape[0] != A.shape[0]:
        raise DimensionError(f"spd_solve shape mismatch: {A.shape} vs {B.shape}")
    if not np.all(np.isfinite(A.data)) or not np.all(np.isfinite(B.data)):
        raise NumericError("spd_solve: non-finite input")
    if np.max(np.abs(A.data - A.data.T)) > 1e-8:
        raise ContractError("spd_solve: matrix is not symmetric within 1e-8")
    try:
        factor = cho_factor(A.data, lower=True)
    except np.linalg.LinAlgError as exc:
        raise NumericError(f"spd_solve: factorization failed ({exc})") from exc
    X = _scipy_cho_solve(factor, B.data)

    def backward(g):
        gB = _scipy_cho_solve(factor, g)
        return -gB @ X.T, gB

    return _apply("spd_solve", (A, B), X, backward)


def spd_solve_batch(A: DiffTensor, B: DiffTensor) -> DiffTensor:
    """Batched spd_solve over a leading stack axis (kernels backend)."""
    A, B = as_tensor(A), as_tensor(B)
    if A.ndim != 3 or A.shape[-1] != A.shape[-2]:
        raise DimensionError("spd_solve_batch expects a [n,d,d] stack")
    if B.ndim != 3 or B.shape[0] != A.shape[0] or B.shape[1] != A.shape[1]:
        raise DimensionError(
            f"spd_solve_batch shape mismatch: {A.shape} vs {B.shape}"
        )
    if np.max(np.abs(A.data - _swap(A.data))) > 1e-8:
        raise ContractError("spd_solve_batch: matrices not symmetric within 1e-8")
    Ad = A.data
    try:
        X = kernels.cho_solve_batch(Ad, B.data)
    except np.linalg.LinAlgError as exc:
        raise NumericError(f"spd_solve_batch: factorization failed ({exc})") from exc

    def backward(g):
        gB = kernels.cho_solve_batch(Ad, np.ascontiguousarray(g))
        return -gB @ _swap(X), gB

    return _apply("spd_solve_batch", (A, B), X, backward)


def truncated_svd(X, rank: int):
    """Thin SVD truncated to ``rank``; inference-only, never on the tape."""
    arr = X.data if isinstance(X, DiffTensor) else np.asarray(X, dtype=np.float64)
    if arr.ndim != 2:
        raise DimensionError("truncated_svd expects a 2-D matrix")
    if rank < 0 or rank > min(arr.shape):
        raise ContractError(f"rank {rank} out of range for shape {arr.shape}")
    try:
        U, s, Vt = np.linalg.svd(arr, full_matrices=False)
    except np.linalg.LinAlgError as exc:
        raise NumericError(f"truncated_svd: SVD failed ({exc})") from exc
    return U[:, :rank], s[:rank], Vt[:rank].T


# ---------------------------------------------------------------------------
# elementwise


def _binary(name, a, b, fwd, back_a, back_b):
    a, b = as_tensor(a), as_tensor(b)
    a_scalar, b_scalar = a.data.shape == (), b.data.shape == ()
    if not (a.shape == b.shape or a_scalar or b_scalar):
        raise DimensionError(
            f"{name}: shapes {a.shape} and {b.shape} are neither equal nor scalar"
        )
    ad, bd = a.data, b.data

    def backward(g):
        ga = back_a(g, ad, bd)
        gb = back_b(g, ad, bd)
        if a_scalar and ga is not None:
            ga = np.asarray(ga).sum()
        if b_scalar and gb is not None:
            gb = np.asarray(gb).sum()
        return ga, gb

    return _apply(name, (a, b), fwd(ad, bd), backward)


def add(a, b) -> DiffTensor:
    return _binary("add", a, b, lambda x, y: x + y,
                   lambda g, x, y: g, lambda g, x, y: g)


def sub(a, b) -> DiffTensor:
    return _binary("sub", a, b, lambda x, y: x - y,
                   lambda g, x, y: g, lambda g, x, y: -g)


def mul(a, b) -> DiffTensor:
    return _binary("mul", a, b, lambda x, y: x * y,
                   lambda g, x, y: g * y, lambda g, x, y: g * x)


def scale(x, c: float) -> DiffTensor:
    x = as_tensor(x)
    c = float(c)
    return _apply("scale", (x,), x.data * c, lambda g: (g * c,))


def mul_const(x, c: np.ndarray) -> DiffTensor:
    """Multiply by a constant array broadcastable up to x's shape."""
    x = as_tensor(x)
    c = np.asarray(c, dtype=np.float64)
    if np.broadcast_shapes(c.shape, x.shape) != x.shape:
        raise DimensionError(f"mul_const: {c.shape} does not broadcast to {x.shape}")
    return _apply("mul_const", (x,), x.data * c, lambda g: (g * c,))


def abs_(x) -> DiffTensor:
    x = as_tensor(x)
    xd = x.data
    # subgradient at 0 is 0 (sign(0) == 0)
    return _apply("abs", (x,), np.abs(xd), lambda g: (g * np.sign(xd),))


def square(x) -> DiffTensor:
    x = as_tensor(x)
    xd = x.data
    return _apply("square", (x,), xd * xd, lambda g: (2.0 * g * xd,))


def relu(x) -> DiffTensor:
    x = as_tensor(x)
    xd = x.data
    return _apply("relu", (x,), np.maximum(xd, 0.0), lambda g: (g * (xd > 0),))


def tanh(x) -> DiffTensor:
    x = as_tensor(x)
    y = np.tanh(x.data)
    return _apply("tanh", (x,), y, lambda g: (g * (1.0 - y * y),))


def silu(x) -> DiffTensor:
    x = as_tensor(x)
    xd = x.data
    sig = 1.0 / (1.0 + np.exp(-xd))
    return _apply("silu", (x,), xd * sig,
                  lambda g: (g * sig * (1.0 + xd * (1.0 - sig)),))


def bias_add(x, b) -> DiffTensor:
    x, b = as_tensor(x), as_tensor(b)
    if b.ndim != 1 or x.shape[-1] != b.shape[0]:
        raise DimensionError(f"bias_add: {x.shape} with bias {b.shape}")
    width = b.shape[0]

    def backward(g):
        return g, g.reshape(-1, width).sum(axis=0)

    return _apply("bias_add", (x, b), x.data + b.data, backward)


# ---------------------------------------------------------------------------
# normalization and attention primitives


def layer_norm(x, eps: float = 1e-5) -> DiffTensor:
    """Zero-mean unit-variance over the last dim; no learned affine."""
    x = as_tensor(x)
    if x.ndim < 1 or x.shape[-1] < 1:
        raise DimensionError("layer_norm expects a non-empty last dimension")
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    var = ((xd - mu) ** 2).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    y = (xd - mu) * inv

    def backward(g):
        gm = g.mean(axis=-1, keepdims=True)
        gym = (g * y).mean(axis=-1, keepdims=True)
        return (inv * (g - gm - y * gym),)

    return _apply("layer_norm", (x,), y, backward)


def softmax_lastdim(x) -> DiffTensor:
    x = as_tensor(x)
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return _apply("softmax", (x,), y, backward)


def l2_normalize_lastdim(x, eps: float = 1e-12) -> DiffTensor:
    """x / sqrt(|x|^2 + eps) over the last dim (zero vectors stay finite)."""
    x = as_tensor(x)
    xd = x.data
    n2 = (xd * xd).sum(axis=-1, keepdims=True) + eps
    inv = 1.0 / np.sqrt(n2)
    y = xd * inv

    def backward(g):
        dots = (g * xd).sum(axis=-1, keepdims=True)
        return (g * inv - xd * (dots * inv / n2),)

    return _apply("l2_normalize", (x,), y, backward)


# ---------------------------------------------------------------------------
# real DFT pair.
#
# Desk-scale sequence lengths make an explicit O(T^2) basis-matrix transform
# the right tool: it is exactly linear, its adjoint is the transposed basis,
# and the summation form doubles as its own test oracle.


@lru_cache(maxsize=32)
def _dft_mats(T: int):
    k = np.arange(T // 2 + 1)[:, None]
    n = np.arange(T)[None, :]
    ang = 2.0 * np.pi * k * n / T
    return np.cos(ang), -np.sin(ang)


@lru_cache(maxsize=32)
def _idft_mats(T: int):
    C, S = _dft_mats(T)
    w = np.full(T // 2 + 1, 2.0 / T)
    w[0] = 1.0 / T
    if T % 2 == 0:
        w[-1] = 1.0 / T
    return C * w[:, None], S * w[:, None]


def rfft_axis(x, axis: int = -1) -> DiffTensor:
    """Real DFT along ``axis``; returns [..., bin, (re, im)] with the
    transformed axis moved to the bin position."""
    x = as_tensor(x)
    T = x.shape[axis]
    if T < 2:
        raise DimensionError("rfft_axis needs at least 2 samples")
    C, S = _dft_mats(T)
    xm = np.moveaxis(x.data, axis, -1)
    out = np.stack([xm @ C.T, xm @ S.T], axis=-1)

    def backward(g):
        gm = g[..., 0] @ C + g[..., 1] @ S
        return (np.moveaxis(gm, -1, axis),)

    return _apply("rfft", (x,), out, backward)


def irfft_axis(y, n: int, axis: int = -1) -> DiffTensor:
    """Inverse of rfft_axis: [..., bin, (re, im)] back to ``n`` samples at
    position ``axis``."""
    y = as_tensor(y)
    if y.ndim < 2 or y.shape[-1] != 2 or y.shape[-2] != n // 2 + 1:
        raise DimensionError(
            f"irfft_axis: spectrum shape {y.shape} does not match n={n}"
        )
    A, B = _idft_mats(n)
    xm = y.data[..., 0] @ A + y.data[..., 1] @ B
    out = np.moveaxis(xm, -1, axis)

    def backward(g):
        gm = np.moveaxis(g, axis, -1)
        return (np.stack([gm @ A.T, gm @ B.T], axis=-1),)

    return _apply("irfft", (y,), out, backward)


# ---------------------------------------------------------------------------
# structural ops


def reshape(x, shape) -> DiffTensor:
    x = as_tensor(x)
    shape = tuple(int(s) for s in shape)
    if int(np.prod(shape)) != x.size:
        raise DimensionError(f"reshape: cannot view {x.shape} as {shape}")
    orig = x.shape
    return _apply("reshape", (x,), x.data.reshape(shape),
                  lambda g: (g.reshape(orig),))


def transpose(x, axes) -> DiffTensor:
    x = as_tensor(x)
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _apply("transpose", (x,), np.ascontiguousarray(x.data.transpose(axes)),
                  lambda g: (g.transpose(inv),))


def narrow(x, axis: int, start: int, length: int) -> DiffTensor:
    x = as_tensor(x)
    axis = axis % x.ndim
    if start < 0 or length < 0 or start + length > x.shape[axis]:
        raise DimensionError(
            f"narrow: [{start}:{start + length}] out of bounds for axis "
            f"{axis} of {x.shape}"
        )
    idx = tuple(
        slice(start, start + length) if a == axis else slice(None)
        for a in range(x.ndim)
    )
    full_shape = x.shape

    def backward(g):
        z = np.zeros(full_shape)
        z[idx] = g
        return (z,)

    return _apply("narrow", (x,), x.data[idx].copy(), backward)


def concat(parts: Sequence, axis: int) -> DiffTensor:
    parts = [as_tensor(p) for p in parts]
    if not parts:
        raise DimensionError("concat of zero tensors")
    axis = axis % parts[0].ndim
    sizes = [p.shape[axis] for p in parts]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.ascontiguousarray(piece)
                     for piece in np.split(g, splits, axis=axis))

    return _apply("concat", tuple(parts),
                  np.concatenate([p.data for p in parts], axis=axis), backward)


def index_select(x, indices) -> DiffTensor:
    """Gather rows along axis 0; backward scatter-adds."""
    x = as_tensor(x)
    idx = np.asarray(indices, dtype=np.intp)
    if idx.ndim != 1:
        raise DimensionError("index_select expects a 1-D index array")
    if idx.size and (idx.min() < 0 or idx.max() >= x.shape[0]):
        raise DimensionError("index_select: index out of range")
    full_shape = x.shape

    def backward(g):
        z = np.zeros(full_shape)
        np.add.at(z, idx, g)
        return (z,)

    return _apply("index_select", (x,), x.data[idx].copy(), backward)


def expand(x, shape) -> DiffTensor:
    """Broadcast size-1 axes up to ``shape`` (same rank, explicit)."""
    x = as_tensor(x)
    shape = tuple(int(s) for s in shape)
    if len(shape) != x.ndim:
        raise DimensionError(f"expand: rank mismatch {x.shape} -> {shape}")
    grown = []
    for a, (have, want) in enumerate(zip(x.shape, shape)):
        if have != want:
            if have != 1:
                raise DimensionError(f"expand: axis {a} is {have}, not 1")
            grown.append(a)
    grown = tuple(grown)

    def backward(g):
        return (g.sum(axis=grown, keepdims=True) if grown else g,)

    return _apply("expand", (x,), np.broadcast_to(x.data, shape).copy(), backward)


# ---------------------------------------------------------------------------
# reductions


def sum_all(x) -> DiffTensor:
    x = as_tensor(x)
    shape = x.shape
    return _apply("sum_all", (x,), np.asarray(x.data.sum()),
                  lambda g: (np.full(shape, float(g)),))


def mean_all(x) -> DiffTensor:
    x = as_tensor(x)
    shape, n = x.shape, x.size
    return _apply("mean_all", (x,), np.asarray(x.data.mean()),
                  lambda g: (np.full(shape, float(g) / n),))


def mean_axis(x, axis: int) -> DiffTensor:
    """Mean over one axis, keepdims=True."""
    x = as_tensor(x)
    axis = axis % x.ndim
    n = x.shape[axis]
    shape = x.shape

    def backward(g):
        return (np.broadcast_to(g / n, shape).copy(),)

    return _apply("mean_axis", (x,), x.data.mean(axis=axis, keepdims=True), backward)
