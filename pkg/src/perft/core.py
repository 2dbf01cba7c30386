"""Dense float64 matrices with tape-free reverse-mode differentiation.

Every operation here takes and returns 2-D :class:`Matrix` objects.  Shapes
must match exactly; there is no broadcasting.  Row-wise scaling is spelled out
with :func:`scale_rows` so that mismatched compositions fail loudly instead of
silently broadcasting.
"""

from __future__ import annotations

import math
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

DTYPE = np.float64


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


class NonFiniteError(FloatingPointError):
    """Raised when an operation produces NaN or Inf."""


class Matrix:
    """A 2-D float64 array that optionally records how it was computed.

    Leaves created by the user hold parameters or constants.  Results of
    operations keep references to their parents and a closure that maps the
    upstream gradient onto each parent.
    """

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.array(data, dtype=DTYPE)
        if arr.ndim == 0:
            arr = arr.reshape(1, 1)
        elif arr.ndim == 1:
            arr = arr.reshape(1, -1)
        elif arr.ndim != 2:
            raise ShapeError(f"Matrix data must be 2-D, got {arr.ndim}-D")
        if not np.isfinite(arr).all():
            raise NonFiniteError(f"non-finite values in matrix {name or ''}".strip())
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._parents: tuple[Matrix, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None
        self.name = name

    @classmethod
    def _result(cls, data: np.ndarray, parents: Sequence["Matrix"], backward, op: str) -> "Matrix":
        if not np.isfinite(data).all():
            raise NonFiniteError(f"{op} produced non-finite values")
        out = cls.__new__(cls)
        out.data = data
        out.grad = None
        out.name = None
        out.requires_grad = any(p.requires_grad for p in parents)
        if out.requires_grad:
            out._parents = tuple(parents)
            out._backward = backward
        else:
            out._parents = ()
            out._backward = None
        return out

    # -- basic properties -------------------------------------------------
    @property
    def shape(self) -> tuple[int, int]:
        return self.data.shape  # type: ignore[return-value]

    @property
    def rows(self) -> int:
        return self.data.shape[0]

    @property
    def cols(self) -> int:
        return self.data.shape[1]

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a 1x1 matrix, got {self.shape}")
        return float(self.data[0, 0])

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def detach(self) -> "Matrix":
        return Matrix(self.data.copy())

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Matrix({self.rows}x{self.cols}{tag}, requires_grad={self.requires_grad})"

    __add__ = lambda self, other: add(self, other)  # noqa: E731
    __sub__ = lambda self, other: sub(self, other)  # noqa: E731
    __mul__ = lambda self, other: mul(self, other)  # noqa: E731
    __matmul__ = lambda self, other: matmul(self, other)  # noqa: E731

    # -- reverse pass -----------------------------------------------------
    def backward(self, grad: np.ndarray | None = None) -> None:
        """Accumulate d(self)/d(leaf) into ``leaf.grad`` for every leaf that requires it.

        Gradients are summed in reverse topological order; the traversal order is
        fixed by the order in which parents were recorded, so results are
        bit-reproducible.
        """
        if grad is None:
            if self.data.size != 1:
                raise ShapeError("backward() without a seed gradient needs a scalar output")
            grad = np.ones_like(self.data)
        if not self.requires_grad:
            return
        order = _topological(self)
        grads: dict[int, np.ndarray] = {id(self): np.asarray(grad, dtype=DTYPE)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg


def _topological(root: Matrix) -> list[Matrix]:
    order: list[Matrix] = []
    seen: set[int] = set()
    stack: list[tuple[Matrix, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in reversed(node._parents):
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def graph_leaves(root: Matrix) -> list[Matrix]:
    """Leaves with ``requires_grad`` that ``root`` depends on, in discovery order."""
    return [n for n in _topological(root) if n._backward is None]


def _as_matrix(x) -> Matrix:
    return x if isinstance(x, Matrix) else Matrix(x)


def _same_shape(op: str, a: Matrix, b: Matrix) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


# -- elementwise ------------------------------------------------------------

def add(a: Matrix, b: Matrix) -> Matrix:
    a, b = _as_matrix(a), _as_matrix(b)
    _same_shape("add", a, b)
    return Matrix._result(a.data + b.data, (a, b), lambda g: (g, g), "add")


def sub(a: Matrix, b: Matrix) -> Matrix:
    a, b = _as_matrix(a), _as_matrix(b)
    _same_shape("sub", a, b)
    return Matrix._result(a.data - b.data, (a, b), lambda g: (g, -g), "sub")


def mul(a: Matrix, b: Matrix) -> Matrix:
    """Element-wise (Hadamard) product."""
    a, b = _as_matrix(a), _as_matrix(b)
    _same_shape("mul", a, b)
    ad, bd = a.data, b.data
    return Matrix._result(ad * bd, (a, b), lambda g: (g * bd, g * ad), "mul")


def scale(a: Matrix, c: float) -> Matrix:
    c = float(c)
    return Matrix._result(a.data * c, (a,), lambda g: (g * c,), "scale")


def square(a: Matrix) -> Matrix:
    ad = a.data
    return Matrix._result(ad * ad, (a,), lambda g: (2.0 * ad * g,), "square")


def reciprocal(a: Matrix) -> Matrix:
    out = 1.0 / a.data
    return Matrix._result(out, (a,), lambda g: (-g * out * out,), "reciprocal")


def sigmoid_np(x: np.ndarray) -> np.ndarray:
    # split by sign so exp never overflows
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def silu(a: Matrix) -> Matrix:
    """x * sigmoid(x), element-wise."""
    x = a.data
    s = sigmoid_np(x)
    return Matrix._result(x * s, (a,), lambda g: (g * s * (1.0 + x * (1.0 - s)),), "silu")


# -- structural ---------------------------------------------------------------

def matmul(a: Matrix, b: Matrix) -> Matrix:
    a, b = _as_matrix(a), _as_matrix(b)
    if a.cols != b.rows:
        raise ShapeError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    ad, bd = a.data, b.data
    return Matrix._result(ad @ bd, (a, b), lambda g: (g @ bd.T, ad.T @ g), "matmul")


def transpose(a: Matrix) -> Matrix:
    return Matrix._result(a.data.T.copy(), (a,), lambda g: (g.T,), "transpose")


def take_rows(a: Matrix, idx) -> Matrix:
    idx = np.asarray(idx, dtype=np.intp)
    n = a.rows

    def back(g):
        out = np.zeros((n, g.shape[1]), dtype=DTYPE)
        np.add.at(out, idx, g)
        return (out,)

    return Matrix._result(a.data[idx], (a,), back, "take_rows")


def take_cols(a: Matrix, idx) -> Matrix:
    idx = np.asarray(idx, dtype=np.intp)
    n = a.cols

    def back(g):
        out = np.zeros((g.shape[0], n), dtype=DTYPE)
        np.add.at(out.T, idx, g.T)
        return (out,)

    return Matrix._result(a.data[:, idx], (a,), back, "take_cols")


def scatter_rows(a: Matrix, idx, n_rows: int) -> Matrix:
    """Place the rows of ``a`` at positions ``idx`` of an ``n_rows`` zero matrix (summing repeats)."""
    idx = np.asarray(idx, dtype=np.intp)
    if len(idx) != a.rows:
        raise ShapeError(f"scatter_rows: {len(idx)} indices for {a.rows} rows")
    out = np.zeros((n_rows, a.cols), dtype=DTYPE)
    np.add.at(out, idx, a.data)
    return Matrix._result(out, (a,), lambda g: (g[idx],), "scatter_rows")


def pick(a: Matrix, cols) -> Matrix:
    """Select ``a[i, cols[i]]`` for every row; returns rows x 1."""
    cols = np.asarray(cols, dtype=np.intp)
    if len(cols) != a.rows:
        raise ShapeError(f"pick: {len(cols)} indices for {a.rows} rows")
    rows = np.arange(a.rows)
    shape = a.shape

    def back(g):
        out = np.zeros(shape, dtype=DTYPE)
        out[rows, cols] = g[:, 0]
        return (out,)

    return Matrix._result(a.data[rows, cols].reshape(-1, 1), (a,), back, "pick")


def scale_rows(a: Matrix, col: Matrix) -> Matrix:
    """Multiply row ``i`` of ``a`` by the scalar ``col[i, 0]``."""
    if col.shape != (a.rows, 1):
        raise ShapeError(f"scale_rows: need a {(a.rows, 1)} column, got {col.shape}")
    ad, cd = a.data, col.data
    return Matrix._result(
        ad * cd, (a, col), lambda g: (g * cd, (g * ad).sum(axis=1, keepdims=True)), "scale_rows"
    )


def row_sum(a: Matrix) -> Matrix:
    cols = a.cols
    return Matrix._result(
        a.data.sum(axis=1, keepdims=True), (a,), lambda g: (np.repeat(g, cols, axis=1),), "row_sum"
    )


def sum_all(a: Matrix) -> Matrix:
    shape = a.shape
    return Matrix._result(
        np.array([[a.data.sum()]]), (a,), lambda g: (np.full(shape, g[0, 0]),), "sum_all"
    )


def mean_all(a: Matrix) -> Matrix:
    return scale(sum_all(a), 1.0 / a.data.size)


# -- normalisations -------------------------------------------------------------

def softmax(a: Matrix, mask: np.ndarray | None = None) -> Matrix:
    """Row-wise softmax with max subtraction.

    ``mask`` (boolean, same shape) marks admissible entries; masked-out entries
    get probability exactly 0.  Every row needs at least one admissible entry.
    """
    x = a.data
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        if mask.shape != x.shape:
            raise ShapeError(f"softmax: mask {mask.shape} vs input {x.shape}")
        if not mask.any(axis=1).all():
            raise ValueError("softmax: a row has no admissible entries")
        x = np.where(mask, x, -np.inf)
    m = x.max(axis=1, keepdims=True)
    e = np.exp(x - m)
    p = e / e.sum(axis=1, keepdims=True)

    def back(g):
        return (p * (g - (g * p).sum(axis=1, keepdims=True)),)

    return Matrix._result(p, (a,), back, "softmax")


def logsumexp(a: Matrix) -> Matrix:
    """Row-wise log-sum-exp, rows x 1."""
    x = a.data
    m = x.max(axis=1, keepdims=True)
    e = np.exp(x - m)
    s = e.sum(axis=1, keepdims=True)
    p = e / s
    return Matrix._result(m + np.log(s), (a,), lambda g: (g * p,), "logsumexp")


def rms_norm(a: Matrix, eps: float = 1e-6) -> Matrix:
    """Scale each row to unit root-mean-square (no learned gain)."""
    x = a.data
    d = x.shape[1]
    r = np.sqrt((x * x).mean(axis=1, keepdims=True) + eps)
    y = x / r

    def back(g):
        return ((g - y * (g * y).sum(axis=1, keepdims=True) / d) / r,)

    return Matrix._result(y, (a,), back, "rms_norm")


# -- non-differentiable helpers --------------------------------------------------

def softmax_np(v) -> np.ndarray:
    v = np.asarray(v, dtype=DTYPE)
    e = np.exp(v - v.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def top_k(v, k: int) -> tuple[list[int], list[float]]:
    """Indices and values of the ``k`` largest entries of a 1-D vector.

    Ties go to the lowest index.  Indices come back in ascending order.
    """
    v = np.asarray(v, dtype=DTYPE).ravel()
    if not 1 <= k <= v.size:
        raise ValueError(f"top_k: k={k} outside [1, {v.size}]")
    chosen = np.sort(np.argsort(-v, kind="stable")[:k])
    return chosen.tolist(), v[chosen].tolist()


def top_k_rows(x: np.ndarray, k: int) -> np.ndarray:
    """Row-wise :func:`top_k` indices as an (n, k) int array."""
    x = np.asarray(x, dtype=DTYPE)
    if not 1 <= k <= x.shape[1]:
        raise ValueError(f"top_k: k={k} outside [1, {x.shape[1]}]")
    return np.sort(np.argsort(-x, axis=1, kind="stable")[:, :k], axis=1)


# -- randomness & init -------------------------------------------------------------

def _label_key(label) -> int:
    if isinstance(label, (int, np.integer)):
        return int(label) & 0xFFFFFFFF
    return zlib.crc32(str(label).encode())


class Rng:
    """Seeded PCG64 stream; ``child`` derives independent, label-addressed substreams."""

    def __init__(self, seed: int, _key: tuple[int, ...] = ()):
        self.seed = int(seed)
        self.key = _key
        self._gen = np.random.Generator(np.random.PCG64(np.random.SeedSequence(self.seed, spawn_key=_key)))

    def child(self, *labels) -> "Rng":
        return Rng(self.seed, self.key + tuple(_label_key(x) for x in labels))

    def normal(self, shape, std: float = 1.0) -> np.ndarray:
        return self._gen.standard_normal(shape) * std

    def uniform(self, shape, bound: float = 1.0) -> np.ndarray:
        return self._gen.uniform(-bound, bound, shape)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)

    def integers(self, low: int, high: int, size=None):
        return self._gen.integers(low, high, size)

    def random(self, shape) -> np.ndarray:
        return self._gen.random(shape)


def init_matrix(rows: int, cols: int, scheme: str, rng: Rng | None = None, *,
                std: float = 1.0, bound: float = 1.0, requires_grad: bool = False,
                name: str | None = None) -> Matrix:
    """Create a ``rows x cols`` matrix: ``zeros``, ``scaled_normal`` or ``scaled_uniform``."""
    if rows < 1 or cols < 1:
        raise ValueError(f"init_matrix: dims must be positive, got {rows}x{cols}")
    if scheme == "zeros":
        data = np.zeros((rows, cols))
    elif scheme == "scaled_normal":
        data = rng.normal((rows, cols), std)
    elif scheme == "scaled_uniform":
        data = rng.uniform((rows, cols), bound)
    else:
        raise ValueError(f"unknown init scheme {scheme!r}")
    return Matrix(data, requires_grad=requires_grad, name=name)


# -- finite-difference verification ---------------------------------------------------

@dataclass
class GradCheckReport:
    max_rel_error: float
    max_abs_error: float
    tol: float
    passed: bool
    per_param: list[float] = field(default_factory=list)


def grad_check(f: Callable[[], Matrix], params: Sequence[Matrix], eps: float = 1e-5,
               tol: float = 1e-6, floor: float = 1e-2) -> GradCheckReport:
    """Compare reverse-mode gradients of scalar ``f()`` with central differences.

    The relative error of a coordinate is ``|a - n| / max(|a|, |n|, floor)``, so
    coordinates whose true derivative is far below ``floor`` are judged on
    absolute error.  ``requires_grad`` is switched on for ``params`` for the
    duration of the check and restored afterwards.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    saved = [p.requires_grad for p in params]
    try:
        for p in params:
            p.requires_grad = True
            p.grad = None
        out = f()
        if not math.isfinite(out.item()):
            raise NonFiniteError("grad_check: non-finite loss")
        out.backward()
        analytic = [p.grad.copy() if p.grad is not None else np.zeros_like(p.data) for p in params]
        worst_rel, worst_abs, per_param = 0.0, 0.0, []
        for p, ga in zip(params, analytic):
            flat = p.data.reshape(-1)
            gflat = ga.reshape(-1)
            p_worst = 0.0
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + eps
                fp = _scalar(f)
                flat[i] = orig - eps
                fm = _scalar(f)
                flat[i] = orig
                num = (fp - fm) / (2.0 * eps)
                err = abs(num - gflat[i])
                rel = err / max(abs(num), abs(gflat[i]), floor)
                worst_abs = max(worst_abs, err)
                p_worst = max(p_worst, rel)
            per_param.append(p_worst)
            worst_rel = max(worst_rel, p_worst)
    finally:
        for p, s in zip(params, saved):
            p.requires_grad = s
            p.grad = None
    return GradCheckReport(worst_rel, worst_abs, tol, worst_rel <= tol, per_param)


def _scalar(f) -> float:
    v = f()
    v = v.item() if isinstance(v, Matrix) else float(v)
    if not math.isfinite(v):
        raise NonFiniteError("grad_check: non-finite loss")
    return v


# -- PMAT binary dumps -------------------------------------------------------------------

PMAT_MAGIC = b"PMAT"
_HEADER = struct.Struct("<4sII")


def dump_matrix(m: Matrix | np.ndarray, path) -> None:
    """Write ``PMAT`` + u32 rows + u32 cols + row-major little-endian float64 data."""
    data = m.data if isinstance(m, Matrix) else np.asarray(m, dtype=DTYPE)
    rows, cols = data.shape
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(PMAT_MAGIC, rows, cols))
        fh.write(np.ascontiguousarray(data, dtype="<f8").tobytes())


def load_matrix(path, requires_grad: bool = False) -> Matrix:
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        raise ValueError(f"{path}: truncated PMAT header")
    magic, rows, cols = _HEADER.unpack_from(raw)
    if magic != PMAT_MAGIC:
        raise ValueError(f"{path}: bad magic {magic!r}")
    body = raw[_HEADER.size:]
    if len(body) != rows * cols * 8:
        raise ValueError(f"{path}: expected {rows * cols} values, found {len(body) // 8}")
    data = np.frombuffer(body, dtype="<f8").reshape(rows, cols).astype(DTYPE)
    return Matrix(data, requires_grad=requires_grad)


def zeros(rows: int, cols: int) -> Matrix:
    return Matrix(np.zeros((rows, cols)))


def constant(data: Iterable) -> Matrix:
    return Matrix(np.asarray(data, dtype=DTYPE))
