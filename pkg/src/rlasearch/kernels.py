"""Dense linear-algebra kernels with FLOP accounting.

Every kernel is a pure function of its inputs (plus an explicit seeded
generator for the stochastic ones) and charges a documented cost to the
caller's :class:`FlopCounter`.

Cost model (fixed; any consistent model suffices for the complexity
reward, and consistency is what the tests pin down):

====================  =======================================
kernel                flops
====================  =======================================
matvec                2rc
vec_mat               2rc
mat_mat               2 r c k
mat_mat (sketch S as  2 x (elements of the dense operand);
left operand)         models a fast-transform apply, cost
                      independent of the sketch row count
matvec (sketch S)     2m
add / sub             d
dot                   2d
scalar_vec            d
scalar_div            1
hhqr                  2rc^2 - (2/3)c^3
mat_inv               2c^3
triangular_solve      c^2
linear_solve          (2/3)c^3 + 2c^2
sketch generation     s * m
subsample             2 x (elements copied)
leverage weights      2mn
sigmoid               4d
elem_sqrt             d
diag_scale            rc
vec_normalize         3d
====================  =======================================
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .shapes import MAT_KIND, SCALAR_KIND, VEC_KIND, Shape, mat, scalar, vec


class KernelError(Exception):
    """Base class for kernel failures."""


class ShapeError(KernelError):
    """Operands do not unify with the kernel signature (a type error)."""


class NumericError(KernelError):
    """Non-finite values, resource-guard trips, or runtime degeneracy."""


class ParameterError(KernelError):
    """Invalid kernel parameter (sizes, weights)."""


class FactorizationError(NumericError):
    """Rank-deficient input to a factorization; carries the column index."""

    def __init__(self, message: str, column: int):
        super().__init__(message)
        self.column = column


@dataclass
class FlopCounter:
    """Monotone floating-point-operation count for one execution."""

    total: int = 0

    def add(self, flops: float) -> None:
        f = int(round(flops))
        if f < 0:
            raise ValueError("negative flop charge")
        self.total += f


@dataclass
class DenseValue:
    """Concrete carrier for scalars, vectors and matrices.

    ``data`` is float64: a () array for scalars, (d,) for vectors,
    (r, c) row-major for matrices.  ``is_sketch`` marks values produced
    by the sketch generator; products with such a value are charged at
    fast-transform rates (see module docstring).
    """

    shape: Shape
    data: np.ndarray
    is_sketch: bool = False
    _finite: Optional[bool] = None  # cached check; values are immutable

    @staticmethod
    def of(shape: Shape, data: np.ndarray, is_sketch: bool = False) -> "DenseValue":
        arr = np.asarray(data, dtype=np.float64)
        expect_ndim = {SCALAR_KIND: 0, VEC_KIND: 1, MAT_KIND: 2}[shape.kind]
        if arr.ndim != expect_ndim:
            raise ShapeError(f"{shape} carrier must have ndim {expect_ndim}, got {arr.ndim}")
        return DenseValue(shape, arr, is_sketch)

    @property
    def nelems(self) -> int:
        return int(self.data.size)

    def check_finite(self) -> None:
        if self._finite is None:
            # NaN/Inf poison the sum; a legitimately huge finite sum falls
            # through to the exact elementwise check
            s = float(np.sum(self.data))
            self._finite = math.isfinite(s) or bool(np.isfinite(self.data).all())
        if not self._finite:
            raise NumericError(f"non-finite value in {self.shape}")


def _require(cond: bool, msg: str) -> None:
    if not cond:
        raise ShapeError(msg)


def _dims(v: DenseValue) -> tuple[int, ...]:
    return v.data.shape


# ---------------------------------------------------------------------------
# arithmetic kernels


def matvec(A: DenseValue, x: DenseValue, flops: FlopCounter) -> DenseValue:
    """result[i] = sum_j A[i,j] x[j]; costs 2rc (2m for a sketch operand)."""
    _require(A.shape.kind == MAT_KIND and x.shape.kind == VEC_KIND, "matvec expects MAT, VEC")
    r, c = _dims(A)
    _require(_dims(x)[0] == c, f"matvec inner dim mismatch {c} vs {_dims(x)[0]}")
    A.check_finite()
    x.check_finite()
    out = A.data @ x.data
    flops.add(2 * c if A.is_sketch else 2 * r * c)
    return DenseValue.of(vec(A.shape.dims[0]), out)


def vec_mat(x: DenseValue, A: DenseValue, flops: FlopCounter) -> DenseValue:
    """result = A^T x for x of length r; costs 2rc."""
    _require(x.shape.kind == VEC_KIND and A.shape.kind == MAT_KIND, "vec_mat expects VEC, MAT")
    r, c = _dims(A)
    _require(_dims(x)[0] == r, f"vec_mat leading dim mismatch {r} vs {_dims(x)[0]}")
    x.check_finite()
    A.check_finite()
    out = x.data @ A.data
    flops.add(2 * r if A.is_sketch else 2 * r * c)
    return DenseValue.of(vec(A.shape.dims[1]), out)


def vec_add(a: DenseValue, b: DenseValue, flops: FlopCounter) -> DenseValue:
    return _vec_pointwise(a, b, flops, np.add)


def vec_sub(a: DenseValue, b: DenseValue, flops: FlopCounter) -> DenseValue:
    return _vec_pointwise(a, b, flops, np.subtract)


def _vec_pointwise(a: DenseValue, b: DenseValue, flops: FlopCounter, op) -> DenseValue:
    _require(a.shape.kind == VEC_KIND and b.shape.kind == VEC_KIND, "expects VEC, VEC")
    _require(_dims(a) == _dims(b), f"length mismatch {_dims(a)} vs {_dims(b)}")
    a.check_finite()
    b.check_finite()
    flops.add(a.nelems)
    return DenseValue.of(a.shape, op(a.data, b.data))


def vec_dot(a: DenseValue, b: DenseValue, flops: FlopCounter) -> DenseValue:
    _require(a.shape.kind == VEC_KIND and b.shape.kind == VEC_KIND, "dot expects VEC, VEC")
    _require(_dims(a) == _dims(b), "dot length mismatch")
    a.check_finite()
    b.check_finite()
    flops.add(2 * a.nelems)
    return DenseValue.of(scalar(), np.float64(a.data @ b.data))


def scalar_vec(c: DenseValue, x: DenseValue, flops: FlopCounter) -> DenseValue:
    _require(c.shape.kind == SCALAR_KIND and x.shape.kind == VEC_KIND, "expects SCALAR, VEC")
    c.check_finite()
    x.check_finite()
    flops.add(x.nelems)
    return DenseValue.of(x.shape, float(c.data) * x.data)


def scalar_div(a: DenseValue, b: DenseValue, flops: FlopCounter) -> DenseValue:
    _require(a.shape.kind == SCALAR_KIND and b.shape.kind == SCALAR_KIND, "expects SCALAR, SCALAR")
    a.check_finite()
    b.check_finite()
    if float(b.data) == 0.0:
        raise NumericError("scalar division by zero")
    flops.add(1)
    return DenseValue.of(scalar(), np.float64(float(a.data) / float(b.data)))


def mat_mat(A: DenseValue, B: DenseValue, flops: FlopCounter, out_shape: Shape) -> DenseValue:
    """A @ B; costs 2rck, or the fast-apply rate when A is a sketch."""
    _require(A.shape.kind == MAT_KIND and B.shape.kind == MAT_KIND, "mat_mat expects MAT, MAT")
    r, c = _dims(A)
    c2, k = _dims(B)
    _require(c == c2, f"mat_mat inner dim mismatch {c} vs {c2}")
    A.check_finite()
    B.check_finite()
    flops.add(2 * B.nelems if A.is_sketch else 2 * r * c * k)
    return DenseValue.of(out_shape, A.data @ B.data)


def mat_mat_trans(A: DenseValue, B: DenseValue, flops: FlopCounter, out_shape: Shape) -> DenseValue:
    """A @ B^T; costs 2rck."""
    _require(A.shape.kind == MAT_KIND and B.shape.kind == MAT_KIND, "expects MAT, MAT")
    r, c = _dims(A)
    k, c2 = _dims(B)
    _require(c == c2, f"mat_mat_trans trailing dim mismatch {c} vs {c2}")
    A.check_finite()
    B.check_finite()
    flops.add(2 * B.nelems if A.is_sketch else 2 * r * c * k)
    return DenseValue.of(out_shape, A.data @ B.data.T)


def mat_trans_mat(A: DenseValue, B: DenseValue, flops: FlopCounter, out_shape: Shape) -> DenseValue:
    """A^T @ B; costs 2rck."""
    _require(A.shape.kind == MAT_KIND and B.shape.kind == MAT_KIND, "expects MAT, MAT")
    r, c = _dims(A)
    r2, k = _dims(B)
    _require(r == r2, f"mat_trans_mat leading dim mismatch {r} vs {r2}")
    A.check_finite()
    B.check_finite()
    flops.add(2 * B.nelems if A.is_sketch else 2 * r * c * k)
    return DenseValue.of(out_shape, A.data.T @ B.data)


def mat_inv(A: DenseValue, flops: FlopCounter) -> DenseValue:
    _require(A.shape.kind == MAT_KIND, "mat_inv expects MAT")
    r, c = _dims(A)
    _require(r == c, f"mat_inv expects square, got {r}x{c}")
    A.check_finite()
    try:
        out = np.linalg.inv(A.data)
    except np.linalg.LinAlgError as e:
        raise NumericError(f"singular matrix in mat_inv: {e}") from None
    if not np.all(np.isfinite(out)):
        raise NumericError("non-finite inverse")
    flops.add(2 * c**3)
    return DenseValue.of(A.shape, out)


def triangular_solve(R: DenseValue, y: DenseValue, flops: FlopCounter) -> DenseValue:
    """Solve R z = y for upper-triangular R; costs c^2."""
    _require(R.shape.kind == MAT_KIND and y.shape.kind == VEC_KIND, "expects MAT, VEC")
    r, c = _dims(R)
    _require(r == c and _dims(y)[0] == c, "triangular_solve expects square system")
    R.check_finite()
    y.check_finite()
    diag = np.abs(np.diag(R.data))
    if np.any(diag < 1e-300):
        raise NumericError("zero pivot in triangular_solve")
    z = np.zeros(c)
    Rd = R.data
    for i in range(c - 1, -1, -1):
        z[i] = (y.data[i] - Rd[i, i + 1 :] @ z[i + 1 :]) / Rd[i, i]
    if not np.all(np.isfinite(z)):
        raise NumericError("non-finite triangular solve")
    flops.add(c**2)
    return DenseValue.of(y.shape, z)


def linear_solve(A: DenseValue, y: DenseValue, flops: FlopCounter) -> DenseValue:
    """General square solve; costs (2/3)c^3 + 2c^2."""
    _require(A.shape.kind == MAT_KIND and y.shape.kind == VEC_KIND, "expects MAT, VEC")
    r, c = _dims(A)
    _require(r == c and _dims(y)[0] == c, "linear_solve expects square system")
    A.check_finite()
    y.check_finite()
    try:
        z = np.linalg.solve(A.data, y.data)
    except np.linalg.LinAlgError as e:
        raise NumericError(f"singular matrix in linear_solve: {e}") from None
    if not np.all(np.isfinite(z)):
        raise NumericError("non-finite solve result")
    flops.add((2 * c**3) // 3 + 2 * c**2)
    return DenseValue.of(y.shape, z)


def sigmoid(x: DenseValue, flops: FlopCounter) -> DenseValue:
    _require(x.shape.kind == VEC_KIND, "sigmoid expects VEC")
    x.check_finite()
    z = x.data
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    flops.add(4 * x.nelems)
    return DenseValue.of(x.shape, out)


def elem_sqrt(x: DenseValue, flops: FlopCounter) -> DenseValue:
    _require(x.shape.kind == VEC_KIND, "elem_sqrt expects VEC")
    x.check_finite()
    if np.any(x.data < 0):
        raise NumericError("elem_sqrt of negative entry")
    flops.add(x.nelems)
    return DenseValue.of(x.shape, np.sqrt(x.data))


def diag_scale(w: DenseValue, A: DenseValue, flops: FlopCounter) -> DenseValue:
    """diag(w) @ A row scaling; costs rc."""
    _require(w.shape.kind == VEC_KIND and A.shape.kind == MAT_KIND, "expects VEC, MAT")
    r, c = _dims(A)
    _require(_dims(w)[0] == r, f"diag_scale length mismatch {r} vs {_dims(w)[0]}")
    w.check_finite()
    A.check_finite()
    flops.add(r * c)
    return DenseValue.of(A.shape, w.data[:, None] * A.data)


def vec_normalize(x: DenseValue, flops: FlopCounter) -> DenseValue:
    _require(x.shape.kind == VEC_KIND, "vec_normalize expects VEC")
    x.check_finite()
    nrm = float(np.linalg.norm(x.data))
    if nrm == 0.0:
        raise NumericError("cannot normalize the zero vector")
    flops.add(3 * x.nelems)
    return DenseValue.of(x.shape, x.data / nrm)


# ---------------------------------------------------------------------------
# factorization


def hhqr(A: DenseValue, flops: FlopCounter) -> tuple[DenseValue, DenseValue]:
    """Householder QR with a nonnegative R diagonal.

    Returns (Q, R) with A = QR and Q^T Q = I.  Requires r >= c and full
    numerical column rank; rank deficiency raises a FactorizationError
    carrying the offending column.  Costs 2rc^2 - (2/3)c^3.
    """
    _require(A.shape.kind == MAT_KIND, "hhqr expects MAT")
    r, c = _dims(A)
    if r < c:
        raise NumericError(f"hhqr requires rows >= cols, got {r}x{c}")
    A.check_finite()
    Q, R = np.linalg.qr(A.data)
    # fix the sign convention
    signs = np.sign(np.diag(R))
    signs[signs == 0] = 1.0
    Q = Q * signs[None, :]
    R = signs[:, None] * R
    diag = np.abs(np.diag(R))
    floor = 1e-12 * (diag.max() if diag.size else 0.0)
    bad = np.nonzero(diag <= max(floor, 1e-300))[0]
    if bad.size:
        raise FactorizationError(f"rank-deficient column {int(bad[0])} in hhqr", int(bad[0]))
    flops.add(2 * r * c**2 - (2 * c**3) // 3)
    qshape = mat(A.shape.dims[0], A.shape.dims[1])
    rshape = mat(A.shape.dims[1], A.shape.dims[1])
    return DenseValue.of(qshape, Q), DenseValue.of(rshape, R)


# ---------------------------------------------------------------------------
# randomized kernels


def sketch_matrix(rows_out: int, rows_in: int, rng: np.random.Generator,
                  flops: FlopCounter, out_shape: Shape) -> DenseValue:
    """Gaussian sketch with independent N(0, 1/s) entries.

    Deterministic given the generator state.  Generation costs s*m; the
    matrix is tagged so downstream products are charged fast-apply rates.
    """
    if rows_out <= 0 or rows_out > rows_in:
        raise ParameterError(f"sketch size must satisfy 0 < s <= m, got s={rows_out}, m={rows_in}")
    S = rng.standard_normal((rows_out, rows_in)) / math.sqrt(rows_out)
    flops.add(rows_out * rows_in)
    return DenseValue.of(out_shape, S, is_sketch=True)


def leverage_weights(A: DenseValue, flops: FlopCounter) -> DenseValue:
    """Squared row norms normalized by the squared Frobenius norm."""
    _require(A.shape.kind == MAT_KIND, "leverage_weights expects MAT")
    A.check_finite()
    r, c = _dims(A)
    row_sq = np.einsum("ij,ij->i", A.data, A.data)
    total = float(row_sq.sum())
    if total == 0.0:
        raise NumericError("degenerate leverage distribution of an all-zero matrix")
    flops.add(2 * r * c)
    return DenseValue.of(vec(A.shape.dims[0]), row_sq / total)


def draw_subsample_indices(m: int, k: int, weights: Optional[np.ndarray],
                           rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Draw k row indices and their inclusion probabilities.

    Uniform draws with k <= m are without replacement (a scaled row
    subset); weighted draws (or k > m) are i.i.d. with replacement.
    Either way rescaling rows by 1/sqrt(k p_i) gives an unbiased sketch.
    """
    if k <= 0:
        raise ParameterError(f"subsample size must be positive, got {k}")
    if weights is None:
        p = np.full(m, 1.0 / m)
        if k <= m:
            idx = rng.permutation(m)[:k]
        else:
            idx = rng.integers(0, m, size=k)
    else:
        if weights.shape != (m,):
            raise ParameterError("weights length must match row count")
        if np.any(weights < 0) or not np.isclose(weights.sum(), 1.0, atol=1e-8):
            raise ParameterError("weights must form a probability vector")
        p = weights
        idx = rng.choice(m, size=k, replace=True, p=weights)
    return idx, p[idx]


def subsample_rows(X: DenseValue, idx: np.ndarray, probs: np.ndarray,
                   flops: FlopCounter, out_shape: Shape) -> DenseValue:
    """Gather pre-drawn rows and rescale by 1/sqrt(k p_i)."""
    k = idx.shape[0]
    zero = probs <= 0
    scale = np.empty(k)
    scale[~zero] = 1.0 / np.sqrt(k * probs[~zero])
    scale[zero] = 0.0
    X.check_finite()
    if X.shape.kind == VEC_KIND:
        out = X.data[idx] * scale
    elif X.shape.kind == MAT_KIND:
        out = X.data[idx, :] * scale[:, None]
    else:
        raise ShapeError("subsample expects MAT or VEC")
    flops.add(2 * out.size)
    return DenseValue.of(out_shape, out)


# ---------------------------------------------------------------------------
# spectral estimation

CONDITION_SATURATED = 1e14


def condition_number(A: DenseValue | np.ndarray, iters: int = 100) -> float:
    """kappa = sigma_max / sigma_min via power and inverse-power iteration.

    Accurate to about 3 significant digits on generic spectra.  Returns
    the saturation sentinel 1e14 when sigma_min < 1e-14 * sigma_max.
    """
    data = A.data if isinstance(A, DenseValue) else np.asarray(A, dtype=np.float64)
    if data.ndim == 1:
        data = data[:, None]
    if not np.any(data):
        raise NumericError("condition number of a zero matrix")
    r, c = data.shape
    if r < c:
        data = data.T
        r, c = data.shape
    G = data.T @ data  # c x c Gram; singular values squared
    rng = np.random.default_rng(0)
    v = rng.standard_normal(c)
    v /= np.linalg.norm(v)
    lam_max = 0.0
    for _ in range(iters):
        w = G @ v
        nrm = np.linalg.norm(w)
        if nrm == 0.0:
            break
        v = w / nrm
        lam_max = nrm
    sigma_max = math.sqrt(lam_max)
    # inverse power iteration on the shifted Gram for sigma_min
    try:
        lu = np.linalg.cholesky(G + (1e-30 * lam_max) * np.eye(c))
    except np.linalg.LinAlgError:
        return CONDITION_SATURATED
    v = rng.standard_normal(c)
    v /= np.linalg.norm(v)
    lam_min_inv = 0.0
    for _ in range(iters):
        w = _chol_solve(lu, v)
        nrm = np.linalg.norm(w)
        if not np.isfinite(nrm) or nrm == 0.0:
            return CONDITION_SATURATED
        v = w / nrm
        lam_min_inv = nrm
    sigma_min = math.sqrt(1.0 / lam_min_inv) if lam_min_inv > 0 else 0.0
    if sigma_min < 1e-14 * sigma_max:
        return CONDITION_SATURATED
    return sigma_max / sigma_min


def _chol_solve(L: np.ndarray, y: np.ndarray) -> np.ndarray:
    z = np.linalg.solve(L, y)
    return np.linalg.solve(L.T, z)
