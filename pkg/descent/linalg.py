import numpy as np
import taichi as ti
from dataclasses import dataclass
from numpy.typing import NDArray

from .errors import DimensionMismatch, NotPositiveDefinite

# define types
DenseVector = NDArray[np.float64]
SymMatrix = NDArray[np.float64]

f64_vec = ti.types.ndarray(dtype=ti.f64, ndim=1)
f64_mat = ti.types.ndarray(dtype=ti.f64, ndim=2)


@dataclass(frozen=True, slots=True)
class SpdFactor:
    """Lower-triangular Cholesky factor L with L·Lᵀ = M."""

    lower: NDArray[np.float64]
    dim: int


# column-by-column Cholesky–Banachiewicz; returns the first failing pivot or -1
@ti.kernel
def _cholesky(a: f64_mat, low: f64_mat) -> ti.i32:
    n = a.shape[0]
    failed = -1
    ti.loop_config(serialize=True)
    for j in range(n):
        if failed < 0:
            s = a[j, j]
            for k in range(j):
                s -= low[j, k] * low[j, k]
            if s <= 0.0:
                failed = j
            else:
                d = ti.sqrt(s)
                low[j, j] = d
                for i in range(j + 1, n):
                    t = a[i, j]
                    for k in range(j):
                        t -= low[i, k] * low[j, k]
                    low[i, j] = t / d
    return failed


# L z = b
@ti.kernel
def _forward_substitution(low: f64_mat, b: f64_vec, out: f64_vec):
    n = low.shape[0]
    ti.loop_config(serialize=True)
    for i in range(n):
        s = b[i]
        for k in range(i):
            s -= low[i, k] * out[k]
        out[i] = s / low[i, i]


# Lᵀ x = z
@ti.kernel
def _backward_substitution(low: f64_mat, z: f64_vec, out: f64_vec):
    n = low.shape[0]
    ti.loop_config(serialize=True)
    for r in range(n):
        i = n - 1 - r
        s = z[i]
        for k in range(i + 1, n):
            s -= low[k, i] * out[k]
        out[i] = s / low[i, i]


def as_vector(v) -> DenseVector:
    v = np.ascontiguousarray(v, dtype=np.float64).reshape(-1)
    if v.size < 1:
        raise DimensionMismatch("vector must have at least one entry")
    return v


def as_square(M) -> SymMatrix:
    M = np.ascontiguousarray(np.atleast_2d(np.asarray(M, dtype=np.float64)))
    if M.ndim != 2 or M.shape[0] != M.shape[1]:
        raise DimensionMismatch(f"expected a square matrix, got shape {M.shape}")
    return M


def symmetrize(M) -> SymMatrix:
    """(M + Mᵀ)/2; applied where matrices are assembled, never inside solves."""
    M = as_square(M)
    return np.ascontiguousarray(0.5 * (M + M.T))


def cholesky_spd(M: SymMatrix) -> SpdFactor:
    M = as_square(M)
    if not np.all(np.isfinite(M)):
        raise NotPositiveDefinite(-1, "matrix has non-finite entries")
    low = np.zeros_like(M)
    failed = int(_cholesky(M, low))
    if failed >= 0:
        raise NotPositiveDefinite(failed)
    return SpdFactor(lower=low, dim=M.shape[0])


def spd_solve(factor: SpdFactor, b: DenseVector) -> DenseVector:
    b = as_vector(b)
    if b.shape[0] != factor.dim:
        raise DimensionMismatch(f"rhs has {b.shape[0]} entries, factor is {factor.dim}x{factor.dim}")
    z = np.empty_like(b)
    x = np.empty_like(b)
    _forward_substitution(factor.lower, b, z)
    _backward_substitution(factor.lower, z, x)
    return x


def quadratic_form(M: SymMatrix, v: DenseVector) -> float:
    M = as_square(M)
    v = as_vector(v)
    if v.shape[0] != M.shape[0]:
        raise DimensionMismatch(f"vector has {v.shape[0]} entries, matrix is {M.shape[0]}x{M.shape[0]}")
    return float(v @ (M @ v))


def add_damping(M: SymMatrix, lam: float) -> SymMatrix:
    if lam < 0:
        raise ValueError(f"damping must be non-negative, got {lam}")
    out = as_square(M).copy()
    # only the diagonal moves, so symmetry is kept bit for bit
    out[np.diag_indices_from(out)] += lam
    return out


def min_quadratic(c: float, g: DenseVector, M: SymMatrix) -> tuple[DenseVector, float]:
    """Global minimizer of f(δ) = c + gᵀδ + ½δᵀMδ for positive-definite M."""
    g = as_vector(g)
    M = as_square(M)
    if g.shape[0] != M.shape[0]:
        raise DimensionMismatch(f"gradient has {g.shape[0]} entries, matrix is {M.shape[0]}x{M.shape[0]}")
    delta = -spd_solve(cholesky_spd(M), g)
    value = float(c + g @ delta + 0.5 * (delta @ (M @ delta)))
    return delta, value
