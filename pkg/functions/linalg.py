"""Dense linear algebra for the down-projection re-solve.

Matrices are 2-D float32 numpy arrays; products and Gram matrices accumulate in
float64. Solutions come back in float64 and are cast to float32 only when they are
installed into a model.
"""

import logging
from dataclasses import dataclass

import numpy as np
import numpy.typing as npt
from scipy.linalg import LinAlgError, cho_factor, cho_solve, lstsq

from functions.errors import NonConvergenceError, ShapeError, SingularSystemError

logger = logging.getLogger(__name__)

Matrix = npt.NDArray[np.float32]


@dataclass(frozen=True)
class RidgeSolution:
    weights: np.ndarray
    lam: float
    residual_frobenius: float


def as_matrix(x, dtype=np.float32) -> np.ndarray:
    m = np.asarray(x, dtype=dtype)
    if m.ndim != 2:
        raise ShapeError(f"expected a 2-D matrix, got shape {m.shape}")
    if m.shape[0] < 1 or m.shape[1] < 1:
        raise ShapeError(f"matrix must have rows >= 1 and cols >= 1, got {m.shape}")
    return m


def matmul(a, b) -> Matrix:
    a64 = as_matrix(a, np.float64)
    b64 = as_matrix(b, np.float64)
    if a64.shape[1] != b64.shape[0]:
        raise ShapeError(f"dimension mismatch: {a64.shape} x {b64.shape}")
    return (a64 @ b64).astype(np.float32)


def gram(h) -> np.ndarray:
    h64 = as_matrix(h, np.float64)
    return h64.T @ h64


def default_tolerance(g) -> float:
    g = np.asarray(g, dtype=np.float64)
    return 1e-8 * float(np.trace(g)) / g.shape[0]


def gram_is_invertible(h, tol=None):
    """Return (invertible, min_eigenvalue) for hᵀh.

    hᵀh is invertible exactly when the columns of h are linearly independent, which
    shows up as a smallest eigenvalue above tol.
    """
    g = gram(h)
    if tol is None:
        tol = default_tolerance(g)
    min_eig = float(np.linalg.eigvalsh(g)[0])
    return min_eig > tol, min_eig


def frobenius_objective(h, a, w, lam=0.0) -> float:
    h64 = as_matrix(h, np.float64)
    a64 = as_matrix(a, np.float64)
    w64 = as_matrix(w, np.float64)
    r = h64 @ w64 - a64
    return float(np.sum(r * r) + lam * np.sum(w64 * w64))


def normal_equation_residual(h, a, w, lam=0.0) -> float:
    h64 = as_matrix(h, np.float64)
    a64 = as_matrix(a, np.float64)
    w64 = as_matrix(w, np.float64)
    lhs = (h64.T @ h64) @ w64 + lam * w64
    return float(np.linalg.norm(lhs - h64.T @ a64))


def _check_pair(h, a):
    h64 = as_matrix(h, np.float64)
    a64 = as_matrix(a, np.float64)
    if h64.shape[0] != a64.shape[0]:
        raise ShapeError(f"h has {h64.shape[0]} rows but a has {a64.shape[0]}")
    return h64, a64


def ridge_solve(h, a, lam: float) -> RidgeSolution:
    """Solve (hᵀh + λI) W = hᵀa by Cholesky factorization."""
    if lam < 0:
        raise ValueError(f"lambda must be non-negative, got {lam}")
    h64, a64 = _check_pair(h, a)
    g = h64.T @ h64
    p = g.shape[0]

    if lam == 0:
        invertible, min_eig = gram_is_invertible(h64)
        if not invertible:
            raise SingularSystemError(
                f"Gram matrix is rank-deficient (min eigenvalue {min_eig:.3e}, p={p}); "
                "use lambda > 0"
            )

    system = g + lam * np.eye(p)
    try:
        factor = cho_factor(system, lower=True, check_finite=True)
    except LinAlgError as exc:
        raise SingularSystemError(f"Cholesky factorization failed for p={p}, lambda={lam}") from exc
    weights = cho_solve(factor, h64.T @ a64)

    residual = float(np.linalg.norm(h64 @ weights - a64))
    logger.debug("ridge_solve rows=%d p=%d q=%d lambda=%.3e residual=%.4e",
                 h64.shape[0], p, a64.shape[1], lam, residual)
    return RidgeSolution(weights=weights, lam=float(lam), residual_frobenius=residual)


def min_norm_solve(h, a, w0=None) -> RidgeSolution:
    """Interpolating solution closest to w0 for an underdetermined system.

    W = w0 + hᵀ(hhᵀ)⁻¹(a − h·w0); needs h to have full row rank.
    """
    h64, a64 = _check_pair(h, a)
    if w0 is None:
        w0 = np.zeros((h64.shape[1], a64.shape[1]))
    w0 = as_matrix(w0, np.float64)
    kernel = h64 @ h64.T
    try:
        factor = cho_factor(kernel, lower=True, check_finite=True)
    except LinAlgError as exc:
        raise SingularSystemError(
            f"kernel matrix hhᵀ is singular ({h64.shape[0]} rows, rank-deficient h)"
        ) from exc
    weights = w0 + h64.T @ cho_solve(factor, a64 - h64 @ w0)
    residual = float(np.linalg.norm(h64 @ weights - a64))
    return RidgeSolution(weights=weights, lam=0.0, residual_frobenius=residual)


def pinv_solve(h, a, w0=None, rcond: float = 1e-6) -> RidgeSolution:
    """Least-squares solution closest to w0 through a truncated SVD.

    Singular values below rcond·σ_max are dropped, so repeated or nearly repeated rows
    count as one constraint.
    """
    h64, a64 = _check_pair(h, a)
    if w0 is None:
        w0 = np.zeros((h64.shape[1], a64.shape[1]))
    w0 = as_matrix(w0, np.float64)
    delta, _, rank, _ = lstsq(h64, a64 - h64 @ w0, cond=rcond, lapack_driver="gelsd")
    weights = w0 + delta
    residual = float(np.linalg.norm(h64 @ weights - a64))
    logger.debug("pinv_solve rows=%d p=%d rank=%d residual=%.4e", h64.shape[0], h64.shape[1], rank, residual)
    return RidgeSolution(weights=weights, lam=0.0, residual_frobenius=residual)


def max_eigenvalue_sym(g, iters: int = 5000, tol: float = 1e-9, seed: int = 0) -> float:
    """Largest eigenvalue of a symmetric PSD matrix by power iteration."""
    g64 = as_matrix(g, np.float64)
    n = g64.shape[0]
    if g64.shape[1] != n:
        raise ShapeError(f"expected a square matrix, got {g64.shape}")
    if not np.any(g64):
        return 0.0

    rng = np.random.default_rng(seed)
    x = rng.normal(size=n)
    x /= np.linalg.norm(x)
    lam = 0.0
    for _ in range(iters):
        y = g64 @ x
        y_norm = np.linalg.norm(y)
        if y_norm == 0:
            # x fell into the null space; restart
            x = rng.normal(size=n)
            x /= np.linalg.norm(x)
            continue
        lam = float(x @ y)
        x = y / y_norm
        res = np.linalg.norm(g64 @ x - float(x @ g64 @ x) * x)
        if res <= tol * max(abs(lam), np.finfo(float).tiny):
            return max(float(x @ g64 @ x), 0.0)

    raise NonConvergenceError(
        f"power iteration did not converge in {iters} iterations (estimate {lam:.6e})",
        estimate=max(lam, 0.0),
        vector=x,
    )


def finite_diff_gradient(loss, w, eps: float = 1e-5) -> np.ndarray:
    if eps <= 0:
        raise ValueError(f"eps must be positive, got {eps}")
    w64 = as_matrix(w, np.float64)
    grad = np.zeros_like(w64)
    for i in range(w64.shape[0]):
        for j in range(w64.shape[1]):
            step = np.zeros_like(w64)
            step[i, j] = eps
            grad[i, j] = (loss(w64 + step) - loss(w64 - step)) / (2 * eps)
    return grad
