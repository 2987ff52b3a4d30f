import numpy as np
from scipy.linalg import LinAlgError, cho_solve, cholesky

# Relative pivot threshold for the positive definiteness test
PIVOT_THRESHOLD = 1e-12

# Relative tolerance for the symmetry check
SYMMETRY_TOLERANCE = 1e-12


class ShapeException(Exception):
    pass


class NotPositiveDefiniteException(Exception):
    pass


def symmetrize(mat: np.ndarray) -> np.ndarray:
    return (mat + mat.T) / 2


def cholesky_lower(mat: np.ndarray, name: str = "matrix") -> np.ndarray:
    """
    Lower Cholesky factor of a symmetric positive definite matrix.

    The matrix is accepted only if every pivot (squared diagonal of the factor) is above `PIVOT_THRESHOLD` times the largest diagonal entry, which keeps the test independent of the overall scale.
    """
    if mat.ndim != 2 or mat.shape[0] != mat.shape[1]:
        raise ShapeException(f"{name} must be square, got shape {mat.shape}")
    if not np.all(np.isfinite(mat)):
        raise NotPositiveDefiniteException(f"{name} has non-finite entries")

    scale = float(np.max(np.abs(mat))) if mat.size else 0.0
    if np.max(np.abs(mat - mat.T), initial=0.0) > SYMMETRY_TOLERANCE * max(scale, 1e-300):
        raise NotPositiveDefiniteException(f"{name} is not symmetric")

    max_diag = float(np.max(np.diag(mat)))
    if max_diag <= 0:
        raise NotPositiveDefiniteException(f"{name} has no positive diagonal entry")

    try:
        lower = cholesky(mat, lower=True, check_finite=False)
    except LinAlgError as e:
        raise NotPositiveDefiniteException(f"{name} is not positive definite: {e}")

    pivots = np.diag(lower) ** 2
    if np.min(pivots) <= PIVOT_THRESHOLD * max_diag:
        raise NotPositiveDefiniteException(
            f"{name} is numerically singular (smallest pivot {np.min(pivots):.3e})"
        )
    return lower


def logdet_from_cholesky(lower: np.ndarray) -> float:
    return float(2 * np.sum(np.log(np.diag(lower))))


def inverse_from_cholesky(lower: np.ndarray) -> np.ndarray:
    identity = np.eye(lower.shape[0])
    return symmetrize(cho_solve((lower, True), identity, check_finite=False))


def vectorize(x: np.ndarray) -> np.ndarray:
    """
    Column-stacking vectorization, vec(X).
    """
    return np.asarray(x).reshape(-1, order="F")


def unvectorize(v: np.ndarray, p: int, q: int) -> np.ndarray:
    """
    Inverse of `vectorize` for a p×q matrix.
    """
    v = np.asarray(v)
    if v.size != p * q:
        raise ShapeException(f"Cannot reshape {v.size} values into {p}x{q}")
    return v.reshape((p, q), order="F")
