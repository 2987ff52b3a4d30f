"""
Outlier flagging and Shapley decomposition of squared matrix Mahalanobis distances.

The cellwise Shapley values of mmd²(X) are Φ = (X−M) ∘ Ω^row (X−M) Ω^col. They sum to mmd²(X), and summing them over columns or rows gives the rowwise and columnwise values.
"""

import numpy as np

from app.helpers.linalg import ShapeException
from app.helpers.logging import logger
from app.helpers.stats import chi2_quantile
from app.matvar import mmd_squared, mmd_squared_stack
from app.models.matvar import MatrixStack, ParamSet
from app.models.shapley import (
    DetectionResult,
    InvarianceReport,
    ShapleyReport,
    TransformKind,
)

# Agreement required between the diagonal forms and the cell sums
AGGREGATE_TOLERANCE = 1e-10


class QuantileException(Exception):
    pass


class UnsupportedTransformException(Exception):
    pass


def detect(
    stack: MatrixStack,
    params: ParamSet,
    quantile: float = 0.975,
) -> DetectionResult:
    """
    Flag observations whose squared MMD exceeds the χ²_{pq} quantile.
    """
    if not 0 < quantile < 1:
        raise QuantileException(f"Quantile must lie in (0, 1), got {quantile}")
    distances = mmd_squared_stack(stack, params)
    cutoff = chi2_quantile(quantile, stack.p * stack.q)
    flags = distances > cutoff
    logger.debug(
        "%i/%i observations above cutoff %.6g", int(np.sum(flags)), stack.n, cutoff
    )
    return DetectionResult(
        cutoff=cutoff,
        distances=distances,
        flags=flags,
    )


def shapley(x: np.ndarray, params: ParamSet) -> ShapleyReport:
    x = np.asarray(x, dtype=np.float64)
    if x.shape != params.mean.shape:
        raise ShapeException(
            f"Observation shape {x.shape} does not match parameters {params.mean.shape}"
        )
    dev = x - params.mean
    weighted = params.precision_row @ dev @ params.precision_col
    cell = dev * weighted

    # Diagonal forms, cross-checked against the cell sums
    row = np.diag(params.precision_row @ dev @ params.precision_col @ dev.T).copy()
    col = np.diag(dev.T @ params.precision_row @ dev @ params.precision_col).copy()
    scale = 1 + float(np.max(np.abs(cell), initial=0.0))
    row_gap = float(np.max(np.abs(row - cell.sum(axis=1))))
    col_gap = float(np.max(np.abs(col - cell.sum(axis=0))))
    if max(row_gap, col_gap) > AGGREGATE_TOLERANCE * scale * max(params.p, params.q):
        logger.warning(
            "Shapley aggregates disagree with cell sums: row %.3g, col %.3g",
            row_gap,
            col_gap,
        )

    return ShapleyReport(
        cell=cell,
        col=col,
        row=row,
        total=mmd_squared(x, params),
    )


def _is_diagonal(a: np.ndarray) -> bool:
    return bool(
        np.array_equal(a, np.diag(np.diag(a))) and np.all(np.diag(a) != 0)
    )


def _is_permutation(a: np.ndarray) -> bool:
    return bool(
        np.all((a == 0) | (a == 1))
        and np.all(a.sum(axis=0) == 1)
        and np.all(a.sum(axis=1) == 1)
    )


def _check_factor(a: np.ndarray, dim: int, name: str) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    if a.shape != (dim, dim):
        raise ShapeException(f"{name} must be {dim}x{dim}, got {a.shape}")
    if not (_is_diagonal(a) or _is_permutation(a)):
        raise UnsupportedTransformException(
            f"{name} must be an invertible diagonal or a permutation matrix"
        )
    return a


def shapley_invariance_suite(
    x: np.ndarray,
    params: ParamSet,
    a: np.ndarray,
    b: np.ndarray,
    c: np.ndarray,
) -> InvarianceReport:
    """
    Check shift invariance under C and the behavior of Φ under X ↦ AXB.

    Diagonal factors leave Φ unchanged and permutation factors permute it, so the expected value is A'ΦB' with A' = A for a permutation and A' = I for a diagonal A. Other matrices are refused, since Φ is not matrix affine equivariant in general.
    """
    x = np.asarray(x, dtype=np.float64)
    p, q = params.p, params.q
    a = _check_factor(a, p, "A")
    b = _check_factor(b, q, "B")
    c = np.asarray(c, dtype=np.float64)
    if c.shape != (p, q):
        raise ShapeException(f"C must be {p}x{q}, got {c.shape}")

    base = shapley(x, params).cell

    shifted = shapley(x + c, params.transformed(np.eye(p), np.eye(q), c)).cell
    shift = float(np.max(np.abs(shifted - base)))

    # The identity is both, it counts as diagonal
    a_perm, b_perm = _is_permutation(a), _is_permutation(b)
    if _is_diagonal(a) and _is_diagonal(b):
        kind = TransformKind.SCALE
    elif a_perm and b_perm:
        kind = TransformKind.PERMUTATION
    else:
        kind = TransformKind.MIXED
    expected = (a if a_perm else np.eye(p)) @ base @ (b if b_perm else np.eye(q))
    moved = shapley(a @ x @ b, params.transformed(a, b)).cell
    transform = float(np.max(np.abs(moved - expected)))

    return InvarianceReport(
        kind=kind,
        shift=shift,
        transform=transform,
    )
