"""
Maximum likelihood estimation of matrix normal parameters by the flip-flop iteration.
"""

import numpy as np

from app.helpers.linalg import (
    NotPositiveDefiniteException,
    cholesky_lower,
    inverse_from_cholesky,
    logdet_from_cholesky,
    symmetrize,
)
from app.helpers.logging import logger
from app.matvar import mmd_squared_stack
from app.models.config import FlipFlopConfig, IterCapMode
from app.models.fit import MLEFit
from app.models.matvar import MatrixStack, ParamSet

# Slack on the non-increasing objective sequence
MONOTONE_SLACK = 1e-10


class SubsetSizeException(Exception):
    pass


class SingularEstimateException(Exception):
    def __init__(self, message: str, iteration: int) -> None:
        super().__init__(f"{message} (iteration {iteration})")
        self.iteration = iteration


def ratio_floor(p: int, q: int) -> int:
    """
    d = ⌊p/q + q/p⌋, in integer arithmetic.
    """
    return (p * p + q * q) // (p * q)


def elemental_size(p: int, q: int) -> int:
    """
    Smallest subset size d + 2 for which the MLE exists almost surely.
    """
    return ratio_floor(p, q) + 2


def _subset_indices(stack: MatrixStack, subset: np.ndarray | list[int] | None) -> np.ndarray:
    if subset is None:
        return np.arange(stack.n)
    indices = np.unique(np.asarray(subset, dtype=np.intp))
    if indices.size and (indices[0] < 0 or indices[-1] >= stack.n):
        raise IndexError(f"Subset indices must lie in [0, {stack.n})")
    return indices


def flip_flop_mle(
    stack: MatrixStack,
    subset: np.ndarray | list[int] | None = None,
    cfg: FlipFlopConfig = FlipFlopConfig(),
    init_sigma_col: np.ndarray | None = None,
) -> MLEFit:
    """
    Matrix normal MLE of the observations in `subset` (all when None).

    Alternates the row update Σ^row = Σ D Ω^col D' / (qh) and the column update Σ^col = Σ D' Ω^row D / (ph), starting from Σ^col = I unless `init_sigma_col` is given. Stops when the objective p·ln det Σ^col + q·ln det Σ^row changes by less than `cfg.tol`, or after exactly `cfg.fixed_iters` iterations in fixed mode. The result is normalized to σ^col₁₁ = 1.
    """
    p, q = stack.shape
    indices = _subset_indices(stack, subset)
    h = indices.size
    min_size = elemental_size(p, q)
    if h < min_size:
        raise SubsetSizeException(
            f"Subset of size {h} is too small, {p}x{q} observations need at least {min_size}"
        )

    obs = stack.data[indices]
    mean = obs.mean(axis=0)
    devs = obs - mean

    sigma_col = np.eye(q) if init_sigma_col is None else np.asarray(init_sigma_col)
    try:
        precision_col = inverse_from_cholesky(cholesky_lower(sigma_col, "sigma_col"))
    except NotPositiveDefiniteException as e:
        raise SingularEstimateException(f"Invalid initial column covariance: {e}", 0)

    sigma_row = np.eye(p)
    trace: list[float] = []
    converged = False
    for iteration in range(1, cfg.iteration_cap + 1):
        try:
            sigma_row = symmetrize(
                np.einsum("ijk,kl,iml->jm", devs, precision_col, devs, optimize=True)
                / (q * h)
            )
            chol_row = cholesky_lower(sigma_row, "sigma_row")
            precision_row = inverse_from_cholesky(chol_row)

            sigma_col = symmetrize(
                np.einsum("ijk,jl,ilm->km", devs, precision_row, devs, optimize=True)
                / (p * h)
            )
            chol_col = cholesky_lower(sigma_col, "sigma_col")
            precision_col = inverse_from_cholesky(chol_col)
        except NotPositiveDefiniteException as e:
            raise SingularEstimateException(f"Singular flip-flop estimate: {e}", iteration)

        objective = p * logdet_from_cholesky(chol_col) + q * logdet_from_cholesky(chol_row)
        if trace and objective > trace[-1] + MONOTONE_SLACK * (1 + abs(trace[-1])):
            logger.warning(
                "Flip-flop objective increased at iteration %i: %.12g -> %.12g",
                iteration,
                trace[-1],
                objective,
            )
        change = abs(trace[-1] - objective) if trace else np.inf
        trace.append(objective)
        if change < cfg.tol:
            converged = True
            if cfg.iter_cap_mode is IterCapMode.UNTIL_CONVERGENCE:
                break

    params = ParamSet(
        mean=mean,
        sigma_row=sigma_row,
        sigma_col=sigma_col,
    ).normalized()
    return MLEFit(
        converged=converged,
        iters_used=len(trace),
        objective=trace[-1],
        objective_trace=trace,
        params=params,
    )


def mean_mmd_identity_check(
    stack: MatrixStack,
    subset: np.ndarray | list[int] | None,
    fit: MLEFit,
) -> float:
    """
    Residual |Σ_{i∈H} mmd²(Xᵢ) − h·p·q| at the subset's own fit.
    """
    indices = _subset_indices(stack, subset)
    distances = mmd_squared_stack(stack.subset(indices), fit.params)
    return abs(float(np.sum(distances)) - indices.size * stack.p * stack.q)
