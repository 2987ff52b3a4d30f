"""
Matrix-variate model: squared matrix Mahalanobis distances, matrix normal densities and sampling.
"""

import numpy as np

from app.helpers.linalg import ShapeException
from app.models.matvar import DistributionSpec, Family, MatrixStack, ParamSet

LOG_2PI = float(np.log(2 * np.pi))


def _check_shape(x: np.ndarray, params: ParamSet) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.shape != params.mean.shape:
        raise ShapeException(
            f"Observation shape {x.shape} does not match parameters {params.mean.shape}"
        )
    return x


def mmd_squared(x: np.ndarray, params: ParamSet) -> float:
    """
    Squared matrix Mahalanobis distance tr(Ω^col (X−M)' Ω^row (X−M)).

    Equals the Mahalanobis distance of vec(X) under Σ^col ⊗ Σ^row.
    """
    dev = _check_shape(x, params) - params.mean
    scaled = params.precision_row @ dev @ params.precision_col
    return max(float(np.sum(dev * scaled)), 0.0)


def mmd_squared_stack(stack: MatrixStack, params: ParamSet) -> np.ndarray:
    """
    Squared MMDs of all observations of the stack, as a length-n array.
    """
    if stack.shape != params.mean.shape:
        raise ShapeException(
            f"Stack shape {stack.shape} does not match parameters {params.mean.shape}"
        )
    devs = stack.data - params.mean
    scaled = params.precision_row @ devs @ params.precision_col
    return np.maximum(np.einsum("ijk,ijk->i", devs, scaled), 0.0)


def matnorm_logpdf(x: np.ndarray, params: ParamSet) -> float:
    p, q = params.mean.shape
    return -0.5 * (
        mmd_squared(x, params)
        + p * q * LOG_2PI
        + p * params.logdet_col
        + q * params.logdet_row
    )


def weighted_loglik(
    stack: MatrixStack,
    params: ParamSet,
    weights: np.ndarray,
) -> float:
    """
    Weighted matrix normal log-likelihood Σᵢ wᵢ·log f(Xᵢ).

    Binary weights select an h-subset, giving the trimmed likelihood maximized by MMCD.
    """
    weights = np.asarray(weights, dtype=np.float64)
    if weights.shape != (stack.n,):
        raise ShapeException(f"Expected {stack.n} weights, got shape {weights.shape}")
    p, q = stack.shape
    per_obs = -0.5 * (
        mmd_squared_stack(stack, params)
        + p * q * LOG_2PI
        + p * params.logdet_col
        + q * params.logdet_row
    )
    return float(np.sum(weights * per_obs))


def sample(spec: DistributionSpec, n: int, rng_seed: int) -> MatrixStack:
    """
    Draw n observations from a matrix normal or matrix-t distribution.

    Matrix normal draws are M + L_r Z L_c' with Z standard normal. Matrix-t draws divide the centered normal draw by sqrt(χ²_ν/ν), so vec(X) − vec(M) is multivariate-t with scale Σ^col ⊗ Σ^row. The output depends on `rng_seed` only.
    """
    if n < 1:
        raise ValueError(f"Sample size must be at least 1, got {n}")
    params = spec.params
    rng = np.random.default_rng(rng_seed)

    noise = rng.standard_normal((n, params.p, params.q))
    centered = params.chol_row @ noise @ params.chol_col.T
    if spec.family is Family.MATRIX_T:
        assert spec.dof is not None
        mixing = rng.chisquare(spec.dof, size=n) / spec.dof
        centered = centered / np.sqrt(mixing)[:, np.newaxis, np.newaxis]

    return MatrixStack(data=params.mean + centered)
