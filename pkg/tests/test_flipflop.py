import numpy as np
import pytest

from app.flipflop import (
    SingularEstimateException,
    SubsetSizeException,
    elemental_size,
    flip_flop_mle,
    mean_mmd_identity_check,
    ratio_floor,
)
from app.matvar import LOG_2PI, sample, weighted_loglik
from app.models.config import FlipFlopConfig
from app.models.matvar import DistributionSpec, MatrixStack, ParamSet

TIGHT = FlipFlopConfig(max_iters=1000, tol=1e-12)


def random_spd(rng: np.random.Generator, dim: int) -> np.ndarray:
    a = rng.standard_normal((dim, dim))
    return a @ a.T + dim * np.eye(dim)


def random_stack(seed: int, n: int, p: int, q: int) -> MatrixStack:
    rng = np.random.default_rng(seed)
    params = ParamSet(
        mean=rng.standard_normal((p, q)),
        sigma_row=random_spd(rng, p),
        sigma_col=random_spd(rng, q),
    )
    return sample(DistributionSpec(params=params), n, rng_seed=seed)


def test_ratio_floor():
    assert ratio_floor(5, 20) == 4
    assert ratio_floor(20, 5) == 4
    assert ratio_floor(3, 3) == 2
    assert ratio_floor(1, 20) == 20
    # 2/3 + 3/2 = 2.1666…
    assert ratio_floor(2, 3) == 2
    assert elemental_size(5, 20) == 6


def test_single_column_is_sample_covariance():
    stack = random_stack(seed=1, n=30, p=4, q=1)
    fit = flip_flop_mle(stack)

    flat = stack.data[:, :, 0]
    assert fit.converged
    assert np.allclose(fit.params.mean, flat.mean(axis=0)[:, np.newaxis])
    assert np.allclose(fit.params.sigma_row, np.cov(flat.T, ddof=0), rtol=1e-10)
    assert fit.params.sigma_col.tolist() == [[1.0]]


def test_mean_distance_identity():
    for seed, (p, q) in enumerate([(2, 3), (4, 4), (3, 7)]):
        stack = random_stack(seed=seed, n=40, p=p, q=q)
        subset = np.arange(0, 40, 2)
        fit = flip_flop_mle(stack, subset)
        residual = mean_mmd_identity_check(stack, subset, fit)
        assert residual <= 1e-8 * subset.size * p * q


def test_identity_holds_in_fixed_mode():
    stack = random_stack(seed=3, n=25, p=3, q=4)
    fit = flip_flop_mle(stack, cfg=FlipFlopConfig.fixed(1))
    assert mean_mmd_identity_check(stack, None, fit) <= 1e-8 * 25 * 12


def test_objective_non_increasing():
    stack = random_stack(seed=4, n=50, p=5, q=3)
    fit = flip_flop_mle(stack, cfg=TIGHT)
    trace = fit.objective_trace
    for before, after in zip(trace, trace[1:], strict=False):
        assert after <= before + 1e-10 * (1 + abs(before))


def test_fixed_iterations():
    stack = random_stack(seed=5, n=20, p=3, q=3)

    once = flip_flop_mle(stack, cfg=FlipFlopConfig.fixed(1))
    assert once.iters_used == 1
    assert not once.converged

    twice = flip_flop_mle(stack, cfg=FlipFlopConfig.fixed(2))
    assert twice.iters_used == 2
    assert len(twice.objective_trace) == 2


def test_normalized_result():
    stack = random_stack(seed=6, n=30, p=3, q=4)
    fit = flip_flop_mle(stack)
    assert fit.params.sigma_col[0, 0] == 1.0


def test_objective_matches_loglik():
    stack = random_stack(seed=7, n=35, p=3, q=2)
    fit = flip_flop_mle(stack, cfg=TIGHT)

    # At the MLE, −2·loglik/n = pq(1 + ln 2π) + objective
    loglik = weighted_loglik(stack, fit.params, np.ones(stack.n))
    assert -2 * loglik / stack.n == pytest.approx(6 * (1 + LOG_2PI) + fit.objective, rel=1e-9)


def test_subset_too_small():
    stack = random_stack(seed=8, n=30, p=5, q=20)
    with pytest.raises(SubsetSizeException):
        flip_flop_mle(stack, np.arange(5))
    # d + 2 = 6 is enough
    flip_flop_mle(stack, np.arange(6))


def test_subset_out_of_range():
    stack = random_stack(seed=9, n=10, p=2, q=2)
    with pytest.raises(IndexError):
        flip_flop_mle(stack, [0, 1, 2, 3, 10])


def test_identical_observations_are_singular():
    stack = MatrixStack(data=np.ones((10, 2, 3)))
    with pytest.raises(SingularEstimateException) as e:
        flip_flop_mle(stack)
    assert e.value.iteration == 1


def test_warm_start_reaches_same_estimate():
    rng = np.random.default_rng(10)
    stack = random_stack(seed=10, n=40, p=3, q=4)
    cold = flip_flop_mle(stack, cfg=TIGHT)
    warm = flip_flop_mle(stack, cfg=TIGHT, init_sigma_col=random_spd(rng, 4))
    assert np.allclose(warm.params.kronecker(), cold.params.kronecker(), rtol=1e-6)
    assert warm.objective == pytest.approx(cold.objective, abs=1e-8)


def test_affine_equivariance():
    rng = np.random.default_rng(11)
    p, q = 3, 4
    stack = random_stack(seed=11, n=40, p=p, q=q)
    a = np.eye(p) + 0.3 * rng.standard_normal((p, p))
    b = np.eye(q) + 0.3 * rng.standard_normal((q, q))
    c = rng.standard_normal((p, q))
    moved = MatrixStack(data=a @ stack.data @ b + c)

    fit = flip_flop_mle(stack, cfg=TIGHT)
    moved_fit = flip_flop_mle(moved, cfg=TIGHT)

    expected = fit.params.transformed(a, b, c)
    assert np.allclose(moved_fit.params.mean, expected.mean, atol=1e-10)
    assert np.allclose(moved_fit.params.kronecker(), expected.kronecker(), rtol=1e-6, atol=1e-9)
