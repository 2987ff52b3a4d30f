import numpy as np
from scipy.special import gammainc
from scipy.stats import chi2


def chi2_cdf(x: float, dof: float) -> float:
    """
    Chi-square CDF through the regularized lower incomplete gamma function.
    """
    if x <= 0:
        return 0.0
    if np.isinf(x):
        return 1.0
    return float(gammainc(dof / 2, x / 2))


def chi2_quantile(prob: float, dof: float) -> float:
    return float(chi2.ppf(prob, dof))


def derive_rng(seed: int, *counters: int) -> np.random.Generator:
    """
    Generator for one unit of work, keyed by the master seed and a counter path.

    The stream depends only on `(seed, counters)`, never on the order in which units are scheduled.
    """
    return np.random.default_rng(
        np.random.SeedSequence(entropy=seed, spawn_key=counters)
    )


def derive_seed(seed: int, *counters: int) -> int:
    """
    64-bit child seed, for APIs that take a seed rather than a generator.
    """
    state = np.random.SeedSequence(entropy=seed, spawn_key=counters).generate_state(
        1, dtype=np.uint64
    )
    return int(state[0])
