"""
Matrix minimum covariance determinant estimators.

Fast-MMCD draws elemental subsets of size d + 2, concentrates each with a few C-steps, refines the best candidates with C-steps until a fixed point, then rescales with the consistency factor and reweights.
"""

from collections.abc import Callable, Iterable
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from math import ceil, log1p

import numpy as np

from app.flipflop import (
    MONOTONE_SLACK,
    SingularEstimateException,
    elemental_size,
    flip_flop_mle,
    ratio_floor,
)
from app.helpers.logging import logger
from app.helpers.stats import chi2_cdf, chi2_quantile, derive_rng
from app.matvar import mmd_squared_stack
from app.models.config import FlipFlopConfig, MMCDConfig, Subsampling
from app.models.fit import (
    BreakdownInfo,
    CStepResult,
    CStepRun,
    MLEFit,
    MMCDFit,
    TrialRecord,
)
from app.models.matvar import MatrixStack

# Redraws allowed per trial when the elemental subset is degenerate
ATTEMPTS_PER_TRIAL = 10


class SubsetBoundsException(Exception):
    pass


class DegenerateDataException(Exception):
    pass


class CStepNonConvergenceException(Exception):
    pass


class ProbabilityException(Exception):
    pass


def resolve_h(n: int, p: int, q: int, h: int | None = None) -> int:
    """
    Validated subset size, defaulting to ⌊(n+d+2)/2⌋.
    """
    size = elemental_size(p, q)
    if n < size:
        raise SubsetBoundsException(
            f"{n} observations of shape {p}x{q} are too few, at least d+2 = {size} are needed"
        )
    if h is None:
        h = (n + size) // 2
    if h > n or 2 * h < n or h < size:
        raise SubsetBoundsException(
            f"h = {h} must satisfy n/2 <= h <= n and h >= d+2 = {size} (n = {n})"
        )
    return h


def consistency_factor(alpha: float, pq: int) -> float:
    """
    c(α) = α / F_{χ²_{pq+2}}(χ²_{α;pq}), making the trimmed covariance consistent at the normal model.
    """
    if not 0.5 <= alpha <= 1:
        raise ProbabilityException(f"alpha must lie in [0.5, 1], got {alpha}")
    if alpha == 1:
        return 1.0
    return alpha / chi2_cdf(chi2_quantile(alpha, pq), pq + 2)


def max_breakdown_h(n: int, p: int, q: int) -> BreakdownInfo:
    """
    Subset size with maximal breakdown point, h = ⌊(n+d+2)/2⌋, and the number of replaceable observations m = min(n−h+1, h−(d+1)).

    With p = 1 or q = 1 the estimator is the classical MCD; the result is flagged and the MCD convention ⌊(n+pq+1)/2⌋ is reported alongside.
    """
    d = ratio_floor(p, q)
    h = (n + d + 2) // 2
    m = min(n - h + 1, h - (d + 1))
    caveat = p < 2 or q < 2
    if caveat:
        logger.warning(
            "Shape %ix%i has a single row or column, MMCD coincides with MCD", p, q
        )
    return BreakdownInfo(
        caveat=caveat,
        d=d,
        fraction=((n - d) // 2) / n,
        h=h,
        h_mcd=(n + p * q + 1) // 2,
        m_breakdown=m,
        vectorized_bound=max((n - p * q + 1) // 2, 0) / n,
    )


def clean_subset_probability(epsilon: float, d: int, m: int) -> float:
    """
    Probability that at least one of m random subsets of size d + 2 is free of outliers.
    """
    if not 0 <= epsilon < 1:
        raise ProbabilityException(f"epsilon must lie in [0, 1), got {epsilon}")
    if m < 1:
        raise ProbabilityException(f"m must be at least 1, got {m}")
    clean = (1 - epsilon) ** (d + 2)
    return 1 - (1 - clean) ** m


def required_subsets(epsilon: float, d: int, beta: float) -> int:
    """
    Number of subsets of size d + 2 needed for a clean one with probability β.
    """
    if not 0 <= epsilon < 1:
        raise ProbabilityException(f"epsilon must lie in [0, 1), got {epsilon}")
    if not 0 < beta < 1:
        raise ProbabilityException(f"beta must lie in (0, 1), got {beta}")
    clean = (1 - epsilon) ** (d + 2)
    if clean >= 1:
        return 1
    return max(1, ceil(log1p(-beta) / log1p(-clean)))


def cstep(
    stack: MatrixStack,
    subset_in: np.ndarray | list[int],
    h: int | None = None,
    cfg: FlipFlopConfig = FlipFlopConfig(),
    fit_in: MLEFit | None = None,
) -> CStepResult:
    """
    One concentration step.

    Fits the subset (unless `fit_in` is given), scores all observations and keeps the h closest, ties going to the lower index. The new subset's flip-flop starts from the previous column covariance, so the objective cannot increase.
    """
    subset_in = np.unique(np.asarray(subset_in, dtype=np.intp))
    h = subset_in.size if h is None else h
    if fit_in is None:
        fit_in = flip_flop_mle(stack, subset_in, cfg)

    distances = mmd_squared_stack(stack, fit_in.params)
    order = np.argsort(distances, kind="stable")
    subset_out = np.sort(order[:h])
    fixed_point = subset_out.size == subset_in.size and bool(
        np.array_equal(subset_out, subset_in)
    )

    fit_out = (
        fit_in
        if fixed_point
        else flip_flop_mle(
            stack,
            subset_out,
            cfg,
            init_sigma_col=fit_in.params.sigma_col,
        )
    )
    return CStepResult(
        distances=distances,
        fit=fit_out,
        fit_in=fit_in,
        fixed_point=fixed_point,
        subset=subset_out,
    )


def iterate_csteps(  # noqa: PLR0913
    stack: MatrixStack,
    subset: np.ndarray | list[int],
    h: int,
    cfg: FlipFlopConfig,
    tol: float,
    max_steps: int,
    fit: MLEFit | None = None,
) -> CStepRun:
    """
    C-steps until a fixed point, an objective change below `tol`, or `max_steps` steps.
    """
    current = np.unique(np.asarray(subset, dtype=np.intp))
    if fit is None:
        fit = flip_flop_mle(stack, current, cfg)
    objectives = [fit.objective]
    distances = mmd_squared_stack(stack, fit.params)
    converged = fixed_point = False
    steps = 0

    for steps in range(1, max_steps + 1):  # noqa: B007
        step = cstep(stack, current, h, cfg, fit_in=fit)
        previous = fit.objective
        if (
            current.size == step.subset.size
            and step.fit.objective > previous + MONOTONE_SLACK * (1 + abs(previous))
        ):
            logger.warning(
                "C-step objective increased: %.12g -> %.12g",
                previous,
                step.fit.objective,
            )
        current, fit, distances = step.subset, step.fit, step.distances
        objectives.append(fit.objective)
        fixed_point = step.fixed_point
        if fixed_point or (
            current.size == h and abs(previous - fit.objective) < tol
        ):
            converged = True
            break

    # Step distances score the fit the step started from, which is the final one only at a fixed point
    if steps > 0 and not fixed_point:
        distances = mmd_squared_stack(stack, fit.params)
    return CStepRun(
        converged=converged,
        distances=distances,
        fit=fit,
        objectives=objectives,
        steps=steps,
        subset=current,
    )


@dataclass(frozen=True)
class _Candidate:
    attempts: int
    block: int | None
    objective: float
    subset: np.ndarray
    trial: int


def _map[T, R](fn: Callable[[T], R], items: Iterable[T], threads: int) -> list[R]:
    """
    Ordered map, through a thread pool when more than one worker is allowed.
    """
    if threads <= 1:
        return [fn(item) for item in items]
    with ThreadPoolExecutor(max_workers=threads) as executor:
        return list(executor.map(fn, items))


def _run_trial(  # noqa: PLR0913
    stack: MatrixStack,
    indices: np.ndarray,
    h: int,
    block: int | None,
    trial: int,
    cfg: MMCDConfig,
) -> _Candidate | None:
    """
    Draw an elemental subset of `indices` and concentrate it with `cfg.initial_iters` C-steps and MLE iterations.

    The elemental fit runs to convergence under `cfg.flip_flop`. Only the warm-started C-step fits are capped at `cfg.initial_iters` iterations. Degenerate draws are redrawn up to `ATTEMPTS_PER_TRIAL` times.
    """
    local = stack if indices.size == stack.n else stack.subset(indices)
    size = elemental_size(stack.p, stack.q)
    trial_cfg = FlipFlopConfig.fixed(cfg.initial_iters)

    for attempt in range(ATTEMPTS_PER_TRIAL):
        rng = derive_rng(cfg.rng_seed, 1, block or 0, trial, attempt)
        subset = rng.choice(local.n, size=size, replace=False)
        try:
            start = flip_flop_mle(local, subset, cfg.flip_flop)
            run = iterate_csteps(
                stack=local,
                subset=subset,
                h=h,
                cfg=trial_cfg,
                tol=cfg.cstep_tol,
                max_steps=cfg.initial_iters,
                fit=start,
            )
        except SingularEstimateException as e:
            logger.debug("Trial %i attempt %i degenerate: %s", trial, attempt, e)
            continue
        return _Candidate(
            attempts=attempt + 1,
            block=block,
            objective=run.fit.objective,
            subset=indices[run.subset],
            trial=trial,
        )
    return None


def _trial_phase(stack: MatrixStack, h: int, cfg: MMCDConfig) -> list[_Candidate | None]:
    n = stack.n
    if cfg.subsampling is Subsampling.OFF or n < cfg.subsample_threshold:
        everything = np.arange(n)
        return _map(
            lambda trial: _run_trial(stack, everything, h, None, trial, cfg),
            range(cfg.n_initial_subsets),
            cfg.threads,
        )

    # Subsampling, trial phase on disjoint blocks
    n_blocks = ceil(n / cfg.subsample_block)
    permutation = derive_rng(cfg.rng_seed, 0).permutation(n)
    blocks = [np.sort(block) for block in np.array_split(permutation, n_blocks)]
    per_block = max(1, cfg.n_initial_subsets // n_blocks)
    size = elemental_size(stack.p, stack.q)
    logger.info(
        "Subsampling %i observations into %i blocks, %i trials each",
        n,
        n_blocks,
        per_block,
    )

    jobs = [
        (block_id, indices, max(size, min(indices.size, ceil(indices.size * h / n))), trial)
        for block_id, indices in enumerate(blocks, start=1)
        for trial in range(per_block)
    ]
    return _map(
        lambda job: _run_trial(stack, job[1], job[2], job[0], job[3], cfg),
        jobs,
        cfg.threads,
    )


def _refine(
    stack: MatrixStack,
    candidate: _Candidate,
    h: int,
    cfg: MMCDConfig,
) -> CStepRun:
    subset, fit = candidate.subset, None
    # Subsampled candidates have block-sized subsets, grow them to h first
    if subset.size != h:
        first = cstep(stack, subset, h, cfg.flip_flop)
        subset, fit = first.subset, first.fit
    run = iterate_csteps(
        stack=stack,
        subset=subset,
        h=h,
        cfg=cfg.flip_flop,
        tol=cfg.cstep_tol,
        max_steps=cfg.max_csteps,
        fit=fit,
    )
    if not run.converged:
        raise CStepNonConvergenceException(
            f"C-steps from trial {candidate.trial} did not reach a fixed point within {cfg.max_csteps} steps"
        )
    return run


def fast_mmcd(stack: MatrixStack, cfg: MMCDConfig = MMCDConfig()) -> MMCDFit:
    """
    Raw and reweighted MMCD estimates.

    The result is a function of `(stack, cfg)` only; `cfg.threads` changes the speed, never the output.
    """
    n, (p, q) = stack.n, stack.shape
    pq = p * q
    h = resolve_h(n, p, q, cfg.h)
    logger.info("Fitting MMCD on n=%i observations of %ix%i, h=%i", n, p, q, h)

    # Trial phase
    trials = _trial_phase(stack, h, cfg)
    candidates = [trial for trial in trials if trial is not None]
    if not candidates:
        raise DegenerateDataException(
            f"All {len(trials)} elemental subsets were singular after {ATTEMPTS_PER_TRIAL} attempts each"
        )
    if len(candidates) < len(trials):
        logger.debug("%i trials skipped as degenerate", len(trials) - len(candidates))

    # Refinement of the best candidates on the full data
    kept = sorted(
        candidates,
        key=lambda c: (c.objective, c.block or 0, c.trial),
    )[: cfg.n_keep]
    runs = _map(lambda c: _refine(stack, c, h, cfg), kept, cfg.threads)
    best_rank = min(range(len(runs)), key=lambda i: (runs[i].fit.objective, i))
    best = runs[best_rank]

    refined = {
        (c.block, c.trial): run for c, run in zip(kept, runs, strict=True)
    }
    trial_log = [
        TrialRecord(
            attempts=c.attempts,
            block=c.block,
            objective=c.objective,
            refined_objective=(
                refined[(c.block, c.trial)].fit.objective
                if (c.block, c.trial) in refined
                else None
            ),
            refined_objectives=(
                refined[(c.block, c.trial)].objectives
                if (c.block, c.trial) in refined
                else None
            ),
            trial=c.trial,
        )
        for c in candidates
    ]

    # Raw estimate, consistency scaled
    c_raw = consistency_factor(h / n, pq)
    raw = best.fit.params.scaled(c_raw)
    distances_raw = mmd_squared_stack(stack, raw)

    # Reweighting, the h-subset always keeps its weight
    weights = distances_raw < chi2_quantile(cfg.reweight_quantile, pq)
    weights[best.subset] = True
    rew_fit = flip_flop_mle(stack, np.flatnonzero(weights), cfg.flip_flop)
    h_tilde = int(np.sum(weights))
    c_rew = consistency_factor(h_tilde / n, pq)
    reweighted = rew_fit.params.scaled(c_rew)

    logger.info(
        "MMCD objective %.6g, %i/%i observations reweighted in",
        best.fit.objective,
        h_tilde,
        n,
    )
    return MMCDFit(
        c_raw=c_raw,
        c_rew=c_rew,
        distances_raw=distances_raw,
        distances_reweighted=mmd_squared_stack(stack, reweighted),
        h=h,
        h_subset=[int(i) for i in best.subset],
        objective=best.fit.objective,
        raw=raw,
        reweighted=reweighted,
        trial_log=trial_log,
        weights=weights,
    )
