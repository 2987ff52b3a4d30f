"""
Simulation laboratory: covariance generators, contamination schemes, accuracy metrics and the replicated experiments comparing MLE, MMCD, the vectorized MCD and the true parameters.
"""

import asyncio
from dataclasses import dataclass
from math import floor

import numpy as np
from aiojobs import Scheduler
from scipy.linalg import toeplitz
from structlog.contextvars import bound_contextvars

from app.flipflop import flip_flop_mle
from app.helpers.linalg import ShapeException, symmetrize
from app.helpers.logging import logger, timed
from app.helpers.stats import derive_seed
from app.matvar import sample
from app.mmcd import SubsetBoundsException, fast_mmcd
from app.models.matvar import DistributionSpec, Family, MatrixStack, ParamSet
from app.models.simulation import (
    ContaminationScheme,
    ContaminationSpec,
    CovKind,
    CovSpec,
    Estimator,
    Experiment,
    Scenario,
    SimRecord,
    SimResult,
)
from app.shapley import detect

# Largest off-diagonal magnitude accepted for random correlation matrices
RND_MAX_CORRELATION = 0.5
RND_MAX_ATTEMPTS = 10_000


class CovarianceGenerationException(Exception):
    pass


class ContaminationException(Exception):
    pass


def make_cov(spec: CovSpec) -> np.ndarray:
    """
    Correlation matrix of the requested kind.

    `rnd` draws T with dim × (dim + 2) standard normal entries, rescales TT' to unit diagonal and redraws until every correlation is at most 0.5 in magnitude.
    """
    dim = spec.dim
    match spec.kind:
        case CovKind.FIX:
            assert spec.rho is not None
            return (1 - spec.rho) * np.eye(dim) + spec.rho * np.ones((dim, dim))
        case CovKind.MIX:
            assert spec.rho is not None
            return toeplitz(spec.rho ** np.arange(dim, dtype=np.float64))
        case CovKind.RND:
            rng = np.random.default_rng(spec.seed)
            for _ in range(RND_MAX_ATTEMPTS):
                t = rng.standard_normal((dim, dim + 2))
                gram = t @ t.T
                scale = np.sqrt(np.diag(gram))
                corr = symmetrize(gram / np.outer(scale, scale))
                np.fill_diagonal(corr, 1.0)
                off = corr[~np.eye(dim, dtype=bool)]
                if off.size == 0 or np.max(np.abs(off)) <= RND_MAX_CORRELATION:
                    return corr
            raise CovarianceGenerationException(
                f"No {dim}x{dim} correlation matrix within ±{RND_MAX_CORRELATION} after {RND_MAX_ATTEMPTS} draws"
            )


def outlier_count(epsilon: float, n: int) -> int:
    # Guard against 0.29 * 100 = 28.999999999999996
    return floor(epsilon * n + 1e-9)


def contaminate(
    stack: MatrixStack,
    truth: ParamSet,
    spec: ContaminationSpec,
    rng_seed: int,
    dof: float | None = None,
) -> tuple[MatrixStack, np.ndarray]:
    """
    Replace ⌊ε·n⌋ randomly chosen observations by outliers.

    Returns the contaminated stack and the sorted outlier indices. Redrawn outliers follow the same family as the clean data, matrix-t when `dof` is given.
    """
    n, (p, q) = stack.n, stack.shape
    if truth.mean.shape != (p, q):
        raise ShapeException(
            f"Parameters of shape {truth.mean.shape} do not match observations {p}x{q}"
        )
    if spec.scheme is ContaminationScheme.BLOCK and (spec.rows > p or spec.cols > q):
        raise ContaminationException(
            f"Block {spec.rows}x{spec.cols} exceeds the {p}x{q} observation shape"
        )
    if spec.scheme is ContaminationScheme.CELL and p * q < 2:
        raise ContaminationException("Cell contamination needs at least two cells")

    n_out = outlier_count(spec.epsilon, n)
    if n_out == 0:
        return stack, np.array([], dtype=np.intp)

    rng = np.random.default_rng(rng_seed)
    outliers = np.sort(rng.choice(n, size=n_out, replace=False))
    data = stack.data.copy()
    family = Family.MATRIX_NORMAL if dof is None else Family.MATRIX_T

    match spec.scheme:
        case ContaminationScheme.SHIFT | ContaminationScheme.BLOCK:
            rows, cols = (p, q) if spec.scheme is ContaminationScheme.SHIFT else (spec.rows, spec.cols)
            shifted = DistributionSpec(
                dof=dof,
                family=family,
                params=ParamSet(
                    mean=np.full((rows, cols), spec.gamma),
                    sigma_row=spec.scale * truth.sigma_row[:rows, :rows],
                    sigma_col=truth.sigma_col[:cols, :cols],
                ),
            )
            draws = sample(shifted, n_out, int(rng.integers(2**63)))
            data[outliers, :rows, :cols] = draws.data

        case ContaminationScheme.CELL:
            k = max(2, floor(spec.permute_fraction * p * q))
            for i in outliers:
                flat = data[i].reshape(-1)
                cells = rng.choice(p * q, size=k, replace=False)
                # Cyclic shift, every selected cell moves
                flat[cells] = np.roll(flat[cells], 1)

    return MatrixStack(data=data), outliers


def _check_pair(est: ParamSet, truth: ParamSet) -> None:
    if est.mean.shape != truth.mean.shape:
        raise ShapeException(
            f"Estimate of shape {est.mean.shape} does not match truth {truth.mean.shape}"
        )


def kl_divergence(est: ParamSet, truth: ParamSet) -> float:
    """
    tr(Ω^row Σ̂^row)·tr(Ω^col Σ̂^col) − q·ln det(Ω^row Σ̂^row) − p·ln det(Ω^col Σ̂^col) − pq.

    Twice the Kullback-Leibler divergence between the centered normal models of vec(X).
    """
    _check_pair(est, truth)
    p, q = truth.p, truth.q
    trace_row = float(np.sum(truth.precision_row * est.sigma_row))
    trace_col = float(np.sum(truth.precision_col * est.sigma_col))
    logdet_row = est.logdet_row - truth.logdet_row
    logdet_col = est.logdet_col - truth.logdet_col
    return max(trace_row * trace_col - q * logdet_row - p * logdet_col - p * q, 0.0)


def frobenius_error(est: ParamSet, truth: ParamSet) -> float:
    """
    ‖Σ̂^col⊗Σ̂^row − Σ^col⊗Σ^row‖_F / ‖Σ^col⊗Σ^row‖_F without forming the Kronecker products.

    The difference is Δ^col⊗Σ̂^row + Σ^col⊗Δ^row on normalized pairs, and ⟨A⊗B, C⊗D⟩ = ⟨A, C⟩⟨B, D⟩.
    """
    _check_pair(est, truth)
    est, truth = est.normalized(), truth.normalized()
    delta_col = est.sigma_col - truth.sigma_col
    delta_row = est.sigma_row - truth.sigma_row
    squared = (
        np.sum(delta_col**2) * np.sum(est.sigma_row**2)
        + 2 * np.sum(delta_col * truth.sigma_col) * np.sum(est.sigma_row * delta_row)
        + np.sum(truth.sigma_col**2) * np.sum(delta_row**2)
    )
    norm = np.linalg.norm(truth.sigma_col) * np.linalg.norm(truth.sigma_row)
    return float(np.sqrt(max(squared, 0.0)) / norm)


def _kron_eigenvalues(params: ParamSet) -> np.ndarray:
    values = np.outer(
        np.linalg.eigvalsh(params.sigma_col),
        np.linalg.eigvalsh(params.sigma_row),
    ).ravel()
    return np.sort(values)[::-1]


def angle_error(est: ParamSet, truth: ParamSet) -> float:
    """
    1 − cos of the angle between the descending eigenvalue vectors of both Kronecker covariances.
    """
    _check_pair(est, truth)
    a, b = _kron_eigenvalues(est), _kron_eigenvalues(truth)
    cos = float(a @ b / (np.linalg.norm(a) * np.linalg.norm(b)))
    return min(max(1 - cos, 0.0), 1.0)


def classification_scores(
    flags: np.ndarray,
    labels: np.ndarray,
) -> tuple[float, float, float]:
    """
    Precision, recall and F-score of boolean flags against boolean outlier labels.

    Precision is 1 when nothing is flagged and recall is 1 when there is no outlier. F is 0 as soon as either is 0.
    """
    flags = np.asarray(flags, dtype=bool)
    labels = np.asarray(labels, dtype=bool)
    if flags.shape != labels.shape:
        raise ShapeException(f"{flags.shape[0]} flags for {labels.shape[0]} labels")
    hits = int(np.sum(flags & labels))
    flagged, positives = int(np.sum(flags)), int(np.sum(labels))
    precision = hits / flagged if flagged else 1.0
    recall = hits / positives if positives else 1.0
    if precision == 0 or recall == 0:
        return precision, recall, 0.0
    return precision, recall, 2 * precision * recall / (precision + recall)


def scenario_truth(scenario: Scenario) -> ParamSet:
    return ParamSet(
        mean=np.zeros((scenario.p, scenario.q)),
        sigma_row=make_cov(scenario.cov_row),
        sigma_col=make_cov(scenario.cov_col),
    )


@dataclass(frozen=True)
class _Estimate:
    params: ParamSet
    runtime: float
    # Observations and true parameters in the estimator's own shape
    stack: MatrixStack
    truth: ParamSet


def _estimates(  # noqa: PLR0913
    scenario: Scenario,
    stack: MatrixStack,
    truth: ParamSet,
    wanted: set[Estimator],
    mmcd_seed: int,
    notices: list[str],
) -> dict[Estimator, _Estimate]:
    cfg = scenario.mmcd.model_copy(update={"rng_seed": mmcd_seed, "threads": 1})
    estimates: dict[Estimator, _Estimate] = {}

    if Estimator.MLE in wanted:
        with timed("MLE fit") as watch:
            mle = flip_flop_mle(stack, cfg=cfg.flip_flop)
        estimates[Estimator.MLE] = _Estimate(mle.params, watch.seconds, stack, truth)

    if wanted & {Estimator.MMCD, Estimator.MMCD_RAW}:
        with timed("MMCD fit") as watch:
            fit = fast_mmcd(stack, cfg)
        estimates[Estimator.MMCD_RAW] = _Estimate(fit.raw, watch.seconds, stack, truth)
        estimates[Estimator.MMCD] = _Estimate(fit.reweighted, watch.seconds, stack, truth)

    if Estimator.MCD in wanted:
        n, pq = stack.n, stack.p * stack.q
        columns = stack.as_column_stack()
        try:
            if n <= pq:
                raise SubsetBoundsException(f"MCD needs n > pq, got n = {n} and pq = {pq}")
            with timed("MCD fit") as watch:
                fit = fast_mmcd(
                    columns, cfg.model_copy(update={"h": (n + pq + 1) // 2})
                )
            estimates[Estimator.MCD] = _Estimate(
                fit.reweighted, watch.seconds, columns, truth.vectorized()
            )
        except SubsetBoundsException as e:
            notice = f"n={n}: vectorized MCD skipped, {e}"
            logger.warning(notice)
            notices.append(notice)

    if Estimator.TRUTH in wanted:
        estimates[Estimator.TRUTH] = _Estimate(truth, 0.0, stack, truth)
    return estimates


def _replicate(  # noqa: PLR0913
    scenario: Scenario,
    truth: ParamSet,
    experiment: Experiment,
    n: int,
    rep: int,
) -> tuple[list[SimRecord], list[str]]:
    """
    One replication at sample size n, seeded by (scenario seed, n, rep) only.
    """
    with bound_contextvars(scenario=scenario.name, n=n, rep=rep):
        logger.debug("Starting replication")
        spec = DistributionSpec(dof=scenario.dof, family=scenario.family, params=truth)
        stack = sample(spec, n, derive_seed(scenario.seed, n, rep, 0))

        labels = np.zeros(n, dtype=bool)
        if experiment is Experiment.CONTAMINATION:
            stack, outliers = contaminate(
                stack=stack,
                truth=truth,
                spec=scenario.contamination,
                rng_seed=derive_seed(scenario.seed, n, rep, 1),
                dof=scenario.dof,
            )
            labels[outliers] = True

        wanted = set(scenario.estimators)
        if experiment is Experiment.EFFICIENCY:
            wanted.add(Estimator.MLE)
        notices: list[str] = []
        estimates = _estimates(
            scenario=scenario,
            stack=stack,
            truth=truth,
            wanted=wanted,
            mmcd_seed=derive_seed(scenario.seed, n, rep, 2),
            notices=notices,
        )

        kl_mle = (
            kl_divergence(estimates[Estimator.MLE].params, truth)
            if Estimator.MLE in estimates
            else None
        )
        records: list[SimRecord] = []
        for estimator in scenario.estimators:
            if estimator not in estimates:
                continue
            est = estimates[estimator]
            kl = kl_divergence(est.params, est.truth)
            scores: dict[str, float | None] = {}
            if experiment is Experiment.CONTAMINATION:
                detection = detect(est.stack, est.params, scenario.detection_quantile)
                precision, recall, f_score = classification_scores(detection.flags, labels)
                scores = {"precision": precision, "recall": recall, "f_score": f_score}
            else:
                scores = {"efficiency": kl_mle / kl if kl_mle is not None and kl > 0 else None}
            records.append(
                SimRecord(
                    angle=angle_error(est.params, est.truth),
                    estimator=estimator,
                    frobenius=frobenius_error(est.params, est.truth),
                    kl=kl,
                    n=n,
                    rep=rep,
                    runtime=est.runtime,
                    scenario=scenario.name,
                    **scores,
                )
            )
        logger.debug("Replication done, %i records", len(records))
        return records, notices


async def _run(scenario: Scenario, experiment: Experiment, threads: int) -> SimResult:
    truth = scenario_truth(scenario)
    sizes = scenario.n_grid if experiment is Experiment.EFFICIENCY else [scenario.n]
    units = [(n, rep) for n in sizes for rep in range(scenario.reps)]
    logger.info(
        "Running %s experiment '%s': %i replications on %i threads",
        experiment,
        scenario.name,
        len(units),
        threads,
    )

    async with Scheduler(limit=max(1, threads)) as scheduler:
        jobs = [
            await scheduler.spawn(
                asyncio.to_thread(_replicate, scenario, truth, experiment, n, rep)
            )
            for n, rep in units
        ]
        # Merged in (n, rep) order whatever the completion order
        outcomes = [await job.wait() for job in jobs]

    result = SimResult()
    for records, notices in outcomes:
        result.records.extend(records)
        result.notices.extend(notices)
    return result


async def efficiency_experiment(scenario: Scenario, threads: int = 1) -> SimResult:
    """
    Clean-data replications over `scenario.n_grid`, recording KL(MLE)/KL(estimator) for every estimator.
    """
    if not scenario.n_grid:
        raise ValueError("Efficiency experiments require a non-empty n_grid")
    return await _run(scenario, Experiment.EFFICIENCY, threads)


async def contamination_experiment(scenario: Scenario, threads: int = 1) -> SimResult:
    """
    Contaminated replications at `scenario.n`, recording accuracy and detection metrics for every estimator.
    """
    return await _run(scenario, Experiment.CONTAMINATION, threads)


async def run_experiment(scenario: Scenario, threads: int = 1) -> SimResult:
    if scenario.experiment is Experiment.EFFICIENCY:
        return await efficiency_experiment(scenario, threads)
    return await contamination_experiment(scenario, threads)
