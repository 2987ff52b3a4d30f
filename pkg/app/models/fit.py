import numpy as np
from pydantic import BaseModel, ConfigDict

from app.models.matvar import ParamSet


class MLEFit(BaseModel):
    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    converged: bool
    iters_used: int
    objective: float
    # Objective after every iteration, non-increasing
    objective_trace: list[float]
    params: ParamSet


class CStepResult(BaseModel):
    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    distances: np.ndarray
    fit: MLEFit
    fit_in: MLEFit
    fixed_point: bool
    subset: np.ndarray


class CStepRun(BaseModel):
    """
    Outcome of iterated C-steps from one starting subset.
    """

    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    converged: bool
    distances: np.ndarray
    fit: MLEFit
    # Objective of the starting fit, then after every C-step
    objectives: list[float]
    steps: int
    subset: np.ndarray


class TrialRecord(BaseModel):
    """
    One initial elemental subset: its objective after the trial phase and, for kept trials, after refinement.
    """

    model_config = ConfigDict(frozen=True)

    attempts: int
    block: int | None = None
    objective: float
    refined_objective: float | None = None
    refined_objectives: list[float] | None = None
    trial: int


class MMCDFit(BaseModel):
    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    c_raw: float
    c_rew: float
    distances_raw: np.ndarray
    distances_reweighted: np.ndarray
    h: int
    h_subset: list[int]
    objective: float
    raw: ParamSet
    reweighted: ParamSet
    trial_log: list[TrialRecord]
    weights: np.ndarray

    @property
    def h_reweighted(self) -> int:
        return int(np.sum(self.weights))


class BreakdownInfo(BaseModel):
    model_config = ConfigDict(frozen=True)

    # Regime p, q ≥ 2 not met, MMCD reduces to MCD
    caveat: bool
    d: int
    fraction: float
    h: int
    h_mcd: int
    m_breakdown: int
    vectorized_bound: float
