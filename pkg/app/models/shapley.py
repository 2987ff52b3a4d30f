from enum import StrEnum

import numpy as np
from pydantic import BaseModel, ConfigDict


class ShapleyReport(BaseModel):
    """
    Additive decomposition of a squared MMD.

    `cell` sums to `total`; `row` and `col` are its row and column sums.
    """

    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    cell: np.ndarray
    col: np.ndarray
    row: np.ndarray
    total: float


class DetectionResult(BaseModel):
    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    cutoff: float
    distances: np.ndarray
    flags: np.ndarray

    @property
    def n_flagged(self) -> int:
        return int(np.sum(self.flags))


class TransformKind(StrEnum):
    # A and B both permutations, Φ(AXB) = AΦ(X)B
    PERMUTATION = "permutation"
    # A and B both diagonal, Φ(AXB) = Φ(X)
    SCALE = "scale"
    # One of each, the permutation part carries over
    MIXED = "mixed"


class InvarianceReport(BaseModel):
    """
    Largest absolute deviations found by the Shapley invariance checks.
    """

    model_config = ConfigDict(frozen=True)

    kind: TransformKind
    # Φ(X + C) at M + C against Φ(X) at M
    shift: float
    # Φ(AXB) at the transformed parameters against its expected value
    transform: float

    def max_deviation(self) -> float:
        return max(self.shift, self.transform)
