from enum import StrEnum
from typing import Self

import numpy as np
import pandas as pd
from pydantic import BaseModel, ConfigDict, Field, model_validator

from app.models.config import MMCDConfig
from app.models.matvar import Family

METRICS = ["kl", "frobenius", "angle", "precision", "recall", "f_score", "efficiency", "runtime"]


class CovKind(StrEnum):
    # Equicorrelation, off-diagonals ρ
    FIX = "fix"
    # Autoregressive, entries ρ^|j−k|
    MIX = "mix"
    # Random correlation matrix with low correlations
    RND = "rnd"


class CovSpec(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    dim: int = Field(ge=1)
    kind: CovKind = CovKind.RND
    rho: float | None = Field(default=None, gt=0, lt=1)
    seed: int = Field(default=0, ge=0)

    @model_validator(mode="after")
    def _check_rho(self) -> Self:
        if self.kind is not CovKind.RND and self.rho is None:
            raise ValueError(f"Covariance kind '{self.kind}' requires 0 < rho < 1")
        return self


class ContaminationScheme(StrEnum):
    BLOCK = "block"
    CELL = "cell"
    SHIFT = "shift"


class ContaminationSpec(BaseModel):
    """
    Outlier generation.

    `shift` redraws outliers around an all-γ mean, `block` only redraws their top-left `rows`×`cols` block that way, `cell` permutes a `permute_fraction` of each outlier's cells. `scale` multiplies the row covariance of the outlier distribution.
    """

    model_config = ConfigDict(extra="forbid", frozen=True)

    cols: int = Field(default=5, ge=1)
    epsilon: float = Field(default=0.1, ge=0, lt=0.5)
    gamma: float = 1.0
    permute_fraction: float = Field(default=0.5, gt=0, le=1)
    rows: int = Field(default=2, ge=1)
    scale: float = Field(default=1.0, gt=0)
    scheme: ContaminationScheme = ContaminationScheme.SHIFT


class Estimator(StrEnum):
    # Vectorized MCD, the multivariate baseline
    MCD = "mcd"
    MLE = "mle"
    MMCD = "mmcd"
    MMCD_RAW = "mmcd_raw"
    # True parameters, the benchmark
    TRUTH = "truth"


class Experiment(StrEnum):
    CONTAMINATION = "contamination"
    EFFICIENCY = "efficiency"


class Scenario(BaseModel):
    """
    One simulation setting, replicated `reps` times.

    Contamination experiments run at `n`, efficiency experiments over `n_grid` on clean data.
    """

    model_config = ConfigDict(extra="forbid", frozen=True)

    contamination: ContaminationSpec = ContaminationSpec()
    cov_col: CovSpec
    cov_row: CovSpec
    detection_quantile: float = Field(default=0.99, gt=0, lt=1)
    dof: float | None = Field(default=None, gt=0)
    estimators: list[Estimator] = [
        Estimator.MLE,
        Estimator.MMCD_RAW,
        Estimator.MMCD,
        Estimator.TRUTH,
    ]
    experiment: Experiment = Experiment.CONTAMINATION
    family: Family = Family.MATRIX_NORMAL
    mmcd: MMCDConfig = MMCDConfig()
    n: int = Field(default=100, ge=2)
    n_grid: list[int] = []
    name: str = "scenario"
    p: int = Field(ge=1)
    q: int = Field(ge=1)
    reps: int = Field(default=10, ge=1)
    seed: int = Field(default=0, ge=0, lt=2**64)

    @model_validator(mode="after")
    def _check(self) -> Self:
        if self.cov_row.dim != self.p:
            raise ValueError(f"cov_row.dim ({self.cov_row.dim}) must equal p ({self.p})")
        if self.cov_col.dim != self.q:
            raise ValueError(f"cov_col.dim ({self.cov_col.dim}) must equal q ({self.q})")
        if self.family is Family.MATRIX_T and self.dof is None:
            raise ValueError("family = matrix_t requires dof")
        if self.family is Family.MATRIX_NORMAL and self.dof is not None:
            raise ValueError("dof only applies to family = matrix_t")
        if not self.estimators:
            raise ValueError("At least one estimator is required")
        if self.experiment is Experiment.EFFICIENCY and not self.n_grid:
            raise ValueError("Efficiency experiments require a non-empty n_grid")
        if any(n < 2 for n in self.n_grid):
            raise ValueError("Every n_grid entry must be at least 2")
        if self.contamination.scheme is ContaminationScheme.BLOCK and (
            self.contamination.rows > self.p or self.contamination.cols > self.q
        ):
            raise ValueError(
                f"Block {self.contamination.rows}x{self.contamination.cols} exceeds the {self.p}x{self.q} shape"
            )
        return self


class SimRecord(BaseModel):
    model_config = ConfigDict(frozen=True)

    angle: float
    # KL(MLE) / KL(estimator), efficiency experiments only
    efficiency: float | None = None
    estimator: Estimator
    f_score: float | None = None
    frobenius: float
    kl: float
    n: int
    precision: float | None = None
    recall: float | None = None
    rep: int
    runtime: float
    scenario: str


class SimResult(BaseModel):
    records: list[SimRecord] = []
    # Skipped estimators and other remarks, one line each
    notices: list[str] = []

    def to_frame(self) -> pd.DataFrame:
        columns = ["scenario", "n", "rep", "estimator", *METRICS]
        frame = pd.DataFrame(
            [record.model_dump(mode="json") for record in self.records],
            columns=columns,
        )
        return frame.astype({metric: "float64" for metric in METRICS})

    def summary(self) -> pd.DataFrame:
        """
        Mean, median and standard error of every metric per (n, estimator).

        Metrics not recorded for an estimator are left out.
        """
        long = self.to_frame().melt(
            id_vars=["n", "estimator"],
            value_vars=METRICS,
            var_name="metric",
        )
        long = long.dropna(subset=["value"])
        summary = (
            long.groupby(["n", "estimator", "metric"], sort=True)["value"]
            .agg(["mean", "median", "sem", "count"])
            .reset_index()
        )
        # Single replications have no spread
        summary["sem"] = summary["sem"].fillna(0.0)
        return summary

    def medians(self, metric: str) -> dict[tuple[int, str], float]:
        frame = self.to_frame()
        grouped = frame.groupby(["n", "estimator"])[metric].median()
        return {
            (int(n), str(estimator)): float(value)
            for (n, estimator), value in grouped.items()
            if not np.isnan(value)
        }
