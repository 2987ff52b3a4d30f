from typing import Self

import numpy as np
from pydantic import BaseModel, ConfigDict, model_validator

from app.models.config import MMCDConfig
from app.models.fit import MMCDFit, TrialRecord
from app.models.matvar import ParamSet


class ParamSetJSON(BaseModel):
    """
    Matrix-variate parameters as nested row-major lists.
    """

    model_config = ConfigDict(extra="forbid")

    mean: list[list[float]]
    sigma_col: list[list[float]]
    sigma_row: list[list[float]]

    @classmethod
    def from_params(cls, params: ParamSet) -> "ParamSetJSON":
        return cls(
            mean=params.mean.tolist(),
            sigma_col=params.sigma_col.tolist(),
            sigma_row=params.sigma_row.tolist(),
        )

    def to_params(self) -> ParamSet:
        return ParamSet(
            mean=np.array(self.mean),
            sigma_row=np.array(self.sigma_row),
            sigma_col=np.array(self.sigma_col),
        )


class FitJSON(BaseModel):
    """
    Serialized MMCD fit, written by `mmcd fit` and read by `mmcd detect` and `mmcd explain`.
    """

    model_config = ConfigDict(extra="forbid")

    c_raw: float
    c_rew: float
    config: MMCDConfig
    distances_raw: list[float]
    distances_reweighted: list[float]
    h: int
    h_subset: list[int]
    n: int
    objective: float
    p: int
    q: int
    raw: ParamSetJSON
    reweighted: ParamSetJSON
    weights: list[bool]

    @model_validator(mode="after")
    def _check_dims(self) -> Self:
        for name in ("raw", "reweighted"):
            params: ParamSetJSON = getattr(self, name)
            if (
                len(params.mean) != self.p
                or any(len(row) != self.q for row in params.mean)
                or len(params.sigma_row) != self.p
                or any(len(row) != self.p for row in params.sigma_row)
                or len(params.sigma_col) != self.q
                or any(len(row) != self.q for row in params.sigma_col)
            ):
                raise ValueError(f"'{name}' parameters do not match shape {self.p}x{self.q}")
        for name in ("distances_raw", "distances_reweighted", "weights"):
            if len(getattr(self, name)) != self.n:
                raise ValueError(f"'{name}' must hold n = {self.n} entries")
        if len(self.h_subset) != self.h:
            raise ValueError(f"'h_subset' must hold h = {self.h} indices")
        if self.h_subset != sorted(set(self.h_subset)) or (
            self.h_subset and not 0 <= self.h_subset[0] <= self.h_subset[-1] < self.n
        ):
            raise ValueError("'h_subset' must be sorted distinct indices in [0, n)")
        return self

    @classmethod
    def from_fit(cls, fit: MMCDFit, config: MMCDConfig) -> "FitJSON":
        p, q = fit.raw.mean.shape
        return cls(
            c_raw=fit.c_raw,
            c_rew=fit.c_rew,
            config=config,
            distances_raw=fit.distances_raw.tolist(),
            distances_reweighted=fit.distances_reweighted.tolist(),
            h=fit.h,
            h_subset=fit.h_subset,
            n=fit.weights.size,
            objective=fit.objective,
            p=p,
            q=q,
            raw=ParamSetJSON.from_params(fit.raw),
            reweighted=ParamSetJSON.from_params(fit.reweighted),
            weights=fit.weights.tolist(),
        )

    def to_fit(self, trial_log: list[TrialRecord] | None = None) -> MMCDFit:
        """
        Rebuild the fit; the trial log is not serialized.
        """
        return MMCDFit(
            c_raw=self.c_raw,
            c_rew=self.c_rew,
            distances_raw=np.array(self.distances_raw),
            distances_reweighted=np.array(self.distances_reweighted),
            h=self.h,
            h_subset=self.h_subset,
            objective=self.objective,
            raw=self.raw.to_params(),
            reweighted=self.reweighted.to_params(),
            trial_log=trial_log or [],
            weights=np.array(self.weights, dtype=bool),
        )
