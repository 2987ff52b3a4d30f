from enum import StrEnum
from typing import Self

from pydantic import BaseModel, ConfigDict, Field, model_validator


class IterCapMode(StrEnum):
    FIXED = "fixed"
    UNTIL_CONVERGENCE = "until_convergence"


class FlipFlopConfig(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    fixed_iters: int = Field(default=2, ge=1)
    iter_cap_mode: IterCapMode = IterCapMode.UNTIL_CONVERGENCE
    max_iters: int = Field(default=100, ge=1)
    tol: float = Field(default=1e-8, gt=0)

    @classmethod
    def fixed(cls, iters: int) -> "FlipFlopConfig":
        """
        Exactly `iters` flip-flop iterations, converged or not.
        """
        return cls(
            fixed_iters=iters,
            iter_cap_mode=IterCapMode.FIXED,
        )

    @property
    def iteration_cap(self) -> int:
        if self.iter_cap_mode is IterCapMode.FIXED:
            return self.fixed_iters
        return self.max_iters


class Subsampling(StrEnum):
    AUTO = "auto"
    OFF = "off"


class MMCDConfig(BaseModel):
    """
    Fast-MMCD settings.

    `h = None` resolves to ⌊(n+d+2)/2⌋, the maximum breakdown choice. The `flip_flop` settings drive every until-convergence MLE (refinement C-steps and reweighting), while trials use `initial_iters` fixed iterations.
    """

    model_config = ConfigDict(extra="forbid", frozen=True)

    cstep_tol: float = Field(default=1e-8, gt=0)
    detection_quantile: float = Field(default=0.975, gt=0, lt=1)
    flip_flop: FlipFlopConfig = FlipFlopConfig()
    h: int | None = Field(default=None, ge=1)
    initial_iters: int = Field(default=2, ge=1)
    max_csteps: int = Field(default=200, ge=1)
    n_initial_subsets: int = Field(default=500, ge=1)
    n_keep: int = Field(default=10, ge=1)
    reweight_quantile: float = Field(default=0.975, gt=0, lt=1)
    rng_seed: int = Field(default=0, ge=0, lt=2**64)
    subsample_block: int = Field(default=300, ge=2)
    subsample_threshold: int = Field(default=1000, ge=2)
    subsampling: Subsampling = Subsampling.AUTO
    threads: int = Field(default=1, ge=1)

    @model_validator(mode="after")
    def _check_keep(self) -> Self:
        if self.n_keep > self.n_initial_subsets:
            raise ValueError(
                f"n_keep ({self.n_keep}) cannot exceed n_initial_subsets ({self.n_initial_subsets})"
            )
        return self
