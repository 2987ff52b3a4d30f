from enum import StrEnum
from functools import cached_property
from typing import Any, Self

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

from app.helpers.linalg import (
    ShapeException,
    cholesky_lower,
    inverse_from_cholesky,
    logdet_from_cholesky,
    symmetrize,
)


def _as_float_array(value: Any) -> np.ndarray:
    return np.array(value, dtype=np.float64, copy=True)


class MatrixStack(BaseModel):
    """
    Ordered collection of n real p×q observations, stored as an (n, p, q) array.
    """

    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    data: np.ndarray

    @field_validator("data", mode="before")
    @classmethod
    def _coerce(cls, value: Any) -> np.ndarray:
        return _as_float_array(value)

    @field_validator("data")
    @classmethod
    def _check(cls, value: np.ndarray) -> np.ndarray:
        if value.ndim != 3:
            raise ValueError(f"Expected an (n, p, q) array, got {value.ndim} dimensions")
        if min(value.shape) < 1:
            raise ValueError(f"Every dimension must be at least 1, got {value.shape}")
        if not np.all(np.isfinite(value)):
            raise ValueError("Observations must be finite (no NaN or Inf)")
        value.setflags(write=False)
        return value

    @property
    def n(self) -> int:
        return self.data.shape[0]

    @property
    def p(self) -> int:
        return self.data.shape[1]

    @property
    def q(self) -> int:
        return self.data.shape[2]

    @property
    def shape(self) -> tuple[int, int]:
        return (self.p, self.q)

    def subset(self, indices: np.ndarray | list[int]) -> "MatrixStack":
        return MatrixStack(data=self.data[np.asarray(indices, dtype=np.intp)])

    def vectorized(self) -> np.ndarray:
        """
        (n, pq) array of column-stacked observations, row i being vec(Xᵢ).
        """
        return self.data.transpose(0, 2, 1).reshape(self.n, self.p * self.q)

    def as_column_stack(self) -> "MatrixStack":
        """
        Same observations as pq×1 matrices, the classical multivariate view.
        """
        return MatrixStack(data=self.vectorized()[:, :, np.newaxis])

    @classmethod
    def from_vectorized(cls, rows: np.ndarray, p: int, q: int) -> "MatrixStack":
        rows = np.asarray(rows, dtype=np.float64)
        if rows.ndim != 2 or rows.shape[1] != p * q:
            raise ShapeException(
                f"Expected rows of length {p * q} for {p}x{q} observations, got shape {rows.shape}"
            )
        return cls(data=rows.reshape(rows.shape[0], q, p).transpose(0, 2, 1))


class ParamSet(BaseModel):
    """
    Mean matrix with row and column covariances of a matrix-variate model.

    Both covariances are validated symmetric positive definite on construction. The pair is identified only up to (κΣ^row, Σ^col/κ); `normalized` fixes σ^col₁₁ = 1. Cholesky factors, precisions and log-determinants are derived on first use.
    """

    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    mean: np.ndarray
    sigma_row: np.ndarray
    sigma_col: np.ndarray

    @field_validator("mean", "sigma_row", "sigma_col", mode="before")
    @classmethod
    def _coerce(cls, value: Any) -> np.ndarray:
        return _as_float_array(value)

    @model_validator(mode="after")
    def _check(self) -> Self:
        p, q = self.mean.shape if self.mean.ndim == 2 else (-1, -1)
        if p < 1 or q < 1:
            raise ShapeException(f"Mean must be a p×q matrix, got shape {self.mean.shape}")
        if self.sigma_row.shape != (p, p):
            raise ShapeException(
                f"Row covariance must be {p}x{p}, got {self.sigma_row.shape}"
            )
        if self.sigma_col.shape != (q, q):
            raise ShapeException(
                f"Column covariance must be {q}x{q}, got {self.sigma_col.shape}"
            )
        # Factorize now, raises on asymmetric or non-PD input
        _ = self.chol_row, self.chol_col
        for array in (self.mean, self.sigma_row, self.sigma_col):
            array.setflags(write=False)
        return self

    @property
    def p(self) -> int:
        return self.mean.shape[0]

    @property
    def q(self) -> int:
        return self.mean.shape[1]

    @cached_property
    def chol_row(self) -> np.ndarray:
        return cholesky_lower(self.sigma_row, "sigma_row")

    @cached_property
    def chol_col(self) -> np.ndarray:
        return cholesky_lower(self.sigma_col, "sigma_col")

    @cached_property
    def precision_row(self) -> np.ndarray:
        return inverse_from_cholesky(self.chol_row)

    @cached_property
    def precision_col(self) -> np.ndarray:
        return inverse_from_cholesky(self.chol_col)

    @cached_property
    def logdet_row(self) -> float:
        return logdet_from_cholesky(self.chol_row)

    @cached_property
    def logdet_col(self) -> float:
        return logdet_from_cholesky(self.chol_col)

    @property
    def objective(self) -> float:
        """
        p·ln det Σ^col + q·ln det Σ^row, the quantity minimized by MMCD.
        """
        return self.p * self.logdet_col + self.q * self.logdet_row

    def normalized(self) -> "ParamSet":
        """
        Rebalance the pair so that σ^col₁₁ = 1, the factor moving into Σ^row.
        """
        factor = float(self.sigma_col[0, 0])
        if factor == 1.0:
            return self
        return ParamSet(
            mean=self.mean,
            sigma_row=self.sigma_row * factor,
            sigma_col=symmetrize(self.sigma_col / factor),
        )

    def scaled(self, factor: float) -> "ParamSet":
        """
        Scale the Kronecker covariance by `factor`, applied to Σ^row.
        """
        return ParamSet(
            mean=self.mean,
            sigma_row=self.sigma_row * factor,
            sigma_col=self.sigma_col,
        )

    def rebalanced(self, kappa: float) -> "ParamSet":
        return ParamSet(
            mean=self.mean,
            sigma_row=self.sigma_row * kappa,
            sigma_col=self.sigma_col / kappa,
        )

    def transformed(
        self,
        a: np.ndarray,
        b: np.ndarray,
        c: np.ndarray | None = None,
    ) -> "ParamSet":
        """
        Parameters of AXB + C when X follows these parameters.
        """
        shift = np.zeros((a.shape[0], b.shape[1])) if c is None else c
        return ParamSet(
            mean=a @ self.mean @ b + shift,
            sigma_row=symmetrize(a @ self.sigma_row @ a.T),
            sigma_col=symmetrize(b.T @ self.sigma_col @ b),
        )

    def kronecker(self) -> np.ndarray:
        """
        Dense Σ^col ⊗ Σ^row, the covariance of vec(X).
        """
        return np.kron(self.sigma_col, self.sigma_row)

    def vectorized(self) -> "ParamSet":
        """
        Same model seen on vec(X): a pq×1 mean with Σ^col ⊗ Σ^row as row covariance.
        """
        return ParamSet(
            mean=self.mean.reshape(-1, order="F")[:, np.newaxis],
            sigma_row=self.kronecker(),
            sigma_col=np.ones((1, 1)),
        )


class Family(StrEnum):
    MATRIX_NORMAL = "matrix_normal"
    MATRIX_T = "matrix_t"


class DistributionSpec(BaseModel):
    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    dof: float | None = Field(default=None, gt=0)
    family: Family = Family.MATRIX_NORMAL
    params: ParamSet

    @model_validator(mode="after")
    def _check_dof(self) -> Self:
        if self.family is Family.MATRIX_T and self.dof is None:
            raise ValueError("Matrix-t requires positive degrees of freedom")
        if self.family is Family.MATRIX_NORMAL and self.dof is not None:
            raise ValueError("Degrees of freedom only apply to the matrix-t family")
        return self
