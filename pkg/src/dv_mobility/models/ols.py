"""
Ordinary least squares with coefficient inference.
"""

import logging
from dataclasses import dataclass
from typing import Optional, Sequence, Tuple

import numpy as np
import pandas as pd
import statsmodels.api as sm
from scipy import linalg

from ..errors import ParameterError, RankDeficiencyError
from .base import Regressor

logger = logging.getLogger(__name__)

RANK_TOLERANCE = 1e-10
"""Relative tolerance on the diagonal of the pivoted R factor."""


def _as_design(X, columns=None) -> Tuple[np.ndarray, Tuple[str, ...]]:
    if hasattr(X, "values") and hasattr(X, "columns"):
        columns = X.columns if columns is None else columns
        X = X.values
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X[:, np.newaxis]
    if columns is None:
        columns = tuple(f"x{j}" for j in range(X.shape[1]))
    return X, tuple(columns)


def with_intercept(X: np.ndarray) -> np.ndarray:
    return np.column_stack([np.ones(len(X)), X])


def check_rank(design: np.ndarray, names: Sequence[str]) -> None:
    """Raise if the design matrix is not of full column rank.

    Uses a column-pivoted QR decomposition; the columns pivoted past the
    numerical rank are reported as dependent.
    """
    _, r, pivots = linalg.qr(design, mode="economic", pivoting=True)
    diagonal = np.abs(np.diag(r))
    if not diagonal.size or diagonal[0] == 0:
        raise RankDeficiencyError("Design matrix is zero", list(names))
    rank = int(np.sum(diagonal > RANK_TOLERANCE * diagonal[0]))
    if rank < design.shape[1]:
        dependent = [names[i] for i in sorted(pivots[rank:])]
        raise RankDeficiencyError(
            f"Design matrix has rank {rank} < {design.shape[1]}, "
            f"linearly dependent columns: {dependent}",
            dependent,
        )


@dataclass(frozen=True, eq=False)
class OlsFit:
    """Result of :py:func:`ols_fit`.

    Arrays of coefficients start with the intercept.
    """

    columns: Tuple[str, ...]
    coefficients: np.ndarray
    std_errors: np.ndarray
    t_values: np.ndarray
    p_values: np.ndarray
    fitted: np.ndarray
    residuals: np.ndarray
    rss: float
    r2: float
    adj_r2: float
    aic: float
    n: int
    p: int

    @property
    def names(self) -> Tuple[str, ...]:
        return ("intercept",) + self.columns

    @property
    def sigma2(self) -> float:
        return self.rss / (self.n - self.p - 1)

    @property
    def rmse(self) -> float:
        return float(np.sqrt(self.rss / self.n))

    def predict(self, X) -> np.ndarray:
        X, _ = _as_design(X)
        if X.shape[1] != self.p:
            raise ParameterError(
                f"Expected {self.p} columns, got {X.shape[1]}"
            )
        return with_intercept(X) @ self.coefficients

    def to_frame(self) -> pd.DataFrame:
        """Coefficient table: variable, coefficient, std_err, t, p."""
        return pd.DataFrame(
            {
                "variable": self.names,
                "coefficient": self.coefficients,
                "std_err": self.std_errors,
                "t": self.t_values,
                "p": self.p_values,
            }
        )

    def significant(self, alpha: float = 0.05) -> pd.DataFrame:
        """Slopes with ``p < alpha`` ranked from largest to smallest."""
        frame = self.to_frame().iloc[1:]
        frame = frame[frame["p"] < alpha]
        return frame.sort_values(
            "coefficient", ascending=False, kind="stable"
        ).reset_index(drop=True)

    def summary(self) -> dict:
        return {
            "r2": self.r2,
            "adj_r2": self.adj_r2,
            "aic": self.aic,
            "rmse": self.rmse,
            "rss": self.rss,
            "n": self.n,
            "p": self.p,
        }


def ols_fit(X, y, columns: Optional[Sequence[str]] = None) -> OlsFit:
    """Fit a linear model with an intercept by least squares.

    Parameters
    ----------
    X : FeatureMatrix or array_like
        Design matrix without the intercept column.
    y : array_like
        Target.
    columns : Sequence[str], optional
        Column names, taken from ``X`` when it is a feature matrix.

    Returns
    -------
    OlsFit
        Coefficients with standard errors, t and two-sided p-values on
        ``n - p - 1`` degrees of freedom, and goodness of fit. The AIC is
        ``n ln(2 pi RSS / n) + n + 2 (p + 2)``.

    Raises
    ------
    ParameterError
        If there are not more rows than columns plus one.
    RankDeficiencyError
        If the columns are linearly dependent.
    """
    X, columns = _as_design(X, columns)
    y = np.asarray(y, dtype=float).reshape(-1)
    n, p = X.shape
    if len(y) != n:
        raise ParameterError(f"X has {n} rows but y has {len(y)}")
    if n <= p + 1:
        raise ParameterError(
            f"OLS needs more rows than columns plus one, got {n} x {p}"
        )
    design = with_intercept(X)
    check_rank(design, ("intercept",) + columns)

    with np.errstate(divide="ignore", invalid="ignore"):
        result = sm.OLS(y, design).fit(method="qr")
        coefficients = np.asarray(result.params, dtype=float)
        std_errors = np.asarray(result.bse, dtype=float)
        t_values = np.asarray(result.tvalues, dtype=float)
        p_values = np.asarray(result.pvalues, dtype=float)

    fitted = design @ coefficients
    residuals = y - fitted
    rss = float(residuals @ residuals)
    tss = float(np.sum((y - y.mean()) ** 2))
    r2 = 1.0 - rss / tss if tss > 0 else 0.0
    adj_r2 = 1.0 - (1.0 - r2) * (n - 1) / (n - p - 1)
    with np.errstate(divide="ignore"):
        aic = float(n * np.log(2 * np.pi * rss / n) + n + 2 * (p + 2))
    fit = OlsFit(
        columns=columns,
        coefficients=coefficients,
        std_errors=std_errors,
        t_values=t_values,
        p_values=p_values,
        fitted=fitted,
        residuals=residuals,
        rss=rss,
        r2=r2,
        adj_r2=adj_r2,
        aic=aic,
        n=n,
        p=p,
    )
    logger.info(
        f"OLS fit: n={n}, p={p}, R2={r2:.4f}, adj R2={adj_r2:.4f}, "
        f"AIC={aic:.2f}"
    )
    return fit


class OlsModel(Regressor):
    """OLS wrapped for the cross-validation harness."""

    name = "ols"
    in_sample = True

    def fit(self, X, y, coordinates=None) -> "OlsModel":
        self.result = ols_fit(X, y, self.columns)
        return self

    def predict(self, X, coordinates=None) -> np.ndarray:
        return self.result.predict(X)

    def summary(self) -> dict:
        return self.result.summary()
