"""
Base classes shared by the regression models.
"""

import logging
from abc import ABC, abstractmethod
from typing import Optional, Sequence

import numpy as np
from sklearn.metrics import mean_squared_error, r2_score

from ..errors import DegenerateInputError, ParameterError

logger = logging.getLogger(__name__)


def standardized_residuals(fit) -> np.ndarray:
    """Mean-centred residuals divided by their standard deviation.

    Parameters
    ----------
    fit : OlsFit, GwrFit or array_like
        A fit with a ``residuals`` attribute, or the residuals themselves.

    Returns
    -------
    numpy.ndarray
        Residuals with mean zero and sample standard deviation (``n - 1``
        denominator) one.

    Raises
    ------
    DegenerateInputError
        If the residuals have zero variance, e.g. for a perfect fit.
    """
    residuals = np.asarray(getattr(fit, "residuals", fit), dtype=float)
    if residuals.size < 2:
        raise ParameterError("Need at least two residuals to standardise")
    centred = residuals - residuals.mean()
    sd = np.std(centred, ddof=1)
    scale = max(float(np.max(np.abs(residuals))), 1.0)
    if not sd > 1e-12 * scale:
        raise DegenerateInputError(
            "Residuals have zero variance, cannot standardise them"
        )
    return centred / sd


def r_squared(y, prediction) -> float:
    """Coefficient of determination, zero when ``y`` is constant."""
    y = np.asarray(y, dtype=float)
    if np.ptp(y) == 0.0:
        return 0.0
    return float(r2_score(y, prediction))


def rmse(y, prediction) -> float:
    """Root mean squared error."""
    return float(np.sqrt(mean_squared_error(y, prediction)))


class Regressor(ABC):
    """Base object for models used in the cross-validation harness.

    Subclasses wrap one of the model implementations and expose a common
    ``fit``/``predict`` interface on plain arrays.
    """

    name: Optional[str] = None
    """Name of the model in reports."""
    in_sample = False
    """
    Indicates if the model is reported with in-sample fit statistics rather
    than cross-validation (the statistical models).
    """
    requires_coordinates = False
    """
    Indicates if the model needs the centroid of every row, e.g. for
    spatial kernels.
    """

    def __init__(self, columns: Optional[Sequence[str]] = None):
        self.columns = None if columns is None else tuple(columns)
        self.result = None

    def _check_coordinates(self, coordinates):
        if self.requires_coordinates and coordinates is None:
            raise ParameterError(f"Model {self.name} requires coordinates")

    @abstractmethod
    def fit(self, X, y, coordinates=None) -> "Regressor":
        """Fit the model.

        Parameters
        ----------
        X : numpy.ndarray
            Standardised design matrix of shape (n, p).
        y : numpy.ndarray
            Target values.
        coordinates : numpy.ndarray, optional
            Centroids of the rows, shape (n, 2).

        Returns
        -------
        Regressor
            The fitted model.
        """
        raise NotImplementedError

    @abstractmethod
    def predict(self, X, coordinates=None) -> np.ndarray:
        """Predict the target for new rows."""
        raise NotImplementedError

    def summary(self) -> dict:
        """JSON-friendly summary of the fitted model."""
        return {}
