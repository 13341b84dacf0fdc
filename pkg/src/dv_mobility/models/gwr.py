"""
Geographically weighted regression with a Gaussian kernel.

Each unit gets its own weighted least-squares fit, with weights that decay
with the great-circle distance between centroids. The adaptive kernel sets
the bandwidth of unit ``i`` to the distance of its k-th nearest neighbour,
the fixed kernel uses one distance in metres for every unit.
"""

import logging
from dataclasses import dataclass, field
from typing import Callable, Dict, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from ..errors import (
    BandwidthError,
    NumericalError,
    ParameterError,
    RankDeficiencyError,
    SearchError,
)
from ..geo import pairwise_distances
from ..utils import map_jobs
from .base import Regressor, r_squared, standardized_residuals
from .ols import _as_design, with_intercept

logger = logging.getLogger(__name__)

KERNELS = ("adaptive", "fixed")

RANK_TOLERANCE = 1e-10
"""Singular values below this fraction of the largest are treated as zero."""

GOLDEN_DELTA = 0.38197
"""Fraction of the bracket between an endpoint and the next interior point."""


def _as_points(centroids) -> np.ndarray:
    points = np.asarray(centroids, dtype=float)
    if points.ndim != 2 or points.shape[1] != 2:
        raise ParameterError("Centroids must have shape (n, 2)")
    return points


def _adaptive_bandwidths(distances: np.ndarray, k: int, offset: int):
    """k-th nearest neighbour distance of every row.

    ``offset`` is one when each row contains the focal unit itself at
    distance zero, zero for points outside the data.
    """
    ordered = np.sort(distances, axis=1)
    bandwidths = ordered[:, k - 1 + offset].copy()
    for i in np.flatnonzero(bandwidths <= 0):
        positive = ordered[i][ordered[i] > 0]
        if not positive.size:
            raise BandwidthError(
                f"Every point coincides with focal unit {i}, the bandwidth "
                "is zero"
            )
        bandwidths[i] = positive[0]
    return bandwidths


def kernel_weights(
    distances: np.ndarray,
    bandwidth,
    kernel: str = "adaptive",
    offset: int = 1,
) -> np.ndarray:
    """Gaussian kernel weights for rows of a distance matrix.

    Parameters
    ----------
    distances : numpy.ndarray
        Distances from each focal point (rows) to the data points.
    bandwidth : int or float
        Number of neighbours for the adaptive kernel, metres for the fixed
        kernel.
    kernel : {'adaptive', 'fixed'}
        Kernel type.
    offset : int
        Number of leading zero distances belonging to the focal point
        itself, see :py:func:`_adaptive_bandwidths`.

    Returns
    -------
    numpy.ndarray
        Weights ``exp(-0.5 (d / b)^2)`` with the same shape as
        ``distances``.
    """
    distances = np.atleast_2d(distances)
    if kernel == "adaptive":
        k = int(bandwidth)
        if not 1 <= k < distances.shape[1] + 1 - offset:
            raise ParameterError(
                f"Adaptive bandwidth must satisfy 1 <= k < n, got {bandwidth}"
            )
        b = _adaptive_bandwidths(distances, k, offset)[:, np.newaxis]
    elif kernel == "fixed":
        if not bandwidth > 0:
            raise ParameterError(
                f"Fixed bandwidth must be positive, got {bandwidth}"
            )
        b = float(bandwidth)
    else:
        raise ParameterError(f"Unknown kernel: {kernel}")
    return np.exp(-0.5 * (distances / b) ** 2)


def gaussian_weights(i: int, centroids, k: int) -> np.ndarray:
    """Adaptive Gaussian weights of every unit around focal unit ``i``.

    The bandwidth is the distance from unit ``i`` to its k-th nearest
    neighbour; if that is zero (duplicate centroids) the smallest positive
    distance is used instead.
    """
    points = _as_points(centroids)
    n = len(points)
    if not 1 <= k < n:
        raise ParameterError(f"k must satisfy 1 <= k < n={n}, got {k}")
    distances = pairwise_distances(points[i : i + 1], points)
    return kernel_weights(distances, k, "adaptive", offset=1)[0]


def _local_fit(design, y, weights, focal, label):
    """Weighted least squares at one focal point.

    Returns the local coefficients, the hat row of the focal point and the
    diagonal of C C^T where C maps y to the coefficients.
    """
    root = np.sqrt(weights)
    u, s, vt = np.linalg.svd(
        design * root[:, np.newaxis], full_matrices=False
    )
    if s[0] == 0 or s[-1] <= RANK_TOLERANCE * s[0]:
        raise RankDeficiencyError(
            f"Local design matrix at focal unit {label} is rank deficient "
            f"(singular values {s[-1]:.3g} / {s[0]:.3g})"
        )
    c = (vt.T / s) @ (u.T * root)
    coefficients = c @ y
    hat_row = None if focal is None else focal @ c
    return coefficients, hat_row, np.sum(c * c, axis=1)


@dataclass(frozen=True, eq=False)
class GwrFit:
    """Result of :py:func:`gwr_fit`.

    Arrays of local coefficients have one row per unit with the intercept in
    the first column.
    """

    columns: Tuple[str, ...]
    bandwidth: float
    kernel: str
    coefficients: np.ndarray
    std_errors: np.ndarray
    t_values: np.ndarray
    fitted: np.ndarray
    residuals: np.ndarray
    tr_s: float
    tr_sts: float
    rss: float
    r2: float
    adj_r2: float
    aicc: float
    sigma2: float
    """Residual variance RSS / (n - 2 tr(S) + tr(S^T S))."""
    n: int
    p: int
    design: np.ndarray = field(repr=False)
    y: np.ndarray = field(repr=False)
    centroids: np.ndarray = field(repr=False)
    ids: Optional[Tuple[str, ...]] = None

    @property
    def names(self) -> Tuple[str, ...]:
        return ("intercept",) + self.columns

    @property
    def effective_parameters(self) -> float:
        return 2 * self.tr_s - self.tr_sts

    @property
    def rmse(self) -> float:
        return float(np.sqrt(self.rss / self.n))

    @property
    def std_residuals(self) -> np.ndarray:
        return standardized_residuals(self)

    def local_frame(self) -> pd.DataFrame:
        """Local coefficients, standard errors and t-values per unit."""
        data = {}
        for j, name in enumerate(self.names):
            data[f"coef_{name}"] = self.coefficients[:, j]
        for j, name in enumerate(self.names):
            data[f"se_{name}"] = self.std_errors[:, j]
            data[f"t_{name}"] = self.t_values[:, j]
        data["local_pred"] = self.fitted
        data["std_resid"] = self.std_residuals
        index = pd.Index(
            self.ids if self.ids is not None else range(self.n), name="cbg_id"
        )
        return pd.DataFrame(data, index=index)

    def predict(self, X, centroids, threads: int = 1) -> np.ndarray:
        """Predict at new locations from local fits on the training data."""
        X, _ = _as_design(X)
        if X.shape[1] != self.p:
            raise ParameterError(
                f"Expected {self.p} columns, got {X.shape[1]}"
            )
        points = _as_points(centroids)
        if self.kernel == "uniform":
            weights = np.ones((len(points), self.n))
        else:
            weights = kernel_weights(
                pairwise_distances(points, self.centroids),
                self.bandwidth,
                self.kernel,
                offset=0,
            )
        design = with_intercept(X)

        def local(i):
            coefficients, _, _ = _local_fit(
                self.design, self.y, weights[i], None, f"new point {i}"
            )
            return design[i] @ coefficients

        return np.asarray(map_jobs(local, range(len(design)), threads))

    def summary(self) -> dict:
        return {
            "bandwidth": self.bandwidth,
            "kernel": self.kernel,
            "tr_S": self.tr_s,
            "tr_StS": self.tr_sts,
            "effective_parameters": self.effective_parameters,
            "aicc": self.aicc,
            "r2": self.r2,
            "adj_r2": self.adj_r2,
            "rmse": self.rmse,
            "rss": self.rss,
            "sigma2": self.sigma2,
            "n": self.n,
            "p": self.p,
        }


def gwr_fit(
    X,
    y,
    centroids,
    k,
    kernel: str = "adaptive",
    uniform: bool = False,
    columns: Optional[Sequence[str]] = None,
    ids: Optional[Sequence[str]] = None,
    threads: int = 1,
    distances: Optional[np.ndarray] = None,
) -> GwrFit:
    """Fit a GWR model with a Gaussian kernel.

    Parameters
    ----------
    X : FeatureMatrix or array_like
        Design matrix without the intercept column.
    y : array_like
        Target.
    centroids : array_like
        (lon, lat) of every row.
    k : int or float
        Bandwidth: neighbour count for the adaptive kernel, metres for the
        fixed kernel.
    kernel : {'adaptive', 'fixed'}
        Kernel type.
    uniform : bool
        Give every unit weight one, in which case every local fit equals
        the global OLS fit.
    columns, ids : Sequence[str], optional
        Names of the columns and rows.
    threads : int
        Number of threads for the local fits.
    distances : numpy.ndarray, optional
        Precomputed pairwise centroid distances.

    Returns
    -------
    GwrFit
        Local coefficients, hat-matrix traces and goodness of fit. The AICc
        is ``2n ln(sigma) + n ln(2 pi) + n (n + tr(S)) / (n - 2 - tr(S))``
        with ``sigma^2 = RSS / n``.

    Raises
    ------
    RankDeficiencyError
        If a local design matrix is rank deficient; the message names the
        focal unit.
    BandwidthError
        If ``n - 2 - tr(S) <= 0``.
    """
    if ids is None and hasattr(X, "ids"):
        ids = X.ids
    X, columns = _as_design(X, columns)
    y = np.asarray(y, dtype=float).reshape(-1)
    points = _as_points(centroids)
    n, p = X.shape
    if len(y) != n or len(points) != n:
        raise ParameterError("X, y and centroids must have the same rows")
    if n <= p + 1:
        raise ParameterError(
            f"GWR needs more rows than columns plus one, got {n} x {p}"
        )
    labels = tuple(ids) if ids is not None else tuple(range(n))
    design = with_intercept(X)

    if uniform:
        weights = np.ones((n, n))
    else:
        if distances is None:
            distances = pairwise_distances(points)
        weights = kernel_weights(distances, k, kernel, offset=1)

    def local(i):
        return _local_fit(design, y, weights[i], design[i], labels[i])

    results = map_jobs(local, range(n), threads)
    coefficients = np.array([r[0] for r in results])
    hat_rows = np.array([r[1] for r in results])
    cc_diag = np.array([r[2] for r in results])

    fitted = np.sum(design * coefficients, axis=1)
    residuals = y - fitted
    rss = float(residuals @ residuals)
    tr_s = float(np.trace(hat_rows))
    tr_sts = float(np.sum(hat_rows**2))
    if n - 2 - tr_s <= 0:
        raise BandwidthError(
            f"Bandwidth {k} is too small: n - 2 - tr(S) = {n - 2 - tr_s:.3f}"
        )
    with np.errstate(divide="ignore"):
        aicc = float(
            n * np.log(rss / n)
            + n * np.log(2 * np.pi)
            + n * (n + tr_s) / (n - 2 - tr_s)
        )
    r2 = r_squared(y, fitted)
    effective = 2 * tr_s - tr_sts
    adj_r2 = 1.0 - (1.0 - r2) * (n - 1) / (n - effective - 1)
    sigma2 = rss / (n - 2 * tr_s + tr_sts)
    std_errors = np.sqrt(sigma2 * cc_diag)
    with np.errstate(divide="ignore", invalid="ignore"):
        t_values = coefficients / std_errors
    fit = GwrFit(
        columns=columns,
        bandwidth=k,
        kernel="uniform" if uniform else kernel,
        coefficients=coefficients,
        std_errors=std_errors,
        t_values=t_values,
        fitted=fitted,
        residuals=residuals,
        tr_s=tr_s,
        tr_sts=tr_sts,
        rss=rss,
        r2=r2,
        adj_r2=adj_r2,
        aicc=aicc,
        sigma2=sigma2,
        n=n,
        p=p,
        design=design,
        y=y,
        centroids=points,
        ids=None if ids is None else tuple(ids),
    )
    logger.debug(
        f"GWR fit: bandwidth={k}, tr(S)={tr_s:.2f}, AICc={aicc:.3f}"
    )
    return fit


def golden_section_search(
    func: Callable[[float], float],
    lower: float,
    upper: float,
    integer: bool = True,
    tol: float = 1.0,
    max_iter: int = 200,
) -> Tuple[float, float, Dict[float, float]]:
    """Minimise a function of one variable on a bracket.

    Interior points are rounded to integers when ``integer`` is True and
    every evaluation is cached. Once the bracket is narrow every remaining
    integer is evaluated, so for a unimodal function the exact minimiser is
    returned. Ties go to the smaller argument.

    Parameters
    ----------
    func : Callable
        Function to minimise. Failed evaluations should return ``inf``.
    lower, upper : float
        Bracket.
    integer : bool
        Search over integers.
    tol : float
        Width of the bracket at which the continuous search stops.
    max_iter : int
        Maximum number of bracket reductions.

    Returns
    -------
    float
        Minimiser.
    float
        Minimum.
    dict
        Every evaluation.
    """
    cache: Dict[float, float] = {}

    def evaluate(x):
        if x not in cache:
            cache[x] = func(x)
            logger.debug(f"Golden section: f({x}) = {cache[x]}")
        return cache[x]

    def interior(a, c):
        b = a + GOLDEN_DELTA * (c - a)
        d = c - GOLDEN_DELTA * (c - a)
        if integer:
            return int(round(b)), int(round(d))
        return b, d

    a, c = (int(lower), int(upper)) if integer else (lower, upper)
    width = 2 if integer else tol
    iteration = 0
    while c - a > width and iteration < max_iter:
        b, d = interior(a, c)
        if evaluate(b) <= evaluate(d):
            c = d
        else:
            a = b
        iteration += 1
    if integer:
        for x in range(a, c + 1):
            evaluate(x)
    else:
        evaluate(a)
        evaluate(c)
    best = min(cache, key=lambda x: (cache[x], x))
    return best, cache[best], dict(sorted(cache.items()))


@dataclass(frozen=True, eq=False)
class BandwidthSearch:
    """Result of :py:func:`golden_search_bandwidth`."""

    bandwidth: float
    aicc: float
    profile: Dict[float, float]
    """AICc of every evaluated bandwidth, ``inf`` for failed fits."""
    fit: GwrFit


def golden_search_bandwidth(
    X,
    y,
    centroids,
    k_min: Optional[int] = None,
    k_max: Optional[int] = None,
    kernel: str = "adaptive",
    threads: int = 1,
    columns: Optional[Sequence[str]] = None,
) -> BandwidthSearch:
    """Select the bandwidth minimising the AICc by golden-section search.

    Parameters
    ----------
    X, y, centroids
        As for :py:func:`gwr_fit`.
    k_min, k_max : int, optional
        Bracket. For the adaptive kernel they default to ``p + 2`` and
        ``n - 1``; for the fixed kernel to the smallest and largest
        positive centroid distance.
    kernel : {'adaptive', 'fixed'}
        Kernel type.
    threads : int
        Number of threads for the local fits.
    columns : Sequence[str], optional
        Column names when ``X`` is a plain array.

    Returns
    -------
    BandwidthSearch
        Chosen bandwidth, its AICc and fit, and the evaluated profile.

    Raises
    ------
    SearchError
        If every evaluated bandwidth fails.
    """
    ids = getattr(X, "ids", None)
    X, columns = _as_design(X, columns)
    n, p = X.shape
    points = _as_points(centroids)
    distances = pairwise_distances(points)
    integer = kernel == "adaptive"
    if integer:
        k_min = p + 2 if k_min is None else int(k_min)
        k_max = n - 1 if k_max is None else int(k_max)
        if not (p + 2 <= k_min < k_max <= n - 1):
            raise ParameterError(
                f"Bandwidth bracket must satisfy p + 2 <= k_min < k_max <= "
                f"n - 1, got [{k_min}, {k_max}] with n={n}, p={p}"
            )
    else:
        positive = distances[distances > 0]
        k_min = float(positive.min()) if k_min is None else float(k_min)
        k_max = float(positive.max()) if k_max is None else float(k_max)
        if not 0 < k_min < k_max:
            raise ParameterError(
                f"Invalid fixed bandwidth bracket [{k_min}, {k_max}]"
            )

    failures = {}

    def score(k):
        try:
            return gwr_fit(
                X,
                y,
                points,
                k,
                kernel=kernel,
                columns=columns,
                threads=threads,
                distances=distances,
            ).aicc
        except NumericalError as e:
            failures[k] = str(e)
            return np.inf

    best, aicc, profile = golden_section_search(
        score,
        k_min,
        k_max,
        integer=integer,
        tol=1e-3 * (k_max - k_min),
    )
    if not np.isfinite(aicc):
        details = "; ".join(
            f"k={k}: {msg}" for k, msg in list(failures.items())[:5]
        )
        raise SearchError(
            f"All {len(profile)} evaluated bandwidths failed ({details})"
        )
    logger.info(f"Selected GWR bandwidth {best} with AICc {aicc:.3f}")
    fit = gwr_fit(
        X,
        y,
        points,
        best,
        kernel=kernel,
        columns=columns,
        ids=ids,
        threads=threads,
        distances=distances,
    )
    return BandwidthSearch(
        bandwidth=best, aicc=aicc, profile=profile, fit=fit
    )


class GwrModel(Regressor):
    """GWR wrapped for the cross-validation harness.

    The bandwidth is searched on the training rows unless ``bandwidth`` is
    given.
    """

    name = "gwr"
    in_sample = True
    requires_coordinates = True

    def __init__(
        self,
        columns: Optional[Sequence[str]] = None,
        bandwidth=None,
        k_min: Optional[int] = None,
        k_max: Optional[int] = None,
        kernel: str = "adaptive",
        threads: int = 1,
    ):
        super().__init__(columns)
        self.bandwidth = bandwidth
        self.k_min = k_min
        self.k_max = k_max
        self.kernel = kernel
        self.threads = threads
        self.search = None

    def fit(self, X, y, coordinates=None) -> "GwrModel":
        self._check_coordinates(coordinates)
        if self.bandwidth is None:
            self.search = golden_search_bandwidth(
                X,
                y,
                coordinates,
                k_min=self.k_min,
                k_max=self.k_max,
                kernel=self.kernel,
                threads=self.threads,
                columns=self.columns,
            )
            self.result = self.search.fit
        else:
            self.result = gwr_fit(
                X,
                y,
                coordinates,
                self.bandwidth,
                kernel=self.kernel,
                columns=self.columns,
                threads=self.threads,
            )
        return self

    def predict(self, X, coordinates=None) -> np.ndarray:
        self._check_coordinates(coordinates)
        return self.result.predict(X, coordinates, threads=self.threads)

    def summary(self) -> dict:
        return self.result.summary()
