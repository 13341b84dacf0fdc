"""
Correlation, spatial autocorrelation and multicollinearity diagnostics.
"""

import logging
from dataclasses import dataclass, field
from typing import Dict, Iterable, Mapping, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
import statsmodels.api as sm
from scipy import sparse, stats

from .errors import DegenerateInputError, ParameterError
from .geo import WeightsMatrix
from .rates import FeatureMatrix
from .utils import as_float_array, derive_seed, map_jobs

logger = logging.getLogger(__name__)

PERMUTATION_CHUNK = 128
"""Number of Moran permutations evaluated per job."""


@dataclass(frozen=True)
class MoranResult:
    """Global Moran's I and its significance."""

    statistic: float
    """Moran's I."""
    expected: float
    """Expectation under no autocorrelation, -1 / (n - 1)."""
    z: float
    """Standardised score under the normality assumption."""
    p_norm: float
    """Two-sided p-value under the normality assumption."""
    p_perm: float
    """Two-sided permutation p-value on ``|I - E[I]|``."""
    n_perm: int
    n: int
    """Number of units used (islands excluded)."""
    n_islands: int = 0
    scheme: Mapping = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "I": self.statistic,
            "expected": self.expected,
            "z": self.z,
            "p_norm": self.p_norm,
            "p_perm": self.p_perm,
            "n_perm": self.n_perm,
            "n": self.n,
            "n_islands": self.n_islands,
            "scheme": dict(self.scheme),
        }


def _restrict_weights(
    w: WeightsMatrix,
) -> Tuple[np.ndarray, sparse.csr_matrix]:
    """Drop islands and re-standardise the remaining rows."""
    keep = np.setdiff1d(np.arange(w.n), w.islands)
    matrix = w.to_sparse()[keep][:, keep].tocsr()
    row_sums = np.asarray(matrix.sum(axis=1)).ravel()
    scale = np.divide(
        1.0, row_sums, out=np.zeros_like(row_sums), where=row_sums > 0
    )
    return keep, sparse.diags(scale) @ matrix


def _moran_variance(matrix: sparse.csr_matrix, n: int) -> float:
    s0 = matrix.sum()
    sym = matrix + matrix.T
    s1 = 0.5 * sym.multiply(sym).sum()
    s2 = np.sum(
        (
            np.asarray(matrix.sum(axis=1)).ravel()
            + np.asarray(matrix.sum(axis=0)).ravel()
        )
        ** 2
    )
    expected = -1.0 / (n - 1)
    numerator = n * n * s1 - n * s2 + 3.0 * s0 * s0
    denominator = (n - 1) * (n + 1) * s0 * s0
    return numerator / denominator - expected**2


def morans_i(
    values,
    w: WeightsMatrix,
    n_perm: int = 999,
    seed: int = 1234,
    threads: int = 1,
) -> MoranResult:
    """Global Moran's I with a permutation test.

    Parameters
    ----------
    values : array_like
        One value per unit, aligned with ``w.ids``.
    w : WeightsMatrix
        Row-standardised spatial weights. Units without neighbours are
        removed before the statistic is computed.
    n_perm : int
        Number of random permutations.
    seed : int
        Master seed. Permutation ``r`` draws from an RNG seeded with
        ``(seed, r)`` so the p-value does not depend on ``threads``.
    threads : int
        Number of threads used for the permutations.

    Returns
    -------
    MoranResult
        Statistic, expectation, z-score and p-values.

    Raises
    ------
    ParameterError
        If fewer than three units have neighbours or the inputs disagree.
    DegenerateInputError
        If the values have zero variance.
    """
    x = as_float_array(values, "values")
    if len(x) != w.n:
        raise ParameterError(
            f"Got {len(x)} values for weights over {w.n} units"
        )
    if n_perm < 0:
        raise ParameterError("n_perm must be non-negative")
    n_islands = len(w.islands)
    if n_islands == w.n:
        raise ParameterError("Every unit has an empty weights row")
    keep, matrix = _restrict_weights(w)
    x = x[keep]
    n = len(x)
    if n < 3:
        raise ParameterError(f"Moran's I needs at least 3 units, got {n}")
    z = x - x.mean()
    zz = float(z @ z)
    if np.all(x == x[0]):
        raise DegenerateInputError("Moran's I of constant values")
    s0 = matrix.sum()
    statistic = float(n / s0 * (z @ (matrix @ z)) / zz)
    expected = -1.0 / (n - 1)

    variance = _moran_variance(matrix, n)
    z_score = (statistic - expected) / np.sqrt(variance)
    p_norm = float(2.0 * stats.norm.sf(abs(z_score)))

    def permute(start):
        stop = min(start + PERMUTATION_CHUNK, n_perm)
        perms = np.empty((stop - start, n))
        for row, r in enumerate(range(start, stop)):
            perms[row] = np.random.default_rng(
                derive_seed(seed, r)
            ).permutation(z)
        lagged = (matrix @ perms.T).T
        return n / s0 * np.sum(perms * lagged, axis=1) / zz

    chunks = map_jobs(permute, range(0, n_perm, PERMUTATION_CHUNK), threads)
    simulated = np.concatenate(chunks) if chunks else np.empty(0)
    observed = abs(statistic - expected)
    extreme = np.sum(
        np.abs(simulated - expected) >= observed - 1e-12 * max(observed, 1.0)
    )
    p_perm = float((extreme + 1) / (n_perm + 1))
    result = MoranResult(
        statistic=statistic,
        expected=expected,
        z=float(z_score),
        p_norm=p_norm,
        p_perm=p_perm,
        n_perm=n_perm,
        n=n,
        n_islands=n_islands,
        scheme=w.descriptor(),
    )
    logger.info(
        f"Moran's I = {statistic:.4f} (E[I] = {expected:.4f}, "
        f"z = {z_score:.2f}, p_perm = {p_perm:.4g}, n = {n})"
    )
    return result


@dataclass(frozen=True)
class CorrelationResult:
    method: str
    coefficient: float
    p_value: float
    n: int


def _check_pair(x, y):
    x = as_float_array(x, "x")
    y = as_float_array(y, "y")
    if len(x) != len(y):
        raise ParameterError(
            f"x and y must have equal length, got {len(x)} and {len(y)}"
        )
    if len(x) < 3:
        raise ParameterError("Correlation needs at least 3 observations")
    for name, values in (("x", x), ("y", y)):
        if np.all(values == values[0]):
            raise DegenerateInputError(f"{name} has zero variance")
    return x, y


def _correlation(method: str, x: np.ndarray, y: np.ndarray):
    n = len(x)
    xc = x - x.mean()
    yc = y - y.mean()
    r = float(np.clip((xc @ yc) / np.sqrt((xc @ xc) * (yc @ yc)), -1, 1))
    if abs(r) == 1.0:
        p = 0.0
    else:
        t = r * np.sqrt((n - 2) / (1.0 - r * r))
        p = float(2.0 * stats.t.sf(abs(t), n - 2))
    return CorrelationResult(method=method, coefficient=r, p_value=p, n=n)


def pearson(x, y) -> CorrelationResult:
    """Pearson correlation with a two-sided t-test p-value."""
    x, y = _check_pair(x, y)
    return _correlation("pearson", x, y)


def spearman(x, y) -> CorrelationResult:
    """Spearman rank correlation. Ties receive average ranks."""
    x, y = _check_pair(x, y)
    return _correlation(
        "spearman", stats.rankdata(x), stats.rankdata(y)
    )


def correlation_table(target, columns: Mapping[str, Sequence[float]]):
    """Pearson and Spearman correlation of each column with the target.

    Returns
    -------
    pandas.DataFrame
        Columns ``variable, pearson_r, pearson_p, spearman_rho,
        spearman_p``.
    """
    rows = []
    for name, values in columns.items():
        p = pearson(values, target)
        s = spearman(values, target)
        rows.append(
            (name, p.coefficient, p.p_value, s.coefficient, s.p_value)
        )
    return pd.DataFrame(
        rows,
        columns=[
            "variable",
            "pearson_r",
            "pearson_p",
            "spearman_rho",
            "spearman_p",
        ],
    )


def _auxiliary_r2(values: np.ndarray, j: int) -> float:
    others = sm.add_constant(np.delete(values, j, axis=1), has_constant="add")
    return float(sm.OLS(values[:, j], others).fit().rsquared)


def vif(features: FeatureMatrix, threads: int = 1) -> Dict[str, float]:
    """Variance inflation factor of every column.

    Each column is regressed on all other columns plus an intercept and
    ``VIF = 1 / (1 - R^2)``. Perfect collinearity is reported as infinity.

    Parameters
    ----------
    features : FeatureMatrix
        Design matrix.
    threads : int
        Number of threads for the auxiliary regressions.

    Returns
    -------
    dict
        VIF per column, in column order.
    """
    n, p = features.values.shape
    if p < 2:
        raise ParameterError("VIF needs at least two columns")
    if n <= p + 1:
        raise ParameterError(
            f"VIF needs more rows than columns plus one, got {n} x {p}"
        )
    values = np.asarray(features.values)
    r2 = map_jobs(lambda j: _auxiliary_r2(values, j), range(p), threads)
    result = {}
    for name, r in zip(features.columns, r2):
        tolerance = 1.0 - r
        result[name] = np.inf if tolerance <= 1e-10 else 1.0 / tolerance
    return result


@dataclass(frozen=True)
class CompositionGroup:
    """Variables that sum to a constant and the one dropped to break it."""

    name: str
    members: Tuple[str, ...]
    reference: str


DEFAULT_COMPOSITION_GROUPS = (
    CompositionGroup(
        "race",
        (
            "pct_white",
            "pct_black",
            "pct_amind",
            "pct_asian",
            "pct_pacific",
            "pct_other_race",
        ),
        "pct_other_race",
    ),
    CompositionGroup(
        "age",
        (
            "pct_age_lt18",
            "pct_age_18_29",
            "pct_age_30_39",
            "pct_age_40_49",
            "pct_age_50_59",
            "pct_age_gt60",
        ),
        "pct_age_lt18",
    ),
    CompositionGroup(
        "education",
        ("pct_lt_highschool", "pct_highschool", "pct_university"),
        "pct_highschool",
    ),
)


@dataclass(frozen=True)
class VifRemoval:
    round: int
    """Round whose VIF values motivated the removal."""
    variable: str
    vif: float
    reason: str


@dataclass(frozen=True)
class VifReport:
    """VIF values of every round and the variables removed between them."""

    variables: Tuple[str, ...]
    rounds: Tuple[Mapping[str, float], ...]
    stages: Tuple[str, ...]
    trail: Tuple[VifRemoval, ...]
    retained: Tuple[str, ...]
    threshold: float

    @property
    def removed(self) -> Tuple[str, ...]:
        return tuple(r.variable for r in self.trail)

    def to_frame(self) -> pd.DataFrame:
        """Variables by rounds, NaN once a variable has been removed."""
        data = {
            f"round_{i}": [values.get(v, np.nan) for v in self.variables]
            for i, values in enumerate(self.rounds)
        }
        return pd.DataFrame(
            data, index=pd.Index(self.variables, name="variable")
        )


def _resolve_groups(groups) -> Tuple[CompositionGroup, ...]:
    if groups is None:
        return ()
    resolved = []
    for group in groups:
        if not isinstance(group, CompositionGroup):
            group = CompositionGroup(
                name=group["name"],
                members=tuple(group["members"]),
                reference=group["reference"],
            )
        if group.reference not in group.members:
            raise ParameterError(
                f"Reference {group.reference} is not a member of "
                f"composition group {group.name}"
            )
        resolved.append(group)
    return tuple(resolved)


def vif_prune(
    features: FeatureMatrix,
    threshold: float = 5.0,
    composition_groups: Optional[Iterable] = None,
    manual_drops: Sequence[str] = (),
    threads: int = 1,
) -> VifReport:
    """Remove variables until every VIF is below the threshold.

    Removal happens in stages, each followed by a new round of VIF values:
    first the reference variable of every composition group present in the
    data, then any manual drops, then repeatedly the variable with the
    highest VIF at or above the threshold. Ties go to the
    lexicographically smallest name.

    Parameters
    ----------
    features : FeatureMatrix
        Candidate variables.
    threshold : float
        VIF cut-off, must exceed 1.
    composition_groups : Iterable, optional
        :py:class:`CompositionGroup` instances (or equivalent dicts).
    manual_drops : Sequence[str]
        Variables removed regardless of their VIF.
    threads : int
        Number of threads for the auxiliary regressions.

    Returns
    -------
    VifReport
        Every round, the removal trail and the retained variables.

    Raises
    ------
    ParameterError
        If the threshold is not above one, a manual drop is unknown or fewer
        than two variables would remain.
    """
    if not threshold > 1:
        raise ParameterError(f"VIF threshold must exceed 1, got {threshold}")
    unknown = [v for v in manual_drops if v not in features.columns]
    if unknown:
        raise ParameterError(f"Manual drops are not features: {unknown}")

    current = features
    rounds = [vif(current, threads)]
    stages = ["initial"]
    trail = []

    def remove(names, reason):
        nonlocal current
        names = [n for n in names if n in current.columns]
        if not names:
            return
        for name in names:
            trail.append(
                VifRemoval(len(rounds) - 1, name, rounds[-1][name], reason)
            )
            logger.debug(
                f"Removing {name} (VIF {rounds[-1][name]:.3f}, {reason})"
            )
        remaining = current.p - len(names)
        if remaining < 2:
            raise ParameterError(
                f"Only {remaining} variables would remain after removing "
                f"{names}"
            )
        current = current.drop(names)
        rounds.append(vif(current, threads))
        stages.append(reason)

    references = [g.reference for g in _resolve_groups(composition_groups)]
    remove(references, "composition")
    remove(list(manual_drops), "manual")
    while True:
        values = rounds[-1]
        name, worst = min(values.items(), key=lambda kv: (-kv[1], kv[0]))
        if worst < threshold:
            break
        remove([name], "threshold")

    report = VifReport(
        variables=features.columns,
        rounds=tuple(rounds),
        stages=tuple(stages),
        trail=tuple(trail),
        retained=current.columns,
        threshold=threshold,
    )
    logger.info(
        f"VIF pruning kept {len(report.retained)} of {features.p} variables "
        f"in {len(rounds)} rounds, removed {list(report.removed)}"
    )
    return report
