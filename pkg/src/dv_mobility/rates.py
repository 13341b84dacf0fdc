"""
Derived rates and the standardised feature matrix.

The dependent variable is the number of domestic violence incidents per
1,000 residents of a CBG. Visit rates are the number of residents of a CBG
that visited each type of alcohol outlet divided by the number of devices
residing in the CBG.
"""

import logging
from dataclasses import dataclass, field
from types import MappingProxyType
from typing import Iterable, Mapping, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from sklearn.preprocessing import StandardScaler

from .errors import DegenerateInputError, ParameterError, SchemaError
from .geo import Assignment, assign_incidents
from .ingest import (
    OUTLET_TYPES,
    CbgTable,
    IncidentTable,
    PoiTable,
    VisitTable,
    filter_alcohol_pois,
    filter_dv_incidents,
    link,
)

logger = logging.getLogger(__name__)

CATEGORIES = (
    "race",
    "age",
    "disadvantage",
    "instability",
    "urbanicity",
    "visits",
)

VISIT_RATE_COLUMNS = tuple(f"{t}_vr" for t in OUTLET_TYPES)

VARIABLE_CATEGORIES = MappingProxyType(
    {
        "pct_white": "race",
        "pct_black": "race",
        "pct_amind": "race",
        "pct_asian": "race",
        "pct_pacific": "race",
        "pct_other_race": "race",
        "pct_hispanic": "race",
        "pct_age_lt18": "age",
        "pct_age_18_29": "age",
        "pct_age_30_39": "age",
        "pct_age_40_49": "age",
        "pct_age_50_59": "age",
        "pct_age_gt60": "age",
        "med_income": "disadvantage",
        "pct_unemployment": "disadvantage",
        "pct_female_hh": "disadvantage",
        "pct_lt_highschool": "disadvantage",
        "pct_highschool": "disadvantage",
        "pct_university": "disadvantage",
        "pct_security_inc": "disadvantage",
        "pct_assist_inc": "disadvantage",
        "pct_assist_or_snap": "disadvantage",
        "pct_renter_hh": "instability",
        "pct_stay_5yrs": "instability",
        "population_density": "urbanicity",
        **{c: "visits" for c in VISIT_RATE_COLUMNS},
    }
)
"""Category of every known independent variable."""

ACS_VARIABLES = tuple(
    name
    for name, category in VARIABLE_CATEGORIES.items()
    if category not in ("urbanicity", "visits")
)
"""Socioeconomic attributes expected as CBG properties."""

BASELINE_VARIABLES = tuple(
    name
    for name in VARIABLE_CATEGORIES
    if name
    not in (
        "pct_other_race",
        "pct_age_lt18",
        "pct_highschool",
        "pct_black",
        "pct_university",
        "pct_assist_or_snap",
        *VISIT_RATE_COLUMNS,
    )
)
"""The 19 socioeconomic variables retained after multicollinearity checks."""

RATE_COLUMNS = (
    "cbg_id",
    "dv_rate",
    *VISIT_RATE_COLUMNS,
    "population_density",
)


@dataclass(frozen=True)
class RateSeries:
    """A per-CBG quantity and the CBGs excluded from it."""

    values: Mapping[str, float]
    excluded: Tuple[str, ...] = ()


@dataclass(frozen=True)
class VisitRates:
    """Per-CBG visit rates, one column per outlet type."""

    frame: pd.DataFrame
    excluded: Tuple[str, ...] = ()


@dataclass(frozen=True)
class RateTable:
    """DV rate, visit rates and population density of eligible CBGs.

    ``frame`` is indexed by ``cbg_id`` in ascending order; ``excluded`` maps
    each derivation stage to the CBGs it excluded.
    """

    frame: pd.DataFrame
    excluded: Mapping[str, Tuple[str, ...]] = field(default_factory=dict)

    @property
    def ids(self) -> Tuple[str, ...]:
        return tuple(self.frame.index)

    def to_frame(self) -> pd.DataFrame:
        """Rates with ``cbg_id`` as a column, in the ``rates.csv`` layout."""
        return self.frame.reset_index()[list(RATE_COLUMNS)]

    def to_csv(self, path) -> None:
        self.to_frame().to_csv(path, index=False)

    @classmethod
    def from_csv(cls, path) -> "RateTable":
        frame = pd.read_csv(path, dtype={"cbg_id": str})
        missing = [c for c in RATE_COLUMNS if c not in frame.columns]
        if missing:
            raise SchemaError(f"{path} is missing columns {missing}")
        return cls(frame=frame.set_index("cbg_id").sort_index())


def dv_rate(counts, cbgs: CbgTable, min_pop: int = 1) -> RateSeries:
    """Incidents per 1,000 residents.

    Parameters
    ----------
    counts : Mapping[str, int] or Assignment
        Incident counts per CBG, missing CBGs count as zero.
    cbgs : CbgTable
        CBGs providing the populations.
    min_pop : int
        CBGs with fewer residents are excluded.

    Returns
    -------
    RateSeries
        Rates of eligible CBGs and the ids of excluded CBGs.
    """
    if isinstance(counts, Assignment):
        counts = counts.counts
    values = {}
    excluded = []
    for record in cbgs:
        count = counts.get(record.cbg_id, 0)
        if record.population < max(min_pop, 1):
            excluded.append(record.cbg_id)
            if record.population == 0 and count > 0:
                logger.warning(
                    f"CBG {record.cbg_id} has {count} incidents but no "
                    "population, excluding it"
                )
            continue
        values[record.cbg_id] = 1000.0 * count / record.population
    if excluded:
        logger.info(f"{len(excluded)} CBGs below min_pop={min_pop} excluded")
    return RateSeries(values=values, excluded=tuple(excluded))


def reverse_visits(visits: VisitTable, pois: PoiTable) -> pd.DataFrame:
    """Re-index visits from POIs to the home CBGs of the visitors.

    Parameters
    ----------
    visits : VisitTable
        Visit records.
    pois : PoiTable
        POIs tagged with ``outlet_type`` (see
        :py:func:`~dv_mobility.ingest.filter_alcohol_pois`). Visits to other
        POIs are ignored.

    Returns
    -------
    pandas.DataFrame
        Visitor sums indexed by ``cbg_id`` with one column per outlet type.
    """
    outlet = {r.poi_id: r.outlet_type for r in pois if r.outlet_type}
    types = list(OUTLET_TYPES) + sorted(
        set(outlet.values()) - set(OUTLET_TYPES)
    )
    rows = [
        (v.cbg_id, outlet[v.poi_id], v.visitor_count)
        for v in visits
        if v.poi_id in outlet
    ]
    if not rows:
        empty = pd.DataFrame(
            {t: pd.Series(dtype="int64") for t in types},
            index=pd.Index([], name="cbg_id", dtype=object),
        )
        return empty
    frame = pd.DataFrame(rows, columns=["cbg_id", "outlet_type", "visitors"])
    sums = frame.pivot_table(
        index="cbg_id",
        columns="outlet_type",
        values="visitors",
        aggfunc="sum",
        fill_value=0,
    )
    sums = sums.reindex(columns=types, fill_value=0).sort_index()
    sums.columns.name = None
    return sums.astype("int64")


def visit_rate(
    sums: pd.DataFrame, cbgs: CbgTable, min_devices: int = 1
) -> VisitRates:
    """Visitors per resident device for each outlet type.

    Parameters
    ----------
    sums : pandas.DataFrame
        Output of :py:func:`reverse_visits`.
    cbgs : CbgTable
        CBGs providing the device counts.
    min_devices : int
        CBGs with fewer devices are excluded.

    Returns
    -------
    VisitRates
        Frame indexed by ``cbg_id`` with columns ``<type>_vr``.
    """
    columns = [f"{t}_vr" for t in sums.columns]
    ids = []
    rows = []
    excluded = []
    for record in cbgs:
        if record.device_count < max(min_devices, 1):
            excluded.append(record.cbg_id)
            if record.device_count == 0:
                logger.warning(
                    f"CBG {record.cbg_id} has no resident devices, "
                    "excluding it"
                )
            continue
        if record.cbg_id in sums.index:
            visitors = sums.loc[record.cbg_id].to_numpy(dtype=float)
        else:
            visitors = np.zeros(len(columns))
        ids.append(record.cbg_id)
        rows.append(visitors / record.device_count)
    frame = pd.DataFrame(
        np.asarray(rows, dtype=float).reshape(len(ids), len(columns)),
        index=pd.Index(ids, name="cbg_id"),
        columns=columns,
    )
    return VisitRates(frame=frame, excluded=tuple(excluded))


def population_density(cbgs: CbgTable) -> RateSeries:
    """Residents per square kilometre."""
    values = {}
    excluded = []
    for record in cbgs:
        if not record.area_km2 > 0:
            excluded.append(record.cbg_id)
            continue
        values[record.cbg_id] = record.population / record.area_km2
    return RateSeries(values=values, excluded=tuple(excluded))


def build_rate_table(
    dv: RateSeries, visits: VisitRates, density: RateSeries
) -> RateTable:
    """Combine the derived quantities for CBGs eligible for all of them."""
    ids = sorted(
        set(dv.values) & set(visits.frame.index) & set(density.values)
    )
    frame = pd.DataFrame(index=pd.Index(ids, name="cbg_id"))
    frame["dv_rate"] = [dv.values[i] for i in ids]
    for column in VISIT_RATE_COLUMNS:
        if column in visits.frame.columns:
            frame[column] = visits.frame.loc[ids, column].to_numpy()
        else:
            frame[column] = 0.0
    frame["population_density"] = [density.values[i] for i in ids]
    excluded = {
        "dv_rate": dv.excluded,
        "visit_rate": visits.excluded,
        "population_density": density.excluded,
    }
    return RateTable(frame=frame, excluded=excluded)


def derive_rates(
    cbgs: CbgTable,
    incidents: IncidentTable,
    pois: PoiTable,
    visits: VisitTable,
    naics=None,
    dv_types: Optional[Iterable[str]] = None,
    home_locations: Optional[Iterable[str]] = None,
    min_pop: int = 1,
    min_devices: int = 1,
    threads: int = 1,
) -> RateTable:
    """Run the full derivation from loaded tables to a rate table."""
    visits = link(cbgs, pois, visits)
    outlets = filter_alcohol_pois(pois, naics)
    dv_incidents, _ = filter_dv_incidents(incidents, dv_types, home_locations)
    assignment = assign_incidents(dv_incidents, cbgs, threads=threads)
    table = build_rate_table(
        dv_rate(assignment, cbgs, min_pop=min_pop),
        visit_rate(
            reverse_visits(visits, outlets), cbgs, min_devices=min_devices
        ),
        population_density(cbgs),
    )
    logger.info(f"Derived rates for {len(table.frame)} of {len(cbgs)} CBGs")
    return table


@dataclass(frozen=True, eq=False)
class Scaler:
    """Column means and population standard deviations."""

    mean: np.ndarray
    std: np.ndarray

    @classmethod
    def fit(
        cls, values, columns: Optional[Sequence[str]] = None
    ) -> "Scaler":
        """Estimate the scaler from the rows of ``values``.

        Raises
        ------
        DegenerateInputError
            If a column is constant.
        """
        scaler = StandardScaler().fit(np.asarray(values, dtype=float))
        mean = scaler.mean_
        std = np.sqrt(scaler.var_)
        constant = std <= 1e-12 * np.maximum(np.abs(mean), 1.0)
        if np.any(constant):
            names = (
                [columns[i] for i in np.flatnonzero(constant)]
                if columns is not None
                else np.flatnonzero(constant).tolist()
            )
            raise DegenerateInputError(
                f"Cannot standardise constant columns: {names}"
            )
        return cls(mean=mean, std=std)

    def transform(self, values) -> np.ndarray:
        return (np.asarray(values, dtype=float) - self.mean) / self.std

    def inverse_transform(self, values) -> np.ndarray:
        return np.asarray(values, dtype=float) * self.std + self.mean

    def subset(self, indices) -> "Scaler":
        return Scaler(mean=self.mean[indices], std=self.std[indices])


@dataclass(frozen=True, eq=False)
class FeatureMatrix:
    """Standardised design matrix with named, categorised columns.

    Rows are in canonical order (ascending ``cbg_id``).
    """

    ids: Tuple[str, ...]
    columns: Tuple[str, ...]
    categories: Tuple[str, ...]
    values: np.ndarray
    scaler: Scaler

    def __post_init__(self):
        values = np.array(self.values, dtype=float)
        values.flags.writeable = False
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "ids", tuple(self.ids))
        object.__setattr__(self, "columns", tuple(self.columns))
        object.__setattr__(self, "categories", tuple(self.categories))
        if len(set(self.columns)) != len(self.columns):
            raise ParameterError(
                f"Column names must be unique: {self.columns}"
            )
        if values.shape != (len(self.ids), len(self.columns)):
            raise ParameterError("Values do not match ids and columns")
        if len(self.categories) != len(self.columns):
            raise ParameterError("Every column needs a category")
        if not np.all(np.isfinite(values)):
            raise ParameterError("Feature matrix contains non-finite values")

    @classmethod
    def from_raw(
        cls,
        ids: Sequence[str],
        columns: Sequence[str],
        raw,
        categories: Sequence[str],
    ) -> "FeatureMatrix":
        """Standardise raw columns and keep the fitted scaler."""
        scaler = Scaler.fit(raw, columns)
        return cls(
            ids=ids,
            columns=columns,
            categories=categories,
            values=scaler.transform(raw),
            scaler=scaler,
        )

    @property
    def n(self) -> int:
        return self.values.shape[0]

    @property
    def p(self) -> int:
        return self.values.shape[1]

    def raw_values(self) -> np.ndarray:
        """Columns on their original scale."""
        return self.scaler.inverse_transform(self.values)

    def column(self, name: str) -> np.ndarray:
        return self.values[:, self.columns.index(name)]

    def select(self, columns: Sequence[str]) -> "FeatureMatrix":
        """Return a matrix with only the given columns, in the given order."""
        missing = [c for c in columns if c not in self.columns]
        if missing:
            raise ParameterError(f"Unknown columns: {missing}")
        index = [self.columns.index(c) for c in columns]
        return FeatureMatrix(
            ids=self.ids,
            columns=tuple(columns),
            categories=tuple(self.categories[i] for i in index),
            values=self.values[:, index],
            scaler=self.scaler.subset(index),
        )

    def drop(self, columns: Iterable[str]) -> "FeatureMatrix":
        columns = set(columns)
        return self.select([c for c in self.columns if c not in columns])

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame(
            self.values,
            index=pd.Index(self.ids, name="cbg_id"),
            columns=self.columns,
        )


def assemble_features(
    cbgs: CbgTable,
    rates: RateTable,
    include_visits: bool = True,
    variable_list: Optional[Sequence[str]] = None,
    categories: Optional[Mapping[str, str]] = None,
) -> Tuple[FeatureMatrix, np.ndarray]:
    """Build the standardised design matrix and the DV rate target.

    Parameters
    ----------
    cbgs : CbgTable
        CBGs providing socioeconomic attributes.
    rates : RateTable
        Derived rates; its rows define the eligible CBGs.
    include_visits : bool
        Append the four visit-rate columns (test condition).
    variable_list : Sequence[str], optional
        Socioeconomic variables, defaults to :py:data:`BASELINE_VARIABLES`.
        ``population_density`` is taken from the rate table.
    categories : Mapping[str, str], optional
        Categories for variables not in :py:data:`VARIABLE_CATEGORIES`.

    Returns
    -------
    FeatureMatrix
        Z-scored columns (population standard deviation).
    numpy.ndarray
        DV rates aligned with the rows.
    """
    variables = list(
        BASELINE_VARIABLES if variable_list is None else variable_list
    )
    if include_visits:
        variables += [c for c in VISIT_RATE_COLUMNS if c not in variables]
    lookup = dict(VARIABLE_CATEGORIES)
    lookup.update(categories or {})
    unknown = [v for v in variables if v not in lookup]
    if unknown:
        raise ParameterError(f"No category known for variables {unknown}")

    available = set(cbgs.attribute_names) | set(rates.frame.columns)
    missing = [v for v in variables if v not in available]
    if missing:
        raise SchemaError(f"Variables not available in the data: {missing}")

    raw = np.empty((len(rates.frame), len(variables)))
    for j, name in enumerate(variables):
        if name in rates.frame.columns:
            raw[:, j] = rates.frame[name].to_numpy(dtype=float)
        else:
            raw[:, j] = [
                cbgs.get(i).attributes.get(name, np.nan)
                for i in rates.frame.index
            ]
    keep = np.all(np.isfinite(raw), axis=1)
    if not np.all(keep):
        logger.info(
            f"{int(np.sum(~keep))} CBGs lack values for the requested "
            "variables and are excluded"
        )
    ids = [i for i, k in zip(rates.frame.index, keep) if k]
    target = rates.frame["dv_rate"].to_numpy(dtype=float)[keep]
    features = FeatureMatrix.from_raw(
        ids=ids,
        columns=variables,
        raw=raw[keep],
        categories=[lookup[v] for v in variables],
    )
    logger.debug(
        f"Assembled {features.n} x {features.p} feature matrix "
        f"(include_visits={include_visits})"
    )
    return features, target
