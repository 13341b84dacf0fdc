"""
Parsing and validation of the input files.

Five kinds of input are supported: census block groups (GeoJSON), POIs,
visits and incidents (CSV). Each loader returns an immutable table plus the
rows it had to reject. Referential integrity between tables is checked
separately by :py:func:`link` so that files can be validated one at a time.
"""

import json
import logging
import math
import re
from dataclasses import dataclass, field, replace
from functools import cached_property
from types import MappingProxyType
from typing import (
    Callable,
    ClassVar,
    Dict,
    Generic,
    Iterable,
    List,
    Mapping,
    Optional,
    Sequence,
    Tuple,
    TypeVar,
    Union,
)

import numpy as np
import pandas as pd

from . import geo
from .errors import (
    GeometryError,
    ParameterError,
    ReferentialError,
    RowError,
    SchemaError,
)

logger = logging.getLogger(__name__)

ALCOHOL_OUTLETS = MappingProxyType(
    {
        "445310": "liquor_store",
        "722410": "drinking_place",
        "312120": "brewery",
        "312130": "winery",
    }
)
"""NAICS codes of the four alcohol outlet types and their labels."""

OUTLET_TYPES = ("liquor_store", "drinking_place", "brewery", "winery")

DEFAULT_DV_TYPES = (
    "ASSAULT",
    "BATTERY",
    "CRIMINAL SEXUAL ASSAULT",
    "CRIM SEXUAL ASSAULT",
    "SEX OFFENSE",
    "OFFENSE INVOLVING CHILDREN",
    "STALKING",
    "INTIMIDATION",
    "KIDNAPPING",
    "HOMICIDE",
    "HUMAN TRAFFICKING",
)
"""
Primary types treated as domestic violence. Incidents flagged as domestic
with any other type (e.g. arson, burglary, theft) are treated as mislabelled.
"""

DEFAULT_HOME_LOCATIONS = (
    "RESIDENCE",
    "APARTMENT",
    "DRIVEWAY - RESIDENTIAL",
    "RESIDENCE - PORCH / HALLWAY",
    "RESIDENCE - YARD (FRONT / BACK)",
    "RESIDENCE - GARAGE",
    "RESIDENCE PORCH/HALLWAY",
    "RESIDENTIAL YARD (FRONT/BACK)",
    "RESIDENCE-GARAGE",
    "CHA APARTMENT",
    "HOUSE",
)
"""Location descriptions that count as home-related."""

CBG_RESERVED_PROPERTIES = ("cbg_id", "population", "device_count", "area_km2")

POI_COLUMNS = ("poi_id", "naics", "lon", "lat", "category_label")
VISIT_COLUMNS = ("poi_id", "cbg_id", "visitor_count")
INCIDENT_COLUMNS = (
    "incident_id",
    "lon",
    "lat",
    "domestic",
    "primary_type",
    "location_description",
)

Point = Tuple[float, float]
Ring = Tuple[Point, ...]
Polygon = Tuple[Ring, ...]


@dataclass(frozen=True)
class CbgRecord:
    """A census block group."""

    cbg_id: str
    polygon: Polygon
    population: int
    device_count: int
    area_km2: float
    attributes: Mapping[str, float] = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(
            self, "attributes", MappingProxyType(dict(self.attributes))
        )


@dataclass(frozen=True)
class PoiRecord:
    """A point of interest. ``outlet_type`` is set by the alcohol filter."""

    poi_id: str
    naics: str
    location: Point
    category_label: str
    outlet_type: Optional[str] = None


@dataclass(frozen=True)
class VisitRecord:
    """Visitors from a home CBG to a POI."""

    poi_id: str
    cbg_id: str
    visitor_count: int


@dataclass(frozen=True)
class IncidentRecord:
    """A reported incident."""

    incident_id: str
    location: Point
    domestic_flag: bool
    primary_type: str
    location_description: str


@dataclass(frozen=True)
class RowRejection:
    """A row that failed validation.

    ``row`` is the 1-based data row (header excluded) or feature index, and
    is None for rejections made after loading (e.g. by :py:func:`link`).
    """

    row: Optional[int]
    key: Optional[str]
    reason: str


RecordT = TypeVar("RecordT")


@dataclass(frozen=True)
class _Table(Generic[RecordT]):
    """Immutable collection of records with unique keys."""

    records: Tuple[RecordT, ...] = ()
    rejected: Tuple[RowRejection, ...] = ()

    kind: ClassVar[str] = "record"

    def __post_init__(self):
        object.__setattr__(self, "records", tuple(self.records))
        object.__setattr__(self, "rejected", tuple(self.rejected))
        seen = set()
        for record in self.records:
            key = self.key(record)
            if key in seen:
                raise SchemaError(f"Duplicate {self.kind} key: {key!r}")
            seen.add(key)

    @staticmethod
    def key(record):
        raise NotImplementedError

    def __len__(self):
        return len(self.records)

    def __iter__(self):
        return iter(self.records)

    def __contains__(self, key):
        return key in self._index

    @property
    def n_input(self) -> int:
        """Number of rows read, accepted plus rejected."""
        return len(self.records) + len(self.rejected)

    @property
    def ids(self) -> tuple:
        return tuple(self.key(r) for r in self.records)

    @cached_property
    def _index(self) -> Dict:
        return {self.key(r): r for r in self.records}

    def get(self, key):
        """Return the record with the given key."""
        return self._index[key]


@dataclass(frozen=True)
class CbgTable(_Table[CbgRecord]):
    """CBGs sorted by ``cbg_id``, the canonical row order."""

    kind: ClassVar[str] = "cbg_id"

    def __post_init__(self):
        object.__setattr__(
            self,
            "records",
            tuple(sorted(self.records, key=lambda r: r.cbg_id)),
        )
        super().__post_init__()

    @staticmethod
    def key(record):
        return record.cbg_id

    @property
    def attribute_names(self) -> Tuple[str, ...]:
        names = set()
        for record in self.records:
            names.update(record.attributes)
        return tuple(sorted(names))

    def subset(self, ids: Iterable[str]) -> "CbgTable":
        """Return the table restricted to the given CBGs."""
        ids = set(ids)
        return CbgTable(
            records=[r for r in self.records if r.cbg_id in ids],
            rejected=self.rejected,
        )


@dataclass(frozen=True)
class PoiTable(_Table[PoiRecord]):
    kind: ClassVar[str] = "poi_id"

    @staticmethod
    def key(record):
        return record.poi_id


@dataclass(frozen=True)
class VisitTable(_Table[VisitRecord]):
    kind: ClassVar[str] = "(poi_id, cbg_id)"

    @staticmethod
    def key(record):
        return (record.poi_id, record.cbg_id)


@dataclass(frozen=True)
class IncidentTable(_Table[IncidentRecord]):
    kind: ClassVar[str] = "incident_id"

    @staticmethod
    def key(record):
        return record.incident_id

    def coordinates(self) -> np.ndarray:
        """Incident locations as an (m, 2) array of (lon, lat)."""
        if not self.records:
            return np.empty((0, 2))
        return np.array([r.location for r in self.records], dtype=float)


@dataclass(frozen=True)
class DvFilterReport:
    """Counts removed at each stage of :py:func:`filter_dv_incidents`."""

    n_input: int
    non_domestic: int
    mislabelled_type: int
    public_space: int
    n_kept: int


def _normalise_label(value: str) -> str:
    return " ".join(str(value).split()).upper()


def _parse_int(value, name: str, minimum: int = 0) -> int:
    try:
        number = float(value)
    except (TypeError, ValueError):
        raise RowError(f"{name} is not numeric: {value!r}")
    if not math.isfinite(number) or number != int(number):
        raise RowError(f"{name} is not an integer: {value!r}")
    if number < minimum:
        raise RowError(f"{name} must be >= {minimum}, got {value!r}")
    return int(number)


def _parse_float(value, name: str) -> float:
    try:
        number = float(value)
    except (TypeError, ValueError):
        raise RowError(f"{name} is not numeric: {value!r}")
    if not math.isfinite(number):
        raise RowError(f"{name} is not finite: {value!r}")
    return number


def _parse_bool(value, name: str) -> bool:
    text = str(value).strip().lower()
    if text == "true":
        return True
    if text == "false":
        return False
    raise RowError(f"{name} must be 'true' or 'false', got {value!r}")


def _parse_location(lon, lat) -> Point:
    lon = _parse_float(lon, "lon")
    lat = _parse_float(lat, "lat")
    if not -180.0 <= lon <= 180.0:
        raise RowError(f"lon outside [-180, 180]: {lon}")
    if not -90.0 <= lat <= 90.0:
        raise RowError(f"lat outside [-90, 90]: {lat}")
    return (lon, lat)


def _parse_polygon(geometry, name: str) -> Polygon:
    """Convert a GeoJSON Polygon geometry into a tuple of rings."""
    if not isinstance(geometry, dict) or geometry.get("type") != "Polygon":
        raise GeometryError(f"Feature {name}: geometry must be a Polygon")
    rings = geometry.get("coordinates")
    if not isinstance(rings, list) or not rings:
        raise GeometryError(f"Feature {name}: polygon has no rings")
    polygon = []
    for i, ring in enumerate(rings):
        try:
            vertices = tuple((float(x), float(y)) for x, y in ring)
        except (TypeError, ValueError):
            raise GeometryError(
                f"Feature {name}: ring {i} has malformed coordinates"
            )
        if len(vertices) < 4:
            raise GeometryError(
                f"Feature {name}: ring {i} has fewer than 4 vertices"
            )
        if vertices[0] != vertices[-1]:
            raise GeometryError(f"Feature {name}: ring {i} is not closed")
        polygon.append(vertices)
    polygon = tuple(polygon)
    if geo.polygon_area(polygon) <= 0.0:
        raise GeometryError(f"Feature {name}: polygon has zero area")
    return polygon


def load_cbgs(geojson_path, attribute_schema: Sequence[str] = ()) -> CbgTable:
    """Load census block groups from a GeoJSON FeatureCollection.

    Parameters
    ----------
    geojson_path : str or path-like
        Path to the GeoJSON file.
    attribute_schema : Sequence[str]
        Attribute properties every feature must declare. Values may be null,
        in which case they are stored as NaN.

    Returns
    -------
    CbgTable
        Validated table. Features with invalid counts or areas are rejected.

    Raises
    ------
    GeometryError
        If a feature has malformed geometry.
    SchemaError
        If the file is not a FeatureCollection, a required property or
        declared attribute is missing, or a cbg_id is duplicated.
    """
    with open(geojson_path, "r", encoding="utf-8") as f:
        try:
            collection = json.load(f)
        except json.JSONDecodeError as e:
            raise SchemaError(f"{geojson_path} is not valid JSON: {e}")
    if (
        not isinstance(collection, dict)
        or collection.get("type") != "FeatureCollection"
    ):
        raise SchemaError(f"{geojson_path} is not a FeatureCollection")

    records = []
    rejected = []
    seen = set()
    for index, feature in enumerate(collection.get("features", []), 1):
        properties = feature.get("properties") or {}
        cbg_id = properties.get("cbg_id")
        name = repr(cbg_id) if cbg_id is not None else f"#{index}"
        for required in ("cbg_id", "population", "device_count"):
            if required not in properties:
                raise SchemaError(
                    f"Feature {name} is missing property '{required}'"
                )
        missing = [a for a in attribute_schema if a not in properties]
        if missing:
            raise SchemaError(
                f"Feature {name} is missing declared attributes {missing}"
            )
        cbg_id = str(cbg_id)
        if cbg_id in seen:
            raise SchemaError(f"Duplicate cbg_id: {cbg_id!r}")
        seen.add(cbg_id)
        polygon = _parse_polygon(feature.get("geometry"), name)
        try:
            population = _parse_int(properties["population"], "population")
            devices = _parse_int(properties["device_count"], "device_count")
            if properties.get("area_km2") is not None:
                area = _parse_float(properties["area_km2"], "area_km2")
            else:
                area = geo.area_km2(polygon)
            if area <= 0.0:
                raise RowError(f"area_km2 must be positive, got {area}")
            attributes = {}
            for key, value in properties.items():
                if key in CBG_RESERVED_PROPERTIES:
                    continue
                if value is None:
                    attributes[key] = float("nan")
                elif isinstance(value, (int, float)) and not isinstance(
                    value, bool
                ):
                    attributes[key] = float(value)
                elif key in attribute_schema:
                    raise RowError(f"{key} is not numeric: {value!r}")
        except RowError as e:
            logger.warning(f"Rejecting CBG {cbg_id}: {e}")
            rejected.append(RowRejection(index, cbg_id, str(e)))
            continue
        records.append(
            CbgRecord(
                cbg_id=cbg_id,
                polygon=polygon,
                population=population,
                device_count=devices,
                area_km2=area,
                attributes=attributes,
            )
        )
    table = CbgTable(records=records, rejected=rejected)
    logger.info(
        f"Loaded {len(table)} CBGs from {geojson_path} "
        f"({len(rejected)} rejected)"
    )
    return table


def _load_csv(
    path,
    columns: Sequence[str],
    parse_row: Callable[[Mapping[str, str]], object],
    key: Callable[[Mapping[str, str]], str],
):
    frame = pd.read_csv(
        path, dtype=str, keep_default_na=False, encoding="utf-8"
    )
    missing = [c for c in columns if c not in frame.columns]
    if missing:
        raise SchemaError(f"{path} is missing columns {missing}")
    records = []
    rejected = []
    for index, row in enumerate(frame.to_dict("records"), 1):
        try:
            records.append(parse_row(row))
        except RowError as e:
            logger.warning(f"Rejecting row {index} of {path}: {e}")
            rejected.append(RowRejection(index, key(row), str(e)))
    return records, rejected


def _parse_poi(row) -> PoiRecord:
    naics = row["naics"].strip()
    if not re.fullmatch(r"\d{6}", naics):
        raise RowError(f"naics must be 6 digits, got {row['naics']!r}")
    return PoiRecord(
        poi_id=row["poi_id"],
        naics=naics,
        location=_parse_location(row["lon"], row["lat"]),
        category_label=row["category_label"],
    )


def _parse_visit(row) -> VisitRecord:
    return VisitRecord(
        poi_id=row["poi_id"],
        cbg_id=row["cbg_id"],
        visitor_count=_parse_int(
            row["visitor_count"], "visitor_count", minimum=1
        ),
    )


def _parse_incident(row) -> IncidentRecord:
    return IncidentRecord(
        incident_id=row["incident_id"],
        location=_parse_location(row["lon"], row["lat"]),
        domestic_flag=_parse_bool(row["domestic"], "domestic"),
        primary_type=row["primary_type"],
        location_description=row["location_description"],
    )


def load_pois(csv_path) -> PoiTable:
    """Load POIs from ``poi_id,naics,lon,lat,category_label``."""
    records, rejected = _load_csv(
        csv_path, POI_COLUMNS, _parse_poi, lambda r: r["poi_id"]
    )
    table = PoiTable(records=records, rejected=rejected)
    logger.info(
        f"Loaded {len(table)} POIs from {csv_path} "
        f"({len(rejected)} rejected)"
    )
    return table


def load_visits(csv_path) -> VisitTable:
    """Load visit records from ``poi_id,cbg_id,visitor_count``."""
    records, rejected = _load_csv(
        csv_path,
        VISIT_COLUMNS,
        _parse_visit,
        lambda r: f"{r['poi_id']}/{r['cbg_id']}",
    )
    table = VisitTable(records=records, rejected=rejected)
    logger.info(
        f"Loaded {len(table)} visit records from {csv_path} "
        f"({len(rejected)} rejected)"
    )
    return table


def load_incidents(csv_path) -> IncidentTable:
    """Load incidents from
    ``incident_id,lon,lat,domestic,primary_type,location_description``.
    """
    records, rejected = _load_csv(
        csv_path,
        INCIDENT_COLUMNS,
        _parse_incident,
        lambda r: r["incident_id"],
    )
    table = IncidentTable(records=records, rejected=rejected)
    logger.info(
        f"Loaded {len(table)} incidents from {csv_path} "
        f"({len(rejected)} rejected)"
    )
    return table


def link(
    cbgs: CbgTable,
    pois: PoiTable,
    visits: VisitTable,
    strict: bool = True,
) -> VisitTable:
    """Check that every visit references a known POI and CBG.

    Parameters
    ----------
    cbgs, pois, visits
        Loaded tables. ``pois`` should be the unfiltered POI table.
    strict : bool
        If True raise on dangling references, otherwise drop them and record
        them as rejections.

    Returns
    -------
    VisitTable
        Visits whose references resolve.
    """
    kept = []
    rejected = list(visits.rejected)
    for record in visits:
        problems = []
        if record.poi_id not in pois:
            problems.append(f"unknown poi_id {record.poi_id!r}")
        if record.cbg_id not in cbgs:
            problems.append(f"unknown cbg_id {record.cbg_id!r}")
        if problems:
            rejected.append(
                RowRejection(
                    None,
                    f"{record.poi_id}/{record.cbg_id}",
                    ", ".join(problems),
                )
            )
        else:
            kept.append(record)
    n_dangling = len(rejected) - len(visits.rejected)
    if n_dangling and strict:
        examples = "; ".join(r.reason for r in rejected[-n_dangling:][:3])
        raise ReferentialError(
            f"{n_dangling} visit records reference unknown keys "
            f"(e.g. {examples})"
        )
    if n_dangling:
        logger.warning(f"Dropped {n_dangling} visits with unknown references")
    return VisitTable(records=kept, rejected=rejected)


def filter_alcohol_pois(
    pois: PoiTable,
    codes: Optional[Union[Mapping[str, str], Iterable[str]]] = None,
) -> PoiTable:
    """Keep only POIs whose NAICS code is an alcohol outlet code.

    Parameters
    ----------
    pois : PoiTable
        POIs to filter.
    codes : Mapping or Iterable, optional
        Codes to keep, either as a mapping from code to outlet label or as a
        collection of codes whose labels are looked up in
        :py:data:`ALCOHOL_OUTLETS`. Defaults to the four alcohol codes.

    Returns
    -------
    PoiTable
        Retained POIs, each tagged with its ``outlet_type``.
    """
    if codes is None:
        labels = dict(ALCOHOL_OUTLETS)
    elif isinstance(codes, Mapping):
        labels = {str(k): str(v) for k, v in codes.items()}
    else:
        labels = {str(c): ALCOHOL_OUTLETS.get(str(c), str(c)) for c in codes}
    if not labels:
        raise ParameterError("At least one NAICS code is required")
    kept = [
        replace(record, outlet_type=labels[record.naics])
        for record in pois
        if record.naics in labels
    ]
    counts = {}
    for record in kept:
        counts[record.outlet_type] = counts.get(record.outlet_type, 0) + 1
    logger.info(f"Retained {len(kept)} of {len(pois)} POIs: {counts}")
    return PoiTable(records=kept, rejected=pois.rejected)


def filter_dv_incidents(
    incidents: IncidentTable,
    dv_types: Optional[Iterable[str]] = None,
    home_locations: Optional[Iterable[str]] = None,
) -> Tuple[IncidentTable, DvFilterReport]:
    """Extract domestic violence incidents that occurred at home.

    Incidents are kept when they are flagged as domestic, their primary type
    is in ``dv_types`` and their location description is in
    ``home_locations``. Matching ignores case and repeated whitespace.

    Returns
    -------
    IncidentTable
        Retained incidents.
    DvFilterReport
        Counts removed by each stage.
    """
    dv_types = DEFAULT_DV_TYPES if dv_types is None else tuple(dv_types)
    home_locations = (
        DEFAULT_HOME_LOCATIONS
        if home_locations is None
        else tuple(home_locations)
    )
    if not dv_types or not home_locations:
        raise ParameterError(
            "DV type and home location lists must be nonempty"
        )
    types = {_normalise_label(t) for t in dv_types}
    locations = {_normalise_label(loc) for loc in home_locations}

    non_domestic = mislabelled = public = 0
    kept: List[IncidentRecord] = []
    for record in incidents:
        if not record.domestic_flag:
            non_domestic += 1
        elif _normalise_label(record.primary_type) not in types:
            mislabelled += 1
        elif _normalise_label(record.location_description) not in locations:
            public += 1
        else:
            kept.append(record)
    report = DvFilterReport(
        n_input=len(incidents),
        non_domestic=non_domestic,
        mislabelled_type=mislabelled,
        public_space=public,
        n_kept=len(kept),
    )
    logger.info(
        f"DV filter kept {report.n_kept} of {report.n_input} incidents "
        f"(non-domestic: {non_domestic}, mislabelled type: {mislabelled}, "
        f"public space: {public})"
    )
    return IncidentTable(records=kept, rejected=incidents.rejected), report
