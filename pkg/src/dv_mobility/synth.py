"""
Synthetic cities with known ground truth.

A city is a grid of square CBGs near the origin of the coordinate system,
where haversine distances are nearly uniform. Socioeconomic attributes are
spatially smooth random fields, visit rates are drawn per CBG and the DV rate
is a linear function of the standardised variables with coefficients that may
vary in space. Every generated file uses the ingest formats, so a city can be
run through the whole pipeline and the estimates compared with the truth.
"""

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Literal, Optional, Tuple

import numpy as np
import pandas as pd
from pydantic import (
    BaseModel,
    ConfigDict,
    Field,
    ValidationError as PydanticValidationError,
    model_validator,
)
from scipy import ndimage

from . import FORMAT_VERSION, geo
from .errors import GenerationError, ParameterError
from .ingest import ALCOHOL_OUTLETS, OUTLET_TYPES
from .io import read_json, write_json
from .rates import ACS_VARIABLES, VISIT_RATE_COLUMNS

logger = logging.getLogger(__name__)

FILE_NAMES = {
    "cbgs": "cbgs.geojson",
    "pois": "pois.csv",
    "visits": "visits.csv",
    "incidents": "incidents.csv",
    "ground_truth": "ground_truth.json",
    "config": "synth_config.json",
}

OUTLET_CODES = {label: code for code, label in ALCOHOL_OUTLETS.items()}
OTHER_POI_CODES = {"445110": "grocery_store", "722511": "restaurant"}

DV_TYPES = ("BATTERY", "ASSAULT", "CRIMINAL SEXUAL ASSAULT")
HOME_LOCATIONS = ("RESIDENCE", "APARTMENT", "RESIDENCE - PORCH / HALLWAY")

DRIVERS = (
    "intercept",
    *ACS_VARIABLES,
    *VISIT_RATE_COLUMNS,
    "population_density",
)
"""Names that may carry a coefficient."""

_RACE = {
    "pct_white": 1.0,
    "pct_black": 0.8,
    "pct_amind": -2.5,
    "pct_asian": -0.8,
    "pct_pacific": -3.0,
    "pct_other_race": -1.0,
}
_AGE = {
    "pct_age_lt18": 0.4,
    "pct_age_18_29": 0.3,
    "pct_age_30_39": 0.2,
    "pct_age_40_49": 0.0,
    "pct_age_50_59": 0.0,
    "pct_age_gt60": 0.1,
}
_EDUCATION = {
    "pct_lt_highschool": 0.0,
    "pct_highschool": 0.4,
    "pct_university": 0.6,
}
_SHARES = {
    "pct_hispanic": -1.0,
    "pct_unemployment": -2.3,
    "pct_female_hh": -1.5,
    "pct_security_inc": -1.2,
    "pct_assist_inc": -3.0,
    "pct_renter_hh": 0.0,
    "pct_stay_5yrs": 0.5,
}


class CoefficientField(BaseModel):
    """Spatial pattern of one coefficient.

    ``constant`` uses ``value``. ``linear`` goes from ``start`` at the west
    (``axis='x'``) or south (``axis='y'``) edge to ``end`` at the opposite
    edge. ``radial`` equals ``start`` at ``center`` and decays to ``end``
    with a Gaussian profile of width ``radius``. Positions are relative to
    the grid, from 0 to 1.
    """

    model_config = ConfigDict(extra="forbid")

    kind: Literal["constant", "linear", "radial"] = "constant"
    value: float = 0.0
    axis: Literal["x", "y"] = "x"
    start: float = 0.0
    end: float = 0.0
    center: Tuple[float, float] = (0.5, 0.5)
    radius: float = Field(0.25, gt=0)

    def evaluate(self, u: np.ndarray, v: np.ndarray) -> np.ndarray:
        if self.kind == "constant":
            return np.full(len(u), self.value)
        if self.kind == "linear":
            t = u if self.axis == "x" else v
            return self.start + (self.end - self.start) * t
        d2 = (u - self.center[0]) ** 2 + (v - self.center[1]) ** 2
        weight = np.exp(-0.5 * d2 / self.radius**2)
        return self.end + (self.start - self.end) * weight


class SynthConfig(BaseModel):
    """Settings of a synthetic city."""

    model_config = ConfigDict(extra="forbid")

    seed: int
    rows: int = Field(20, ge=1)
    cols: int = Field(20, ge=1)
    cell_size: float = Field(0.01, gt=0)
    """Side of a CBG in degrees."""
    origin: Tuple[float, float] = (0.0, 0.0)
    """(lon, lat) of the south-west corner."""
    population: Tuple[int, int] = (1000, 5000)
    device_fraction: Tuple[float, float] = (0.03, 0.08)
    pois_per_type: int = Field(5, ge=1)
    other_pois: int = Field(10, ge=0)
    visit_means: Dict[str, float] = {
        "liquor_store": 0.8,
        "drinking_place": 1.2,
        "brewery": 0.15,
        "winery": 0.05,
    }
    """Typical visits per device for each outlet type."""
    visit_spread: float = Field(0.5, ge=0)
    """Standard deviation of the log visit rates."""
    visit_length: float = Field(0.0, ge=0)
    """Smoothing length of the visit-rate fields, in cells."""
    confounder_length: float = Field(3.0, ge=0)
    """Smoothing length of the socioeconomic fields, in cells."""
    coefficients: Dict[str, CoefficientField] = {
        "intercept": CoefficientField(value=10.0)
    }
    noise_sd: float = Field(1.0, ge=0)
    poisson: bool = False
    """Draw incident counts from a Poisson distribution."""
    distractor_fraction: float = Field(0.3, ge=0)
    """Non-DV incidents added per DV incident."""
    max_clip_fraction: float = Field(0.25, ge=0, le=1)
    """Largest share of CBGs allowed a negative implied rate."""

    @model_validator(mode="after")
    def _check(self):
        if self.rows * self.cols < 25:
            raise ValueError("The grid needs at least 25 CBGs")
        if not 1 <= self.population[0] <= self.population[1]:
            raise ValueError("population must be an increasing positive range")
        lo, hi = self.device_fraction
        if not 0 < lo <= hi <= 1:
            raise ValueError("device_fraction must be a range within (0, 1]")
        unknown = [c for c in self.coefficients if c not in DRIVERS]
        if unknown:
            raise ValueError(f"Unknown coefficient variables {unknown}")
        if "intercept" not in self.coefficients:
            raise ValueError("An intercept coefficient is required")
        missing = [t for t in OUTLET_TYPES if t not in self.visit_means]
        if missing or any(v < 0 for v in self.visit_means.values()):
            raise ValueError("visit_means needs a non-negative mean per type")
        return self

    @classmethod
    def from_json(cls, path) -> "SynthConfig":
        return cls.model_validate(read_json(path))


@dataclass(frozen=True, eq=False)
class GroundTruth:
    """Coefficients and rates used to generate a city."""

    seed: int
    ids: Tuple[str, ...]
    names: Tuple[str, ...]
    """Coefficient names, the intercept first."""
    coefficients: np.ndarray
    """Coefficient of every CBG, shape (n, len(names))."""
    dv_rate_true: np.ndarray
    """Noiseless DV rate."""
    dv_rate: np.ndarray
    """Rate implied by the generated incident counts."""
    visit_rates: Dict[str, np.ndarray]
    scaling: Dict[str, Tuple[float, float]]
    """Mean and population standard deviation of each driver."""

    def coefficient(self, name: str) -> np.ndarray:
        return self.coefficients[:, self.names.index(name)]

    def to_dict(self) -> dict:
        return {
            "format_version": FORMAT_VERSION,
            "seed": self.seed,
            "ids": list(self.ids),
            "names": list(self.names),
            "coefficients": self.coefficients.tolist(),
            "dv_rate_true": self.dv_rate_true.tolist(),
            "dv_rate": self.dv_rate.tolist(),
            "visit_rates": {
                k: v.tolist() for k, v in self.visit_rates.items()
            },
            "scaling": {k: list(v) for k, v in self.scaling.items()},
        }

    @classmethod
    def from_dict(cls, data: dict) -> "GroundTruth":
        return cls(
            seed=int(data["seed"]),
            ids=tuple(data["ids"]),
            names=tuple(data["names"]),
            coefficients=np.asarray(data["coefficients"], dtype=float),
            dv_rate_true=np.asarray(data["dv_rate_true"], dtype=float),
            dv_rate=np.asarray(data["dv_rate"], dtype=float),
            visit_rates={
                k: np.asarray(v, dtype=float)
                for k, v in data["visit_rates"].items()
            },
            scaling={k: tuple(v) for k, v in data["scaling"].items()},
        )

    @classmethod
    def load(cls, path) -> "GroundTruth":
        return cls.from_dict(read_json(path))


@dataclass(eq=False)
class SyntheticCity:
    """Generated inputs in ingest formats plus the ground truth."""

    config: SynthConfig
    cbgs: dict
    pois: pd.DataFrame
    visits: pd.DataFrame
    incidents: pd.DataFrame
    truth: GroundTruth
    paths: Dict[str, Path] = field(default_factory=dict)

    def write(self, out_dir) -> Dict[str, Path]:
        """Write the input files, ``ground_truth.json`` and the config."""
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        paths = {k: out_dir / v for k, v in FILE_NAMES.items()}
        write_json(self.cbgs, paths["cbgs"])
        self.pois.to_csv(paths["pois"], index=False)
        self.visits.to_csv(paths["visits"], index=False)
        self.incidents.to_csv(paths["incidents"], index=False)
        write_json(self.truth.to_dict(), paths["ground_truth"])
        write_json(self.config.model_dump(mode="json"), paths["config"])
        self.paths = paths
        logger.info(f"Wrote synthetic city to {out_dir}")
        return paths


def _smooth_field(rng, rows: int, cols: int, length: float) -> np.ndarray:
    """Standardised Gaussian random field, flattened in row-major order."""
    noise = rng.standard_normal((rows, cols))
    if length > 0:
        noise = ndimage.gaussian_filter(noise, sigma=length, mode="reflect")
    noise = noise.reshape(-1)
    return (noise - noise.mean()) / noise.std()


def _softmax_shares(base: Dict[str, float], smooth) -> Dict[str, np.ndarray]:
    logits = np.column_stack([b + 0.5 * smooth() for b in base.values()])
    logits -= logits.max(axis=1, keepdims=True)
    shares = np.exp(logits)
    shares = 100.0 * shares / shares.sum(axis=1, keepdims=True)
    return {name: shares[:, j] for j, name in enumerate(base)}


def _sigmoid(x):
    return 1.0 / (1.0 + np.exp(-x))


def _socioeconomic(smooth) -> Dict[str, np.ndarray]:
    attributes = {}
    attributes.update(_softmax_shares(_RACE, smooth))
    attributes.update(_softmax_shares(_AGE, smooth))
    attributes.update(_softmax_shares(_EDUCATION, smooth))
    for name, base in _SHARES.items():
        attributes[name] = 100.0 * _sigmoid(base + 0.5 * smooth())
    assist = attributes["pct_assist_inc"] / 100.0
    attributes["pct_assist_or_snap"] = 100.0 * _sigmoid(
        np.log(assist / (1 - assist)) + 1.2 + 0.2 * smooth()
    )
    attributes["med_income"] = np.exp(10.9 + 0.35 * smooth())
    return {name: attributes[name] for name in ACS_VARIABLES}


def generate(config: SynthConfig) -> SyntheticCity:
    """Generate a synthetic city.

    Parameters
    ----------
    config : SynthConfig
        Settings, including the seed.

    Returns
    -------
    SyntheticCity
        CBG collection, POI, visit and incident tables, and the truth.

    Raises
    ------
    GenerationError
        If too many CBGs would have a negative DV rate.
    """
    rng = np.random.default_rng(config.seed)
    rows, cols, size = config.rows, config.cols, config.cell_size
    n = rows * cols
    row, col = np.divmod(np.arange(n), cols)
    ids = [f"170310{r:03d}{c:03d}" for r, c in zip(row, col)]
    lon0, lat0 = config.origin
    west = lon0 + col * size
    south = lat0 + row * size
    polygons = [
        (
            (
                (w, s),
                (w + size, s),
                (w + size, s + size),
                (w, s + size),
                (w, s),
            ),
        )
        for w, s in zip(west.tolist(), south.tolist())
    ]
    areas = np.array([geo.area_km2(p) for p in polygons])
    u = (col + 0.5) / cols
    v = (row + 0.5) / rows

    population = rng.integers(
        config.population[0], config.population[1] + 1, n
    )
    fraction = rng.uniform(*config.device_fraction, n)
    devices = np.maximum(1, np.rint(population * fraction)).astype(int)

    def smooth():
        return _smooth_field(rng, rows, cols, config.confounder_length)

    attributes = _socioeconomic(smooth)

    visitors = {}
    visit_rates = {}
    for outlet in OUTLET_TYPES:
        log_rate = config.visit_spread * _smooth_field(
            rng, rows, cols, config.visit_length
        )
        rate = config.visit_means[outlet] * np.exp(log_rate)
        visitors[outlet] = np.rint(rate * devices).astype(int)
        visit_rates[outlet] = visitors[outlet] / devices

    variables = dict(attributes)
    for outlet in OUTLET_TYPES:
        variables[f"{outlet}_vr"] = visit_rates[outlet]
    variables["population_density"] = population / areas

    names = ["intercept"]
    names += [c for c in config.coefficients if c != "intercept"]
    betas = np.column_stack(
        [config.coefficients[name].evaluate(u, v) for name in names]
    )
    scaling = {}
    design = [np.ones(n)]
    for name in names[1:]:
        x = variables[name]
        mean, std = float(x.mean()), float(x.std())
        if std == 0:
            raise GenerationError(f"Driver {name} is constant")
        scaling[name] = (mean, std)
        design.append((x - mean) / std)
    design = np.column_stack(design)
    truth_rate = np.sum(betas * design, axis=1)
    noisy = truth_rate + config.noise_sd * rng.standard_normal(n)
    negative = float(np.mean(noisy < 0))
    if negative > config.max_clip_fraction:
        raise GenerationError(
            f"{negative:.0%} of CBGs have a negative implied DV rate "
            f"(allowed {config.max_clip_fraction:.0%}); raise the intercept "
            "or lower the coefficients"
        )
    if negative:
        logger.warning(f"Clipping {negative:.1%} of DV rates at zero")
    expected = np.maximum(noisy, 0.0) * population / 1000.0
    if config.poisson:
        counts = rng.poisson(expected)
    else:
        counts = np.rint(expected).astype(int)
    dv_rate = 1000.0 * counts / population

    pois, visits = _pois_and_visits(rng, config, ids, visitors)
    incidents = _incidents(rng, config, counts, west, south)

    cbgs = {
        "type": "FeatureCollection",
        "features": [
            {
                "type": "Feature",
                "geometry": {
                    "type": "Polygon",
                    "coordinates": [[list(p) for p in polygons[i][0]]],
                },
                "properties": {
                    "cbg_id": ids[i],
                    "population": int(population[i]),
                    "device_count": int(devices[i]),
                    "area_km2": float(areas[i]),
                    **{k: float(a[i]) for k, a in attributes.items()},
                },
            }
            for i in range(n)
        ],
    }
    truth = GroundTruth(
        seed=config.seed,
        ids=tuple(ids),
        names=tuple(names),
        coefficients=betas,
        dv_rate_true=truth_rate,
        dv_rate=dv_rate,
        visit_rates=visit_rates,
        scaling=scaling,
    )
    logger.info(
        f"Generated {n} CBGs, {len(pois)} POIs, {len(visits)} visit rows "
        f"and {len(incidents)} incidents ({int(counts.sum())} DV)"
    )
    return SyntheticCity(
        config=config,
        cbgs=cbgs,
        pois=pois,
        visits=visits,
        incidents=incidents,
        truth=truth,
    )


def _random_locations(rng, config: SynthConfig, count: int) -> np.ndarray:
    """Uniform points strictly inside random cells."""
    cells = rng.integers(0, config.rows * config.cols, count)
    row, col = np.divmod(cells, config.cols)
    offset = rng.uniform(0.05, 0.95, (count, 2))
    lon = config.origin[0] + (col + offset[:, 0]) * config.cell_size
    lat = config.origin[1] + (row + offset[:, 1]) * config.cell_size
    return np.column_stack([lon, lat])


def _pois_and_visits(rng, config, ids, visitors):
    poi_rows = []
    by_type: Dict[str, List[str]] = {}
    kinds = []
    for outlet in OUTLET_TYPES:
        kinds += [(outlet, OUTLET_CODES[outlet], outlet)] * (
            config.pois_per_type
        )
    others = list(OTHER_POI_CODES.items())
    for j in range(config.other_pois):
        code, label = others[j % len(others)]
        kinds.append((None, code, label))
    locations = _random_locations(rng, config, len(kinds))
    for index, ((outlet, code, label), (lon, lat)) in enumerate(
        zip(kinds, locations), 1
    ):
        poi_id = f"P{index:05d}"
        poi_rows.append((poi_id, code, lon, lat, label))
        by_type.setdefault(outlet or "other", []).append(poi_id)

    visit_rows = []
    for outlet in OUTLET_TYPES:
        targets = by_type[outlet]
        split = rng.multinomial(
            visitors[outlet], np.full(len(targets), 1.0 / len(targets))
        )
        for i, cbg_id in enumerate(ids):
            for poi_id, count in zip(targets, split[i]):
                if count > 0:
                    visit_rows.append((poi_id, cbg_id, int(count)))
    other = by_type.get("other", [])
    if other:
        for cbg_id in ids:
            chosen = rng.choice(len(other), min(2, len(other)), replace=False)
            for j in sorted(chosen):
                visit_rows.append(
                    (other[j], cbg_id, int(rng.integers(1, 30)))
                )
    pois = pd.DataFrame(
        poi_rows, columns=["poi_id", "naics", "lon", "lat", "category_label"]
    )
    visits = pd.DataFrame(
        visit_rows, columns=["poi_id", "cbg_id", "visitor_count"]
    )
    return pois, visits


def _incidents(rng, config, counts, west, south):
    total = int(counts.sum())
    cells = np.repeat(np.arange(len(counts)), counts)
    offset = rng.uniform(0.05, 0.95, (total, 2))
    lon = west[cells] + offset[:, 0] * config.cell_size
    lat = south[cells] + offset[:, 1] * config.cell_size
    types = rng.choice(DV_TYPES, total)
    places = rng.choice(HOME_LOCATIONS, total)
    rows = [
        ("true", types[i], places[i], lon[i], lat[i]) for i in range(total)
    ]

    n_distractors = int(round(config.distractor_fraction * total))
    locations = _random_locations(rng, config, n_distractors)
    width = config.cols * config.cell_size
    for j in range(n_distractors):
        lon_j, lat_j = locations[j]
        kind = j % 4
        if kind == 0:
            rows.append(("false", "BATTERY", "RESIDENCE", lon_j, lat_j))
        elif kind == 1:
            rows.append(("true", "THEFT", "RESIDENCE", lon_j, lat_j))
        elif kind == 2:
            rows.append(("true", "BATTERY", "STREET", lon_j, lat_j))
        else:
            rows.append(("true", "BATTERY", "RESIDENCE", lon_j + width, lat_j))
    frame = pd.DataFrame(
        [
            (f"I{i:07d}", lon_i, lat_i, flag, kind, place)
            for i, (flag, kind, place, lon_i, lat_i) in enumerate(rows, 1)
        ],
        columns=[
            "incident_id",
            "lon",
            "lat",
            "domestic",
            "primary_type",
            "location_description",
        ],
    )
    return frame


def scenario_paper_like(seed: int) -> SynthConfig:
    """Positive liquor store, negative drinking place and brewery effects and
    no winery effect, plus spatially smooth socioeconomic confounders.
    """
    return SynthConfig(
        seed=seed,
        coefficients={
            "intercept": CoefficientField(value=10.0),
            "liquor_store_vr": CoefficientField(value=2.0),
            "drinking_place_vr": CoefficientField(value=-1.2),
            "brewery_vr": CoefficientField(value=-0.8),
            "winery_vr": CoefficientField(value=0.0),
            "pct_female_hh": CoefficientField(value=1.5),
            "med_income": CoefficientField(value=-1.0),
            "pct_unemployment": CoefficientField(value=0.8),
            "pct_renter_hh": CoefficientField(value=0.6),
            "pct_white": CoefficientField(value=-1.0),
        },
        noise_sd=1.5,
    )


def scenario_heterogeneous(seed: int) -> SynthConfig:
    """Strongly spatially varying coefficients.

    The liquor store effect is positive in the west and negative in the
    east, the drinking place effect is concentrated around one centre.
    """
    return SynthConfig(
        seed=seed,
        coefficients={
            "intercept": CoefficientField(
                kind="linear", axis="y", start=10.0, end=14.0
            ),
            "liquor_store_vr": CoefficientField(
                kind="linear", axis="x", start=4.0, end=-2.0
            ),
            "drinking_place_vr": CoefficientField(
                kind="radial",
                center=(0.3, 0.7),
                start=-3.0,
                end=0.0,
                radius=0.25,
            ),
            "pct_female_hh": CoefficientField(
                kind="linear", axis="y", start=0.0, end=3.0
            ),
        },
        noise_sd=1.0,
    )


PRESETS = {
    "paper-like": scenario_paper_like,
    "heterogeneous": scenario_heterogeneous,
}


def load_scenario(
    preset: Optional[str] = None, path=None, seed: Optional[int] = None
) -> SynthConfig:
    """Build a config from a preset or a JSON file, optionally reseeded.

    Raises
    ------
    ParameterError
        If the preset is unknown or the file is not a valid config.
    """
    if preset is not None:
        try:
            factory = PRESETS[preset]
        except KeyError:
            raise ParameterError(
                f"Unknown preset {preset!r}, choose from {sorted(PRESETS)}"
            )
        return factory(0 if seed is None else seed)
    if path is None:
        raise ParameterError("Need a preset or a config file")
    data = read_json(path)
    if seed is not None:
        data["seed"] = seed
    try:
        return SynthConfig.model_validate(data)
    except PydanticValidationError as e:
        raise ParameterError(f"Invalid synthetic config {path}: {e}") from e
