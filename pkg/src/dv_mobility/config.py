"""
Pipeline configuration.

A configuration is one JSON document validated by :py:class:`PipelineConfig`.
Values given on the command line take precedence over the file, which takes
precedence over the defaults. The resolved configuration, with every default
filled in, is written next to the outputs so a run can be repeated exactly.
"""

import logging
from pathlib import Path
from typing import Any, Dict, List, Mapping, Optional, Tuple, Union

from pydantic import (
    BaseModel,
    ConfigDict,
    Field,
    ValidationError as PydanticValidationError,
    field_validator,
)

from .diagnostics import DEFAULT_COMPOSITION_GROUPS, CompositionGroup
from .errors import ParameterError
from .evaluation import MODELS
from .ingest import ALCOHOL_OUTLETS, DEFAULT_DV_TYPES, DEFAULT_HOME_LOCATIONS
from .io import read_json, write_json
from .models.forest import M_TRY_RULES, N_TREE_GRID, RfConfig
from .models.mlp import MlpConfig
from .rates import BASELINE_VARIABLES
from .synth import FILE_NAMES

logger = logging.getLogger(__name__)

RESOLVED_CONFIG = "resolved_config.json"


class _Settings(BaseModel):
    model_config = ConfigDict(extra="forbid")


class InputPaths(_Settings):
    """Locations of the input files."""

    cbgs: Optional[Path] = None
    pois: Optional[Path] = None
    visits: Optional[Path] = None
    incidents: Optional[Path] = None
    ground_truth: Optional[Path] = None
    """Recorded by hash in the reports when present."""

    @classmethod
    def from_directory(cls, directory) -> "InputPaths":
        """Paths of the files written by ``synth`` in a directory."""
        directory = Path(directory)
        truth = directory / FILE_NAMES["ground_truth"]
        return cls(
            cbgs=directory / FILE_NAMES["cbgs"],
            pois=directory / FILE_NAMES["pois"],
            visits=directory / FILE_NAMES["visits"],
            incidents=directory / FILE_NAMES["incidents"],
            ground_truth=truth if truth.exists() else None,
        )

    def require(self, *names: str) -> Tuple[Path, ...]:
        """Return the named paths, raising if one is not configured."""
        missing = [n for n in names if getattr(self, n) is None]
        if missing:
            raise ParameterError(f"No input path configured for {missing}")
        return tuple(getattr(self, n) for n in names)

    def resolve(self, base: Path) -> "InputPaths":
        return self.model_copy(
            update={
                name: (base / value).resolve()
                for name, value in self
                if value is not None and not Path(value).is_absolute()
            }
        )


class WeightsSettings(_Settings):
    scheme: str = "queen"
    k: int = Field(8, ge=1)
    n_perm: int = Field(999, ge=0)
    """Permutations for Moran's I."""
    moran_seed: Optional[int] = None
    """Defaults to the pipeline seed."""

    @field_validator("scheme")
    @classmethod
    def _check_scheme(cls, value):
        if value not in ("queen", "rook", "knn"):
            raise ValueError(f"Unknown weights scheme {value!r}")
        return value


class VifSettings(_Settings):
    threshold: float = Field(5.0, gt=1)
    composition_groups: Optional[List[Dict[str, Any]]] = None
    """Groups as ``{"name", "members", "reference"}``, None for the
    race, age and education defaults."""
    manual_drops: List[str] = []

    def groups(self) -> Tuple[CompositionGroup, ...]:
        if self.composition_groups is None:
            return DEFAULT_COMPOSITION_GROUPS
        return tuple(
            CompositionGroup(
                name=g["name"],
                members=tuple(g["members"]),
                reference=g["reference"],
            )
            for g in self.composition_groups
        )


class RfSettings(_Settings):
    n_tree: int = Field(80, ge=1)
    m_try: Union[int, str] = "sqrt"
    min_leaf: int = Field(1, ge=1)
    max_depth: Optional[int] = None
    bootstrap: bool = True
    search: bool = False
    """Select ``n_tree`` and ``m_try`` by grid search before fitting."""
    n_tree_grid: List[int] = list(N_TREE_GRID)
    m_try_rules: List[Union[int, str]] = list(M_TRY_RULES)

    def to_config(self, seed: int) -> RfConfig:
        return RfConfig(
            n_tree=self.n_tree,
            m_try=self.m_try,
            min_leaf=self.min_leaf,
            max_depth=self.max_depth,
            bootstrap=self.bootstrap,
            seed=seed,
        )


class MlpSettings(_Settings):
    layers: List[int] = [128, 128, 64, 32]
    dropout: List[float] = [0.2, 0.2, 0.0, 0.0]
    epochs: int = Field(200, ge=0)
    batch_size: int = Field(32, ge=1)
    learning_rate: float = Field(1e-3, gt=0)
    lr_decay: float = Field(1.0, gt=0, le=1)

    def to_config(self, seed: int) -> MlpConfig:
        return MlpConfig(
            layers=tuple(self.layers),
            dropout=tuple(self.dropout),
            epochs=self.epochs,
            batch_size=self.batch_size,
            learning_rate=self.learning_rate,
            lr_decay=self.lr_decay,
            seed=seed,
        )


class GwrSettings(_Settings):
    kernel: str = "adaptive"
    k_min: Optional[float] = None
    k_max: Optional[float] = None
    bandwidth: Optional[float] = None
    """Fixed bandwidth, skips the search."""

    @field_validator("kernel")
    @classmethod
    def _check_kernel(cls, value):
        if value not in ("adaptive", "fixed"):
            raise ValueError(f"Unknown kernel {value!r}")
        return value

    def search_options(self) -> Dict[str, Any]:
        return {
            "k_min": self.k_min,
            "k_max": self.k_max,
            "kernel": self.kernel,
        }


class CvSettings(_Settings):
    k: int = Field(10, ge=2)
    prestandardized: bool = False
    """Use the globally standardised features in every fold."""


class PipelineConfig(_Settings):
    """Settings of every pipeline stage."""

    seed: int
    inputs: InputPaths = InputPaths()
    out_dir: Path = Path("out")
    naics: Dict[str, str] = dict(ALCOHOL_OUTLETS)
    dv_types: List[str] = list(DEFAULT_DV_TYPES)
    home_locations: List[str] = list(DEFAULT_HOME_LOCATIONS)
    min_pop: int = Field(1, ge=0)
    min_devices: int = Field(1, ge=0)
    variables: List[str] = list(BASELINE_VARIABLES)
    """Socioeconomic variables of the baseline condition."""
    models: List[str] = list(MODELS)
    weights: WeightsSettings = WeightsSettings()
    vif: VifSettings = VifSettings()
    rf: RfSettings = RfSettings()
    mlp: MlpSettings = MlpSettings()
    gwr: GwrSettings = GwrSettings()
    cv: CvSettings = CvSettings()
    threads: int = Field(1, ge=1)

    @field_validator("naics")
    @classmethod
    def _check_naics(cls, value):
        bad = [c for c in value if len(c) != 6 or not c.isdigit()]
        if bad or not value:
            raise ValueError(f"NAICS codes must be 6 digits, got {bad}")
        return value

    @field_validator("models")
    @classmethod
    def _check_models(cls, value):
        unknown = [m for m in value if m not in MODELS]
        if unknown:
            raise ValueError(f"Unknown models {unknown}")
        return value

    @property
    def moran_seed(self) -> int:
        if self.weights.moran_seed is None:
            return self.seed
        return self.weights.moran_seed


def _set_nested(data: dict, key: str, value) -> None:
    """Set ``data['a']['b']`` from the dotted key ``'a.b'``."""
    *parents, leaf = key.split(".")
    for parent in parents:
        data = data.setdefault(parent, {})
        if not isinstance(data, dict):
            raise ParameterError(f"Cannot override {key}: {parent} is a value")
    data[leaf] = value


def load_config(
    path=None, overrides: Optional[Mapping[str, Any]] = None
) -> PipelineConfig:
    """Load and validate a pipeline configuration.

    Parameters
    ----------
    path : str or Path, optional
        JSON configuration file. Relative input paths are resolved against
        its directory.
    overrides : Mapping, optional
        Values that take precedence over the file, keyed by dotted field
        names such as ``'cv.k'``. None values are ignored.

    Returns
    -------
    PipelineConfig
        Validated configuration.

    Raises
    ------
    ParameterError
        If the configuration is invalid.
    """
    data: Dict[str, Any] = {}
    base = Path.cwd()
    if path is not None:
        path = Path(path)
        data = read_json(path)
        if not isinstance(data, dict):
            raise ParameterError(f"{path} must contain a JSON object")
        base = path.resolve().parent
    for key, value in (overrides or {}).items():
        if value is not None:
            _set_nested(data, key, value)
    try:
        config = PipelineConfig.model_validate(data)
    except PydanticValidationError as e:
        raise ParameterError(f"Invalid configuration: {e}") from e
    inputs = config.inputs.resolve(base)
    if inputs.ground_truth is None and inputs.cbgs is not None:
        truth = Path(inputs.cbgs).parent / FILE_NAMES["ground_truth"]
        if truth.exists():
            inputs = inputs.model_copy(update={"ground_truth": truth})
    return config.model_copy(update={"inputs": inputs})


def write_resolved_config(config: PipelineConfig, out_dir) -> Path:
    """Write the configuration with every default filled in."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    return write_json(
        config.model_dump(mode="json"), out_dir / RESOLVED_CONFIG
    )
