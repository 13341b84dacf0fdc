"""
Reading and writing the JSON and GeoJSON outputs.

All JSON is written with sorted keys and non-finite numbers replaced by
``null`` so that the same results always give byte-identical files.
"""

import json
import logging
import math
from pathlib import Path
from typing import Any, Iterable, Mapping, Sequence

import numpy as np

logger = logging.getLogger(__name__)


def to_jsonable(obj: Any) -> Any:
    """Convert numpy and container types to plain JSON values."""
    if isinstance(obj, Mapping):
        return {str(k): to_jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [to_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return [to_jsonable(v) for v in obj.tolist()]
    if isinstance(obj, (bool, np.bool_)):
        return bool(obj)
    if isinstance(obj, (int, np.integer)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        value = float(obj)
        return value if math.isfinite(value) else None
    if isinstance(obj, Path):
        return str(obj)
    return obj


def dumps(obj: Any) -> str:
    return json.dumps(
        to_jsonable(obj), sort_keys=True, indent=2, allow_nan=False
    )


def write_json(obj: Any, path) -> Path:
    path = Path(path)
    path.write_text(dumps(obj) + "\n")
    logger.debug(f"Wrote {path}")
    return path


def read_json(path) -> Any:
    with open(path) as f:
        return json.load(f)


def polygon_geometry(polygon: Sequence[Sequence[Sequence[float]]]) -> dict:
    return {
        "type": "Polygon",
        "coordinates": [[list(point) for point in ring] for ring in polygon],
    }


def feature_collection(
    ids: Iterable[str],
    polygons: Mapping[str, Any],
    properties: Mapping[str, Mapping[str, Any]],
) -> dict:
    """GeoJSON feature collection with one polygon feature per id."""
    features = []
    for cbg_id in ids:
        features.append(
            {
                "type": "Feature",
                "id": cbg_id,
                "geometry": polygon_geometry(polygons[cbg_id]),
                "properties": {"cbg_id": cbg_id, **properties[cbg_id]},
            }
        )
    return {"type": "FeatureCollection", "features": features}
