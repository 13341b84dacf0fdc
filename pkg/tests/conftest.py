import json
from typing import Callable

import numpy as np
import pytest

from dv_mobility.ingest import CbgRecord, CbgTable


def square(x0, y0, size=1.0):
    """Closed counter-clockwise square ring wrapped as a polygon."""
    return (
        (
            (x0, y0),
            (x0 + size, y0),
            (x0 + size, y0 + size),
            (x0, y0 + size),
            (x0, y0),
        ),
    )


@pytest.fixture()
def rng():
    return np.random.default_rng(1234)


@pytest.fixture()
def make_grid() -> Callable:
    """Return a function that builds a grid of square CBGs.

    IDs are ``c<row><col>`` so the canonical order is row-major.
    """

    def make(rows, cols, size=0.01, population=1000, devices=100, **attrs):
        records = []
        for r in range(rows):
            for c in range(cols):
                index = r * cols + c
                attributes = {
                    name: float(np.asarray(values).reshape(-1)[index])
                    for name, values in attrs.items()
                }
                records.append(
                    CbgRecord(
                        cbg_id=f"c{r:02d}{c:02d}",
                        polygon=square(c * size, r * size, size),
                        population=population,
                        device_count=devices,
                        area_km2=1.0,
                        attributes=attributes,
                    )
                )
        return CbgTable(records=records)

    return make


@pytest.fixture()
def write_cbgs(tmp_path) -> Callable:
    """Return a function that writes CBG features to a GeoJSON file."""

    def write(features, name="cbgs.geojson"):
        path = tmp_path / name
        collection = {"type": "FeatureCollection", "features": features}
        path.write_text(json.dumps(collection))
        return path

    return write


@pytest.fixture()
def cbg_feature() -> Callable:
    """Return a function that makes one valid CBG feature."""

    def feature(cbg_id, x0=0.0, y0=0.0, population=1000, devices=50, **props):
        ring = [list(p) for p in square(x0, y0, 0.01)[0]]
        return {
            "type": "Feature",
            "geometry": {"type": "Polygon", "coordinates": [ring]},
            "properties": {
                "cbg_id": cbg_id,
                "population": population,
                "device_count": devices,
                **props,
            },
        }

    return feature


@pytest.fixture()
def write_csv(tmp_path) -> Callable:
    """Return a function that writes rows below a header to a CSV file."""

    def write(name, header, rows):
        path = tmp_path / name
        lines = [",".join(header)]
        lines += [",".join(str(v) for v in row) for row in rows]
        path.write_text("\n".join(lines) + "\n")
        return path

    return write


@pytest.fixture()
def linear_data(rng):
    """Random design with a known linear response."""
    n, p = 60, 3
    X = rng.standard_normal((n, p))
    beta = np.array([1.5, -2.0, 0.5])
    y = 3.0 + X @ beta + 0.1 * rng.standard_normal(n)
    return X, y
