"""
Geometric primitives: containment, centroids, distances, neighbours and
spatial weights.

Coordinates are (lon, lat) in degrees throughout. Polygons are sequences of
closed rings, the first being the outer ring and the rest holes. Planar
operations (containment, centroids, areas) treat degrees as planar, which is
adequate at city scale; distances are great-circle.
"""

import logging
from dataclasses import dataclass
from typing import TYPE_CHECKING, Dict, Optional, Sequence, Tuple

import libpysal
import numpy as np
from scipy import sparse

from .errors import GeometryError, ParameterError
from .utils import map_jobs

if TYPE_CHECKING:
    from .ingest import CbgTable, IncidentTable

logger = logging.getLogger(__name__)

EARTH_RADIUS_M = 6_371_008.8
"""Mean earth radius in metres used by :py:func:`distance`."""

KM_PER_DEGREE = EARTH_RADIUS_M * np.pi / 180.0 / 1000.0

_BOUNDARY_TOL = 1e-12
_VERTEX_DECIMALS = 9


def _rings(polygon) -> list:
    return [np.asarray(ring, dtype=float).reshape(-1, 2) for ring in polygon]


def _signed_area(ring: np.ndarray) -> float:
    x, y = ring[:, 0], ring[:, 1]
    return 0.5 * float(np.sum(x[:-1] * y[1:] - x[1:] * y[:-1]))


def polygon_area(polygon) -> float:
    """Area of a polygon in squared degrees, holes subtracted."""
    rings = _rings(polygon)
    area = abs(_signed_area(rings[0]))
    for hole in rings[1:]:
        area -= abs(_signed_area(hole))
    return area


def area_km2(polygon) -> float:
    """Approximate area in square kilometres.

    Uses an equal-area planar approximation: squared degrees are scaled by
    the length of a degree and by the cosine of the centroid latitude.
    """
    lat = centroid(polygon).y
    return (
        polygon_area(polygon) * KM_PER_DEGREE**2 * np.cos(np.radians(lat))
    )


def _on_segments(px, py, x0, y0, x1, y1) -> np.ndarray:
    dx = x1 - x0
    dy = y1 - y0
    cross = dx * (py - y0) - dy * (px - x0)
    length = np.hypot(dx, dy)
    eps = _BOUNDARY_TOL
    return (
        (np.abs(cross) <= eps * np.maximum(length, 1.0))
        & (px >= np.minimum(x0, x1) - eps)
        & (px <= np.maximum(x0, x1) + eps)
        & (py >= np.minimum(y0, y1) - eps)
        & (py <= np.maximum(y0, y1) + eps)
    )


def points_in_polygon(points, polygon, include_boundary=True) -> np.ndarray:
    """Vectorised even-odd containment test.

    Parameters
    ----------
    points : array_like
        Array of shape (N, 2).
    polygon : sequence of rings
        Outer ring followed by optional holes. Holes are subtracted by the
        even-odd rule.
    include_boundary : bool
        Whether points lying on a ring count as contained.

    Returns
    -------
    numpy.ndarray
        Boolean array of length N.
    """
    if polygon_area(polygon) <= 0.0:
        raise GeometryError("Polygon has zero area")
    points = np.asarray(points, dtype=float).reshape(-1, 2)
    px = points[:, 0][:, None]
    py = points[:, 1][:, None]
    crossings = np.zeros(len(points), dtype=int)
    boundary = np.zeros(len(points), dtype=bool)
    for ring in _rings(polygon):
        x0, y0 = ring[:-1, 0], ring[:-1, 1]
        x1, y1 = ring[1:, 0], ring[1:, 1]
        straddles = (y0 > py) != (y1 > py)
        with np.errstate(divide="ignore", invalid="ignore"):
            x_cross = x0 + (py - y0) * (x1 - x0) / (y1 - y0)
        crossings += np.count_nonzero(straddles & (px < x_cross), axis=1)
        if include_boundary:
            boundary |= _on_segments(px, py, x0, y0, x1, y1).any(axis=1)
    return (crossings % 2 == 1) | boundary


def point_in_polygon(point, polygon) -> bool:
    """Return True if the point lies inside or on the boundary of a polygon.

    Raises
    ------
    GeometryError
        If the polygon has zero area.
    """
    return bool(points_in_polygon([point], polygon)[0])


@dataclass(frozen=True)
class Centroid:
    """Planar centroid of a CBG in (lon, lat) degrees."""

    cbg_id: Optional[str]
    x: float
    y: float


def centroid(polygon, cbg_id: Optional[str] = None) -> Centroid:
    """Area-weighted centroid of the outer ring minus any holes.

    Raises
    ------
    GeometryError
        If the polygon has zero area.
    """
    total = 0.0
    cx = 0.0
    cy = 0.0
    for i, ring in enumerate(_rings(polygon)):
        area = _signed_area(ring)
        if area == 0.0:
            continue
        x, y = ring[:, 0], ring[:, 1]
        cross = x[:-1] * y[1:] - x[1:] * y[:-1]
        rx = np.sum((x[:-1] + x[1:]) * cross) / (6.0 * area)
        ry = np.sum((y[:-1] + y[1:]) * cross) / (6.0 * area)
        weight = abs(area) if i == 0 else -abs(area)
        total += weight
        cx += weight * rx
        cy += weight * ry
    if total <= 0.0:
        raise GeometryError(f"Polygon {cbg_id or ''} has zero area".strip())
    return Centroid(cbg_id=cbg_id, x=float(cx / total), y=float(cy / total))


def cbg_centroids(cbgs: "CbgTable") -> np.ndarray:
    """Centroids of every CBG in canonical order as an (n, 2) array."""
    return np.array(
        [
            (c.x, c.y)
            for c in (centroid(r.polygon, r.cbg_id) for r in cbgs.records)
        ],
        dtype=float,
    ).reshape(-1, 2)


def _haversine(lon1, lat1, lon2, lat2):
    lon1, lat1, lon2, lat2 = map(np.radians, (lon1, lat1, lon2, lat2))
    a = (
        np.sin((lat2 - lat1) / 2.0) ** 2
        + np.cos(lat1) * np.cos(lat2) * np.sin((lon2 - lon1) / 2.0) ** 2
    )
    return 2.0 * EARTH_RADIUS_M * np.arcsin(np.sqrt(np.clip(a, 0.0, 1.0)))


def distance(p, q) -> float:
    """Great-circle distance in metres between two (lon, lat) points."""
    return float(_haversine(p[0], p[1], q[0], q[1]))


def pairwise_distances(points, other=None) -> np.ndarray:
    """Matrix of great-circle distances in metres.

    Parameters
    ----------
    points : array_like
        Array of shape (n, 2).
    other : array_like, optional
        Array of shape (m, 2). Defaults to ``points``.

    Returns
    -------
    numpy.ndarray
        Array of shape (n, m).
    """
    points = np.asarray(points, dtype=float).reshape(-1, 2)
    same = other is None
    other = points if same else np.asarray(other, float).reshape(-1, 2)
    d = _haversine(
        points[:, 0][:, None],
        points[:, 1][:, None],
        other[:, 0][None, :],
        other[:, 1][None, :],
    )
    if same:
        np.fill_diagonal(d, 0.0)
    return d


def knn(points, k: int) -> Tuple[np.ndarray, np.ndarray]:
    """k nearest other points for every point.

    Parameters
    ----------
    points : array_like
        Array of shape (n, 2) in canonical (cbg_id) order.
    k : int
        Number of neighbours, ``1 <= k < n``.

    Returns
    -------
    indices : numpy.ndarray
        Array of shape (n, k), nearest first. Equal distances are ordered
        by index.
    distances : numpy.ndarray
        Corresponding distances in metres, nondecreasing along each row.
    """
    points = np.asarray(points, dtype=float).reshape(-1, 2)
    n = len(points)
    if not 1 <= k < n:
        raise ParameterError(f"k must satisfy 1 <= k < n={n}, got {k}")
    d = pairwise_distances(points)
    np.fill_diagonal(d, np.inf)
    indices = np.argsort(d, axis=1, kind="stable")[:, :k]
    return indices, np.take_along_axis(d, indices, axis=1)


@dataclass(frozen=True)
class Assignment:
    """Result of assigning incidents to CBGs."""

    counts: Dict[str, int]
    unassigned: int
    labels: Tuple[Optional[str], ...]
    """CBG of each incident in input order, None when outside all CBGs."""

    @property
    def total(self) -> int:
        return sum(self.counts.values()) + self.unassigned


def assign_incidents(
    incidents: "IncidentTable", cbgs: "CbgTable", threads: int = 1
) -> Assignment:
    """Count incidents falling within each CBG.

    Points on a boundary shared by several CBGs go to the one with the
    smallest ``cbg_id``, so no incident is counted twice.

    Parameters
    ----------
    incidents : IncidentTable
        Incidents to assign.
    cbgs : CbgTable
        CBG polygons.
    threads : int
        Number of worker threads for the containment tests.

    Returns
    -------
    Assignment
        Per-CBG counts (every CBG present) and the number unassigned.
    """
    points = incidents.coordinates()

    def contained(record):
        ring = np.asarray(record.polygon[0], dtype=float)
        lo = ring.min(axis=0) - _BOUNDARY_TOL
        hi = ring.max(axis=0) + _BOUNDARY_TOL
        candidates = np.flatnonzero(
            np.all((points >= lo) & (points <= hi), axis=1)
        )
        if not len(candidates):
            return candidates
        inside = points_in_polygon(points[candidates], record.polygon)
        return candidates[inside]

    hits = map_jobs(contained, cbgs.records, threads)
    owner = np.full(len(points), -1, dtype=int)
    for j, index in enumerate(hits):
        free = index[owner[index] < 0]
        owner[free] = j
    ids = cbgs.ids
    counts = {cbg_id: 0 for cbg_id in ids}
    for j in owner[owner >= 0]:
        counts[ids[j]] += 1
    unassigned = int(np.sum(owner < 0))
    labels = tuple(ids[j] if j >= 0 else None for j in owner)
    logger.info(
        f"Assigned {len(points) - unassigned} of {len(points)} incidents "
        f"to {len(ids)} CBGs ({unassigned} unassigned)"
    )
    return Assignment(counts=counts, unassigned=unassigned, labels=labels)


@dataclass(frozen=True)
class WeightsMatrix:
    """Row-standardised spatial weights.

    Rows are aligned with ``ids``. Units without neighbours (islands) have
    empty rows.
    """

    ids: Tuple[str, ...]
    scheme: str
    neighbors: Tuple[Tuple[int, ...], ...]
    weights: Tuple[Tuple[float, ...], ...]
    k: Optional[int] = None

    @classmethod
    def from_neighbors(
        cls,
        neighbors: Sequence[Sequence[int]],
        ids: Optional[Sequence[str]] = None,
        scheme: str = "custom",
        k: Optional[int] = None,
    ) -> "WeightsMatrix":
        """Build row-standardised weights from neighbour index lists."""
        n = len(neighbors)
        ids = tuple(str(i) for i in range(n)) if ids is None else tuple(ids)
        if len(ids) != n:
            raise ParameterError("ids and neighbors must have equal length")
        rows = []
        weights = []
        for i, row in enumerate(neighbors):
            row = tuple(sorted({int(j) for j in row}))
            if i in row:
                raise ParameterError(f"Unit {ids[i]} lists itself as neighbor")
            if any(j < 0 or j >= n for j in row):
                raise ParameterError(f"Unit {ids[i]} has invalid neighbors")
            rows.append(row)
            weights.append(tuple(1.0 / len(row) for _ in row))
        return cls(
            ids=ids,
            scheme=scheme,
            neighbors=tuple(rows),
            weights=tuple(weights),
            k=k,
        )

    @property
    def n(self) -> int:
        return len(self.ids)

    @property
    def islands(self) -> Tuple[int, ...]:
        return tuple(i for i, row in enumerate(self.neighbors) if not row)

    def to_sparse(self) -> sparse.csr_matrix:
        """Weights as an (n, n) CSR matrix."""
        rows = [i for i, row in enumerate(self.neighbors) for _ in row]
        cols = [j for row in self.neighbors for j in row]
        data = [w for row in self.weights for w in row]
        return sparse.csr_matrix(
            (np.asarray(data, float), (rows, cols)), shape=(self.n, self.n)
        )

    def descriptor(self) -> dict:
        """JSON-friendly description of the weights."""
        return {
            "scheme": self.scheme,
            "k": self.k,
            "n": self.n,
            "n_islands": len(self.islands),
        }


def _vertex_key(x, y):
    return (
        round(float(x), _VERTEX_DECIMALS),
        round(float(y), _VERTEX_DECIMALS),
    )


def _as_shape(polygon):
    """PySAL polygon with vertices snapped so shared corners match."""
    rings = [[list(_vertex_key(x, y)) for x, y in ring] for ring in polygon]
    return libpysal.cg.asShape({"type": "Polygon", "coordinates": rings})


def _contiguity(cbgs: "CbgTable", scheme: str) -> list:
    builder = {
        "queen": libpysal.weights.Queen,
        "rook": libpysal.weights.Rook,
    }[scheme]
    ids = list(cbgs.ids)
    w = builder.from_iterable(
        [_as_shape(record.polygon) for record in cbgs.records],
        ids=ids,
        silence_warnings=True,
    )
    position = {cbg_id: i for i, cbg_id in enumerate(ids)}
    return [sorted(position[j] for j in w.neighbors[i]) for i in ids]


def spatial_weights(
    cbgs: "CbgTable", scheme: str = "queen", k: int = 8
) -> WeightsMatrix:
    """Build row-standardised spatial weights for a CBG table.

    Parameters
    ----------
    cbgs : CbgTable
        CBGs in canonical order.
    scheme : {'queen', 'rook', 'knn'}
        Queen: neighbours share at least one vertex. Rook: neighbours share
        at least one edge. knn: the k nearest centroids.
    k : int
        Number of neighbours for the knn scheme.

    Returns
    -------
    WeightsMatrix
        Weights aligned with ``cbgs.ids``.
    """
    n = len(cbgs)
    if n < 2:
        raise ParameterError("Spatial weights need at least two units")
    if scheme == "knn":
        indices, _ = knn(cbg_centroids(cbgs), k)
        neighbors = indices.tolist()
    elif scheme in ("queen", "rook"):
        neighbors = _contiguity(cbgs, scheme)
        k = None
    else:
        raise ParameterError(f"Unknown weights scheme: {scheme}")
    w = WeightsMatrix.from_neighbors(
        neighbors, ids=cbgs.ids, scheme=scheme, k=k
    )
    if w.islands:
        logger.warning(
            f"{len(w.islands)} units have no {scheme} neighbours: "
            f"{[w.ids[i] for i in w.islands[:5]]}"
        )
    return w
