"""Geo-restricted descriptor retrieval for coarse localization."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass

import numpy as np

from . import kernels
from .embedding import EmbeddingModel, embed_batch
from .geoworld import FrameTable, GeoPose, NoisyFix, heading_diff
from .grid import GridIndex

INDEX_FORMAT_VERSION = 1
MIN_NEIGHBORS = 5
MAX_HEADING_DIFF = math.radians(20.0)
PAIR_RADIUS = 10.0
DEFAULT_COV_FLOOR = 1.0  # m^2


class CalibrationError(ValueError):
    pass


@dataclass(eq=False)
class KeyframeDB:
    frame_ids: np.ndarray
    descriptors: np.ndarray  # (n, 30) unit rows
    x: np.ndarray
    y: np.ndarray
    heading: np.ndarray
    grid: GridIndex

    def __len__(self) -> int:
        return self.frame_ids.shape[0]

    @property
    def xy(self) -> np.ndarray:
        return np.column_stack([self.x, self.y])

    def save(self, path) -> None:
        np.savez(
            path,
            format_version=np.int64(INDEX_FORMAT_VERSION),
            frame_ids=self.frame_ids,
            descriptors=self.descriptors,
            x=self.x,
            y=self.y,
            heading=self.heading,
            cell_size=np.float64(self.grid.cell_size),
            grid_shape=np.array([self.grid.nx, self.grid.ny], dtype=np.int64),
            grid_order=self.grid.order,
            grid_cell_start=self.grid.cell_start,
        )

    @classmethod
    def load(cls, path) -> "KeyframeDB":
        with np.load(path) as z:
            version = int(z["format_version"])
            if version != INDEX_FORMAT_VERSION:
                raise ValueError(f"unsupported index format version {version}")
            grid = GridIndex(z["x"], z["y"], float(z["cell_size"]), tuple(int(v) for v in z["grid_shape"]))
            if not (np.array_equal(grid.order, z["grid_order"]) and np.array_equal(grid.cell_start, z["grid_cell_start"])):
                raise ValueError("stored grid does not match entries")
            return cls(
                np.array(z["frame_ids"]), np.array(z["descriptors"]), np.array(z["x"]),
                np.array(z["y"]), np.array(z["heading"]), grid,
            )


def build_index(frames: FrameTable, model: EmbeddingModel, cell_size: float = 10.0) -> KeyframeDB:
    if len(frames) == 0:
        raise ValueError("cannot index an empty frame set")
    desc = embed_batch(model, frames.raw)
    grid = GridIndex(frames.x, frames.y, cell_size)
    return KeyframeDB(
        frames.frame_id.copy(), desc, frames.x.astype(float).copy(), frames.y.astype(float).copy(),
        frames.heading.astype(float).copy(), grid,
    )


# ---------------------------------------------------------------------------
# threshold calibration
# ---------------------------------------------------------------------------


def threshold_from_distances(distances, quantile: float = 95.0) -> float:
    """Drop values above the Tukey fence ``Q3 + 1.5 IQR``, then take the quantile."""
    d = np.asarray(distances, dtype=float)
    if d.size == 0:
        raise CalibrationError("no distances to calibrate from")
    q1, q3 = np.percentile(d, [25.0, 75.0])
    kept = d[d <= q3 + 1.5 * (q3 - q1)]
    return float(np.percentile(kept, quantile))


def aligned_pairs(frames: FrameTable, radius: float = PAIR_RADIUS, max_angle: float = MAX_HEADING_DIFF, distinct_rides: bool = True):
    """Index pairs ``i < j`` within ``radius`` meters and ``max_angle`` heading."""
    grid = GridIndex(frames.x, frames.y, max(radius, 1.0))
    fn = kernels.get("close_pairs")
    if grid._clamp_slack() != (0.0, 0.0):
        raise ValueError("frames must have non-negative coordinates")
    return fn(
        grid.xs, grid.ys, np.ascontiguousarray(frames.heading, dtype=np.float64),
        np.ascontiguousarray(frames.ride_id, dtype=np.int64), grid.order, grid.cell_start,
        grid.nx, grid.ny, grid.cell_size, float(radius), float(max_angle), bool(distinct_rides),
    )


def calibrate_threshold(model: EmbeddingModel, validation: FrameTable, min_pairs: int = 100) -> float:
    i, j = aligned_pairs(validation)
    if i.size < min_pairs:
        raise CalibrationError(f"only {i.size} aligned pairs within {PAIR_RADIUS} m; need >= {min_pairs}")
    z = embed_batch(model, validation.raw)
    d = np.linalg.norm(z[i] - z[j], axis=1)
    thr = threshold_from_distances(d)
    if not 0.0 < thr < 2.0:
        raise CalibrationError(f"calibrated threshold {thr} outside (0, 2)")
    return thr


# ---------------------------------------------------------------------------
# localization
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class CoarseFix:
    position: np.ndarray  # (2,)
    confidence_cov: np.ndarray  # (2, 2)
    neighbor_count: int
    neighbor_ids: np.ndarray
    weights: np.ndarray

    @property
    def confidence(self) -> float:
        """Scalar spread: RMS radius of the neighbour distribution."""
        return float(math.sqrt(max(np.trace(self.confidence_cov), 0.0)))


def neighbor_weights(d, scheme: str = "inverted") -> np.ndarray:
    """Weights from descriptor distances.

    ``inverted``: ``(1 - d_i / sum d) / (k - 1)``, decreasing in ``d_i``.
    ``literal``: ``d_i / sum d``, which favours far neighbours.
    Both fall back to uniform weights when every distance is zero.
    """
    d = np.asarray(d, dtype=float)
    k = d.size
    total = d.sum()
    if k == 1:
        return np.ones(1)
    if total <= 0.0:
        return np.full(k, 1.0 / k)
    if scheme == "inverted":
        return (1.0 - d / total) / (k - 1)
    if scheme == "literal":
        return d / total
    raise ValueError(f"unknown weighting scheme {scheme!r}")


def floor_covariance(cov, floor: float) -> np.ndarray:
    cov = 0.5 * (np.asarray(cov, dtype=float) + np.asarray(cov, dtype=float).T)
    if floor <= 0.0:
        return cov
    vals, vecs = np.linalg.eigh(cov)
    return (vecs * np.maximum(vals, floor)) @ vecs.T


def _fix_from_neighbors(pos, d, ids, scheme, cov_floor, min_neighbors):
    if d.size < min_neighbors:
        return None
    w = neighbor_weights(d, scheme)
    mean = w @ pos
    diff = pos - mean
    cov = (w[:, None] * diff).T @ diff
    return CoarseFix(mean, floor_covariance(cov, cov_floor), int(d.size), ids, w)


def _candidates(db, desc, fx, fy, fh, radius, exclude_ids, max_heading, cand=None):
    if cand is None:
        cand = db.grid.query_radius(fx, fy, radius)
    if max_heading is not None and fh is not None:
        cand = cand[heading_diff(db.heading[cand], fh) <= max_heading]
    if exclude_ids is not None and len(exclude_ids):
        cand = cand[~np.isin(db.frame_ids[cand], np.asarray(exclude_ids))]
    d = np.sqrt(np.maximum(np.sum((db.descriptors[cand] - desc) ** 2, axis=1), 0.0))
    return cand, d


def coarse_localize(
    db: KeyframeDB,
    query: np.ndarray,
    noisy_fix: NoisyFix | GeoPose,
    max_gps_error: float,
    threshold: float,
    *,
    scheme: str = "inverted",
    min_neighbors: int = MIN_NEIGHBORS,
    cov_floor: float = DEFAULT_COV_FLOOR,
    max_heading: float | None = MAX_HEADING_DIFF,
    exclude_ids=None,
) -> CoarseFix | None:
    """Weighted average of keyframes near the GPS fix whose descriptors pass ``threshold``.

    Returns ``None`` (no fix) when fewer than ``min_neighbors`` survive.
    """
    if max_gps_error <= 0:
        raise ValueError("max_gps_error must be positive")
    if threshold < 0:
        raise ValueError("threshold must be non-negative")
    query = np.asarray(query, dtype=float)
    if query.shape != (db.descriptors.shape[1],) or not np.all(np.isfinite(query)):
        raise ValueError("query descriptor has wrong shape or non-finite values")
    pose = noisy_fix.position if isinstance(noisy_fix, NoisyFix) else noisy_fix
    cand, d = _candidates(db, query, pose.x, pose.y, pose.heading, max_gps_error, exclude_ids, max_heading)
    keep = d <= threshold
    return _fix_from_neighbors(db.xy[cand[keep]], d[keep], db.frame_ids[cand[keep]], scheme, cov_floor, min_neighbors)


def coarse_localize_batch(
    db: KeyframeDB,
    queries: np.ndarray,
    fix_x,
    fix_y,
    fix_heading,
    max_gps_error: float,
    threshold: float,
    *,
    exclude_ids=None,
    scheme: str = "inverted",
    min_neighbors: int = MIN_NEIGHBORS,
    cov_floor: float = DEFAULT_COV_FLOOR,
    max_heading: float | None = MAX_HEADING_DIFF,
) -> list[CoarseFix | None]:
    """Vectorised candidate search for many queries; ``exclude_ids[q]`` is one id per query."""
    fix_x = np.asarray(fix_x, dtype=float)
    fix_y = np.asarray(fix_y, dtype=float)
    off, idx = db.grid.query_radius_batch(fix_x, fix_y, max_gps_error)
    out = []
    for q in range(fix_x.shape[0]):
        excl = None if exclude_ids is None else [exclude_ids[q]]
        fh = None if fix_heading is None else float(fix_heading[q])
        cand, d = _candidates(db, queries[q], fix_x[q], fix_y[q], fh, max_gps_error, excl, max_heading, idx[off[q] : off[q + 1]])
        keep = d <= threshold
        out.append(_fix_from_neighbors(db.xy[cand[keep]], d[keep], db.frame_ids[cand[keep]], scheme, cov_floor, min_neighbors))
    return out


def gps_nn_baseline(db: KeyframeDB, noisy_fix: NoisyFix | GeoPose, k: int = 10, exclude_ids=None) -> np.ndarray:
    """Unweighted mean of the ``k`` geographically nearest keyframes (all if fewer)."""
    if len(db) == 0:
        raise ValueError("empty keyframe database")
    pose = noisy_fix.position if isinstance(noisy_fix, NoisyFix) else noisy_fix
    n_ex = 0 if exclude_ids is None else len(exclude_ids)
    nn = db.grid.knn(pose.x, pose.y, k + n_ex)
    if n_ex:
        nn = nn[~np.isin(db.frame_ids[nn], np.asarray(exclude_ids))]
    nn = nn[:k]
    return db.xy[nn].mean(axis=0)


def write_fixes_csv(path, query_ids, fixes) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["format_version", "query_id", "x", "y", "cov_xx", "cov_xy", "cov_yy", "neighbor_count"])
        for qid, fix in zip(query_ids, fixes):
            if fix is None:
                w.writerow([1, int(qid), "", "", "", "", "", 0])
            else:
                c = fix.confidence_cov
                w.writerow([1, int(qid), *(repr(float(v)) for v in (fix.position[0], fix.position[1], c[0, 0], c[0, 1], c[1, 1])), fix.neighbor_count])
