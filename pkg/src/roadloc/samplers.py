"""Triplet generators over a frame database.

Three generators produce (anchor, positive, negative) frame triplets:

* ``regular``: positive within 10 m and 20 degrees of the anchor, negative
  more than 500 m away, all three from different rides;
* ``hard_negative``: same positive, negative 20-30 m away and heading aligned;
* ``video``: all from one ride, positive the nearest aligned frame within
  10 m, negative the nearest aligned frame 25-50 m away.

Generators return ``None`` when they cannot satisfy their constraints within
``RETRY_BUDGET`` attempts.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .geoworld import FrameRecord, FrameTable, heading_diff
from .grid import GridIndex

RETRY_BUDGET = 64
POSITIVE_RADIUS = 10.0
MAX_HEADING_DIFF = math.radians(20.0)
FAR_NEGATIVE = 500.0
HARD_RING = (20.0, 30.0)
VIDEO_RING = (25.0, 50.0)
GENERATORS = ("regular", "hard_negative", "video")


@dataclass(frozen=True)
class Triplet:
    anchor: FrameRecord
    positive: FrameRecord
    negative: FrameRecord
    source: str


@dataclass(frozen=True)
class IndexTriplet:
    anchor: int
    positive: int
    negative: int
    source: str


class FrameDB:
    """Frames with a 10 m grid index and per-ride time-sorted frame lists."""

    def __init__(self, frames: FrameTable, cell_size: float = 10.0):
        if len(frames) == 0:
            raise ValueError("empty frame table")
        self.frames = frames
        self.grid = GridIndex(frames.x, frames.y, cell_size)
        self.ride_rows = frames.rides()
        self.ride_ids = np.array(sorted(self.ride_rows), dtype=np.int64)
        self._positive = None
        self._hard = None

    def __len__(self) -> int:
        return len(self.frames)

    @property
    def positive_lists(self):
        """CSR ``(offsets, idx)`` of aligned other-ride frames within 10 m of each frame."""
        if self._positive is None:
            self._build_neighbor_lists()
        return self._positive

    @property
    def hard_lists(self):
        """CSR ``(offsets, idx)`` of aligned other-ride frames 20-30 m from each frame."""
        if self._hard is None:
            self._build_neighbor_lists()
        return self._hard

    def _build_neighbor_lists(self):
        f = self.frames
        n = len(f)
        off, idx = self.grid.query_radius_batch(f.x, f.y, HARD_RING[1])
        rows = np.repeat(np.arange(n), np.diff(off))
        d = np.hypot(f.x[idx] - f.x[rows], f.y[idx] - f.y[rows])
        keep = (f.ride_id[idx] != f.ride_id[rows]) & (heading_diff(f.heading[idx], f.heading[rows]) <= MAX_HEADING_DIFF)
        self._positive = _csr(rows, idx, keep & (d <= POSITIVE_RADIUS), n)
        self._hard = _csr(rows, idx, keep & (d >= HARD_RING[0]), n)

    def record(self, i: int) -> FrameRecord:
        return self.frames[i]

    def within(self, i: int, radius: float) -> np.ndarray:
        return self.grid.query_radius(self.frames.x[i], self.frames.y[i], radius)

    def distances(self, i: int, idx: np.ndarray) -> np.ndarray:
        f = self.frames
        return np.hypot(f.x[idx] - f.x[i], f.y[idx] - f.y[i])

    def to_triplet(self, t: IndexTriplet) -> Triplet:
        return Triplet(self.record(t.anchor), self.record(t.positive), self.record(t.negative), t.source)


def _csr(rows, idx, keep, n):
    counts = np.bincount(rows[keep], minlength=n)
    offsets = np.concatenate(([0], np.cumsum(counts))).astype(np.int64)
    return offsets, idx[keep].astype(np.int64)


def positive_candidates(db: FrameDB, a: int, aligned: bool = True) -> np.ndarray:
    """Frames of other rides within 10 m of ``a`` (and within 20 degrees if ``aligned``)."""
    f = db.frames
    idx = db.within(a, POSITIVE_RADIUS)
    idx = idx[f.ride_id[idx] != f.ride_id[a]]
    if aligned:
        idx = idx[heading_diff(f.heading[idx], f.heading[a]) <= MAX_HEADING_DIFF]
    return idx


def _anchor_positive(db: FrameDB, rng: np.random.Generator):
    a = int(rng.integers(len(db)))
    off, idx = db.positive_lists
    lo, hi = off[a], off[a + 1]
    if hi == lo:
        return None
    return a, int(idx[lo + rng.integers(hi - lo)])


def regular_indices(db: FrameDB, rng: np.random.Generator) -> IndexTriplet | None:
    f = db.frames
    for _ in range(RETRY_BUDGET):
        ap = _anchor_positive(db, rng)
        if ap is None:
            continue
        a, p = ap
        cand = rng.integers(len(db), size=16)
        ok = (db.distances(a, cand) > FAR_NEGATIVE) & (f.ride_id[cand] != f.ride_id[a]) & (f.ride_id[cand] != f.ride_id[p])
        if ok.any():
            return IndexTriplet(a, p, int(cand[np.argmax(ok)]), "regular")
    return None


def hard_negative_indices(db: FrameDB, rng: np.random.Generator) -> IndexTriplet | None:
    f = db.frames
    for _ in range(RETRY_BUDGET):
        ap = _anchor_positive(db, rng)
        if ap is None:
            continue
        a, p = ap
        off, idx = db.hard_lists
        ring = idx[off[a] : off[a + 1]]
        ring = ring[f.ride_id[ring] != f.ride_id[p]]
        if ring.size:
            return IndexTriplet(a, p, int(ring[rng.integers(ring.size)]), "hard_negative")
    return None


def video_indices(db: FrameDB, rng: np.random.Generator) -> IndexTriplet | None:
    f = db.frames
    lo, hi = VIDEO_RING
    for _ in range(RETRY_BUDGET):
        rows = db.ride_rows[int(db.ride_ids[rng.integers(db.ride_ids.size)])]
        k = int(rng.integers(rows.size))
        a = int(rows[k])
        others = np.delete(rows, k)
        if others.size == 0:
            continue
        d = db.distances(a, others)
        aligned = heading_diff(f.heading[others], f.heading[a]) <= MAX_HEADING_DIFF
        pos = aligned & (d < POSITIVE_RADIUS)
        neg = aligned & (d >= lo) & (d <= hi)
        if not (pos.any() and neg.any()):
            continue
        # argmin over masked distances; ties resolve to the earlier frame
        p = int(others[np.argmin(np.where(pos, d, np.inf))])
        n = int(others[np.argmin(np.where(neg, d, np.inf))])
        return IndexTriplet(a, p, n, "video")
    return None


_INDEX_SAMPLERS: dict[str, Callable] = {
    "regular": regular_indices,
    "hard_negative": hard_negative_indices,
    "video": video_indices,
}


def sample_regular(db: FrameDB, rng: np.random.Generator) -> Triplet | None:
    t = regular_indices(db, rng)
    return None if t is None else db.to_triplet(t)


def sample_hard_negative(db: FrameDB, rng: np.random.Generator) -> Triplet | None:
    t = hard_negative_indices(db, rng)
    return None if t is None else db.to_triplet(t)


def sample_video(db: FrameDB, rng: np.random.Generator) -> Triplet | None:
    t = video_indices(db, rng)
    return None if t is None else db.to_triplet(t)


class SamplerMix:
    """Draws a generator (uniform by default) per triplet, redrawing on no-sample."""

    def __init__(self, db: FrameDB, generators=GENERATORS, weights=None, max_redraws: int = 16):
        unknown = set(generators) - set(_INDEX_SAMPLERS)
        if unknown:
            raise ValueError(f"unknown generators {sorted(unknown)}")
        if not generators:
            raise ValueError("at least one generator required")
        self.db = db
        self.generators = tuple(generators)
        w = np.ones(len(self.generators)) if weights is None else np.asarray(weights, dtype=float)
        if w.shape != (len(self.generators),) or np.any(w < 0) or w.sum() <= 0:
            raise ValueError("weights must be non-negative, one per generator")
        self.weights = w / w.sum()
        self.max_redraws = max_redraws

    def sample_indices(self, rng: np.random.Generator) -> IndexTriplet | None:
        for _ in range(self.max_redraws):
            g = self.generators[int(rng.choice(len(self.generators), p=self.weights))]
            t = _INDEX_SAMPLERS[g](self.db, rng)
            if t is not None:
                return t
        return None

    def sample(self, rng: np.random.Generator) -> Triplet | None:
        t = self.sample_indices(rng)
        return None if t is None else self.db.to_triplet(t)


def sample_mixed(db: FrameDB, rng: np.random.Generator, generators=GENERATORS) -> Triplet | None:
    return SamplerMix(db, generators).sample(rng)


def check_triplet(db: FrameDB, t: IndexTriplet) -> list[str]:
    """Constraint violations of ``t`` under its generator tag (empty when valid)."""
    f = db.frames
    a, p, n = t.anchor, t.positive, t.negative
    dp = float(db.distances(a, np.array([p]))[0])
    dn = float(db.distances(a, np.array([n]))[0])
    hp = heading_diff(f.heading[a], f.heading[p])
    hn = heading_diff(f.heading[a], f.heading[n])
    ra, rp, rn = (int(f.ride_id[i]) for i in (a, p, n))
    bad = []
    if t.source == "video":
        if not (ra == rp == rn):
            bad.append("rides differ")
        if not dp < POSITIVE_RADIUS:
            bad.append(f"positive at {dp:.2f} m")
        if not VIDEO_RING[0] <= dn <= VIDEO_RING[1]:
            bad.append(f"negative at {dn:.2f} m")
        if hn > MAX_HEADING_DIFF:
            bad.append("negative heading")
    else:
        if len({ra, rp, rn}) != 3:
            bad.append("rides not distinct")
        if not dp <= POSITIVE_RADIUS:
            bad.append(f"positive at {dp:.2f} m")
        if t.source == "regular":
            if not dn > FAR_NEGATIVE:
                bad.append(f"negative at {dn:.2f} m")
        elif t.source == "hard_negative":
            if not HARD_RING[0] <= dn <= HARD_RING[1]:
                bad.append(f"negative at {dn:.2f} m")
            if hn > MAX_HEADING_DIFF:
                bad.append("negative heading")
        else:
            bad.append(f"unknown source {t.source!r}")
    if hp > MAX_HEADING_DIFF:
        bad.append("positive heading")
    return bad


def write_triplets_csv(path, db: FrameDB, triplets) -> None:
    f = db.frames
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["format_version", "anchor_id", "positive_id", "negative_id", "source"])
        for t in triplets:
            w.writerow([1, int(f.frame_id[t.anchor]), int(f.frame_id[t.positive]), int(f.frame_id[t.negative]), t.source])
