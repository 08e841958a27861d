"""Ackermann motion steps, pose propagation, motion estimators and their confidence."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass

import numpy as np
from scipy.optimize import brentq

from .geoworld import FrameTable, GeoPose, normalize_angle, rng_for, wrap_pi

MIN_DT = 0.033
MAX_DT = 1.0
N_BINS = 100
COVERAGE = 0.68
MIN_CALIBRATION_STEPS = 1000
CALIBRATION_FORMAT_VERSION = 1
MOTION_FORMAT_VERSION = 1
_STREAM_MOTION = 5


@dataclass(frozen=True)
class MotionStep:
    rotation: float  # rad, CCW positive, applied first
    translation: float  # m, along the new heading
    dt: float = 1.0

    def __post_init__(self):
        if not all(math.isfinite(v) for v in (self.rotation, self.translation, self.dt)):
            raise ValueError("non-finite motion step")
        if self.dt <= 0:
            raise ValueError("dt must be positive")
        if abs(self.rotation) >= math.pi:
            raise ValueError("|rotation| must be < pi per step")


@dataclass(frozen=True)
class MotionEstimate:
    step: MotionStep
    rot_error_range: float
    trans_error_range: float

    def __post_init__(self):
        if not (self.rot_error_range >= 0 and self.trans_error_range >= 0):
            raise ValueError("error ranges must be non-negative")

    @property
    def speed(self) -> float:
        return self.step.translation / self.step.dt


def propagate(pose: GeoPose, step: MotionStep) -> GeoPose:
    """Rotate about the rear-axle motion center, then translate along the new heading."""
    h = pose.heading + step.rotation
    return GeoPose(pose.x + step.translation * math.cos(h), pose.y + step.translation * math.sin(h), h)


def unpropagate(pose: GeoPose, step: MotionStep) -> GeoPose:
    """Inverse of :func:`propagate`: undo the translation, then the rotation."""
    return GeoPose(
        pose.x - step.translation * math.cos(pose.heading),
        pose.y - step.translation * math.sin(pose.heading),
        pose.heading - step.rotation,
    )


def dead_reckon(x0: float, y0: float, h0: float, rotation, translation):
    """Compose steps from a start pose; returns ``(x, y, heading)`` arrays including the start."""
    rotation = np.asarray(rotation, dtype=float)
    translation = np.asarray(translation, dtype=float)
    h = h0 + np.concatenate(([0.0], np.cumsum(rotation)))
    x = x0 + np.concatenate(([0.0], np.cumsum(translation * np.cos(h[1:]))))
    y = y0 + np.concatenate(([0.0], np.cumsum(translation * np.sin(h[1:]))))
    return x, y, normalize_angle(h)


def motion_loss(predicted, truth):
    """``0.5*|t_hat - t| + 0.5*|r_hat - r|`` for ``(translation, rotation)`` pairs (or arrays of them)."""
    p = np.asarray(predicted, dtype=float)
    q = np.asarray(truth, dtype=float)
    out = 0.5 * np.abs(p[..., 0] - q[..., 0]) + 0.5 * np.abs(p[..., 1] - q[..., 1])
    return float(out) if out.ndim == 0 else out


def steps_from_poses(x, y, heading):
    """Ground-truth ``(rotation, translation)`` between consecutive poses: heading change and chord."""
    x, y, heading = (np.asarray(v, dtype=float) for v in (x, y, heading))
    return wrap_pi(np.diff(heading)), np.hypot(np.diff(x), np.diff(y))


# ---------------------------------------------------------------------------
# consecutive frame pairs
# ---------------------------------------------------------------------------


@dataclass(eq=False)
class StepTable:
    """Consecutive same-ride frame pairs with ground-truth steps (rows index a FrameTable)."""

    row_a: np.ndarray
    row_b: np.ndarray
    ride_id: np.ndarray
    ride_pos: np.ndarray  # index of the step within its ride
    dt: np.ndarray
    rotation: np.ndarray
    translation: np.ndarray

    def __len__(self) -> int:
        return self.row_a.shape[0]


def consecutive_steps(frames: FrameTable) -> StepTable:
    parts = []
    for rid, rows in sorted(frames.rides().items()):
        if rows.size < 2:
            continue
        rot, trans = steps_from_poses(frames.x[rows], frames.y[rows], frames.heading[rows])
        parts.append((rows[:-1], rows[1:], np.full(rows.size - 1, rid), np.arange(rows.size - 1),
                      np.diff(frames.t[rows]), rot, trans))
    if not parts:
        e = np.zeros(0)
        ei = np.zeros(0, dtype=np.int64)
        return StepTable(ei, ei, ei, ei, e, e, e)
    cols = [np.concatenate(c) for c in zip(*parts)]
    return StepTable(*cols)


def _check_pair(frames: FrameTable, i: int, j: int) -> float:
    if frames.ride_id[i] != frames.ride_id[j]:
        raise ValueError("frames belong to different rides")
    dt = float(frames.t[j] - frames.t[i])
    if dt <= 0:
        raise ValueError("second frame must come after the first")
    same = frames.ride_id == frames.ride_id[i]
    between = same & (frames.t > frames.t[i]) & (frames.t < frames.t[j])
    if between.any():
        raise ValueError("frames are not consecutive within their ride")
    return dt


def _check_dt(dt) -> None:
    dt = np.asarray(dt)
    if np.any(dt < MIN_DT) or np.any(dt > MAX_DT):
        raise ValueError(f"frame spacing outside [{MIN_DT}, {MAX_DT}] s")


# ---------------------------------------------------------------------------
# estimators
# ---------------------------------------------------------------------------


class MotionEstimator:
    """Predicts ``(rotation, translation)`` for consecutive frame pairs.

    ``calibration`` (set by :func:`calibrate_confidence`) supplies the error
    ranges attached to each estimate; uncalibrated estimators report zero ranges.
    """

    calibration: "ConfidenceCalibration | None" = None

    def predict_steps(self, frames: FrameTable, steps: StepTable) -> tuple[np.ndarray, np.ndarray]:
        raise NotImplementedError

    @property
    def ranges(self) -> tuple[float, float]:
        if self.calibration is None:
            return 0.0, 0.0
        return self.calibration.rotation.error_range, self.calibration.translation.error_range


class SimulatedEstimator(MotionEstimator):
    """Ground-truth step plus zero-mean Gaussian noise.

    Noise for step ``k`` of a ride comes from a per-ride stream, so a pair's
    estimate does not depend on which other pairs are estimated with it.
    """

    def __init__(self, sigma_rot: float = math.radians(0.2), sigma_trans: float = 0.1, seed: int = 0):
        if sigma_rot < 0 or sigma_trans < 0:
            raise ValueError("noise levels must be non-negative")
        self.sigma_rot = float(sigma_rot)
        self.sigma_trans = float(sigma_trans)
        self.seed = int(seed)
        self.calibration = None

    def _noise(self, ride_id: int, n: int) -> np.ndarray:
        return rng_for(self.seed, _STREAM_MOTION, ride_id).standard_normal((n, 2))

    def predict_steps(self, frames, steps):
        rot = steps.rotation.copy()
        trans = steps.translation.copy()
        for rid in np.unique(steps.ride_id):
            m = steps.ride_id == rid
            z = self._noise(int(rid), int(steps.ride_pos[m].max()) + 1)[steps.ride_pos[m]]
            rot[m] += self.sigma_rot * z[:, 0]
            trans[m] += self.sigma_trans * z[:, 1]
        # keep rotations representable as single steps
        return np.clip(rot, -math.pi + 1e-9, math.pi - 1e-9), trans


def pair_features(raw_a: np.ndarray, raw_b: np.ndarray) -> np.ndarray:
    """Concatenated pair features with a bias column."""
    raw_a = np.atleast_2d(raw_a)
    raw_b = np.atleast_2d(raw_b)
    return np.hstack([raw_a, raw_b, np.abs(raw_b - raw_a), np.ones((raw_a.shape[0], 1))])


class LinearMotionRegressor(MotionEstimator):
    """Two linear heads on pair features, fitted by subgradient descent on :func:`motion_loss`."""

    def __init__(self, weights: np.ndarray):
        self.weights = np.asarray(weights, dtype=float)  # (n_features, 2): translation, rotation
        self.calibration = None

    @classmethod
    def fit(cls, frames: FrameTable, steps: StepTable, epochs: int = 30, lr: float = 0.01, batch: int = 256, seed: int = 0):
        X = pair_features(frames.raw[steps.row_a], frames.raw[steps.row_b])
        Y = np.column_stack([steps.translation, steps.rotation])
        scale = X.std(axis=0)
        scale[scale == 0] = 1.0
        scale[-1] = 1.0
        Xs = X / scale
        W = np.zeros((X.shape[1], 2))
        W[-1] = np.median(Y, axis=0)  # L1-optimal constant start
        rng = np.random.default_rng([int(seed), 31])
        n = X.shape[0]
        total = epochs * max(1, n // batch)
        it = 0
        for _ in range(epochs):
            perm = rng.permutation(n)
            for lo in range(0, n - batch + 1, batch):
                b = perm[lo : lo + batch]
                resid = Xs[b] @ W - Y[b]
                g = Xs[b].T @ (0.5 * np.sign(resid)) / b.size
                W -= lr * (1.0 - it / total) * g
                it += 1
        return cls(W / scale[:, None]), float(motion_loss(X @ (W / scale[:, None]), Y).mean())

    def predict_steps(self, frames, steps):
        out = pair_features(frames.raw[steps.row_a], frames.raw[steps.row_b]) @ self.weights
        return np.clip(out[:, 1], -math.pi + 1e-9, math.pi - 1e-9), out[:, 0]


def estimate_steps(estimator: MotionEstimator, frames: FrameTable, steps: StepTable | None = None):
    """Estimates for every consecutive pair: ``(steps, rotation, translation)``."""
    steps = consecutive_steps(frames) if steps is None else steps
    _check_dt(steps.dt)
    if len(steps) == 0:
        return steps, np.zeros(0), np.zeros(0)
    rot, trans = estimator.predict_steps(frames, steps)
    return steps, rot, trans


def estimate_motion(estimator: MotionEstimator, frames: FrameTable, i: int, j: int) -> MotionEstimate:
    """Estimate the step between consecutive frames ``i`` and ``j`` of one ride."""
    dt = _check_pair(frames, i, j)
    _check_dt(dt)
    rides = frames.rides()
    rows = rides[int(frames.ride_id[i])]
    k = int(np.flatnonzero(rows == i)[0])
    rot, trans = steps_from_poses(frames.x[[i, j]], frames.y[[i, j]], frames.heading[[i, j]])
    one = StepTable(
        np.array([i]), np.array([j]), np.array([frames.ride_id[i]]), np.array([k]), np.array([dt]), rot, trans
    )
    r, t = estimator.predict_steps(frames, one)
    rr, tr = estimator.ranges
    return MotionEstimate(MotionStep(float(r[0]), float(t[0]), dt), rr, tr)


# ---------------------------------------------------------------------------
# confidence
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ResidualHistogram:
    edges: np.ndarray  # (N_BINS + 1,) strictly increasing
    probs: np.ndarray  # (N_BINS,) sums to 1
    mean: float
    error_range: float  # half-width of the smallest symmetric interval about the mean with mass >= coverage

    def mass_within(self, half_width: float) -> float:
        """Histogram mass in ``[mean - h, mean + h]``, uniform within bins."""
        return float(_interval_mass(self.edges, self.probs, self.mean - half_width, self.mean + half_width))

    def to_dict(self) -> dict:
        return {"edges": self.edges.tolist(), "probs": self.probs.tolist(), "mean": self.mean, "error_range": self.error_range}

    @classmethod
    def from_dict(cls, d: dict) -> "ResidualHistogram":
        return cls(np.array(d["edges"], dtype=float), np.array(d["probs"], dtype=float), float(d["mean"]), float(d["error_range"]))


def _interval_mass(edges, probs, lo, hi):
    cdf = np.concatenate(([0.0], np.cumsum(probs)))
    return np.interp(hi, edges, cdf) - np.interp(lo, edges, cdf)


def residual_histogram(residuals, n_bins: int = N_BINS, coverage: float = COVERAGE) -> ResidualHistogram:
    r = np.asarray(residuals, dtype=float)
    lo, hi = float(r.min()), float(r.max())
    if hi - lo <= 1e-12 * max(1.0, abs(lo)):
        # degenerate spread: one populated bin of negligible width
        hi = lo + 1e-12 * max(1.0, abs(lo))
    edges = np.linspace(lo, hi, n_bins + 1)
    counts, _ = np.histogram(r, bins=edges)
    probs = counts / counts.sum()
    mean = float(r.mean())
    reach = max(mean - lo, hi - mean)

    def short(h):
        return _interval_mass(edges, probs, mean - h, mean + h) - coverage

    if short(0.0) >= 0.0:
        half = 0.0
    elif short(reach) < 0.0:  # float slack at the far edge
        half = reach
    else:
        half = brentq(short, 0.0, reach, xtol=1e-15 + 1e-12 * reach)
    return ResidualHistogram(edges, probs, mean, float(half))


@dataclass(frozen=True)
class ConfidenceCalibration:
    rotation: ResidualHistogram
    translation: ResidualHistogram
    coverage: float = COVERAGE

    def to_json(self) -> str:
        doc = {
            "format_version": CALIBRATION_FORMAT_VERSION,
            "coverage": self.coverage,
            "rotation": self.rotation.to_dict(),
            "translation": self.translation.to_dict(),
        }
        return json.dumps(doc, indent=1, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "ConfidenceCalibration":
        doc = json.loads(text)
        if doc.get("format_version") != CALIBRATION_FORMAT_VERSION:
            raise ValueError(f"unsupported calibration format version {doc.get('format_version')}")
        return cls(ResidualHistogram.from_dict(doc["rotation"]), ResidualHistogram.from_dict(doc["translation"]), float(doc["coverage"]))

    def save(self, path) -> None:
        with open(path, "w") as fh:
            fh.write(self.to_json())

    @classmethod
    def load(cls, path) -> "ConfidenceCalibration":
        with open(path) as fh:
            return cls.from_json(fh.read())


def calibrate_confidence(estimator: MotionEstimator, validation: FrameTable, min_steps: int = MIN_CALIBRATION_STEPS) -> ConfidenceCalibration:
    """Histogram the residuals of ``estimator`` on validation rides and attach the result to it."""
    steps, rot, trans = estimate_steps(estimator, validation)
    if len(steps) < min_steps:
        raise ValueError(f"only {len(steps)} validation steps; need >= {min_steps}")
    cal = ConfidenceCalibration(
        residual_histogram(wrap_pi(rot - steps.rotation)), residual_histogram(trans - steps.translation)
    )
    estimator.calibration = cal
    return cal


def coverage_of(hist: ResidualHistogram, residuals) -> float:
    r = np.asarray(residuals, dtype=float)
    return float(np.mean(np.abs(r - hist.mean) <= hist.error_range))


def write_motion_csv(path, frames: FrameTable, steps: StepTable, rotation, translation, ranges) -> None:
    rr, tr = ranges
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["format_version", "from_id", "to_id", "t", "dt", "rotation", "translation", "rot_range", "trans_range"])
        for k in range(len(steps)):
            a, b = steps.row_a[k], steps.row_b[k]
            w.writerow([
                MOTION_FORMAT_VERSION, int(frames.frame_id[a]), int(frames.frame_id[b]), repr(float(frames.t[b])),
                repr(float(steps.dt[k])), repr(float(rotation[k])), repr(float(translation[k])), repr(float(rr)), repr(float(tr)),
            ])
