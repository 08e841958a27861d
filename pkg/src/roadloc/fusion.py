"""Extended Kalman filter over ``(x, y, heading)``.

Ego-motion steps drive the predict step as control inputs; coarse visual
fixes update the position. Equations, with ``h' = h + r``:

    predict   x' = x + t cos h',  y' = y + t sin h'
              P' = F P F^T + B diag(s_t^2, s_t^2, s_r^2) B^T
              F  = [[1, 0, -t sin h'], [0, 1, t cos h'], [0, 0, 1]]
              B  = [[cos h', -sin h', -t sin h'], [sin h', cos h', t cos h'], [0, 0, 1]]
    update    H = [I_2 0],  S = H P H^T + R,  K = P H^T S^-1
              P+ = (I - K H) P (I - K H)^T + K R K^T   (Joseph form)

``s_t`` is applied both along and across the direction of travel.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .egomotion import MotionEstimate, MotionStep
from .geoworld import normalize_angle

logger = logging.getLogger(__name__)

PSD_TOLERANCE = 1e-9
R_INFLATION = 10.0
SINGULAR_RCOND = 1e-12
INIT_WINDOW = 2.0  # s
INIT_HEADING_SIGMA = math.radians(20.0)
HEADING_VAR_UNKNOWN = math.pi**2 / 3.0  # uniform heading on the circle
FUSED_FORMAT_VERSION = 1
NIS_GATE = 13.82  # chi-square, 2 dof, 0.999
RESET_AFTER = 5
_H = np.array([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]])


def _psd(P: np.ndarray) -> np.ndarray:
    """Symmetrise and clamp tiny negative eigenvalues."""
    P = 0.5 * (P + P.T)
    vals, vecs = np.linalg.eigh(P)
    if vals[0] < -PSD_TOLERANCE * max(1.0, abs(vals[-1])):
        raise FloatingPointError(f"covariance lost positive semi-definiteness (min eigenvalue {vals[0]:.3g})")
    if vals[0] < 0.0:
        P = (vecs * np.maximum(vals, 0.0)) @ vecs.T
        P = 0.5 * (P + P.T)
    return P


@dataclass(frozen=True, eq=False)
class FilterState:
    mean: np.ndarray  # (x, y, heading)
    cov: np.ndarray  # (3, 3)

    def __post_init__(self):
        m = np.array(self.mean, dtype=float).reshape(3)
        if not np.all(np.isfinite(m)):
            raise ValueError("non-finite filter mean")
        m[2] = normalize_angle(m[2])
        P = np.array(self.cov, dtype=float).reshape(3, 3)
        object.__setattr__(self, "mean", m)
        object.__setattr__(self, "cov", _psd(P))

    @property
    def position(self) -> np.ndarray:
        return self.mean[:2].copy()

    @property
    def position_cov(self) -> np.ndarray:
        return self.cov[:2, :2].copy()


def predict(state: FilterState, motion: MotionEstimate) -> FilterState:
    x, y, h = state.mean
    r, t = motion.step.rotation, motion.step.translation
    h1 = h + r
    c, s = math.cos(h1), math.sin(h1)
    F = np.array([[1.0, 0.0, -t * s], [0.0, 1.0, t * c], [0.0, 0.0, 1.0]])
    B = np.array([[c, -s, -t * s], [s, c, t * c], [0.0, 0.0, 1.0]])
    st, sr = motion.trans_error_range, motion.rot_error_range
    Q = (B * np.array([st * st, st * st, sr * sr])) @ B.T
    return FilterState(np.array([x + t * c, y + t * s, h1]), F @ state.cov @ F.T + Q)


def _try_update(state: FilterState, z: np.ndarray, R: np.ndarray):
    P = state.cov
    S = _H @ P @ _H.T + R
    S = 0.5 * (S + S.T)
    eig = np.linalg.eigvalsh(S)
    if not (eig[0] > SINGULAR_RCOND * max(eig[-1], 0.0) and eig[0] > 0.0):
        return None
    K = np.linalg.solve(S, _H @ P).T  # P H^T S^-1 with symmetric S
    innov = z - state.mean[:2]
    mean = state.mean + K @ innov
    IKH = np.eye(3) - K @ _H
    return FilterState(mean, IKH @ P @ IKH.T + K @ R @ K.T)


def update_status(state: FilterState, position, cov) -> tuple[FilterState, str]:
    """EKF position update; returns ``(state, status)`` with status ``updated``, ``inflated`` or ``skipped``.

    A numerically singular innovation covariance is retried once with ``R`` inflated tenfold;
    if that fails too the fix is skipped and the prior returned.
    """
    z = np.asarray(position, dtype=float).reshape(2)
    R = 0.5 * (np.asarray(cov, dtype=float) + np.asarray(cov, dtype=float).T)
    if np.linalg.eigvalsh(R)[0] < -PSD_TOLERANCE:
        raise ValueError("fix covariance is not positive semi-definite")
    out = _try_update(state, z, R)
    if out is not None:
        return out, "updated"
    out = _try_update(state, z, R * R_INFLATION)
    if out is not None:
        logger.warning("singular innovation covariance; fix applied with R inflated x%g", R_INFLATION)
        return out, "inflated"
    logger.warning("singular innovation covariance; fix skipped")
    return state, "skipped"


def update(state: FilterState, fix) -> FilterState:
    """Fuse a :class:`~roadloc.retrieval.CoarseFix` (or anything with ``position`` and ``confidence_cov``)."""
    return update_status(state, fix.position, fix.confidence_cov)[0]


# ---------------------------------------------------------------------------
# streams
# ---------------------------------------------------------------------------


@dataclass(eq=False)
class MotionStream:
    """Time-ordered motion steps; ``t[k]`` is the time the step ends."""

    t: np.ndarray
    rotation: np.ndarray
    translation: np.ndarray
    rot_range: np.ndarray
    trans_range: np.ndarray
    dt: np.ndarray | None = None

    def __len__(self) -> int:
        return self.t.shape[0]

    @classmethod
    def empty(cls) -> "MotionStream":
        e = np.zeros(0)
        return cls(e, e, e, e, e)

    def estimate(self, k: int) -> MotionEstimate:
        dt = 1.0 if self.dt is None else float(self.dt[k])
        return MotionEstimate(MotionStep(float(self.rotation[k]), float(self.translation[k]), dt),
                              float(self.rot_range[k]), float(self.trans_range[k]))


@dataclass(eq=False)
class FixStream:
    t: np.ndarray
    x: np.ndarray
    y: np.ndarray
    cov: np.ndarray  # (n, 2, 2)

    def __len__(self) -> int:
        return self.t.shape[0]

    @classmethod
    def empty(cls) -> "FixStream":
        e = np.zeros(0)
        return cls(e, e, e, np.zeros((0, 2, 2)))


@dataclass(frozen=True, eq=False)
class FusedLocation:
    t: float
    position: np.ndarray
    position_cov: np.ndarray
    source: str  # "predicted" | "updated"


@dataclass(eq=False)
class FusedTrack:
    t: np.ndarray
    x: np.ndarray
    y: np.ndarray
    heading: np.ndarray
    cov: np.ndarray  # (n, 3, 3)
    source: np.ndarray  # str
    skipped: int = 0

    def __len__(self) -> int:
        return self.t.shape[0]

    def __getitem__(self, i) -> FusedLocation:
        return FusedLocation(float(self.t[i]), np.array([self.x[i], self.y[i]]), self.cov[i, :2, :2].copy(), str(self.source[i]))

    def locations(self) -> list[FusedLocation]:
        return [self[i] for i in range(len(self))]


def _check_sorted(name, t):
    t = np.asarray(t, dtype=float)
    if t.size and (not np.all(np.isfinite(t)) or np.any(np.diff(t) < 0)):
        raise ValueError(f"{name} stream is not time-ordered")


def run_fusion(motions: MotionStream, fixes: FixStream, initial: FilterState, t0: float | None = None) -> FusedTrack:
    """Interleave predicts and updates by timestamp.

    At equal timestamps the motion step is applied before the fix. One
    location is emitted per distinct event time, tagged ``updated`` if a fix
    was applied at that time. Events before ``t0`` are rejected.
    """
    _check_sorted("motion", motions.t)
    _check_sorted("fix", fixes.t)
    first = [a[0] for a in (motions.t, fixes.t) if len(a)]
    if t0 is not None and first and min(first) < t0:
        raise ValueError("events precede the initial state")
    state = initial
    out_t, out_m, out_P, out_src = [], [], [], []
    skipped = 0
    i = j = 0
    nm, nf = len(motions), len(fixes)
    while i < nm or j < nf:
        t = min(motions.t[i] if i < nm else math.inf, fixes.t[j] if j < nf else math.inf)
        src = "predicted"
        while i < nm and motions.t[i] == t:
            state = predict(state, motions.estimate(i))
            i += 1
        while j < nf and fixes.t[j] == t:
            state, status = update_status(state, (fixes.x[j], fixes.y[j]), fixes.cov[j])
            if status == "skipped":
                skipped += 1
            else:
                src = "updated"
            j += 1
        out_t.append(t)
        out_m.append(state.mean)
        out_P.append(state.cov)
        out_src.append(src)
    if not out_t:
        return FusedTrack(np.zeros(0), np.zeros(0), np.zeros(0), np.zeros(0), np.zeros((0, 3, 3)), np.zeros(0, dtype="<U9"))
    m = np.array(out_m)
    return FusedTrack(np.array(out_t), m[:, 0], m[:, 1], m[:, 2], np.array(out_P), np.array(out_src), skipped)


def initial_state(
    fixes: FixStream,
    gps_t,
    gps_x,
    gps_y,
    gps_accuracy,
    gps_heading=None,
    window: float = INIT_WINDOW,
) -> tuple[FilterState, float]:
    """Starting state and its time.

    Position comes from the first coarse fix if one arrives within ``window``
    seconds of the first GPS sample, otherwise from that GPS sample with
    covariance ``accuracy^2 I``. Heading comes from the first two GPS points
    (the GPS heading field if they coincide), with variance ``(20 deg)^2``,
    widened to ``(acc_0^2 + acc_1^2) / d^2`` when the two points are only
    ``d`` apart and capped at the variance of a uniform heading.
    """
    gps_t = np.asarray(gps_t, dtype=float)
    if gps_t.size == 0:
        raise ValueError("need at least one GPS sample")
    start = float(gps_t[0])
    acc = np.asarray(gps_accuracy, dtype=float)
    heading, h_var = 0.0, HEADING_VAR_UNKNOWN
    d = math.hypot(gps_x[1] - gps_x[0], gps_y[1] - gps_y[0]) if gps_t.size >= 2 else 0.0
    if d > 0.0:
        heading = math.atan2(gps_y[1] - gps_y[0], gps_x[1] - gps_x[0])
        # a baseline shorter than the fix noise says little about heading
        h_var = min(max(INIT_HEADING_SIGMA**2, (acc[0] ** 2 + acc[1] ** 2) / (d * d)), HEADING_VAR_UNKNOWN)
    elif gps_heading is not None:
        heading, h_var = float(gps_heading[0]), INIT_HEADING_SIGMA**2
    P = np.zeros((3, 3))
    P[2, 2] = h_var
    if len(fixes) and fixes.t[0] - start <= window:
        P[:2, :2] = fixes.cov[0]
        return FilterState(np.array([fixes.x[0], fixes.y[0], heading]), P), float(fixes.t[0])
    P[:2, :2] = acc[0] ** 2 * np.eye(2)
    return FilterState(np.array([gps_x[0], gps_y[0], heading]), P), start


def _align_heading(q, z, w):
    """Weighted 2-D rotation + offset aligning dead-reckoned points ``q`` onto fixes ``z``.

    Returns ``(theta, q_mean, z_mean, theta_var)``; ``theta_var`` is the
    linearised variance of the rotation (``inf`` without spread in ``q``),
    scaled up by the reduced chi-square of the residuals when they exceed
    the stated fix covariance.
    """
    wn = w / w.sum()
    qm = wn @ q
    zm = wn @ z
    qc = q - qm
    zc = z - zm
    cross = np.sum(w * (qc[:, 0] * zc[:, 1] - qc[:, 1] * zc[:, 0]))
    dot = np.sum(w * (qc[:, 0] * zc[:, 0] + qc[:, 1] * zc[:, 1]))
    info = np.sum(w * np.sum(qc * qc, axis=1))
    if info <= 0:
        return 0.0, qm, zm, math.inf
    theta = math.atan2(cross, dot)
    dof = 2 * len(w) - 3
    if dof > 0:
        c, s = math.cos(theta), math.sin(theta)
        rx = zc[:, 0] - (c * qc[:, 0] - s * qc[:, 1])
        ry = zc[:, 1] - (s * qc[:, 0] + c * qc[:, 1])
        scale = max(1.0, float(np.sum(w * (rx * rx + ry * ry))) / dof)
    else:
        scale = 1.0
    return theta, qm, zm, scale / info


def _nis(state: FilterState, z, R) -> float:
    """Normalised innovation squared of a position fix (``inf`` for a singular innovation covariance)."""
    S = _H @ state.cov @ _H.T + R
    nu = np.asarray(z, dtype=float) - state.mean[:2]
    try:
        return float(nu @ np.linalg.solve(0.5 * (S + S.T), nu))
    except np.linalg.LinAlgError:
        return math.inf


class _Aligner:
    """Dead reckoning in a private frame, rigidly aligned to the fixes collected so far."""

    def __init__(self):
        self.q = np.zeros(3)
        self.qs, self.zs, self.ws = [], [], []

    def move(self, rotation: float, translation: float) -> None:
        q = self.q
        q[2] += rotation
        q[0] += translation * math.cos(q[2])
        q[1] += translation * math.sin(q[2])

    def add(self, x: float, y: float, cov) -> None:
        self.zs.append((x, y))
        self.qs.append(self.q[:2].copy())
        self.ws.append(1.0 / max(0.5 * float(np.trace(cov)), 1e-12))

    def __len__(self) -> int:
        return len(self.zs)

    def estimate(self) -> tuple[FilterState, float]:
        """Aligned pose with covariance, and the heading variance usable for the handoff.

        That variance is ``inf`` while the dead-reckoned baseline is shorter
        than the fix noise.
        """
        w = np.array(self.ws)
        qs = np.array(self.qs)
        theta, qm, zm, th_var = _align_heading(qs, np.array(self.zs), w)
        c, s_ = math.cos(theta), math.sin(theta)
        lever = self.q[:2] - qm
        pos = zm + np.array([c * lever[0] - s_ * lever[1], s_ * lever[0] + c * lever[1]])
        dpos = np.array([-s_ * lever[0] - c * lever[1], c * lever[0] - s_ * lever[1]])
        P = np.zeros((3, 3))
        # fix errors may share a slowly varying bias, so averaging does not shrink the offset
        P[:2, :2] = np.eye(2) / w.mean()
        if math.isfinite(th_var):
            P[:2, :2] += th_var * np.outer(dpos, dpos)
            P[:2, 2] = P[2, :2] = th_var * dpos
            P[2, 2] = th_var
        else:
            P[2, 2] = HEADING_VAR_UNKNOWN
        # a baseline shorter than the fix noise cannot fix the heading, however many fixes share it
        spread2 = float(np.sum(w * np.sum((qs - qm) ** 2, axis=1)) / w.sum())
        return FilterState(np.array([pos[0], pos[1], theta + self.q[2]]), P), th_var if spread2 * float(w.mean()) >= 1.0 else math.inf


def bootstrap_fusion(
    motions: MotionStream,
    fixes: FixStream,
    init_fixes: FixStream | None = None,
    max_heading_sigma: float = INIT_HEADING_SIGMA,
    min_fixes: int = 2,
    gate: float = NIS_GATE,
    reset_after: int = RESET_AFTER,
) -> FusedTrack:
    """Fusion from an unknown start pose, with re-initialisation on divergence.

    Until the heading is known to ``max_heading_sigma``, the motion stream is
    dead-reckoned in its own frame and rigidly aligned (rotation plus offset,
    weighted least squares) to every fix seen so far; the aligned estimate is
    emitted. Once the alignment is confident, the EKF takes over from that pose
    with the alignment's covariance. When ``init_fixes`` (e.g. raw GPS) are
    given, they alone drive the first alignment and ``fixes`` only the filter.

    While tracking, ``reset_after`` consecutive fixes whose normalised
    innovation squared exceeds ``gate`` mark the filter as diverged (a heading
    error too large for the linearised update to undo); alignment then restarts
    from the latest of those fixes using every fix that follows. All fixes are
    still applied by the standard update. Nothing is emitted before the first
    alignment fix.
    """
    _check_sorted("motion", motions.t)
    _check_sorted("fix", fixes.t)
    boot = fixes if init_fixes is None else init_fixes
    times = np.unique(np.concatenate([motions.t, fixes.t, boot.t]))
    aligner: _Aligner | None = _Aligner()
    realigning = False
    state = None
    misses = skipped = 0
    out_t, out_m, out_P, out_src = [], [], [], []
    i = j = k = 0
    for t in times:
        src = "predicted"
        while i < len(motions) and motions.t[i] == t:
            if aligner is not None:
                aligner.move(motions.rotation[i], motions.translation[i])
            else:
                state = predict(state, motions.estimate(i))
            i += 1
        if aligner is not None:
            if boot is not fixes and not realigning:
                while k < len(boot) and boot.t[k] == t:
                    aligner.add(boot.x[k], boot.y[k], boot.cov[k])
                    src = "updated"
                    k += 1
            while j < len(fixes) and fixes.t[j] == t:
                if boot is fixes or realigning:
                    aligner.add(fixes.x[j], fixes.y[j], fixes.cov[j])
                    src = "updated"
                j += 1
            if not len(aligner):
                continue
            state, h_var = aligner.estimate()
            if len(aligner) >= min_fixes and h_var <= max_heading_sigma**2:
                aligner = None
                misses = 0
        else:
            while j < len(fixes) and fixes.t[j] == t:
                z, R = (fixes.x[j], fixes.y[j]), fixes.cov[j]
                misses = misses + 1 if _nis(state, z, R) > gate else 0
                state, status = update_status(state, z, R)
                if status == "skipped":
                    skipped += 1
                else:
                    src = "updated"
                if misses >= reset_after:
                    logger.info("fusion diverged at t=%.3f; re-aligning", t)
                    aligner, realigning, misses = _Aligner(), True, 0
                    aligner.add(fixes.x[j], fixes.y[j], fixes.cov[j])
                j += 1
        out_t.append(t)
        out_m.append(state.mean)
        out_P.append(state.cov)
        out_src.append(src)
    if not out_t:
        return FusedTrack(np.zeros(0), np.zeros(0), np.zeros(0), np.zeros(0), np.zeros((0, 3, 3)), np.zeros(0, dtype="<U9"))
    m = np.array(out_m)
    return FusedTrack(np.array(out_t), m[:, 0], m[:, 1], m[:, 2], np.array(out_P), np.array(out_src), skipped)


def write_fused_csv(path, track: FusedTrack, ride_id: int | None = None) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        write_fused_rows(w, track, ride_id, header=True)


def write_fused_rows(writer, track: FusedTrack, ride_id: int | None = None, header: bool = False) -> None:
    if header:
        writer.writerow(["format_version", "ride_id", "t", "x", "y", "cov_xx", "cov_xy", "cov_yy", "source"])
    rid = "" if ride_id is None else int(ride_id)
    for k in range(len(track)):
        c = track.cov[k]
        writer.writerow([
            FUSED_FORMAT_VERSION, rid, repr(float(track.t[k])), repr(float(track.x[k])), repr(float(track.y[k])),
            repr(float(c[0, 0])), repr(float(c[0, 1])), repr(float(c[1, 1])), track.source[k],
        ])


__all__ = [
    "bootstrap_fusion",
    "FilterState",
    "FixStream",
    "FusedLocation",
    "FusedTrack",
    "MotionStream",
    "initial_state",
    "predict",
    "run_fusion",
    "update",
    "update_status",
    "write_fused_csv",
]
