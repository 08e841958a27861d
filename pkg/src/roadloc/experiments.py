"""Desk-scale experiments: retrieval vs the GPS-NN baseline, the fix-noise sweep and the end-to-end run."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .egomotion import (
    SimulatedEstimator,
    calibrate_confidence,
    estimate_steps,
)
from .embedding import EmbeddingModel, TrainSchedule, embed_batch, train
from .fusion import FixStream, FusedTrack, MotionStream, bootstrap_fusion
from .geoworld import (
    FrameTable,
    GeoPose,
    GpsNoiseModel,
    World,
    WorldConfig,
    generate_world,
    rng_for,
    simulate_gps,
    simulate_ride,
)
from .metrics import error_cdf, report_from_errors
from .retrieval import KeyframeDB, build_index, calibrate_threshold, coarse_localize_batch, gps_nn_baseline
from .samplers import GENERATORS, FrameDB, SamplerMix

logger = logging.getLogger(__name__)

METHODS = ("GPS-NN", "VL-GIST", "VL-GIST*")
TRIPLET_SETS = {"regular": ("regular",), "all": GENERATORS}
MODEL_FOR_METHOD = {"VL-GIST": "regular", "VL-GIST*": "all"}

# rng stream tags
_S_RIDES, _S_KEYFRAMES, _S_DISTORT, _S_SWEEP_RIDES, _S_SWEEP_NOISE = 41, 43, 47, 53, 59
_S_E2E_RIDES, _S_E2E_GPS, _S_CALIB_RIDES, _S_MOTION = 61, 67, 71, 73


@dataclass(frozen=True)
class BenchmarkConfig:
    n_rides: int = 300
    duration: float = 40.0  # s per ride
    frame_rate: float = 5.0  # Hz
    test_area: tuple = (600.0, 360.0, 1350.0, 640.0)  # x0, y0, x1, y1 (750 x 280 m)
    validation_every: int = 10  # every k-th ride outside the test area validates
    keyframe_cap: int = 4  # keyframes kept per (cell, heading sector)
    budgets: tuple = (50.0, 200.0)
    sweep_sigmas: tuple = (0.0, 3.0, 10.0, 20.0, 30.0)
    sweep_rides: int = 50
    calibration_rides: int = 20
    e2e_rides: int = 20
    coarse_every: int = 5  # frames between coarse-fix queries
    e2e_search_radius: float = 50.0
    sigma_rot_deg: float = 0.2  # simulated ego-motion noise per step
    sigma_trans: float = 0.1

    def __post_init__(self):
        if self.n_rides < 2 or self.duration <= 0 or self.frame_rate <= 0:
            raise ValueError("need >= 2 rides with positive duration and frame rate")
        x0, y0, x1, y1 = self.test_area
        if not (x1 > x0 and y1 > y0):
            raise ValueError("test_area must be (x0, y0, x1, y1) with x1 > x0, y1 > y0")


def ride_seed(seed: int, stream: int, k: int) -> int:
    return int(np.random.SeedSequence([int(seed) & 0xFFFFFFFF, stream, k]).generate_state(1)[0])


def simulate_fleet(world: World, seed: int, stream: int, n: int, duration: float, frame_rate: float,
                   first_id: int = 1000, render: bool = True) -> FrameTable:
    return FrameTable.concat([
        simulate_ride(world, ride_seed(seed, stream, k), duration, frame_rate, ride_id=first_id + k, render=render)
        for k in range(n)
    ])


def in_area(x, y, area) -> np.ndarray:
    x0, y0, x1, y1 = area
    return (x >= x0) & (x <= x1) & (y >= y0) & (y <= y1)


def thin_keyframes(world: World, frames: FrameTable, cap: int, seed: int) -> FrameTable:
    """Keep at most ``cap`` random frames per (cell, heading sector), in original order."""
    cs = world.cell_size
    key = (np.floor(frames.x / cs).astype(np.int64) * (world.grid_shape[1] + 1) + np.floor(frames.y / cs).astype(np.int64))
    key = key * world.config.n_sectors + world.sector_of(frames.heading)
    perm = rng_for(seed, _S_KEYFRAMES).permutation(len(frames))
    k_sorted = key[perm]
    order = np.argsort(k_sorted, kind="stable")
    ks = k_sorted[order]
    starts = np.flatnonzero(np.r_[True, ks[1:] != ks[:-1]])
    rank = np.arange(ks.size) - np.repeat(starts, np.diff(np.r_[starts, ks.size]))
    chosen = perm[order[rank < cap]]
    return frames.take(np.sort(chosen))


@dataclass(eq=False)
class Benchmark:
    world: World
    seed: int
    config: BenchmarkConfig
    frames: FrameTable
    train: FrameTable
    validation: FrameTable
    keyframes: FrameTable


def build_benchmark(seed: int = 1, config: BenchmarkConfig | None = None, world_config: WorldConfig | None = None) -> Benchmark:
    cfg = config or BenchmarkConfig()
    world = generate_world(world_config or WorldConfig(), seed)
    frames = simulate_fleet(world, seed, _S_RIDES, cfg.n_rides, cfg.duration, cfg.frame_rate)
    test = in_area(frames.x, frames.y, cfg.test_area)
    outside = frames.take(~test)
    val_ride = (outside.ride_id - 1000) % cfg.validation_every == 0
    keyframes = thin_keyframes(world, frames.take(test), cfg.keyframe_cap, seed)
    return Benchmark(world, seed, cfg, frames, outside.take(~val_ride), outside.take(val_ride), keyframes)


def train_model(frames: FrameTable, triplets: str, schedule: TrainSchedule, d_raw: int | None = None):
    if triplets not in TRIPLET_SETS:
        raise ValueError(f"unknown triplet set {triplets!r}; choose from {sorted(TRIPLET_SETS)}")
    db = FrameDB(frames)
    model0 = EmbeddingModel.init(d_raw or frames.raw.shape[1], schedule.seed)
    return train(model0, SamplerMix(db, TRIPLET_SETS[triplets]), schedule)


# ---------------------------------------------------------------------------
# retrieval
# ---------------------------------------------------------------------------


@dataclass(eq=False)
class RetrievalResult:
    reports: dict  # (budget, method) -> LocalizationReport
    errors: dict  # (budget, method) -> per-query errors (NaN = no fix)
    thresholds: dict  # method -> descriptor threshold
    query_ids: np.ndarray


def distort_fixes(frames: FrameTable, budget: float, seed: int, sigma_heading: float):
    """GPS positions distorted uniformly in the disc of radius ``budget``; heading jittered."""
    rng = rng_for(seed, _S_DISTORT, int(round(budget * 1000)))
    n = len(frames)
    r = budget * np.sqrt(rng.random(n))
    a = rng.random(n) * 2.0 * math.pi
    h = frames.heading + sigma_heading * rng.standard_normal(n)
    return frames.x + r * np.cos(a), frames.y + r * np.sin(a), h


def gps_nn_errors(db: KeyframeDB, frames: FrameTable, fx, fy, budget: float, k: int = 10) -> np.ndarray:
    """Baseline errors; a query without ``k`` keyframes within ``budget`` counts as no-fix."""
    off, idx = db.grid.query_radius_batch(fx, fy, budget)
    err = np.full(len(frames), np.nan)
    for q in range(len(frames)):
        cand = idx[off[q] : off[q + 1]]
        cand = cand[db.frame_ids[cand] != frames.frame_id[q]]
        if cand.size < k:
            continue
        p = gps_nn_baseline(db, GeoPose(fx[q], fy[q]), k, exclude_ids=[frames.frame_id[q]])
        err[q] = math.hypot(p[0] - frames.x[q], p[1] - frames.y[q])
    return err


def experiment_retrieval(bench: Benchmark, models: dict, thresholds: dict | None = None,
                         gps: GpsNoiseModel | None = None) -> RetrievalResult:
    """Every keyframe queries the others with a distorted GPS prior, per budget and method.

    ``models`` maps ``"regular"``/``"all"`` to trained embeddings.
    """
    gps = gps or GpsNoiseModel()
    kf = bench.keyframes
    thresholds = dict(thresholds or {})
    dbs, descs = {}, {}
    for method, key in MODEL_FOR_METHOD.items():
        model = models[key]
        if method not in thresholds:
            thresholds[method] = calibrate_threshold(model, bench.validation)
        dbs[method] = build_index(kf, model)
        descs[method] = dbs[method].descriptors
    reports, errors = {}, {}
    for budget in bench.config.budgets:
        fx, fy, fh = distort_fixes(kf, budget, bench.seed, gps.sigma_heading)
        e = gps_nn_errors(dbs["VL-GIST*"], kf, fx, fy, budget)
        errors[(budget, "GPS-NN")] = e
        for method in MODEL_FOR_METHOD:
            fixes = coarse_localize_batch(dbs[method], descs[method], fx, fy, fh, budget, thresholds[method],
                                          exclude_ids=kf.frame_id)
            errors[(budget, method)] = np.array([
                math.nan if f is None else math.hypot(f.position[0] - kf.x[q], f.position[1] - kf.y[q])
                for q, f in enumerate(fixes)
            ])
        for method in METHODS:
            reports[(budget, method)] = report_from_errors(errors[(budget, method)])
    return RetrievalResult(reports, errors, thresholds, kf.frame_id.copy())


# ---------------------------------------------------------------------------
# ego-motion helpers
# ---------------------------------------------------------------------------


def calibrated_estimator(world: World, seed: int, cfg: BenchmarkConfig) -> SimulatedEstimator:
    est = SimulatedEstimator(math.radians(cfg.sigma_rot_deg), cfg.sigma_trans, ride_seed(seed, _S_MOTION, 0))
    calib = simulate_fleet(world, seed, _S_CALIB_RIDES, cfg.calibration_rides, cfg.duration, cfg.frame_rate,
                           first_id=900_000, render=False)
    calibrate_confidence(est, calib)
    return est


def motion_stream(estimator, frames: FrameTable):
    """Per-ride :class:`MotionStream` from an estimator, plus the flat ``(steps, rotation, translation)``."""
    steps, rot, trans = estimate_steps(estimator, frames)
    rr, tr = estimator.ranges
    out = {}
    for rid in np.unique(steps.ride_id):
        m = steps.ride_id == rid
        n = int(m.sum())
        out[int(rid)] = MotionStream(frames.t[steps.row_b[m]], rot[m], trans[m], np.full(n, rr), np.full(n, tr), steps.dt[m])
    return out, (steps, rot, trans)


def _track_errors(track: FusedTrack, t, x, y) -> np.ndarray:
    """Error of the fused track at each frame time (NaN before the first output)."""
    err = np.full(t.shape[0], np.nan)
    k = np.searchsorted(track.t, t)
    hit = (k < len(track)) & (track.t[np.minimum(k, len(track) - 1)] == t) if len(track) else np.zeros(t.shape, bool)
    err[hit] = np.hypot(track.x[k[hit]] - x[hit], track.y[k[hit]] - y[hit])
    return err


# ---------------------------------------------------------------------------
# fix-noise sweep
# ---------------------------------------------------------------------------


@dataclass(eq=False)
class SweepResult:
    sigmas: np.ndarray
    fused_me: np.ndarray  # mean over rides of per-ride mean error
    raw_me: np.ndarray
    per_ride: np.ndarray  # (n_sigma, n_rides)


def experiment_noise_sweep(world: World, seed: int, cfg: BenchmarkConfig | None = None, sigmas=None) -> SweepResult:
    """Ground truth plus Gaussian noise as per-frame fixes, fused with calibrated ego-motion."""
    cfg = cfg or BenchmarkConfig()
    sigmas = np.asarray(cfg.sweep_sigmas if sigmas is None else sigmas, dtype=float)
    rides = simulate_fleet(world, seed, _S_SWEEP_RIDES, cfg.sweep_rides, cfg.duration, cfg.frame_rate, render=False)
    est = calibrated_estimator(world, seed, cfg)
    motions, _ = motion_stream(est, rides)
    groups = rides.rides()
    per_ride = np.zeros((sigmas.size, len(groups)))
    raw = np.zeros(sigmas.size)
    for si, sigma in enumerate(sigmas):
        raw_errs = []
        for ri, (rid, rows) in enumerate(sorted(groups.items())):
            rng = rng_for(seed, _S_SWEEP_NOISE, si, rid)
            n = rows.size
            fx = rides.x[rows] + sigma * rng.standard_normal(n)
            fy = rides.y[rows] + sigma * rng.standard_normal(n)
            var = max(sigma, 1e-3) ** 2
            fixes = FixStream(rides.t[rows], fx, fy, np.broadcast_to(var * np.eye(2), (n, 2, 2)).copy())
            track = bootstrap_fusion(motions[rid], fixes)
            per_ride[si, ri] = np.nanmean(_track_errors(track, rides.t[rows], rides.x[rows], rides.y[rows]))
            raw_errs.append(np.hypot(fx - rides.x[rows], fy - rides.y[rows]))
        raw[si] = float(np.mean([e.mean() for e in raw_errs]))
    return SweepResult(sigmas, per_ride.mean(axis=1), raw, per_ride)


# ---------------------------------------------------------------------------
# end to end
# ---------------------------------------------------------------------------


@dataclass(eq=False)
class EndToEndResult:
    ride_id: np.ndarray  # per frame
    t: np.ndarray
    gt: np.ndarray  # (n, 2)
    raw: np.ndarray  # (n, 2) GPS
    coarse: np.ndarray  # (n, 2), NaN where no coarse fix
    fused: np.ndarray  # (n, 2), NaN before the first output
    raw_error: np.ndarray
    fused_error: np.ndarray
    coarse_recall: float
    rides: FrameTable | None = None
    motion: tuple | None = None  # (steps, rotation, translation, ranges)
    tracks: dict | None = None  # ride_id -> FusedTrack

    def cdf(self, max_threshold: int | None = None):
        top = max_threshold
        if top is None:
            top = int(math.ceil(np.nanmax(np.r_[self.raw_error, self.fused_error]))) + 1
        th, raw = error_cdf(self.raw_error, top)
        _, fused = error_cdf(self.fused_error, top)
        return th, raw, fused


def keyframe_index(bench: Benchmark, model: EmbeddingModel) -> KeyframeDB:
    """Database for the end-to-end run: every benchmark frame, thinned per (cell, sector)."""
    return build_index(thin_keyframes(bench.world, bench.frames, bench.config.keyframe_cap, bench.seed), model)


def experiment_end_to_end(bench: Benchmark, model: EmbeddingModel, threshold: float,
                          gps: GpsNoiseModel | None = None, estimator=None, db: KeyframeDB | None = None) -> EndToEndResult:
    """Fresh rides: noisy GPS, coarse visual fixes on every few frames, ego-motion, fusion."""
    cfg = bench.config
    gps = gps or GpsNoiseModel()
    world, seed = bench.world, bench.seed
    rides = simulate_fleet(world, seed, _S_E2E_RIDES, cfg.e2e_rides, cfg.duration, cfg.frame_rate, first_id=500_000)
    track = simulate_gps(rides, gps, ride_seed(seed, _S_E2E_GPS, 0))
    est = estimator or calibrated_estimator(world, seed, cfg)
    motions, flat = motion_stream(est, rides)
    db = db or keyframe_index(bench, model)
    tracks = {}

    n = len(rides)
    coarse = np.full((n, 2), np.nan)
    fused = np.full((n, 2), np.nan)
    queried = 0
    emitted = 0
    desc = embed_batch(model, rides.raw)
    for rid, rows in sorted(rides.rides().items()):
        q = rows[:: cfg.coarse_every]
        fixes = coarse_localize_batch(db, desc[q], track.x[q], track.y[q], track.heading[q], cfg.e2e_search_radius, threshold)
        ok = [k for k, f in enumerate(fixes) if f is not None]
        queried += q.size
        emitted += len(ok)
        for k in ok:
            coarse[q[k]] = fixes[k].position
        fs = FixStream(
            rides.t[q[ok]] if ok else np.zeros(0),
            np.array([fixes[k].position[0] for k in ok]),
            np.array([fixes[k].position[1] for k in ok]),
            np.array([fixes[k].confidence_cov for k in ok]).reshape(-1, 2, 2),
        )
        acc2 = track.reported_accuracy[rows] ** 2
        gps_fixes = FixStream(rides.t[rows], track.x[rows], track.y[rows], acc2[:, None, None] * np.eye(2))
        ms = motions.get(int(rid), MotionStream.empty())
        out = bootstrap_fusion(ms, fs, init_fixes=gps_fixes)
        tracks[int(rid)] = out
        k = np.searchsorted(out.t, rides.t[rows])
        hit = (k < len(out)) & (out.t[np.minimum(k, max(len(out) - 1, 0))] == rides.t[rows]) if len(out) else np.zeros(rows.size, bool)
        fused[rows[hit]] = np.column_stack([out.x[k[hit]], out.y[k[hit]]])
    fused_err = np.hypot(fused[:, 0] - rides.x, fused[:, 1] - rides.y)
    return EndToEndResult(
        rides.ride_id.copy(), rides.t.copy(), rides.xy, np.column_stack([track.x, track.y]), coarse, fused,
        track.true_error.copy(), fused_err, emitted / max(queried, 1),
        rides=rides, motion=(*flat, est.ranges), tracks=tracks,
    )


# ---------------------------------------------------------------------------
# CSV outputs (fixed headers)
# ---------------------------------------------------------------------------


def _f(v) -> str:
    return "" if v is None or (isinstance(v, float) and math.isnan(v)) else repr(float(v))


def write_retrieval_csv(summary_path, queries_path, result: RetrievalResult) -> None:
    with open(summary_path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["budget_m", "method", "n_queries", "recall", "acc_5m", "acc_10m", "acc_15m", "mean_error_m", "threshold"])
        for (budget, method), rep in result.reports.items():
            w.writerow([_f(budget), method, rep.n_queries, _f(rep.recall), _f(rep.acc_5m), _f(rep.acc_10m),
                        _f(rep.acc_15m), _f(rep.mean_error), _f(result.thresholds.get(method))])
    with open(queries_path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["budget_m", "method", "query_id", "error_m"])
        for (budget, method), err in result.errors.items():
            for qid, e in zip(result.query_ids, err):
                w.writerow([_f(budget), method, int(qid), _f(e)])


def write_sweep_csv(path, rides_path, result: SweepResult) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["sigma_m", "n_rides", "raw_mean_error_m", "fused_mean_error_m", "improvement"])
        for s, raw, fused, per in zip(result.sigmas, result.raw_me, result.fused_me, result.per_ride):
            w.writerow([_f(s), per.size, _f(raw), _f(fused), _f(s / fused) if fused > 0 else ""])
    with open(rides_path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["sigma_m", "ride_index", "fused_mean_error_m"])
        for s, per in zip(result.sigmas, result.per_ride):
            for k, e in enumerate(per):
                w.writerow([_f(s), k, _f(e)])


def write_e2e_csv(out_dir, result: EndToEndResult) -> list:
    out_dir = Path(out_dir)
    paths = [out_dir / n for n in ("e2e_summary.csv", "e2e_cdf.csv", "e2e_traces.csv")]
    raw, fused = result.raw_error, result.fused_error
    with open(paths[0], "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["series", "n", "median_m", "p90_m", "mean_m", "frac_ge_10m"])
        for name, e in (("raw", raw), ("fused", fused)):
            e = e[~np.isnan(e)]
            w.writerow([name, e.size, _f(np.median(e)), _f(np.percentile(e, 90)), _f(e.mean()), _f(np.mean(e >= 10.0))])
        w.writerow(["coarse_recall", "", "", "", "", _f(result.coarse_recall)])
    th, pr, pf = result.cdf()
    with open(paths[1], "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["threshold_m", "series", "frac_ge"])
        for name, p in (("raw", pr), ("fused", pf)):
            for t, v in zip(th, p):
                w.writerow([_f(t), name, _f(v)])
    with open(paths[2], "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["ride_id", "t", "series", "x", "y"])
        series = (("gt", result.gt), ("raw", result.raw), ("coarse", result.coarse), ("fused", result.fused))
        for rid in np.unique(result.ride_id):
            rows = np.flatnonzero(result.ride_id == rid)
            for name, xy in series:
                for r in rows:
                    w.writerow([int(rid), _f(result.t[r]), name, _f(xy[r, 0]), _f(xy[r, 1])])
    return paths
