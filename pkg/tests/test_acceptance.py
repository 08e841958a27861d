"""Acceptance criteria 1-10, each reported as one PASS/FAIL line in the terminal summary."""

import math
import time

import numpy as np
import pytest

from conftest import STANDARD_SEED, record_criterion
from oracles import (
    finite_difference_grad,
    gradient_relative_error,
    random_gradient_case,
    triplet_violations,
)
from roadloc.egomotion import (
    MotionEstimate,
    MotionStep,
    coverage_of,
    dead_reckon,
    estimate_steps,
    motion_loss,
    propagate,
    steps_from_poses,
)
from roadloc.embedding import EmbeddingModel, batch_loss_and_grad, embed_batch, softmax_cross_entropy, softplus
from roadloc.experiments import BenchmarkConfig, calibrated_estimator, experiment_noise_sweep, simulate_fleet
from roadloc.fusion import FilterState, predict, update_status
from roadloc.geoworld import GeoPose, wrap_pi
from roadloc.grid import GridIndex
from roadloc.samplers import FrameDB, SamplerMix


def _check(number, ok, detail):
    record_criterion(number, ok, detail)
    assert ok, detail


def test_criterion_01_gradient_correctness():
    t0 = time.perf_counter()
    worst = max(
        gradient_relative_error(batch_loss_and_grad(m, a, p, n)[2], finite_difference_grad(m, a, p, n))
        for m, a, p, n in (random_gradient_case(seed) for seed in range(50))
    )
    dt = time.perf_counter() - t0
    _check(1, worst <= 1e-4 and dt < 30, f"max relative error {worst:.2e} over 50 cases (<= 1e-4), {dt:.1f} s (< 30 s)")


def test_criterion_02_embedding_invariants():
    rng = np.random.default_rng(2)
    model = EmbeddingModel.init(seed=2)
    X = rng.standard_normal((10_000, 128)) * rng.uniform(0.01, 100.0, (10_000, 1))
    norm_err = float(np.max(np.abs(np.linalg.norm(embed_batch(model, X), axis=1) - 1.0)))
    dp, dn = rng.uniform(0.0, 2.0, (2, 100_000))
    ident = float(np.max(np.abs(softplus(dp - dn) - softmax_cross_entropy(dp, dn))))
    _check(2, norm_err <= 1e-6 and ident <= 1e-12,
           f"max |norm - 1| {norm_err:.1e} over 1e4 inputs (<= 1e-6); loss identity gap {ident:.1e} (<= 1e-12)")


def test_criterion_03_sampler_constraints_and_grid(standard):
    db = FrameDB(standard["bench"].train)
    mix = SamplerMix(db)
    rng = np.random.default_rng(3)
    bad, tags = 0, {}
    for _ in range(10_000):
        t = mix.sample_indices(rng)
        tags[t.source] = tags.get(t.source, 0) + 1
        bad += bool(triplet_violations(db.frames, t.anchor, t.positive, t.negative, t.source))
    # grid queries against brute force on 5k-frame databases
    grid_bad = 0
    for seed in range(3):
        g = np.random.default_rng(seed)
        f = db.frames
        pick = np.sort(g.choice(len(f), 5000, replace=False))
        xs, ys = f.x[pick], f.y[pick]
        grid = GridIndex(xs, ys, 10.0)
        qx, qy = g.uniform(-20, xs.max() + 20, 300), g.uniform(-20, ys.max() + 20, 300)
        for r in (5.0, 10.0, 30.0, 50.0, 200.0):
            off, idx = grid.query_radius_batch(qx, qy, r)
            for q in range(qx.size):
                want = np.flatnonzero(np.hypot(xs - qx[q], ys - qy[q]) <= r)
                grid_bad += not np.array_equal(np.sort(idx[off[q]:off[q + 1]]), want)
    _check(3, bad == 0 and grid_bad == 0 and sum(tags.values()) == 10_000,
           f"{bad} violating triplets of 10000 {dict(sorted(tags.items()))}; {grid_bad} grid/brute-force mismatches")


def test_criterion_04_retrieval_ordering(retrieval):
    result, seconds = retrieval
    r = result.reports
    me50 = {m: r[(50.0, m)].mean_error for m in ("GPS-NN", "VL-GIST*")}
    acc50 = {m: r[(50.0, m)].acc_10m for m in ("GPS-NN", "VL-GIST*")}
    me200 = {m: r[(200.0, m)].mean_error for m in ("GPS-NN", "VL-GIST*")}
    ok = (me50["VL-GIST*"] <= 0.7 * me50["GPS-NN"] and acc50["VL-GIST*"] >= acc50["GPS-NN"] + 0.15
          and me200["VL-GIST*"] <= 0.4 * me200["GPS-NN"] and seconds < 1800)
    _check(4, ok,
           f"50 m: ME {me50['VL-GIST*']:.2f} vs GPS-NN {me50['GPS-NN']:.2f} (ratio {me50['VL-GIST*'] / me50['GPS-NN']:.2f} <= 0.7), "
           f"acc10 {acc50['VL-GIST*']:.3f} vs {acc50['GPS-NN']:.3f} (+0.15); "
           f"200 m: ME {me200['VL-GIST*']:.2f} vs {me200['GPS-NN']:.2f} (ratio {me200['VL-GIST*'] / me200['GPS-NN']:.2f} <= 0.4); "
           f"train+eval {seconds:.0f} s (< 1800 s)")


def test_criterion_05_kinematics(small_world):
    from roadloc.geoworld import simulate_rides

    R = 50.0
    p = GeoPose(0.0, 0.0, 0.0)
    for _ in range(360):
        p = propagate(p, MotionStep(math.radians(1.0), 2 * math.pi * R / 360, 0.1))
    closure = math.hypot(p.x, p.y)
    f = simulate_rides(small_world, range(30), 30.0, 10.0, render=False)
    dr = 0.0
    for rows in f.rides().values():
        rot, trans = steps_from_poses(f.x[rows], f.y[rows], f.heading[rows])
        x, y, _ = dead_reckon(f.x[rows[0]], f.y[rows[0]], f.heading[rows[0]], rot, trans)
        dr = max(dr, float(np.max(np.hypot(x - f.x[rows], y - f.y[rows]))))
    losses = (motion_loss((3.0, 0.2), (3.0, 0.2)), motion_loss((5.0, 0.2), (3.0, 0.2)), motion_loss((4.0, 0.7), (3.0, 0.2)))
    ok = closure <= 1e-6 * R and dr <= 1e-9 and losses == (0.0, 1.0, 0.75)
    _check(5, ok, f"circle closure {closure:.1e} m (<= {1e-6 * R:.0e}); dead-reckoning max error {dr:.1e} m (<= 1e-9); "
                  f"motion_loss cases {losses} (== (0, 1, 0.75))")


def test_criterion_06_filter_sanity():
    s = FilterState([1.0, 2.0, 0.5], np.diag([4.0, 9.0, 0.3]))
    exact, _ = update_status(s, (3.0, -2.0), 1e-12 * np.eye(2))
    vague, _ = update_status(s, (300.0, -200.0), 1e12 * np.eye(2))
    e1 = float(np.max(np.abs(exact.position - [3.0, -2.0])))
    e2 = max(float(np.max(np.abs(vague.mean - s.mean))), float(np.max(np.abs(vague.cov - s.cov))))
    one, _ = update_status(FilterState([0, 0, 0], np.eye(3)), (1.0, 0.0), np.eye(2))
    kalman = one.mean[0] == 0.5 and one.cov[0, 0] == 0.5
    rng = np.random.default_rng(6)
    st = FilterState([0, 0, 0], np.diag([10.0, 10.0, 0.5]))
    min_eig = math.inf
    for k in range(100_000):
        if k % 3:
            st = predict(st, MotionEstimate(MotionStep(rng.uniform(-0.3, 0.3), rng.uniform(0, 3), 0.1),
                                            rng.uniform(0, 0.02), rng.uniform(0, 0.3)))
        else:
            st, _ = update_status(st, st.position + rng.normal(size=2) * 5, np.diag(rng.uniform(1e-6, 100, 2)))
        min_eig = min(min_eig, float(np.linalg.eigvalsh(st.cov)[0]))
    ok = e1 <= 1e-6 and e2 <= 1e-6 and kalman and min_eig >= -1e-9
    _check(6, ok, f"exact-measurement gap {e1:.1e}, uninformative gap {e2:.1e} (<= 1e-6); 1-D case "
                  f"({one.mean[0]}, {one.cov[0, 0]}) == (0.5, 0.5); min eigenvalue over 1e5 steps {min_eig:.1e} (>= -1e-9)")


def test_criterion_07_fusion_improvement(standard):
    bench = standard["bench"]
    t0 = time.perf_counter()
    sweep = experiment_noise_sweep(bench.world, STANDARD_SEED, bench.config, sigmas=(3.0, 10.0, 20.0, 30.0))
    dt = time.perf_counter() - t0
    me = sweep.fused_me
    ok = (sweep.per_ride.shape[1] >= 50 and bool(np.all(me <= sweep.sigmas / 2))
          and bool(np.all(np.diff(me) >= 0)) and dt < 600)
    pairs = ", ".join(f"sigma {s:g}: ME {m:.2f}" for s, m in zip(sweep.sigmas, me))
    _check(7, ok, f"{pairs} (each <= sigma/2, monotone) over {sweep.per_ride.shape[1]} rides; {dt:.0f} s (< 600 s)")


def test_criterion_08_end_to_end(end_to_end):
    raw, fused = end_to_end.raw_error, end_to_end.fused_error
    fused = fused[~np.isnan(fused)]
    p10 = float(np.mean(raw >= 10.0))
    rm, fm = np.median(raw), np.median(fused)
    r90, f90 = np.percentile(raw, 90), np.percentile(fused, 90)
    ok = fm < rm and f90 < r90 and 0.3 <= p10 <= 0.5
    _check(8, ok, f"median fused {fm:.2f} < raw {rm:.2f}; P90 fused {f90:.2f} < raw {r90:.2f}; "
                  f"P(raw >= 10 m) {p10:.3f} in [0.3, 0.5]")


def test_criterion_09_confidence_coverage(standard):
    bench = standard["bench"]
    cfg = bench.config
    est = calibrated_estimator(bench.world, STANDARD_SEED, cfg)
    held = simulate_fleet(bench.world, STANDARD_SEED, 97, 40, cfg.duration, cfg.frame_rate, first_id=800_000, render=False)
    steps, rot, trans = estimate_steps(est, held)
    cov_r = coverage_of(est.calibration.rotation, wrap_pi(rot - steps.rotation))
    cov_t = coverage_of(est.calibration.translation, trans - steps.translation)
    ok = 0.63 <= cov_r <= 0.73 and 0.63 <= cov_t <= 0.73
    _check(9, ok, f"held-out coverage rotation {cov_r:.3f}, translation {cov_t:.3f} ({len(steps)} steps; in [0.63, 0.73])")


def test_criterion_10_reproducibility(pipeline_runs):
    a, b = pipeline_runs
    outputs = sorted(p.name for p in a.iterdir() if p.suffix in (".csv", ".json"))
    differ = [n for n in outputs if (a / n).read_bytes() != (b / n).read_bytes()]
    evals = [n for n in outputs if n.startswith(("retrieval_", "sweep", "e2e_", "manifest-eval"))]
    ok = not differ and len(evals) >= 10
    _check(10, ok, f"{len(outputs)} output files from two full CLI runs, {len(evals)} from eval; differing: {differ or 'none'}")
