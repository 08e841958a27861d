"""Properties of models trained on the standard benchmark and of the experiments built on them."""

import dataclasses
import math

import numpy as np
import pytest

from oracles import triplet_violations
from roadloc.egomotion import SimulatedEstimator, calibrate_confidence
from roadloc.embedding import embed_batch, evaluate_loss
from roadloc.experiments import METHODS, experiment_end_to_end, simulate_fleet, thin_keyframes
from roadloc.geoworld import GpsNoiseModel
from roadloc.retrieval import build_index, coarse_localize_batch
from roadloc.samplers import FrameDB, SamplerMix, hard_negative_indices, regular_indices


@pytest.fixture(scope="module")
def held_out(standard):
    """Validation rides as a triplet source the models never trained on."""
    db = FrameDB(standard["bench"].validation)
    rng = np.random.default_rng(11)
    draw = lambda fn: [t for t in (fn(db, rng) for _ in range(3000)) if t is not None]
    return db, draw(regular_indices), draw(hard_negative_indices), [SamplerMix(db).sample_indices(rng) for _ in range(3000)]


@pytest.mark.parametrize("key", ["regular", "all"])
def test_threshold_below_far_pair_distance(standard, key):
    val = standard["bench"].validation
    rng = np.random.default_rng(0)
    i, j = rng.integers(len(val), size=(2, 20000))
    far = np.hypot(val.x[i] - val.x[j], val.y[i] - val.y[j]) > 500.0
    z = embed_batch(standard["models"][key], val.raw)
    d = np.linalg.norm(z[i[far]] - z[j[far]], axis=1)
    assert far.sum() > 1000
    assert standard["thresholds"][key] < np.median(d)


def test_held_out_triplets_are_valid(held_out):
    db, regular, hard, mixed = held_out
    for t in regular[:200] + hard[:200] + mixed[:200]:
        assert triplet_violations(db.frames, t.anchor, t.positive, t.negative, t.source) == []


@pytest.mark.parametrize("key", ["regular", "all"])
def test_hard_negatives_cost_more_than_regular(standard, held_out, key):
    db, regular, hard, _ = held_out
    model = standard["models"][key]
    assert evaluate_loss(model, db.frames.raw, hard).mean() > evaluate_loss(model, db.frames.raw, regular).mean()


def test_held_out_loss_beats_chance(standard, held_out):
    db, regular, _, mixed = held_out
    assert evaluate_loss(standard["models"]["all"], db.frames.raw, mixed).mean() <= 0.7 * math.log(2)
    assert evaluate_loss(standard["models"]["regular"], db.frames.raw, regular).mean() <= 0.7 * math.log(2)


@pytest.mark.parametrize("key", ["regular", "all"])
def test_training_loss_decreases(standard, key):
    h = standard["histories"][key]
    s = h.smoothed(100)
    assert len(h.loss) == 30000
    assert s[-1] < s[100]
    assert max(h.lr) == pytest.approx(0.003, rel=1e-3) and h.lr[-1] < 1e-6


def test_keyframes_thinned_per_cell_and_sector(standard):
    bench = standard["bench"]
    kf = bench.keyframes
    w = bench.world
    cell = np.floor(kf.x / w.cell_size).astype(np.int64) * 100_000 + np.floor(kf.y / w.cell_size).astype(np.int64)
    key = cell * w.config.n_sectors + w.sector_of(kf.heading)
    _, counts = np.unique(key, return_counts=True)
    assert counts.max() <= bench.config.keyframe_cap
    again = thin_keyframes(w, bench.frames.take(np.isin(bench.frames.frame_id, kf.frame_id)), bench.config.keyframe_cap, bench.seed)
    assert np.array_equal(again.frame_id, kf.frame_id)


def test_zero_distortion_error_below_cell_size(standard):
    bench = standard["bench"]
    kf = bench.keyframes
    model = standard["models"]["all"]
    db = build_index(kf, model)
    fixes = coarse_localize_batch(db, db.descriptors, kf.x, kf.y, kf.heading, 50.0, standard["thresholds"]["all"],
                                  exclude_ids=kf.frame_id)
    err = [math.hypot(f.position[0] - kf.x[q], f.position[1] - kf.y[q]) for q, f in enumerate(fixes) if f is not None]
    assert len(err) > 0.3 * len(kf)
    assert np.mean(err) < bench.world.cell_size


def test_reports_are_consistent(retrieval):
    result, _ = retrieval
    for (budget, method), r in result.reports.items():
        assert r.acc_5m <= r.acc_10m <= r.acc_15m and 0 <= r.recall <= 1 and r.mean_error >= 0
        assert r.n_queries == result.query_ids.size
    assert {m for _, m in result.reports} == set(METHODS)


@pytest.mark.parametrize("budget", [
    50.0,
    pytest.param(200.0, marks=pytest.mark.xfail(strict=True, reason="the hard-negative model is less accurate than the regular one under the 200 m prior")),
])
def test_method_ordering(retrieval, budget):
    r = retrieval[0].reports
    me = [r[(budget, m)].mean_error for m in ("VL-GIST*", "VL-GIST", "GPS-NN")]
    assert me[0] <= me[1] <= me[2]


def test_end_to_end_outputs(end_to_end):
    r = end_to_end
    assert r.gt.shape == r.raw.shape == r.coarse.shape == r.fused.shape
    assert 0 < r.coarse_recall <= 1
    th, raw, fused = r.cdf()
    assert np.all(np.diff(raw) <= 0) and np.all(np.diff(fused) <= 0)
    assert set(r.tracks) == set(np.unique(r.ride_id).tolist())


@pytest.fixture(scope="module")
def noise_free(standard):
    bench = standard["bench"]
    small = dataclasses.replace(bench, config=dataclasses.replace(bench.config, e2e_rides=4))
    est = SimulatedEstimator(0.0, 0.0)
    calibrate_confidence(est, simulate_fleet(bench.world, 1, 55, 12, 20.0, 5.0, first_id=700_000, render=False))
    return lambda thr: experiment_end_to_end(small, standard["models"]["all"], thr, GpsNoiseModel.zero(), estimator=est)


def test_end_to_end_noise_free_without_visual_fixes(noise_free):
    # a zero threshold admits no neighbours, so only GPS and ego-motion remain
    r = noise_free(0.0)
    assert r.coarse_recall == 0.0
    assert np.nanmax(r.fused_error) < 1e-6


def test_end_to_end_noise_free_with_visual_fixes(noise_free, standard):
    r = noise_free(standard["thresholds"]["all"])
    coarse_err = np.hypot(*(r.coarse - r.gt).T)
    # visual fixes keep their retrieval error; fusion with exact GPS and motion stays far below it
    assert np.nanmean(coarse_err) > 2.0
    assert np.nanmax(r.fused_error) < 1.0
