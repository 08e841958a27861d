import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.stats import spearmanr

from roadloc.geoworld import (
    CanyonState,
    GeoPose,
    GpsNoiseModel,
    RideConfig,
    WorldConfig,
    feature_components,
    generate_world,
    gps_noise,
    heading_diff,
    latlon_to_local,
    local_to_latlon,
    normalize_angle,
    render_features,
    render_frame_feature,
    scene_signature,
    simulate_gps,
    simulate_ride,
    simulate_rides,
)


def test_test_area_grid_shape():
    w = generate_world(WorldConfig(width=750.0, height=280.0, block_x=150.0, block_y=140.0), seed=1)
    assert w.grid_shape == (75, 28)


def test_single_point_world_has_one_cell():
    w = generate_world(WorldConfig(width=10.0, height=10.0, roads=(((5.0, 5.0),),)), seed=4)
    assert w.cells.shape[0] == 1
    assert w.grid_shape == (1, 1)


def test_world_is_deterministic():
    a = generate_world(WorldConfig(width=400, height=300), seed=9)
    b = generate_world(WorldConfig(width=400, height=300), seed=9)
    assert np.array_equal(a.signatures, b.signatures)
    assert np.array_equal(a.nodes, b.nodes) and np.array_equal(a.edges, b.edges)
    c = generate_world(WorldConfig(width=400, height=300), seed=10)
    assert not np.array_equal(a.signatures, c.signatures)


def test_world_rejects_bad_config():
    with pytest.raises(ValueError):
        generate_world(WorldConfig(width=0.0, height=10.0))
    with pytest.raises(ValueError):
        generate_world(WorldConfig(roads=()))
    with pytest.raises(ValueError):
        generate_world(WorldConfig(width=100, height=100, roads=(((10, 10), (20, 10)), ((60, 60), (80, 60)))))


def test_signatures_unit_norm_and_roads_inside(small_world):
    n = np.linalg.norm(small_world.signatures, axis=2)
    assert np.allclose(n, 1.0, atol=1e-12)
    w, h = small_world.extent
    assert small_world.nodes[:, 0].min() >= 0 and small_world.nodes[:, 0].max() <= w
    assert small_world.nodes[:, 1].min() >= 0 and small_world.nodes[:, 1].max() <= h


def test_every_road_cell_signed(small_world):
    rng = np.random.default_rng(0)
    for a, b in small_world.edges:
        pa, pb = small_world.nodes[a], small_world.nodes[b]
        for f in rng.uniform(0, 1, 20):
            p = pa + f * (pb - pa)
            ix, iy = (np.minimum(p // small_world.cell_size, np.array(small_world.grid_shape) - 1)).astype(int)
            assert small_world.cell_lookup[ix, iy] >= 0


def test_ride_length_and_on_road(small_world):
    f = simulate_ride(small_world, 7, 40.0, 10.0)
    assert len(f) == 400
    assert np.all(small_world.distance_to_road(f.x, f.y) < 3.0)
    assert np.all(np.diff(f.t) > 0)
    assert np.allclose(np.diff(f.t), 0.1)


def test_single_frame_ride(small_world):
    assert len(simulate_ride(small_world, 7, 0.1, 10.0)) == 1


def test_ride_rejects_bad_args(small_world):
    with pytest.raises(ValueError):
        simulate_ride(small_world, 1, 0.0, 10.0)
    lone = generate_world(WorldConfig(width=10.0, height=10.0, roads=(((5.0, 5.0),),)), seed=4)
    with pytest.raises(ValueError):
        simulate_ride(lone, 1, 1.0, 10.0)


def test_frame_spacing_respects_speed_cap(small_world):
    cap = RideConfig().max_speed
    for rate in (5.0, 10.0):
        f = simulate_rides(small_world, range(100), 20.0, rate, render=False)
        for rows in f.rides().values():
            step = np.hypot(np.diff(f.x[rows]), np.diff(f.y[rows]))
            assert step.max() <= cap / rate + 1e-9


def test_ride_deterministic(small_world):
    a = simulate_ride(small_world, 11, 10.0, 5.0)
    b = simulate_ride(small_world, 11, 10.0, 5.0)
    assert np.array_equal(a.raw, b.raw) and np.array_equal(a.x, b.x)


def test_feature_shares_signature_across_nuisance(small_world):
    pose = GeoPose(*small_world.nodes[0] + 1.0, 0.3)
    s1, n1, _ = feature_components(small_world, pose, 1)
    s2, n2, _ = feature_components(small_world, pose, 2)
    assert np.array_equal(s1, s2)
    assert not np.allclose(n1, n2)
    f = render_frame_feature(small_world, pose, 1)
    assert f.shape == (small_world.d_raw,) and np.all(np.isfinite(f))


def test_batched_render_matches_single(small_world):
    f = simulate_ride(small_world, 5, 2.0, 5.0)
    for i in range(len(f)):
        r = f[i]
        assert np.array_equal(render_frame_feature(small_world, r.pose, r.nuisance_seed), f.raw[i])
    assert np.array_equal(render_features(small_world, f.x, f.y, f.heading, f.nuisance_seed), f.raw)


def test_render_rejects_far_pose(small_world):
    w = generate_world(WorldConfig(width=200, height=200, roads=(((10, 10), (50, 10)),)), seed=1)
    with pytest.raises(ValueError):
        render_frame_feature(w, GeoPose(150.0, 150.0, 0.0), 1)


def test_far_signatures_uncorrelated():
    w = generate_world(WorldConfig(), seed=2)
    f = simulate_rides(w, range(200), 10.0, 1.0, render=False)
    rng = np.random.default_rng(1)
    a = rng.integers(len(f), size=20000)
    b = rng.integers(len(f), size=20000)
    far = np.hypot(f.x[a] - f.x[b], f.y[a] - f.y[b]) > 500.0
    # distinct streets only: blocks shared along a street are correlated by design
    a, b = a[far][:1000], b[far][:1000]
    sa = scene_signature(w, f.x[a], f.y[a], f.heading[a])
    sb = scene_signature(w, f.x[b], f.y[b], f.heading[b])
    corr = np.sum(sa * sb, axis=1)
    assert abs(corr.mean()) < 3.0 / math.sqrt(w.config.d_scene)


def test_near_signatures_similar(small_world):
    f = simulate_rides(small_world, range(30), 10.0, 2.0, render=False)
    h = f.heading
    dx, dy = 2.0 * np.cos(h), 2.0 * np.sin(h)
    s0 = scene_signature(small_world, f.x, f.y, h)
    s1 = scene_signature(small_world, f.x + dx, f.y + dy, h)
    assert np.min(np.sum(s0 * s1, axis=1)) > 0.9


def test_signature_similarity_decreases_with_distance():
    w = generate_world(WorldConfig(), seed=2)
    f = simulate_rides(w, range(100), 10.0, 1.0, render=False)
    rng = np.random.default_rng(5)
    a = rng.integers(len(f), size=4000)
    b = rng.integers(len(f), size=4000)
    d = np.hypot(f.x[a] - f.x[b], f.y[a] - f.y[b])
    sim = np.sum(scene_signature(w, f.x[a], f.y[a], f.heading[a]) * scene_signature(w, f.x[b], f.y[b], f.heading[a]), axis=1)
    near = d < 300
    rho = spearmanr(d[near], sim[near]).statistic
    assert rho < -0.2


def test_nuisance_uncorrelated(small_world):
    pose = GeoPose(*small_world.nodes[0], 0.0)
    ns = np.array([feature_components(small_world, pose, s)[1] for s in range(2000)])
    c = np.corrcoef(ns[:-1].ravel(), ns[1:].ravel())[0, 1]
    assert abs(c) < 0.02


def test_zero_gps_model_is_identity(small_world):
    pose = GeoPose(12.0, 34.0, 1.0)
    fix = gps_noise(pose, GpsNoiseModel.zero(), CanyonState(), seed=3)
    assert fix.position.x == pose.x and fix.position.y == pose.y
    assert fix.true_error == 0.0
    f = simulate_ride(small_world, 3, 10.0, 5.0, render=False)
    tr = simulate_gps(f, GpsNoiseModel.zero(), 1)
    assert np.array_equal(tr.x, f.x) and np.array_equal(tr.y, f.y)
    assert np.all(tr.true_error == 0)


def test_gps_rayleigh_mean():
    model = GpsNoiseModel(sigma_base=5.0, canyon_prob=0.0)
    pose = GeoPose(0.0, 0.0, 0.0)
    err = np.array([gps_noise(pose, model, seed=s).true_error for s in range(10000)])
    assert err.mean() == pytest.approx(5.0 * math.sqrt(math.pi / 2.0), rel=0.05)


def test_gps_deterministic_per_seed():
    pose = GeoPose(1.0, 2.0, 0.5)
    m = GpsNoiseModel()
    assert gps_noise(pose, m, CanyonState(True, (3.0, -1.0)), 8) == gps_noise(pose, m, CanyonState(True, (3.0, -1.0)), 8)


def test_default_gps_heavy_tail():
    w = generate_world(WorldConfig(), seed=1)
    f = simulate_rides(w, range(60), 40.0, 5.0, render=False)
    err = simulate_gps(f, GpsNoiseModel(), 2).true_error
    assert 0.3 <= np.mean(err >= 10.0) <= 0.5
    assert np.all(simulate_gps(f, GpsNoiseModel(), 2).reported_accuracy > 0)


def test_gps_model_validation():
    with pytest.raises(ValueError):
        GpsNoiseModel(sigma_base=-1.0)
    with pytest.raises(ValueError):
        GpsNoiseModel(canyon_prob=1.5)


def test_latlon_origin_and_equator():
    assert latlon_to_local(40.7, -74.0, (40.7, -74.0)) == (0.0, 0.0)
    x, y = latlon_to_local(0.0, 1.0, (0.0, 0.0))
    assert x == pytest.approx(111320.0, rel=0.005) and y == 0.0
    with pytest.raises(ValueError):
        latlon_to_local(86.0, 0.0, (40.0, 0.0))


def test_latlon_round_trip():
    rng = np.random.default_rng(3)
    origin = (40.75, -73.98)
    x = rng.uniform(-10000, 10000, 1000)
    y = rng.uniform(-10000, 10000, 1000)
    lat, lon = local_to_latlon(x, y, origin)
    x2, y2 = latlon_to_local(lat, lon, origin)
    assert np.max(np.hypot(x2 - x, y2 - y)) < 0.01


@given(st.floats(-50.0, 50.0, allow_nan=False))
def test_normalize_angle_range(theta):
    h = normalize_angle(theta)
    assert 0.0 <= h < 2 * math.pi
    assert math.isclose(math.cos(h), math.cos(theta), abs_tol=1e-9)


@given(st.floats(-20.0, 20.0), st.floats(-20.0, 20.0))
@settings(max_examples=200)
def test_heading_diff_on_circle(a, b):
    d = heading_diff(a, b)
    raw = abs(a - b) % (2 * math.pi)
    assert 0.0 <= d <= math.pi + 1e-12
    assert math.isclose(d, min(raw, 2 * math.pi - raw), abs_tol=1e-12)
    assert math.isclose(d, heading_diff(b, a), abs_tol=1e-12)


def test_geopose_normalizes_and_rejects_nan():
    assert GeoPose(0, 0, -math.pi / 2).heading == pytest.approx(1.5 * math.pi)
    with pytest.raises(ValueError):
        GeoPose(math.nan, 0.0)
