import math
import os
import subprocess
import sys

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from roadloc import _accel, kernels
from roadloc.grid import GridIndex

needs_numba = pytest.mark.skipif(not _accel.HAVE_NUMBA, reason="numba not installed")


def brute_radius(xs, ys, x, y, r):
    return np.flatnonzero((xs - x) ** 2 + (ys - y) ** 2 <= r * r)


@pytest.mark.parametrize("backend", ["numpy", pytest.param("numba", marks=needs_numba)])
def test_radius_query_equals_brute_force(backend):
    rng = np.random.default_rng(0)
    xs = rng.uniform(0, 700, 5000)
    ys = rng.uniform(0, 300, 5000)
    g = GridIndex(xs, ys, 10.0)
    for _ in range(100):
        x, y = rng.uniform(-20, 720), rng.uniform(-20, 320)
        r = rng.uniform(0, 80)
        got = np.sort(g.query_radius(x, y, r, backend=backend))
        assert np.array_equal(got, brute_radius(xs, ys, x, y, r))


def test_points_outside_grid_are_found():
    xs = np.array([-5.0, 3.0, 250.0])
    ys = np.array([-5.0, 3.0, 250.0])
    g = GridIndex(xs, ys, 10.0, shape=(5, 5))
    assert np.array_equal(np.sort(g.query_radius(0.0, 0.0, 10.0)), [0, 1])
    assert np.array_equal(g.query_radius(250.0, 250.0, 1.0), [2])
    total = sum(g.cell_members(i, j).size for i in range(5) for j in range(5))
    assert total == 3


@given(
    st.lists(st.tuples(st.floats(0, 200), st.floats(0, 200)), min_size=1, max_size=80),
    st.tuples(st.floats(-10, 210), st.floats(-10, 210)),
    st.integers(1, 15),
)
@settings(max_examples=60, deadline=None)
def test_knn_matches_brute_force(points, q, k):
    p = np.array(points)
    g = GridIndex(p[:, 0], p[:, 1], 10.0)
    got = g.knn(q[0], q[1], k)
    d2 = (p[:, 0] - q[0]) ** 2 + (p[:, 1] - q[1]) ** 2
    want = np.lexsort((np.arange(len(p)), d2))[: min(k, len(p))]
    assert np.array_equal(got, want)


def test_empty_grid():
    g = GridIndex(np.zeros(0), np.zeros(0))
    assert g.query_radius(0, 0, 5).size == 0
    assert g.knn(0, 0, 3).size == 0


def test_grid_rejects_bad_input():
    with pytest.raises(ValueError):
        GridIndex(np.zeros(3), np.zeros(2))
    with pytest.raises(ValueError):
        GridIndex(np.zeros(3), np.zeros(3), cell_size=0.0)


@needs_numba
def test_close_pairs_backends_agree():
    rng = np.random.default_rng(1)
    n = 3000
    xs, ys = rng.uniform(0, 300, n), rng.uniform(0, 200, n)
    hs = rng.uniform(0, 2 * math.pi, n)
    rides = rng.integers(0, 30, n)
    g = GridIndex(xs, ys, 10.0)
    args = (xs, ys, hs, rides, g.order, g.cell_start, g.nx, g.ny, g.cell_size, 10.0, math.radians(20), True)
    a = kernels.close_pairs_nb(*args)
    b = kernels.close_pairs_np(*args)
    pa = set(zip(*map(np.ndarray.tolist, a)))
    pb = set(zip(*map(np.ndarray.tolist, b)))
    assert pa == pb and len(pa) > 0
    # brute-force oracle on a subset of anchors
    for i in range(0, n, 97):
        d = np.hypot(xs - xs[i], ys - ys[i])
        dh = np.abs(hs - hs[i]) % (2 * math.pi)
        dh = np.minimum(dh, 2 * math.pi - dh)
        want = {j for j in np.flatnonzero((d <= 10) & (dh <= math.radians(20)) & (rides != rides[i])) if j > i}
        assert {j for (a_, j) in pa if a_ == i} == want


@needs_numba
def test_blend_backends_agree(small_world):
    from roadloc.geoworld import scene_signature

    rng = np.random.default_rng(2)
    e = small_world.edges[rng.integers(len(small_world.edges), size=500)]
    f = rng.uniform(0, 1, (500, 1))
    p = small_world.nodes[e[:, 0]] + f * (small_world.nodes[e[:, 1]] - small_world.nodes[e[:, 0]])
    h = rng.uniform(0, 2 * math.pi, 500)
    a = scene_signature(small_world, p[:, 0], p[:, 1], h, backend="numba")
    b = scene_signature(small_world, p[:, 0], p[:, 1], h, backend="numpy")
    assert np.allclose(a, b, atol=1e-12)


@needs_numba
def test_mlp_backends_agree():
    from roadloc.embedding import EmbeddingModel

    m = EmbeddingModel.init(d_raw=20, seed=4)
    rng = np.random.default_rng(3)
    xa, xp, xn = (rng.standard_normal((16, 20)) for _ in range(3))
    a = kernels.triplet_step_nb(*m.params, xa, xp, xn)
    b = kernels.triplet_step_np(*m.params, xa, xp, xn)
    for u, v in zip(a, b):
        assert np.allclose(u, v, rtol=1e-10, atol=1e-13)
    assert np.allclose(kernels.embed_batch_nb(*m.params, xa), kernels.embed_batch_np(*m.params, xa), atol=1e-13)


def test_unknown_backend():
    with pytest.raises(ValueError):
        kernels.get("radius_query", "cuda")


def test_env_flag_selects_numpy():
    code = "from roadloc import _accel; print(_accel.backend())"
    env = dict(os.environ, ROADLOC_DISABLE_NUMBA="1")
    out = subprocess.run([sys.executable, "-c", code], env=env, capture_output=True, text=True, check=True)
    assert out.stdout.strip() == "numpy"
    env.pop("ROADLOC_DISABLE_NUMBA")
    out = subprocess.run([sys.executable, "-c", code], env=env, capture_output=True, text=True, check=True)
    assert out.stdout.strip() == ("numba" if _accel.HAVE_NUMBA else "numpy")
