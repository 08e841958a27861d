"""Wall-clock comparison of the numba and numpy kernel backends.

    python3 benchmarks/bench_kernels.py [--repeat 5] [--size 1.0]

Each kernel runs once untimed (numba compilation, cache warm-up), then
``--repeat`` times; the best time per backend is reported along with whether
the two backends agree on the output.
"""

import argparse
import math
import time

import numpy as np

from roadloc import kernels
from roadloc.embedding import EmbeddingModel
from roadloc.geoworld import WorldConfig, generate_world, simulate_rides
from roadloc.grid import GridIndex


def _cases(size: float):
    rng = np.random.default_rng(0)
    world = generate_world(WorldConfig(), seed=1)
    cfg = world.config
    frames = simulate_rides(world, range(int(200 * size)), 30.0, 5.0, render=False)
    n_pose = int(20_000 * size)
    pick = rng.integers(len(frames), size=n_pose)
    xs, ys, hs = (np.ascontiguousarray(a[pick]) for a in (frames.x, frames.y, frames.heading))
    blend_args = (xs, ys, hs, world.cell_lookup, world.signatures, cfg.cell_size, cfg.blend_sigma,
                  math.radians(cfg.blend_sigma_deg), int(math.ceil(3.0 * cfg.blend_sigma / cfg.cell_size)))

    grid = GridIndex(frames.x, frames.y, 10.0)
    qx, qy = frames.x[pick], frames.y[pick]
    radius_args = (grid.xs, grid.ys, grid.order, grid.cell_start, grid.nx, grid.ny, grid.cell_size,
                   np.ascontiguousarray(qx), np.ascontiguousarray(qy), np.full(n_pose, 30.0))

    pgrid = GridIndex(frames.x, frames.y, 10.0)
    pair_args = (pgrid.xs, pgrid.ys, np.ascontiguousarray(frames.heading), np.ascontiguousarray(frames.ride_id, dtype=np.int64),
                 pgrid.order, pgrid.cell_start, pgrid.nx, pgrid.ny, pgrid.cell_size, 10.0, math.radians(20.0), True)

    model = EmbeddingModel.init(seed=0)
    batch = rng.standard_normal((3, 16, 128))
    step_args = (*model.params, *batch)
    X = rng.standard_normal((int(50_000 * size), 128))
    embed_args = (*model.params, X)
    return {
        "blend_signatures": blend_args,
        "radius_query": radius_args,
        "close_pairs": pair_args,
        "triplet_step": step_args,
        "embed_batch": embed_args,
    }


def _same(a, b) -> bool:
    if isinstance(a, tuple):
        return len(a) == len(b) and all(_same(x, y) for x, y in zip(a, b))
    a, b = np.asarray(a), np.asarray(b)
    if a.shape != b.shape:
        return False
    if a.dtype.kind in "iub":
        return bool(np.array_equal(a, b))
    return bool(np.allclose(a, b, rtol=1e-9, atol=1e-9))


def _best(fn, args, repeat: int) -> tuple[float, object]:
    out = fn(*args)
    best = math.inf
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn(*args)
        best = min(best, time.perf_counter() - t0)
    return best, out


def main(argv=None) -> None:
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--repeat", type=int, default=5)
    p.add_argument("--size", type=float, default=1.0, help="scale factor for the problem sizes")
    args = p.parse_args(argv)
    print(f"{'kernel':<18}{'numba ms':>12}{'numpy ms':>12}{'speedup':>10}  agree")
    for name, case in _cases(args.size).items():
        t_nb, out_nb = _best(kernels.get(name, "numba"), case, args.repeat)
        t_np, out_np = _best(kernels.get(name, "numpy"), case, args.repeat)
        if name in ("radius_query", "close_pairs"):
            # result order within a query may differ between backends
            out_nb, out_np = _canonical(name, out_nb), _canonical(name, out_np)
        print(f"{name:<18}{1e3 * t_nb:>12.2f}{1e3 * t_np:>12.2f}{t_np / t_nb:>9.1f}x  {_same(out_nb, out_np)}")


def _canonical(name, out):
    if name == "close_pairs":
        i, j = out
        order = np.lexsort((j, i))
        return i[order], j[order]
    off, idx = out
    return off, np.concatenate([np.sort(idx[off[q] : off[q + 1]]) for q in range(off.size - 1)])


if __name__ == "__main__":
    main()
