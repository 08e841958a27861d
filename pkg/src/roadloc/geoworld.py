"""Synthetic geo-tagged driving world.

A world is a rectangle in a local tangent frame (meters, x east, y north)
with a connected road graph on top of a ``cell_size`` grid. Every cell near
a road owns one unit-norm scene signature per heading sector; frame
features blend those signatures with a smooth kernel in space and heading
and append a nuisance block standing in for weather, lighting and traffic.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterator, Sequence

import numpy as np
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components

from . import kernels

TWO_PI = 2.0 * math.pi
EARTH_RADIUS_M = 6378137.0

# rng stream ids
_STREAM_SIGNATURES = 1
_STREAM_RIDE = 2
_STREAM_GPS = 3


def rng_for(seed: int, *keys: int) -> np.random.Generator:
    """Independent, reproducible generator for ``(seed, *keys)``."""
    return np.random.default_rng([int(seed) & 0xFFFFFFFF, *(int(k) & 0xFFFFFFFF for k in keys)])


def normalize_angle(theta):
    """Wrap to ``[0, 2*pi)``."""
    out = np.mod(theta, TWO_PI)
    # mod can return exactly 2*pi for tiny negative inputs
    out = np.where(out >= TWO_PI, 0.0, out)
    return float(out) if np.ndim(out) == 0 else out


def wrap_pi(theta):
    """Wrap to ``(-pi, pi]``."""
    out = math.pi - np.mod(math.pi - np.asarray(theta, dtype=float), TWO_PI)
    return float(out) if np.ndim(out) == 0 else out


def heading_diff(a, b):
    """Absolute angular difference on the circle, in ``[0, pi]``."""
    d = np.abs(np.asarray(a, dtype=float) - np.asarray(b, dtype=float)) % TWO_PI
    out = np.minimum(d, TWO_PI - d)
    return float(out) if np.ndim(out) == 0 else out


@dataclass(frozen=True)
class GeoPose:
    x: float
    y: float
    heading: float = 0.0

    def __post_init__(self):
        if not (math.isfinite(self.x) and math.isfinite(self.y) and math.isfinite(self.heading)):
            raise ValueError(f"non-finite pose {self!r}")
        object.__setattr__(self, "x", float(self.x))
        object.__setattr__(self, "y", float(self.y))
        object.__setattr__(self, "heading", normalize_angle(float(self.heading)))

    @property
    def xy(self) -> np.ndarray:
        return np.array([self.x, self.y])

    def distance_to(self, other: "GeoPose") -> float:
        return math.hypot(self.x - other.x, self.y - other.y)


# ---------------------------------------------------------------------------
# world
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class WorldConfig:
    width: float = 2000.0
    height: float = 1000.0
    cell_size: float = 10.0
    block_x: float = 200.0  # spacing of north-south streets
    block_y: float = 250.0  # spacing of east-west streets
    roads: tuple | None = None  # explicit polylines override the street grid
    road_buffer: float | None = None  # cells whose center is this close to a road get signatures
    n_sectors: int = 18
    d_scene: int = 96
    d_nuisance: int = 32
    street_dims: int = 48  # leading signature dims carry the block-level look
    street_share: float = 0.5  # fraction of signature energy shared along a block
    blend_sigma: float = 15.0
    blend_sigma_deg: float = 20.0
    nuisance_scale: float = 1.0
    feature_noise: float = 0.02

    @property
    def d_raw(self) -> int:
        return self.d_scene + self.d_nuisance

    @property
    def sector_width(self) -> float:
        return TWO_PI / self.n_sectors


@dataclass(frozen=True, eq=False)
class World:
    config: WorldConfig
    seed: int
    nodes: np.ndarray  # (k, 2)
    edges: np.ndarray  # (m, 2) node indices
    cell_lookup: np.ndarray  # (nx, ny) row into signatures, -1 when unsigned
    cells: np.ndarray  # (n_cells, 2) grid coordinates of signed cells
    signatures: np.ndarray  # (n_cells, n_sectors, d_scene)
    adjacency: tuple = field(repr=False, default=())

    @property
    def extent(self) -> tuple[float, float]:
        return self.config.width, self.config.height

    @property
    def cell_size(self) -> float:
        return self.config.cell_size

    @property
    def grid_shape(self) -> tuple[int, int]:
        return self.cell_lookup.shape

    @property
    def d_raw(self) -> int:
        return self.config.d_raw

    @property
    def roads(self) -> list[np.ndarray]:
        """Drivable paths as 2-point polylines (a lone node yields a 1-point polyline)."""
        if self.edges.shape[0] == 0:
            return [self.nodes[i : i + 1] for i in range(self.nodes.shape[0])]
        return [self.nodes[list(e)] for e in self.edges]

    @property
    def road_length(self) -> float:
        if self.edges.shape[0] == 0:
            return 0.0
        seg = self.nodes[self.edges[:, 1]] - self.nodes[self.edges[:, 0]]
        return float(np.hypot(seg[:, 0], seg[:, 1]).sum())

    def distance_to_road(self, x, y) -> np.ndarray:
        return _distance_to_segments(np.atleast_1d(x), np.atleast_1d(y), self.nodes, self.edges)

    def signature(self, ix: int, iy: int, sector: int) -> np.ndarray:
        c = self.cell_lookup[ix, iy]
        if c < 0:
            raise KeyError(f"cell ({ix}, {iy}) has no signature")
        return self.signatures[c, sector % self.config.n_sectors]

    def sector_of(self, heading):
        w = self.config.sector_width
        return np.floor(normalize_angle(np.asarray(heading) + w / 2) / w).astype(int) % self.config.n_sectors


def _grid_roads(cfg: WorldConfig):
    def lines(extent, block):
        first = min(block / 2.0, extent / 2.0)
        return np.arange(first, extent, block)

    xs = lines(cfg.width, cfg.block_x)
    ys = lines(cfg.height, cfg.block_y)
    gx, gy = np.meshgrid(xs, ys, indexing="ij")
    nodes = np.column_stack([gx.ravel(), gy.ravel()])
    ny = ys.shape[0]
    edges = []
    for i in range(xs.shape[0]):
        for j in range(ny):
            if i + 1 < xs.shape[0]:
                edges.append((i * ny + j, (i + 1) * ny + j))
            if j + 1 < ny:
                edges.append((i * ny + j, i * ny + j + 1))
    return nodes, np.array(edges, dtype=np.int64).reshape(-1, 2)


def _polyline_roads(polylines):
    nodes: list[tuple[float, float]] = []
    where: dict[tuple[float, float], int] = {}
    edges = []

    def node(p):
        key = (round(float(p[0]), 6), round(float(p[1]), 6))
        if key not in where:
            where[key] = len(nodes)
            nodes.append(key)
        return where[key]

    for line in polylines:
        pts = np.asarray(line, dtype=float).reshape(-1, 2)
        ids = [node(p) for p in pts]
        for a, b in zip(ids[:-1], ids[1:]):
            if a != b:
                edges.append((min(a, b), max(a, b)))
    edges = sorted(set(edges))
    return np.array(nodes, dtype=float).reshape(-1, 2), np.array(edges, dtype=np.int64).reshape(-1, 2)


def _distance_to_segments(px, py, nodes, edges):
    px = np.asarray(px, dtype=float)
    py = np.asarray(py, dtype=float)
    if edges.shape[0] == 0:
        d = np.hypot(px[:, None] - nodes[None, :, 0], py[:, None] - nodes[None, :, 1])
        return d.min(axis=1)
    best = np.full(px.shape, np.inf)
    a = nodes[edges[:, 0]]
    b = nodes[edges[:, 1]]
    for lo in range(0, edges.shape[0], 256):
        aa, bb = a[lo : lo + 256], b[lo : lo + 256]
        ab = bb - aa
        L2 = np.maximum((ab**2).sum(axis=1), 1e-12)
        t = ((px[:, None] - aa[None, :, 0]) * ab[None, :, 0] + (py[:, None] - aa[None, :, 1]) * ab[None, :, 1]) / L2
        t = np.clip(t, 0.0, 1.0)
        qx = aa[None, :, 0] + t * ab[None, :, 0]
        qy = aa[None, :, 1] + t * ab[None, :, 1]
        best = np.minimum(best, np.hypot(px[:, None] - qx, py[:, None] - qy).min(axis=1))
    return best


def _unit(v):
    return v / np.linalg.norm(v, axis=-1, keepdims=True)


def _nearest_segment(px, py, nodes, edges):
    best = np.full(px.shape, np.inf)
    arg = np.zeros(px.shape, dtype=np.int64)
    for e in range(edges.shape[0]):
        d = _distance_to_segments(px, py, nodes, edges[e : e + 1])
        closer = d < best - 1e-9
        best[closer] = d[closer]
        arg[closer] = e
    return arg


def generate_world(config: WorldConfig | None = None, seed: int = 0) -> World:
    cfg = config or WorldConfig()
    if not (cfg.width > 0 and cfg.height > 0):
        raise ValueError("world extent must have positive area")
    if cfg.cell_size <= 0:
        raise ValueError("cell_size must be positive")
    if cfg.roads is not None:
        nodes, edges = _polyline_roads(cfg.roads)
    else:
        nodes, edges = _grid_roads(cfg)
    if nodes.shape[0] == 0:
        raise ValueError("road graph is empty")
    if np.any(nodes < 0) or np.any(nodes[:, 0] > cfg.width) or np.any(nodes[:, 1] > cfg.height):
        raise ValueError("road points must lie within the world extent")
    n_comp = 1
    if nodes.shape[0] > 1:
        graph = coo_matrix((np.ones(edges.shape[0]), (edges[:, 0], edges[:, 1])), shape=(nodes.shape[0],) * 2)
        n_comp, _ = connected_components(graph, directed=False)
    if n_comp != 1:
        raise ValueError(f"road graph is not connected ({n_comp} components)")

    nx = math.ceil(cfg.width / cfg.cell_size)
    ny = math.ceil(cfg.height / cfg.cell_size)
    buffer = cfg.cell_size if cfg.road_buffer is None else cfg.road_buffer
    cx, cy = np.meshgrid((np.arange(nx) + 0.5) * cfg.cell_size, (np.arange(ny) + 0.5) * cfg.cell_size, indexing="ij")
    dist = _distance_to_segments(cx.ravel(), cy.ravel(), nodes, edges).reshape(nx, ny)
    signed = dist <= buffer
    # the cell holding each road node is always signed, so tiny worlds stay usable
    nix = np.clip((nodes[:, 0] // cfg.cell_size).astype(int), 0, nx - 1)
    niy = np.clip((nodes[:, 1] // cfg.cell_size).astype(int), 0, ny - 1)
    signed[nix, niy] = True

    cells = np.argwhere(signed).astype(np.int64)  # row-major order, deterministic
    lookup = np.full((nx, ny), -1, dtype=np.int64)
    lookup[cells[:, 0], cells[:, 1]] = np.arange(cells.shape[0])
    if not 0.0 <= cfg.street_share <= 1.0:
        raise ValueError("street_share must be in [0, 1]")
    if not 0 < cfg.street_dims < cfg.d_scene:
        raise ValueError("street_dims must be in (0, d_scene)")
    rng = rng_for(seed, _STREAM_SIGNATURES)
    n_local = cfg.d_scene - cfg.street_dims
    local = _unit(rng.standard_normal((cells.shape[0], cfg.n_sectors, n_local)))
    street = _unit(rng.standard_normal((max(edges.shape[0], 1), cfg.n_sectors, cfg.street_dims)))
    if edges.shape[0] > 0:
        # each cell inherits the street-level look of its nearest block (road edge)
        centers = (cells + 0.5) * cfg.cell_size
        block = _nearest_segment(centers[:, 0], centers[:, 1], nodes, edges)
    else:
        block = np.zeros(cells.shape[0], dtype=np.int64)
    sig = np.concatenate(
        [math.sqrt(cfg.street_share) * street[block], math.sqrt(1.0 - cfg.street_share) * local], axis=2
    )

    adjacency: list[list[int]] = [[] for _ in range(nodes.shape[0])]
    for a, b in edges:
        adjacency[a].append(int(b))
        adjacency[b].append(int(a))
    return World(
        config=cfg,
        seed=int(seed),
        nodes=nodes,
        edges=edges,
        cell_lookup=lookup,
        cells=cells,
        signatures=sig,
        adjacency=tuple(tuple(sorted(a)) for a in adjacency),
    )


# ---------------------------------------------------------------------------
# frame features
# ---------------------------------------------------------------------------


def scene_signature(world: World, xs, ys, headings, backend: str | None = None) -> np.ndarray:
    """Unit-norm blended scene signature for each pose, shape (n, d_scene)."""
    cfg = world.config
    xs = np.ascontiguousarray(np.atleast_1d(xs), dtype=np.float64)
    ys = np.ascontiguousarray(np.atleast_1d(ys), dtype=np.float64)
    hs = np.ascontiguousarray(normalize_angle(np.atleast_1d(np.asarray(headings, dtype=np.float64))))
    radius_cells = int(math.ceil(3.0 * cfg.blend_sigma / cfg.cell_size))
    fn = kernels.get("blend_signatures", backend)
    out, wsum = fn(
        xs, ys, hs, world.cell_lookup, world.signatures, cfg.cell_size,
        cfg.blend_sigma, math.radians(cfg.blend_sigma_deg), radius_cells,
    )
    if np.any(wsum <= 0.0):
        bad = int(np.flatnonzero(wsum <= 0.0)[0])
        raise ValueError(f"pose ({xs[bad]:.1f}, {ys[bad]:.1f}) is outside every signed cell")
    return out / np.linalg.norm(out, axis=1, keepdims=True)


def feature_components(world: World, pose: GeoPose, nuisance_seed: int):
    """``(signature, nuisance, noise)`` making up one raw feature."""
    cfg = world.config
    sig = scene_signature(world, [pose.x], [pose.y], [pose.heading])[0]
    rng = np.random.default_rng(int(nuisance_seed) & 0xFFFFFFFFFFFFFFFF)
    nuisance = rng.standard_normal(cfg.d_nuisance) * (cfg.nuisance_scale / math.sqrt(cfg.d_nuisance))
    noise = rng.standard_normal(cfg.d_raw) * cfg.feature_noise
    return sig, nuisance, noise


def render_frame_feature(world: World, pose: GeoPose, nuisance_seed: int) -> np.ndarray:
    sig, nuisance, noise = feature_components(world, pose, nuisance_seed)
    return np.concatenate([sig, nuisance]) + noise


def render_features(world: World, xs, ys, headings, nuisance_seeds) -> np.ndarray:
    """Batched :func:`render_frame_feature`; bit-identical to the per-frame path."""
    cfg = world.config
    sig = scene_signature(world, xs, ys, headings)
    n = sig.shape[0]
    out = np.empty((n, cfg.d_raw))
    out[:, : cfg.d_scene] = sig
    scale = cfg.nuisance_scale / math.sqrt(cfg.d_nuisance)
    for i, s in enumerate(np.asarray(nuisance_seeds)):
        rng = np.random.default_rng(int(s) & 0xFFFFFFFFFFFFFFFF)
        out[i, cfg.d_scene :] = rng.standard_normal(cfg.d_nuisance) * scale
        out[i] += rng.standard_normal(cfg.d_raw) * cfg.feature_noise
    return out


# ---------------------------------------------------------------------------
# rides
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class FrameRecord:
    frame_id: int
    ride_id: int
    t: float
    pose: GeoPose
    raw_feature: np.ndarray
    nuisance_seed: int


@dataclass(eq=False)
class FrameTable(Sequence):
    """Column store of frames; indexing yields :class:`FrameRecord`."""

    frame_id: np.ndarray
    ride_id: np.ndarray
    t: np.ndarray
    x: np.ndarray
    y: np.ndarray
    heading: np.ndarray
    raw: np.ndarray
    nuisance_seed: np.ndarray

    def __post_init__(self):
        n = self.frame_id.shape[0]
        for name in ("ride_id", "t", "x", "y", "heading", "nuisance_seed"):
            if getattr(self, name).shape != (n,):
                raise ValueError(f"column {name} has wrong shape")
        if self.raw.ndim != 2 or self.raw.shape[0] != n:
            raise ValueError("raw must be (n, d_raw)")

    def __len__(self) -> int:
        return self.frame_id.shape[0]

    def __getitem__(self, i):
        if isinstance(i, (slice, np.ndarray, list)):
            return self.take(np.arange(len(self))[i] if isinstance(i, slice) else np.asarray(i))
        i = int(i)
        return FrameRecord(
            frame_id=int(self.frame_id[i]),
            ride_id=int(self.ride_id[i]),
            t=float(self.t[i]),
            pose=GeoPose(self.x[i], self.y[i], self.heading[i]),
            raw_feature=self.raw[i],
            nuisance_seed=int(self.nuisance_seed[i]),
        )

    def __iter__(self) -> Iterator[FrameRecord]:
        for i in range(len(self)):
            yield self[i]

    def take(self, idx) -> "FrameTable":
        idx = np.asarray(idx)
        if idx.dtype == bool:
            idx = np.flatnonzero(idx)
        return FrameTable(
            self.frame_id[idx], self.ride_id[idx], self.t[idx], self.x[idx], self.y[idx],
            self.heading[idx], self.raw[idx], self.nuisance_seed[idx],
        )

    @property
    def xy(self) -> np.ndarray:
        return np.column_stack([self.x, self.y])

    @staticmethod
    def concat(tables: Sequence["FrameTable"]) -> "FrameTable":
        tables = list(tables)
        if not tables:
            raise ValueError("nothing to concatenate")
        cols = {}
        for name in ("frame_id", "ride_id", "t", "x", "y", "heading", "raw", "nuisance_seed"):
            cols[name] = np.concatenate([getattr(t, name) for t in tables])
        return FrameTable(**cols)

    def rides(self) -> dict[int, np.ndarray]:
        """ride_id -> row indices sorted by time."""
        order = np.lexsort((self.t, self.ride_id))
        rid = self.ride_id[order]
        cuts = np.flatnonzero(np.diff(rid)) + 1
        return {int(rid[g[0]]): g for g in np.split(order, cuts) if g.size}


@dataclass(frozen=True)
class RideConfig:
    min_speed: float = 0.0
    max_speed: float = 15.0
    cruise_low: float = 7.0
    cruise_high: float = 14.0
    turn_speed: float = 5.0
    max_accel: float = 2.5
    min_turn_radius: float = 6.0
    max_yaw_rate: float = math.radians(45.0)
    lookahead: float = 6.0
    lookahead_gain: float = 0.5


FRAME_ID_STRIDE = 1_000_000


def simulate_ride(
    world: World,
    seed: int,
    duration: float,
    frame_rate: float,
    ride_id: int | None = None,
    config: RideConfig | None = None,
    start: tuple[int, float, bool] | None = None,
    render: bool = True,
) -> FrameTable:
    """Drive one vehicle along the street graph.

    The vehicle is stepped with the discrete Ackermann model (rotate, then
    translate), steering by pure pursuit on a random non-reversing route, so
    consecutive poses are related by an exact ``(rotation, translation)``
    pair. ``start`` optionally fixes ``(edge, fraction, forward)``.
    """
    if duration <= 0 or frame_rate <= 0:
        raise ValueError("duration and frame_rate must be positive")
    if world.edges.shape[0] == 0:
        raise ValueError("world has no drivable roads")
    cfg = config or RideConfig()
    rid = int(seed if ride_id is None else ride_id)
    rng = rng_for(seed, _STREAM_RIDE)
    n = max(1, int(round(duration * frame_rate)))
    dt = 1.0 / frame_rate

    if start is None:
        lengths = np.hypot(*(world.nodes[world.edges[:, 1]] - world.nodes[world.edges[:, 0]]).T)
        e = int(rng.choice(world.edges.shape[0], p=lengths / lengths.sum()))
        frac = float(rng.uniform(0.05, 0.95))
        forward = bool(rng.integers(2))
    else:
        e, frac, forward = start
        # keep the rng stream aligned with the random-start case
        rng.choice(2), rng.uniform(), rng.integers(2)
    a, b = (int(v) for v in world.edges[e])
    if not forward:
        a, b = b, a
    pa, pb = world.nodes[a], world.nodes[b]
    pos = pa + frac * (pb - pa)
    heading = math.atan2(pb[1] - pa[1], pb[0] - pa[0])

    route = [pos.copy(), pb.copy()]
    route_nodes = [a, b]

    def extend():
        prev, cur = route_nodes[-2], route_nodes[-1]
        options = [v for v in world.adjacency[cur] if v != prev] or [prev]
        nxt = options[int(rng.integers(len(options)))]
        route_nodes.append(nxt)
        route.append(world.nodes[nxt].copy())

    for _ in range(3):
        extend()
    seg = 0  # route segment index containing the progress point
    speed = float(rng.uniform(cfg.cruise_low, cfg.cruise_high)) * 0.7
    cruise = float(rng.uniform(cfg.cruise_low, cfg.cruise_high))
    kappa_max = 1.0 / cfg.min_turn_radius

    xs = np.empty(n)
    ys = np.empty(n)
    hs = np.empty(n)
    for k in range(n):
        xs[k], ys[k], hs[k] = pos[0], pos[1], normalize_angle(heading)
        if k == n - 1:
            break
        # advance progress along the route
        while True:
            p0, p1 = route[seg], route[seg + 1]
            d = p1 - p0
            L2 = float(d @ d)
            t = float((pos - p0) @ d / L2) if L2 > 0 else 1.0
            if t < 1.0 or seg + 2 >= len(route):
                break
            seg += 1
            cruise = float(rng.uniform(cfg.cruise_low, cfg.cruise_high))
        while len(route) - seg < 5:
            extend()
        # distance to the next turning node
        d_turn = math.inf
        run = max(0.0, 1.0 - t) * math.sqrt(L2)
        for j in range(seg + 1, len(route) - 1):
            v_in = route[j] - route[j - 1]
            v_out = route[j + 1] - route[j]
            ang = abs(wrap_pi(math.atan2(v_out[1], v_out[0]) - math.atan2(v_in[1], v_in[0])))
            if ang > math.radians(30):
                d_turn = run
                break
            run += float(np.hypot(*v_out))
        target_speed = min(cruise, math.sqrt(cfg.turn_speed**2 + 2 * cfg.max_accel * max(d_turn - 5.0, 0.0)))
        speed += float(np.clip(target_speed - speed, -cfg.max_accel * dt, cfg.max_accel * dt))
        speed = float(np.clip(speed, cfg.min_speed, cfg.max_speed))
        trans = speed * dt

        # pure-pursuit target on the route
        look = cfg.lookahead + cfg.lookahead_gain * speed
        target = _point_along(route, seg, pos, look)
        desired = math.atan2(target[1] - pos[1], target[0] - pos[0])
        limit = min(trans * kappa_max, cfg.max_yaw_rate * dt)
        rot = float(np.clip(wrap_pi(desired - heading), -limit, limit))
        heading = heading + rot
        pos = pos + trans * np.array([math.cos(heading), math.sin(heading)])

    frame_ids = rid * FRAME_ID_STRIDE + np.arange(n, dtype=np.int64)
    seeds = np.array([_mix_seed(seed, k) for k in range(n)], dtype=np.int64)
    if render:
        raw = render_features(world, xs, ys, hs, seeds)
    else:
        raw = np.zeros((n, 0))
    return FrameTable(
        frame_id=frame_ids,
        ride_id=np.full(n, rid, dtype=np.int64),
        t=np.arange(n) * dt,
        x=xs,
        y=ys,
        heading=hs,
        raw=raw,
        nuisance_seed=seeds,
    )


def _mix_seed(seed: int, k: int) -> int:
    return int(np.random.SeedSequence([int(seed) & 0xFFFFFFFF, 7, k]).generate_state(2, np.uint32).view(np.int64)[0] & 0x7FFFFFFFFFFFFFFF)


def _point_along(route, seg, pos, dist):
    p0, p1 = route[seg], route[seg + 1]
    d = p1 - p0
    L = float(np.hypot(*d))
    t = float(np.clip((pos - p0) @ d / (L * L), 0.0, 1.0)) if L > 0 else 1.0
    remaining = dist
    cur = p0 + t * d
    j = seg
    while j + 1 < len(route):
        nxt = route[j + 1]
        step = float(np.hypot(*(nxt - cur)))
        if step >= remaining:
            return cur + (nxt - cur) * (remaining / step)
        remaining -= step
        cur = nxt
        j += 1
    return cur


def simulate_rides(world: World, seeds, duration: float, frame_rate: float, **kwargs) -> FrameTable:
    return FrameTable.concat([simulate_ride(world, int(s), duration, frame_rate, **kwargs) for s in seeds])


# ---------------------------------------------------------------------------
# GPS noise
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class GpsNoiseModel:
    sigma_base: float = 4.0
    canyon_prob: float = 0.5
    canyon_bias_scale: float = 18.0
    canyon_sigma: float = 5.0
    reported_accuracy_noise: float = 1.0
    sigma_heading: float = math.radians(3.0)
    segment_seconds: float = 5.0
    bias_time_constant: float = 10.0

    def __post_init__(self):
        for name in ("sigma_base", "canyon_bias_scale", "canyon_sigma", "reported_accuracy_noise", "sigma_heading"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        if not 0.0 <= self.canyon_prob <= 1.0:
            raise ValueError("canyon_prob must be in [0, 1]")
        if self.segment_seconds <= 0 or self.bias_time_constant <= 0:
            raise ValueError("segment_seconds and bias_time_constant must be positive")

    @classmethod
    def zero(cls) -> "GpsNoiseModel":
        return cls(0.0, 0.0, 0.0, 0.0, 0.0, 0.0)


@dataclass(frozen=True)
class CanyonState:
    active: bool = False
    bias: tuple[float, float] = (0.0, 0.0)


@dataclass(frozen=True)
class NoisyFix:
    position: GeoPose
    reported_accuracy: float
    true_error: float


MIN_REPORTED_ACCURACY = 1.0


def gps_noise(pose: GeoPose, model: GpsNoiseModel, ride_state: CanyonState | None = None, seed: int = 0) -> NoisyFix:
    """One noisy fix for ``pose`` given the canyon state of the current segment."""
    state = ride_state or CanyonState()
    rng = rng_for(seed, _STREAM_GPS)
    z = rng.standard_normal(6)
    return _apply_noise(pose.x, pose.y, pose.heading, model, state.active, np.asarray(state.bias, dtype=float), z)


def _apply_noise(x, y, heading, model, active, bias, z):
    dx = model.sigma_base * z[0]
    dy = model.sigma_base * z[1]
    sigma_eff = model.sigma_base
    if active:
        dx += bias[0] + model.canyon_sigma * z[2]
        dy += bias[1] + model.canyon_sigma * z[3]
        sigma_eff = math.hypot(model.sigma_base, model.canyon_sigma)
    h = heading + model.sigma_heading * z[4]
    reported = max(abs(sigma_eff + model.reported_accuracy_noise * z[5]), MIN_REPORTED_ACCURACY)
    return NoisyFix(GeoPose(x + dx, y + dy, h), reported, math.hypot(dx, dy))


@dataclass(eq=False)
class GpsTrack:
    x: np.ndarray
    y: np.ndarray
    heading: np.ndarray
    reported_accuracy: np.ndarray
    true_error: np.ndarray
    canyon: np.ndarray

    def __len__(self):
        return self.x.shape[0]

    def fix(self, i: int) -> NoisyFix:
        return NoisyFix(GeoPose(self.x[i], self.y[i], self.heading[i]), float(self.reported_accuracy[i]), float(self.true_error[i]))


def simulate_gps(frames: FrameTable, model: GpsNoiseModel, seed: int) -> GpsTrack:
    """Noisy GPS for every frame, with canyon episodes evolving per ride.

    Canyon state is drawn independently per ride segment; while active the
    bias follows a stationary AR(1) process whose per-axis std is
    ``canyon_bias_scale / sqrt(2)``.
    """
    n = len(frames)
    out = {k: np.empty(n) for k in ("x", "y", "heading", "reported_accuracy", "true_error")}
    canyon = np.zeros(n, dtype=bool)
    axis_std = model.canyon_bias_scale / math.sqrt(2.0)
    for rid, rows in frames.rides().items():
        rng = rng_for(seed, _STREAM_GPS, rid)
        t = frames.t[rows]
        seg = np.floor((t - t[0]) / model.segment_seconds).astype(int)
        n_seg = int(seg[-1]) + 1
        seg_active = rng.random(n_seg) < model.canyon_prob
        z = rng.standard_normal((rows.shape[0], 6))
        zb = rng.standard_normal((rows.shape[0], 2))
        bias = np.zeros(2)
        was_active = False
        for k, r in enumerate(rows):
            active = bool(seg_active[seg[k]])
            if active:
                if not was_active:
                    bias = axis_std * zb[k]
                else:
                    rho = math.exp(-(t[k] - t[k - 1]) / model.bias_time_constant)
                    bias = rho * bias + math.sqrt(1 - rho * rho) * axis_std * zb[k]
            fix = _apply_noise(frames.x[r], frames.y[r], frames.heading[r], model, active, bias, z[k])
            out["x"][r], out["y"][r], out["heading"][r] = fix.position.x, fix.position.y, fix.position.heading
            out["reported_accuracy"][r] = fix.reported_accuracy
            out["true_error"][r] = fix.true_error
            canyon[r] = active
            was_active = active
    return GpsTrack(canyon=canyon, **out)


# ---------------------------------------------------------------------------
# lat/lon boundary
# ---------------------------------------------------------------------------


def latlon_to_local(lat, lon, origin: tuple[float, float]):
    """Equirectangular projection about ``origin = (lat0, lon0)`` in degrees."""
    lat0, lon0 = origin
    lat = np.asarray(lat, dtype=float)
    lon = np.asarray(lon, dtype=float)
    if np.any(np.abs(lat) > 85.0) or abs(lat0) > 85.0:
        raise ValueError("latitude beyond +-85 degrees")
    x = EARTH_RADIUS_M * math.cos(math.radians(lat0)) * np.radians(lon - lon0)
    y = EARTH_RADIUS_M * np.radians(lat - lat0)
    if x.ndim == 0:
        return float(x), float(y)
    return x, y


def local_to_latlon(x, y, origin: tuple[float, float]):
    lat0, lon0 = origin
    if abs(lat0) > 85.0:
        raise ValueError("latitude beyond +-85 degrees")
    lat = lat0 + np.degrees(np.asarray(y, dtype=float) / EARTH_RADIUS_M)
    lon = lon0 + np.degrees(np.asarray(x, dtype=float) / (EARTH_RADIUS_M * math.cos(math.radians(lat0))))
    if np.any(np.abs(lat) > 85.0):
        raise ValueError("latitude beyond +-85 degrees")
    if np.ndim(lat) == 0:
        return float(lat), float(lon)
    return lat, lon

