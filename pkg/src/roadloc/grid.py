"""Uniform-grid spatial index over planar points."""

from __future__ import annotations

import math

import numpy as np

from . import kernels


class GridIndex:
    """Static bucket grid with CSR layout.

    Points are bucketed into ``cell_size`` squares anchored at the origin;
    points outside ``[0, nx*cell) x [0, ny*cell)`` are clamped into the border
    cells, so every point lives in exactly one cell.
    """

    def __init__(self, xs, ys, cell_size: float = 10.0, shape: tuple[int, int] | None = None):
        self.xs = np.ascontiguousarray(xs, dtype=np.float64)
        self.ys = np.ascontiguousarray(ys, dtype=np.float64)
        if self.xs.shape != self.ys.shape or self.xs.ndim != 1:
            raise ValueError("xs and ys must be 1-D arrays of equal length")
        if cell_size <= 0:
            raise ValueError("cell_size must be positive")
        self.cell_size = float(cell_size)
        if shape is None:
            xmax = float(self.xs.max()) if self.xs.size else 0.0
            ymax = float(self.ys.max()) if self.ys.size else 0.0
            shape = (max(1, math.floor(xmax / cell_size) + 1), max(1, math.floor(ymax / cell_size) + 1))
        self.nx, self.ny = int(shape[0]), int(shape[1])
        ix, iy = self.cell_of(self.xs, self.ys)
        keys = ix * self.ny + iy
        self.order = np.argsort(keys, kind="stable").astype(np.int64)
        self.cell_start = np.searchsorted(keys[self.order], np.arange(self.nx * self.ny + 1)).astype(np.int64)

    def __len__(self) -> int:
        return self.xs.shape[0]

    def cell_of(self, x, y):
        ix = np.clip(np.floor(np.asarray(x) / self.cell_size).astype(np.int64), 0, self.nx - 1)
        iy = np.clip(np.floor(np.asarray(y) / self.cell_size).astype(np.int64), 0, self.ny - 1)
        return ix, iy

    def cell_members(self, ix: int, iy: int) -> np.ndarray:
        k = ix * self.ny + iy
        return self.order[self.cell_start[k] : self.cell_start[k + 1]]

    def query_radius_batch(self, qx, qy, radius, backend: str | None = None):
        """CSR result ``(offsets, indices)`` of points within ``radius`` of each query.

        Points clamped into border cells are still found because candidate
        filtering is by true distance over every cell the disc touches after
        clamping the cell range.
        """
        qx = np.ascontiguousarray(np.atleast_1d(qx), dtype=np.float64)
        qy = np.ascontiguousarray(np.atleast_1d(qy), dtype=np.float64)
        r = np.ascontiguousarray(np.broadcast_to(np.asarray(radius, dtype=np.float64), qx.shape))
        if len(self) == 0:
            return np.zeros(qx.shape[0] + 1, dtype=np.int64), np.zeros(0, dtype=np.int64)
        # clamped points may sit outside their cell; widen the scan so they are reached
        lo, hi = self._clamp_slack()
        fn = kernels.get("radius_query", backend)
        if lo == 0.0 and hi == 0.0:
            return fn(self.xs, self.ys, self.order, self.cell_start, self.nx, self.ny, self.cell_size, qx, qy, r)
        return self._query_slow(qx, qy, r)

    def query_radius(self, x: float, y: float, radius: float, backend: str | None = None) -> np.ndarray:
        _, idx = self.query_radius_batch([x], [y], radius, backend=backend)
        return idx

    def knn(self, x: float, y: float, k: int) -> np.ndarray:
        """Indices of the ``k`` nearest points (all points when fewer), nearest first.

        Ties are broken by index for determinism.
        """
        n = len(self)
        if n == 0 or k <= 0:
            return np.zeros(0, dtype=np.int64)
        k = min(k, n)
        r = self.cell_size
        diag = math.hypot(self.nx * self.cell_size, self.ny * self.cell_size) + abs(x) + abs(y)
        while True:
            idx = self.query_radius(x, y, r)
            if idx.shape[0] >= k or r > 2 * diag + self.cell_size:
                break
            r *= 2.0
        if idx.shape[0] < k:
            idx = np.arange(n)
        d2 = (self.xs[idx] - x) ** 2 + (self.ys[idx] - y) ** 2
        sel = np.lexsort((idx, d2))[:k]
        return idx[sel]

    def _clamp_slack(self):
        if len(self) == 0:
            return 0.0, 0.0
        lo = min(0.0, float(self.xs.min()), float(self.ys.min()))
        hi = max(
            0.0,
            float(self.xs.max()) - self.nx * self.cell_size,
            float(self.ys.max()) - self.ny * self.cell_size,
        )
        return -lo, hi

    def _query_slow(self, qx, qy, r):
        offsets = np.zeros(qx.shape[0] + 1, dtype=np.int64)
        parts = []
        for q in range(qx.shape[0]):
            hit = np.flatnonzero((self.xs - qx[q]) ** 2 + (self.ys - qy[q]) ** 2 <= r[q] ** 2)
            parts.append(hit)
            offsets[q + 1] = offsets[q] + hit.shape[0]
        idx = np.concatenate(parts) if parts else np.zeros(0, dtype=np.int64)
        return offsets, idx.astype(np.int64)
