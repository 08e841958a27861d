"""Hot numeric kernels.

Each kernel has a loop-style version compiled with numba and a vectorised
numpy version. The module-level names dispatch on ``_accel.USE_NUMBA``; the
``*_nb`` / ``*_np`` names are always importable so tests and the benchmark can
compare the two paths directly.
"""

import math

import numpy as np

from . import _accel
from ._accel import njit

NORM_EPS = 1e-8
LEAK = 0.1  # negative-side slope of the rectifier


# ---------------------------------------------------------------------------
# scene-signature blending
# ---------------------------------------------------------------------------


@njit
def blend_signatures_nb(xs, ys, hs, cell_lookup, sigs, cell_size, sigma_d, sigma_a, radius_cells):
    n = xs.shape[0]
    nx, ny = cell_lookup.shape
    n_sec = sigs.shape[1]
    dim = sigs.shape[2]
    sec_width = 2.0 * math.pi / n_sec
    out = np.zeros((n, dim))
    wsum = np.zeros(n)
    ang_w = np.zeros(n_sec)
    inv2d = 0.5 / (sigma_d * sigma_d)
    inv2a = 0.5 / (sigma_a * sigma_a)
    for i in range(n):
        for s in range(n_sec):
            diff = abs(hs[i] - s * sec_width) % (2.0 * math.pi)
            if diff > math.pi:
                diff = 2.0 * math.pi - diff
            ang_w[s] = math.exp(-diff * diff * inv2a)
        cx = int(math.floor(xs[i] / cell_size))
        cy = int(math.floor(ys[i] / cell_size))
        for ix in range(cx - radius_cells, cx + radius_cells + 1):
            if ix < 0 or ix >= nx:
                continue
            for iy in range(cy - radius_cells, cy + radius_cells + 1):
                if iy < 0 or iy >= ny:
                    continue
                c = cell_lookup[ix, iy]
                if c < 0:
                    continue
                dx = (ix + 0.5) * cell_size - xs[i]
                dy = (iy + 0.5) * cell_size - ys[i]
                wd = math.exp(-(dx * dx + dy * dy) * inv2d)
                for s in range(n_sec):
                    w = wd * ang_w[s]
                    if w < 1e-12:
                        continue
                    wsum[i] += w
                    for k in range(dim):
                        out[i, k] += w * sigs[c, s, k]
    return out, wsum


def blend_signatures_np(xs, ys, hs, cell_lookup, sigs, cell_size, sigma_d, sigma_a, radius_cells, chunk=2048):
    n = xs.shape[0]
    nx, ny = cell_lookup.shape
    n_sec, dim = sigs.shape[1], sigs.shape[2]
    out = np.zeros((n, dim))
    wsum = np.zeros(n)
    centers = np.arange(n_sec) * (2.0 * np.pi / n_sec)
    for lo in range(0, n, chunk):
        sl = slice(lo, min(lo + chunk, n))
        x, y, h = xs[sl], ys[sl], hs[sl]
        diff = np.abs(h[:, None] - centers[None, :]) % (2.0 * np.pi)
        diff = np.minimum(diff, 2.0 * np.pi - diff)
        ang_w = np.exp(-0.5 * diff**2 / sigma_a**2)
        cx = np.floor(x / cell_size).astype(np.int64)
        cy = np.floor(y / cell_size).astype(np.int64)
        for ox in range(-radius_cells, radius_cells + 1):
            for oy in range(-radius_cells, radius_cells + 1):
                ix, iy = cx + ox, cy + oy
                ok = (ix >= 0) & (ix < nx) & (iy >= 0) & (iy < ny)
                c = np.full(x.shape[0], -1, dtype=np.int64)
                c[ok] = cell_lookup[ix[ok], iy[ok]]
                ok &= c >= 0
                if not ok.any():
                    continue
                d2 = ((ix + 0.5) * cell_size - x) ** 2 + ((iy + 0.5) * cell_size - y) ** 2
                w = np.exp(-0.5 * d2 / sigma_d**2)[:, None] * ang_w
                w = np.where(w < 1e-12, 0.0, w)
                w[~ok] = 0.0
                rows = np.flatnonzero(ok)
                out[lo + rows] += np.einsum("ns,nsd->nd", w[rows], sigs[c[rows]])
                wsum[lo + rows] += w[rows].sum(axis=1)
    return out, wsum


# ---------------------------------------------------------------------------
# uniform grid radius queries
# ---------------------------------------------------------------------------


@njit
def radius_query_nb(px, py, order, cell_start, nx, ny, cell_size, qx, qy, r):
    nq = qx.shape[0]
    offsets = np.zeros(nq + 1, dtype=np.int64)
    for pass_ in range(2):
        if pass_ == 1:
            idx = np.empty(offsets[nq], dtype=np.int64)
        for q in range(nq):
            rr = r[q]
            r2 = rr * rr
            ix0 = max(int(math.floor((qx[q] - rr) / cell_size)), 0)
            ix1 = min(int(math.floor((qx[q] + rr) / cell_size)), nx - 1)
            iy0 = max(int(math.floor((qy[q] - rr) / cell_size)), 0)
            iy1 = min(int(math.floor((qy[q] + rr) / cell_size)), ny - 1)
            k = 0
            for ix in range(ix0, ix1 + 1):
                if iy0 > iy1:
                    break
                a = cell_start[ix * ny + iy0]
                b = cell_start[ix * ny + iy1 + 1]
                for m in range(a, b):
                    j = order[m]
                    dx = px[j] - qx[q]
                    dy = py[j] - qy[q]
                    if dx * dx + dy * dy <= r2:
                        if pass_ == 1:
                            idx[offsets[q] + k] = j
                        k += 1
            if pass_ == 0:
                offsets[q + 1] = offsets[q] + k
    return offsets, idx


def radius_query_np(px, py, order, cell_start, nx, ny, cell_size, qx, qy, r):
    parts = []
    offsets = np.zeros(qx.shape[0] + 1, dtype=np.int64)
    for q in range(qx.shape[0]):
        rr = r[q]
        ix0 = max(int(np.floor((qx[q] - rr) / cell_size)), 0)
        ix1 = min(int(np.floor((qx[q] + rr) / cell_size)), nx - 1)
        iy0 = max(int(np.floor((qy[q] - rr) / cell_size)), 0)
        iy1 = min(int(np.floor((qy[q] + rr) / cell_size)), ny - 1)
        if ix0 > ix1 or iy0 > iy1:
            offsets[q + 1] = offsets[q]
            continue
        cols = np.arange(ix0, ix1 + 1) * ny
        a = cell_start[cols + iy0]
        b = cell_start[cols + iy1 + 1]
        lengths = b - a
        total = int(lengths.sum())
        if total == 0:
            offsets[q + 1] = offsets[q]
            continue
        pos = np.repeat(a - np.concatenate(([0], np.cumsum(lengths)[:-1])), lengths) + np.arange(total)
        cand = order[pos]
        keep = cand[(px[cand] - qx[q]) ** 2 + (py[cand] - qy[q]) ** 2 <= rr * rr]
        parts.append(keep)
        offsets[q + 1] = offsets[q] + keep.shape[0]
    idx = np.concatenate(parts) if parts else np.zeros(0, dtype=np.int64)
    return offsets, idx.astype(np.int64)


@njit
def close_pairs_nb(px, py, hs, rides, order, cell_start, nx, ny, cell_size, radius, max_angle, distinct_rides):
    n = px.shape[0]
    r2 = radius * radius
    count = 0
    for pass_ in range(2):
        if pass_ == 1:
            ii = np.empty(count, dtype=np.int64)
            jj = np.empty(count, dtype=np.int64)
            count = 0
        for i in range(n):
            ix0 = max(int(math.floor((px[i] - radius) / cell_size)), 0)
            ix1 = min(int(math.floor((px[i] + radius) / cell_size)), nx - 1)
            iy0 = max(int(math.floor((py[i] - radius) / cell_size)), 0)
            iy1 = min(int(math.floor((py[i] + radius) / cell_size)), ny - 1)
            for ix in range(ix0, ix1 + 1):
                if iy0 > iy1:
                    break
                a = cell_start[ix * ny + iy0]
                b = cell_start[ix * ny + iy1 + 1]
                for m in range(a, b):
                    j = order[m]
                    if j <= i:
                        continue
                    if distinct_rides and rides[i] == rides[j]:
                        continue
                    dx = px[j] - px[i]
                    dy = py[j] - py[i]
                    if dx * dx + dy * dy > r2:
                        continue
                    diff = abs(hs[i] - hs[j]) % (2.0 * math.pi)
                    if diff > math.pi:
                        diff = 2.0 * math.pi - diff
                    if diff > max_angle:
                        continue
                    if pass_ == 1:
                        ii[count] = i
                        jj[count] = j
                    count += 1
    return ii, jj


def close_pairs_np(px, py, hs, rides, order, cell_start, nx, ny, cell_size, radius, max_angle, distinct_rides):
    n = px.shape[0]
    offsets, idx = radius_query_np(px, py, order, cell_start, nx, ny, cell_size, px, py, np.full(n, float(radius)))
    ii = np.repeat(np.arange(n), np.diff(offsets))
    jj = idx
    keep = jj > ii
    if distinct_rides:
        keep &= rides[ii] != rides[jj]
    diff = np.abs(hs[ii] - hs[jj]) % (2.0 * np.pi)
    diff = np.minimum(diff, 2.0 * np.pi - diff)
    keep &= diff <= max_angle
    return ii[keep].astype(np.int64), jj[keep].astype(np.int64)


# ---------------------------------------------------------------------------
# embedding MLP: batched triplet loss and analytic gradient
# ---------------------------------------------------------------------------


def _triplet_step(W1, b1, W2, b2, W3, b3, xa, xp, xn):
    B = xa.shape[0]
    X = np.concatenate((xa, xp, xn))
    h1 = X @ W1 + b1
    s1 = np.where(h1 > 0.0, 1.0, LEAK)
    a1 = h1 * s1
    h2 = a1 @ W2 + b2
    s2 = np.where(h2 > 0.0, 1.0, LEAK)
    a2 = h2 * s2
    u = a2 @ W3 + b3
    nrm = np.sqrt(np.sum(u * u, axis=1))
    den = np.where(nrm < NORM_EPS, nrm + NORM_EPS, nrm)
    z = u / den.reshape(-1, 1)

    za, zp, zn = z[:B], z[B : 2 * B], z[2 * B :]
    ep = za - zp
    en = za - zn
    dp = np.sqrt(np.sum(ep * ep, axis=1))
    dn = np.sqrt(np.sum(en * en, axis=1))
    m = dp - dn
    loss = np.maximum(m, 0.0) + np.log1p(np.exp(-np.abs(m)))
    sig = np.where(m >= 0.0, 1.0 / (1.0 + np.exp(-m)), np.exp(m) / (1.0 + np.exp(m)))

    # d(mean loss)/dD_p = sig/B, d/dD_n = -sig/B; unit-direction subgradient 0 at D = 0
    gp = (sig / B) / np.where(dp > 0.0, dp, 1.0)
    gp = np.where(dp > 0.0, gp, 0.0).reshape(-1, 1) * ep
    gn = (-sig / B) / np.where(dn > 0.0, dn, 1.0)
    gn = np.where(dn > 0.0, gn, 0.0).reshape(-1, 1) * en
    gz = np.concatenate((gp + gn, -gp, -gn))

    # through the (guarded) L2 normalisation
    proj = np.sum(u * gz, axis=1)
    safe = np.where(nrm > 0.0, nrm, 1.0)
    coef = np.where(nrm > 0.0, proj / (safe * den * den), 0.0)
    gu = gz / den.reshape(-1, 1) - u * coef.reshape(-1, 1)

    gW3 = a2.T @ gu
    gb3 = np.sum(gu, axis=0)
    gh2 = (gu @ W3.T) * s2
    gW2 = a1.T @ gh2
    gb2 = np.sum(gh2, axis=0)
    gh1 = (gh2 @ W2.T) * s1
    gW1 = X.T @ gh1
    gb1 = np.sum(gh1, axis=0)
    return loss, dp, dn, gW1, gb1, gW2, gb2, gW3, gb3


triplet_step_np = _triplet_step
triplet_step_nb = njit(_triplet_step)


def _embed_batch(W1, b1, W2, b2, W3, b3, X):
    h1 = X @ W1 + b1
    a1 = np.where(h1 > 0.0, h1, LEAK * h1)
    h2 = a1 @ W2 + b2
    a2 = np.where(h2 > 0.0, h2, LEAK * h2)
    u = a2 @ W3 + b3
    nrm = np.sqrt(np.sum(u * u, axis=1))
    den = np.where(nrm < NORM_EPS, nrm + NORM_EPS, nrm)
    return u / den.reshape(-1, 1)


embed_batch_np = _embed_batch
embed_batch_nb = njit(_embed_batch)


# ---------------------------------------------------------------------------
# dispatch
# ---------------------------------------------------------------------------

IMPLEMENTATIONS = {
    "blend_signatures": (blend_signatures_nb, blend_signatures_np),
    "radius_query": (radius_query_nb, radius_query_np),
    "close_pairs": (close_pairs_nb, close_pairs_np),
    "triplet_step": (triplet_step_nb, triplet_step_np),
    "embed_batch": (embed_batch_nb, embed_batch_np),
}


def get(name: str, backend: str | None = None):
    """Return the kernel ``name`` for ``backend`` ('numba' | 'numpy' | None=active)."""
    nb, npf = IMPLEMENTATIONS[name]
    backend = backend or _accel.backend()
    if backend == "numba":
        if not _accel.HAVE_NUMBA:
            raise RuntimeError("numba backend requested but numba is not installed")
        return nb
    if backend == "numpy":
        return npf
    raise ValueError(f"unknown backend {backend!r}")


def blend_signatures(*args):
    return get("blend_signatures")(*args)


def radius_query(*args):
    return get("radius_query")(*args)


def close_pairs(*args):
    return get("close_pairs")(*args)


def triplet_step(*args):
    return get("triplet_step")(*args)


def embed_batch(*args):
    return get("embed_batch")(*args)
