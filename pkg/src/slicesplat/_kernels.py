"""Compiled inner loops for rasterization and voxelization.

Every kernel evaluates Gaussian/pixel pairs through the same inlined helper
so that tiled, naive and backward paths agree bit for bit on which pairs
exist and what each pair contributes.  Parallel loops only ever write to
memory owned by the current iteration (a tile's pixels, or a primitive's
gradient slot), so results do not depend on the thread count.
"""

import math

import numba as nb
import numpy as np

_JIT = dict(cache=True, nogil=True)


@nb.njit(inline="always", **_JIT)
def _pair_weight(dx, dy, c0, c1, c2, r2):
    # Returns -1.0 for pixels outside the footprint circle.
    if dx * dx + dy * dy > r2:
        return -1.0
    power = -0.5 * (c0 * dx * dx + 2.0 * c1 * dx * dy + c2 * dy * dy)
    return math.exp(power)


@nb.njit(inline="always", **_JIT)
def _pixel_range(mu, r, spacing, pp, n):
    # Conservative index range; the circle test in _pair_weight is authoritative.
    lo = int(math.floor((mu - r) / spacing + pp)) - 1
    hi = int(math.ceil((mu + r) / spacing + pp)) + 1
    if lo < 0:
        lo = 0
    if hi > n - 1:
        hi = n - 1
    return lo, hi


@nb.njit(parallel=True, **_JIT)
def raster_forward_tiled(width, height, tile, sx, sy, ppx, ppy, mu2d, conic, alpha_t, radius,
                         tile_offsets, tile_prims, out):
    ntx = (width + tile - 1) // tile
    nty = (height + tile - 1) // tile
    for t in nb.prange(ntx * nty):
        ty = t // ntx
        tx = t - ty * ntx
        u0 = tx * tile
        v0 = ty * tile
        u1 = min(u0 + tile, width)
        v1 = min(v0 + tile, height)
        start = tile_offsets[t]
        stop = tile_offsets[t + 1]
        for v in range(v0, v1):
            y = (v - ppy) * sy
            for u in range(u0, u1):
                x = (u - ppx) * sx
                acc = 0.0
                for k in range(start, stop):
                    i = tile_prims[k]
                    r = radius[i]
                    w = _pair_weight(x - mu2d[i, 0], y - mu2d[i, 1], conic[i, 0], conic[i, 1], conic[i, 2], r * r)
                    if w >= 0.0:
                        acc += alpha_t[i] * w
                out[v, u] = acc


@nb.njit(**_JIT)
def raster_forward_naive(width, height, sx, sy, ppx, ppy, mu2d, conic, alpha_t, radius, visible, out):
    m = mu2d.shape[0]
    for v in range(height):
        y = (v - ppy) * sy
        for u in range(width):
            x = (u - ppx) * sx
            acc = 0.0
            for i in range(m):
                if not visible[i]:
                    continue
                r = radius[i]
                w = _pair_weight(x - mu2d[i, 0], y - mu2d[i, 1], conic[i, 0], conic[i, 1], conic[i, 2], r * r)
                if w >= 0.0:
                    acc += alpha_t[i] * w
            out[v, u] = acc


@nb.njit(parallel=True, **_JIT)
def raster_backward(width, height, tile, sx, sy, ppx, ppy, mu2d, conic, alpha_t, radius, visible, dL_dI,
                    g_alpha_t, g_conic, g_mu2d):
    """Per-primitive reduction of pixel gradients.

    Outputs dL/d(alpha_tilde), dL/d(conic) as (xx, xy, yy) where the xy slot
    is the gradient of *each* symmetric off-diagonal entry, and dL/d(mu_2d).
    Footprint pixels are visited tile-major, row-major within a tile.
    """
    m = mu2d.shape[0]
    for i in nb.prange(m):
        ga = 0.0
        gc0 = 0.0
        gc1 = 0.0
        gc2 = 0.0
        gmx = 0.0
        gmy = 0.0
        if visible[i]:
            r = radius[i]
            r2 = r * r
            mx = mu2d[i, 0]
            my = mu2d[i, 1]
            c0 = conic[i, 0]
            c1 = conic[i, 1]
            c2 = conic[i, 2]
            at = alpha_t[i]
            ulo, uhi = _pixel_range(mx, r, sx, ppx, width)
            vlo, vhi = _pixel_range(my, r, sy, ppy, height)
            for ty in range(vlo // tile, vhi // tile + 1):
                for tx in range(ulo // tile, uhi // tile + 1):
                    for v in range(max(vlo, ty * tile), min(vhi, ty * tile + tile - 1) + 1):
                        dy = (v - ppy) * sy - my
                        for u in range(max(ulo, tx * tile), min(uhi, tx * tile + tile - 1) + 1):
                            dx = (u - ppx) * sx - mx
                            w = _pair_weight(dx, dy, c0, c1, c2, r2)
                            if w < 0.0:
                                continue
                            g = dL_dI[v, u]
                            if g == 0.0:
                                continue
                            ga += g * w
                            gw = g * at * w
                            gc0 += -0.5 * gw * dx * dx
                            gc1 += -0.5 * gw * dx * dy
                            gc2 += -0.5 * gw * dy * dy
                            # d = p - mu_2d, so dL/dmu_2d = -dL/dd = gw * C d
                            gmx += gw * (c0 * dx + c1 * dy)
                            gmy += gw * (c1 * dx + c2 * dy)
        g_alpha_t[i] = ga
        g_conic[i, 0] = gc0
        g_conic[i, 1] = gc1
        g_conic[i, 2] = gc2
        g_mu2d[i, 0] = gmx
        g_mu2d[i, 1] = gmy


@nb.njit(inline="always", **_JIT)
def _mahalanobis(dx, dy, dz, P):
    return (P[0, 0] * dx * dx + P[1, 1] * dy * dy + P[2, 2] * dz * dz
            + 2.0 * (P[0, 1] * dx * dy + P[0, 2] * dx * dz + P[1, 2] * dy * dz))


@nb.njit(parallel=True, **_JIT)
def voxel_forward_tiled(dims, tile, origin, spacing, mu, prec, alpha, tile_offsets, tile_prims, out):
    nx, ny, nz = dims[0], dims[1], dims[2]
    ntx = (nx + tile - 1) // tile
    nty = (ny + tile - 1) // tile
    ntz = (nz + tile - 1) // tile
    for t in nb.prange(ntx * nty * ntz):
        tz = t // (ntx * nty)
        rem = t - tz * ntx * nty
        ty = rem // ntx
        tx = rem - ty * ntx
        start = tile_offsets[t]
        stop = tile_offsets[t + 1]
        for k in range(tz * tile, min(tz * tile + tile, nz)):
            z = origin[2] + k * spacing[2]
            for j in range(ty * tile, min(ty * tile + tile, ny)):
                y = origin[1] + j * spacing[1]
                for i in range(tx * tile, min(tx * tile + tile, nx)):
                    x = origin[0] + i * spacing[0]
                    acc = 0.0
                    for s in range(start, stop):
                        p = tile_prims[s]
                        m2 = _mahalanobis(x - mu[p, 0], y - mu[p, 1], z - mu[p, 2], prec[p])
                        acc += alpha[p] * math.exp(-0.5 * m2)
                    out[k, j, i] = acc


@nb.njit(parallel=True, **_JIT)
def voxel_forward_naive(dims, origin, spacing, mu, prec, alpha, out):
    nx, ny, nz = dims[0], dims[1], dims[2]
    m = mu.shape[0]
    for k in nb.prange(nz):
        z = origin[2] + k * spacing[2]
        for j in range(ny):
            y = origin[1] + j * spacing[1]
            for i in range(nx):
                x = origin[0] + i * spacing[0]
                acc = 0.0
                for p in range(m):
                    m2 = _mahalanobis(x - mu[p, 0], y - mu[p, 1], z - mu[p, 2], prec[p])
                    acc += alpha[p] * math.exp(-0.5 * m2)
                out[k, j, i] = acc


@nb.njit(parallel=True, **_JIT)
def voxel_backward(dims, tile, origin, spacing, mu, prec, alpha, tile_lo, tile_hi, dL_dV,
                   g_alpha, g_mu, g_prec):
    """Per-primitive gradients over the voxels of every tile the primitive
    was listed in (tile index boxes [tile_lo, tile_hi] inclusive)."""
    nx, ny, nz = dims[0], dims[1], dims[2]
    m = mu.shape[0]
    for p in nb.prange(m):
        ga = 0.0
        gx = 0.0
        gy = 0.0
        gz = 0.0
        g00 = 0.0
        g01 = 0.0
        g02 = 0.0
        g11 = 0.0
        g12 = 0.0
        g22 = 0.0
        P = prec[p]
        # ranges are empty when lo > hi on any axis
        for k in range(tile_lo[p, 2] * tile, min((tile_hi[p, 2] + 1) * tile, nz)):
            dz = origin[2] + k * spacing[2] - mu[p, 2]
            for j in range(tile_lo[p, 1] * tile, min((tile_hi[p, 1] + 1) * tile, ny)):
                dy = origin[1] + j * spacing[1] - mu[p, 1]
                for i in range(tile_lo[p, 0] * tile, min((tile_hi[p, 0] + 1) * tile, nx)):
                    g = dL_dV[k, j, i]
                    if g == 0.0:
                        continue
                    dx = origin[0] + i * spacing[0] - mu[p, 0]
                    e = math.exp(-0.5 * _mahalanobis(dx, dy, dz, P))
                    ga += g * e
                    gw = g * alpha[p] * e
                    # P d
                    px = P[0, 0] * dx + P[0, 1] * dy + P[0, 2] * dz
                    py = P[1, 0] * dx + P[1, 1] * dy + P[1, 2] * dz
                    pz = P[2, 0] * dx + P[2, 1] * dy + P[2, 2] * dz
                    gx += gw * px
                    gy += gw * py
                    gz += gw * pz
                    g00 += -0.5 * gw * dx * dx
                    g01 += -0.5 * gw * dx * dy
                    g02 += -0.5 * gw * dx * dz
                    g11 += -0.5 * gw * dy * dy
                    g12 += -0.5 * gw * dy * dz
                    g22 += -0.5 * gw * dz * dz
        g_alpha[p] = ga
        g_mu[p, 0] = gx
        g_mu[p, 1] = gy
        g_mu[p, 2] = gz
        g_prec[p, 0, 0] = g00
        g_prec[p, 0, 1] = g01
        g_prec[p, 0, 2] = g02
        g_prec[p, 1, 0] = g01
        g_prec[p, 1, 1] = g11
        g_prec[p, 1, 2] = g12
        g_prec[p, 2, 0] = g02
        g_prec[p, 2, 1] = g12
        g_prec[p, 2, 2] = g22


def build_tile_lists(lo: np.ndarray, hi: np.ndarray, grid: tuple[int, ...]):
    """CSR lists of primitive indices per tile from inclusive tile-index boxes.

    ``lo``/``hi`` are (M, D) integer arrays (x fastest).  Primitives with any
    ``lo > hi`` are skipped.  Within a tile, indices are ascending.
    """
    m, d = lo.shape
    ntiles = int(np.prod(grid))
    if m == 0:
        return np.zeros(ntiles + 1, np.int64), np.zeros(0, np.int64)
    ok = np.all(lo <= hi, axis=1)
    idx = np.nonzero(ok)[0]
    lo = lo[idx]
    hi = hi[idx]
    span = hi - lo + 1
    counts = np.prod(span, axis=1)
    total = int(counts.sum())
    owner = np.repeat(np.arange(len(idx)), counts)
    local = np.arange(total) - np.repeat(np.cumsum(counts) - counts, counts)
    tile_id = np.zeros(total, np.int64)
    stride = 1
    for axis in range(d):
        s = span[owner, axis]
        coord = lo[owner, axis] + local % s
        local = local // s
        tile_id += coord * stride
        stride *= grid[axis]
    prim = idx[owner]
    order = np.lexsort((prim, tile_id))
    tile_id = tile_id[order]
    prims = prim[order].astype(np.int64)
    offsets = np.zeros(ntiles + 1, np.int64)
    np.cumsum(np.bincount(tile_id, minlength=ntiles), out=offsets[1:])
    return offsets, prims
