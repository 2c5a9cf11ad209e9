"""Hot per-voxel kernels: interpolation gathers and voxelwise GMM synthesis.

Every kernel exists as a pure-numpy implementation and (when available) a
numba-jitted one.  ``nsf.backend`` picks the active set; both sets are kept
importable so the tests and the benchmark can compare them directly.

Coordinate conventions shared by all gathers:
  * coordinates are in voxel index units of ``data``;
  * ``clamp=True``  -> coordinates are clipped to the valid range, so the
    result is an interpolation of edge values (weights always sum to 1);
  * ``clamp=False`` -> grid corners falling outside ``data`` contribute the
    ``fill`` value, fading smoothly to ``fill`` away from the field of view;
  * nearest-neighbor rounding resolves half-distance ties to the LOWER index
    (matches a brute-force argmin over voxel centers).
"""

import numpy as np

from .backend import ACTIVE_BACKEND

# ---------------------------------------------------------------------------
# numpy implementations
# ---------------------------------------------------------------------------


def _safe_coords(c, n):
    # keep int casts overflow-free; everything beyond [-2, n+1] is fully
    # outside and behaves identically to a point at the clip limit
    return np.clip(c, -2.0, n + 1.0)


def _trilinear_gather_numpy(data, xs, ys, zs, fill, clamp):
    nx, ny, nz = data.shape
    data = data.astype(np.float64, copy=False)
    if clamp:
        xs = np.clip(xs, 0.0, nx - 1.0)
        ys = np.clip(ys, 0.0, ny - 1.0)
        zs = np.clip(zs, 0.0, nz - 1.0)
    else:
        xs = _safe_coords(xs, nx)
        ys = _safe_coords(ys, ny)
        zs = _safe_coords(zs, nz)

    x0 = np.floor(xs)
    y0 = np.floor(ys)
    z0 = np.floor(zs)
    fx = xs - x0
    fy = ys - y0
    fz = zs - z0
    x0 = x0.astype(np.int64)
    y0 = y0.astype(np.int64)
    z0 = z0.astype(np.int64)
    x1 = x0 + 1
    y1 = y0 + 1
    z1 = z0 + 1

    def corner(ix, iy, iz):
        if clamp:
            return data[
                np.clip(ix, 0, nx - 1), np.clip(iy, 0, ny - 1), np.clip(iz, 0, nz - 1)
            ]
        inside = (
            (ix >= 0) & (ix < nx) & (iy >= 0) & (iy < ny) & (iz >= 0) & (iz < nz)
        )
        vals = data[
            np.clip(ix, 0, nx - 1), np.clip(iy, 0, ny - 1), np.clip(iz, 0, nz - 1)
        ]
        return np.where(inside, vals, fill)

    c000 = corner(x0, y0, z0)
    c100 = corner(x1, y0, z0)
    c010 = corner(x0, y1, z0)
    c110 = corner(x1, y1, z0)
    c001 = corner(x0, y0, z1)
    c101 = corner(x1, y0, z1)
    c011 = corner(x0, y1, z1)
    c111 = corner(x1, y1, z1)

    c00 = c000 * (1.0 - fx) + c100 * fx
    c10 = c010 * (1.0 - fx) + c110 * fx
    c01 = c001 * (1.0 - fx) + c101 * fx
    c11 = c011 * (1.0 - fx) + c111 * fx
    c0 = c00 * (1.0 - fy) + c10 * fy
    c1 = c01 * (1.0 - fy) + c11 * fy
    return c0 * (1.0 - fz) + c1 * fz


def _nearest_gather_numpy(data, xs, ys, zs, fill, clamp):
    nx, ny, nz = data.shape
    xs = _safe_coords(xs, nx)
    ys = _safe_coords(ys, ny)
    zs = _safe_coords(zs, nz)
    # ceil(c - 0.5): round-half-down, ties go to the lower index
    ix = np.ceil(xs - 0.5).astype(np.int64)
    iy = np.ceil(ys - 0.5).astype(np.int64)
    iz = np.ceil(zs - 0.5).astype(np.int64)
    if clamp:
        return data[
            np.clip(ix, 0, nx - 1), np.clip(iy, 0, ny - 1), np.clip(iz, 0, nz - 1)
        ]
    inside = (ix >= 0) & (ix < nx) & (iy >= 0) & (iy < ny) & (iz >= 0) & (iz < nz)
    vals = data[
        np.clip(ix, 0, nx - 1), np.clip(iy, 0, ny - 1), np.clip(iz, 0, nz - 1)
    ]
    return np.where(inside, vals, np.asarray(fill, dtype=data.dtype))


def _gmm_synthesize_numpy(channel_idx, means, stds, noise):
    out = means[channel_idx] + stds[channel_idx] * noise
    np.maximum(out, 0.0, out=out)
    return out


# ---------------------------------------------------------------------------
# numba implementations
# ---------------------------------------------------------------------------

_HAVE_NUMBA = False
try:
    from numba import njit

    _HAVE_NUMBA = True
except ImportError:  # pragma: no cover - exercised only without numba
    pass

if _HAVE_NUMBA:

    @njit(cache=True, nogil=True)
    def _trilinear_gather_numba(data, xs, ys, zs, fill, clamp):
        nx, ny, nz = data.shape
        n = xs.shape[0]
        out = np.empty(n, dtype=np.float64)
        for i in range(n):
            x = xs[i]
            y = ys[i]
            z = zs[i]
            if clamp:
                x = min(max(x, 0.0), nx - 1.0)
                y = min(max(y, 0.0), ny - 1.0)
                z = min(max(z, 0.0), nz - 1.0)
            else:
                x = min(max(x, -2.0), nx + 1.0)
                y = min(max(y, -2.0), ny + 1.0)
                z = min(max(z, -2.0), nz + 1.0)
            x0 = int(np.floor(x))
            y0 = int(np.floor(y))
            z0 = int(np.floor(z))
            fx = x - x0
            fy = y - y0
            fz = z - z0

            c000 = fill
            c100 = fill
            c010 = fill
            c110 = fill
            c001 = fill
            c101 = fill
            c011 = fill
            c111 = fill
            for dx in range(2):
                ix = x0 + dx
                jx = min(max(ix, 0), nx - 1)
                ok_x = clamp or (0 <= ix < nx)
                for dy in range(2):
                    iy = y0 + dy
                    jy = min(max(iy, 0), ny - 1)
                    ok_y = clamp or (0 <= iy < ny)
                    for dz in range(2):
                        iz = z0 + dz
                        jz = min(max(iz, 0), nz - 1)
                        if ok_x and ok_y and (clamp or (0 <= iz < nz)):
                            v = data[jx, jy, jz]
                        else:
                            v = fill
                        if dx == 0 and dy == 0 and dz == 0:
                            c000 = v
                        elif dx == 1 and dy == 0 and dz == 0:
                            c100 = v
                        elif dx == 0 and dy == 1 and dz == 0:
                            c010 = v
                        elif dx == 1 and dy == 1 and dz == 0:
                            c110 = v
                        elif dx == 0 and dy == 0 and dz == 1:
                            c001 = v
                        elif dx == 1 and dy == 0 and dz == 1:
                            c101 = v
                        elif dx == 0 and dy == 1 and dz == 1:
                            c011 = v
                        else:
                            c111 = v

            c00 = c000 * (1.0 - fx) + c100 * fx
            c10 = c010 * (1.0 - fx) + c110 * fx
            c01 = c001 * (1.0 - fx) + c101 * fx
            c11 = c011 * (1.0 - fx) + c111 * fx
            c0 = c00 * (1.0 - fy) + c10 * fy
            c1 = c01 * (1.0 - fy) + c11 * fy
            out[i] = c0 * (1.0 - fz) + c1 * fz
        return out

    @njit(cache=True, nogil=True)
    def _nearest_gather_numba(data, xs, ys, zs, fill, clamp):
        nx, ny, nz = data.shape
        n = xs.shape[0]
        out = np.empty(n, dtype=data.dtype)
        for i in range(n):
            x = min(max(xs[i], -2.0), nx + 1.0)
            y = min(max(ys[i], -2.0), ny + 1.0)
            z = min(max(zs[i], -2.0), nz + 1.0)
            ix = int(np.ceil(x - 0.5))
            iy = int(np.ceil(y - 0.5))
            iz = int(np.ceil(z - 0.5))
            if clamp:
                ix = min(max(ix, 0), nx - 1)
                iy = min(max(iy, 0), ny - 1)
                iz = min(max(iz, 0), nz - 1)
                out[i] = data[ix, iy, iz]
            elif 0 <= ix < nx and 0 <= iy < ny and 0 <= iz < nz:
                out[i] = data[ix, iy, iz]
            else:
                out[i] = fill
        return out

    @njit(cache=True, nogil=True)
    def _gmm_synthesize_numba(channel_idx, means, stds, noise):
        n = channel_idx.shape[0]
        out = np.empty(n, dtype=np.float64)
        for i in range(n):
            c = channel_idx[i]
            v = means[c] + stds[c] * noise[i]
            out[i] = v if v > 0.0 else 0.0
        return out


IMPLEMENTATIONS = {
    "numpy": {
        "trilinear_gather": _trilinear_gather_numpy,
        "nearest_gather": _nearest_gather_numpy,
        "gmm_synthesize": _gmm_synthesize_numpy,
    }
}
if _HAVE_NUMBA:
    IMPLEMENTATIONS["numba"] = {
        "trilinear_gather": _trilinear_gather_numba,
        "nearest_gather": _nearest_gather_numba,
        "gmm_synthesize": _gmm_synthesize_numba,
    }

_active = IMPLEMENTATIONS[ACTIVE_BACKEND]
trilinear_gather = _active["trilinear_gather"]
nearest_gather = _active["nearest_gather"]
gmm_synthesize = _active["gmm_synthesize"]
