"""Hot loops: marching-cubes cell classification, ray-parity inside test, brute-force nearest neighbors.

Each kernel exists twice: a numba ``@njit`` version and a pure-numpy version.
The public wrappers pick numba unless ``FEWSHOT_SDF_DISABLE_NUMBA=1`` is set or
numba is missing. Both paths return identical results.
"""

from __future__ import annotations

import numpy as np

from ._accel import njit, prange, use_numba
from .mc_tables import CORNERS, EDGE_AXIS, EDGE_ORIGIN, TRI_COUNT, TRI_TABLE

# ray directions for the parity test; small irrational-ratio tilts keep rays off
# mesh edges and vertices that lie on lattice-aligned planes
RAY_TILT_PRIMARY = (1.0, np.sqrt(2.0) * 1e-4, np.sqrt(3.0) * 1e-4)
RAY_TILT_SECONDARY = (-1.0, -np.sqrt(5.0) * 1e-4, np.sqrt(7.0) * 1e-4)
ON_SURFACE_TOL = 1e-12
EDGE_HIT_TOL = 1e-12


# -- marching cubes -----------------------------------------------------------------------


def _mc_edges_numpy(values: np.ndarray, iso: float) -> np.ndarray:
    r = values.shape[0] - 1
    inside = (values <= iso).astype(np.int64)
    case = np.zeros((r, r, r), dtype=np.int64)
    for c in range(8):
        ox, oy, oz = CORNERS[c]
        case |= inside[ox : ox + r, oy : oy + r, oz : oz + r] << c
    case = case.ravel()
    cells = np.flatnonzero(TRI_COUNT[case] > 0)
    if cells.size == 0:
        return np.zeros((0, 3), dtype=np.int64)
    cases = case[cells]
    ci, cj, ck = np.unravel_index(cells, (r, r, r))
    edges = TRI_TABLE[cases][:, :15].reshape(-1, 5, 3)
    valid = edges[:, :, 0] >= 0
    n1 = r + 1
    m = n1**3
    ex = ci[:, None, None] + EDGE_ORIGIN[:, 0][np.maximum(edges, 0)]
    ey = cj[:, None, None] + EDGE_ORIGIN[:, 1][np.maximum(edges, 0)]
    ez = ck[:, None, None] + EDGE_ORIGIN[:, 2][np.maximum(edges, 0)]
    gid = EDGE_AXIS[np.maximum(edges, 0)] * m + (ex * n1 + ey) * n1 + ez
    return gid[valid]


@njit(cache=True)
def _mc_edges_numba(values, iso, tri_table, tri_count, corners, edge_origin, edge_axis):
    r = values.shape[0] - 1
    n1 = r + 1
    m = n1 * n1 * n1
    total = 0
    cases = np.empty(r * r * r, dtype=np.int64)
    p = 0
    for i in range(r):
        for j in range(r):
            for k in range(r):
                c = 0
                for q in range(8):
                    if values[i + corners[q, 0], j + corners[q, 1], k + corners[q, 2]] <= iso:
                        c |= 1 << q
                cases[p] = c
                total += tri_count[c]
                p += 1
    out = np.empty((total, 3), dtype=np.int64)
    t = 0
    p = 0
    for i in range(r):
        for j in range(r):
            for k in range(r):
                c = cases[p]
                p += 1
                for s in range(tri_count[c]):
                    for v in range(3):
                        e = tri_table[c, 3 * s + v]
                        ox = i + edge_origin[e, 0]
                        oy = j + edge_origin[e, 1]
                        oz = k + edge_origin[e, 2]
                        out[t, v] = edge_axis[e] * m + (ox * n1 + oy) * n1 + oz
                    t += 1
    return out


def mc_triangle_edges(values: np.ndarray, iso: float = 0.0) -> np.ndarray:
    """Global edge ids of every triangle, in C-order of cells then table order."""
    values = np.ascontiguousarray(values, dtype=np.float64)
    if use_numba():
        return _mc_edges_numba(values, float(iso), TRI_TABLE, TRI_COUNT, CORNERS, EDGE_ORIGIN, EDGE_AXIS)
    return _mc_edges_numpy(values, float(iso))


# -- ray parity -----------------------------------------------------------------------------


def _bin_triangles(tris: np.ndarray, lo: np.ndarray, hi: np.ndarray, g: int, pad: float):
    """CSR lists of triangles overlapping each cell of a g x g grid over (y, z)."""
    span = np.maximum(hi - lo, 1e-12)
    tmin = tris[:, :, 1:].min(axis=1) - pad
    tmax = tris[:, :, 1:].max(axis=1) + pad
    b0 = np.clip(np.floor((tmin - lo) / span * g).astype(np.int64), 0, g - 1)
    b1 = np.clip(np.floor((tmax - lo) / span * g).astype(np.int64), 0, g - 1)
    counts = np.zeros(g * g, dtype=np.int64)
    ny = b1[:, 0] - b0[:, 0] + 1
    nz = b1[:, 1] - b0[:, 1] + 1
    tot = int((ny * nz).sum())
    owner = np.repeat(np.arange(len(tris)), ny * nz)
    start = np.repeat(np.cumsum(ny * nz) - ny * nz, ny * nz)
    local = np.arange(tot) - start
    by = b0[owner, 0] + local // nz[owner]
    bz = b0[owner, 1] + local % nz[owner]
    cell = by * g + bz
    order = np.argsort(cell, kind="stable")
    np.add.at(counts, cell, 1)
    offsets = np.concatenate([[0], np.cumsum(counts)])
    return offsets, owner[order]


@njit(cache=True, parallel=True)
def _parity_numba(points, tris, offsets, items, lo, hi, g, direction, on_tol, edge_tol):
    n = points.shape[0]
    inside = np.zeros(n, dtype=np.bool_)
    degenerate = np.zeros(n, dtype=np.bool_)
    dx, dy, dz = direction[0], direction[1], direction[2]
    sy = max(hi[0] - lo[0], 1e-12)
    sz = max(hi[1] - lo[1], 1e-12)
    for p in prange(n):
        px, py, pz = points[p, 0], points[p, 1], points[p, 2]
        if py < lo[0] or py > hi[0] or pz < lo[1] or pz > hi[1]:
            continue
        by = min(max(int(np.floor((py - lo[0]) / sy * g)), 0), g - 1)
        bz = min(max(int(np.floor((pz - lo[1]) / sz * g)), 0), g - 1)
        b = by * g + bz
        hits = 0
        on = False
        for q in range(offsets[b], offsets[b + 1]):
            tr = items[q]
            ax, ay, az = tris[tr, 0, 0], tris[tr, 0, 1], tris[tr, 0, 2]
            e1x, e1y, e1z = tris[tr, 1, 0] - ax, tris[tr, 1, 1] - ay, tris[tr, 1, 2] - az
            e2x, e2y, e2z = tris[tr, 2, 0] - ax, tris[tr, 2, 1] - ay, tris[tr, 2, 2] - az
            hx = dy * e2z - dz * e2y
            hy = dz * e2x - dx * e2z
            hz = dx * e2y - dy * e2x
            det = e1x * hx + e1y * hy + e1z * hz
            if abs(det) < 1e-300:
                continue
            inv = 1.0 / det
            sx, sy_, sz_ = px - ax, py - ay, pz - az
            u = (sx * hx + sy_ * hy + sz_ * hz) * inv
            if u < -edge_tol or u > 1.0 + edge_tol:
                continue
            qx = sy_ * e1z - sz_ * e1y
            qy = sz_ * e1x - sx * e1z
            qz = sx * e1y - sy_ * e1x
            v = (dx * qx + dy * qy + dz * qz) * inv
            if v < -edge_tol or u + v > 1.0 + edge_tol:
                continue
            t = (e2x * qx + e2y * qy + e2z * qz) * inv
            if abs(t) <= on_tol:
                on = True
                break
            if t < 0.0:
                continue
            if u <= edge_tol or v <= edge_tol or u + v >= 1.0 - edge_tol:
                degenerate[p] = True
            hits += 1
        if on:
            inside[p] = True
            degenerate[p] = False
        else:
            inside[p] = (hits & 1) == 1
    return inside, degenerate


def _parity_numpy(points, tris, offsets, items, lo, hi, g, direction, on_tol, edge_tol):
    n = len(points)
    inside = np.zeros(n, dtype=bool)
    degenerate = np.zeros(n, dtype=bool)
    d = np.asarray(direction)
    span = np.maximum(hi - lo, 1e-12)
    inbox = (points[:, 1] >= lo[0]) & (points[:, 1] <= hi[0]) & (points[:, 2] >= lo[1]) & (points[:, 2] <= hi[1])
    pid = np.flatnonzero(inbox)
    bins = np.clip(np.floor((points[pid, 1:] - lo) / span * g).astype(np.int64), 0, g - 1)
    bid = bins[:, 0] * g + bins[:, 1]
    for b in np.unique(bid):
        sel = pid[bid == b]
        cand = items[offsets[b] : offsets[b + 1]]
        if cand.size == 0:
            continue
        a = tris[cand, 0]
        e1 = tris[cand, 1] - a
        e2 = tris[cand, 2] - a
        h = np.cross(np.broadcast_to(d, e2.shape), e2)
        det = np.einsum("ij,ij->i", e1, h)
        ok_det = np.abs(det) >= 1e-300
        inv = np.where(ok_det, 1.0 / np.where(ok_det, det, 1.0), 0.0)
        s = points[sel][:, None, :] - a[None]
        u = np.einsum("pij,ij->pi", s, h) * inv
        q = np.cross(s, e1[None])
        v = (q @ d) * inv
        t = np.einsum("ij,pij->pi", e2, q) * inv
        hit = ok_det & (u >= -edge_tol) & (u <= 1 + edge_tol) & (v >= -edge_tol) & (u + v <= 1 + edge_tol)
        on = (hit & (np.abs(t) <= on_tol)).any(axis=1)
        fwd = hit & (t > on_tol)
        near_edge = fwd & ((u <= edge_tol) | (v <= edge_tol) | (u + v >= 1 - edge_tol))
        inside[sel] = on | (fwd.sum(axis=1) % 2 == 1)
        degenerate[sel] = near_edge.any(axis=1) & ~on
    return inside, degenerate


def ray_parity(points: np.ndarray, tris: np.ndarray, direction, grid: int = 64) -> tuple[np.ndarray, np.ndarray]:
    """Crossing parity of rays from ``points`` along ``direction`` (x-dominant) through ``tris``.

    Returns ``(inside, degenerate)``; degenerate flags rays that passed within
    ``EDGE_HIT_TOL`` (barycentric) of a triangle edge.
    """
    points = np.ascontiguousarray(points, dtype=np.float64).reshape(-1, 3)
    tris = np.ascontiguousarray(tris, dtype=np.float64).reshape(-1, 3, 3)
    if len(tris) == 0 or len(points) == 0:
        return np.zeros(len(points), dtype=bool), np.zeros(len(points), dtype=bool)
    fn = _parity_numba if use_numba() else _parity_numpy
    return fn(*parity_args(points, tris, direction, grid))


def parity_args(points: np.ndarray, tris: np.ndarray, direction, grid: int = 64) -> tuple:
    """Argument tuple shared by both parity kernels (triangles binned over (y, z))."""
    direction = np.asarray(direction, dtype=np.float64)
    reach = max(float(tris[:, :, 0].max() - points[:, 0].min()), float(points[:, 0].max() - tris[:, :, 0].min()), 0.0)
    pad = float(np.abs(direction[1:]).max()) * (reach + 1.0) + 1e-9
    lo = tris[:, :, 1:].reshape(-1, 2).min(axis=0) - pad
    hi = tris[:, :, 1:].reshape(-1, 2).max(axis=0) + pad
    offsets, items = _bin_triangles(tris, lo, hi, grid, pad)
    return points, tris, offsets, items, lo, hi, grid, direction, ON_SURFACE_TOL, EDGE_HIT_TOL


# -- nearest neighbors ------------------------------------------------------------------------


@njit(cache=True, parallel=True)
def _nn_numba(queries, ref):
    n = queries.shape[0]
    dist = np.empty(n)
    idx = np.empty(n, dtype=np.int64)
    for i in prange(n):
        best = np.inf
        bi = -1
        for j in range(ref.shape[0]):
            dx = queries[i, 0] - ref[j, 0]
            dy = queries[i, 1] - ref[j, 1]
            dz = queries[i, 2] - ref[j, 2]
            d = dx * dx + dy * dy + dz * dz
            if d < best:
                best = d
                bi = j
        dist[i] = np.sqrt(best)
        idx[i] = bi
    return dist, idx


def _nn_numpy(queries, ref, chunk=512):
    dist = np.empty(len(queries))
    idx = np.empty(len(queries), dtype=np.int64)
    for s in range(0, len(queries), chunk):
        diff = queries[s : s + chunk, None, :] - ref[None, :, :]
        d2 = (diff[..., 0] * diff[..., 0] + diff[..., 1] * diff[..., 1]) + diff[..., 2] * diff[..., 2]
        j = np.argmin(d2, axis=1)
        idx[s : s + chunk] = j
        dist[s : s + chunk] = np.sqrt(d2[np.arange(len(j)), j])
    return dist, idx


def brute_nearest(queries: np.ndarray, ref: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Exact O(n*m) nearest neighbor; first index wins ties."""
    queries = np.ascontiguousarray(queries, dtype=np.float64).reshape(-1, 3)
    ref = np.ascontiguousarray(ref, dtype=np.float64).reshape(-1, 3)
    if use_numba():
        return _nn_numba(queries, ref)
    return _nn_numpy(queries, ref)
