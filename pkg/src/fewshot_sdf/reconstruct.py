"""Dense SDF grids, marching cubes at the zero level and OBJ mesh files."""

from __future__ import annotations

import os
from dataclasses import dataclass, field

import numpy as np

from .kernels import mc_triangle_edges

_OBJ_FMT = "%.17g"


class GridEvaluationError(ValueError):
    def __init__(self, msg: str, corner: tuple[int, int, int]):
        super().__init__(msg)
        self.corner = corner


@dataclass
class ScalarGrid:
    """SDF values on the ``(R+1)^3`` corner lattice ``-1 + 2i/R`` of ``[-1, 1]^3``."""

    values: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        v = self.values
        if v.ndim != 3 or len(set(v.shape)) != 1 or v.shape[0] < 3:
            raise ValueError(f"grid values must be (R+1)^3 with R >= 2, got {v.shape}")
        if not np.all(np.isfinite(v)):
            bad = np.unravel_index(int(np.argmax(~np.isfinite(v))), v.shape)
            raise GridEvaluationError(f"non-finite grid value at corner {tuple(map(int, bad))}", tuple(map(int, bad)))

    @property
    def resolution(self) -> int:
        return self.values.shape[0] - 1

    def positions(self) -> np.ndarray:
        return lattice_points(self.resolution).reshape(self.values.shape + (3,))


def lattice_coords(r: int) -> np.ndarray:
    return -1.0 + 2.0 * np.arange(r + 1) / r


def lattice_points(r: int) -> np.ndarray:
    """All ``(R+1)^3`` corners in C order (x slowest)."""
    c = lattice_coords(r)
    gx, gy, gz = np.meshgrid(c, c, c, indexing="ij")
    return np.stack([gx.ravel(), gy.ravel(), gz.ravel()], axis=1)


def evaluate_grid(evaluator, r: int, chunk: int = 65536) -> ScalarGrid:
    """Sample ``evaluator`` (points ``(P,3)`` -> values ``(P,)``) at every lattice corner."""
    if r < 2:
        raise ValueError(f"grid resolution must be >= 2, got {r}")
    pts = lattice_points(r)
    out = np.empty(len(pts))
    for s in range(0, len(pts), chunk):
        vals = np.asarray(evaluator(pts[s : s + chunk]), dtype=np.float64).reshape(-1)
        if vals.shape[0] != min(chunk, len(pts) - s):
            raise ValueError("evaluator returned the wrong number of values")
        bad = ~np.isfinite(vals)
        if bad.any():
            corner = np.unravel_index(s + int(np.argmax(bad)), (r + 1,) * 3)
            corner = tuple(int(c) for c in corner)
            raise GridEvaluationError(f"evaluator returned a non-finite value at corner {corner}", corner)
        out[s : s + chunk] = vals
    return ScalarGrid(out.reshape((r + 1,) * 3))


@dataclass
class TriangleMesh:
    vertices: np.ndarray = field(default_factory=lambda: np.zeros((0, 3)))
    triangles: np.ndarray = field(default_factory=lambda: np.zeros((0, 3), dtype=np.int64))

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        self.triangles = np.asarray(self.triangles, dtype=np.int64).reshape(-1, 3)
        if self.triangles.size and (self.triangles.min() < 0 or self.triangles.max() >= len(self.vertices)):
            raise ValueError("triangle index out of range")

    @property
    def n_triangles(self) -> int:
        return len(self.triangles)

    def corners(self) -> np.ndarray:
        """Triangle corner positions ``(T, 3, 3)``."""
        return self.vertices[self.triangles]

    def areas(self) -> np.ndarray:
        c = self.corners()
        return 0.5 * np.linalg.norm(np.cross(c[:, 1] - c[:, 0], c[:, 2] - c[:, 0]), axis=1)

    def signed_volume(self) -> float:
        c = self.corners()
        return float(np.einsum("ij,ij->i", c[:, 0], np.cross(c[:, 1], c[:, 2])).sum() / 6.0)

    def edge_use_counts(self) -> dict[tuple[int, int], int]:
        """Number of triangles using each undirected edge."""
        e = np.concatenate([self.triangles[:, [0, 1]], self.triangles[:, [1, 2]], self.triangles[:, [2, 0]]])
        e = np.sort(e, axis=1)
        keys, counts = np.unique(e, axis=0, return_counts=True)
        return {(int(a), int(b)): int(c) for (a, b), c in zip(keys, counts)}

    def is_watertight(self) -> bool:
        """Every edge shared by exactly two triangles with opposite directions."""
        if not len(self.triangles):
            return False
        t = self.triangles
        d = np.concatenate([t[:, [0, 1]], t[:, [1, 2]], t[:, [2, 0]]])
        und = np.sort(d, axis=1)
        _, counts = np.unique(und, axis=0, return_counts=True)
        if np.any(counts != 2):
            return False
        _, dcounts = np.unique(d, axis=0, return_counts=True)
        return bool(np.all(dcounts == 1))


def marching_cubes(grid: ScalarGrid, iso: float = 0.0) -> TriangleMesh:
    """Zero-level (or ``iso``) surface; corners ``<= iso`` count as inside.

    Vertices are keyed by global grid-edge id so neighboring cells share them;
    normals (counter-clockwise winding) point toward values above ``iso``.
    """
    if not isinstance(grid, ScalarGrid):
        grid = ScalarGrid(grid)
    v = grid.values
    r = grid.resolution
    n1 = r + 1
    m = n1**3
    tri_edges = mc_triangle_edges(v, iso)
    if len(tri_edges) == 0:
        return TriangleMesh()
    ids, inv = np.unique(tri_edges.ravel(), return_inverse=True)
    axis = ids // m
    rest = ids % m
    i0 = np.stack(np.unravel_index(rest, (n1, n1, n1)), axis=1)
    i1 = i0 + np.eye(3, dtype=np.int64)[axis]
    flat = v.ravel()
    s1 = flat[rest]
    s2 = flat[np.ravel_multi_index(i1.T, (n1, n1, n1))]
    t = (iso - s1) / (s2 - s1)
    coords = lattice_coords(r)
    p1 = coords[i0]
    p2 = coords[i1]
    verts = p1 + t[:, None] * (p2 - p1)
    # corners exactly at iso put several edge vertices on the same point; weld them
    verts, weld = np.unique(verts, axis=0, return_inverse=True)
    tris = weld.reshape(-1)[inv].reshape(-1, 3)
    tris = tris[(tris[:, 0] != tris[:, 1]) & (tris[:, 1] != tris[:, 2]) & (tris[:, 0] != tris[:, 2])]
    c = verts[tris]
    area2 = np.linalg.norm(np.cross(c[:, 1] - c[:, 0], c[:, 2] - c[:, 0]), axis=1)
    tris = tris[area2 > 0.0]
    used, remap = np.unique(tris.ravel(), return_inverse=True)
    return TriangleMesh(verts[used], remap.reshape(-1, 3))


def export_mesh(mesh: TriangleMesh, path) -> None:
    """Wavefront OBJ: ``v`` lines then 1-based ``f`` lines, 17 significant digits."""
    lines = ["v " + " ".join(_OBJ_FMT % x for x in row) for row in mesh.vertices]
    lines += ["f %d %d %d" % tuple(t + 1) for t in mesh.triangles]
    try:
        with open(path, "w", encoding="ascii", newline="\n") as f:
            f.write("\n".join(lines) + ("\n" if lines else ""))
    except OSError as exc:
        raise OSError(f"cannot write mesh to {os.fspath(path)}: {exc}") from exc


def import_mesh(path) -> TriangleMesh:
    verts, tris = [], []
    try:
        with open(path, encoding="ascii") as f:
            for line in f:
                parts = line.split()
                if not parts:
                    continue
                if parts[0] == "v":
                    verts.append([float(x) for x in parts[1:4]])
                elif parts[0] == "f":
                    tris.append([int(x.split("/")[0]) - 1 for x in parts[1:4]])
    except OSError as exc:
        raise OSError(f"cannot read mesh from {os.fspath(path)}: {exc}") from exc
    return TriangleMesh(np.array(verts).reshape(-1, 3), np.array(tris, dtype=np.int64).reshape(-1, 3))
