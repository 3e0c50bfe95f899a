"""Closed triangle meshes with known geometry for metric oracles."""

import itertools

import numpy as np

from fewshot_sdf.reconstruct import TriangleMesh


def box_mesh(lo, hi) -> TriangleMesh:
    """Axis-aligned box as 12 outward-oriented triangles."""
    lo, hi = np.asarray(lo, float), np.asarray(hi, float)
    verts = np.array([[(lo, hi)[b][k] for k, b in enumerate(bits)] for bits in itertools.product((0, 1), repeat=3)])
    center = 0.5 * (lo + hi)
    tris = []
    for axis in range(3):
        u, v = [a for a in range(3) if a != axis]
        for side in (0, 1):
            quad = []
            for bu, bv in ((0, 0), (1, 0), (1, 1), (0, 1)):
                bits = [0, 0, 0]
                bits[axis], bits[u], bits[v] = side, bu, bv
                quad.append(4 * bits[0] + 2 * bits[1] + bits[2])
            for t in ((quad[0], quad[1], quad[2]), (quad[0], quad[2], quad[3])):
                p = verts[list(t)]
                n = np.cross(p[1] - p[0], p[2] - p[0])
                tris.append(t if n @ (p.mean(axis=0) - center) > 0 else t[::-1])
    return TriangleMesh(verts, tris)


def tetra_mesh() -> TriangleMesh:
    verts = np.array([[0.0, 0, 0], [1, 0, 0], [0, 1, 0], [0, 0, 1]])
    return TriangleMesh(verts, [[0, 2, 1], [0, 1, 3], [0, 3, 2], [1, 2, 3]])
