"""Marching-cubes case tables, generated rather than transcribed.

Corner ``c`` of a cell sits at offset ``(c & 1, (c >> 1) & 1, (c >> 2) & 1)``.
A corner is *inside* when its value is ``<= iso``. On every cube face the
crossing segments are chosen by one rule that depends only on that face's four
corners: each maximal run of consecutive inside corners (walking around the
face) is cut off by one segment. Two cells sharing a face therefore always
agree on the face's segments, which makes the extracted surface crack-free.
The segments of a cell close into loops. Each loop is triangulated without any
diagonal that lies in a cube face (such a triangle would be duplicated by the
neighbouring cell) and oriented so triangle normals (right-hand rule) point
toward the outside (values > iso).
"""

from __future__ import annotations

import numpy as np

CORNERS = np.array([[c & 1, (c >> 1) & 1, (c >> 2) & 1] for c in range(8)], dtype=np.int64)

# edges as corner pairs; each edge runs along one axis from its lower corner
EDGES = np.array(
    [(a, b) for a in range(8) for b in range(a + 1, 8)
     if np.abs(CORNERS[a] - CORNERS[b]).sum() == 1],
    dtype=np.int64,
)
EDGE_AXIS = np.array([int(np.argmax(CORNERS[b] - CORNERS[a])) for a, b in EDGES], dtype=np.int64)
EDGE_ORIGIN = np.array([CORNERS[a] for a, _ in EDGES], dtype=np.int64)


def _edge_index(a: int, b: int) -> int:
    a, b = min(a, b), max(a, b)
    for i, (p, q) in enumerate(EDGES):
        if p == a and q == b:
            return i
    raise KeyError((a, b))


def _faces() -> list[list[int]]:
    """Each face as 4 corners, counter-clockwise seen from outside the cube."""
    faces = []
    for axis in range(3):
        for side in (0, 1):
            cs = [c for c in range(8) if CORNERS[c][axis] == side]
            u, v = [a for a in range(3) if a != axis]
            order = sorted(cs, key=lambda c: np.arctan2(CORNERS[c][v] - 0.5, CORNERS[c][u] - 0.5))
            normal = np.zeros(3)
            normal[axis] = 1.0 if side else -1.0
            eu, ev = np.eye(3)[u], np.eye(3)[v]
            if np.cross(eu, ev) @ normal < 0:
                order = order[::-1]
            faces.append(order)
    return faces


FACES = _faces()


def _segments(inside: list[bool]) -> list[tuple[int, int]]:
    """Directed crossing segments, one per run of inside corners on each face."""
    segs = []
    for face in FACES:
        flags = [inside[c] for c in face]
        if all(flags) or not any(flags):
            continue
        start = next(i for i in range(4) if not flags[i])
        i = 1
        while i < 4:
            pos = (start + i) % 4
            if not flags[pos]:
                i += 1
                continue
            j = i
            while j + 1 < 4 and flags[(start + j + 1) % 4]:
                j += 1
            first, last = pos, (start + j) % 4
            e_in = _edge_index(face[(first - 1) % 4], face[first])
            e_out = _edge_index(face[last], face[(last + 1) % 4])
            segs.append((e_in, e_out))
            i = j + 1
    return segs


def _loops(segs: list[tuple[int, int]]) -> list[list[int]]:
    succ: dict[int, int] = {}
    for a, b in segs:
        if a in succ:
            raise AssertionError("edge with two successors")
        succ[a] = b
    seen: set[int] = set()
    loops = []
    for start in sorted(succ):
        if start in seen:
            continue
        loop, cur = [], start
        while cur not in seen:
            seen.add(cur)
            loop.append(cur)
            cur = succ[cur]
        if cur != start:
            raise AssertionError("open crossing chain")
        loops.append(loop)
    return loops


def _edge_faces(e: int) -> set[int]:
    a, b = EDGES[e]
    return {i for i, f in enumerate(FACES) if a in f and b in f}


def _triangulations(poly: list[int]):
    """All triangulations of a convex polygon given by its vertex list, fans first."""
    if len(poly) == 3:
        yield [tuple(poly)]
        return
    # the triangle on the edge (poly[0], poly[1]) with apex poly[k]
    for k in range(2, len(poly)):
        left, right = poly[1 : k + 1], [poly[0]] + poly[k:]
        for tl in _triangulations(left) if len(left) >= 3 else [[]]:
            for tr in _triangulations(right) if len(right) >= 3 else [[]]:
                yield [(poly[0], poly[1], poly[k])] + tl + tr


def _triangulate(loop: list[int]) -> list[tuple[int, int, int]]:
    """Triangulate a crossing loop without a diagonal lying in a cube face.

    A diagonal joining two edges of the same face would produce a triangle in
    that face, which the neighbouring cell emits too (with opposite winding).
    Rotations of the fan are tried first so simple cases keep the usual fan.
    """
    n = len(loop)
    consecutive = {frozenset((loop[i], loop[(i + 1) % n])) for i in range(n)}

    def ok(tris) -> bool:
        for t in tris:
            for a, b in ((t[0], t[1]), (t[1], t[2]), (t[2], t[0])):
                if frozenset((a, b)) not in consecutive and _edge_faces(a) & _edge_faces(b):
                    return False
        return True

    for r in range(n):
        rot = loop[r:] + loop[:r]
        fan = [(rot[0], rot[i], rot[i + 1]) for i in range(1, n - 1)]
        if ok(fan):
            return fan
    for tris in _triangulations(loop):
        if ok(tris):
            return tris
    raise AssertionError(f"no face-free triangulation of loop {loop}")


def build_tables() -> tuple[np.ndarray, np.ndarray]:
    """``(tri_table, tri_count)``: per case up to 5 triangles as edge-index triples, -1 padded."""
    tri = -np.ones((256, 16), dtype=np.int64)
    count = np.zeros(256, dtype=np.int64)
    for case in range(256):
        inside = [bool(case >> c & 1) for c in range(8)]
        if all(inside) or not any(inside):
            continue
        tris = []
        for loop in _loops(_segments(inside)):
            tris.extend(_triangulate(loop))
        if len(tris) > 5:
            raise AssertionError(f"case {case} produced {len(tris)} triangles")
        count[case] = len(tris)
        tri[case, : 3 * len(tris)] = np.array(tris).ravel()
    return tri, count


TRI_TABLE, TRI_COUNT = build_tables()
