"""Volumetric IoU, Chamfer distances and the helpers they need.

Inside tests use ray-crossing parity. Rays leave along
``RAY_TILT_PRIMARY = (1, sqrt(2)e-4, sqrt(3)e-4)``; rays passing within 1e-12
(barycentric) of a triangle edge are re-cast along
``RAY_TILT_SECONDARY = (-1, -sqrt(5)e-4, sqrt(7)e-4)``. Points within 1e-12 of a
triangle along the ray count as inside.
"""

from __future__ import annotations

import csv
import logging
import warnings
from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from .kernels import RAY_TILT_PRIMARY, RAY_TILT_SECONDARY, brute_nearest, ray_parity
from .reconstruct import TriangleMesh

log = logging.getLogger(__name__)

CD1_REPORT_SCALE = 1e1  # reported value = raw / 1e-1
CD2_REPORT_SCALE = 1e3  # reported value = raw / 1e-3


class UndefinedMetricWarning(RuntimeWarning):
    pass


@dataclass
class InsideResult:
    inside: np.ndarray
    retried: int
    failures: np.ndarray  # indices still degenerate after the second direction


def classify_points(mesh: TriangleMesh, points) -> InsideResult:
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    tris = mesh.corners()
    inside, degen = ray_parity(points, tris, RAY_TILT_PRIMARY)
    retry = np.flatnonzero(degen)
    failures = np.zeros(0, dtype=np.int64)
    if retry.size:
        in2, degen2 = ray_parity(points[retry], tris, RAY_TILT_SECONDARY)
        inside[retry] = in2
        failures = retry[degen2]
        if failures.size:
            log.warning("inside test degenerate along both ray directions for %d points", failures.size)
    return InsideResult(inside, int(retry.size), failures)


def point_in_mesh(mesh: TriangleMesh, points) -> np.ndarray:
    """Boolean inside mask for one point ``(3,)`` or many ``(P, 3)``."""
    arr = np.asarray(points, dtype=np.float64)
    res = classify_points(mesh, arr).inside
    return bool(res[0]) if arr.ndim == 1 else res


def iou_from_inside(inside_a, inside_b, n_samples: int, seed: int) -> float:
    """Monte-Carlo IoU over uniform samples in ``[-1, 1]^3``.

    ``inside_a`` and ``inside_b`` map points ``(P, 3)`` to boolean masks; both
    see the same sample set.
    """
    if n_samples < 1:
        raise ValueError("n_samples must be >= 1")
    x = np.random.default_rng(seed).uniform(-1.0, 1.0, size=(n_samples, 3))
    a = np.asarray(inside_a(x), dtype=bool)
    b = np.asarray(inside_b(x), dtype=bool)
    union = int(np.count_nonzero(a | b))
    if union == 0:
        warnings.warn(f"IoU undefined: no sample of {n_samples} is inside either shape", UndefinedMetricWarning, stacklevel=2)
        return float("nan")
    return int(np.count_nonzero(a & b)) / union


def iou(mesh_a: TriangleMesh, mesh_b: TriangleMesh, n_samples: int = 100_000, seed: int = 0) -> float:
    return iou_from_inside(lambda x: point_in_mesh(mesh_a, x), lambda x: point_in_mesh(mesh_b, x), n_samples, seed)


def sample_mesh_surface(mesh: TriangleMesh, n: int, seed: int = 0) -> np.ndarray:
    """Area-weighted triangle choice, then uniform barycentric coordinates."""
    if mesh.n_triangles == 0:
        raise ValueError("cannot sample an empty mesh")
    areas = mesh.areas()
    total = areas.sum()
    if not total > 0:
        raise ValueError("mesh has zero total area")
    rng = np.random.default_rng(seed)
    tri = rng.choice(len(areas), size=n, p=areas / total)
    r1 = np.sqrt(rng.random(n))
    r2 = rng.random(n)
    c = mesh.corners()[tri]
    return (1 - r1)[:, None] * c[:, 0] + (r1 * (1 - r2))[:, None] * c[:, 1] + (r1 * r2)[:, None] * c[:, 2]


class KdTree:
    """Exact nearest neighbors in 3D (balanced tree from scipy)."""

    def __init__(self, points):
        self.points = np.ascontiguousarray(points, dtype=np.float64).reshape(-1, 3)
        if len(self.points) == 0:
            raise ValueError("KdTree needs at least one point")
        self._tree = cKDTree(self.points, balanced_tree=True, compact_nodes=True)

    def nearest(self, queries) -> tuple[np.ndarray, np.ndarray]:
        q = np.ascontiguousarray(queries, dtype=np.float64).reshape(-1, 3)
        dist, idx = self._tree.query(q, k=1, eps=0.0)
        return dist, idx.astype(np.int64)


def brute_force_nearest(queries, ref) -> tuple[np.ndarray, np.ndarray]:
    return brute_nearest(queries, ref)


def _sq_nearest(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    _, idx = KdTree(b).nearest(a)
    d = a - b[idx]
    return (d * d).sum(axis=1)


def chamfer(samples_a, samples_b) -> tuple[float, float]:
    """``(cd1, cd2)``: halves of the two directed mean nearest distances (plain and squared)."""
    a = np.asarray(samples_a, dtype=np.float64).reshape(-1, 3)
    b = np.asarray(samples_b, dtype=np.float64).reshape(-1, 3)
    if len(a) == 0 or len(b) == 0:
        raise ValueError("chamfer needs two nonempty point sets")
    ab = _sq_nearest(a, b)
    ba = _sq_nearest(b, a)
    cd1 = 0.5 * np.sqrt(ab).mean() + 0.5 * np.sqrt(ba).mean()
    cd2 = 0.5 * ab.mean() + 0.5 * ba.mean()
    return float(cd1), float(cd2)


@dataclass
class MetricsReport:
    shape_id: str
    iou: float
    cd1: float
    cd2: float
    n_volume_samples: int
    n_surface_samples: int
    seed: int

    def __post_init__(self):
        if not np.isnan(self.iou) and not 0.0 <= self.iou <= 1.0:
            raise ValueError(f"iou {self.iou} outside [0, 1]")
        if self.cd1 < 0 or self.cd2 < 0:
            raise ValueError("chamfer distances must be non-negative")

    def rows(self) -> list[tuple]:
        return [
            (self.shape_id, "iou", self.iou, self.iou, self.n_volume_samples, self.seed),
            (self.shape_id, "cd1", self.cd1, self.cd1 * CD1_REPORT_SCALE, self.n_surface_samples, self.seed),
            (self.shape_id, "cd2", self.cd2, self.cd2 * CD2_REPORT_SCALE, self.n_surface_samples, self.seed),
        ]


CSV_HEADER = ("shape_id", "metric", "raw", "reported", "n_samples", "seed")


def mean_rows(reports: list[MetricsReport], label: str = "mean") -> list[tuple]:
    out = []
    for k, metric in enumerate(("iou", "cd1", "cd2")):
        rows = [r.rows()[k] for r in reports]
        if not rows:
            continue
        raw = float(np.mean([row[2] for row in rows]))
        rep = float(np.mean([row[3] for row in rows]))
        out.append((label, metric, raw, rep, rows[0][4], rows[0][5]))
    return out


def write_report_csv(path, reports: list[MetricsReport], extra_rows: list[tuple] = ()) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(CSV_HEADER)
        for r in reports:
            for row in r.rows():
                w.writerow(_fmt_row(row))
        for row in mean_rows(reports):
            w.writerow(_fmt_row(row))
        for row in extra_rows:
            w.writerow(_fmt_row(row))


def _fmt_row(row: tuple) -> list:
    return [repr(float(x)) if isinstance(x, (float, np.floating)) else x for x in row]


def read_report_csv(path) -> list[dict]:
    with open(path, newline="") as f:
        rows = list(csv.DictReader(f))
    for row in rows:
        for k in ("raw", "reported"):
            row[k] = float(row[k])
    return rows


def evaluate_against_shape(mesh: TriangleMesh, shape, shape_id: str, n_volume: int = 100_000,
                           n_surface: int = 100_000, seed: int = 0) -> MetricsReport:
    """IoU against the analytic inside test (sdf <= 0) and Chamfer against analytic surface samples.

    IoU and the two surface sample sets use independent seeds derived from ``seed``.
    """
    from .geometry import sample_surface

    if mesh.n_triangles == 0:
        raise ValueError(f"{shape_id}: reconstruction is an empty mesh")
    v = iou_from_inside(lambda x: point_in_mesh(mesh, x), lambda x: shape.sdf(x) <= 0.0, n_volume,
                        np.random.SeedSequence([seed, 1]).generate_state(1)[0])
    gt = sample_surface(shape, n_surface, np.random.default_rng([seed, 2]))
    rec = sample_mesh_surface(mesh, n_surface, np.random.SeedSequence([seed, 3]).generate_state(1)[0])
    cd1, cd2 = chamfer(rec, gt)
    return MetricsReport(shape_id, v, cd1, cd2, n_volume, n_surface, seed)
