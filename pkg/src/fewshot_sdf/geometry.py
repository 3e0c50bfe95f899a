"""Analytic ground-truth shapes, point sampling and voxelization.

Shapes are CSG trees over four primitives (sphere, box, torus, capsule). Each
node carries a rigid transform; a node's local coordinates are
``q = R^T (x - t)``. Union/intersection/difference use min/max, which keeps the
zero level set exact but only bounds the distance away from it.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

PRIMITIVES = ("sphere", "box", "torus", "capsule")
OPERATORS = ("union", "intersection", "difference")
FAMILIES = ("blob", "box", "torus", "capsule", "carved")

_PARAM_COUNT = {"sphere": 1, "box": 3, "torus": 2, "capsule": 7}


@dataclass
class AnalyticShape:
    kind: str
    params: tuple[float, ...] = ()
    children: list["AnalyticShape"] = field(default_factory=list)
    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        if self.kind in PRIMITIVES:
            if len(self.params) != _PARAM_COUNT[self.kind] or self.children:
                raise ValueError(f"{self.kind} takes {_PARAM_COUNT[self.kind]} params and no children")
        elif self.kind in OPERATORS:
            if len(self.children) != 2:
                raise ValueError(f"{self.kind} needs exactly two children")
        else:
            raise ValueError(f"unknown node kind {self.kind!r}")
        self.params = tuple(float(p) for p in self.params)
        self.rotation = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        self.translation = np.asarray(self.translation, dtype=np.float64).reshape(3)

    def sdf(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        q = (x - self.translation) @ self.rotation
        k, p = self.kind, self.params
        if k == "sphere":
            return np.linalg.norm(q, axis=-1) - p[0]
        if k == "box":
            d = np.abs(q) - np.asarray(p)
            outside = np.linalg.norm(np.maximum(d, 0.0), axis=-1)
            inside = np.minimum(d.max(axis=-1), 0.0)
            return outside + inside
        if k == "torus":
            ring = np.hypot(q[..., 0], q[..., 1]) - p[0]
            return np.hypot(ring, q[..., 2]) - p[1]
        if k == "capsule":
            a, b, r = np.asarray(p[0:3]), np.asarray(p[3:6]), p[6]
            ab = b - a
            t = np.clip(((q - a) @ ab) / (ab @ ab), 0.0, 1.0)
            return np.linalg.norm(q - a - t[..., None] * ab, axis=-1) - r
        da, db = self.children[0].sdf(q), self.children[1].sdf(q)
        if k == "union":
            return np.minimum(da, db)
        if k == "intersection":
            return np.maximum(da, db)
        return np.maximum(da, -db)

    def _local_bounds(self) -> tuple[np.ndarray, np.ndarray]:
        k, p = self.kind, self.params
        if k == "sphere":
            return -np.full(3, p[0]), np.full(3, p[0])
        if k == "box":
            return -np.asarray(p), np.asarray(p)
        if k == "torus":
            ext = np.array([p[0] + p[1], p[0] + p[1], p[1]])
            return -ext, ext
        if k == "capsule":
            a, b, r = np.asarray(p[0:3]), np.asarray(p[3:6]), p[6]
            return np.minimum(a, b) - r, np.maximum(a, b) + r
        (alo, ahi), (blo, bhi) = (c.bounds() for c in self.children)
        if k == "union":
            return np.minimum(alo, blo), np.maximum(ahi, bhi)
        if k == "intersection":
            return np.maximum(alo, blo), np.minimum(ahi, bhi)
        return alo, ahi

    def bounds(self) -> tuple[np.ndarray, np.ndarray]:
        """Axis-aligned box containing the shape, in the parent frame."""
        lo, hi = self._local_bounds()
        corners = np.array([[lo[0] if i & 1 == 0 else hi[0],
                             lo[1] if i & 2 == 0 else hi[1],
                             lo[2] if i & 4 == 0 else hi[2]] for i in range(8)])
        world = corners @ self.rotation.T + self.translation
        return world.min(axis=0), world.max(axis=0)

    # text record, one node per line, root first
    def to_text(self) -> str:
        lines: list[str] = []

        def visit(node: AnalyticShape) -> int:
            idx = len(lines)
            lines.append("")
            kids = [visit(c) for c in node.children]
            nums = [*node.rotation.ravel(), *node.translation]
            fields = [str(idx), node.kind, *(repr(float(v)) for v in nums), str(len(node.params)),
                      *(repr(float(v)) for v in node.params), str(len(kids)), *map(str, kids)]
            lines[idx] = " ".join(fields)
            return idx

        visit(self)
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "AnalyticShape":
        rows = {}
        for raw in text.strip().splitlines():
            tok = raw.split()
            idx, kind = int(tok[0]), tok[1]
            nums = [float(v) for v in tok[2:14]]
            npar = int(tok[14])
            params = tuple(float(v) for v in tok[15 : 15 + npar])
            nkid = int(tok[15 + npar])
            kids = [int(v) for v in tok[16 + npar : 16 + npar + nkid]]
            rows[idx] = (kind, nums, params, kids)

        def build(i: int) -> AnalyticShape:
            kind, nums, params, kids = rows[i]
            return cls(kind, params, [build(k) for k in kids],
                       np.array(nums[:9]).reshape(3, 3), np.array(nums[9:12]))

        return build(0)


def sphere(center=(0.0, 0.0, 0.0), radius: float = 0.5) -> AnalyticShape:
    return AnalyticShape("sphere", (radius,), translation=np.asarray(center, dtype=float))


def box(center=(0.0, 0.0, 0.0), half_extents=(0.5, 0.5, 0.5), rotation=None) -> AnalyticShape:
    rot = np.eye(3) if rotation is None else rotation
    return AnalyticShape("box", tuple(half_extents), rotation=rot, translation=np.asarray(center, dtype=float))


def torus(center=(0.0, 0.0, 0.0), major: float = 0.5, minor: float = 0.15, rotation=None) -> AnalyticShape:
    rot = np.eye(3) if rotation is None else rotation
    return AnalyticShape("torus", (major, minor), rotation=rot, translation=np.asarray(center, dtype=float))


def capsule(a, b, radius: float) -> AnalyticShape:
    return AnalyticShape("capsule", (*np.asarray(a, dtype=float), *np.asarray(b, dtype=float), radius))


def union(a: AnalyticShape, b: AnalyticShape) -> AnalyticShape:
    return AnalyticShape("union", children=[a, b])


def intersection(a: AnalyticShape, b: AnalyticShape) -> AnalyticShape:
    return AnalyticShape("intersection", children=[a, b])


def difference(a: AnalyticShape, b: AnalyticShape) -> AnalyticShape:
    return AnalyticShape("difference", children=[a, b])


def analytic_sdf(shape: AnalyticShape, x) -> np.ndarray:
    return shape.sdf(np.asarray(x, dtype=np.float64))


def sdf_gradient(shape: AnalyticShape, x: np.ndarray, h: float = 1e-6) -> np.ndarray:
    """Central-difference gradient of the shape's SDF."""
    x = np.asarray(x, dtype=np.float64)
    g = np.empty_like(x)
    for axis in range(3):
        e = np.zeros(3)
        e[axis] = h
        g[..., axis] = (shape.sdf(x + e) - shape.sdf(x - e)) / (2.0 * h)
    return g


def project_to_surface(shape: AnalyticShape, x: np.ndarray, max_iter: int = 50,
                       tol: float = 1e-12) -> tuple[np.ndarray, np.ndarray]:
    """Newton-style projection ``x <- x - sdf(x) grad/|grad|``.

    Returns the projected points and a mask of candidates whose residual fell
    below ``tol`` within ``max_iter`` iterations.
    """
    x = np.array(x, dtype=np.float64, copy=True)
    active = np.ones(len(x), dtype=bool)
    done = np.zeros(len(x), dtype=bool)
    for _ in range(max_iter):
        idx = np.flatnonzero(active)
        if idx.size == 0:
            break
        xa = x[idx]
        d = shape.sdf(xa)
        conv = np.abs(d) < tol
        done[idx[conv]] = True
        active[idx[conv]] = False
        move = ~conv
        if not move.any():
            break
        g = sdf_gradient(shape, xa[move])
        norm = np.linalg.norm(g, axis=-1)
        bad = norm < 1e-12
        active[idx[move][bad]] = False
        step = d[move][:, None] * g / np.where(bad, 1.0, norm)[:, None]
        x[idx[move][~bad]] = xa[move][~bad] - step[~bad]
    else:
        idx = np.flatnonzero(active)
        if idx.size:
            conv = np.abs(shape.sdf(x[idx])) < tol
            done[idx[conv]] = True
    return x, done


class SamplingError(RuntimeError):
    pass


def sample_surface(shape: AnalyticShape, n: int, seed=0, band: float = 0.02) -> np.ndarray:
    """``n`` points on the zero level set, approximately area-uniform.

    Candidates are drawn uniformly in the shape's bounding box, kept when inside
    a thin band ``|sdf| < band`` and projected onto the surface.
    """
    if n < 1:
        raise ValueError("need at least one surface point")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    lo, hi = shape.bounds()
    lo = np.maximum(lo - band, -1.0)
    hi = np.minimum(hi + band, 1.0)
    out: list[np.ndarray] = []
    have = tried = kept = 0
    while have < n:
        cand = rng.uniform(lo, hi, size=(max(4 * (n - have), 4096), 3))
        cand = cand[np.abs(shape.sdf(cand)) < band]
        if cand.size == 0:
            tried += 1
            if tried > 200:
                raise SamplingError("no candidates found near the surface")
            continue
        proj, ok = project_to_surface(shape, cand)
        ok &= np.all(np.abs(proj) <= 1.0, axis=-1)
        tried += len(cand)
        kept += int(ok.sum())
        if tried >= 1000 and kept < 0.1 * tried:
            raise SamplingError(f"projection discarded {tried - kept} of {tried} candidates")
        good = proj[ok]
        out.append(good[: n - have])
        have += min(len(good), n - have)
    return np.concatenate(out, axis=0)


@dataclass(frozen=True)
class SamplingConfig:
    sigmas: tuple[float, ...] = (0.1, 0.01)
    counts: tuple[int, ...] = (1000, 1000)
    n_points: int = 256
    seed: int = 0

    def __post_init__(self):
        if len(self.sigmas) != len(self.counts):
            raise ValueError("one count per sigma band")
        if any(s < 0 for s in self.sigmas):
            raise ValueError("sigma must be non-negative")
        if any(c < 1 for c in self.counts) or self.n_points < 1:
            raise ValueError("counts must be >= 1")


@dataclass
class TrainingSampleSet:
    points: np.ndarray  # (M, 3)
    sdf: np.ndarray  # (M,)
    sigma: np.ndarray  # (M,) band each sample came from

    def __len__(self) -> int:
        return len(self.sdf)

    def as_array(self) -> np.ndarray:
        return np.column_stack([self.points, self.sdf, self.sigma])

    @classmethod
    def from_array(cls, arr: np.ndarray) -> "TrainingSampleSet":
        arr = np.asarray(arr, dtype=np.float64)
        return cls(arr[:, :3].copy(), arr[:, 3].copy(), arr[:, 4].copy())


def sample_training_points(shape: AnalyticShape, cfg: SamplingConfig, rng=None) -> TrainingSampleSet:
    """Surface points displaced by isotropic Gaussian noise, one block per band.

    Displaced points are clamped to the cube [-1, 1]^3 and labelled with the
    analytic SDF at their final position.
    """
    rng = np.random.default_rng(cfg.seed) if rng is None else rng
    pts, sig = [], []
    for sigma, count in zip(cfg.sigmas, cfg.counts):
        base = sample_surface(shape, count, rng)
        moved = np.clip(base + rng.normal(0.0, 1.0, size=base.shape) * sigma, -1.0, 1.0)
        pts.append(moved)
        sig.append(np.full(count, float(sigma)))
    points = np.concatenate(pts)
    return TrainingSampleSet(points, shape.sdf(points), np.concatenate(sig))


def voxelize(points: np.ndarray, n: int) -> np.ndarray:
    """Binary occupancy grid of shape ``(n, n, n)`` over [-1, 1]^3, indexed ``[ix, iy, iz]``.

    Cells are half-open; points exactly on the +1 face fall into the last cell.
    """
    if n < 2 or n & (n - 1):
        raise ValueError(f"resolution must be a power of two >= 2, got {n}")
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    outside = np.any(np.abs(points) > 1.0, axis=1) | ~np.all(np.isfinite(points), axis=1)
    if outside.any():
        raise ValueError(f"point {points[np.argmax(outside)].tolist()} lies outside [-1, 1]^3")
    idx = np.minimum(np.floor((points + 1.0) * (n / 2.0)).astype(np.int64), n - 1)
    grid = np.zeros((n, n, n))
    grid[idx[:, 0], idx[:, 1], idx[:, 2]] = 1.0
    return grid


def cell_centers(grid: np.ndarray) -> np.ndarray:
    """Centers of the occupied cells of an occupancy grid."""
    n = grid.shape[0]
    idx = np.argwhere(grid > 0)
    return -1.0 + (2.0 * idx + 1.0) / n


# -- procedural dataset ------------------------------------------------------------------


def random_rotation(rng: np.random.Generator) -> np.ndarray:
    q = rng.normal(size=4)
    q /= np.linalg.norm(q)
    w, x, y, z = q
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - z * w), 2 * (x * z + y * w)],
        [2 * (x * y + z * w), 1 - 2 * (x * x + z * z), 2 * (y * z - x * w)],
        [2 * (x * z - y * w), 2 * (y * z + x * w), 1 - 2 * (x * x + y * y)],
    ])


def _family_shape(family: str, rng: np.random.Generator) -> AnalyticShape:
    # parameter ranges are chosen so every shape stays inside [-0.9, 0.9]^3
    # and no feature is thinner than ~0.2, i.e. visible at 16^3
    u = rng.uniform
    if family == "blob":
        s = sphere(u(-0.25, 0.25, 3), u(0.3, 0.5))
        for _ in range(int(rng.integers(1, 3))):
            s = union(s, sphere(u(-0.4, 0.4, 3), u(0.2, 0.4)))
        return s
    if family == "box":
        return box(u(-0.15, 0.15, 3), u(0.2, 0.5, 3), random_rotation(rng))
    if family == "torus":
        return torus(u(-0.1, 0.1, 3), u(0.35, 0.5), u(0.12, 0.22), random_rotation(rng))
    if family == "capsule":
        a = u(-0.5, 0.5, 3)
        b = u(-0.5, 0.5, 3)
        c = capsule(a, b, u(0.12, 0.25))
        return union(c, capsule(b, u(-0.5, 0.5, 3), u(0.12, 0.25)))
    if family == "carved":
        outer = box(u(-0.1, 0.1, 3), u(0.35, 0.55, 3), random_rotation(rng))
        cut = sphere(u(-0.5, 0.5, 3), u(0.25, 0.45))
        return difference(outer, cut) if rng.uniform() < 0.5 else intersection(outer, sphere(u(-0.1, 0.1, 3), u(0.45, 0.65)))
    raise ValueError(f"unknown family {family!r}")


def random_shape(rng: np.random.Generator, families: Sequence[str] = FAMILIES, limit: float = 0.9) -> AnalyticShape:
    for _ in range(1000):
        fam = families[int(rng.integers(len(families)))]
        shape = _family_shape(fam, rng)
        lo, hi = shape.bounds()
        if np.all(lo >= -limit) and np.all(hi <= limit) and np.all(hi - lo > 0.2):
            # reject shapes whose CSG removed almost everything
            probe = rng.uniform(lo, hi, size=(2000, 3))
            if (shape.sdf(probe) < 0).mean() > 0.05:
                return shape
    raise SamplingError("could not draw a shape inside the domain")


@dataclass
class ShapeRecord:
    shape: AnalyticShape
    cloud: np.ndarray  # X, (N_p, 3) surface points
    samples: TrainingSampleSet  # Y with SDF targets


@dataclass(frozen=True)
class DatasetConfig:
    kind: str = "mixed-families"
    n_shapes: int = 200
    n_points: int = 256
    sigmas: tuple[float, ...] = (0.1, 0.01)
    n_samples: int = 2000
    split: float = 0.8
    seed: int = 0
    family: str = "blob"

    def band_counts(self) -> tuple[int, ...]:
        k = len(self.sigmas)
        base = self.n_samples // k
        return tuple(base + (1 if i < self.n_samples % k else 0) for i in range(k))


def make_shape_record(cfg: DatasetConfig, index: int) -> ShapeRecord:
    # one RNG stream per (seed, index) so generation order does not matter
    rng = np.random.default_rng([cfg.seed, index])
    if cfg.kind == "single-family":
        families: Sequence[str] = (cfg.family,)
    elif cfg.kind == "mixed-families":
        families = FAMILIES
    else:
        raise ValueError(f"unknown dataset kind {cfg.kind!r}")
    shape = random_shape(rng, families)
    cloud = sample_surface(shape, cfg.n_points, rng)
    samples = sample_training_points(
        shape, SamplingConfig(tuple(cfg.sigmas), cfg.band_counts(), cfg.n_points, cfg.seed), rng
    )
    return ShapeRecord(shape, cloud, samples)


def make_dataset(cfg: DatasetConfig) -> list[ShapeRecord]:
    if cfg.n_shapes < 1:
        raise ValueError("n_shapes must be >= 1")
    return [make_shape_record(cfg, i) for i in range(cfg.n_shapes)]


def split_indices(n: int, fraction: float) -> tuple[list[int], list[int]]:
    n_train = int(round(n * fraction))
    return list(range(n_train)), list(range(n_train, n))


# -- on-disk format -----------------------------------------------------------------------
# <shape dir>/shape.txt    CSG text record (see AnalyticShape.to_text)
# <shape dir>/cloud.bin    uint64 rows, uint64 cols, rows*cols float64, all little-endian
# <shape dir>/samples.bin  same layout, columns x y z sdf sigma


def write_array(path: Path, arr: np.ndarray) -> None:
    arr = np.ascontiguousarray(arr, dtype="<f8")
    if arr.ndim == 1:
        arr = arr[:, None]
    with open(path, "wb") as fh:
        fh.write(struct.pack("<QQ", arr.shape[0], arr.shape[1]))
        fh.write(arr.tobytes())


def read_array(path: Path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if len(raw) < 16:
        raise ValueError(f"{path}: truncated header")
    rows, cols = struct.unpack("<QQ", raw[:16])
    if len(raw) != 16 + 8 * rows * cols:
        raise ValueError(f"{path}: expected {rows}x{cols} float64 values")
    return np.frombuffer(raw[16:], dtype="<f8").reshape(rows, cols).astype(np.float64)


def save_record(rec: ShapeRecord, shape_dir: Path) -> None:
    shape_dir = Path(shape_dir)
    shape_dir.mkdir(parents=True, exist_ok=True)
    (shape_dir / "shape.txt").write_text(rec.shape.to_text())
    write_array(shape_dir / "cloud.bin", rec.cloud)
    write_array(shape_dir / "samples.bin", rec.samples.as_array())


def load_record(shape_dir: Path) -> ShapeRecord:
    shape_dir = Path(shape_dir)
    shape = AnalyticShape.from_text((shape_dir / "shape.txt").read_text())
    cloud = read_array(shape_dir / "cloud.bin")
    samples = TrainingSampleSet.from_array(read_array(shape_dir / "samples.bin"))
    return ShapeRecord(shape, cloud, samples)


def save_dataset(records: Sequence[ShapeRecord], out_dir: Path, split: float, extra: dict | None = None) -> dict:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    train, test = split_indices(len(records), split)
    for i, rec in enumerate(records):
        save_record(rec, out_dir / f"shape_{i:05d}")
    manifest = {
        "format": 1,
        "train": [f"shape_{i:05d}" for i in train],
        "test": [f"shape_{i:05d}" for i in test],
    }
    if extra:
        manifest.update(extra)
    (out_dir / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return manifest


def load_dataset(data_dir: Path, split: str) -> tuple[list[str], list[ShapeRecord]]:
    data_dir = Path(data_dir)
    manifest = json.loads((data_dir / "manifest.json").read_text())
    if split not in ("train", "test"):
        raise ValueError(f"unknown split {split!r}")
    ids = manifest[split]
    return ids, [load_record(data_dir / sid) for sid in ids]
