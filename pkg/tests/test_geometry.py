import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fewshot_sdf import geometry as g


def test_sphere_sdf_examples():
    s = g.sphere((0, 0, 0), 0.5)
    assert g.analytic_sdf(s, [0.0, 0.0, 0.0]) == -0.5
    assert g.analytic_sdf(s, [1.0, 0.0, 0.0]) == 0.5


def test_union_of_disjoint_spheres_zero_on_first_surface():
    u = g.union(g.sphere((-0.5, 0, 0), 0.3), g.sphere((0.5, 0, 0), 0.3))
    assert abs(g.analytic_sdf(u, [-0.2, 0.0, 0.0])) < 1e-12


def test_csg_operators_follow_min_max():
    a, b = g.sphere((0, 0, 0), 0.5), g.box((0.3, 0, 0), (0.3, 0.3, 0.3))
    x = np.random.default_rng(0).uniform(-1, 1, size=(100, 3))
    np.testing.assert_array_equal(g.intersection(a, b).sdf(x), np.maximum(a.sdf(x), b.sdf(x)))
    np.testing.assert_array_equal(g.difference(a, b).sdf(x), np.maximum(a.sdf(x), -b.sdf(x)))


@pytest.mark.parametrize("shape", [
    g.sphere((0.1, 0, 0), 0.4),
    g.box((0, 0.1, 0), (0.3, 0.2, 0.4), g.random_rotation(np.random.default_rng(1))),
    g.torus((0, 0, 0), 0.4, 0.15, g.random_rotation(np.random.default_rng(2))),
    g.capsule((-0.3, 0, 0), (0.3, 0.2, 0), 0.2),
])
def test_primitive_gradient_has_unit_norm(shape):
    rng = np.random.default_rng(3)
    x = rng.uniform(-0.9, 0.9, size=(4000, 3))
    grad = g.sdf_gradient(shape, x, h=1e-7)
    norm = np.linalg.norm(grad, axis=1)
    # stay away from medial points, where the SDF has a kink: the gradient is
    # unit-norm only where nearby finite-difference stencils agree
    g2 = g.sdf_gradient(shape, x + 1e-4, h=1e-7)
    smooth = np.linalg.norm(grad - g2, axis=1) < 1e-2
    x, norm = x[smooth][:1000], norm[smooth][:1000]
    assert len(x) == 1000
    assert np.abs(norm - 1).max() < 1e-3


def test_sample_surface_sphere():
    pts = g.sample_surface(g.sphere((0, 0, 0), 0.5), 100, seed=0)
    assert pts.shape == (100, 3)
    assert np.abs(np.linalg.norm(pts, axis=1) - 0.5).max() <= 1e-6


def test_sample_surface_single_point_any_shape():
    rng = np.random.default_rng(5)
    for _ in range(5):
        shape = g.random_shape(rng)
        pts = g.sample_surface(shape, 1, seed=1)
        assert pts.shape == (1, 3)
        assert abs(shape.sdf(pts)[0]) < 1e-6


def test_sample_surface_box_face_areas():
    # box with half extents (0.2, 0.3, 0.4): face pair areas are proportional to
    # 0.3*0.4, 0.2*0.4, 0.2*0.3
    he = np.array([0.2, 0.3, 0.4])
    pts = g.sample_surface(g.box((0, 0, 0), he), 1000, seed=0)
    face_axis = np.argmax(np.abs(pts) / he, axis=1)
    frac = np.bincount(face_axis, minlength=3) / len(pts)
    areas = np.array([he[1] * he[2], he[0] * he[2], he[0] * he[1]])
    np.testing.assert_allclose(frac, areas / areas.sum(), atol=0.05)


def test_surface_samples_are_projection_fixed_points():
    shape = g.random_shape(np.random.default_rng(7))
    pts = g.sample_surface(shape, 200, seed=2)
    again, ok = g.project_to_surface(shape, pts)
    assert ok.all()
    assert np.abs(again - pts).max() < 1e-9


def test_sample_surface_rejects_bad_count():
    with pytest.raises(ValueError):
        g.sample_surface(g.sphere(), 0)


def test_training_points_sigma_zero_are_on_surface():
    s = g.sphere((0, 0, 0), 0.5)
    smp = g.sample_training_points(s, g.SamplingConfig((0.0,), (200,)))
    assert np.abs(smp.sdf).max() < 1e-6


def test_training_points_sigma_band_mean():
    s = g.sphere((0, 0, 0), 0.5)
    smp = g.sample_training_points(s, g.SamplingConfig((0.1,), (10_000,)))
    assert 0.06 <= np.abs(smp.sdf).mean() <= 0.10


def test_training_points_band_bookkeeping():
    smp = g.sample_training_points(g.sphere(), g.SamplingConfig((0.1, 0.01), (5, 5)))
    assert len(smp) == 10
    assert (smp.sigma == 0.1).sum() == 5 and (smp.sigma == 0.01).sum() == 5
    np.testing.assert_array_equal(smp.sdf, g.sphere().sdf(smp.points))
    assert np.abs(smp.points).max() <= 1.0


def test_voxelize_examples():
    grid = g.voxelize(np.zeros((1, 3)), 4)
    assert grid.sum() == 1 and grid[2, 2, 2] == 1
    assert g.voxelize(np.ones((1, 3)), 4)[3, 3, 3] == 1
    pts = np.random.default_rng(0).uniform(-1, 1, size=(300, 3))
    assert g.voxelize(pts, 32).sum() <= 300
    with pytest.raises(ValueError, match="outside"):
        g.voxelize(np.array([[0.0, 1.5, 0.0]]), 4)
    with pytest.raises(ValueError):
        g.voxelize(pts, 12)


def test_voxelize_nesting_across_resolutions():
    pts = g.sample_surface(g.random_shape(np.random.default_rng(9)), 500, seed=0)
    fine, coarse = g.voxelize(pts, 128), g.voxelize(pts, 32)
    blocks = fine.reshape(32, 4, 32, 4, 32, 4).max(axis=(1, 3, 5))
    assert np.all(blocks[coarse > 0] > 0)
    np.testing.assert_array_equal(blocks, coarse)


def test_dataset_determinism_and_split():
    cfg = g.DatasetConfig(n_shapes=6, n_points=64, n_samples=100, seed=3)
    a, b = g.make_dataset(cfg), g.make_dataset(cfg)
    for ra, rb in zip(a, b):
        assert ra.shape.to_text() == rb.shape.to_text()
        np.testing.assert_array_equal(ra.cloud, rb.cloud)
        np.testing.assert_array_equal(ra.samples.as_array(), rb.samples.as_array())
    assert g.split_indices(200, 0.8) == (list(range(160)), list(range(160, 200)))
    for rec in a:
        assert np.abs(rec.cloud).max() <= 1.0
        assert rec.cloud.shape == (64, 3) and len(rec.samples) == 100


def test_dataset_record_independent_of_order():
    cfg = g.DatasetConfig(n_shapes=4, n_points=32, n_samples=50, seed=1)
    full = g.make_dataset(cfg)
    alone = g.make_shape_record(cfg, 3)
    np.testing.assert_array_equal(full[3].cloud, alone.cloud)


def test_dataset_persistence_roundtrip(tmp_path):
    cfg = g.DatasetConfig(n_shapes=5, n_points=32, n_samples=40, seed=2)
    recs = g.make_dataset(cfg)
    manifest = g.save_dataset(recs, tmp_path, 0.8)
    assert len(manifest["train"]) == 4 and len(manifest["test"]) == 1
    ids, loaded = g.load_dataset(tmp_path, "train")
    assert ids == manifest["train"]
    for r, l in zip(recs, loaded):
        np.testing.assert_array_equal(r.cloud, l.cloud)
        np.testing.assert_array_equal(r.samples.as_array(), l.samples.as_array())
        x = np.random.default_rng(0).uniform(-1, 1, size=(50, 3))
        np.testing.assert_array_equal(r.shape.sdf(x), l.shape.sdf(x))


def test_read_array_rejects_truncated(tmp_path):
    path = tmp_path / "a.bin"
    g.write_array(path, np.ones((3, 2)))
    path.write_bytes(path.read_bytes()[:-8])
    with pytest.raises(ValueError):
        g.read_array(path)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000))
def test_random_shapes_stay_in_domain(seed):
    shape = g.random_shape(np.random.default_rng(seed))
    lo, hi = shape.bounds()
    assert np.all(lo >= -0.9) and np.all(hi <= 0.9)
    # the bounding box really bounds the zero set
    x = np.random.default_rng(seed).uniform(-1, 1, size=(2000, 3))
    outside_box = np.any((x < lo - 1e-9) | (x > hi + 1e-9), axis=1)
    assert np.all(shape.sdf(x[outside_box]) > 0)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000))
def test_shape_text_roundtrip_exact(seed):
    shape = g.random_shape(np.random.default_rng(seed))
    back = g.AnalyticShape.from_text(shape.to_text())
    assert back.to_text() == shape.to_text()
