import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from fewshot_sdf import autodiff as ad
from fewshot_sdf.autodiff import NumericalError, ParamSet, Tensor


def leaf(x):
    return Tensor(np.asarray(x, dtype=float), requires_grad=True)


# -- forward values ----------------------------------------------------------------------


def test_elementwise_values():
    assert ad.relu(Tensor([-1.0, 0.0, 2.0])).data.tolist() == [0.0, 0.0, 2.0]
    assert ad.tanh(Tensor([0.0])).data.tolist() == [0.0]
    np.testing.assert_array_equal(ad.absolute(Tensor([-0.3, 0.5])).data, [0.3, 0.5])
    for op in ("add", "sub", "mul"):
        out = ad.elementwise(op, Tensor([1.0, 2.0]), Tensor([3.0, 5.0]))
        assert out.shape == (2,)


def test_elementwise_shape_mismatch_reports_both_shapes():
    with pytest.raises(ValueError, match=r"\(2,\).*\(3,\)"):
        ad.add(Tensor(np.ones(2)), Tensor(np.ones(3)))


def test_matmul_values_and_errors():
    m = np.array([[1.0, 2.0], [3.0, 4.0]])
    np.testing.assert_array_equal(ad.matmul(Tensor(np.eye(2)), Tensor(m)).data, m)
    assert ad.matmul(Tensor([[1.0, 2.0]]), Tensor([[3.0], [4.0]])).data.tolist() == [[11.0]]
    with pytest.raises(ValueError):
        ad.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))


def test_matmul_gradient_is_ones_times_b_transpose():
    rng = np.random.default_rng(0)
    b = rng.normal(size=(4, 5))
    p = ParamSet([("a", rng.normal(size=(3, 4)))], requires_grad=True)
    (g,) = ad.grad(ad.tsum(ad.matmul(p["a"], Tensor(b))), [p["a"]])
    np.testing.assert_allclose(g.data, np.ones((3, 5)) @ b.T, rtol=1e-15)
    err = ad.finite_diff_check(lambda q: ad.tsum(ad.matmul(q["a"], Tensor(b))), p, step=1e-5)
    assert err < 1e-6


def test_reductions():
    assert ad.tsum(Tensor([1.0, 2.0, 3.0])).item() == 6.0
    assert ad.mean(Tensor([2.0, 4.0])).item() == 3.0
    x = leaf(np.arange(5.0))
    (g,) = ad.grad(ad.mean(x), [x])
    np.testing.assert_array_equal(g.data, np.full(5, 0.2))
    with pytest.raises(ValueError):
        ad.tsum(Tensor(np.zeros((0,))))


def test_first_and_second_derivatives():
    x = leaf(3.0)
    (g,) = ad.grad(ad.mul(x, x), [x])
    assert g.item() == 6.0
    x = leaf(2.0)
    cube = ad.mul(ad.mul(x, x), x)
    (g1,) = ad.grad(cube, [x], create_graph=True)
    (g2,) = ad.grad(g1, [x])
    assert g1.item() == 12.0
    assert g2.item() == 12.0


def test_grad_errors_and_unreached_leaves():
    x = leaf([1.0, 2.0])
    with pytest.raises(ValueError):
        ad.grad(ad.mul(x, x), [x])
    y = leaf([5.0])
    (gx, gy) = ad.grad(ad.tsum(x), [x, y])
    assert gy.data.tolist() == [0.0]
    # a non-finite gradient names the node it came out of
    z = leaf([0.0])
    bad = ad._record(np.zeros(1), [z], lambda g, need: [Tensor([np.nan])], "broken")
    with pytest.raises(NumericalError) as info:
        ad.grad(ad.tsum(bad), [z])
    assert info.value.node_id == bad.id


def test_relu_derivative_at_zero_is_zero():
    x = leaf([0.0, 1.0, -1.0])
    (g,) = ad.grad(ad.tsum(ad.relu(x)), [x])
    assert g.data.tolist() == [0.0, 1.0, 0.0]


def test_conv3d_examples():
    out = ad.conv3d(Tensor(np.ones((1, 4, 4, 4))), Tensor(np.full((1, 1, 1, 1, 1), 2.0)), stride=1, padding=0)
    np.testing.assert_array_equal(out.data, np.full((1, 4, 4, 4), 2.0))
    out = ad.conv3d(Tensor(np.ones((1, 8, 8, 8))), Tensor(np.ones((1, 1, 3, 3, 3))), stride=2, padding=1)
    assert out.shape == (1, 4, 4, 4)
    # output sizes are floored, as in the 8 -> 4 example above; only an empty output is rejected
    with pytest.raises(ValueError):
        ad.conv3d(Tensor(np.ones((1, 2, 2, 2))), Tensor(np.ones((1, 1, 3, 3, 3))), stride=1, padding=0)
    with pytest.raises(ValueError):
        ad.conv3d(Tensor(np.ones((1, 6, 6, 6))), Tensor(np.ones((1, 1, 2, 2, 2))))


def _conv_direct(x, w, stride, pad):
    # plain nested loops: the cross-correlation definition
    c_out, k = w.shape[0], w.shape[2]
    xp = np.pad(x, ((0, 0), (pad, pad), (pad, pad), (pad, pad)))
    n = (x.shape[1] + 2 * pad - k) // stride + 1
    out = np.zeros((c_out, n, n, n))
    for o in range(c_out):
        for i in range(n):
            for j in range(n):
                for l in range(n):
                    patch = xp[:, i * stride : i * stride + k, j * stride : j * stride + k, l * stride : l * stride + k]
                    out[o, i, j, l] = np.sum(patch * w[o])
    return out


@pytest.mark.parametrize("stride", [1, 2])
def test_conv3d_matches_direct_loops(stride):
    rng = np.random.default_rng(1)
    x, w = rng.normal(size=(2, 6, 6, 6)), rng.normal(size=(3, 2, 3, 3, 3))
    got = ad.conv3d(Tensor(x), Tensor(w), stride=stride, padding=1).data
    np.testing.assert_allclose(got, _conv_direct(x, w, stride, 1), rtol=1e-12, atol=1e-12)


def test_conv3d_kernel_gradient_two_channels_5cubed():
    rng = np.random.default_rng(2)
    x = Tensor(rng.normal(size=(2, 5, 5, 5)))
    wt = Tensor(rng.normal(size=(2, 5, 5, 5)))
    p = ParamSet([("k", rng.normal(size=(2, 2, 3, 3, 3)))])
    err = ad.finite_diff_check(lambda q: ad.tsum(ad.mul(ad.conv3d(x, q["k"], padding=1), wt)), p, step=1e-3)
    assert err < 1e-6


def test_relu_mlp_gradient_away_from_kinks():
    rng = np.random.default_rng(3)
    feats = Tensor(rng.normal(size=(8, 4)))
    target = rng.normal(size=8)
    p = ParamSet([("w1", rng.normal(size=(4, 6))), ("b1", rng.normal(size=6)), ("w2", rng.normal(size=(6, 1)))])

    def loss(q):
        h = ad.relu(ad.add(ad.matmul(feats, q["w1"]), q["b1"]))
        out = ad.reshape(ad.matmul(h, q["w2"]), (8,))
        return ad.tsum(ad.mul(ad.sub(out, target), ad.sub(out, target)))

    pre = feats.data @ p["w1"].data + p["b1"].data
    assert np.abs(pre).min() > 1e-7
    assert ad.finite_diff_check(loss, p, step=1e-5) < 1e-5


def test_finite_diff_check_examples():
    rng = np.random.default_rng(4)
    a = rng.normal(size=(3, 3))
    a = a @ a.T
    p = ParamSet([("x", rng.normal(size=3))])
    quad = lambda q: ad.tsum(ad.mul(q["x"], ad.reshape(ad.matmul(Tensor(a), ad.reshape(q["x"], (3, 1))), (3,))))
    assert ad.finite_diff_check(quad, p, step=1e-5) < 1e-8
    assert ad.finite_diff_check(lambda q: 0.0, p) == 0.0
    with pytest.raises(ValueError):
        ad.finite_diff_check(quad, p, step=0.0)


def test_tanh_network_gradient():
    rng = np.random.default_rng(5)
    feats = Tensor(rng.normal(size=(5, 3)))
    p = ParamSet([("w1", rng.normal(size=(3, 4))), ("w2", rng.normal(size=(4, 1)))])
    loss = lambda q: ad.tsum(ad.tanh(ad.matmul(ad.tanh(ad.matmul(feats, q["w1"])), q["w2"])))
    assert ad.finite_diff_check(loss, p) < 1e-5


def test_no_grad_records_nothing():
    x = leaf([1.0])
    with ad.no_grad():
        y = ad.mul(x, x)
    assert not y.requires_grad and y.parents == ()
    assert ad.is_grad_enabled()


def test_paramset_flatten_roundtrip_and_duplicates():
    p = ParamSet([("a", np.arange(6.0).reshape(2, 3)), ("b", np.array([7.0]))])
    q = p.unflatten(p.flatten())
    assert q.names() == ["a", "b"]
    np.testing.assert_array_equal(q["a"].data, p["a"].data)
    with pytest.raises(ValueError):
        ParamSet([("a", 1.0), ("a", 2.0)])
    with pytest.raises(ValueError):
        p.unflatten(np.zeros(3))


# -- properties --------------------------------------------------------------------------

finite = st.floats(-10, 10, allow_nan=False, allow_infinity=False)


@settings(max_examples=40, deadline=None)
@given(arrays(np.float64, (3, 4), elements=finite), arrays(np.float64, (4,), elements=finite))
def test_broadcast_add_gradient_sums_over_broadcast_axis(a, b):
    x, y = leaf(a), leaf(b)
    gx, gy = ad.grad(ad.tsum(ad.add(x, y)), [x, y])
    np.testing.assert_array_equal(gx.data, np.ones((3, 4)))
    np.testing.assert_array_equal(gy.data, np.full(4, 3.0))


@settings(max_examples=40, deadline=None)
@given(arrays(np.float64, (2, 3), elements=finite), arrays(np.float64, (2, 3), elements=finite))
def test_product_rule(a, b):
    x, y = leaf(a), leaf(b)
    gx, gy = ad.grad(ad.tsum(ad.mul(x, y)), [x, y])
    np.testing.assert_array_equal(gx.data, b)
    np.testing.assert_array_equal(gy.data, a)


@settings(max_examples=40, deadline=None)
@given(arrays(np.float64, (5,), elements=st.floats(-3, 3)))
def test_tanh_second_derivative_closed_form(v):
    x = leaf(v)
    (g1,) = ad.grad(ad.tsum(ad.tanh(x)), [x], create_graph=True)
    (g2,) = ad.grad(ad.tsum(g1), [x])
    t = np.tanh(v)
    np.testing.assert_allclose(g1.data, 1 - t**2, rtol=1e-12, atol=1e-15)
    np.testing.assert_allclose(g2.data, -2 * t * (1 - t**2), rtol=1e-10, atol=1e-14)


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 9), st.integers(0, 2**31 - 1))
def test_take_scatter_are_adjoint(size, seed):
    rng = np.random.default_rng(seed)
    idx = rng.integers(0, size, size=7)
    x = rng.normal(size=(2, size))
    y = rng.normal(size=(2, 7))
    # <take(x), y> == <x, scatter(y)>
    lhs = np.sum(ad.take(Tensor(x), idx).data * y)
    rhs = np.sum(x * ad.scatter_sum(Tensor(y), idx, size).data)
    assert abs(lhs - rhs) < 1e-10 * (1 + abs(lhs))
