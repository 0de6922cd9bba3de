import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

import oracles
from dalign import tensor as T
from dalign.harness.fdcheck import check_gradients, relative_error


def t(a, grad=False):
    return T.tensor(np.asarray(a, dtype=np.float64), requires_grad=grad, double=True)


def test_conv_matches_loop_oracle():
    rng = np.random.default_rng(0)
    worst = 0.0
    for k in range(100):
        c_in, c_out = rng.integers(1, 4, size=2)
        h, w = rng.integers(1, 9, size=2)
        ks = int(rng.choice([1, 3, 5]))
        stride = int(rng.choice([1, 2]))
        x = rng.normal(size=(c_in, h, w))
        kern = rng.normal(size=(c_out, c_in, ks, ks))
        b = rng.normal(size=c_out)
        got = T.conv2d(t(x), t(kern), t(b), stride=stride).data
        worst = max(worst, np.max(np.abs(got - oracles.conv2d(x, kern, b, stride))))
    assert worst < 1e-9


def test_conv_errors():
    with pytest.raises(ValueError):
        T.conv2d(t(np.zeros((2, 4, 4))), t(np.zeros((3, 2, 2, 2))))
    with pytest.raises(ValueError):
        T.conv2d(t(np.zeros((2, 4, 4))), t(np.zeros((3, 1, 3, 3))))
    with pytest.raises(ValueError):
        T.conv2d(t(np.zeros((2, 4, 4))), t(np.zeros((3, 2, 3, 3))), t(np.zeros(2)))


def test_bilinear_sample_matches_oracle():
    rng = np.random.default_rng(1)
    for _ in range(100):
        c, h, w = rng.integers(1, 6, size=3)
        x = rng.normal(size=(c, h, w))
        pts = rng.uniform(-2, max(h, w) + 1, size=(7, 2))
        got = T.bilinear_sample(t(x), pts).data
        want = np.stack([oracles.sample_point(x, px, py) for px, py in pts], axis=1)
        np.testing.assert_allclose(got, want, atol=1e-12)


def test_bilinear_sample_integer_points_and_outside():
    x = np.arange(12.0).reshape(1, 3, 4)
    got = T.bilinear_sample(t(x), [[2.0, 1.0], [0.5, 0.0], [10.0, 10.0], [-1.0, 0.0]]).data[0]
    np.testing.assert_allclose(got, [x[0, 1, 2], 0.5, 0.0, 0.0])
    # half a cell beyond the edge blends with the zero padding
    np.testing.assert_allclose(T.bilinear_sample(t(x), [[3.5, 0.0]]).data[0], [x[0, 0, 3] / 2])


def test_resize_matches_oracle():
    rng = np.random.default_rng(2)
    for _ in range(100):
        c, h, w, h2, w2 = rng.integers(1, 9, size=5)
        x = rng.normal(size=(c, h, w))
        np.testing.assert_allclose(T.resize_bilinear(t(x), (h2, w2)).data, oracles.resize(x, (h2, w2)), atol=1e-12)


def test_softmax_layer_norm_oracles():
    rng = np.random.default_rng(3)
    for _ in range(50):
        v = rng.normal(scale=4, size=6)
        np.testing.assert_allclose(T.softmax(t(v[None])).data[0], oracles.softmax(list(v)), atol=1e-12)
        g, s = rng.normal(size=(2, 6))
        np.testing.assert_allclose(T.layer_norm(t(v[None]), t(g), t(s)).data[0],
                                   oracles.layer_norm(list(v), g, s), atol=1e-12)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-500, 500), min_size=1, max_size=12))
def test_softmax_normalized(values):
    y = T.softmax(t(np.array(values)[None])).data
    assert abs(y.sum() - 1.0) < 1e-6
    assert np.all(y >= 0)


def test_log_sigmoid_stable():
    y = T.log_sigmoid(t([-800.0, 0.0, 800.0])).data
    np.testing.assert_allclose(y, [-800.0, np.log(0.5), 0.0])


def test_backward_accumulates_and_shares():
    x = t([1.0, 2.0, 3.0], grad=True)
    y = T.mul(x, x)  # x used twice
    T.backward(T.sum(y))
    np.testing.assert_allclose(x.grad, [2.0, 4.0, 6.0])
    T.backward(T.sum(x))
    np.testing.assert_allclose(x.grad, [3.0, 5.0, 7.0])


def test_backward_requires_scalar():
    with pytest.raises(ValueError):
        T.backward(t([1.0, 2.0], grad=True))


def test_cycle_detected():
    a = t([1.0], grad=True)
    b = T.mul(a, 2.0)
    c = T.add(b, 1.0)
    b._parents = (c, b._parents[1])  # corrupt the graph
    with pytest.raises(RuntimeError, match="cycle"):
        T.backward(T.sum(c))


def test_non_finite_raises():
    with pytest.raises(FloatingPointError):
        T.exp(t([1000.0]))
    with pytest.raises(FloatingPointError):
        T.mul(t([np.inf]), 1.0)


def test_no_grad_records_nothing():
    x = t([1.0, 2.0], grad=True)
    with T.no_grad():
        y = T.mul(x, 3.0)
    assert not y.requires_grad and y._parents == ()
    assert T.is_grad_enabled()


def test_dropout_modes():
    x = t(np.ones((50, 40)))
    assert T.dropout(x, 0.3, training=False) is x
    assert T.dropout(x, 0.0, training=True) is x
    y = T.dropout(x, 0.5, training=True, rng=np.random.default_rng(0)).data
    assert set(np.unique(y)) <= {0.0, 2.0}
    assert abs(y.mean() - 1.0) < 0.1
    with pytest.raises(ValueError):
        T.dropout(x, 0.5, training=True)
    with pytest.raises(ValueError):
        T.dropout(x, 1.0, training=True, rng=np.random.default_rng(0))


def test_segment_max_and_tie_gradient():
    x = t([[1.0, 5.0], [3.0, 5.0], [2.0, 0.0], [-1.0, 4.0]], grad=True)
    out = T.segment_max(x, np.array([0, 2]))
    np.testing.assert_array_equal(out.data, [[3.0, 5.0], [2.0, 4.0]])
    T.backward(T.sum(out))
    np.testing.assert_array_equal(x.grad, [[0, 1], [1, 0], [1, 0], [0, 1]])


def test_scatter_rows():
    x = t([[1.0, 2.0], [3.0, 4.0]], grad=True)
    out = T.scatter_rows(x, np.array([3, 0]), 4)
    np.testing.assert_array_equal(out.data, [[3, 4], [0, 0], [0, 0], [1, 2]])
    with pytest.raises(ValueError):
        T.scatter_rows(x, np.array([1, 1]), 4)


def test_deform_sample_shape_errors():
    v = [t(np.zeros((4, 1, 2)))]
    with pytest.raises(ValueError):
        T.deform_sample(v, [(2, 2)], t(np.zeros((3, 1, 2, 1, 2))), t(np.zeros((3, 1, 2, 1))))
    with pytest.raises(ValueError):
        T.deform_sample(v, [(2, 3)], t(np.zeros((3, 1, 1, 1, 2))), t(np.zeros((3, 1, 1, 1))))


def test_fdcheck_flags_wrong_gradient():
    x = t([0.3, -0.7, 1.1], grad=True)

    def bad():
        y = T.mul(x, x)
        y._backward = lambda g: (g * 3.0 * x.data, g * 0.0)  # wrong derivative
        return T.sum(y)

    assert not check_gradients(bad, [x]).passed()
    assert check_gradients(lambda: T.sum(T.mul(x, x)), [x]).passed()


def test_fdcheck_needs_double():
    x = T.tensor([1.0], requires_grad=True)
    with pytest.raises(TypeError):
        check_gradients(lambda: T.sum(x), [x])


def test_relative_error_scale():
    assert relative_error(np.array([1.0, 2.0]), np.array([1.0, 2.0])) == 0.0
    assert relative_error(np.array([0.0]), np.array([0.0])) == 0.0
    assert abs(relative_error(np.array([2.0]), np.array([1.0])) - 0.5) < 1e-15
