import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from ddm import diffcore as dc
from ddm import nets
from ddm.errors import ConfigError, DegenerateSegmentError, NumericError, ShapeError


def _check_grad(f, x, tol=1e-6):
    """Compare tape gradient of scalar f(Tensor) with central differences."""
    t = dc.Tensor(x, requires_grad=True)
    with dc.enable_grad():
        out = f(t)
    (g,) = dc.grad(out, [t])
    fd = dc.finite_diff(lambda v: f(dc.Tensor(v)).item(), x)
    assert np.allclose(g.data, fd, rtol=tol, atol=tol)


@pytest.mark.parametrize("fn", [
    lambda t: (t * t).sum(),
    lambda t: (t.tanh() * 3.0).sum(),
    lambda t: (t.exp() / (t * t + 1.0)).sum(),
    lambda t: ((t * t + 1.0).log() + (t * t + 2.0).sqrt()).mean(),
    lambda t: (t.T @ t).sum(),
    lambda t: (t.reshape(6) * dc.Tensor(np.arange(6.0))).sum(),
    lambda t: dc.log_softmax(t).sum(axis=1).mean(),
    lambda t: dc.softmax_cross_entropy(t, np.array([0, 2])),
    lambda t: (t.relu() * t).sum(),
    lambda t: t.sum(axis=0, keepdims=True).expand((4, 3)).sum(),
])
def test_primitive_vjps_match_finite_differences(fn, rng):
    _check_grad(fn, rng.normal(size=(2, 3)) + 0.05)


def test_gather_sentinel_reads_zero_and_scatters_back():
    x = dc.Tensor(np.array([1.0, 2.0, 3.0]), requires_grad=True)
    idx = np.array([[0, 3], [2, 2]])
    with dc.enable_grad():
        y = dc.gather(x, idx)
        out = (y * dc.Tensor(np.array([[1.0, 10.0], [100.0, 1000.0]]))).sum()
    assert np.array_equal(y.data, [[1.0, 0.0], [3.0, 3.0]])
    (g,) = dc.grad(out, [x])
    assert np.array_equal(g.data, [1.0, 0.0, 1100.0])


def _naive_conv(x, w, b, pad):
    n, c, h, wd = x.shape
    o, _, k, _ = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    out = np.zeros((n, o, h + 2 * pad - k + 1, wd + 2 * pad - k + 1))
    for i in range(out.shape[2]):
        for j in range(out.shape[3]):
            patch = xp[:, :, i:i + k, j:j + k]
            out[:, :, i, j] = np.tensordot(patch, w, axes=([1, 2, 3], [1, 2, 3])) + b
    return out


def test_conv2d_matches_direct_loops(rng):
    x, w, b = rng.normal(size=(2, 3, 6, 5)), rng.normal(size=(4, 3, 3, 3)), rng.normal(size=4)
    got = dc.conv2d(dc.Tensor(x), dc.Tensor(w), dc.Tensor(b), padding=1).data
    assert np.allclose(got, _naive_conv(x, w, b, 1))


def test_conv_and_pool_gradients(rng):
    w = rng.normal(size=(2, 1, 3, 3))
    _check_grad(lambda t: dc.avg_pool2d(dc.conv2d(t, dc.Tensor(w), None, 1)).tanh().sum(),
                rng.normal(size=(1, 1, 4, 4)))


@given(arrays(np.float64, (3, 5), elements=st.floats(-50, 50)))
def test_softmax_rows_are_distributions(z):
    p = dc.softmax(dc.Tensor(z)).data
    assert np.all(p >= 0)
    assert np.allclose(p.sum(axis=1), 1.0)


def test_cross_entropy_rejects_bad_labels():
    with pytest.raises(ConfigError):
        dc.softmax_cross_entropy(dc.Tensor(np.zeros((2, 3))), np.array([0, 3]))
    with pytest.raises(ShapeError):
        dc.softmax_cross_entropy(dc.Tensor(np.zeros((2, 3))), np.array([0]))


def test_weighted_cross_entropy_is_weighted_sum(rng):
    z = rng.normal(size=(4, 3))
    y = np.array([0, 1, 2, 1])
    w = np.array([0.5, 1.0, 2.0, 0.0])
    per = -dc.log_softmax(dc.Tensor(z)).data[np.arange(4), y]
    assert np.isclose(dc.softmax_cross_entropy(dc.Tensor(z), y, w).item(), (w * per).sum())
    assert np.isclose(dc.softmax_cross_entropy(dc.Tensor(z), y).item(), per.mean())


def test_grad_of_unused_input_is_zero():
    a, b = dc.Tensor(np.ones(3), requires_grad=True), dc.Tensor(np.ones(2), requires_grad=True)
    with dc.enable_grad():
        out = (a * a).sum()
    ga, gb = dc.grad(out, [a, b])
    assert np.array_equal(gb.data, np.zeros(2)) and np.array_equal(ga.data, 2 * np.ones(3))


def test_relu_second_derivative_is_zero():
    x = dc.Tensor(np.array([0.5, -1.0, 2.0]), requires_grad=True)
    with dc.enable_grad():
        y = (x.relu() * 3.0).sum()
        (g,) = dc.grad(y, [x], create_graph=True)
        s = g.sum()
    (h,) = dc.grad(s, [x])
    assert np.array_equal(h.data, np.zeros(3))


def test_double_backward_matches_finite_difference_of_gradient_norm(rng):
    w = rng.normal(size=(3, 2))

    def gnorm(x):
        xt = dc.Tensor(x, requires_grad=True)
        wt = dc.Tensor(w, requires_grad=True)
        with dc.enable_grad():
            out = (xt @ wt).tanh().sum()
            (gw,) = dc.grad(out, [wt], create_graph=True)
            val = (gw * gw).sum()
        return xt, val

    x = rng.normal(size=(2, 3))
    xt, val = gnorm(x)
    (gx,) = dc.grad(val, [xt])
    fd = dc.finite_diff(lambda v: gnorm(v)[1].item(), x)
    assert np.allclose(gx.data, fd, rtol=1e-6, atol=1e-7)


def test_cosine_distance_values():
    d = dc.GradDistance("cosine", ("a", "b"))
    a = [np.array([1.0, 0.0]), np.array([1.0, 1.0])]
    val, deg = d(a, [np.array([-1.0, 0.0]), np.array([1.0, 1.0])])
    assert np.isclose(val.item(), 2.0) and deg == []
    val, deg = d(a, [np.array([0.0, 1.0]), np.zeros(2)])
    assert np.isclose(val.item(), 2.0) and deg == ["b"]


def test_mse_distance():
    d = dc.GradDistance("mse")
    assert np.isclose(d.value([np.ones(2), np.zeros(3)], [np.zeros(2), np.ones(3)]), 1.0)
    with pytest.raises(ConfigError):
        dc.GradDistance("l7")


@given(st.floats(0.01, 100.0))
def test_cosine_distance_is_scale_invariant(c):
    rng = np.random.default_rng(0)
    a = [rng.normal(size=4), rng.normal(size=3)]
    b = [rng.normal(size=4), rng.normal(size=3)]
    d = dc.GradDistance()
    assert np.isclose(d.value(a, b), d.value(a, [c * x for x in b]), atol=1e-9)


def _tiny():
    spec = nets.ModelSpec((5,), 3, widths=(4,), seed=1)
    return spec, nets.Model(spec), nets.init(spec)


def test_grad_params_matches_finite_differences(rng):
    spec, model, params = _tiny()
    x, y = rng.random((6, 5)), rng.integers(0, 3, 6)
    g = dc.grad_params(model, params, x, y)
    fd = dc.finite_diff(lambda v: nets.loss(spec, params.with_data(v), x, y), params.data)
    assert np.allclose(g.data, fd, atol=1e-7)
    with pytest.raises(ConfigError):
        dc.grad_params(model, params, x[:0], y[:0])


@pytest.mark.parametrize("mode", ["reverse", "forward"])
@pytest.mark.parametrize("kind", ["cosine", "mse"])
def test_grad_synthetic_matches_finite_differences(rng, mode, kind):
    spec, model, params = _tiny()
    target = dc.grad_params(model, params, rng.random((8, 5)), rng.integers(0, 3, 8))
    dist = dc.GradDistance(kind, tuple(params.names))
    s, y = rng.random((2, 5)), np.array([0, 2])
    res = dc.grad_synthetic(model, params, s, y, target, dist, mode=mode)
    fd = dc.finite_diff(lambda v: dc.matching_value(model, params, v, y, target, dist, mode=mode), s)
    assert np.allclose(res.grad, fd, rtol=1e-5, atol=1e-8)


def test_grad_synthetic_degenerate_segment_strictness():
    spec, model, params = _tiny()
    zero = params.with_data(np.zeros(params.size))
    s, y = np.full((1, 5), 0.5), np.array([1])
    dist = dc.GradDistance("cosine", tuple(params.names))
    with pytest.raises(DegenerateSegmentError):
        dc.grad_synthetic(model, params, s, y, zero, dist)
    res = dc.grad_synthetic(model, params, s, y, zero, dist, strict=False)
    assert len(res.degenerate) == len(params.names) and res.value == len(params.names)


def test_non_finite_loss_names_layer():
    spec, model, params = _tiny()
    bad = params.with_data(np.full(params.size, 1e308))
    with pytest.raises(NumericError) as e:
        dc.loss_and_grad(model, bad, np.ones((2, 5)), np.array([0, 1]))
    assert e.value.layer is not None
