import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from alam import autodiff as ad
from alam.checks import central_difference, relative_error
from alam.nn import Architecture, NetworkHandle


def naive_forward(params, x, layout):
    """Straight-line re-evaluation: explicit loops over units."""
    out = []
    for row in x:
        h = list(row)
        pos = 0
        for li, (fi, fo) in enumerate(layout):
            W = [[params[pos + i * fo + j] for j in range(fo)] for i in range(fi)]
            pos += fi * fo
            b = [params[pos + j] for j in range(fo)]
            pos += fo
            z = [sum(h[i] * W[i][j] for i in range(fi)) + b[j] for j in range(fo)]
            h = [max(v, 0.0) for v in z] if li < len(layout) - 1 else z
        out.append(h)
    return np.array(out)


def test_zero_weights_give_zero_preactivation():
    net = NetworkHandle(Architecture(3, 2, (4,)), params=np.zeros(Architecture(3, 2, (4,)).n_params))
    assert np.array_equal(net.preactivation(np.array([[1.0, -2.0, 3.0]])), np.zeros((1, 2)))


def test_identity_single_layer():
    arch = Architecture(2, 2, ())
    params = np.concatenate([np.eye(2).ravel(), np.zeros(2)])
    net = NetworkHandle(arch, params)
    assert np.array_equal(net(np.array([1.0, 2.0])), np.array([1.0, 2.0]))


def test_forward_matches_naive_evaluator():
    rng = np.random.default_rng(3)
    net = NetworkHandle(Architecture(2, 1, (16, 16)), rng=rng)
    x = rng.standard_normal((10, 2))
    np.testing.assert_allclose(net(x), naive_forward(net.params, x, net.arch.layout), rtol=1e-12, atol=1e-12)


def test_forward_is_pure():
    rng = np.random.default_rng(0)
    net = NetworkHandle(Architecture(4, 3, (8, 8)), rng=rng)
    x = rng.standard_normal((5, 4))
    a, b = net(x), net(x)
    assert a.tobytes() == b.tobytes()


def test_half_squared_norm_gradient_is_params():
    p = ad.param(np.array([1.0, -2.0, 0.5]))
    (g,) = ad.grad(0.5 * ad.sum_(ad.square(p)), [p])
    assert np.array_equal(g, p.data)


def test_stop_gradient_blocks_flow():
    p = ad.param(np.array([1.0, 2.0]))
    loss = ad.sum_(ad.exp(ad.stop_gradient(p * 3.0)))
    (g,) = ad.grad(loss, [p])
    assert np.array_equal(g, np.zeros(2))


def test_non_scalar_loss_is_rejected():
    p = ad.param(np.ones(3))
    with pytest.raises(ValueError):
        ad.backward(p * 2.0)


def test_gradient_accumulates_over_shared_uses():
    p = ad.param(np.array([2.0]))
    (g,) = ad.grad(ad.sum_(p * p + p), [p])
    assert g[0] == pytest.approx(5.0)


def test_mlp_parameter_and_input_gradients_match_differences():
    rng = np.random.default_rng(1)
    arch = Architecture(3, 2, (5, 4))
    theta = 0.5 * rng.standard_normal(arch.n_params)
    x = rng.standard_normal((6, 3))
    w = rng.standard_normal((6, 2))

    def loss(p, xx):
        return ad.sum_(ad.mlp_apply(p, xx, arch.layout) * w)

    pt, xt = ad.param(theta), ad.param(x)
    gp, gx = ad.grad(loss(pt, xt), [pt, xt])
    fd_p = central_difference(lambda t: loss(ad.Tensor(t), ad.Tensor(x)).item(), theta)
    fd_x = central_difference(lambda xx: loss(ad.Tensor(theta), ad.Tensor(xx)).item(), x)
    assert relative_error(gp, fd_p) < 1e-7
    assert relative_error(gx, fd_x) < 1e-7


def test_mlp_rejects_wrong_parameter_count():
    with pytest.raises(ValueError):
        ad.mlp_apply(np.zeros(5), np.zeros((1, 2)), [(2, 1)])


def test_float32_precision_stays_close_and_restores():
    rng = np.random.default_rng(2)
    arch = Architecture(3, 1, (32, 32))
    theta = rng.standard_normal(arch.n_params) * 0.3
    x = rng.standard_normal((50, 3))
    ref = ad.mlp_apply(theta, x, arch.layout).data
    ad.set_mlp_precision(np.float32)
    try:
        low = ad.mlp_apply(theta, x, arch.layout)
        assert low.data.dtype == np.float64
        np.testing.assert_allclose(low.data, ref, rtol=1e-4, atol=1e-5)
    finally:
        ad.set_mlp_precision(np.float64)
    assert ad.get_mlp_precision() is np.float64
    with pytest.raises(ValueError):
        ad.set_mlp_precision(np.int32)


UNARY = {
    "exp": ad.exp,
    "tanh": ad.tanh,
    "softplus": ad.softplus,
    "square": ad.square,
    "sqrt_abs": lambda t: ad.sqrt(ad.square(t) + 1.0),
    "log_shift": lambda t: ad.log(ad.square(t) + 0.5),
}


@pytest.mark.parametrize("name", sorted(UNARY))
def test_elementwise_gradients(name):
    rng = np.random.default_rng(len(name))
    x0 = rng.standard_normal(7)
    w = rng.standard_normal(7)
    f = lambda t: ad.sum_(UNARY[name](t) * w)  # noqa: E731
    pt = ad.param(x0)
    (g,) = ad.grad(f(pt), [pt])
    assert relative_error(g, central_difference(lambda x: f(ad.Tensor(x)).item(), x0)) < 1e-7


def test_broadcast_column_against_block():
    rng = np.random.default_rng(4)
    a0, b0 = rng.standard_normal((4, 1)), rng.standard_normal((4, 3))
    a, b = ad.param(a0), ad.param(b0)
    ga, gb = ad.grad(ad.sum_(a * b + a / (b * b + 1.0)), [a, b])
    fa = central_difference(lambda x: ad.sum_(ad.Tensor(x) * b0 + ad.Tensor(x) / (b0 * b0 + 1.0)).item(), a0)
    assert ga.shape == (4, 1)
    assert relative_error(ga, fa) < 1e-7


def test_getitem_concat_reshape_and_tile():
    rng = np.random.default_rng(5)
    x0 = rng.standard_normal((3, 2))
    w = rng.standard_normal((6, 4))

    def f(t):
        wide = ad.concat([t, ad.square(t)], axis=1)
        tall = ad.tile_rows(wide, 2)
        return ad.sum_(tall * w) + ad.sum_(ad.reshape(t, (6,))[::2])

    pt = ad.param(x0)
    (g,) = ad.grad(f(pt), [pt])
    assert relative_error(g, central_difference(lambda x: f(ad.Tensor(x)).item(), x0)) < 1e-7


def test_clip_has_zero_gradient_outside():
    p = ad.param(np.array([-3.0, 0.5, 3.0]))
    (g,) = ad.grad(ad.sum_(ad.clip(p, -1.0, 1.0)), [p])
    assert np.array_equal(g, [0.0, 1.0, 0.0])


def test_maximum_routes_ties_to_first_argument():
    a, b = ad.param(np.array([1.0, 2.0])), ad.param(np.array([1.0, 3.0]))
    ga, gb = ad.grad(ad.sum_(ad.maximum(a, b)), [a, b])
    assert np.array_equal(ga, [1.0, 0.0]) and np.array_equal(gb, [0.0, 1.0])


@settings(max_examples=30, deadline=None)
@given(st.lists(st.floats(-5, 5), min_size=1, max_size=8), st.floats(0.1, 3.0))
def test_softplus_matches_log1p_exp(xs, scale):
    x = np.array(xs) * scale
    np.testing.assert_allclose(ad.softplus(x).data, np.log1p(np.exp(x)), rtol=1e-12, atol=1e-14)
