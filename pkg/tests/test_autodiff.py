import numpy as np
import pytest
from hypothesis import assume, given, settings, strategies as st

from eqdyn import autodiff as ad
from eqdyn.autodiff import Tensor

FAST = settings(max_examples=25, deadline=None)


def _rng(seed=0):
    return np.random.default_rng(seed)


def _scaled_fd_error(loss_fn, params, h=1e-6):
    """max |analytic - central difference| over max |central difference|, all params together."""
    for p in params:
        p.grad = None
    ad.backward(loss_fn())
    an, fd = [], []
    with ad.no_grad():
        for p in params:
            flat = p.data.reshape(-1)
            for k in range(flat.size):
                old = flat[k]
                flat[k] = old + h
                fp = loss_fn().item()
                flat[k] = old - h
                fm = loss_fn().item()
                flat[k] = old
                fd.append((fp - fm) / (2 * h))
            an.extend(p.grad.reshape(-1))
    an, fd = np.array(an), np.array(fd)
    return np.abs(an - fd).max() / np.abs(fd).max()


def test_elementwise_matches_numpy():
    rng = _rng()
    a, b = rng.normal(size=(3, 4)), rng.uniform(0.5, 2.0, size=(3, 4))
    np.testing.assert_allclose((Tensor(a) + Tensor(b)).data, a + b)
    np.testing.assert_allclose((Tensor(a) * Tensor(b)).data, a * b)
    np.testing.assert_allclose((Tensor(a) / Tensor(b)).data, a / b)
    np.testing.assert_allclose(ad.relu(Tensor(a)).data, np.maximum(a, 0))
    np.testing.assert_allclose(ad.log(Tensor(b)).data, np.log(b))
    np.testing.assert_allclose(ad.sqrt(Tensor(b)).data, np.sqrt(b))


def test_broadcast_gradient_sums_over_expanded_axes():
    a = Tensor(np.ones((2, 3)), requires_grad=True)
    b = Tensor(np.arange(3.0), requires_grad=True)
    ad.backward((a * b).sum())
    np.testing.assert_allclose(b.grad, [2.0, 2.0, 2.0])
    np.testing.assert_allclose(a.grad, np.tile(np.arange(3.0), (2, 1)))


def test_incompatible_shapes_raise():
    with pytest.raises(ValueError):
        Tensor(np.ones((2, 3))) + Tensor(np.ones((4,)))


def test_reused_node_accumulates_gradient():
    x = Tensor(np.array([3.0]), requires_grad=True)
    ad.backward((x * x + x).sum())
    np.testing.assert_allclose(x.grad, [7.0])


def test_no_grad_records_nothing():
    x = Tensor(np.ones(3), requires_grad=True)
    with ad.no_grad():
        y = (x * 2).sum()
    assert not y.requires_grad


@pytest.mark.parametrize("op", ["add", "mul", "div", "relu", "square", "log", "sqrt", "abs"])
def test_elementwise_gradcheck(op):
    rng = _rng(1)
    other = Tensor(rng.uniform(0.5, 1.5, size=(4, 5)))
    fns = {
        "add": lambda t: (t + other).sum(),
        "mul": lambda t: (t * other * t).sum(),
        "div": lambda t: (other / t).sum(),
        "relu": lambda t: (ad.relu(t - 1.0) * other).sum(),
        "square": lambda t: ad.square(t).sum(),
        "log": lambda t: ad.log(t).sum(),
        "sqrt": lambda t: ad.sqrt(t).sum(),
        "abs": lambda t: (ad.absolute(t - 1.0) * other).sum(),
    }
    pt = rng.uniform(0.6, 1.9, size=(4, 5))
    pt[np.abs(pt - 1.0) < 0.05] += 0.1  # stay away from kinks
    assert ad.gradcheck(fns[op], pt) < 1e-6


@pytest.mark.parametrize("op", ["sum", "mean", "max", "min"])
@pytest.mark.parametrize("axis", [None, 0, (1, 2)])
def test_reduce_gradcheck(op, axis):
    pt = _rng(2).normal(size=(3, 4, 5))
    w = _rng(3).normal(size=ad.reduce(op, Tensor(pt), axis).shape)
    assert ad.gradcheck(lambda t: (ad.reduce(op, t, axis) * w).sum(), pt) < 1e-6


def test_shape_ops_gradcheck():
    pt = _rng(4).normal(size=(2, 3, 4))
    w = _rng(5).normal(size=(4, 6))

    def f(t):
        a = t.reshape(6, 4).transpose()
        b = ad.concat([a, a[:, ::-1] * 2.0], axis=1)[:, :6]
        return (ad.stack([b, b * b], axis=0).sum(axis=0) * w).sum()

    assert ad.gradcheck(f, pt) < 1e-6


def test_mse_value_and_gradient():
    rng = _rng(6)
    p, t = rng.normal(size=(3, 4)), rng.normal(size=(3, 4))
    assert ad.mse(Tensor(p), Tensor(t)).item() == pytest.approx(np.mean((p - t) ** 2))
    assert ad.gradcheck(lambda z: ad.mse(z, Tensor(t)), p) < 1e-7


@FAST
@given(
    padding=st.sampled_from(ad.PADDING_MODES),
    dilation=st.integers(1, 3),
    size=st.sampled_from([1, 3, 5]),
    hw=st.tuples(st.integers(7, 11), st.integers(7, 11)),
    seed=st.integers(0, 2**16),
)
def test_conv2d_matches_loop_reference(padding, dilation, size, hw, seed):
    assume(padding != "none" or dilation * (size - 1) < min(hw))
    rng = _rng(seed)
    x = rng.normal(size=(2, 3, *hw))
    w = rng.normal(size=(4, 3, size, size))
    ref = ad.conv2d_reference(x, w, padding, dilation)
    for method in ("direct", "fft") if padding == "periodic" else ("direct",):
        got = ad.conv2d(x, w, padding, dilation, method=method).data
        np.testing.assert_allclose(got, ref, atol=1e-11)


def test_conv2d_known_values():
    # 3x3 all-ones kernel on a periodic grid sums each 3x3 neighbourhood
    x = np.arange(16.0).reshape(1, 1, 4, 4)
    y = ad.conv2d(x, np.ones((1, 1, 3, 3)), "periodic").data
    assert y[0, 0, 0, 0] == pytest.approx(sum(x[0, 0, r % 4, c % 4] for r in (-1, 0, 1) for c in (-1, 0, 1)))
    # zero padding at the corner keeps only the in-grid 2x2 block
    z = ad.conv2d(x, np.ones((1, 1, 3, 3)), "zero").data
    assert z[0, 0, 0, 0] == pytest.approx(0 + 1 + 4 + 5)
    assert ad.conv2d(x, np.ones((1, 1, 3, 3)), "none").shape == (1, 1, 2, 2)


def test_valid_conv_with_oversized_reach_raises():
    with pytest.raises(ValueError):
        ad.conv2d(np.ones((1, 1, 7, 7)), np.ones((1, 1, 5, 5)), "none", dilation=2)


def test_periodic_reach_beyond_grid_wraps():
    rng = _rng(7)
    x, w = rng.normal(size=(1, 1, 5, 5)), rng.normal(size=(1, 1, 5, 5))
    for method in ("direct", "fft"):
        got = ad.conv2d(x, w, "periodic", dilation=2, method=method).data
        np.testing.assert_allclose(got, ad.conv2d_reference(x, w, "periodic", 2), atol=1e-12)


@pytest.mark.parametrize("padding,method", [("periodic", "direct"), ("periodic", "fft"), ("zero", "direct"),
                                            ("none", "direct")])
@pytest.mark.parametrize("dilation", [1, 2])
def test_conv2d_gradcheck(padding, method, dilation):
    rng = _rng(8)
    x = rng.normal(size=(2, 2, 8, 8))
    w = Tensor(rng.normal(size=(3, 2, 3, 3)), requires_grad=True)
    xt = Tensor(x, requires_grad=True)
    proj = rng.normal(size=ad.conv2d(x, w.data, padding, dilation).shape)
    loss = lambda: (ad.conv2d(xt, w, padding, dilation, method) * proj).sum()
    assert _scaled_fd_error(loss, [xt, w]) < 1e-8


def test_fft_method_rejects_nonperiodic_padding():
    with pytest.raises(ValueError):
        ad.conv2d(np.ones((1, 1, 5, 5)), np.ones((1, 1, 3, 3)), "zero", method="fft")


def test_slice_correlation_matches_separate_convs():
    rng = _rng(9)
    v = Tensor(rng.normal(size=(2, 3, 2, 8, 8)), requires_grad=True)
    ks = [Tensor(rng.normal(size=(4, 2, s, s)), requires_grad=True) for s in (3, 5, 1)]
    plan = [[(0, ks[0]), (1, ks[1])], [(2, ks[2])], [(1, ks[0]), (2, ks[1]), (0, ks[2])]]
    y = ad.slice_correlation(v, plan).data
    for o, terms in enumerate(plan):
        ref = sum(ad.conv2d_reference(v.data[:, s], k.data, "periodic") for s, k in terms)
        np.testing.assert_allclose(y[:, o], ref, atol=1e-11)
    proj = rng.normal(size=y.shape)
    assert _scaled_fd_error(lambda: (ad.slice_correlation(v, plan) * proj).sum(), [v, *ks]) < 1e-8


def test_pad_unpad_are_adjoint():
    rng = _rng(10)
    for mode in ("zero", "periodic"):
        x = rng.normal(size=(1, 2, 6, 6))
        xp = ad.pad2d(x, 2, mode)
        g = rng.normal(size=xp.shape)
        assert np.sum(xp * g) == pytest.approx(np.sum(x * ad.unpad2d(g, 2, mode)))


def test_window_extreme_and_pooling_gradcheck():
    rng = _rng(11)
    pt = rng.normal(size=(1, 2, 6, 6))
    w = rng.normal(size=(1, 2, 6, 6))
    assert ad.gradcheck(lambda t: (ad.window_extreme(t, 3, "max") * w).sum(), pt) < 1e-6
    assert ad.gradcheck(lambda t: (ad.window_extreme(t, 3, "min", "zero") * w).sum(), pt) < 1e-6
    w2 = rng.normal(size=(1, 2, 3, 3))
    assert ad.gradcheck(lambda t: (ad.avg_pool2(t) * w2).sum(), pt) < 1e-7
    w3 = rng.normal(size=(1, 2, 12, 12))
    assert ad.gradcheck(lambda t: (ad.upsample2(t) * w3).sum(), pt) < 1e-7


def test_linear_map_uses_supplied_adjoint():
    m = _rng(12).normal(size=(3, 3))
    x = Tensor(np.ones(3), requires_grad=True)
    ad.backward(ad.linear_map(x, lambda a: m @ a, lambda g: m.T @ g, "mat").sum())
    np.testing.assert_allclose(x.grad, m.T @ np.ones(3))


def test_where_routes_gradient():
    a = Tensor(np.ones(4), requires_grad=True)
    b = Tensor(np.ones(4), requires_grad=True)
    cond = np.array([True, False, True, False])
    ad.backward(ad.where(cond, a * 2, b * 3).sum())
    np.testing.assert_allclose(a.grad, [2, 0, 2, 0])
    np.testing.assert_allclose(b.grad, [0, 3, 0, 3])
