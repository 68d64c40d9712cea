import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from eqdyn import autodiff as ad
from eqdyn import layers as L
from eqdyn.autodiff import Tensor
from eqdyn.groups import GroupElement, Rep, act_on_array, equivariant_dim, rotate_tensor
from eqdyn.layers import Layer, LayerSpec

FAST = settings(max_examples=20, deadline=None)


def _stack(specs, seed=0):
    rng = np.random.default_rng(seed)
    layers = [Layer.build(s, rng) for s in specs]

    def f(x):
        h = Tensor(x)
        for lay in layers:
            h = lay(h)
        return h.data

    return f, layers


# -- uniform motion -----------------------------------------------------------

def _um_specs(c=4, width=6):
    return [LayerSpec("uniform_motion", c, width, 3, "relu"),
            LayerSpec("uniform_motion", width, width, 3, "relu"),
            LayerSpec("uniform_motion", width, 2, 3, "none")]


@FAST
@given(seed=st.integers(0, 2**16), cu=st.floats(-1, 1), cv=st.floats(-1, 1))
def test_um_stack_is_equivariant(seed, cu, cv):
    f, _ = _stack(_um_specs(), seed)
    x = np.random.default_rng(seed + 1).normal(size=(2, 4, 8, 8))
    g = GroupElement.uniform_motion(cu, cv)
    err = np.abs(f(act_on_array(g, x, "vector2")) - act_on_array(g, f(x), "vector2")).max()
    assert err < 1e-8


def test_um_zero_padding_is_exact_away_from_border():
    specs = [LayerSpec(**{**s.__dict__, "padding": "zero"}) for s in _um_specs()]
    f, _ = _stack(specs)
    x = np.random.default_rng(2).normal(size=(1, 4, 12, 12))
    g = GroupElement.uniform_motion(0.4, -0.9)
    diff = np.abs(f(act_on_array(g, x, "vector2")) - act_on_array(g, f(x), "vector2"))
    # three 3x3 layers see 3 pixels deep into the padding
    assert diff[..., 3:-3, 3:-3].max() < 1e-10
    assert diff.max() > 1e-3


def test_um_first_in_block_is_invariant():
    spec = LayerSpec("uniform_motion", 4, 3, 3, "relu", residual_role="first_in_residual_block")
    lay = Layer.build(spec, np.random.default_rng(0))
    x = np.random.default_rng(1).normal(size=(1, 4, 6, 6))
    shifted = act_on_array(GroupElement.uniform_motion(0.7, -0.2), x, "vector2")
    np.testing.assert_allclose(lay(shifted).data, lay(x).data, atol=1e-12)


def test_um_needs_even_channels():
    with pytest.raises(ValueError):
        LayerSpec("uniform_motion", 3, 4)
    with pytest.raises(ValueError):
        LayerSpec("uniform_motion", 4, 3)


def test_block_mean_of_constant_field():
    x = np.zeros((1, 4, 5, 5))
    x[:, 0::2], x[:, 1::2] = 2.0, -1.0
    mu = L.block_mean_uv(x, 3, "periodic").data
    np.testing.assert_allclose(mu[0, 0], 2.0)
    np.testing.assert_allclose(mu[0, 1], -1.0)


def test_mean_conjugation_is_what_makes_relu_layers_equivariant():
    assert L.um_affine_negative_test()


# -- magnitude ----------------------------------------------------------------

def _mag_specs():
    return [LayerSpec("magnitude", 3, 5, 3, "relu"),
            LayerSpec("magnitude", 5, 5, 3, "relu"),
            LayerSpec("magnitude", 5, 1, 3, "none")]


@FAST
@given(seed=st.integers(0, 2**16), log_lam=st.floats(np.log(0.1), np.log(10.0)),
       padding=st.sampled_from(["periodic", "zero"]))
def test_mag_stack_is_equivariant(seed, log_lam, padding):
    lam = float(np.exp(log_lam))
    specs = [LayerSpec(**{**s.__dict__, "padding": padding}) for s in _mag_specs()]
    f, _ = _stack(specs, seed)
    x = np.random.default_rng(seed + 1).normal(size=(2, 3, 8, 8))
    y = f(x)
    rel = np.abs(f(lam * x) - lam * y).max() / (lam * np.abs(y).max())
    assert rel < 1e-8


def test_mag_layer_maps_zero_to_zero():
    lay = Layer.build(_mag_specs()[0], np.random.default_rng(0))
    assert np.all(lay(np.zeros((1, 3, 6, 6))).data == 0.0)


def test_mag_layer_is_not_shift_invariant():
    # conjugation by MinMax scale only removes magnitude, not offsets
    lay = Layer.build(LayerSpec("magnitude", 1, 2, 3, "none"), np.random.default_rng(0))
    x = np.random.default_rng(1).normal(size=(1, 1, 6, 6))
    assert np.abs(lay(x + 5.0).data - lay(x).data - 5.0).max() > 1e-3


def test_minmax_fallbacks():
    x = np.zeros((1, 2, 5, 5))
    np.testing.assert_allclose(L.minmax_scale(x, 3, "periodic").data, 1.0)
    x[:] = -3.0  # constant block: no spread, falls back to max |x|
    np.testing.assert_allclose(L.minmax_scale(x, 3, "periodic").data, 3.0)
    x[0, 0, 2, 2] = 1.0
    s = L.minmax_scale(x, 3, "periodic").data
    assert s[0, 0, 2, 2] == pytest.approx(4.0) and s[0, 0, 0, 0] == pytest.approx(3.0)


# -- rotation -----------------------------------------------------------------

ROT_CASES = [
    # (input rep, hidden rep, output rep)
    (Rep.trivial(3), Rep.regular(2), Rep.trivial(1)),
    (Rep.vectors(2), Rep.regular(2), Rep.vectors(1)),
    (Rep.vectors(1) + Rep.trivial(1), Rep.regular(1) + Rep.trivial(2), Rep.vectors(1)),
]


@pytest.mark.parametrize("rep_in,rep_hid,rep_out", ROT_CASES)
@pytest.mark.parametrize("seed", range(3))
def test_rot_stack_is_equivariant_for_all_quarter_turns(rep_in, rep_hid, rep_out, seed):
    specs = [LayerSpec("rotation", rep_in.dim, rep_hid.dim, 3, "relu", rep_in=rep_in, rep_out=rep_hid),
             LayerSpec("rotation", rep_hid.dim, rep_hid.dim, 5, "relu", rep_in=rep_hid, rep_out=rep_hid),
             LayerSpec("rotation", rep_hid.dim, rep_out.dim, 3, "none", rep_in=rep_hid, rep_out=rep_out)]
    f, _ = _stack(specs, seed)
    x = np.random.default_rng(seed + 7).normal(size=(2, rep_in.dim, 9, 9))
    for j in range(4):
        err = np.abs(f(rotate_tensor(x, j, rep_in)) - rotate_tensor(f(x), j, rep_out)).max()
        assert err < 1e-8


def test_rot_layer_rejects_relu_on_vectors():
    with pytest.raises(ValueError):
        LayerSpec("rotation", 2, 2, 3, "relu", rep_in=Rep.vectors(1), rep_out=Rep.vectors(1))


def test_rot_parameter_count_is_constrained_dimension():
    spec = LayerSpec("rotation", 4, 8, 3, "relu", rep_in=Rep.regular(1), rep_out=Rep.regular(2))
    lay = Layer.build(spec, np.random.default_rng(0))
    # regular -> regular: each of the 2x1 block pairs has 4 * 9 free weights; bias has one per block
    assert equivariant_dim(spec.rep_in, spec.rep_out, 3) == 2 * 4 * 9
    assert lay.effective_parameter_count() == 2 * 4 * 9 + 2


def test_plain_layer_is_not_rotation_equivariant():
    f, _ = _stack([LayerSpec("none", 1, 4, 3, "relu"), LayerSpec("none", 4, 1, 3, "none")])
    x = np.random.default_rng(0).normal(size=(1, 1, 8, 8))
    rep = Rep.trivial(1)
    assert np.abs(f(rotate_tensor(x, 1, rep)) - rotate_tensor(f(x), 1, rep)).max() > 1e-3


# -- scale --------------------------------------------------------------------

GRID = L.default_scale_grid()


def test_default_scale_grid():
    assert len(GRID) == 7
    assert GRID[3] == 1.0 and GRID[0] == pytest.approx(1 / 3) and GRID[-1] == pytest.approx(3.0)
    assert np.allclose(np.diff(np.log(GRID)), np.log(3) / 3)


@FAST
@given(seed=st.integers(0, 2**16), extent=st.sampled_from([1, 3]), width=st.integers(1, 3))
def test_lifted_frame_group_correlation_commutes_with_index_shift(seed, extent, width):
    rng = np.random.default_rng(seed)
    spec = LayerSpec("scale", width, 2, 3, "relu", scale_grid=GRID, scale_extent=extent, scale_frame="lifted")
    lay = Layer.build(spec, rng)
    v = rng.normal(size=(1, len(GRID), width, 10, 10))
    shifted = np.zeros_like(v)
    shifted[:, 1:] = v[:, :-1]  # input slice s moves to s + 1
    y, ys = lay(v).data, lay(shifted).data
    half = extent // 2
    interior = range(1 + half, len(GRID) - half)
    err = max(np.abs(ys[:, s] - y[:, s - 1]).max() for s in interior)
    assert err < 1e-10


def test_input_frame_taps_are_dilated_at_integer_scales():
    k = np.random.default_rng(0).normal(size=(2, 1, 3, 3))
    wide = L.expand_kernel(k, 2.0).data
    assert wide.shape == (2, 1, 5, 5)
    np.testing.assert_allclose(wide[:, :, ::2, ::2], k)
    assert np.count_nonzero(wide[:, :, 1::2]) == 0
    x = np.random.default_rng(1).normal(size=(1, 1, 9, 9))
    np.testing.assert_allclose(ad.conv2d(x, wide).data, ad.conv2d(x, k, dilation=2).data, atol=1e-12)


def test_fractional_tap_spread_preserves_kernel_sum():
    e, size = L.dilated_tap_matrix(3, 1.44)
    assert size == 5
    np.testing.assert_allclose(e.sum(axis=0), 1.0)


def test_group_correlation_periodic_matches_padded_path():
    rng = np.random.default_rng(3)
    spec = LayerSpec("scale", 2, 3, 3, "none", scale_grid=(0.5, 1.0, 2.0), scale_extent=3)
    v = rng.normal(size=(2, 3, 2, 12, 12))
    k = rng.normal(size=(3, 2, 3, 3, 3))
    b = rng.normal(size=3)
    fast = L.scale_group_correlation(v, k, spec, Tensor(b)).data
    slow = L._scale_gc_padded(Tensor(v), [Tensor(k[..., e]) for e in range(3)], spec, Tensor(b)).data
    np.testing.assert_allclose(fast, slow, atol=1e-11)


def test_group_correlation_rejects_reach_beyond_grid():
    spec = LayerSpec("scale", 1, 1, 5, "none", scale_grid=(1.0, 4.0))
    with pytest.raises(ValueError):
        L.scale_group_correlation(np.zeros((1, 2, 1, 6, 6)), np.zeros((1, 1, 5, 5, 1)), spec)


@pytest.mark.parametrize("frame", ["input", "lifted"])
def test_group_correlation_gradients(frame):
    rng = np.random.default_rng(4)
    spec = LayerSpec("scale", 2, 2, 3, "relu", scale_grid=(0.7, 1.0, 1.5), scale_extent=3, scale_frame=frame)
    lay = Layer.build(spec, rng)
    v = Tensor(rng.normal(size=(1, 3, 2, 8, 8)), requires_grad=True)
    proj = rng.normal(size=(1, 3, 2, 8, 8))
    err = ad.parameters_gradcheck(lambda: (lay(v) * proj).mean(), [v, *lay.parameters()], max_coords=120)
    assert err < 1e-5


def test_time_resample_rows_and_limits():
    m = L.time_resample_matrix(10, 2, 2.0)
    np.testing.assert_allclose(m.sum(axis=1), 1.0)
    assert m[1, 9] == 1.0 and m[0, 5] == 1.0  # newest and 4 frames earlier
    np.testing.assert_allclose(L.time_resample_matrix(4, 4, 1.0), np.eye(4))
    with pytest.raises(ValueError):
        L.time_resample_matrix(5, 3, 3.0)


def test_scale_lift_identity_slice_and_adjoint():
    rng = np.random.default_rng(5)
    grid = (0.5, 1.0, 1.5)
    x = rng.normal(size=(2, 6, 10, 10))
    lifted = L.scale_lift(x, grid, channels=1, lifted_frames=3).data
    assert lifted.shape == (2, 3, 3, 10, 10)
    np.testing.assert_allclose(lifted[:, 1], x[:, 3:])  # unit scale keeps the newest frames
    g = rng.normal(size=lifted.shape)
    xt = Tensor(x, requires_grad=True)
    ad.backward((L.scale_lift(xt, grid, 1, lifted_frames=3) * g).sum())
    assert np.sum(xt.grad * x) == pytest.approx(np.sum(lifted * g))


def test_scale_lift_multiplies_vector_slices():
    x = np.ones((1, 2, 8, 8))
    lifted = L.scale_lift(x, (0.5, 1.0), channels=2, channel_rep="vector2", lifted_frames=1).data
    np.testing.assert_allclose(lifted[:, 0], 0.5, atol=1e-12)


def test_scale_projection_is_max_over_scales():
    v = np.random.default_rng(6).normal(size=(1, 4, 2, 3, 3))
    np.testing.assert_allclose(L.scale_project(v).data, v.max(axis=1))


def test_only_the_delta_kernel_commutes_with_rescaling():
    basis = L.scale_steerable_kernel_basis(3, [0.7, 1.4])
    assert basis.shape[0] == 1
    delta = np.zeros(9)
    delta[4] = 1.0
    assert abs(abs(basis[0] @ delta) - 1.0) < 1e-8


def test_scale_spec_validation():
    with pytest.raises(ValueError):
        LayerSpec("scale", scale_grid=(0.5, 2.0))
    with pytest.raises(ValueError):
        LayerSpec("scale", scale_grid=(1.0,), scale_extent=2)
    with pytest.raises(ValueError):
        LayerSpec("scale", scale_grid=(1.0,), scale_frame="output")


# -- layer objects ------------------------------------------------------------

@pytest.mark.parametrize("symmetry", ["none", "uniform_motion", "magnitude"])
def test_layer_gradients(symmetry):
    rng = np.random.default_rng(7)
    lay = Layer.build(LayerSpec(symmetry, 2, 2, 3, "relu"), rng)
    x = Tensor(rng.normal(size=(1, 2, 6, 6)), requires_grad=True)
    proj = rng.normal(size=(1, 2, 6, 6))
    assert ad.parameters_gradcheck(lambda: (lay(x) * proj).mean(), [x, *lay.parameters()]) < 1e-5


def test_rot_layer_gradient_flows_through_projection():
    rng = np.random.default_rng(8)
    spec = LayerSpec("rotation", 4, 4, 3, "relu", rep_in=Rep.regular(1), rep_out=Rep.regular(1))
    lay = Layer.build(spec, rng)
    x = rng.normal(size=(1, 4, 6, 6))
    proj = rng.normal(size=(1, 4, 6, 6))
    assert ad.parameters_gradcheck(lambda: (lay(x) * proj).mean(), lay.parameters()) < 1e-5


def test_zero_build_and_bias_flag():
    lay = Layer.build(LayerSpec("none", 2, 3, 3, bias=False), np.random.default_rng(0), zero=True)
    assert set(lay.params) == {"kernel"}
    assert not lay.params["kernel"].data.any()
