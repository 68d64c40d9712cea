import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from eqdyn import dynamics as D
from eqdyn.dynamics import CorpusConfig
from eqdyn.groups import rescale_grid

FAST = settings(max_examples=20, deadline=None)
SMALL = CorpusConfig(n_traj=6, grid=16, frames=20, seed=3)


# -- solver -------------------------------------------------------------------

def test_laplacian_of_plane_wave():
    n = 16
    k = 2 * np.pi * 3 / n
    x = np.arange(n)
    h = np.cos(k * x)[None, :] * np.ones((n, 1))
    expected = (2 * np.cos(k) - 2) * h
    np.testing.assert_allclose(D.laplacian(h), expected, atol=1e-12)


def test_insulated_laplacian_of_constant_is_zero():
    assert np.abs(D.laplacian(np.full((5, 7), 3.0), "insulated")).max() == 0.0


def test_heat_solver_matches_analytic_kernel():
    n, dx, var0, alpha, t = 64, 1 / 64, 0.05 ** 2, 1.0, 0.01
    dt = 0.2 * dx * dx / alpha
    steps = int(round(t / dt))
    h0 = D.heat_kernel_solution(n, dx, (0.5, 0.5), var0, alpha, 0.0)
    traj = D.simulate_heat(h0, alpha, dt, dx, steps, save_every=steps)
    exact = D.heat_kernel_solution(n, dx, (0.5, 0.5), var0, alpha, steps * dt)
    assert np.sqrt(np.mean((traj.frames[-1, 0] - exact) ** 2)) < 1e-3


def test_unstable_step_rejected():
    with pytest.raises(ValueError):
        D.simulate_heat(np.zeros((8, 8)), alpha=1.0, dt=0.3, dx=1.0, steps=1)


@FAST
@given(seed=st.integers(0, 2**16), boundary=st.sampled_from(D.BOUNDARIES))
def test_heat_conserves_total_and_obeys_max_principle(seed, boundary):
    h0 = np.random.default_rng(seed).uniform(0, 1, size=(12, 12))
    traj = D.simulate_heat(h0, 1.0, 0.2, 1.0, 30, boundary)
    sums = traj.frames.sum(axis=(1, 2, 3))
    np.testing.assert_allclose(sums, sums[0], rtol=1e-12)
    assert traj.frames.max() <= h0.max() + 1e-12 and traj.frames.min() >= h0.min() - 1e-12


def test_save_every_keeps_strided_states():
    h0 = np.random.default_rng(0).uniform(size=(8, 8))
    dense = D.simulate_heat(h0, 1.0, 0.1, 1.0, 12)
    sparse = D.simulate_heat(h0, 1.0, 0.1, 1.0, 12, save_every=4)
    np.testing.assert_allclose(sparse.frames, dense.frames[::4])
    assert sparse.dt == pytest.approx(0.4)


# -- corpora ------------------------------------------------------------------

def test_corpus_shapes_and_determinism():
    a, b = D.generate_corpus(SMALL), D.generate_corpus(SMALL)
    assert len(a) == 6 and a[0].frames.shape == (20, 1, 16, 16)
    assert D.corpus_hash(a) == D.corpus_hash(b)
    assert D.corpus_hash(D.generate_corpus(CorpusConfig(**{**SMALL.__dict__, "seed": 4}))) != D.corpus_hash(a)


def test_threads_do_not_change_the_corpus():
    assert D.corpus_hash(D.generate_corpus(SMALL, threads=3)) == D.corpus_hash(D.generate_corpus(SMALL))


def test_corpus_parameters_in_range():
    for t in D.generate_corpus(SMALL):
        assert 0.5 <= t.alpha <= 1.5
        assert D.courant_number(t.alpha, t.dt / SMALL.substeps, t.dx) <= D.STABILITY_LIMIT
        assert t.frames[0].max() <= SMALL.amplitude_range[1] * 3 + 1e-9


def test_velocity_corpus_is_divergence_free_and_conserves_momentum():
    cfg = CorpusConfig(n_traj=2, grid=16, frames=10, kind="velocity", seed=1)
    for t in D.generate_corpus(cfg):
        assert t.channel_rep == "vector2" and t.frames.shape[1] == 2
        u, v = t.frames[:, 0], t.frames[:, 1]
        # u = d psi/dy (rows), v = -d psi/dx (columns); central differences commute
        div = 0.5 * (np.roll(u, -1, 2) - np.roll(u, 1, 2)) + 0.5 * (np.roll(v, -1, 1) - np.roll(v, 1, 1))
        assert np.abs(div).max() < 1e-12 * np.abs(t.frames).max()
        sums = t.frames.sum(axis=(2, 3))
        assert np.abs(sums - sums[0]).max() < 1e-10


def test_corpus_config_validation():
    with pytest.raises(ValueError):
        CorpusConfig(n_traj=0)
    with pytest.raises(ValueError):
        CorpusConfig(families=("bumps", "stripes"))
    with pytest.raises(ValueError):
        CorpusConfig(kind="wave")


def test_anisotropy_stretches_along_x():
    rng = np.random.default_rng(0)
    cfg = CorpusConfig(anisotropy=3.0)
    f = D.initial_condition("bumps", 64, rng, CorpusConfig(**{**cfg.__dict__}))
    gx = np.abs(np.diff(f, axis=1)).sum()
    gy = np.abs(np.diff(f, axis=0)).sum()
    assert gy > 1.5 * gx


# -- windows and splits -------------------------------------------------------

def test_rolling_windows():
    assert D.rolling_windows(10, 3, 2) == [0, 1, 2, 3, 4, 5]
    assert D.rolling_windows(10, 3, 2, stride=4) == [0, 4]
    with pytest.raises(ValueError):
        D.rolling_windows(4, 3, 2)


def test_split_ranges_are_contiguous_60_20_20():
    r = D.split_ranges(100)
    assert r == {"train": (0, 60), "val": (60, 80), "test": (80, 100)}


def test_windows_never_cross_trajectory_or_split_boundaries():
    trajs = D.generate_corpus(SMALL)
    l, hz = 4, 3
    ds = D.make_datasets(trajs, l, hz)
    total = sum(len(t.frames) for t in trajs)
    assert sum(len(d) for d in ds.values()) > 0
    for name, d in ds.items():
        for i in range(len(d)):
            src, start = d.origin[i]
            seg = d.sources[src]
            np.testing.assert_array_equal(d.x[i].reshape(l, 1, 16, 16), seg[start:start + l])
            np.testing.assert_array_equal(d.y[i], seg[start + l:start + l + hz])
        assert d.provenance["split"] == name
    # the source segments tile disjoint ranges of the global time axis
    seen = set()
    for d in ds.values():
        for seg in d.sources:
            key = seg.tobytes()
            assert key not in seen
            seen.add(key)
    assert total == 6 * 20


# -- transformed test sets ----------------------------------------------------

@pytest.fixture(scope="module")
def heat_test():
    return D.make_datasets(D.generate_corpus(SMALL), 4, 3)["test"]


@pytest.fixture(scope="module")
def velocity_test():
    cfg = CorpusConfig(n_traj=4, grid=16, frames=20, kind="velocity", seed=2)
    return D.make_datasets(D.generate_corpus(cfg), 4, 3)["test"]


def test_mag_testset(heat_test):
    t = D.make_transformed_testset(heat_test, "Mag", 0)
    lams = np.array(t.provenance["parameters"])
    assert lams.min() >= 0 and lams.max() <= 2
    np.testing.assert_allclose(t.x, heat_test.x * lams[:, None, None, None])
    np.testing.assert_allclose(t.y, heat_test.y * lams[:, None, None, None, None])


def test_rot_testset_uses_quarter_turns_by_default(heat_test):
    t = D.make_transformed_testset(heat_test, "Rot", 0)
    for i, j in enumerate(t.provenance["parameters"]):
        np.testing.assert_allclose(t.x[i], np.rot90(heat_test.x[i], -j, axes=(-2, -1)))


def test_um_testset(velocity_test, heat_test):
    t = D.make_transformed_testset(velocity_test, "UM", 0)
    c = np.array(t.provenance["parameters"])
    np.testing.assert_allclose(t.y[:, :, 0] - velocity_test.y[:, :, 0], np.broadcast_to(
        c[:, 0, None, None, None], t.y[:, :, 0].shape))
    with pytest.raises(ValueError):
        D.make_transformed_testset(heat_test, "UM", 0)


def test_testsets_are_reproducible(heat_test):
    a = D.make_transformed_testset(heat_test, "Scale", 5)
    b = D.make_transformed_testset(heat_test, "Scale", 5)
    np.testing.assert_array_equal(a.x, b.x)
    assert a.provenance["parameters"] == b.provenance["parameters"]


def test_scale_testset_at_unit_scale_is_identity(heat_test):
    t = D.make_transformed_testset(heat_test, "Scale", 0, value=1.0)
    np.testing.assert_allclose(t.x, heat_test.x)
    np.testing.assert_allclose(t.y, heat_test.y)


def test_scale_frames_resample_time_by_lambda_squared():
    # a trajectory whose frames are constant fields t, 2t, ... makes the time map visible
    seg = np.arange(20, dtype=float)[:, None, None, None] * np.ones((20, 1, 8, 8))
    out = D.scale_frames(seg, start=6, l=4, horizon=2, lam=np.sqrt(2), channel_rep="scalar")
    # anchor = 9, frames at 9 + 2 (j - 3)
    np.testing.assert_allclose(out[:, 0, 4, 4], [3, 5, 7, 9, 11, 13], atol=1e-9)


def test_scale_frames_spatial_part_matches_rescale():
    rng = np.random.default_rng(0)
    seg = rng.normal(size=(12, 2, 10, 10))
    out = D.scale_frames(seg, 2, 3, 2, 1.3, "vector2")
    assert out.shape == (5, 2, 10, 10)
    t = 4 + 1.69 * (0 - 2)
    i0 = int(np.floor(t))
    frame = (1 - (t - i0)) * seg[i0] + (t - i0) * seg[i0 + 1]
    np.testing.assert_allclose(out[0], 1.3 * rescale_grid(frame, 1.3), atol=1e-12)


# -- files --------------------------------------------------------------------

def test_dataset_file_roundtrip(tmp_path):
    traj = D.generate_corpus(SMALL)[0]
    h = SMALL.config_hash()
    D.write_trajectory(tmp_path / "a.eqdy", traj, h)
    back, hh = D.read_trajectory(tmp_path / "a.eqdy")
    assert hh == h and back.alpha == traj.alpha and back.dt == traj.dt
    np.testing.assert_array_equal(back.frames, traj.frames)
    raw = (tmp_path / "a.eqdy").read_bytes()
    assert raw[:4] == b"EQDY" and len(raw) == 4 + 20 + 24 + traj.frames.size * 8 + 64


def test_dataset_file_rejects_corruption(tmp_path):
    traj = D.generate_corpus(SMALL)[0]
    p = tmp_path / "a.eqdy"
    D.write_trajectory(p, traj, SMALL.config_hash())
    raw = p.read_bytes()
    p.write_bytes(raw[:-10])
    with pytest.raises(ValueError):
        D.read_trajectory(p)
    p.write_bytes(b"XXXX" + raw[4:])
    with pytest.raises(ValueError):
        D.read_trajectory(p)
    with pytest.raises(ValueError):
        D.write_trajectory(p, traj, "abc")
