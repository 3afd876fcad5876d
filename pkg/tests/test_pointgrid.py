import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from dualrecon import pointgrid as pg
from dualrecon.selftest import interpolate_reference, knn_reference, scatter_mean_reference
from dualrecon.tensor.engine import Tensor


def _pc(coords):
    return pg.PointCloud(np.asarray(coords, dtype=np.float64), np.zeros(3), 1.0)


def test_normalize_fixpoint():
    raw = np.array([[0.05, 0.05, 0.05], [0.95, 0.95, 0.95], [0.3, 0.6, 0.2]])
    np.testing.assert_allclose(pg.normalize_points(raw).coords, raw, atol=1e-6)


def test_normalize_single_point_goes_to_center():
    pc = pg.normalize_points(np.tile([[3.0, -1.0, 7.0]], (5, 1)))
    np.testing.assert_array_equal(pc.coords, 0.5)
    np.testing.assert_allclose(pc.to_world(pc.coords), np.tile([[3.0, -1.0, 7.0]], (5, 1)))


@settings(max_examples=25, deadline=None)
@given(st.integers(1, 200), st.floats(0.01, 100), st.integers(0, 2**31 - 1))
def test_normalize_round_trip(n, spread, seed):
    raw = np.random.default_rng(seed).normal(size=(n, 3)) * spread + 7.0
    pc = pg.normalize_points(raw)
    assert pc.coords.min() >= 0.0 and pc.coords.max() <= 1.0
    np.testing.assert_allclose(pc.to_world(pc.coords), raw, atol=1e-6 * max(1.0, spread))


def test_normalize_keeps_aspect_ratio():
    raw = np.array([[0, 0, 0], [4.0, 1.0, 2.0]])
    c = pg.normalize_points(raw).coords
    np.testing.assert_allclose(c[1] - c[0], np.array([4.0, 1.0, 2.0]) * 0.9 / 4.0)


def test_normalize_rejects_bad_input():
    with pytest.raises(ValueError):
        pg.normalize_points(np.zeros((0, 3)))
    with pytest.raises(ValueError):
        pg.normalize_points([[np.nan, 0, 0]])


def test_point_to_grid_single_point_triplane():
    f = np.array([[1.0, -2.0, 3.0]])
    g = pg.point_to_grid(_pc([[0.5, 0.5, 0.5]]), Tensor(f), 4, "triplane").data.data
    for p in range(3):
        nz = np.argwhere(np.any(g[p] != 0, axis=-1))
        assert len(nz) == 1
        np.testing.assert_array_equal(g[p][tuple(nz[0])], f[0])


def test_point_to_grid_two_points_mean(f64):
    f = np.array([[1.0, 2.0], [3.0, 6.0]])
    g = pg.point_to_grid(_pc([[0.1, 0.1, 0.1], [0.12, 0.11, 0.1]]), Tensor(f), 4, "voxel").data.data
    np.testing.assert_array_equal(g[0, 0, 0], [2.0, 4.0])
    assert np.count_nonzero(np.any(g != 0, axis=-1)) == 1


@pytest.mark.parametrize("kind", ["triplane", "voxel"])
def test_point_to_grid_matches_double_loop(f64, rng, kind):
    coords = rng.uniform(size=(64, 3))
    feats = rng.standard_normal((64, 5))
    got = pg.point_to_grid(_pc(coords), Tensor(feats), 4, kind).data.data
    order = pg.canonical_order(coords)
    ref = scatter_mean_reference(coords[order], feats[order], 4, kind)
    np.testing.assert_array_equal(got, ref)


@pytest.mark.parametrize("kind,factor", [("triplane", 3.0), ("voxel", 1.0)])
def test_interpolate_constant_grid(rng, kind, factor):
    v = rng.standard_normal(6)
    shape = (3, 5, 5, 6) if kind == "triplane" else (5, 5, 5, 6)
    g = pg.GridLatent(kind, Tensor(np.broadcast_to(v, shape).copy()))
    out = pg.interpolate(g, rng.uniform(size=(40, 3))).data
    np.testing.assert_allclose(out, np.broadcast_to(factor * v, out.shape), rtol=1e-5, atol=1e-5)


def test_interpolate_at_voxel_center(rng):
    R = 6
    data = rng.standard_normal((R, R, R, 3))
    g = pg.GridLatent("voxel", Tensor(data))
    out = pg.interpolate(g, np.array([[(2 + 0.5) / R, (4 + 0.5) / R, (1 + 0.5) / R]])).data
    np.testing.assert_allclose(out[0], data[2, 4, 1], rtol=1e-6)


@pytest.mark.parametrize("kind", ["triplane", "voxel"])
def test_interpolate_matches_corner_enumeration(f64, rng, kind):
    R = 7
    shape = (3, R, R, 4) if kind == "triplane" else (R, R, R, 4)
    data = rng.standard_normal(shape)
    x = rng.uniform(size=(100, 3))
    got = pg.interpolate(pg.GridLatent(kind, Tensor(data)), x).data
    np.testing.assert_allclose(got, interpolate_reference(data, x, kind), atol=1e-6)


@pytest.mark.parametrize("kind", ["triplane", "voxel"])
def test_weights_partition_of_unity(rng, kind):
    _, w = pg.interpolation_stencil(rng.uniform(-0.1, 1.1, size=(200, 3)), 5, kind)
    per = w.reshape(200, 3, 4).sum(-1) if kind == "triplane" else w.sum(-1)
    np.testing.assert_allclose(per, 1.0, atol=1e-12)


@pytest.mark.parametrize("kind", ["triplane", "voxel"])
def test_sum_scatter_adjoint_of_gather(f64, rng, kind):
    R, d, n = 5, 3, 40
    coords = rng.uniform(size=(n, 3))
    v = rng.standard_normal((n, d))
    shape = (3, R, R, d) if kind == "triplane" else (R, R, R, d)
    w = rng.standard_normal(shape)
    lhs = np.sum(pg.point_to_grid(_pc(coords), Tensor(v), R, kind, reduce="sum").data.data * w)
    rhs = np.sum(v * pg.grid_gather_sum_adjoint(pg.GridLatent(kind, Tensor(w)), coords).data)
    assert abs(lhs - rhs) <= 1e-6 * max(1.0, abs(lhs))


def test_knn_examples():
    pc = _pc([[0.1, 0, 0], [0.2, 0, 0], [0.3, 0, 0]])
    c, _ = pg.knn(np.array([0.21, 0, 0]), pc, None, 2)
    np.testing.assert_array_equal(c[:, 0], [0.2, 0.3])
    c, _ = pg.knn(np.array([0.3, 0, 0]), pc, None, 1)
    np.testing.assert_array_equal(c[0], [0.3, 0, 0])


def test_knn_k_too_large():
    with pytest.raises(ValueError, match="K=4"):
        pg.knn(np.zeros(3), _pc(np.zeros((3, 3))), None, 4)


def test_knn_matches_brute_force(rng):
    p = rng.uniform(size=(1000, 3))
    q = rng.uniform(size=(50, 3))
    np.testing.assert_array_equal(pg.knn_indices(q, p, 32), knn_reference(q, p, 32))


def test_knn_ties_by_index():
    p = np.array([[1.0, 0, 0], [-1.0, 0, 0], [0, 1.0, 0], [0, 0, 2.0]])
    np.testing.assert_array_equal(pg.knn_indices(np.zeros((1, 3)), p, 3)[0], [0, 1, 2])


def test_knn_permutation_invariant(rng):
    p = np.round(rng.uniform(size=(300, 3)), 1)  # many exact ties
    q = rng.uniform(size=(20, 3))
    perm = rng.permutation(300)
    base = pg.knn_indices(q, p, 10)
    permuted = perm[pg.knn_indices(q, p[perm], 10)]
    for r in range(len(q)):
        d0 = np.linalg.norm(p[base[r]] - q[r], axis=1)
        d1 = np.linalg.norm(p[permuted[r]] - q[r], axis=1)
        np.testing.assert_array_equal(d0, d1)
        np.testing.assert_array_equal(np.sort(d0), d0)
    np.testing.assert_array_equal(knn_reference(q, p[perm], 10), pg.knn_indices(q, p[perm], 10))


def test_window_sizes_examples():
    part = pg.sort_and_split(np.random.default_rng(0).uniform(size=(100, 3)), "x", 25)
    assert np.all(np.diff(part.window_bounds) == 4) and part.n_windows == 25
    np.testing.assert_array_equal(pg.window_sizes(10, 3), [4, 3, 3])


def test_sort_stable_on_ties():
    part = pg.sort_and_split(np.full((9, 3), 0.4), 1, 2)
    np.testing.assert_array_equal(part.sorted_index, np.arange(9))


def test_sort_and_split_rejects_too_many_windows():
    with pytest.raises(ValueError):
        pg.sort_and_split(np.zeros((3, 3)), 0, 4)


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 120), st.data())
def test_partition_invariants(N, data):
    L = data.draw(st.integers(1, N))
    axis = data.draw(st.sampled_from(["x", "y", "z"]))
    coords = np.random.default_rng(N * 31 + L).uniform(size=(N, 3))
    part = pg.sort_and_split(coords, axis, L)
    b = part.window_bounds
    assert b[0] == 0 and b[-1] == N and np.all(np.diff(b) > 0)
    assert np.ptp(np.diff(b)) <= 1
    np.testing.assert_array_equal(np.sort(part.sorted_index), np.arange(N))
    assert np.all(np.diff(coords[part.sorted_index, pg.AXES[axis]]) >= 0)


def test_unsort_round_trip(rng):
    coords = rng.uniform(size=(30, 3))
    feats = Tensor(rng.standard_normal((30, 4)))
    part = pg.sort_and_split(coords, 2, 7)
    np.testing.assert_array_equal(pg.unsort(part, pg.apply_sort(part, feats)).data, feats.data)


def test_unsort_identity_and_reverse():
    x = Tensor(np.arange(8.0).reshape(4, 2))
    ident = pg.WindowPartition(np.arange(4), np.array([0, 4]), 0)
    np.testing.assert_array_equal(pg.unsort(ident, x).data, x.data)
    rev = pg.WindowPartition(np.arange(4)[::-1].copy(), np.array([0, 4]), 0)
    np.testing.assert_array_equal(pg.unsort(rev, x).data, x.data[::-1])


def test_unsort_row_mismatch():
    part = pg.WindowPartition(np.arange(4), np.array([0, 4]), 0)
    with pytest.raises(ValueError, match="rows"):
        pg.unsort(part, Tensor(np.zeros((3, 2))))


def test_grid_latent_validation():
    with pytest.raises(ValueError):
        pg.GridLatent("triplane", Tensor(np.zeros((2, 4, 4, 1))))
    with pytest.raises(ValueError):
        pg.GridLatent("voxel", Tensor(np.zeros((1, 1, 1, 1))))
