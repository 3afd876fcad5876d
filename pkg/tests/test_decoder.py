import numpy as np
import pytest

from dualrecon import pointgrid as pg
from dualrecon.decoder import N_BLOCKS, ImplicitDecoder, iid_forward
from dualrecon.tensor import engine as E
from dualrecon.tensor.engine import Tensor
from dualrecon.tensor.nn import make_rng

D, R, N = 4, 8, 30


@pytest.fixture
def setup(rng):
    dec = ImplicitDecoder(D, 2, make_rng(0))
    pc = pg.PointCloud(rng.uniform(size=(N, 3)), np.zeros(3), 1.0)
    grid = pg.GridLatent("triplane", Tensor(rng.standard_normal((3, R, R, D))))
    c = Tensor(rng.standard_normal((N, D)))
    return dec, pc, grid, c


def test_four_separate_blocks(setup):
    dec = setup[0]
    assert len(dec.blocks) == N_BLOCKS == 4
    assert len({id(b.wq.weight) for b in dec.blocks}) == 4


def test_zero_latents_give_half(setup):
    dec, pc, _, _ = setup
    grid = pg.GridLatent("triplane", Tensor(np.zeros((3, R, R, D))))
    logits = iid_forward(dec, grid, pc, Tensor(np.zeros((N, D))), np.random.default_rng(0).uniform(size=(7, 3)), 5)
    np.testing.assert_array_equal(logits.data, 0.0)
    np.testing.assert_array_equal(E.sigmoid(logits).data, 0.5)


def test_identical_queries_identical_logits(setup):
    dec, pc, grid, c = setup
    q = np.array([[0.3, 0.4, 0.5], [0.3, 0.4, 0.5], [0.9, 0.1, 0.2]])
    out = iid_forward(dec, grid, pc, c, q, 6).data
    assert out[0] == out[1]


def test_batched_equals_one_by_one(setup, rng):
    dec, pc, grid, c = setup
    q = rng.uniform(size=(12, 3))
    batched = iid_forward(dec, grid, pc, c, q, 6).data
    single = np.array([iid_forward(dec, grid, pc, c, q[i:i + 1], 6).data[0] for i in range(len(q))])
    np.testing.assert_allclose(batched, single, atol=1e-6)


def test_k_larger_than_n(setup):
    dec, pc, grid, c = setup
    with pytest.raises(ValueError, match="K=31"):
        iid_forward(dec, grid, pc, c, np.full((1, 3), 0.5), N + 1)


def test_locality_of_point_latents(setup):
    dec, pc, grid, c = setup
    q = np.array([[0.2, 0.2, 0.2]])
    K = 5
    nbr = pg.knn_indices(q, pc.coords, K)[0]
    far = [j for j in range(N) if j not in nbr]
    base = iid_forward(dec, grid, pc, c, q, K).data
    c2 = c.data.copy()
    c2[far] += 10.0
    np.testing.assert_array_equal(iid_forward(dec, grid, pc, Tensor(c2), q, K).data, base)
    c2 = c.data.copy()
    c2[nbr[0]] += 1.0
    assert iid_forward(dec, grid, pc, Tensor(c2), q, K).data[0] != base[0]


def test_locality_of_grid_cells(setup):
    dec, pc, grid, c = setup
    q = np.array([[0.2, 0.2, 0.2]])
    K = 5
    nbr = pg.knn_indices(q, pc.coords, K)[0]
    touched, _ = pg.interpolation_stencil(np.concatenate([q, pc.coords[nbr]]), R, "triplane")
    rows = grid.data.data.reshape(-1, D).copy()
    untouched = np.setdiff1d(np.arange(len(rows)), touched.ravel())
    rows[untouched] += 5.0
    moved = pg.GridLatent("triplane", Tensor(rows.reshape(grid.data.shape)))
    np.testing.assert_array_equal(iid_forward(dec, moved, pc, c, q, K).data,
                                  iid_forward(dec, grid, pc, c, q, K).data)


def test_point_order_invariance(setup, rng):
    dec, pc, grid, c = setup
    q = rng.uniform(size=(9, 3))
    perm = rng.permutation(N)
    base = iid_forward(dec, grid, pc, c, q, 7).data
    pc2 = pg.PointCloud(pc.coords[perm], pc.center, pc.scale)
    np.testing.assert_array_equal(iid_forward(dec, grid, pc2, Tensor(c.data[perm]), q, 7).data, base)


def test_probabilities_strictly_inside_unit_interval(setup, rng):
    dec, pc, grid, c = setup
    p = E.sigmoid(iid_forward(dec, grid, pc, c, rng.uniform(size=(50, 3)), 6)).data
    assert np.all((p > 0) & (p < 1))


def test_bce_decoder_gradients():
    from dualrecon import gradcheck
    results = gradcheck.run("decoder", composite_trials=2)
    assert all(r.passed for r in results), [gradcheck.format_row(r) for r in results]
