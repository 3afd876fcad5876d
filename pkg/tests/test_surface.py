import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from dualrecon import pointgrid as pg
from dualrecon import surface
from dualrecon.model import DualLatentModel
from dualrecon.oracles import Box, Sphere
from dualrecon.selftest import marching_sphere
from dualrecon.surface import Mesh, OccupancyGrid, eval_occupancy_grid, marching_cubes, metrics
from dualrecon.tensor import engine as E


def smooth_field(oracle, G, width=2.0):
    """Occupancy-like values that fall linearly across the surface, crossing 0.5 exactly on it."""
    pts = OccupancyGrid.cell_centers(G)
    return OccupancyGrid(np.clip(0.5 - oracle.sdf(pts) * G / width, 0, 1).reshape(G, G, G))


def square(z):
    v = np.array([[0, 0, z], [1, 0, z], [1, 1, z], [0, 1, z]], dtype=float)
    return Mesh(v, [[0, 1, 2], [0, 2, 3]])


def _encoded(tiny_cfg, seed=0):
    model = DualLatentModel(tiny_cfg, seed=seed)
    raw = Sphere().surface_sample(48, np.random.default_rng(seed))[0]
    with E.no_grad():
        lat = model.encode(pg.normalize_points(raw))
    return model, lat


def test_eval_grid_chunk_invariant(tiny_cfg):
    model, lat = _encoded(tiny_cfg)
    field = surface.model_field(model, lat)
    a = eval_occupancy_grid(field, 4, chunk=4 ** 3).values
    b = eval_occupancy_grid(field, 4, chunk=1).values
    np.testing.assert_allclose(a, b, atol=1e-6)


def test_zero_bias_untrained_model_gives_half(tiny_cfg):
    model, lat = _encoded(tiny_cfg)
    model.decoder.w_out.weight.data[:] = 0  # head reduces to its zero bias
    grid = eval_occupancy_grid(surface.model_field(model, lat), 6).values
    np.testing.assert_array_equal(grid, 0.5)


def test_g2_evaluates_eight_corner_centres():
    seen = []

    def field(x):
        seen.append(np.array(x))
        return np.zeros(len(x))

    eval_occupancy_grid(field, 2)
    pts = np.concatenate(seen)
    assert len(pts) == 8
    np.testing.assert_array_equal(np.unique(pts), [0.25, 0.75])
    assert len({tuple(p) for p in pts}) == 8


def test_grid_validation():
    with pytest.raises(ValueError):
        OccupancyGrid(np.full((3, 3, 3), 1.5))
    with pytest.raises(ValueError):
        eval_occupancy_grid(lambda x: np.zeros(len(x)), 1)


def test_below_iso_everywhere_is_empty():
    mesh = marching_cubes(OccupancyGrid(np.full((8, 8, 8), 0.4)))
    assert mesh.is_empty and len(mesh.vertices) == 0


def test_sphere_at_g32_closed_and_accurate():
    mesh, err = marching_sphere(32)
    assert mesh.is_closed_manifold()
    assert err < 1.5
    assert mesh.signed_volume() > 0  # outward orientation
    assert not np.isnan(mesh.vertices).any()
    _, area = mesh.face_normals()
    assert area.min() > 0


def test_binary_sphere_grid_is_closed():
    G = 32
    grid = surface.eval_occupancy_grid(surface.oracle_field(Sphere()), G)
    mesh = marching_cubes(grid)
    assert mesh.is_closed_manifold()
    r = np.linalg.norm(mesh.vertices - 0.5, axis=1)
    assert np.abs(r - 0.35).mean() * G < 1.5


def test_case_table_complete():
    counts = [len(surface.case_triangles(c)[0]) for c in range(256)]
    assert counts[0] == counts[255] == 0
    assert all(n > 0 for n in counts[1:255])
    # complementary cases produce the same number of polygons
    for c in range(256):
        assert len(surface.case_polygons(c)) == len(surface.case_polygons(255 - c, 0b111111))


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31 - 1), st.sampled_from([3, 5, 8]))
def test_random_fields_give_closed_manifolds(seed, G):
    v = np.random.default_rng(seed).uniform(size=(G, G, G))
    v = np.pad(v, 1)  # zero border so every surface closes
    mesh = marching_cubes(OccupancyGrid(v))
    if mesh.is_empty:
        return
    assert mesh.is_closed_manifold()
    assert mesh.triangles.max() < len(mesh.vertices) and not np.isnan(mesh.vertices).any()
    assert mesh.face_normals()[1].min() > 0


def test_marching_cubes_positions_within_cube():
    mesh = marching_cubes(smooth_field(Box(), 16))
    assert mesh.vertices.min() > 0 and mesh.vertices.max() < 1


def test_metrics_identity():
    mesh, _ = marching_sphere(24)
    rep = metrics(mesh, mesh, n_samples=2000, n_probes=20000)
    assert rep.chamfer_l1 < 1e-9
    assert rep.fscore == 1.0 and rep.iou == 1.0
    assert rep.nc == pytest.approx(1.0, abs=1e-9)


def test_metrics_parallel_squares():
    rep = metrics(square(0.3), square(0.32), n_samples=2000, n_probes=1000)
    assert rep.chamfer_l1 == pytest.approx(2.0, abs=1e-9)
    assert rep.fscore == 0.0
    assert rep.nc == pytest.approx(1.0)


def test_metrics_nested_spheres():
    inner = marching_cubes(smooth_field(Sphere(radius=0.3), 64))
    rep = metrics(inner, Sphere(radius=0.4), n_samples=2000, n_probes=100000)
    # 100k probes: std of the ratio is about 0.003
    assert rep.iou == pytest.approx((0.3 / 0.4) ** 3, abs=0.012)
    assert rep.chamfer_l1 == pytest.approx(10.0, abs=0.2)


def test_metrics_symmetric_and_bounded():
    a = marching_cubes(smooth_field(Sphere(radius=0.3), 24))
    b = marching_cubes(smooth_field(Box(), 24))
    ab = metrics(a, b, n_samples=3000, n_probes=5000)
    ba = metrics(b, a, n_samples=3000, n_probes=5000)
    assert ab.chamfer_l1 == pytest.approx(ba.chamfer_l1, rel=1e-12)
    assert ab.fscore == pytest.approx(ba.fscore) and ab.iou == pytest.approx(ba.iou)
    for r in (ab, ba):
        assert 0 <= r.fscore <= 1 and 0 <= r.nc <= 1 and 0 <= r.iou <= 1


def test_metrics_against_oracle():
    mesh = marching_cubes(smooth_field(Sphere(), 48))
    rep = metrics(mesh, Sphere(), n_samples=5000, n_probes=20000)
    assert rep.chamfer_l1 < 0.2 and rep.fscore > 0.99 and rep.nc > 0.99 and rep.iou > 0.98
    assert set(rep.to_dict()) == {"iou", "chamfer_l1", "nc", "fscore", "n_samples", "seed", "n_probes"}


def test_metrics_empty_prediction_warns():
    with pytest.warns(RuntimeWarning, match="empty"):
        rep = metrics(Mesh(np.zeros((0, 3)), np.zeros((0, 3))), Sphere(), n_samples=100, n_probes=1000)
    assert rep.chamfer_l1 == surface.WORST_CHAMFER and rep.fscore == 0 and rep.nc == 0


def test_mesh_distance_matches_brute_force(rng):
    mesh = marching_cubes(smooth_field(Box(), 12))
    pts = rng.uniform(size=(200, 3))
    d, _ = surface.mesh_distance(pts, mesh)
    v = mesh.vertices[mesh.triangles]
    ref = np.empty(len(pts))
    for i, p in enumerate(pts):
        cp = surface.closest_point_on_triangles(np.repeat(p[None], len(v), 0), v[:, 0], v[:, 1], v[:, 2])
        ref[i] = np.linalg.norm(cp - p, axis=1).min()
    np.testing.assert_allclose(d, ref, atol=1e-12)


def test_inside_mesh_matches_oracle(rng):
    mesh = marching_cubes(smooth_field(Sphere(), 40))
    pts = rng.uniform(size=(5000, 3))
    inside = surface.inside_mesh(pts, mesh)
    r = np.linalg.norm(pts - 0.5, axis=1)
    clear = np.abs(r - 0.35) > 0.01
    np.testing.assert_array_equal(inside[clear], (r < 0.35)[clear])


def test_mesh_rejects_bad_indices():
    with pytest.raises(ValueError):
        Mesh(np.zeros((3, 3)), [[0, 1, 3]])
