"""Invariant suite run by ``dualrecon selftest``: reference oracles, exact symmetries, meshing, determinism."""
from __future__ import annotations

import math
import tempfile
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import numpy as np

from . import gradcheck, io, pointgrid as pg, surface
from .attention import AttentionBlock, DSPTBlock, axis_partitions, dense_self_attention, windowed_self_attention
from .config import RunConfig
from .model import DualLatentModel, ModelConfig
from .oracles import Sphere
from .tensor import engine as E
from .tensor import checkpoint
from .tensor.engine import Tensor
from .tensor.nn import make_rng
from .trainer import TrainConfig, bce_loss, cosine_lr, train


@dataclass
class Outcome:
    name: str
    passed: bool
    detail: str
    seconds: float = 0.0

    def row(self) -> str:
        return f"{'PASS' if self.passed else 'FAIL'}  {self.name:<32} {self.detail}  ({self.seconds:.1f}s)"


# reference implementations, written as plain loops
def knn_reference(q: np.ndarray, p: np.ndarray, K: int) -> np.ndarray:
    out = np.empty((len(q), K), dtype=np.int64)
    for i, x in enumerate(q):
        d = [(float(np.sum((x - y) ** 2)), j) for j, y in enumerate(p)]
        out[i] = [j for _, j in sorted(d)[:K]]
    return out


def scatter_mean_reference(coords: np.ndarray, feats: np.ndarray, R: int, kind: str) -> np.ndarray:
    d = feats.shape[1]
    if kind == "voxel":
        acc, cnt = np.zeros((R, R, R, d)), np.zeros((R, R, R))
        for x, f in zip(coords, feats):
            i, j, k = (min(int(math.floor(v * R)), R - 1) for v in x)
            acc[i, j, k] += f
            cnt[i, j, k] += 1
        return acc * (1.0 / np.maximum(cnt, 1))[..., None]
    acc, cnt = np.zeros((3, R, R, d)), np.zeros((3, R, R))
    for x, f in zip(coords, feats):
        cell = [min(int(math.floor(v * R)), R - 1) for v in x]
        for p, (a, b) in enumerate(pg.PLANE_AXES):
            acc[p, cell[a], cell[b]] += f
            cnt[p, cell[a], cell[b]] += 1
    return acc * (1.0 / np.maximum(cnt, 1))[..., None]


def interpolate_reference(grid: np.ndarray, x: np.ndarray, kind: str) -> np.ndarray:
    """Explicit enumeration of the 4 (per plane) or 8 surrounding cell centres."""
    R = grid.shape[1]

    def axis_weights(u):
        t = min(max(u * R - 0.5, 0.0), R - 1.0)
        i0 = min(int(math.floor(t)), R - 2)
        return [(i0, 1 - (t - i0)), (i0 + 1, t - i0)]

    out = np.zeros((len(x), grid.shape[-1]))
    for n, p in enumerate(x):
        w = [axis_weights(v) for v in p]
        if kind == "voxel":
            for i, wi in w[0]:
                for j, wj in w[1]:
                    for k, wk in w[2]:
                        out[n] += wi * wj * wk * grid[i, j, k]
        else:
            for plane, (a, b) in enumerate(pg.PLANE_AXES):
                for i, wi in w[a]:
                    for j, wj in w[b]:
                        out[n] += wi * wj * grid[plane, i, j]
    return out


def check_knn(seed: int = 0) -> tuple[bool, str]:
    rng = np.random.default_rng(seed)
    ok = True
    for N, K in ((50, 1), (64, 7), (40, 40)):
        p = rng.uniform(size=(N, 3))
        p[5] = p[3]  # a duplicated point exercises tie-breaking
        q = np.concatenate([rng.uniform(size=(20, 3)), p[:3]])
        ok &= np.array_equal(pg.knn_indices(q, p, K, chunk=7), knn_reference(q, p, K))
    return bool(ok), "exact match with brute force"


def check_window_vs_dense(seed: int = 0) -> tuple[bool, str]:
    rng = make_rng(seed)
    with E.precision(np.float64):
        blk = AttentionBlock(12, 3, rng)
        x = Tensor(rng.standard_normal((37, 12)))
        coords = rng.uniform(size=(37, 3))
        part = pg.sort_and_split(coords, 0, 1)
        win = pg.unsort(part, windowed_self_attention(blk, pg.apply_sort(part, x), coords[part.sorted_index],
                                                      part.window_bounds))
        dense = dense_self_attention(blk, x, coords)
    err = float(np.abs(win.data - dense.data).max())
    return err <= 1e-5, f"max |diff| = {err:.1e}"


def check_scatter_mean(seed: int = 0) -> tuple[bool, str]:
    rng = np.random.default_rng(seed)
    ok = True
    for kind in ("triplane", "voxel"):
        coords = rng.uniform(size=(80, 3))
        feats = rng.standard_normal((80, 3))
        pc = pg.PointCloud(coords, np.zeros(3), 1.0)
        with E.precision(np.float64):
            g = pg.point_to_grid(pc, Tensor(feats), 5, kind).data.data
        # the reference adds in coordinate-sorted order too, so rounding matches exactly
        order = pg.canonical_order(coords)
        ok &= np.array_equal(g, scatter_mean_reference(coords[order], feats[order], 5, kind))
    return bool(ok), "exact match with double loop"


def check_interpolation(seed: int = 0) -> tuple[bool, str]:
    rng = np.random.default_rng(seed)
    err = 0.0
    for kind, shape in (("triplane", (3, 6, 6, 4)), ("voxel", (6, 6, 6, 4))):
        data = rng.standard_normal(shape)
        x = np.concatenate([rng.uniform(size=(50, 3)), [[0, 0, 0], [1, 1, 1], [0.01, 0.99, 0.5]]])
        with E.precision(np.float64):
            got = pg.interpolate(pg.GridLatent(kind, Tensor(data)), x).data
        err = max(err, float(np.abs(got - interpolate_reference(data, x, kind)).max()))
    return err <= 1e-6, f"max |diff| = {err:.1e}"


def check_dspt_equivariance(seed: int = 0) -> tuple[bool, str]:
    rng = make_rng(seed)
    blk = DSPTBlock(8, 2, rng)
    coords = rng.uniform(size=(64, 3))
    c = rng.standard_normal((64, 8)).astype(np.float32)
    perm = rng.permutation(64)
    out = blk(Tensor(c), coords, axis_partitions(coords, 5)).data
    out_p = blk(Tensor(c[perm]), coords[perm], axis_partitions(coords[perm], 5)).data
    return bool(np.array_equal(out[perm], out_p)), "bit-exact under point permutation"


def check_encoder_equivariance(seed: int = 0) -> tuple[bool, str]:
    rng = make_rng(seed)
    model = DualLatentModel(ModelConfig(R=8, d=4, L=4, K=8, heads=2, k_conv=8), seed=seed)
    raw = rng.uniform(size=(48, 3))
    perm = rng.permutation(48)
    with E.no_grad():
        a = model.encode(pg.normalize_points(raw))
        b = model.encode(pg.normalize_points(raw[perm]))
        q = rng.uniform(size=(16, 3))
        la, lb = model.decode(a, q).data, model.decode(b, q).data
    ok = (np.array_equal(a.points.data[perm], b.points.data) and np.array_equal(a.grid.data.data, b.grid.data.data)
          and np.array_equal(la, lb))
    return bool(ok), "point latents permute, grid and logits identical"


def check_rope_translation(seed: int = 0) -> tuple[bool, str]:
    rng = make_rng(seed)
    with E.precision(np.float64):
        blk = AttentionBlock(12, 2, rng)
        x = Tensor(rng.standard_normal((1, 10, 12)))
        coords = rng.uniform(size=(1, 10, 3))
        shift = rng.uniform(-3, 3, size=3)
        w0 = blk.weights(x, x, coords, coords).data
        w1 = blk.weights(x, x, coords + shift, coords + shift).data
    err = float(np.abs(w0 - w1).max())
    return err <= 1e-5, f"max |diff| = {err:.1e}"


def check_partition_bijection(seed: int = 0) -> tuple[bool, str]:
    rng = np.random.default_rng(seed)
    ok = True
    for N, L in ((10, 3), (64, 8), (7, 7), (100, 1)):
        coords = rng.integers(0, 4, size=(N, 3)).astype(float)  # many ties
        for ax in range(3):
            part = pg.sort_and_split(coords, ax, L)
            idx = part.sorted_index
            sizes = np.diff(part.window_bounds)
            ok &= np.array_equal(np.sort(idx), np.arange(N))
            ok &= np.array_equal(part.inverse[idx], np.arange(N))
            ok &= sizes.sum() == N and sizes.max() - sizes.min() <= 1 and len(sizes) == L
            ok &= bool(np.all(np.diff(coords[idx, ax]) >= 0))
    return bool(ok), "permutation, inverse and window sizes"


def check_loss_schedule() -> tuple[bool, str]:
    with E.precision(np.float64):
        uniform = float(bce_loss(Tensor(np.zeros(6)), [0, 1, 1, 0, 1, 0]).data)
        p = np.array([0.9, 0.2, 0.5])
        three = float(bce_loss(Tensor(np.log(p / (1 - p))), [1, 0, 1]).data)
    expect = -(math.log(0.9) + math.log(0.8) + math.log(0.5)) / 3
    ok = abs(uniform - math.log(2)) <= 1e-6 and abs(three - expect) <= 1e-4 and abs(three - 0.3405) <= 1e-4
    ok &= cosine_lr(0, 100, 1e-4) == 1e-4 and cosine_lr(100, 100, 1e-4, 1e-6) == 1e-6
    return bool(ok), f"ln2 case {uniform:.7f}, three-sample case {three:.5f}"


def marching_sphere(G: int = 32) -> tuple[surface.Mesh, float]:
    sphere = Sphere()
    mesh = surface.marching_cubes(surface.eval_occupancy_grid(surface.oracle_field(sphere), G))
    radial = float(np.abs(np.linalg.norm(mesh.vertices - 0.5, axis=1) - sphere.radius).mean() * G)
    return mesh, radial


def check_marching_cubes() -> tuple[bool, str]:
    mesh, radial = marching_sphere(32)
    ok = mesh.is_closed_manifold() and radial < 1.5
    return ok, f"closed manifold={mesh.is_closed_manifold()}, mean radial error {radial:.3f} cells"


def tiny_run(out_dir, seed: int = 0, steps: int = 3) -> Path:
    model = DualLatentModel(ModelConfig(R=8, d=4, L=4, K=8, heads=2, k_conv=8), seed=seed)
    cfg = TrainConfig(epochs=steps, lr=1e-3, M=64, N=48, seed=seed)
    return train(model, cfg, [Sphere()], out_dir).final_checkpoint


def check_determinism() -> tuple[bool, str]:
    with tempfile.TemporaryDirectory() as tmp:
        a = tiny_run(Path(tmp) / "a")
        b = tiny_run(Path(tmp) / "b")
        same = a.read_bytes() == b.read_bytes()
        loaded = checkpoint.load(a)
        checkpoint.save(Path(tmp) / "c.dtck", loaded)
        same_rt = (Path(tmp) / "c.dtck").read_bytes() == a.read_bytes()
    return same and same_rt, "two seeded runs give identical checkpoint bytes"


def check_formats() -> tuple[bool, str]:
    rng = np.random.default_rng(0)
    with tempfile.TemporaryDirectory() as tmp:
        path = Path(tmp) / "p.dptc"
        io.write_dptc(path, rng.uniform(size=(20, 3)), rng.standard_normal((20, 3)))
        first = path.read_bytes()
        io.write_dptc(path, *io.read_dptc(path))
        dptc_ok = path.read_bytes() == first
    doc = {"model": {"R": 8, "d": 4, "L": 4, "K": 8, "heads": 2}, "train": {"epochs": 2}, "data": {"oracle": "sphere"}}
    cfg = RunConfig.from_dict(doc)
    cfg_ok = RunConfig.from_dict(cfg.to_dict()) == cfg
    return dptc_ok and cfg_ok, "DPTC and config round trips"


def check_gradients() -> tuple[bool, str]:
    results = gradcheck.run("all")
    worst = max(r.max_rel_err for r in results)
    failed = [r.name for r in results if not r.passed]
    return not failed, f"{len(results)} checks, worst rel err {worst:.1e}" + (f", failed: {failed}" if failed else "")


CHECKS: dict[str, Callable[[], tuple[bool, str]]] = {
    "gradients": check_gradients,
    "knn_vs_brute_force": check_knn,
    "windowed_vs_dense_attention": check_window_vs_dense,
    "scatter_mean_vs_loop": check_scatter_mean,
    "interpolation_vs_corners": check_interpolation,
    "dspt_permutation": check_dspt_equivariance,
    "encoder_permutation": check_encoder_equivariance,
    "rope_translation": check_rope_translation,
    "window_partition_bijection": check_partition_bijection,
    "loss_and_schedule": check_loss_schedule,
    "marching_cubes_sphere": check_marching_cubes,
    "file_formats": check_formats,
    "determinism": check_determinism,
}


def run(report: Callable[[Outcome], None] | None = None) -> list[Outcome]:
    out = []
    for name, fn in CHECKS.items():
        t0 = time.perf_counter()
        try:
            ok, detail = fn()
        except Exception as exc:  # a crash is a failed check, reported with the rest
            ok, detail = False, f"{type(exc).__name__}: {exc}"
        out.append(Outcome(name, bool(ok), detail, time.perf_counter() - t0))
        if report:
            report(out[-1])
    return out
