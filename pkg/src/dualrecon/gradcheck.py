"""Finite-difference verification of every differentiable op and the network composites.

Primitives are checked element by element; composites along random
directions in the joint space of parameters and inputs.  Everything runs in
64-bit mode with central differences.
"""
from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import pointgrid as pg
from .attention import (AttentionBlock, DSPTBlock, axis_partitions, rope_embed, token_update_attention,
                        windowed_self_attention)
from .decoder import ImplicitDecoder
from .encoder import DllConfig, DualLatentLayer, PointEncoder, ThreeDAwareConv, dll_forward
from .tensor import engine as E
from .tensor.engine import Tensor
from .tensor.nn import make_rng

H = 1e-4
TOL = 1e-5
MAX_REDRAWS = 10


@dataclass
class CheckResult:
    name: str
    trials: int
    max_rel_err: float
    seconds: float
    redrawn: int = 0  # samples discarded because the stencil crossed a kink

    @property
    def passed(self) -> bool:
        return self.max_rel_err <= TOL


def rel_err(a: np.ndarray, b: np.ndarray) -> float:
    scale = max(np.linalg.norm(a), np.linalg.norm(b))
    return float(np.linalg.norm(a - b) / scale) if scale > 0 else 0.0


def check_elementwise(fn: Callable, inputs: list[np.ndarray], rng, h: float = H) -> float:
    """Compare the gradient of sum(fn(*inputs) * w) with central differences in every entry."""
    w = None

    def loss(arrs, grad=False):
        nonlocal w
        ts = [Tensor(a, requires_grad=grad) for a in arrs]
        out = fn(*ts)
        if w is None:
            w = rng.standard_normal(out.shape)
        total = E.sum_(out * w)
        if grad:
            total.backward()
            return [t.grad if t.grad is not None else np.zeros_like(t.data) for t in ts]
        return float(total.data)

    analytic = loss(inputs, grad=True)
    worst = 0.0
    for k, x in enumerate(inputs):
        num = np.zeros_like(x)
        for i in np.ndindex(x.shape):
            orig = x[i]
            x[i] = orig + h
            fp = loss(inputs)
            x[i] = orig - h
            fm = loss(inputs)
            x[i] = orig
            num[i] = (fp - fm) / (2 * h)
        worst = max(worst, rel_err(analytic[k], num))
    return worst


class KinkInStencil(ArithmeticError):
    """The difference stencil straddles a relu/max branch change, so no derivative is defined there."""


def _same_branches(a: list, b: list) -> bool:
    return len(a) == len(b) and all(np.array_equal(x, y) for x, y in zip(a, b))


def check_directional(build: Callable, rng, n_dirs: int = 3, h: float = H) -> float:
    """``build()`` -> (loss_fn, leaves); loss_fn() rebuilds the graph from the current leaf values.

    Raises :class:`KinkInStencil` when the two stencil points fall on different
    pieces of a piecewise-smooth function.
    """
    loss_fn, leaves = build()
    loss = loss_fn()
    for t in leaves:
        t.grad = None
    loss.backward()
    grads = [t.grad if t.grad is not None else np.zeros_like(t.data) for t in leaves]
    worst = 0.0
    for _ in range(n_dirs):
        dirs = [rng.standard_normal(t.shape) for t in leaves]
        norm = np.sqrt(sum(float((d * d).sum()) for d in dirs))
        dirs = [d / norm for d in dirs]
        base = [t.data.copy() for t in leaves]
        vals, branches = [], []
        for sign in (1, -1):
            for t, b, d in zip(leaves, base, dirs):
                t.data = b + sign * h * d
            with E.no_grad(), E.record_kinks() as kinks:
                vals.append(float(loss_fn().data))
            branches.append(kinks)
        for t, b in zip(leaves, base):
            t.data = b
        if not _same_branches(*branches):
            raise KinkInStencil
        num = (vals[0] - vals[1]) / (2 * h)
        ana = sum(float((g * d).sum()) for g, d in zip(grads, dirs))
        worst = max(worst, rel_err(np.array([ana]), np.array([num])))
    return worst


# primitive cases: name -> (rng -> (fn, inputs))
def _r(rng, *shape):
    return rng.standard_normal(shape)


def _away_from_zero(rng, *shape):
    x = rng.standard_normal(shape)
    return np.where(np.abs(x) < 0.05, x + np.sign(x + 1e-12) * 0.1, x)


def _distinct(rng, *shape):
    """Entries separated by more than the difference step, so max/argmax stay put."""
    n = int(np.prod(shape))
    return (rng.permutation(n) * 0.01 + rng.uniform(0, 0.002, n)).reshape(shape)


def _primitive_cases():
    idx = np.array([3, 0, 3, 1, 4, 4, 2])
    return {
        "add": lambda g: (E.add, [_r(g, 3, 4), _r(g, 4)]),
        "sub": lambda g: (E.sub, [_r(g, 3, 1), _r(g, 3, 4)]),
        "mul": lambda g: (E.mul, [_r(g, 2, 3, 4), _r(g, 3, 1)]),
        "matmul": lambda g: (E.matmul, [_r(g, 3, 4), _r(g, 4, 2)]),
        "matmul_batched": lambda g: (E.matmul, [_r(g, 2, 3, 4), _r(g, 2, 4, 2)]),
        "matmul_weight": lambda g: (E.matmul, [_r(g, 2, 3, 4), _r(g, 4, 2)]),
        "relu": lambda g: (E.relu, [_away_from_zero(g, 3, 5)]),
        "sigmoid": lambda g: (E.sigmoid, [_r(g, 3, 5)]),
        "softmax": lambda g: (E.softmax, [_r(g, 3, 5)]),
        "layer_norm": lambda g: (E.layer_norm, [_r(g, 3, 6), _r(g, 6), _r(g, 6)]),
        "bce_with_logits": lambda g: ((lambda x, t=(g.uniform(size=7) > 0.5): E.bce_with_logits(x, t)),
                                      [3 * _r(g, 7)]),
        "reshape": lambda g: ((lambda x: E.reshape(x, (6, 2))), [_r(g, 3, 4)]),
        "transpose": lambda g: ((lambda x: E.transpose(x, (2, 0, 1))), [_r(g, 2, 3, 4)]),
        "slice": lambda g: ((lambda x: x[1:, ::2]), [_r(g, 3, 5)]),
        "concat": lambda g: ((lambda a, b: E.concat([a, b], axis=-1)), [_r(g, 3, 2), _r(g, 3, 4)]),
        "gather_rows": lambda g: ((lambda x: E.gather_rows(x, idx)), [_r(g, 5, 3)]),
        "scatter_add_rows": lambda g: ((lambda x: E.scatter_add_rows(x, idx, 6)), [_r(g, 7, 3)]),
        "sum": lambda g: ((lambda x: E.sum_(x, axis=1)), [_r(g, 3, 4)]),
        "mean": lambda g: ((lambda x: E.mean(x, axis=0, keepdims=True)), [_r(g, 3, 4)]),
        "max": lambda g: ((lambda x: E.max_(x, axis=1)), [_distinct(g, 3, 4, 2)]),
        "conv2d": lambda g: (E.conv, [_r(g, 2, 5, 5, 2), _r(g, 3, 3, 2, 3), _r(g, 3)]),
        "conv3d": lambda g: (E.conv, [_r(g, 1, 3, 3, 3, 2), _r(g, 3, 3, 3, 2, 2), _r(g, 2)]),
        "conv_transpose2d": lambda g: (E.conv_transpose, [_r(g, 2, 3, 3, 2), _r(g, 2, 2, 2, 3), _r(g, 3)]),
        "conv_transpose3d": lambda g: (E.conv_transpose, [_r(g, 1, 2, 2, 2, 2), _r(g, 2, 2, 2, 2, 2), _r(g, 2)]),
        "maxpool2d": lambda g: (E.maxpool, [_distinct(g, 2, 4, 4, 2)]),
        "maxpool3d": lambda g: (E.maxpool, [_distinct(g, 1, 4, 4, 4, 1)]),
    }


def _toy_cloud(rng, n=16):
    return pg.PointCloud(rng.uniform(0.05, 0.95, size=(n, 3)), np.full(3, 0.5), 1.0)


def _params_and(module, *extra):
    """Parameters of ``module`` moved to a generic point, followed by extra leaves.

    Zero-initialised biases put ReLUs exactly on their kink for inputs that are
    exactly zero (a point's offset to itself), where no finite difference agrees
    with any one-sided derivative.
    """
    params = list(module.parameters())
    rng = np.random.default_rng(len(params))
    for p in params:
        p.data = p.data + rng.uniform(-0.1, 0.1, size=p.shape)
    return params + list(extra)


def _composite_cases():
    def rope(g):
        x = Tensor(_r(g, 10, 12), requires_grad=True)
        coords = g.uniform(size=(10, 3))
        w = _r(g, 10, 12)
        return (lambda: E.sum_(rope_embed(x, coords) * w)), [x]

    def interpolate(g):
        data = Tensor(_r(g, 3, 4, 4, 2), requires_grad=True)
        vox = Tensor(_r(g, 4, 4, 4, 2), requires_grad=True)
        x = g.uniform(size=(9, 3))
        w1, w2 = _r(g, 9, 2), _r(g, 9, 2)
        return (lambda: E.sum_(pg.interpolate(pg.GridLatent("triplane", data), x) * w1)
                + E.sum_(pg.interpolate(pg.GridLatent("voxel", vox), x) * w2)), [data, vox]

    def point_to_grid(g):
        pc = _toy_cloud(g, 12)
        c = Tensor(_r(g, 12, 3), requires_grad=True)
        w1, w2 = _r(g, 3, 4, 4, 3), _r(g, 4, 4, 4, 3)
        return (lambda: E.sum_(pg.point_to_grid(pc, c, 4, "triplane").data * w1)
                + E.sum_(pg.point_to_grid(pc, c, 4, "voxel").data * w2)), [c]

    def attention_block(g):
        blk = AttentionBlock(8, 2, g)
        x = Tensor(_r(g, 2, 6, 8), requires_grad=True)
        y = Tensor(_r(g, 2, 5, 8), requires_grad=True)
        cx, cy = g.uniform(size=(2, 6, 3)), g.uniform(size=(2, 5, 3))
        w = _r(g, 2, 6, 8)
        return (lambda: E.sum_(blk.feed_forward(x + blk.attend(x, y, cx, cy)) * w)), _params_and(blk, x, y)

    def windowed(g):
        blk = AttentionBlock(8, 2, g)
        x = Tensor(_r(g, 11, 8), requires_grad=True)
        coords = g.uniform(size=(11, 3))
        part = pg.sort_and_split(coords, 0, 3)
        xs = coords[part.sorted_index]
        w = _r(g, 11, 8)
        return (lambda: E.sum_(windowed_self_attention(blk, pg.apply_sort(part, x), xs, part.window_bounds) * w),
                _params_and(blk, x))

    def dspt(g):
        blk = DSPTBlock(8, 2, g)
        c = Tensor(_r(g, 16, 8), requires_grad=True)
        coords = g.uniform(size=(16, 3))
        parts = axis_partitions(coords, 4)
        w = _r(g, 16, 8)
        return (lambda: E.sum_(blk(c, coords, parts) * w)), _params_and(blk, c)

    def token_update(g):
        blk = AttentionBlock(8, 2, g)
        z0 = Tensor(_r(g, 4, 8), requires_grad=True)
        Z = Tensor(_r(g, 4, 3, 8), requires_grad=True)
        coords = g.uniform(size=(4, 4, 3))
        w = _r(g, 4, 8)
        return (lambda: E.sum_(token_update_attention(blk, z0, Z, coords) * w)), _params_and(blk, z0, Z)

    def point_encoder(g):
        enc = PointEncoder(4, 8, "triplane", g, k_conv=6)
        pc = _toy_cloud(g)
        w1, w2 = _r(g, 16, 4), _r(g, 3, 8, 8, 4)

        def f():
            c, grid = enc(pc)
            return E.sum_(c * w1) + E.sum_(grid.data * w2)
        return f, _params_and(enc)

    def aware(g):
        mod = ThreeDAwareConv(3, g)
        t = Tensor(_r(g, 3, 4, 4, 3), requires_grad=True)
        w = _r(g, 3, 4, 4, 3)
        return (lambda: E.sum_(mod(t) * w)), _params_and(mod, t)

    def dll(resample, kind, d_out):
        def case(g):
            layer = DualLatentLayer(DllConfig(4, d_out, resample, kind), 2, g)
            pc = _toy_cloud(g)
            shape = (3, 8, 8, 4) if kind == "triplane" else (8, 8, 8, 4)
            T = Tensor(_r(g, *shape), requires_grad=True)
            Tb = Tensor(_r(g, *shape), requires_grad=True)
            C = Tensor(_r(g, 16, 4), requires_grad=True)
            probe = {}

            def f():
                t, tb, c = dll_forward(layer, pg.GridLatent(kind, T), pg.GridLatent(kind, Tb), pc, C, 4)
                if not probe:
                    probe["t"], probe["tb"], probe["c"] = (_r(g, *t.data.shape), _r(g, *tb.data.shape),
                                                           _r(g, *c.shape))
                return E.sum_(t.data * probe["t"]) + E.sum_(tb.data * probe["tb"]) + E.sum_(c * probe["c"])
            return f, _params_and(layer, T, Tb, C)
        return case

    def bce_iid(g):
        dec = ImplicitDecoder(4, 2, g)
        pc = _toy_cloud(g)
        grid = Tensor(_r(g, 3, 8, 8, 4), requires_grad=True)
        c = Tensor(_r(g, 16, 4), requires_grad=True)
        q = g.uniform(size=(10, 3))
        targets = (g.uniform(size=10) > 0.5).astype(np.float64)
        return (lambda: E.bce_with_logits(dec(pg.GridLatent("triplane", grid), pc, c, q, 5), targets),
                _params_and(dec, grid, c))

    return {
        "attention": {"rope_embed": rope, "attention_block": attention_block, "windowed_attention": windowed,
                      "dspt_block": dspt, "token_update": token_update},
        "encoder": {"interpolate": interpolate, "point_to_grid": point_to_grid, "point_encoder": point_encoder,
                    "three_d_aware_conv": aware, "dll_forward_down": dll("down", "triplane", 8),
                    "dll_forward_up": dll("up", "triplane", 4), "dll_forward_voxel": dll("none", "voxel", 4)},
        "decoder": {"bce_iid_forward": bce_iid},
    }


MODULES = ("all", "ops", "attention", "encoder", "decoder")


def run(module: str = "all", trials: int = 20, composite_trials: int = 2, seed: int = 0,
        report: Callable[[CheckResult], None] | None = None) -> list[CheckResult]:
    if module not in MODULES:
        raise ValueError(f"module must be one of {MODULES}")
    results = []
    with E.precision(np.float64):
        if module in ("all", "ops"):
            for name, case in _primitive_cases().items():
                t0 = time.perf_counter()
                rng = np.random.default_rng([seed, len(results)])
                worst = max(check_elementwise(*case(rng), rng=rng) for _ in range(trials))
                results.append(CheckResult(f"op.{name}", trials, worst, time.perf_counter() - t0))
                if report:
                    report(results[-1])
        for group, cases in _composite_cases().items():
            if module not in ("all", group):
                continue
            for name, build in cases.items():
                t0 = time.perf_counter()
                worst, redrawn, sample = 0.0, 0, 0
                for _ in range(composite_trials):
                    while True:
                        rng = make_rng(seed * 1000 + sample)
                        sample += 1
                        try:
                            worst = max(worst, check_directional(lambda: build(rng), rng))
                            break
                        except KinkInStencil:
                            redrawn += 1
                            if redrawn > MAX_REDRAWS:
                                raise
                results.append(CheckResult(f"{group}.{name}", composite_trials, worst,
                                           time.perf_counter() - t0, redrawn))
                if report:
                    report(results[-1])
    return results


def format_row(r: CheckResult) -> str:
    extra = f"  redrawn={r.redrawn}" if r.redrawn else ""
    return (f"{'PASS' if r.passed else 'FAIL'}  {r.name:<28} trials={r.trials:<3d} "
            f"max_rel_err={r.max_rel_err:.2e}  {r.seconds:.2f}s{extra}")
