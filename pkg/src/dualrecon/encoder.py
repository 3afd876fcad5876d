"""Dual latent encoder: point-convolution stem, dual latent layers and their U-shaped stack.

Grid tensors travel in batched channel-last layout: a triplane is (3, R, R, d)
(the planes act as a batch for 2-D convolution) and a voxel grid is (1, R, R, R, d).
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import pointgrid as pg
from .attention import DSPTBlock, axis_partitions
from .tensor import engine as E
from .tensor.engine import Tensor
from .tensor.nn import Conv, ConvTranspose, Linear, MLP, Module


def to_grid(t: Tensor, kind: str) -> pg.GridLatent:
    return pg.GridLatent(kind, t if kind == "triplane" else t.reshape(t.shape[1:]))


def from_grid(g: pg.GridLatent) -> Tensor:
    return g.data if g.kind == "triplane" else g.data.reshape((1,) + g.data.shape)


def _spatial(kind: str) -> int:
    if kind not in ("triplane", "voxel"):
        raise ValueError(f"unknown grid kind {kind!r}")
    return 2 if kind == "triplane" else 3


class PointConv(Module):
    """Neighbourhood convolution: (neighbour feature, relative-position MLP) -> linear -> max.

    The first layer (``d_in == 0``) sees relative positions only.  Widths that
    match get a residual connection.
    """

    def __init__(self, d_in: int, d_out: int, rng, rel_scale: float = 1.0):
        self.d_in, self.d_out, self.rel_scale = d_in, d_out, rel_scale
        self.rel = Linear(3, d_out, rng)
        self.lin = Linear(d_in + d_out, d_out, rng)

    def forward(self, coords: np.ndarray, feats: Tensor | None, nbr: np.ndarray) -> Tensor:
        rel = (coords[nbr] - coords[:, None, :]) * self.rel_scale
        x = E.relu(self.rel(Tensor(rel)))
        if self.d_in:
            x = E.concat([E.gather_rows(feats, nbr), x], axis=-1)
        out = E.relu(E.max_(self.lin(x), axis=1))
        if feats is not None and self.d_in == self.d_out:
            out = out + feats
        return out


class PointEncoder(Module):
    """Four point-convolution layers followed by quantization onto the grid."""

    def __init__(self, d: int, R: int, kind: str, rng, k_conv: int = 16):
        self.d, self.R, self.kind, self.k_conv = d, R, kind, k_conv
        self.layers = [PointConv(0, d, rng, rel_scale=R)] + [
            PointConv(d, d, rng, rel_scale=R) for _ in range(3)]

    def forward(self, pc: pg.PointCloud):
        N = len(pc)
        if N < self.k_conv:
            raise ValueError(f"point encoder needs at least k_conv={self.k_conv} points, got {N}")
        nbr = pg.knn_indices(pc.coords, pc.coords, self.k_conv)
        c = None
        for layer in self.layers:
            c = layer(pc.coords, c, nbr)
        return c, pg.point_to_grid(pc, c, self.R, self.kind)


class ConvNet(Module):
    """Two 3x3 convolutions with ReLU and a residual around the second; shared over planes."""

    def __init__(self, d_in: int, d_out: int, rng, spatial: int = 2):
        self.conv1 = Conv(d_in, d_out, rng, spatial)
        self.conv2 = Conv(d_out, d_out, rng, spatial)

    def forward(self, t: Tensor) -> Tensor:
        h = E.relu(self.conv1(t))
        return h + E.relu(self.conv2(h))


def plane_exchange_inputs(t: Tensor) -> Tensor:
    """Per plane: its own features plus the other two planes averaged over the absent axis.

    The first extra block varies along the plane's row axis and the second
    along its column axis.  Output is (3, R, R, 3d).
    """
    if t.ndim != 4 or t.shape[0] != 3:
        raise E.ShapeError(f"expected triplane (3, R, R, d), got {t.shape}")
    _, R, _, d = t.shape
    xy, xz, yz = t[0], t[1], t[2]
    ones_r = np.ones((R, 1, 1), dtype=t.dtype)
    ones_c = np.ones((1, R, 1), dtype=t.dtype)

    def rows(v):  # (R, d) varying along rows
        return v.reshape(R, 1, d) * ones_c

    def cols(v):  # (R, d) varying along columns
        return v.reshape(1, R, d) * ones_r

    a = [rows(xz.mean(axis=1)), rows(xy.mean(axis=1)), rows(xy.mean(axis=0))]
    b = [cols(yz.mean(axis=1)), cols(yz.mean(axis=0)), cols(xz.mean(axis=0))]
    stack = [E.concat([a[i].reshape(1, R, R, d) for i in range(3)], axis=0),
             E.concat([b[i].reshape(1, R, R, d) for i in range(3)], axis=0)]
    return E.concat([t, stack[0], stack[1]], axis=-1)


class ThreeDAwareConv(Module):
    """Exchange features across the three planes, then a 3x3 convolution back to ``d`` channels."""

    def __init__(self, d: int, rng):
        self.conv = Conv(3 * d, d, rng, 2)

    def forward(self, t: Tensor) -> Tensor:
        return self.conv(plane_exchange_inputs(t))


def three_d_aware_conv(module: ThreeDAwareConv, g: pg.GridLatent) -> pg.GridLatent:
    if g.kind != "triplane":
        raise ValueError("3D-aware convolution applies to triplanes only")
    return pg.GridLatent("triplane", module(g.data))


@dataclass(frozen=True)
class DllConfig:
    d_in: int
    d_out: int
    resample: str = "none"  # none | down | up
    kind: str = "triplane"

    def __post_init__(self):
        if self.resample not in ("none", "down", "up"):
            raise ValueError(f"resample must be none/down/up, got {self.resample!r}")
        _spatial(self.kind)


class DualLatentLayer(Module):
    """One refinement stage for the grid stream T, the skip stream T-bar and point latents C."""

    def __init__(self, cfg: DllConfig, heads: int, rng):
        self.cfg = cfg
        sp = _spatial(cfg.kind)
        self.convnet = ConvNet(cfg.d_in, cfg.d_out, rng, sp)
        self.skip_conv = Conv(cfg.d_in, cfg.d_out, rng, sp)
        self.aware = ThreeDAwareConv(cfg.d_out, rng) if cfg.kind == "triplane" else None
        self.point_lin = Linear(cfg.d_in, cfg.d_out, rng)
        self.grid_mlp = MLP(cfg.d_out, cfg.d_out, cfg.d_out, rng)
        self.dspt = DSPTBlock(cfg.d_out, heads, rng)
        self.densify = Conv(cfg.d_out, cfg.d_out, rng, sp)
        if cfg.resample == "up":
            self.up_grid = ConvTranspose(cfg.d_out, cfg.d_out, rng, sp)
            self.up_skip = ConvTranspose(cfg.d_out, cfg.d_out, rng, sp)

    def forward(self, T: Tensor, T_bar: Tensor, pc: pg.PointCloud, C: Tensor, partitions):
        """Returns (T', T-bar', C', T' before resampling)."""
        kind = self.cfg.kind
        R = T.shape[1]
        t_bar = self.convnet(T) + self.skip_conv(T_bar)
        if self.aware is not None:
            t_bar = self.aware(t_bar)
        from_grid_feats = pg.interpolate(to_grid(t_bar, kind), pc.coords)
        c = self.point_lin(C) + self.grid_mlp(from_grid_feats)
        c = self.dspt(c, pc.coords, partitions)
        projected = from_grid(pg.point_to_grid(pc, c, R, kind))
        t_out = self.densify(projected) + t_bar
        t_pre = t_out
        if self.cfg.resample == "down":
            t_out, t_bar = E.maxpool(t_out), E.maxpool(t_bar)
        elif self.cfg.resample == "up":
            t_out, t_bar = self.up_grid(t_out), self.up_skip(t_bar)
        return t_out, t_bar, c, t_pre


def dll_forward(layer: DualLatentLayer, T: pg.GridLatent, T_bar: pg.GridLatent,
                pc: pg.PointCloud, C: Tensor, L: int):
    """Run one layer on GridLatent inputs; returns (T', T-bar', C')."""
    t, tb, c, _ = layer(from_grid(T), from_grid(T_bar), pc, C, axis_partitions(pc.coords, L))
    return to_grid(t, T.kind), to_grid(tb, T.kind), c


@dataclass(frozen=True)
class UNetConfig:
    d: int
    R: int
    kind: str = "triplane"

    def __post_init__(self):
        if self.R % 4 or self.R < 8:
            raise ValueError(f"resolution must be a multiple of 4 and >= 8, got {self.R}")

    @property
    def stages(self) -> list[DllConfig]:
        d, k = self.d, self.kind
        return [DllConfig(d, d, "none", k), DllConfig(d, 2 * d, "down", k),
                DllConfig(2 * d, 4 * d, "down", k), DllConfig(4 * d, 8 * d, "none", k),
                DllConfig(8 * d, 4 * d, "up", k), DllConfig(4 * d, 2 * d, "up", k),
                DllConfig(2 * d, d, "none", k)]


class DualLatentUNet(Module):
    """Three down layers, a middle layer and three up layers.

    Up-layer outputs are summed with the pre-pooling grid of the down layer at
    the same resolution and width.
    """

    def __init__(self, cfg: UNetConfig, heads: int, rng):
        self.cfg = cfg
        self.layers = [DualLatentLayer(s, heads, rng) for s in cfg.stages]

    def forward(self, pc: pg.PointCloud, C: Tensor, T: Tensor, partitions, trace: list | None = None):
        t, t_bar, c = T, T, C
        skips = []
        for i, layer in enumerate(self.layers):
            t, t_bar, c, t_pre = layer(t, t_bar, pc, c, partitions)
            if i < 3:
                skips.append(t_pre)
            else:
                j = 6 - i  # up-layer i pairs with down-layer j
                if j < 3:
                    t = t + skips[j]
            if trace is not None:
                trace.append((c.shape, t.shape))
        return t, c


def unet_forward(unet: DualLatentUNet, pc: pg.PointCloud, C: Tensor, T: pg.GridLatent, L: int):
    t, c = unet(pc, C, from_grid(T), axis_partitions(pc.coords, L))
    return to_grid(t, T.kind), c
