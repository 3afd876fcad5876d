"""Occupancy decoder that fuses interpolated grid features with nearest-neighbour point latents."""
from __future__ import annotations

import numpy as np

from . import pointgrid as pg
from .attention import AttentionBlock, token_update_attention_gathered
from .tensor import engine as E
from .tensor.engine import Tensor
from .tensor.nn import Linear, Module

N_BLOCKS = 4


class ImplicitDecoder(Module):
    """Query token from the grid, neighbour tokens from (point latent, grid feature) pairs.

    Four attention blocks with separate weights refine the query token only;
    a linear head maps it to an occupancy logit.
    """

    def __init__(self, d: int, heads: int, rng):
        self.d = d
        self.w_in = Linear(d, 2 * d, rng)
        self.blocks = [AttentionBlock(2 * d, heads, rng) for _ in range(N_BLOCKS)]
        self.w_out = Linear(2 * d, 1, rng)

    def forward(self, grid: pg.GridLatent, pc: pg.PointCloud, c: Tensor, queries, K: int,
                grid_at_points: Tensor | None = None) -> Tensor:
        """Logits (M,) for queries (M, 3) in normalized coordinates."""
        q = np.asarray(queries, dtype=np.float64).reshape(-1, 3)
        if K > len(pc):
            raise ValueError(f"decoder: K={K} exceeds number of points N={len(pc)}")
        z0 = self.w_in(pg.interpolate(grid, q))
        nbr = pg.knn_indices(q, pc.coords, K)
        if grid_at_points is None:
            grid_at_points = pg.interpolate(grid, pc.coords)
        tokens = E.concat([c, grid_at_points], axis=-1)  # neighbour token per input point
        for block in self.blocks:
            z0 = token_update_attention_gathered(block, z0, q, tokens, pc.coords, nbr)
        return self.w_out(z0).reshape(-1)


def iid_forward(dec: ImplicitDecoder, grid: pg.GridLatent, pc: pg.PointCloud, c: Tensor,
                queries, K: int) -> Tensor:
    return dec(grid, pc, c, queries, K)
