"""Throughput of sorted-window attention against dense attention on the same cloud."""
from __future__ import annotations

import time

import numpy as np

from . import pointgrid as pg
from .attention import AttentionBlock, dense_self_attention, windowed_self_attention
from .tensor import engine as E
from .tensor.engine import Tensor
from .tensor.nn import make_rng


def bench_dspt(n: int, L: int, repeat: int = 3, dim: int = 32, heads: int = 4, seed: int = 0,
               dense_chunk: int = 512) -> dict:
    """Forward-only timings (best of ``repeat``) for one x-axis pass."""
    if n < 1 or L < 1 or L > n or repeat < 1:
        raise ValueError("need n >= L >= 1 and repeat >= 1")
    rng = make_rng(seed)
    coords = rng.uniform(size=(n, 3))
    x = Tensor(rng.standard_normal((n, dim)))
    block = AttentionBlock(dim, heads, rng)

    def windowed():
        part = pg.sort_and_split(coords, 0, L)
        out = windowed_self_attention(block, pg.apply_sort(part, x), coords[part.sorted_index],
                                      part.window_bounds)
        return pg.unsort(part, out)

    def dense():
        return dense_self_attention(block, x, coords, chunk=dense_chunk)

    times = {}
    with E.no_grad():
        for name, fn in (("windowed", windowed), ("dense", dense)):
            best = np.inf
            for _ in range(repeat):
                t0 = time.perf_counter()
                fn()
                best = min(best, time.perf_counter() - t0)
            times[name] = best
    return {
        "n": n, "L": L, "repeat": repeat, "dim": dim, "heads": heads,
        "windowed_s": times["windowed"], "dense_s": times["dense"],
        "windowed_points_per_s": n / times["windowed"], "dense_points_per_s": n / times["dense"],
        "speedup": times["dense"] / times["windowed"],
    }
