"""Rotary 3-D position embedding, windowed self-attention and the sorted-window transformer."""
from __future__ import annotations

import numpy as np

from . import pointgrid as pg
from .tensor import engine as E
from .tensor.engine import Tensor
from .tensor.nn import LayerNorm, Linear, MLP, Module


def rope_groups(h: int) -> int:
    """Channels rotated per axis: ``h // 3`` rounded down to even; leftovers are not rotated."""
    return (h // 3) // 2 * 2


_ROPE_CACHE: dict = {}


def _rope_tables(coords: np.ndarray, h: int, base: float, dtype):
    key = (h, base, np.dtype(dtype).str, coords.shape, hash(coords.tobytes()))
    hit = _ROPE_CACHE.get(key)
    if hit is not None:
        return hit
    if len(_ROPE_CACHE) > 64:
        _ROPE_CACHE.clear()
    g = rope_groups(h)
    cos = np.ones(coords.shape[:-1] + (h,))
    sin = np.zeros(coords.shape[:-1] + (h,))
    if g:
        theta = base ** (-2.0 * np.arange(g // 2) / g)
        for ax in range(3):
            ang = coords[..., ax:ax + 1] * theta  # (..., g/2)
            lo = ax * g
            cos[..., lo:lo + g:2] = np.cos(ang)
            cos[..., lo + 1:lo + g:2] = np.cos(ang)
            sin[..., lo:lo + g:2] = -np.sin(ang)
            sin[..., lo + 1:lo + g:2] = np.sin(ang)
    out = _ROPE_CACHE[key] = (cos.astype(dtype), sin.astype(dtype))
    return out


def _pair_swap(h: int, dtype) -> np.ndarray:
    """Permutation matrix mapping channel pair (a, b) -> (b, a) on rotated channels only."""
    P = np.zeros((h, h), dtype=dtype)
    g = rope_groups(h)
    for c in range(3 * g):
        P[c ^ 1, c] = 1.0
    return P


def rope_embed(x: Tensor, coords, base: float = 10000.0, strict: bool = False) -> Tensor:
    """Rotate consecutive channel pairs by ``theta_j * coordinate``, one channel group per axis.

    With ``strict`` the width must be a multiple of 6 so every channel is rotated.
    """
    h = x.shape[-1]
    if strict and h % 6:
        raise ValueError(f"rope_embed: width {h} is not divisible by 6")
    coords = np.asarray(coords, dtype=np.float64)
    if coords.shape[:-1] != x.shape[:-1] or coords.shape[-1] != 3:
        raise E.ShapeError(f"rope_embed: coords {coords.shape} do not match features {x.shape}")
    if rope_groups(h) == 0:
        return x
    cos, sin = _rope_tables(coords, h, base, x.dtype)
    swapped = E.matmul(x, _pair_swap(h, x.dtype))
    return x * cos + swapped * sin


class AttentionBlock(Module):
    """Multi-head attention with RoPE on queries/keys, then a LayerNorm + 4x FFN residual."""

    def __init__(self, dim: int, heads: int, rng, rope_base: float = 10000.0):
        if dim % heads:
            raise ValueError(f"width {dim} not divisible by {heads} heads")
        self.dim, self.heads, self.rope_base = dim, heads, rope_base
        self.wq = Linear(dim, dim, rng)
        self.wk = Linear(dim, dim, rng)
        self.wv = Linear(dim, dim, rng)
        self.wo = Linear(dim, dim, rng)
        self.norm = LayerNorm(dim)
        self.ffn = MLP(dim, 4 * dim, dim, rng)

    def _heads(self, t: Tensor) -> Tensor:
        B, n, _ = t.shape
        return t.reshape(B, n, self.heads, self.dim // self.heads).transpose(0, 2, 1, 3)

    def project_q(self, x: Tensor, coords) -> Tensor:
        return rope_embed(self.wq(x), coords, self.rope_base)

    def project_k(self, x: Tensor, coords) -> Tensor:
        return rope_embed(self.wk(x), coords, self.rope_base)

    def project_v(self, x: Tensor) -> Tensor:
        return self.wv(x)

    def weights_projected(self, q: Tensor, k: Tensor) -> Tensor:
        logits = E.matmul(self._heads(q), self._heads(k).transpose(0, 1, 3, 2))
        return E.softmax(logits * (1.0 / np.sqrt(self.dim // self.heads)))

    def weights(self, xq: Tensor, xkv: Tensor, cq, ckv) -> Tensor:
        """Softmax attention weights (B, heads, nq, nk)."""
        return self.weights_projected(self.project_q(xq, cq), self.project_k(xkv, ckv))

    def attend_projected(self, q: Tensor, k: Tensor, v: Tensor) -> Tensor:
        a = self.weights_projected(q, k)
        out = E.matmul(a, self._heads(v)).transpose(0, 2, 1, 3)
        B, nq = q.shape[:2]
        return self.wo(out.reshape(B, nq, self.dim))

    def attend(self, xq: Tensor, xkv: Tensor, cq, ckv) -> Tensor:
        """Attention output after the output projection, before any residual.

        ``xq`` is (B, nq, dim), ``xkv`` is (B, nk, dim); coords match their leading shapes.
        """
        return self.attend_projected(self.project_q(xq, cq), self.project_k(xkv, ckv),
                                     self.project_v(xkv))

    def feed_forward(self, h: Tensor) -> Tensor:
        return h + self.ffn(self.norm(h))


def _window_groups(bounds: np.ndarray):
    """Split the windows into (start, count, size) runs of equal size."""
    sizes = np.diff(bounds)
    runs, i = [], 0
    while i < len(sizes):
        j = i
        while j < len(sizes) and sizes[j] == sizes[i]:
            j += 1
        runs.append((int(bounds[i]), j - i, int(sizes[i])))
        i = j
    return runs


def windowed_self_attention(block: AttentionBlock, x_sorted: Tensor, coords_sorted: np.ndarray,
                            bounds: np.ndarray) -> Tensor:
    """Self-attention independently inside each window of the sorted sequence."""
    dim = x_sorted.shape[-1]
    outs = []
    for start, count, size in _window_groups(bounds):
        stop = start + count * size
        xw = x_sorted[start:stop].reshape(count, size, dim)
        cw = coords_sorted[start:stop].reshape(count, size, 3)
        outs.append(block.attend(xw, xw, cw, cw).reshape(count * size, dim))
    return outs[0] if len(outs) == 1 else E.concat(outs, axis=0)


def dense_self_attention(block: AttentionBlock, x: Tensor, coords: np.ndarray,
                         chunk: int | None = None) -> Tensor:
    """Global attention over all rows; the single-window reference.

    ``chunk`` bounds the number of query rows per attention matrix.
    """
    n, dim = x.shape
    xb = x.reshape(1, n, dim)
    if chunk is None or chunk >= n:
        return block.attend(xb, xb, coords[None], coords[None]).reshape(n, dim)
    outs = [block.attend(x[s:s + chunk].reshape(1, -1, dim), xb, coords[None, s:s + chunk], coords[None])
            for s in range(0, n, chunk)]
    return E.concat(outs, axis=1).reshape(n, dim)


def axis_partitions(coords: np.ndarray, L: int) -> list[pg.WindowPartition]:
    """Sorted windows for the x, y and z passes, computed once per cloud and reused."""
    return [pg.sort_and_split(coords, ax, L) for ax in range(3)]


class DSPTBlock(Module):
    """Three sorted-window attention passes (x, y, z), each followed by the FFN."""

    def __init__(self, dim: int, heads: int, rng, rope_base: float = 10000.0):
        self.passes = [AttentionBlock(dim, heads, rng, rope_base) for _ in range(3)]

    def forward(self, c: Tensor, coords: np.ndarray, partitions) -> Tensor:
        for block, part in zip(self.passes, partitions):
            xs = pg.apply_sort(part, c)
            att = windowed_self_attention(block, xs, coords[part.sorted_index], part.window_bounds)
            c = block.feed_forward(c + pg.unsort(part, att))
        return c


def dspt_block(block: DSPTBlock, pc: pg.PointCloud, c: Tensor, L: int) -> Tensor:
    return block(c, pc.coords, axis_partitions(pc.coords, L))


def token_update_attention(block: AttentionBlock, z0: Tensor, Z: Tensor | None, coords) -> Tensor:
    """Update only the leading token of ``[z0, Z]``; the neighbour tokens are read, never written.

    ``z0`` is (M, w), ``Z`` is (M, K, w) or None, ``coords`` is (M, K + 1, 3).
    """
    M, w = z0.shape
    coords = np.asarray(coords, dtype=np.float64)
    q = z0.reshape(M, 1, w)
    seq = q if Z is None or Z.shape[1] == 0 else E.concat([q, Z], axis=1)
    att = block.attend(q, seq, coords[:, :1], coords[:, :seq.shape[1]])
    return block.feed_forward(z0 + att.reshape(M, w))


def token_update_attention_gathered(block: AttentionBlock, z0: Tensor, q_coords: np.ndarray,
                                    tokens: Tensor, token_coords: np.ndarray,
                                    nbr: np.ndarray) -> Tensor:
    """``token_update_attention`` with neighbours given as rows ``nbr`` of a shared token table.

    Key/value projections and key rotations depend only on the neighbour itself,
    so they are computed once per table row and then gathered.
    """
    M, w = z0.shape
    q = z0.reshape(M, 1, w)
    qc = np.asarray(q_coords, dtype=np.float64).reshape(M, 1, 3)
    k_tab = block.project_k(tokens, token_coords)
    v_tab = block.project_v(tokens)
    k = E.concat([block.project_k(q, qc), E.gather_rows(k_tab, nbr)], axis=1)
    v = E.concat([block.project_v(q), E.gather_rows(v_tab, nbr)], axis=1)
    att = block.attend_projected(block.project_q(q, qc), k, v)
    return block.feed_forward(z0 + att.reshape(M, w))
