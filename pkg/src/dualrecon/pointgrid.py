"""Geometry shared by point and grid latents.

Coordinates live in the normalized unit cube. Grid cells of a resolution-R
grid are centred at ``(i + 0.5) / R``. Triplane planes are stored in the
fixed order (xy, xz, yz), each indexed ``[first axis, second axis]``.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .tensor import engine as E
from .tensor.engine import Tensor

log = logging.getLogger(__name__)

PLANE_AXES = ((0, 1), (0, 2), (1, 2))
AXES = {"x": 0, "y": 1, "z": 2}
DEBUG = False


@dataclass
class PointCloud:
    coords: np.ndarray  # (N, 3) in [0, 1]^3
    center: np.ndarray  # world-space bbox centre
    scale: float  # normalized units per world unit

    def __post_init__(self):
        if self.coords.ndim != 2 or self.coords.shape[1] != 3 or len(self.coords) < 1:
            raise ValueError(f"point cloud must be (N>=1, 3), got {self.coords.shape}")

    def __len__(self) -> int:
        return len(self.coords)

    def to_world(self, x: np.ndarray) -> np.ndarray:
        return (np.asarray(x, dtype=np.float64) - 0.5) / self.scale + self.center

    def from_world(self, x: np.ndarray) -> np.ndarray:
        return (np.asarray(x, dtype=np.float64) - self.center) * self.scale + 0.5

    def permuted(self, perm: np.ndarray) -> "PointCloud":
        return PointCloud(self.coords[perm], self.center, self.scale)


@dataclass
class GridLatent:
    kind: str  # "triplane" | "voxel"
    data: Tensor  # (3, R, R, d) or (R, R, R, d)

    def __post_init__(self):
        shape = self.data.shape
        if self.kind == "triplane":
            ok = len(shape) == 4 and shape[0] == 3 and shape[1] == shape[2]
        elif self.kind == "voxel":
            ok = len(shape) == 4 and shape[0] == shape[1] == shape[2]
        else:
            raise ValueError(f"unknown grid kind {self.kind!r}")
        if not ok or shape[1] < 2 or shape[-1] < 1:
            raise ValueError(f"bad {self.kind} shape {shape}")

    @property
    def resolution(self) -> int:
        return self.data.shape[1]

    @property
    def channels(self) -> int:
        return self.data.shape[-1]


@dataclass
class WindowPartition:
    sorted_index: np.ndarray  # sorted position -> original index
    window_bounds: np.ndarray  # L + 1 offsets into the sorted order
    axis: int

    @property
    def n_windows(self) -> int:
        return len(self.window_bounds) - 1

    @property
    def inverse(self) -> np.ndarray:
        inv = np.empty_like(self.sorted_index)
        inv[self.sorted_index] = np.arange(len(self.sorted_index))
        return inv


def normalize_points(raw, padding: float = 0.1) -> PointCloud:
    """Fit the bounding box into ``[pad/2, 1 - pad/2]^3`` keeping aspect ratio.

    A cloud with zero extent on every axis is centred at 0.5 with unit scale.
    """
    raw = np.asarray(raw, dtype=np.float64)
    if raw.ndim != 2 or raw.shape[1] != 3 or len(raw) < 1:
        raise ValueError(f"expected (M>=1, 3) coordinates, got {raw.shape}")
    if not np.all(np.isfinite(raw)):
        raise ValueError("coordinates must be finite")
    lo, hi = raw.min(axis=0), raw.max(axis=0)
    center = (lo + hi) / 2
    extent = float((hi - lo).max())
    scale = (1.0 - padding) / extent if extent > 0 else 1.0
    coords = (raw - center) * scale + 0.5
    return PointCloud(np.clip(coords, 0.0, 1.0), center, scale)


def _check_unit(x: np.ndarray) -> np.ndarray:
    if DEBUG and (x.min() < 0 or x.max() > 1):
        log.warning("interpolation coordinates outside the unit cube were clamped")
    return np.clip(x, 0.0, 1.0)


def nearest_cells(coords: np.ndarray, R: int, kind: str) -> np.ndarray:
    """Flat row index of the nearest cell.  Triplane: (N, 3), one per plane; voxel: (N,)."""
    cell = np.clip(np.floor(np.asarray(coords) * R).astype(np.int64), 0, R - 1)
    if kind == "triplane":
        return np.stack([p * R * R + cell[..., a] * R + cell[..., b]
                         for p, (a, b) in enumerate(PLANE_AXES)], axis=-1)
    return (cell[..., 0] * R + cell[..., 1]) * R + cell[..., 2]


def canonical_order(coords: np.ndarray) -> np.ndarray:
    """Order points lexicographically by coordinate (ties by index); independent of input order."""
    return np.lexsort((np.arange(len(coords)), coords[:, 2], coords[:, 1], coords[:, 0]))


def point_to_grid(pc: PointCloud, c: Tensor, R: int, kind: str = "triplane",
                  reduce: str = "mean") -> GridLatent:
    """Scatter point features into their nearest cell; empty cells stay zero.

    Contributions are accumulated in coordinate-sorted order so the grid does
    not depend on how the points are enumerated.
    """
    if c.shape[0] != len(pc):
        raise E.ShapeError(f"point_to_grid: {len(pc)} points but features {c.shape}")
    d = c.shape[1]
    order = canonical_order(pc.coords)
    cells = nearest_cells(pc.coords[order], R, kind)
    feats = E.gather_rows(c, order)
    if kind == "triplane":
        n_rows = 3 * R * R
        idx = cells.T.reshape(-1)  # plane-major
        src = E.concat([feats, feats, feats], axis=0)
        shape = (3, R, R, d)
    else:
        n_rows = R ** 3
        idx = cells
        src = feats
        shape = (R, R, R, d)
    summed = E.scatter_add_rows(src, idx, n_rows)
    if reduce == "mean":
        count = np.bincount(idx, minlength=n_rows).astype(c.dtype)
        summed = summed * (1.0 / np.maximum(count, 1))[:, None]
    elif reduce != "sum":
        raise ValueError(f"reduce must be 'mean' or 'sum', got {reduce!r}")
    return GridLatent(kind, summed.reshape(shape))


def _linear_1d(u: np.ndarray, R: int):
    t = np.clip(u * R - 0.5, 0.0, R - 1.0)
    i0 = np.minimum(np.floor(t).astype(np.int64), R - 2)
    w = t - i0
    return i0, w


def interpolation_stencil(x: np.ndarray, R: int, kind: str, mode: str = "linear"):
    """Row indices into the flattened grid and matching weights, both (..., S)."""
    x = _check_unit(np.asarray(x, dtype=np.float64))
    if mode == "nearest":
        idx = nearest_cells(x, R, kind)
        if kind == "voxel":
            idx = idx[..., None]
        return idx, np.ones(idx.shape)
    i0, w = _linear_1d(x, R)
    if kind == "triplane":
        idx, wts = [], []
        for p, (a, b) in enumerate(PLANE_AXES):
            for da in (0, 1):
                for db in (0, 1):
                    idx.append(p * R * R + (i0[..., a] + da) * R + (i0[..., b] + db))
                    wa = w[..., a] if da else 1 - w[..., a]
                    wb = w[..., b] if db else 1 - w[..., b]
                    wts.append(wa * wb)
    else:
        idx, wts = [], []
        for dx in (0, 1):
            for dy in (0, 1):
                for dz in (0, 1):
                    idx.append(((i0[..., 0] + dx) * R + (i0[..., 1] + dy)) * R + (i0[..., 2] + dz))
                    wts.append((w[..., 0] if dx else 1 - w[..., 0])
                               * (w[..., 1] if dy else 1 - w[..., 1])
                               * (w[..., 2] if dz else 1 - w[..., 2]))
    return np.stack(idx, axis=-1), np.stack(wts, axis=-1)


def interpolate(g: GridLatent, x, mode: str = "linear") -> Tensor:
    """Sample grid features at points ``x`` of shape (..., 3) -> (..., d).

    Triplane samples are bilinear per plane and summed over the three planes;
    voxel samples are trilinear.
    """
    R, d = g.resolution, g.channels
    idx, wts = interpolation_stencil(x, R, g.kind, mode)
    rows = g.data.reshape(-1, d)
    picked = E.gather_rows(rows, idx)  # (..., S, d)
    weighted = picked * wts[..., None].astype(g.data.dtype)
    return weighted.sum(axis=-2)


def grid_gather_sum_adjoint(g: GridLatent, x) -> Tensor:
    """Nearest-cell gather summed over planes: the adjoint of ``point_to_grid(reduce='sum')``."""
    return interpolate(g, x, mode="nearest")


def _sq_dists(q: np.ndarray, p: np.ndarray) -> np.ndarray:
    diff = q[:, None, :] - p[None, :, :]
    return np.einsum("mnk,mnk->mn", diff, diff)


def knn_indices(queries, points, K: int, chunk: int = 2048) -> np.ndarray:
    """Indices of the K nearest points per query, ascending by distance, ties by index."""
    queries = np.atleast_2d(np.asarray(queries, dtype=np.float64))
    points = np.asarray(points, dtype=np.float64)
    N = len(points)
    if K > N:
        raise ValueError(f"knn: K={K} exceeds number of points N={N}")
    if K < 1:
        raise ValueError("knn: K must be >= 1")
    out = np.empty((len(queries), K), dtype=np.int64)
    step = max(1, chunk * 512 // max(N, 1))
    for s in range(0, len(queries), step):
        d2 = _sq_dists(queries[s:s + step], points)
        if K < N:
            part = np.argpartition(d2, K - 1, axis=1)[:, :K]
            kth = np.take_along_axis(d2, part, axis=1).max(axis=1)
            ties = (d2 <= kth[:, None]).sum(axis=1) > K
        else:
            part = np.broadcast_to(np.arange(N), d2.shape)
            ties = np.zeros(len(d2), dtype=bool)
        sel_d = np.take_along_axis(d2, part, axis=1)
        order = np.lexsort((part, sel_d), axis=1)
        block = np.take_along_axis(part, order, axis=1)
        for r in np.flatnonzero(ties):
            block[r] = np.argsort(d2[r], kind="stable")[:K]
        out[s:s + step] = block
    return out


def knn(q, pc: PointCloud, c: Tensor | None, K: int):
    """Neighbour coordinates (.., K, 3) and features (.., K, d) for query point(s) ``q``."""
    q = np.asarray(q, dtype=np.float64)
    single = q.ndim == 1
    idx = knn_indices(q.reshape(-1, 3), pc.coords, K)
    if single:
        idx = idx[0]
    feats = None if c is None else E.gather_rows(c, idx)
    return pc.coords[idx], feats


def window_sizes(N: int, L: int) -> np.ndarray:
    base, rem = divmod(N, L)
    return np.array([base + 1] * rem + [base] * (L - rem), dtype=np.int64)


def sort_and_split(pc, axis, L: int) -> WindowPartition:
    """Stable sort along ``axis`` (ties by original index) and split into L windows."""
    coords = pc.coords if isinstance(pc, PointCloud) else np.asarray(pc)
    ax = AXES[axis] if isinstance(axis, str) else int(axis)
    N = len(coords)
    if not 1 <= L <= N:
        raise ValueError(f"sort_and_split: need 1 <= L <= N, got L={L}, N={N}")
    order = np.argsort(coords[:, ax], kind="stable")
    bounds = np.concatenate([[0], np.cumsum(window_sizes(N, L))])
    return WindowPartition(order.astype(np.int64), bounds, ax)


def apply_sort(partition: WindowPartition, features: Tensor) -> Tensor:
    return E.gather_rows(features, partition.sorted_index)


def unsort(partition: WindowPartition, features: Tensor) -> Tensor:
    """Undo ``apply_sort``: row i of the result belongs to original point i."""
    if features.shape[0] != len(partition.sorted_index):
        raise E.ShapeError(
            f"unsort: features have {features.shape[0]} rows, partition has {len(partition.sorted_index)}")
    return E.gather_rows(features, partition.inverse)
