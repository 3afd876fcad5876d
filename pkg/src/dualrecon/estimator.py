"""scikit-learn style wrapper: fit on shape oracles, predict occupancy for point clouds."""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.exceptions import NotFittedError
from sklearn.utils.validation import check_array, check_is_fitted

from . import pointgrid as pg
from . import surface
from .model import DualLatentModel, ModelConfig
from .oracles import ShapeOracle, parse
from .tensor import engine as E
from .trainer import TrainConfig, train


def check_points(X, min_points: int = 1, name: str = "points") -> np.ndarray:
    """(n, 3) finite float64 array with at least ``min_points`` rows."""
    arr = check_array(X, dtype=np.float64, ensure_min_samples=min_points, input_name=name)
    if arr.shape[1] != 3:
        raise ValueError(f"{name} must have 3 columns, got {arr.shape[1]}")
    return arr


def check_oracles(X) -> list[ShapeOracle]:
    items = [X] if isinstance(X, (str, ShapeOracle)) else list(X)
    if not items:
        raise ValueError("need at least one shape")
    out = []
    for item in items:
        if isinstance(item, str):
            out.append(parse(item))
        elif isinstance(item, ShapeOracle):
            out.append(item)
        else:
            raise TypeError(f"expected a shape oracle or its name, got {type(item).__name__}")
    return out


class OccupancyReconstructor(BaseEstimator):
    """Occupancy network over noisy point clouds.

    ``fit`` takes shape oracles (or names like ``"sphere"``); prediction methods take
    a world-space point cloud plus query positions.
    """

    def __init__(self, kind="triplane", R=16, d=8, L=8, K=16, heads=4, k_conv=16, epochs=600, lr=1e-3,
                 lr_min=1e-5, batch_size=1, M=2048, N=512, noise_sigma=0.005, near_fraction=0.5,
                 seed=0, grid=64, iso=0.5, out_dir=None):
        self.kind = kind
        self.R = R
        self.d = d
        self.L = L
        self.K = K
        self.heads = heads
        self.k_conv = k_conv
        self.epochs = epochs
        self.lr = lr
        self.lr_min = lr_min
        self.batch_size = batch_size
        self.M = M
        self.N = N
        self.noise_sigma = noise_sigma
        self.near_fraction = near_fraction
        self.seed = seed
        self.grid = grid
        self.iso = iso
        self.out_dir = out_dir

    def _configs(self):
        model = ModelConfig(self.kind, self.R, self.d, self.L, self.K, self.heads, self.k_conv)
        tr = TrainConfig(epochs=self.epochs, lr=self.lr, lr_min=self.lr_min, batch_size=self.batch_size,
                         M=self.M, N=self.N, noise_sigma=self.noise_sigma, near_fraction=self.near_fraction,
                         seed=self.seed)
        return model, tr

    def fit(self, X, y=None):
        oracles = check_oracles(X)
        model_cfg, train_cfg = self._configs()
        self.model_ = DualLatentModel(model_cfg, seed=self.seed)
        result = train(self.model_, train_cfg, oracles, self.out_dir)
        self.loss_curve_ = result.losses
        self.n_shapes_ = len(oracles)
        return self

    @classmethod
    def from_checkpoint(cls, path, **params) -> "OccupancyReconstructor":
        model = DualLatentModel.load(path)
        est = cls(**{**model.cfg.to_dict(), **params})
        est.model_ = model
        est.loss_curve_ = []
        return est

    def _encode(self, points):
        check_is_fitted(self, "model_")
        pts = check_points(points, max(self.model_.cfg.L, self.model_.cfg.K, self.model_.cfg.k_conv))
        pc = pg.normalize_points(pts)
        with E.no_grad():
            return self.model_.encode(pc)

    def transform(self, points) -> np.ndarray:
        """Per-point latent features (N, d) after the encoder."""
        return np.array(self._encode(points).points.data, dtype=np.float64)

    def predict_proba(self, queries, points) -> np.ndarray:
        """Occupancy probability of world-space ``queries`` given the cloud ``points``."""
        q = check_points(queries, name="queries")
        lat = self._encode(points)
        return surface.model_field(self.model_, lat)(q)

    def predict(self, queries, points) -> np.ndarray:
        return (self.predict_proba(queries, points) > self.iso).astype(np.int64)

    def reconstruct(self, points, grid: int | None = None) -> surface.Mesh:
        lat = self._encode(points)
        occ = surface.eval_occupancy_grid(surface.model_field(self.model_, lat), grid or self.grid)
        return surface.marching_cubes(occ, self.iso)

    def score(self, X, y, points=None) -> float:
        """Occupancy accuracy of queries ``X`` against labels ``y``."""
        if points is None:
            raise ValueError("score needs the conditioning point cloud")
        y = np.asarray(y).reshape(-1)
        pred = self.predict(X, points)
        if len(pred) != len(y):
            raise ValueError(f"{len(pred)} queries but {len(y)} labels")
        return float(np.mean(pred == y))


__all__ = ["OccupancyReconstructor", "check_points", "check_oracles", "NotFittedError"]
