"""The full reconstruction network: encoder, U-shaped refinement and implicit decoder."""
from __future__ import annotations

from dataclasses import asdict, dataclass, fields
from pathlib import Path
import json

import numpy as np

from . import pointgrid as pg
from .attention import axis_partitions
from .decoder import ImplicitDecoder
from .encoder import DualLatentUNet, PointEncoder, UNetConfig, from_grid, to_grid
from .tensor import engine as E
from .tensor import checkpoint
from .tensor.engine import Tensor
from .tensor.nn import Module, make_rng


@dataclass(frozen=True)
class ModelConfig:
    kind: str = "triplane"
    R: int = 64
    d: int = 32
    L: int = 25
    K: int = 32
    heads: int = 4
    k_conv: int = 16

    def __post_init__(self):
        if self.kind not in ("triplane", "voxel"):
            raise ValueError(f"kind must be triplane or voxel, got {self.kind!r}")
        for name in ("R", "d", "L", "K", "heads", "k_conv"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.d % self.heads:
            raise ValueError(f"d={self.d} must be divisible by heads={self.heads}")
        UNetConfig(self.d, self.R, self.kind)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, raw: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(raw) - known
        if unknown:
            raise ValueError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**raw)


@dataclass
class Latents:
    pc: pg.PointCloud
    grid: pg.GridLatent
    points: Tensor
    grid_at_points: Tensor


class DualLatentModel(Module):
    def __init__(self, cfg: ModelConfig, seed: int = 0):
        self.cfg = cfg
        rng = make_rng(seed)
        self.point_encoder = PointEncoder(cfg.d, cfg.R, cfg.kind, rng, cfg.k_conv)
        self.unet = DualLatentUNet(UNetConfig(cfg.d, cfg.R, cfg.kind), cfg.heads, rng)
        self.decoder = ImplicitDecoder(cfg.d, cfg.heads, rng)
        self.assign_names()

    def encode(self, pc: pg.PointCloud) -> Latents:
        if self.cfg.L > len(pc):
            raise ValueError(f"L={self.cfg.L} windows exceed N={len(pc)} points")
        c, grid = self.point_encoder(pc)
        t, c = self.unet(pc, c, from_grid(grid), axis_partitions(pc.coords, self.cfg.L))
        grid = to_grid(t, self.cfg.kind)
        return Latents(pc, grid, c, pg.interpolate(grid, pc.coords))

    def decode(self, lat: Latents, queries) -> Tensor:
        return self.decoder(lat.grid, lat.pc, lat.points, queries, self.cfg.K, lat.grid_at_points)

    def forward(self, pc: pg.PointCloud, queries) -> Tensor:
        return self.decode(self.encode(pc), queries)

    def predict_proba(self, lat: Latents, queries, chunk: int = 4096) -> np.ndarray:
        q = np.asarray(queries, dtype=np.float64).reshape(-1, 3)
        out = np.empty(len(q))
        with E.no_grad():
            for s in range(0, len(q), chunk):
                out[s:s + chunk] = E._sigmoid_np(self.decode(lat, q[s:s + chunk]).data)
        return out

    def save(self, path, extra: dict[str, np.ndarray] | None = None) -> None:
        """Write parameters (and Adam state) as DTCK plus a JSON sidecar holding the config."""
        tensors = dict(self.state_dict())
        for name, p in self.named_parameters():
            tensors[f"adam.m/{name}"] = p.m
            tensors[f"adam.v/{name}"] = p.v
        tensors["adam.step"] = np.array(self.parameters()[0].step, dtype=np.float64)
        if extra:
            tensors.update(extra)
        checkpoint.save(path, tensors)
        sidecar(path).write_text(json.dumps(self.cfg.to_dict(), indent=2, sort_keys=True))

    @classmethod
    def load(cls, path) -> "DualLatentModel":
        cfg = ModelConfig.from_dict(json.loads(sidecar(path).read_text()))
        tensors = checkpoint.load(path)
        dtype = next(iter(tensors.values())).dtype
        with E.precision(dtype):
            model = cls(cfg)
        model.load_state(tensors)
        return model

    def load_state(self, tensors: dict[str, np.ndarray]) -> None:
        self.load_state_dict({k: v for k, v in tensors.items() if not k.startswith("adam.")})
        step = int(tensors["adam.step"]) if "adam.step" in tensors else 0
        for name, p in self.named_parameters():
            if f"adam.m/{name}" in tensors:
                p.m = tensors[f"adam.m/{name}"].astype(p.dtype)
                p.v = tensors[f"adam.v/{name}"].astype(p.dtype)
            p.step = step


def sidecar(path) -> Path:
    path = Path(path)
    return path.with_name(path.name + ".json")
