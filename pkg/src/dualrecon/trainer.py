"""Loss, learning-rate schedule, query sampling and the training loop."""
from __future__ import annotations

import json
import logging
import math
import queue
import threading
import time
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Sequence

import numpy as np

from . import pointgrid as pg
from .model import DualLatentModel, sidecar
from .oracles import ShapeOracle
from .tensor import checkpoint
from .tensor import engine as E
from .tensor.optim import adam_step, clip_grad_norm

log = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    pass


def bce_loss(logits, targets) -> E.Tensor:
    t = np.asarray(targets)
    if t.size and not np.all((t == 0) | (t == 1)):
        raise ValueError("targets must be 0 or 1")
    return E.bce_with_logits(logits if isinstance(logits, E.Tensor) else E.Tensor(logits), t)


def cosine_lr(step: int, total_steps: int, lr_max: float, lr_min: float = 0.0) -> float:
    if not 0 <= step <= total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps}]")
    if total_steps == 0:
        return lr_max
    return lr_min + 0.5 * (lr_max - lr_min) * (1 + math.cos(math.pi * step / total_steps))


@dataclass
class QueryBatch:
    world: np.ndarray  # (M, 3) query positions in world units
    near_surface: np.ndarray  # (M,) bool


def sample_training_pair(oracle: ShapeOracle, N: int, M: int, noise_sigma: float, rng,
                         near_fraction: float = 0.5, near_sigma: float = 0.05):
    """Noisy surface samples, a uniform/near-surface query mix and its exact occupancy."""
    pts, _ = oracle.surface_sample(N, rng)
    raw = pts + rng.normal(0.0, noise_sigma, size=pts.shape) if noise_sigma > 0 else pts
    n_near = int(round(M * near_fraction))
    uniform = rng.uniform(0.0, 1.0, size=(M - n_near, 3))
    anchors, _ = oracle.surface_sample(n_near, rng)
    near = anchors + rng.normal(0.0, near_sigma, size=anchors.shape)
    q = np.concatenate([uniform, near])
    flags = np.concatenate([np.zeros(M - n_near, bool), np.ones(n_near, bool)])
    return raw, QueryBatch(q, flags), oracle.occupancy(q).astype(np.float64)


@dataclass
class TrainConfig:
    epochs: int = 1000
    lr: float = 1e-4
    lr_min: float = 0.0
    batch_size: int = 1
    M: int = 2048
    N: int = 512
    noise_sigma: float = 0.005
    near_fraction: float = 0.5
    near_sigma: float = 0.05
    seed: int = 0
    clip: bool = False
    clip_norm: float = 10.0
    prefetch: bool = False

    def __post_init__(self):
        for name in ("epochs", "batch_size", "M", "N"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.lr < 0 or self.lr_min < 0 or self.noise_sigma < 0 or self.near_sigma < 0:
            raise ValueError("lr, lr_min, noise_sigma and near_sigma must be non-negative")
        if not 0 <= self.near_fraction <= 1:
            raise ValueError("near_fraction must lie in [0, 1]")

    def total_steps(self, n_shapes: int) -> int:
        return self.epochs * math.ceil(n_shapes / self.batch_size)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, raw: dict) -> "TrainConfig":
        unknown = set(raw) - {f.name for f in fields(cls)}
        if unknown:
            raise ValueError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**raw)


@dataclass
class TrainResult:
    losses: list
    final_checkpoint: Path | None
    best_checkpoint: Path | None
    best_loss: float


def step_rng(seed: int, step: int) -> np.random.Generator:
    """Sampling stream of one step, so resumed runs see the same batches."""
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([int(seed), int(step)])))


def _batches(cfg: TrainConfig, oracles: Sequence[ShapeOracle], start: int, total: int):
    per_epoch = math.ceil(len(oracles) / cfg.batch_size)
    for step in range(start, total):
        rng = step_rng(cfg.seed, step)
        j = step % per_epoch
        shapes = oracles[j * cfg.batch_size:(j + 1) * cfg.batch_size]
        yield step, [sample_training_pair(o, cfg.N, cfg.M, cfg.noise_sigma, rng, cfg.near_fraction,
                                          cfg.near_sigma) for o in shapes]


def _prefetched(gen, depth: int = 2):
    """Run the sampler in a producer thread behind a bounded queue."""
    buf: queue.Queue = queue.Queue(maxsize=depth)
    done = object()

    def produce():
        try:
            for item in gen:
                buf.put(item)
        finally:
            buf.put(done)

    threading.Thread(target=produce, daemon=True).start()
    while (item := buf.get()) is not done:
        yield item


def batch_loss(model: DualLatentModel, batch) -> E.Tensor:
    losses = []
    for raw, qb, targets in batch:
        pc = pg.normalize_points(raw)
        q = np.clip(pc.from_world(qb.world), 0.0, 1.0)
        losses.append(bce_loss(model(pc, q), targets))
    total = losses[0]
    for extra in losses[1:]:
        total = total + extra
    return total * (1.0 / len(losses))


def train(model: DualLatentModel, cfg: TrainConfig, oracles: Sequence[ShapeOracle], out_dir=None,
          start_step: int = 0, total_steps: int | None = None) -> TrainResult:
    """Adam with cosine annealing; writes ``train.jsonl``, ``best.dtck`` and ``final.dtck``."""
    if not oracles:
        raise ValueError("need at least one oracle")
    total = cfg.total_steps(len(oracles)) if total_steps is None else total_steps
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    logf = open(out / "train.jsonl", "a" if start_step else "w") if out is not None else None
    params = model.parameters()
    losses, best, best_state = [], math.inf, None
    t0 = time.perf_counter()
    batches = _batches(cfg, oracles, start_step, total)
    if cfg.prefetch:
        batches = _prefetched(batches)
    try:
        for step, batch in batches:
            lr = cosine_lr(step, total, cfg.lr, cfg.lr_min)
            loss = batch_loss(model, batch)
            value = float(loss.data)
            if not math.isfinite(value):
                dump = _dump_batch(out, step, batch)
                raise TrainingDiverged(f"non-finite loss {value} at step {step}; batch saved to {dump}")
            if value < best and out is not None:
                best_state = _snapshot(model, step)  # parameters that produced this loss
            best = min(best, value)
            loss.backward()
            if cfg.clip:
                clip_grad_norm(params, cfg.clip_norm)
            adam_step(params, lr)
            losses.append(value)
            if logf is not None:
                rec = {"step": step, "loss": value, "lr": lr, "wallclock": time.perf_counter() - t0}
                logf.write(json.dumps(rec) + "\n")
    finally:
        if logf is not None:
            logf.close()
    final = best_path = None
    if out is not None:
        final = out / "final.dtck"
        model.save(final, {"train.step": np.array(total, dtype=np.float64)})
        if best_state is not None:
            best_path = out / "best.dtck"
            _write_snapshot(model, best_state, best_path)
    return TrainResult(losses, final, best_path, best)


def _snapshot(model: DualLatentModel, step: int) -> dict:
    state = {}
    for name, p in model.named_parameters():
        state[name] = p.data.copy()
        state[f"adam.m/{name}"] = p.m.copy()
        state[f"adam.v/{name}"] = p.v.copy()
    state["adam.step"] = np.array(model.parameters()[0].step, dtype=np.float64)
    state["train.step"] = np.array(step, dtype=np.float64)
    return state


def _write_snapshot(model: DualLatentModel, state: dict, path: Path) -> None:
    checkpoint.save(path, state)
    sidecar(path).write_text(json.dumps(model.cfg.to_dict(), indent=2, sort_keys=True))


def _dump_batch(out: Path | None, step: int, batch) -> str:
    arrays = {}
    for i, (raw, qb, targets) in enumerate(batch):
        arrays[f"raw{i}"], arrays[f"queries{i}"], arrays[f"targets{i}"] = raw, qb.world, targets
    if out is None:
        log.error("diverged at step %d; no output directory for the batch dump", step)
        return "<not saved>"
    path = out / f"nan_batch_step{step}.npz"
    np.savez(path, **arrays)
    return str(path)
