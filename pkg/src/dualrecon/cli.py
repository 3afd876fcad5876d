"""Command-line entry point: ``dualrecon train | reconstruct | eval | gradcheck | selftest | bench-dspt``."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import io, pointgrid as pg, surface
from .config import ConfigError, RunConfig, resolve_oracle
from .model import DualLatentModel
from .tensor import checkpoint
from .tensor import engine as E


def _emit(obj) -> None:
    print(json.dumps(obj, indent=2, sort_keys=True))


def cmd_train(args) -> int:
    from .trainer import train

    cfg = RunConfig.load(args.config)
    oracles = cfg.oracles()
    out = Path(cfg.output)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(cfg.dumps() + "\n")
    with E.precision(np.float64 if cfg.float64 else np.float32):
        start = 0
        if args.resume:
            model = DualLatentModel.load(args.resume)
            if model.cfg != cfg.model:
                raise ConfigError("checkpoint model config differs from --config")
            start = int(checkpoint.load(args.resume).get("train.step", np.array(0.0)))
        else:
            model = DualLatentModel(cfg.model, seed=cfg.train.seed)
        result = train(model, cfg.train, oracles, out, start_step=start)
    _emit({"final_checkpoint": str(result.final_checkpoint), "best_checkpoint": str(result.best_checkpoint),
           "best_loss": result.best_loss, "last_loss": result.losses[-1] if result.losses else None,
           "steps": len(result.losses), "log": str(out / "train.jsonl")})
    return 0


def load_points(source: str, n: int, noise: float, seed: int) -> np.ndarray:
    if source.startswith("oracle:"):
        oracle = resolve_oracle(source)
        rng = np.random.default_rng(seed)
        pts, _ = oracle.surface_sample(n, rng)
        return pts + rng.normal(0.0, noise, size=pts.shape) if noise > 0 else pts
    pts, _ = io.read_dptc(source)
    return pts.astype(np.float64)


def cmd_reconstruct(args) -> int:
    model = DualLatentModel.load(args.ckpt)
    raw = load_points(args.points, args.n_points, args.noise, args.seed)
    with E.precision(model.parameters()[0].dtype.type), E.no_grad():
        lat = model.encode(pg.normalize_points(raw))
        grid = surface.eval_occupancy_grid(surface.model_field(model, lat), args.grid, args.chunk)
    mesh = surface.marching_cubes(grid, args.iso)
    io.write_obj(args.out, mesh)
    _emit({"out": args.out, "vertices": len(mesh.vertices), "triangles": len(mesh.triangles),
           "closed_manifold": mesh.is_closed_manifold(), "points": len(raw)})
    return 0


def cmd_eval(args) -> int:
    pred = io.read_obj(args.pred)
    gt = resolve_oracle(args.gt) if args.gt.startswith("oracle:") else io.read_obj(args.gt)
    report = surface.metrics(pred, gt, n_samples=args.samples, seed=args.seed, n_probes=args.probes)
    doc = report.to_dict()
    doc["probe_distribution"] = "uniform unit cube"
    io.write_json(args.out, doc)
    _emit(doc)
    return 0


def cmd_gradcheck(args) -> int:
    from . import gradcheck

    results = gradcheck.run(args.module, report=lambda r: print(gradcheck.format_row(r), flush=True))
    failed = [r.name for r in results if not r.passed]
    print(f"{len(results) - len(failed)}/{len(results)} passed (64-bit, h={gradcheck.H}, tol={gradcheck.TOL})")
    if failed:
        raise RuntimeError(f"gradient check failed: {', '.join(failed)}")
    return 0


def cmd_selftest(args) -> int:
    from . import selftest

    outcomes = selftest.run(lambda o: print(o.row(), flush=True))
    failed = [o.name for o in outcomes if not o.passed]
    print(f"{len(outcomes) - len(failed)}/{len(outcomes)} checks passed")
    if failed:
        raise RuntimeError(f"selftest failed: {', '.join(failed)}")
    return 0


def cmd_bench(args) -> int:
    from .bench import bench_dspt

    _emit(bench_dspt(args.n, args.l, args.repeat, dim=args.dim))
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="dualrecon", description="Occupancy reconstruction from point clouds")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train from a JSON run config")
    t.add_argument("--config", required=True)
    t.add_argument("--resume", help="checkpoint to continue from")
    t.set_defaults(fn=cmd_train)

    r = sub.add_parser("reconstruct", help="extract a mesh for a point cloud")
    r.add_argument("--ckpt", required=True)
    r.add_argument("--points", required=True, help="DPTC file or oracle:<name>")
    r.add_argument("--grid", type=int, default=64)
    r.add_argument("--iso", type=float, default=0.5)
    r.add_argument("--out", required=True)
    r.add_argument("--n-points", type=int, default=512, help="samples drawn from an oracle")
    r.add_argument("--noise", type=float, default=0.005, help="noise std added to oracle samples")
    r.add_argument("--seed", type=int, default=0)
    r.add_argument("--chunk", type=int, default=65536)
    r.set_defaults(fn=cmd_reconstruct)

    e = sub.add_parser("eval", help="compare a mesh with an oracle or mesh")
    e.add_argument("--pred", required=True)
    e.add_argument("--gt", required=True, help="oracle:<name> or OBJ file")
    e.add_argument("--samples", type=int, default=10000)
    e.add_argument("--probes", type=int, default=100000)
    e.add_argument("--seed", type=int, default=0)
    e.add_argument("--out", required=True)
    e.set_defaults(fn=cmd_eval)

    g = sub.add_parser("gradcheck", help="finite-difference gradient checks (64-bit)")
    g.add_argument("--module", default="all", choices=["all", "ops", "encoder", "decoder", "attention"])
    g.set_defaults(fn=cmd_gradcheck)

    s = sub.add_parser("selftest", help="run the invariant suite")
    s.set_defaults(fn=cmd_selftest)

    b = sub.add_parser("bench-dspt", help="sorted-window vs dense attention throughput")
    b.add_argument("--n", type=int, default=10000)
    b.add_argument("--l", type=int, default=20)
    b.add_argument("--repeat", type=int, default=3)
    b.add_argument("--dim", type=int, default=32)
    b.set_defaults(fn=cmd_bench)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.fn(args)
    except Exception as exc:  # every failure leaves one JSON diagnostic on stderr
        print(json.dumps({"error": type(exc).__name__, "command": args.command, "message": str(exc)}),
              file=sys.stderr)
        if args.verbose:
            raise
        return 1


if __name__ == "__main__":
    sys.exit(main())
