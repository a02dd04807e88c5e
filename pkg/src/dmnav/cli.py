"""Command-line entry points.

Exit codes: 0 ok, 1 usage error, 2 config error, 3 runtime failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys

import numpy as np

from . import simulator as sim
from .bench import bench_csv_lines, bench_latency
from .checkpoint import CheckpointFormatError, load_model, save_model
from .config import ConfigError, RunConfig, format_config, load_config
from .metrics import metrics_csv_lines
from .model import NavModel, rollout, write_trajectory_jsonl
from .training import (ablate, ablation_csv_lines, bc_train, dagger_collect, easy_spec,
                       episode_to_sample, evaluate, generate_data, heldout_depth_error,
                       pretrain_geometric)


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _build_parser() -> _Parser:
    p = _Parser(prog="dmnav", description="dual implicit memory navigation artifact")
    p.add_argument("--config", help="key-value config file")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default="out", help="output directory")
    sub = p.add_subparsers(dest="cmd", required=True)

    sub.add_parser("gen-data", help="generate episode datasets (JSONL)")

    sub.add_parser("pretrain", help="point-map pretraining of the spatial encoder")

    tr = sub.add_parser("train", help="behavior cloning (optionally + DAgger)")
    tr.add_argument("--data", required=True, help="directory with *_train.jsonl datasets")
    tr.add_argument("--spatial", help="pretrained spatial-encoder checkpoint")
    tr.add_argument("--dagger", action="store_true")

    ev = sub.add_parser("eval", help="evaluate a checkpoint on a dataset")
    ev.add_argument("--data", required=True, help="episode JSONL file")
    ev.add_argument("--ckpt", help="model checkpoint (omit with --expert)")
    ev.add_argument("--expert", action="store_true", help="score expert replays instead")

    ab = sub.add_parser("ablate", help="run the ablation grid")
    ab.add_argument("--train-easy", type=int, default=150)
    ab.add_argument("--train-memory", type=int, default=250)
    ab.add_argument("--val-memory", type=int, default=60)
    ab.add_argument("--seeds", default="0,1,2")
    ab.add_argument("--epochs", type=int, default=None)

    be = sub.add_parser("bench", help="cached vs full-recompute latency benchmark")
    be.add_argument("--t-max", type=int, default=256)
    be.add_argument("--modes", default="cached,full")
    be.add_argument("--budget-ms", type=float, default=2000.0)

    dp = sub.add_parser("dump-pointmap", help="write predicted point map as PGM + CSV")
    dp.add_argument("--ckpt", help="model checkpoint (random weights if omitted)")

    ro = sub.add_parser("rollout", help="roll out one episode")
    ro.add_argument("--data", required=True, help="episode JSONL file")
    ro.add_argument("--index", type=int, default=0)
    ro.add_argument("--ckpt")
    ro.add_argument("--log", help="trajectory JSONL output path")
    return p


def _write_lines(path, lines):
    with open(path, "w") as fh:
        for line in lines:
            fh.write(line + "\n")


def write_pgm16(path, arr: np.ndarray):
    arr = np.asarray(arr, dtype=np.float64)
    lo, hi = float(arr.min()), float(arr.max())
    span = hi - lo if hi > lo else 1.0
    q = np.round((arr - lo) / span * 65535.0).astype(">u2")
    with open(path, "wb") as fh:
        fh.write(f"P5\n# range {lo:.6f} {hi:.6f}\n{arr.shape[1]} {arr.shape[0]}\n65535\n"
                 .encode())
        fh.write(q.tobytes())


def _load_cfg(args) -> RunConfig:
    cfg = load_config(args.config) if args.config else RunConfig()
    return cfg.validate()


def _cmd_gen_data(args, cfg: RunConfig) -> int:
    os.makedirs(args.out, exist_ok=True)
    specs = [("easy_train", cfg.bc_easy, 0, "easy"), ("memory_train", cfg.bc_memory, 0, "memory"),
             ("easy_val", cfg.eval_episodes, 1, "easy"),
             ("memory_val", cfg.eval_episodes, 1, "memory")]
    for name, count, tag, kind in specs:
        if kind == "easy":
            eps = generate_data(cfg, args.seed, count, 0, tag=tag)
        else:
            eps = generate_data(cfg, args.seed, 0, count, tag=tag)
        path = os.path.join(args.out, f"{name}.jsonl")
        sim.save_dataset(path, eps)
        print(f"wrote {len(eps)} episodes to {path}")
    return 0


def _cmd_pretrain(args, cfg: RunConfig) -> int:
    os.makedirs(args.out, exist_ok=True)
    model = NavModel(cfg, args.seed)
    curve = pretrain_geometric(model, cfg, args.seed, progress=print)
    err, diag = heldout_depth_error(model, cfg, args.seed)
    ckpt = os.path.join(args.out, "spatial.dmnv")
    save_model(ckpt, model, prefix="")
    _write_lines(os.path.join(args.out, "pretrain_loss.csv"),
                 ["step,loss"] + [f"{i},{v:.6f}" for i, v in enumerate(curve)])
    print(f"held-out mean depth error {err:.4f} m ({100 * err / diag:.1f}% of diagonal)")
    print(f"wrote {ckpt}")
    return 0


def _load_train_data(cfg: RunConfig, data_dir: str):
    eps = []
    for name in ("easy_train.jsonl", "memory_train.jsonl"):
        path = os.path.join(data_dir, name)
        if os.path.exists(path):
            eps += sim.load_dataset(path)
    if not eps:
        raise FileNotFoundError(f"no *_train.jsonl datasets under {data_dir}")
    return eps


def _cmd_train(args, cfg: RunConfig) -> int:
    os.makedirs(args.out, exist_ok=True)
    model = NavModel(cfg, args.seed)
    if args.spatial:
        load_model(args.spatial, model, strict=False)
    episodes = _load_train_data(cfg, args.data)
    samples = [episode_to_sample(ep) for ep in episodes]
    curve = bc_train(model, samples, cfg, args.seed, progress=print)
    if args.dagger:
        _, counts, skipped = dagger_collect(model, samples, episodes, cfg, args.seed,
                                            progress=print)
        print(f"dagger added {sum(counts)} steps ({skipped} episodes skipped)")
    ckpt = os.path.join(args.out, "model.dmnv")
    save_model(ckpt, model)
    _write_lines(os.path.join(args.out, "bc_loss.csv"),
                 ["step,loss"] + [f"{i},{v:.6f}" for i, v in enumerate(curve)])
    print(f"wrote {ckpt}")
    return 0


def _cmd_eval(args, cfg: RunConfig) -> int:
    os.makedirs(args.out, exist_ok=True)
    episodes = sim.load_dataset(args.data)
    model = None
    if not args.expert:
        if not args.ckpt:
            raise UsageError("eval requires --ckpt unless --expert is given")
        model = NavModel(cfg, args.seed)
        load_model(args.ckpt, model)
    records, agg = evaluate(model, episodes, expert=args.expert)
    _write_lines(os.path.join(args.out, "metrics.csv"), metrics_csv_lines(records))
    agg_path = os.path.join(args.out, "aggregate.json")
    with open(agg_path, "w") as fh:
        json.dump({k: (round(v, 6) if isinstance(v, float) else v) for k, v in agg.items()},
                  fh, sort_keys=True, separators=(",", ":"))
        fh.write("\n")
    print(f"SR {agg['sr']:.3f} SPL {agg['spl']:.3f} NE {agg['ne']:.3f} "
          f"OS {agg['os']:.3f} nDTW {agg['ndtw']:.3f}")
    return 0


def _cmd_ablate(args, cfg: RunConfig) -> int:
    os.makedirs(args.out, exist_ok=True)
    seeds = tuple(int(s) for s in args.seeds.split(","))
    train_eps = generate_data(cfg, args.seed, args.train_easy, args.train_memory, tag=0)
    val_eps = generate_data(cfg, args.seed, 0, args.val_memory, tag=1)
    rows = ablate(cfg, seeds, train_eps, val_eps, bc_epochs=args.epochs, progress=print)
    path = os.path.join(args.out, "ablation.csv")
    _write_lines(path, ablation_csv_lines(rows))
    print(f"wrote {path}")
    return 0


def _cmd_bench(args, cfg: RunConfig) -> int:
    os.makedirs(args.out, exist_ok=True)
    model = NavModel(cfg, args.seed)
    modes = tuple(m.strip() for m in args.modes.split(",") if m.strip())
    records = bench_latency(model, cfg, seed=args.seed, t_max=args.t_max, modes=modes,
                            budget_ms=args.budget_ms, progress=print)
    path = os.path.join(args.out, "bench.csv")
    _write_lines(path, bench_csv_lines(records))
    print(f"wrote {path}")
    return 0


def _cmd_dump_pointmap(args, cfg: RunConfig) -> int:
    os.makedirs(args.out, exist_ok=True)
    model = NavModel(cfg, args.seed)
    if args.ckpt:
        load_model(args.ckpt, model, strict=False)
    spec = easy_spec(cfg)
    world = sim.get_world(800_000 + args.seed, spec)
    rng = np.random.default_rng([args.seed, 5])
    pose = sim.sample_free_pose(world, rng, clearance=spec.agent_radius + 0.05)
    obs, _, _ = sim.render(world, pose, frame_id=0, anchor=pose)
    mems = model.new_memories()
    g = model.spatial(obs, mems.geo)
    pm = model.point_head(g)
    pts = pm.points.data
    conf = pm.confidence.data
    for ci, chan in enumerate("xyz"):
        write_pgm16(os.path.join(args.out, f"points_{chan}.pgm"), pts[ci])
    write_pgm16(os.path.join(args.out, "confidence.pgm"), conf)
    lines = ["u,v,x,y,z,conf"]
    h, w = conf.shape
    for v in range(h):
        for u in range(w):
            lines.append(f"{u},{v},{pts[0, v, u]:.6f},{pts[1, v, u]:.6f},"
                         f"{pts[2, v, u]:.6f},{conf[v, u]:.6f}")
    _write_lines(os.path.join(args.out, "pointmap.csv"), lines)
    print(f"wrote point map dumps to {args.out}")
    return 0


def _cmd_rollout(args, cfg: RunConfig) -> int:
    os.makedirs(args.out, exist_ok=True)
    episodes = sim.load_dataset(args.data)
    if not (0 <= args.index < len(episodes)):
        raise UsageError(f"--index out of range (dataset has {len(episodes)} episodes)")
    ep = episodes[args.index]
    model = NavModel(cfg, args.seed)
    if args.ckpt:
        load_model(args.ckpt, model)
    world = sim.get_world(ep.world_seed, ep.spec)
    traj = rollout(model, world, ep)
    print(f"episode {args.index}: {len(traj.actions)} actions, "
          f"stopped={traj.stopped} truncated={traj.truncated}")
    if args.log:
        write_trajectory_jsonl(args.log, traj)
        print(f"wrote {args.log}")
    return 0


_COMMANDS = {
    "gen-data": _cmd_gen_data,
    "pretrain": _cmd_pretrain,
    "train": _cmd_train,
    "eval": _cmd_eval,
    "ablate": _cmd_ablate,
    "bench": _cmd_bench,
    "dump-pointmap": _cmd_dump_pointmap,
    "rollout": _cmd_rollout,
}


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as e:
        print(f"usage error: {e}", file=sys.stderr)
        return 1
    except SystemExit as e:  # --help
        return int(e.code or 0)
    try:
        cfg = _load_cfg(args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2
    print("# effective configuration")
    print(format_config(cfg))
    try:
        return _COMMANDS[args.cmd](args, cfg)
    except UsageError as e:
        print(f"usage error: {e}", file=sys.stderr)
        return 1
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2
    except (CheckpointFormatError, Exception) as e:  # noqa: BLE001 - CLI boundary
        print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
