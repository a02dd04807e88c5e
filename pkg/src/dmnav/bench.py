"""Per-frame latency benchmark: cached incremental memory vs full recompute.

``cached`` runs the dual-memory incremental path once, timing each frame
(median of repeats on throwaway memory clones). ``full`` re-runs the whole
prefix from scratch at sampled frame indices with unbounded caches, the way
a no-cache model would, and stops once a frame exceeds the time budget.
"""

from __future__ import annotations

import statistics
import time
from dataclasses import dataclass

import numpy as np

from . import simulator as sim
from .config import RunConfig
from .model import NavModel
from .policy import Action, Instruction
from .simulator import WorldSpec, get_world

FULL_GRID = [1, 2, 4, 8, 12, 16, 24, 32, 40, 48, 56, 64, 96, 128]


@dataclass
class BenchRecord:
    frame: int
    mode: str  # cached | full
    ms: float
    tokens: int
    kv_bytes: int


def _script_actions(n: int) -> list[Action]:
    cycle = [Action.MoveForward, Action.MoveForward, Action.TurnLeft,
             Action.MoveForward, Action.MoveForward, Action.TurnRight]
    return [cycle[i % len(cycle)] for i in range(n)]


def _prepare_frames(cfg: RunConfig, seed: int, n: int):
    spec = WorldSpec(bounds=6.0, img=cfg.img, cell=cfg.cell, agent_radius=cfg.agent_radius,
                     fov_deg=cfg.fov_deg, cam_height=cfg.cam_height,
                     wall_height=cfg.wall_height, landmark_height=cfg.landmark_height,
                     success_radius=cfg.success_radius, max_steps=max(cfg.max_steps, n + 1))
    world = get_world(700_000 + seed, spec)
    rng = np.random.default_rng([seed, 3])
    pose = sim.sample_free_pose(world, rng, clearance=spec.agent_radius + 0.05)
    anchor = pose
    frames = []
    for t, act in enumerate(_script_actions(n)):
        obs, _, _ = sim.render(world, pose, frame_id=t, anchor=anchor)
        frames.append(obs)
        pose, _ = sim.step(world, pose, act)
    return frames


_BENCH_INSTRUCTION = Instruction("walk to the red drum and stop",
                                 sim.tokenize("walk to the red drum and stop"))


def bench_cached(model: NavModel, frames, repeats: int = 5) -> list[BenchRecord]:
    mems = model.new_memories()
    model.start_episode(mems, _BENCH_INSTRUCTION)
    # warmup on a scratch copy so first-call overheads stay out of frame 0
    scratch = model.new_memories()
    model.start_episode(scratch, _BENCH_INSTRUCTION)
    for t in range(min(3, len(frames))):
        model.step(frames[t], scratch)
    records = []
    for t, obs in enumerate(frames):
        times = []
        for _rep in range(repeats):
            trial = type(mems)(sem=None if mems.sem is None else mems.sem.clone(),
                               geo=None if mems.geo is None else mems.geo.clone(),
                               policy=mems.policy.clone())
            t0 = time.perf_counter()
            model.step(obs, trial)
            times.append((time.perf_counter() - t0) * 1000.0)
        model.step(obs, mems)
        records.append(BenchRecord(t, "cached", statistics.median(times),
                                   model.tokens_touched(mems), model.memory_bytes(mems)))
    return records


def bench_full(model: NavModel, frames, repeats: int = 5,
               budget_ms: float = 2000.0, grid: list[int] | None = None) -> list[BenchRecord]:
    grid = [g for g in (grid or FULL_GRID) if g <= len(frames)]
    records = []
    for t in grid:
        times = []
        tokens = bytes_ = 0
        for _rep in range(repeats):
            mems = model.new_memories(unbounded=len(frames) + 1)
            model.start_episode(mems, _BENCH_INSTRUCTION)
            t0 = time.perf_counter()
            for i in range(t):
                model.step(frames[i], mems)
            times.append((time.perf_counter() - t0) * 1000.0)
            tokens = sum(model.tokens_touched(mems) for _ in (0,))
            bytes_ = model.memory_bytes(mems)
        ms = statistics.median(times)
        records.append(BenchRecord(t - 1, "full", ms, tokens, bytes_))
        if ms > budget_ms:
            break
    return records


def bench_latency(model: NavModel, cfg: RunConfig, seed: int = 0, t_max: int = 256,
                  modes: tuple[str, ...] = ("cached", "full"), repeats: int = 5,
                  budget_ms: float = 2000.0, progress=None) -> list[BenchRecord]:
    frames = _prepare_frames(cfg, seed, t_max)
    records: list[BenchRecord] = []
    if "cached" in modes:
        records += bench_cached(model, frames, repeats=repeats)
        if progress:
            progress(f"cached mode done ({len(frames)} frames)")
    if "full" in modes:
        records += bench_full(model, frames, repeats=repeats, budget_ms=budget_ms)
        if progress:
            progress("full mode done")
    return records


def bench_csv_lines(records: list[BenchRecord]) -> list[str]:
    lines = ["T,mode,ms,tokens,kv_bytes"]
    for r in records:
        lines.append(f"{r.frame},{r.mode},{r.ms:.3f},{r.tokens},{r.kv_bytes}")
    return lines
