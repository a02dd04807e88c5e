"""Full navigation model: dual encoders, fusion, policy, and rollout."""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .config import RunConfig
from .encoders import (GeometricEncoder, Observation, PointHead, SemanticEncoder, SpatialMerge,
                       TokenGrid)
from .memory import DualMemory
from .nn import Module
from .policy import Action, Fusion, Instruction, Policy, select_action
from . import simulator as sim
from .simulator import VOCAB_SIZE, Pose, World
from .tensor import Tensor

PARAM_GROUPS = ("policy", "projection", "semantic", "spatial")


@dataclass
class Memories:
    sem: DualMemory | None
    geo: DualMemory | None
    policy: DualMemory


class NavModel(Module):
    def __init__(self, cfg: RunConfig, seed: int):
        cfg.validate()
        rng = np.random.default_rng(seed)
        object.__setattr__(self, "cfg", cfg)
        d, hd = cfg.dim, cfg.heads
        sem_cap = sum(cfg.cap("sem"))
        geo_cap = sum(cfg.cap("geo"))
        pol_cap = sum(cfg.cap("policy"))
        self.semantic = SemanticEncoder(rng, cfg.img, cfg.patch, d, hd, cfg.sem_blocks, sem_cap)
        if cfg.spatial_encoder == "geometric":
            self.spatial = GeometricEncoder(rng, cfg.img, cfg.patch, d, hd,
                                            cfg.geo_enc_blocks, cfg.geo_dec_blocks, geo_cap)
            self.point_head = PointHead(rng, d, cfg.patch, cfg.point_hidden)
        elif cfg.spatial_encoder == "semantic_copy":
            self.spatial = SemanticEncoder(rng, cfg.img, cfg.patch, d, hd, cfg.sem_blocks,
                                           geo_cap)
        self.sem_merge = SpatialMerge(rng, d)
        if cfg.spatial_encoder != "none":
            self.geo_merge = SpatialMerge(rng, d)
        self.fusion = Fusion(rng, d, hd, cfg.fusion, cfg.lam)
        n_visual = (cfg.img // (2 * cfg.patch)) ** 2
        self.policy = Policy(rng, d, hd, cfg.policy_blocks, VOCAB_SIZE, cfg.max_instr_len,
                             n_visual, pol_cap)

    # ------------------------------------------------------------- params

    def group_of(self, name: str) -> str:
        if name.startswith("fusion.") or name.startswith("policy.adapter."):
            return "projection"
        if name.startswith("policy."):
            return "policy"
        if name.startswith("semantic.") or name.startswith("sem_merge."):
            return "semantic"
        return "spatial"  # spatial encoder, its merge, and the point head

    def group_params(self, group: str) -> list[Tensor]:
        return [p for n, p in self.named_parameters() if self.group_of(n) == group]

    def set_frozen(self, frozen: set[str]):
        for name, p in self.named_parameters():
            p.requires_grad = self.group_of(name) not in frozen

    # ------------------------------------------------------------ forward

    def new_memories(self, unbounded: int | None = None) -> Memories:
        def mk(module: str) -> DualMemory:
            if unbounded is not None:
                return DualMemory(0, unbounded)
            return DualMemory(*self.cfg.cap(module))

        cfg = self.cfg
        return Memories(
            sem=mk("sem") if cfg.semantic_memory else None,
            geo=mk("geo") if cfg.spatial_encoder != "none" else None,
            policy=mk("policy"),
        )

    def start_episode(self, mems: Memories, instr: Instruction):
        if mems.sem is not None:
            mems.sem.reset()
        if mems.geo is not None:
            mems.geo.reset()
        mems.policy.reset()
        self.policy.pin_instruction(mems.policy, instr)

    def encode(self, obs: Observation, mems: Memories, append: bool = True
               ) -> tuple[TokenGrid, TokenGrid, TokenGrid | None]:
        s = self.semantic(obs, mems.sem, append=append)
        s_merged = self.sem_merge(s)
        g = None
        g_merged = None
        if self.cfg.spatial_encoder != "none":
            g = self.spatial(obs, mems.geo, append=append)
            g_merged = self.geo_merge(g)
        fused = self.fusion(s_merged, g_merged)
        return fused, s, g

    def step(self, obs: Observation, mems: Memories, append: bool = True) -> Tensor:
        fused, _, _ = self.encode(obs, mems, append=append)
        return self.policy.step(fused, mems.policy)

    def memory_bytes(self, mems: Memories) -> int:
        total = mems.policy.nbytes()
        if mems.sem is not None:
            total += mems.sem.nbytes()
        if mems.geo is not None:
            total += mems.geo.nbytes()
        return total

    def tokens_touched(self, mems: Memories) -> int:
        """Tokens processed per frame: current queries plus gathered keys."""
        n_frame = (self.cfg.img // self.cfg.patch) ** 2
        total = 0
        if mems.sem is not None:
            total += n_frame + mems.sem.gather(0).token_count
        else:
            total += n_frame
        if self.cfg.spatial_encoder != "none":
            total += n_frame + (mems.geo.gather(0).token_count if mems.geo else 0)
        total += self.policy.n_visual + 1 + mems.policy.gather(0).token_count
        return total


@dataclass
class Trajectory:
    poses: list[Pose]
    actions: list[Action]
    logits: list[np.ndarray] = field(default_factory=list)
    latency_ms: list[float] = field(default_factory=list)
    truncated: bool = False

    @property
    def stopped(self) -> bool:
        return bool(self.actions) and self.actions[-1] == Action.Stop


def rollout(model: NavModel, world: World, episode, max_steps: int | None = None,
            mode: str = "greedy", temperature: float = 1.0,
            rng: np.random.Generator | None = None,
            forced_actions: list[Action] | None = None,
            expert_mix: float = 0.0, mix_rng: np.random.Generator | None = None,
            expert_field: np.ndarray | None = None) -> Trajectory:
    """Run one episode loop: render, encode, act, simulate, until Stop.

    ``forced_actions`` replays a fixed action sequence (expert mode);
    ``expert_mix`` takes the field-descent expert's action with the given
    probability (DAgger-style mixing).
    """
    max_steps = max_steps or world.spec.max_steps
    mems = model.new_memories() if forced_actions is None else None
    if mems is not None:
        model.start_episode(mems, episode.instruction)
    pose = episode.start
    traj = Trajectory(poses=[pose], actions=[])
    for t in range(max_steps):
        t0 = time.perf_counter()
        if forced_actions is not None:
            if t >= len(forced_actions):
                break
            act = forced_actions[t]
            traj.logits.append(np.zeros(4, dtype=np.float32))
        else:
            obs, _, _ = sim.render(world, pose, frame_id=t, anchor=episode.start)
            logits = model.step(obs, mems)
            act = select_action(logits, mode=mode, temperature=temperature, rng=rng)
            traj.logits.append(logits.data.copy())
            if expert_mix > 0.0 and expert_field is not None and mix_rng is not None:
                if mix_rng.random() < expert_mix:
                    act = sim.expert_action(world, pose, np.asarray(episode.goal), expert_field)
        traj.latency_ms.append((time.perf_counter() - t0) * 1000.0)
        traj.actions.append(act)
        if act == Action.Stop:
            return traj
        pose, _ = sim.step(world, pose, act)
        traj.poses.append(pose)
    traj.truncated = True
    return traj


def write_trajectory_jsonl(path, traj: Trajectory):
    import json

    with open(path, "w") as fh:
        for i, act in enumerate(traj.actions):
            pose = traj.poses[min(i, len(traj.poses) - 1)]
            rec = {
                "step": i,
                "pose": {"x": round(pose.x, 6), "y": round(pose.y, 6),
                         "theta": round(pose.heading, 6)},
                "action": act.name,
                "logits": [round(float(v), 6) for v in traj.logits[i]],
                "latency_ms": round(traj.latency_ms[i], 3),
            }
            fh.write(json.dumps(rec, sort_keys=True, separators=(",", ":")) + "\n")
