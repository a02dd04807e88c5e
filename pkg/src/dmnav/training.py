"""Training recipes: point-map pretraining, behavior cloning with frozen
encoders, DAgger aggregation, evaluation, and the ablation grid."""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass

import numpy as np

from . import simulator as sim
from . import tensor as T
from .config import RunConfig
from .metrics import MetricsRecord, aggregate, episode_metrics
from .model import Memories, NavModel, Trajectory, rollout
from .policy import Action, Instruction
from .simulator import Episode, Pose, WorldSpec, get_world
from .tensor import Adam, Tensor, record


class TrainingDiverged(RuntimeError):
    pass


def easy_spec(cfg: RunConfig) -> WorldSpec:
    return WorldSpec(bounds=cfg.easy_bounds, rooms_min=2, rooms_max=cfg.easy_rooms_max,
                     landmarks_min=3, landmarks_max=6, cell=cfg.cell,
                     agent_radius=cfg.agent_radius, img=cfg.img, fov_deg=cfg.fov_deg,
                     cam_height=cfg.cam_height, wall_height=cfg.wall_height,
                     landmark_height=cfg.landmark_height, success_radius=cfg.success_radius,
                     max_steps=cfg.max_steps)


def memory_spec(cfg: RunConfig) -> WorldSpec:
    return dataclasses.replace(easy_spec(cfg), bounds=cfg.memory_bounds,
                               rooms_min=2, rooms_max=cfg.memory_rooms_max,
                               landmarks_min=4, landmarks_max=8)


def generate_data(cfg: RunConfig, seed: int, n_easy: int, n_memory: int,
                  tag: int = 0) -> list[Episode]:
    """Seed-disjoint episode generation; ``tag`` separates train/val pools."""
    out: list[Episode] = []
    if n_easy:
        out += sim.generate_suite("easy", n_easy, seed * 10 + tag, easy_spec(cfg),
                                  max_len=cfg.easy_max_len)
    if n_memory:
        out += sim.generate_suite("memory", n_memory, seed * 10 + tag + 5, memory_spec(cfg),
                                  min_len=cfg.memory_min_len)
    return out


# ------------------------------------------------------------- pretraining


def _pointmap_loss(model: NavModel, obs, pts_gt: np.ndarray, mems: Memories) -> Tensor:
    g = model.spatial(obs, mems.geo)
    pm = model.point_head(g)
    diff = T.abs_(T.sub(pm.points, Tensor(pts_gt)))
    l1 = T.add(T.add(T.index(diff, (0,)), T.index(diff, (1,))), T.index(diff, (2,)))
    weighted = T.sub(T.mul(pm.confidence, l1), T.log(pm.confidence))
    return T.mean(weighted)


def _random_clip(world, rng, length: int) -> tuple[Pose, list[Action]]:
    pose = sim.sample_free_pose(world, rng, clearance=world.spec.agent_radius + 0.05)
    acts = [Action(int(a)) for a in rng.choice([0, 0, 0, 1, 2], size=length - 1)]
    return pose, acts


def pretrain_geometric(model: NavModel, cfg: RunConfig, seed: int,
                       steps: int | None = None, n_worlds: int = 24,
                       progress=None) -> list[float]:
    """Confidence-weighted point-map regression against raycast ground truth."""
    if cfg.spatial_encoder != "geometric":
        raise ValueError("pretraining requires the geometric spatial encoder")
    steps = cfg.pretrain_steps if steps is None else steps
    spec = easy_spec(cfg)
    rng = np.random.default_rng([seed, 17])
    world_seeds = [900_000 + seed * 1000 + i for i in range(n_worlds)]
    model.set_frozen({"policy", "projection", "semantic"})
    opt = Adam([(model.group_params("spatial"), cfg.pretrain_lr)])
    curve = []
    for it in range(steps):
        world = get_world(world_seeds[it % n_worlds], spec)
        pose, acts = _random_clip(world, rng, cfg.pretrain_clip_len)
        mems = model.new_memories()
        anchor = pose
        try:
            with record() as tape:
                terms = None
                for t in range(len(acts) + 1):
                    obs, _, pts = sim.render(world, pose, frame_id=t, anchor=anchor)
                    loss_t = _pointmap_loss(model, obs, pts, mems)
                    terms = loss_t if terms is None else T.add(terms, loss_t)
                    if t < len(acts):
                        pose, _ = sim.step(world, pose, acts[t])
                loss = T.scale(terms, 1.0 / (len(acts) + 1))
                tape.backward(loss)
        except T.NumericError as e:
            raise TrainingDiverged(f"point-map pretraining diverged (seed {seed}, "
                                   f"step {it}): {e}") from e
        opt.step()
        opt.zero_grad()
        curve.append(loss.item())
        if progress and (it + 1) % 200 == 0:
            progress(f"pretrain step {it + 1}/{steps} loss {loss.item():.4f}")
    return curve


def heldout_depth_error(model: NavModel, cfg: RunConfig, seed: int,
                        n_clips: int = 12) -> tuple[float, float]:
    """Mean |predicted - true| planar depth on unseen worlds, plus the world
    diagonal for normalization."""
    spec = easy_spec(cfg)
    rng = np.random.default_rng([seed, 29])
    errs = []
    diag = 0.0
    for c in range(n_clips):
        world = get_world(950_000 + seed * 1000 + c, spec)
        diag = world.diagonal()
        pose, acts = _random_clip(world, rng, cfg.pretrain_clip_len)
        mems = model.new_memories()
        anchor = pose
        for t in range(len(acts) + 1):
            obs, depth_gt, _ = sim.render(world, pose, frame_id=t, anchor=anchor)
            g = model.spatial(obs, mems.geo)
            pm = model.point_head(g)
            cx = math.cos(anchor.heading) * (pose.x - anchor.x) \
                + math.sin(anchor.heading) * (pose.y - anchor.y)
            cy = -math.sin(anchor.heading) * (pose.x - anchor.x) \
                + math.cos(anchor.heading) * (pose.y - anchor.y)
            px = pm.points.data[0]
            py = pm.points.data[1]
            d_hat = np.hypot(px - cx, py - cy)
            errs.append(np.abs(d_hat - depth_gt).mean())
            if t < len(acts):
                pose, _ = sim.step(world, pose, acts[t])
    return float(np.mean(errs)), diag


# ------------------------------------------------------- behavior cloning


@dataclass
class TrainSample:
    world_seed: int
    spec: WorldSpec
    poses: list[Pose]  # len >= len(labels); poses[t] is the state before labels[t]
    labels: list[Action]
    instruction: Instruction


def episode_to_sample(ep: Episode) -> TrainSample:
    world = get_world(ep.world_seed, ep.spec)
    poses = sim.replay(world, ep.start, ep.expert_actions)
    return TrainSample(ep.world_seed, ep.spec, poses, list(ep.expert_actions), ep.instruction)


def episode_loss(model: NavModel, world, sample: TrainSample) -> Tensor:
    mems = model.new_memories()
    model.start_episode(mems, sample.instruction)
    anchor = sample.poses[0]
    total = None
    for t, label in enumerate(sample.labels):
        obs, _, _ = sim.render(world, sample.poses[t], frame_id=t, anchor=anchor)
        logits = model.step(obs, mems)
        ce = T.cross_entropy(logits, int(label))
        total = ce if total is None else T.add(total, ce)
    return T.scale(total, 1.0 / len(sample.labels))


def bc_train(model: NavModel, samples: list[TrainSample], cfg: RunConfig, seed: int,
             epochs: int | None = None, frozen: tuple[str, ...] = ("semantic", "spatial"),
             lr_policy: float | None = None, lr_projection: float | None = None,
             progress=None) -> list[float]:
    """Teacher-forced cross-entropy over expert actions, streaming order."""
    if not samples:
        raise ValueError("behavior cloning requires a nonempty dataset")
    epochs = cfg.epochs if epochs is None else epochs
    model.set_frozen(set(frozen))
    groups = [(model.group_params("policy"), lr_policy or cfg.lr_policy),
              (model.group_params("projection"), lr_projection or cfg.lr_projection)]
    for enc in ("semantic", "spatial"):
        if enc not in frozen:
            params = model.group_params(enc)
            if params:
                groups.append((params, cfg.lr_encoder))
    opt = Adam(groups)
    rng = np.random.default_rng([seed, 101])
    curve = []
    batch = max(1, cfg.batch_episodes)
    for epoch in range(epochs):
        order = rng.permutation(len(samples))
        for b0 in range(0, len(order), batch):
            idxs = order[b0:b0 + batch]
            opt.zero_grad()
            acc = 0.0
            for idx in idxs:
                s = samples[int(idx)]
                world = get_world(s.world_seed, s.spec)
                with record() as tape:
                    loss = episode_loss(model, world, s)
                    tape.backward(loss)
                acc += loss.item()
            opt.step()
            curve.append(acc / len(idxs))
        if progress:
            tail = curve[-max(1, len(samples) // (4 * batch)):]
            progress(f"bc epoch {epoch + 1}/{epochs} mean loss {np.mean(tail):.4f}")
    return curve


# ------------------------------------------------------------------ DAgger


def dagger_collect(model: NavModel, base_samples: list[TrainSample],
                   pool: list[Episode], cfg: RunConfig, seed: int,
                   rounds: int | None = None, episodes_per_round: int | None = None,
                   progress=None) -> tuple[list[TrainSample], list[int], int]:
    """Roll out the policy, relabel visited states with the expert, retrain.

    Returns (aggregated samples, per-round new step counts, skipped count).
    """
    rounds = cfg.dagger_rounds if rounds is None else rounds
    per_round = cfg.dagger_episodes if episodes_per_round is None else episodes_per_round
    samples = list(base_samples)
    counts = []
    skipped = 0
    for r in range(rounds):
        rng = np.random.default_rng([seed, 211, r])
        picks = rng.integers(0, len(pool), size=min(per_round, len(pool)))
        new: list[TrainSample] = []
        for pi in picks:
            ep = pool[int(pi)]
            world = get_world(ep.world_seed, ep.spec)
            fieldgrid = world.geodesic_field(*ep.goal)
            if fieldgrid is None:
                skipped += 1
                continue
            traj = rollout(model, world, ep, mode="greedy",
                           expert_mix=cfg.dagger_expert_mix, mix_rng=rng,
                           expert_field=fieldgrid)
            states = traj.poses[:len(traj.actions)]
            labels = [sim.expert_action(world, p, np.asarray(ep.goal), fieldgrid)
                      for p in states]
            if not labels:
                skipped += 1
                continue
            new.append(TrainSample(ep.world_seed, ep.spec, states, labels, ep.instruction))
        counts.append(sum(len(s.labels) for s in new))
        samples.extend(new)
        if progress:
            progress(f"dagger round {r + 1}/{rounds}: +{counts[-1]} steps")
        bc_train(model, samples, cfg, seed=seed * 31 + r, epochs=cfg.dagger_epochs,
                 progress=progress)
    return samples, counts, skipped


# -------------------------------------------------------------- evaluation


def evaluate(model: NavModel | None, episodes: list[Episode], expert: bool = False
             ) -> tuple[list[MetricsRecord], dict]:
    records = []
    for ep in episodes:
        world = get_world(ep.world_seed, ep.spec)
        forced = ep.expert_actions if expert else None
        traj = rollout(model, world, ep, forced_actions=forced)
        records.append(episode_metrics(world, ep, traj.poses, traj.stopped))
    return records, aggregate(records)


# ---------------------------------------------------------------- ablation


ABLATION_VARIANTS = [
    ("memory", "full", {}),
    ("memory", "no_spatial_memory", {"spatial_encoder": "none"}),
    ("memory", "no_semantic_memory", {"semantic_memory": False}),
    ("memory", "no_dual_memory", {"spatial_encoder": "none", "semantic_memory": False}),
    ("encoder", "extra_none", {"spatial_encoder": "none"}),
    ("encoder", "extra_semantic_copy", {"spatial_encoder": "semantic_copy"}),
    ("encoder", "extra_geometric_random", {"pretrained": False}),
    ("encoder", "extra_geometric_pretrained", {}),
    ("fusion", "lambda_0.1", {"lam": 0.1}),
    ("fusion", "lambda_0.2", {"lam": 0.2}),
    ("fusion", "lambda_0.5", {"lam": 0.5}),
    ("fusion", "concat", {"fusion": "concat"}),
    ("fusion", "cross_attn", {"fusion": "cross_attn"}),
    ("data", "bc", {}),
    ("data", "bc_dagger", {"dagger": True}),
]


def _variant_cfg(cfg: RunConfig, overrides: dict) -> tuple[RunConfig, bool, bool]:
    pretrained = overrides.get("pretrained", True)
    dagger = overrides.get("dagger", False)
    fields = {k: v for k, v in overrides.items() if k not in ("pretrained", "dagger")}
    vcfg = dataclasses.replace(cfg, **fields)
    if vcfg.spatial_encoder != "geometric":
        pretrained = False
    return vcfg.validate(), pretrained, dagger


def _run_key(vcfg: RunConfig, pretrained: bool, dagger: bool, seed: int) -> tuple:
    return (vcfg.spatial_encoder, vcfg.semantic_memory, vcfg.fusion, vcfg.lam,
            pretrained, dagger, seed)


def run_variant(cfg: RunConfig, overrides: dict, seed: int,
                train_eps: list[Episode], val_eps: list[Episode],
                pretrained_params: dict[str, np.ndarray] | None,
                bc_epochs: int | None = None, lr_policy: float | None = None,
                lr_projection: float | None = None, progress=None) -> dict:
    vcfg, pretrained, dagger = _variant_cfg(cfg, overrides)
    model = NavModel(vcfg, seed)
    if pretrained:
        if pretrained_params is None:
            raise ValueError("variant requires pretrained spatial weights")
        by_name = dict(model.named_parameters())
        for name, arr in pretrained_params.items():
            if name in by_name and by_name[name].data.shape == arr.shape:
                by_name[name].data = arr.astype(by_name[name].data.dtype).copy()
    samples = [episode_to_sample(ep) for ep in train_eps]
    bc_train(model, samples, vcfg, seed, epochs=bc_epochs, lr_policy=lr_policy,
             lr_projection=lr_projection, progress=progress)
    if dagger:
        dagger_collect(model, samples, train_eps, vcfg, seed, progress=progress)
    _, agg = evaluate(model, val_eps)
    return agg


def ablate(cfg: RunConfig, seeds: tuple[int, ...], train_eps: list[Episode],
           val_eps: list[Episode], bc_epochs: int | None = None,
           lr_policy: float | None = None, lr_projection: float | None = None,
           progress=None) -> list[dict]:
    """Train/evaluate every ablation variant with shared seeds and data."""
    pretrained: dict[int, dict[str, np.ndarray]] = {}
    for seed in seeds:
        model = NavModel(dataclasses.replace(cfg, spatial_encoder="geometric"), seed)
        pretrain_geometric(model, cfg, seed, progress=progress)
        pretrained[seed] = {name: p.data.copy() for name, p in model.named_parameters()
                            if model.group_of(name) == "spatial"}
        if progress:
            progress(f"pretrained spatial encoder for seed {seed}")
    cache: dict[tuple, dict] = {}
    rows = []
    for table, variant, overrides in ABLATION_VARIANTS:
        per_seed = []
        for seed in seeds:
            vcfg, pre, dag = _variant_cfg(cfg, overrides)
            key = _run_key(vcfg, pre, dag, seed)
            if key not in cache:
                cache[key] = run_variant(cfg, overrides, seed, train_eps, val_eps,
                                         pretrained.get(seed), bc_epochs=bc_epochs,
                                         lr_policy=lr_policy, lr_projection=lr_projection,
                                         progress=progress)
                if progress:
                    progress(f"{table}/{variant} seed {seed}: "
                             f"SR {cache[key]['sr']:.3f} SPL {cache[key]['spl']:.3f}")
            per_seed.append(cache[key])
        row = {"table": table, "variant": variant}
        for metric in ("ne", "os", "sr", "spl"):
            vals = [r[metric] for r in per_seed]
            row[f"{metric}_mean"] = float(np.mean(vals))
            row[f"{metric}_sd"] = float(np.std(vals))
        rows.append(row)
    return rows


def ablation_csv_lines(rows: list[dict]) -> list[str]:
    header = "table,variant,NE_mean,NE_sd,OS_mean,OS_sd,SR_mean,SR_sd,SPL_mean,SPL_sd"
    lines = [header]
    for r in rows:
        lines.append(",".join([r["table"], r["variant"]] + [
            f"{r[k]:.6f}" for k in ("ne_mean", "ne_sd", "os_mean", "os_sd",
                                    "sr_mean", "sr_sd", "spl_mean", "spl_sd")]))
    return lines
