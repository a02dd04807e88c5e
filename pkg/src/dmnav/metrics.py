"""Navigation metrics: NE, OS, SR, SPL, nDTW."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .simulator import Episode, World, geodesic_distance, path_length, replay


@dataclass
class MetricsRecord:
    ne: float
    os_: float  # oracle success, 0/1
    sr: float
    spl: float
    ndtw: float

    def __post_init__(self):
        if self.sr > self.os_ + 1e-9:
            raise ValueError("SR=1 requires OS=1")
        if self.spl > self.sr + 1e-9:
            raise ValueError("SPL must not exceed SR")


def dtw_cost(path: np.ndarray, ref: np.ndarray) -> float:
    """Classic DTW with Euclidean point cost."""
    n, m = len(path), len(ref)
    if n == 0 or m == 0:
        raise ValueError("DTW paths must be nonempty")
    d = np.linalg.norm(path[:, None, :] - ref[None, :, :], axis=2)
    acc = np.full((n, m), np.inf)
    acc[0, 0] = d[0, 0]
    for i in range(n):
        for j in range(m):
            if i == 0 and j == 0:
                continue
            best = np.inf
            if i > 0:
                best = min(best, acc[i - 1, j])
            if j > 0:
                best = min(best, acc[i, j - 1])
            if i > 0 and j > 0:
                best = min(best, acc[i - 1, j - 1])
            acc[i, j] = d[i, j] + best
    return float(acc[n - 1, m - 1])


def ndtw(path, ref, d_th: float) -> float:
    path = np.asarray(path, dtype=float)
    ref = np.asarray(ref, dtype=float)
    return float(math.exp(-dtw_cost(path, ref) / (len(ref) * d_th)))


def episode_metrics(world: World, episode: Episode, poses, stopped: bool) -> MetricsRecord:
    """Score one trajectory (list of Pose) against an episode."""
    r = world.spec.success_radius
    goal = np.asarray(episode.goal)
    fieldgrid = world.geodesic_field(goal[0], goal[1])
    if fieldgrid is None:
        raise ValueError("episode goal is not in free space")
    dists = [world.field_at(fieldgrid, p.x, p.y) for p in poses]
    ne = dists[-1]
    oracle = 1.0 if min(dists) <= r else 0.0
    sr = 1.0 if (stopped and ne <= r) else 0.0
    l_taken = path_length(poses)
    l_short = max(episode.l_shortest, 1e-9)
    spl = sr * l_short / max(l_taken, l_short)
    ref_poses = replay(world, episode.start, episode.expert_actions)
    path_xy = np.array([[p.x, p.y] for p in poses])
    ref_xy = np.array([[p.x, p.y] for p in ref_poses])
    nd = ndtw(path_xy, ref_xy, r)
    return MetricsRecord(ne=float(ne), os_=oracle, sr=sr, spl=float(spl), ndtw=nd)


def aggregate(records: list[MetricsRecord]) -> dict:
    if not records:
        return {"count": 0, "ne": None, "os": None, "sr": None, "spl": None, "ndtw": None}

    def m(key):
        return float(np.mean([getattr(rec, key) for rec in records]))

    return {
        "count": len(records),
        "ne": m("ne"),
        "os": m("os_"),
        "sr": m("sr"),
        "spl": m("spl"),
        "ndtw": m("ndtw"),
    }


def metrics_csv_lines(records: list[MetricsRecord]) -> list[str]:
    lines = ["episode_id,NE,OS,SR,SPL,nDTW"]
    for i, rec in enumerate(records):
        lines.append(f"{i},{rec.ne:.6f},{rec.os_:.0f},{rec.sr:.0f},{rec.spl:.6f},{rec.ndtw:.6f}")
    return lines


def geodesic(world: World, a, b) -> float:
    return geodesic_distance(world, a, b)
