"""Deterministic continuous 2D worlds with egocentric raycast rendering.

Worlds are procedurally generated (seeded BSP rooms joined by door gaps,
colored cylinder landmarks), rendered column-by-column with a 2.5D
raycaster that also yields ground-truth depth and per-pixel 3D points, and
navigated with a 0.25 m step / 30-degree turn action model. An A*-based
expert planner and templated instructions supply imitation data.
"""

from __future__ import annotations

import heapq
import json
import math
from dataclasses import dataclass, field, replace

import numpy as np
from scipy import ndimage, sparse
from scipy.sparse.csgraph import dijkstra

from .encoders import Observation
from .policy import (ACTION_LETTERS, FORWARD_METERS, LETTER_ACTIONS, TURN_RADIANS, Action,
                     Instruction)

TWO_PI = 2.0 * math.pi

COLOR_NAMES = ["red", "green", "blue", "yellow", "purple", "orange", "cyan", "pink"]
COLOR_RGB = np.array([
    [0.90, 0.15, 0.15], [0.15, 0.80, 0.20], [0.20, 0.30, 0.90], [0.90, 0.85, 0.20],
    [0.60, 0.20, 0.80], [0.95, 0.55, 0.10], [0.20, 0.85, 0.85], [0.95, 0.50, 0.70],
])
SHAPE_NAMES = ["drum", "crate", "post", "cone"]
WALL_RGB = np.array([0.75, 0.75, 0.78])
FLOOR_RGB = np.array([0.32, 0.30, 0.28])
CEIL_RGB = np.array([0.55, 0.56, 0.60])

_TEMPLATE_WORDS = ["<unk>", "go", "walk", "to", "the", "and", "then", "stop", "at",
                   "past", "back", "where", "you", "first", "saw", "return"]
VOCAB_WORDS = _TEMPLATE_WORDS + COLOR_NAMES + SHAPE_NAMES
VOCAB = {w: i for i, w in enumerate(VOCAB_WORDS)}
VOCAB_SIZE = len(VOCAB_WORDS)


def tokenize(text: str) -> list[int]:
    return [VOCAB.get(w, 0) for w in text.split()]


class GenerationError(RuntimeError):
    pass


class PlanningError(RuntimeError):
    pass


def wrap_angle(a: float) -> float:
    return a % TWO_PI


def wrap_pi(a: float) -> float:
    """Wrap to (-pi, pi]."""
    a = (a + math.pi) % TWO_PI - math.pi
    return math.pi if a == -math.pi else a


@dataclass(frozen=True)
class Pose:
    x: float
    y: float
    heading: float  # radians in [0, 2*pi)

    @property
    def xy(self) -> np.ndarray:
        return np.array([self.x, self.y])


@dataclass(frozen=True)
class Landmark:
    x: float
    y: float
    radius: float
    color_id: int
    shape_id: int

    @property
    def name(self) -> str:
        return f"{COLOR_NAMES[self.color_id]} {SHAPE_NAMES[self.shape_id]}"

    @property
    def xy(self) -> np.ndarray:
        return np.array([self.x, self.y])


@dataclass(frozen=True)
class WorldSpec:
    bounds: float = 6.0
    rooms_min: int = 2
    rooms_max: int = 4
    landmarks_min: int = 3
    landmarks_max: int = 6
    min_room: float = 2.0
    door_width: float = 0.9
    cell: float = 0.05
    agent_radius: float = 0.1
    img: int = 64
    fov_deg: float = 90.0
    cam_height: float = 0.8
    wall_height: float = 1.6
    landmark_height: float = 0.9
    landmark_radius: float = 0.2
    success_radius: float = 0.5
    max_steps: int = 200

    def key(self) -> tuple:
        return tuple(getattr(self, f.name) for f in self.__dataclass_fields__.values())


class World:
    """Immutable after generation; geodesic fields are cached lazily."""

    def __init__(self, seed: int, spec: WorldSpec, walls: np.ndarray,
                 landmarks: list[Landmark], free: np.ndarray):
        self.seed = seed
        self.spec = spec
        self.walls = walls  # [n, 4] segments (x1, y1, x2, y2)
        self.landmarks = landmarks
        self.free = free  # [nx, ny] bool, True where the agent center may be
        self._graph = None
        self._fields: dict[int, np.ndarray] = {}
        self._labels, _ = ndimage.label(free, structure=np.ones((3, 3), dtype=int))

    @property
    def bounds(self) -> float:
        return self.spec.bounds

    def diagonal(self) -> float:
        return self.spec.bounds * math.sqrt(2.0)

    # --------------------------------------------------------------- grid

    def cell_of(self, x: float, y: float) -> tuple[int, int]:
        n = self.free.shape[0]
        c = self.spec.cell
        return (min(max(int(x / c), 0), n - 1), min(max(int(y / c), 0), n - 1))

    def cell_center(self, i: int, j: int) -> np.ndarray:
        c = self.spec.cell
        return np.array([(i + 0.5) * c, (j + 0.5) * c])

    def snap_free(self, x: float, y: float, radius_cells: int = 4) -> tuple[int, int] | None:
        i, j = self.cell_of(x, y)
        if self.free[i, j]:
            return (i, j)
        n = self.free.shape[0]
        best, best_d = None, None
        for di in range(-radius_cells, radius_cells + 1):
            for dj in range(-radius_cells, radius_cells + 1):
                a, b = i + di, j + dj
                if 0 <= a < n and 0 <= b < n and self.free[a, b]:
                    d = di * di + dj * dj
                    if best is None or d < best_d:
                        best, best_d = (a, b), d
        return best

    def _build_graph(self):
        n = self.free.shape[0]
        idx = np.arange(n * n).reshape(n, n)
        rows, cols, data = [], [], []
        free = self.free
        straight = [(1, 0), (0, 1)]
        for di, dj in straight:
            a = free[: n - di if di else n, : n - dj if dj else n]
            b = free[di:, dj:]
            ok = a & b
            rows.append(idx[: n - di if di else n, : n - dj if dj else n][ok])
            cols.append(idx[di:, dj:][ok])
            data.append(np.full(ok.sum(), self.spec.cell))
        for di, dj in [(1, 1), (1, -1)]:
            sl_a = (slice(0, n - 1), slice(0, n - 1) if dj == 1 else slice(1, n))
            sl_b = (slice(1, n), slice(1, n) if dj == 1 else slice(0, n - 1))
            a = free[sl_a]
            b = free[sl_b]
            # corner rule: a diagonal move needs both orthogonal cells free
            o1 = free[(sl_b[0], sl_a[1])]
            o2 = free[(sl_a[0], sl_b[1])]
            ok = a & b & o1 & o2
            rows.append(idx[sl_a][ok])
            cols.append(idx[sl_b][ok])
            data.append(np.full(ok.sum(), self.spec.cell * math.sqrt(2.0)))
        rows = np.concatenate(rows)
        cols = np.concatenate(cols)
        data = np.concatenate(data)
        self._graph = sparse.csr_matrix((data, (rows, cols)), shape=(n * n, n * n))

    def geodesic_field(self, gx: float, gy: float) -> np.ndarray | None:
        """Distance-to-(gx, gy) over the grid, meters; inf where unreachable."""
        cell = self.snap_free(gx, gy)
        if cell is None:
            return None
        n = self.free.shape[0]
        key = cell[0] * n + cell[1]
        if key not in self._fields:
            if self._graph is None:
                self._build_graph()
            d = dijkstra(self._graph, directed=False, indices=key)
            self._fields[key] = d.reshape(n, n)
        return self._fields[key]

    def field_at(self, fieldgrid: np.ndarray, x: float, y: float) -> float:
        cell = self.snap_free(x, y)
        if cell is None:
            return math.inf
        return float(fieldgrid[cell])


def geodesic_distance(world: World, a, b) -> float:
    fieldgrid = world.geodesic_field(float(b[0]), float(b[1]))
    if fieldgrid is None:
        return math.inf
    ca = world.snap_free(float(a[0]), float(a[1]))
    cb = world.snap_free(float(b[0]), float(b[1]))
    if ca is None or cb is None:
        return math.inf
    if ca == cb:
        return 0.0
    return float(fieldgrid[ca])


# -------------------------------------------------------------- geometry


def _point_seg_dist(px, py, x1, y1, x2, y2):
    """Distance between points and segments; all args broadcast together."""
    dx, dy = x2 - x1, y2 - y1
    L2 = dx * dx + dy * dy
    safe = np.where(L2 < 1e-18, 1.0, L2)
    t = np.clip(((px - x1) * dx + (py - y1) * dy) / safe, 0.0, 1.0)
    t = np.where(L2 < 1e-18, 0.0, t)
    return np.hypot(px - (x1 + t * dx), py - (y1 + t * dy))


def _points_to_walls_dist(px, py, walls: np.ndarray) -> np.ndarray:
    out = np.full(np.broadcast(px, py).shape, np.inf)
    for x1, y1, x2, y2 in walls:
        out = np.minimum(out, _point_seg_dist(px, py, x1, y1, x2, y2))
    return out


def _seg_walls_min_dist(p: np.ndarray, q: np.ndarray, walls: np.ndarray) -> float:
    """Min distance between the segment p->q and any wall (0 if crossing)."""
    if len(walls) == 0:
        return math.inf
    a = walls[:, 0:2]
    b = walls[:, 2:4]
    r = q - p
    s = b - a
    qp = a - p

    def cross(u, v):
        return u[..., 0] * v[..., 1] - u[..., 1] * v[..., 0]

    d1 = cross(r, qp)
    d2 = cross(r, b - p)
    d3 = cross(s, p - a)
    d4 = cross(s, q - a)
    proper = (np.sign(d1) * np.sign(d2) < 0) & (np.sign(d3) * np.sign(d4) < 0)
    if proper.any():
        return 0.0
    cands = np.stack([
        _point_seg_dist(p[0], p[1], walls[:, 0], walls[:, 1], walls[:, 2], walls[:, 3]),
        _point_seg_dist(q[0], q[1], walls[:, 0], walls[:, 1], walls[:, 2], walls[:, 3]),
        _point_seg_dist(a[:, 0], a[:, 1], p[0], p[1], q[0], q[1]),
        _point_seg_dist(b[:, 0], b[:, 1], p[0], p[1], q[0], q[1]),
    ])
    return float(cands.min())


def _ray_walls(origin: np.ndarray, dirs: np.ndarray, walls: np.ndarray) -> np.ndarray:
    """First-hit distances of rays against wall segments; [n_rays]."""
    a = walls[:, 0:2][None, :, :]
    s = (walls[:, 2:4] - walls[:, 0:2])[None, :, :]
    d = dirs[:, None, :]
    ao = a - origin[None, None, :]
    denom = d[..., 0] * s[..., 1] - d[..., 1] * s[..., 0]
    with np.errstate(divide="ignore", invalid="ignore"):
        t = (ao[..., 0] * s[..., 1] - ao[..., 1] * s[..., 0]) / denom
        u = (ao[..., 0] * d[..., 1] - ao[..., 1] * d[..., 0]) / denom
    valid = (np.abs(denom) > 1e-12) & (t > 1e-9) & (u >= 0.0) & (u <= 1.0)
    t = np.where(valid, t, np.inf)
    return t.min(axis=1)


def _ray_circles(origin: np.ndarray, dirs: np.ndarray, centers: np.ndarray,
                 radii: np.ndarray) -> np.ndarray:
    """Hit distances per (ray, circle); inf where missed. Inside hits use the exit."""
    oc = centers[None, :, :] - origin[None, None, :]
    proj = (oc * dirs[:, None, :]).sum(axis=2)
    d2 = (oc**2).sum(axis=2) - proj**2
    disc = radii[None, :] ** 2 - d2
    with np.errstate(invalid="ignore"):
        root = np.sqrt(np.maximum(disc, 0.0))
    near = proj - root
    far = proj + root
    t = np.where(near > 1e-9, near, far)
    return np.where((disc >= 0.0) & (t > 1e-9), t, np.inf)


# ---------------------------------------------------------------- worlds


def _occupancy(walls: np.ndarray, spec: WorldSpec) -> np.ndarray:
    n = int(round(spec.bounds / spec.cell))
    centers = (np.arange(n) + 0.5) * spec.cell
    px, py = np.meshgrid(centers, centers, indexing="ij")
    dist = _points_to_walls_dist(px, py, walls)
    return dist >= spec.agent_radius


def generate_world(seed: int, spec: WorldSpec | None = None) -> World:
    """Seeded procedural layout: BSP rooms with door gaps plus landmarks."""
    spec = spec or WorldSpec()
    rng = np.random.default_rng(seed)
    for _attempt in range(40):
        world = _try_generate(rng, seed, spec)
        if world is not None:
            return world
    raise GenerationError(f"seed {seed} rejected after 40 attempts")


def _try_generate(rng: np.random.Generator, seed: int, spec: WorldSpec) -> World | None:
    b = spec.bounds
    walls = [(0.0, 0.0, b, 0.0), (b, 0.0, b, b), (b, b, 0.0, b), (0.0, b, 0.0, 0.0)]
    rects = [(0.0, 0.0, b, b)]
    n_rooms = int(rng.integers(spec.rooms_min, spec.rooms_max + 1))
    guard = 0
    while len(rects) < n_rooms and guard < 80:
        guard += 1
        order = rng.permutation(len(rects))
        for ri in order:
            x0, y0, x1, y1 = rects[ri]
            w, h = x1 - x0, y1 - y0
            axis = 0 if w >= h else 1
            side = w if axis == 0 else h
            if side < 2.0 * spec.min_room:
                continue
            cut = float(rng.uniform(spec.min_room, side - spec.min_room))
            lo = y0 if axis == 0 else x0
            hi = y1 if axis == 0 else x1
            span = hi - lo
            margin = spec.door_width / 2 + 0.35
            if span <= 2 * margin:
                continue
            door_c = float(rng.uniform(lo + margin, hi - margin))
            g0, g1 = door_c - spec.door_width / 2, door_c + spec.door_width / 2
            if axis == 0:
                cx = x0 + cut
                if g0 > lo + 1e-6:
                    walls.append((cx, lo, cx, g0))
                if g1 < hi - 1e-6:
                    walls.append((cx, g1, cx, hi))
                rects[ri] = (x0, y0, cx, y1)
                rects.append((cx, y0, x1, y1))
            else:
                cy = y0 + cut
                if g0 > lo + 1e-6:
                    walls.append((lo, cy, g0, cy))
                if g1 < hi - 1e-6:
                    walls.append((g1, cy, hi, cy))
                rects[ri] = (x0, y0, x1, cy)
                rects.append((x0, cy, x1, y1))
            break
        else:
            break
    wall_arr = np.array(walls, dtype=float)
    free = _occupancy(wall_arr, spec)
    labels, n_lab = ndimage.label(free, structure=np.ones((3, 3), dtype=int))
    if n_lab == 0:
        return None
    main = int(np.argmax(np.bincount(labels[labels > 0]))) if n_lab > 1 else 1

    n_lm = int(rng.integers(spec.landmarks_min, spec.landmarks_max + 1))
    combos = [(c, s) for c in range(len(COLOR_NAMES)) for s in range(len(SHAPE_NAMES))]
    picks = rng.permutation(len(combos))[:n_lm]
    landmarks: list[Landmark] = []
    for k in range(n_lm):
        placed = False
        for _try in range(60):
            x = float(rng.uniform(0.5, b - 0.5))
            y = float(rng.uniform(0.5, b - 0.5))
            if _points_to_walls_dist(np.array(x), np.array(y), wall_arr) < 0.45:
                continue
            if any(math.hypot(x - lm.x, y - lm.y) < 1.0 for lm in landmarks):
                continue
            ci, cj = int(x / spec.cell), int(y / spec.cell)
            if labels[ci, cj] != main:
                continue
            c, s = combos[picks[k]]
            landmarks.append(Landmark(x, y, spec.landmark_radius, c, s))
            placed = True
            break
        if not placed:
            return None
    if len(landmarks) < spec.landmarks_min:
        return None
    world = World(seed, spec, wall_arr, landmarks, free)
    return world


def sample_free_pose(world: World, rng: np.random.Generator, clearance: float = 0.0) -> Pose:
    spec = world.spec
    free_idx = np.argwhere(world.free)
    for _ in range(200):
        i, j = free_idx[rng.integers(len(free_idx))]
        x, y = world.cell_center(i, j)
        if clearance > 0:
            if _points_to_walls_dist(np.array(x), np.array(y), world.walls) < clearance:
                continue
        heading = float(rng.integers(12)) * TURN_RADIANS
        return Pose(float(x), float(y), heading)
    raise GenerationError("could not sample a free pose")


# ----------------------------------------------------------------- motion


def step(world: World, pose: Pose, action: Action) -> tuple[Pose, bool]:
    """Apply one action; forward moves are blocked by swept-circle collision."""
    if action == Action.Stop:
        return pose, False
    if action == Action.TurnLeft:
        return Pose(pose.x, pose.y, wrap_angle(pose.heading + TURN_RADIANS)), False
    if action == Action.TurnRight:
        return Pose(pose.x, pose.y, wrap_angle(pose.heading - TURN_RADIANS)), False
    p = np.array([pose.x, pose.y])
    q = p + FORWARD_METERS * np.array([math.cos(pose.heading), math.sin(pose.heading)])
    if _seg_walls_min_dist(p, q, world.walls) < world.spec.agent_radius:
        return pose, True
    return Pose(float(q[0]), float(q[1]), pose.heading), False


def replay(world: World, start: Pose, actions: list[Action]) -> list[Pose]:
    """Poses visited, starting with ``start`` (length = len(actions)+1)."""
    poses = [start]
    pose = start
    for a in actions:
        pose, _ = step(world, pose, a)
        poses.append(pose)
    return poses


# --------------------------------------------------------------- renderer


def _column_hits(world: World, pose: Pose):
    spec = world.spec
    w = spec.img
    fov = math.radians(spec.fov_deg)
    angles = pose.heading + (fov / 2.0 - (np.arange(w) + 0.5) * fov / w)
    dirs = np.stack([np.cos(angles), np.sin(angles)], axis=1)
    origin = np.array([pose.x, pose.y])
    d_wall = _ray_walls(origin, dirs, world.walls)
    if world.landmarks:
        centers = np.array([[lm.x, lm.y] for lm in world.landmarks])
        radii = np.array([lm.radius for lm in world.landmarks])
        d_lm = _ray_circles(origin, dirs, centers, radii)
    else:
        d_lm = np.full((w, 0), np.inf)
    return angles, dirs, d_wall, d_lm


def visible_landmarks(world: World, pose: Pose) -> set[int]:
    """Indices of landmarks that are the first surface hit in some column."""
    _, _, d_wall, d_lm = _column_hits(world, pose)
    vis = (d_lm < d_wall[:, None]).any(axis=0)
    return set(np.nonzero(vis)[0].tolist())


def render(world: World, pose: Pose, frame_id: int = 0,
           anchor: Pose | None = None) -> tuple[Observation, np.ndarray, np.ndarray]:
    """Egocentric RGB plus ground-truth depth and 3D point map.

    Depth is the along-ray planar distance of the visible surface. Points
    are world coordinates, or episode coordinates when ``anchor`` is given
    (rotated/translated into the anchor pose's frame).
    """
    spec = world.spec
    h = w = spec.img
    vf = h / 2.0
    cam, wall_h = spec.cam_height, spec.wall_height
    angles, dirs, d_wall, d_lm = _column_hits(world, pose)

    vr = (np.arange(h) + 0.5 - h / 2.0)[:, None]  # signed row offset, [h, 1]
    with np.errstate(divide="ignore"):
        d_bg = np.where(vr > 0, cam * vf / np.maximum(vr, 1e-9),
                        (wall_h - cam) * vf / np.maximum(-vr, 1e-9))
    d_bg = np.broadcast_to(d_bg, (h, w)).copy()
    z = np.where(vr > 0, 0.0, wall_h)
    z = np.broadcast_to(z, (h, w)).copy()
    base = np.where(vr > 0, 1.0, 0.0)
    rgb = (FLOOR_RGB[None, None, :] * base[:, :, None]
           + CEIL_RGB[None, None, :] * (1.0 - base[:, :, None]))
    depth = d_bg

    wall_mask = d_wall[None, :] <= depth
    depth = np.where(wall_mask, d_wall[None, :], depth)
    z = np.where(wall_mask, cam - vr * d_wall[None, :] / vf, z)
    rgb = np.where(wall_mask[:, :, None], WALL_RGB[None, None, :], rgb)

    for li, lm in enumerate(world.landmarks):
        t = d_lm[:, li]
        hit = np.isfinite(t) & (t < d_wall)
        if not hit.any():
            continue
        v_top = -(spec.landmark_height - cam) * vf / t[None, :]
        v_bot = cam * vf / t[None, :]
        band = (vr >= v_top) & (vr <= v_bot) & hit[None, :]
        visible = band & (t[None, :] <= depth)
        if not visible.any():
            continue
        depth = np.where(visible, t[None, :], depth)
        z = np.where(visible, cam - vr * t[None, :] / vf, z)
        rgb = np.where(visible[:, :, None], COLOR_RGB[lm.color_id][None, None, :], rgb)

    shade = 1.0 / (1.0 + depth)
    rgb = rgb * shade[:, :, None]
    px = pose.x + depth * np.cos(angles)[None, :]
    py = pose.y + depth * np.sin(angles)[None, :]
    if anchor is not None:
        c, s = math.cos(anchor.heading), math.sin(anchor.heading)
        dx, dy = px - anchor.x, py - anchor.y
        px = c * dx + s * dy
        py = -s * dx + c * dy
    points = np.stack([px, py, z]).astype(np.float32)
    obs = Observation(np.clip(rgb, 0.0, 1.0).transpose(2, 0, 1).astype(np.float32), frame_id)
    return obs, depth.astype(np.float32), points


# ----------------------------------------------------------------- expert


def _astar(world: World, start_cell, goal_cell, weight: float = 1.05):
    """8-connected A* with a (slightly inflated) Euclidean heuristic."""
    free = world.free
    n = free.shape[0]
    cell = world.spec.cell
    sq2 = math.sqrt(2.0)
    start = start_cell[0] * n + start_cell[1]
    goal = goal_cell[0] * n + goal_cell[1]
    gi, gj = goal_cell
    gscore = np.full(n * n, np.inf)
    parent = np.full(n * n, -1, dtype=np.int64)
    gscore[start] = 0.0
    open_heap = [(weight * math.hypot(start_cell[0] - gi, start_cell[1] - gj) * cell, 0, start)]
    tie = 0
    offs = ((1, 0, cell), (-1, 0, cell), (0, 1, cell), (0, -1, cell),
            (1, 1, sq2 * cell), (1, -1, sq2 * cell), (-1, 1, sq2 * cell), (-1, -1, sq2 * cell))
    while open_heap:
        f, _, cur = heapq.heappop(open_heap)
        if cur == goal:
            path = []
            while cur != -1:
                path.append((cur // n, cur % n))
                cur = parent[cur]
            return path[::-1]
        gc = gscore[cur]
        ci, cj = cur // n, cur % n
        for di, dj, w in offs:
            ni, nj = ci + di, cj + dj
            if not (0 <= ni < n and 0 <= nj < n) or not free[ni, nj]:
                continue
            if di and dj and not (free[ci + di, cj] and free[ci, cj + dj]):
                continue
            nxt = ni * n + nj
            ng = gc + w
            if ng < gscore[nxt] - 1e-12:
                gscore[nxt] = ng
                parent[nxt] = cur
                tie += 1
                h = math.hypot(ni - gi, nj - gj) * cell
                heapq.heappush(open_heap, (ng + weight * h, tie, nxt))
    return None


def _clear_segment(world: World, p: np.ndarray, q: np.ndarray, margin: float = 0.03) -> bool:
    return _seg_walls_min_dist(p, q, world.walls) >= world.spec.agent_radius + margin


def _steer(world: World, start: Pose, path_pts: list[np.ndarray], goal: np.ndarray,
           max_actions: int) -> tuple[list[Action], list[Pose], bool]:
    """Carrot follower: re-aim each step at a path point roughly one meter
    ahead by arc length, preferring targets visible with wall clearance.
    A persistent escape rotation breaks wedges the control law cannot."""
    pts = np.asarray(path_pts)
    arc = np.concatenate([[0.0], np.cumsum(np.hypot(*np.diff(pts, axis=0).T))])
    pose = start
    actions: list[Action] = []
    poses = [start]
    near_i = 0
    escape: Action | None = None
    stop_dist = FORWARD_METERS / 2.0 + 1e-9
    for _ in range(max_actions):
        if math.hypot(goal[0] - pose.x, goal[1] - pose.y) <= stop_dist:
            actions.append(Action.Stop)
            poses.append(pose)
            return actions, poses, True
        xy = np.array([pose.x, pose.y])
        hi = min(near_i + 40, len(pts) - 1)
        near_i += int(np.argmin(np.hypot(pts[near_i:hi + 1, 0] - pose.x,
                                         pts[near_i:hi + 1, 1] - pose.y)))
        far_i = int(np.searchsorted(arc, arc[near_i] + 1.1))
        far_i = min(max(far_i, near_i + 1), len(pts) - 1)
        target = None
        for j in range(far_i, near_i, -1):
            d_j = math.hypot(pts[j][0] - pose.x, pts[j][1] - pose.y)
            if d_j >= 0.28 and _clear_segment(world, xy, pts[j], margin=0.06):
                target = pts[j]
                break
        if target is None:
            mid = int(np.searchsorted(arc, arc[near_i] + 0.5))
            target = pts[min(max(mid, near_i + 1), len(pts) - 1)]
        desired = math.atan2(target[1] - pose.y, target[0] - pose.x)
        err = wrap_pi(desired - pose.heading)
        if escape is not None:
            # rotate one way until a forward step both clears and makes progress
            fwd, collided = step(world, pose, Action.MoveForward)
            toward = (math.cos(pose.heading) * (target[0] - pose.x)
                      + math.sin(pose.heading) * (target[1] - pose.y))
            if not collided and toward > 0:
                a, new_pose, collided = Action.MoveForward, fwd, False
                escape = None
            else:
                a = escape
                new_pose, collided = step(world, pose, a)
        elif abs(err) > math.pi / 12.0 + 1e-9:
            a = Action.TurnLeft if err > 0 else Action.TurnRight
            new_pose, collided = step(world, pose, a)
        else:
            a = Action.MoveForward
            new_pose, collided = step(world, pose, a)
            if collided:
                escape = Action.TurnLeft if err >= 0 else Action.TurnRight
                a = escape
                new_pose, _ = step(world, pose, a)
        actions.append(a)
        pose = new_pose
        poses.append(pose)
    return actions, poses, False


def plan_route(world: World, start: Pose, goal, max_actions: int | None = None
               ) -> tuple[list[Action], list[Pose]]:
    """A* path + line-of-sight smoothing + greedy action conversion; ends
    with Stop at the goal."""
    goal = np.asarray(goal, dtype=float)
    sc = world.snap_free(start.x, start.y)
    gc = world.snap_free(goal[0], goal[1])
    if sc is None or gc is None:
        raise PlanningError("start or goal not in free space")
    cells = _astar(world, sc, gc)
    if cells is None:
        raise PlanningError("goal unreachable")
    pts = [np.array([start.x, start.y])] + [world.cell_center(i, j) for (i, j) in cells[1:]]
    pts[-1] = goal.copy()
    budget = max_actions or world.spec.max_steps * 3
    actions, poses, ok = _steer(world, start, pts, goal, budget)
    if not ok:
        raise PlanningError("controller exceeded the action budget")
    return actions, poses


def expert_plan(world: World, start: Pose, goal) -> list[Action]:
    return plan_route(world, start, goal)[0]


def expert_action(world: World, pose: Pose, goal, fieldgrid: np.ndarray) -> Action:
    """One expert action via geodesic-field descent with one-step lookahead."""
    if world.field_at(fieldgrid, pose.x, pose.y) <= FORWARD_METERS / 2.0 + 1e-9:
        return Action.Stop
    best_a, best_s = None, math.inf
    for a in (Action.MoveForward, Action.TurnLeft, Action.TurnRight):
        if a == Action.MoveForward:
            p1, collided = step(world, pose, a)
            s = math.inf if collided else world.field_at(fieldgrid, p1.x, p1.y)
        else:
            p1, _ = step(world, pose, a)
            p2, collided = step(world, p1, Action.MoveForward)
            probe = p1 if collided else p2
            s = world.field_at(fieldgrid, probe.x, probe.y) + 0.05
        if s < best_s - 1e-12:
            best_a, best_s = a, s
    return best_a if best_a is not None else Action.TurnLeft


# --------------------------------------------------------------- episodes


@dataclass
class Episode:
    world_seed: int
    start: Pose
    goal: tuple[float, float]
    landmark_chain: list[int]
    instruction: Instruction
    expert_actions: list[Action]
    l_shortest: float
    difficulty: str
    spec: WorldSpec = field(default_factory=WorldSpec, repr=False)


def path_length(poses: list[Pose]) -> float:
    return float(sum(math.hypot(b.x - a.x, b.y - a.y) for a, b in zip(poses, poses[1:])))


_EASY_TEMPLATES = ["walk to the {n} and stop", "go to the {n} then stop"]
_MEMORY_TEMPLATE = "go to the {b} then return to where you first saw the {a}"


def make_instruction(world: World, chain: list[int], difficulty: str,
                     rng: np.random.Generator) -> Instruction:
    if not chain:
        raise ValueError("landmark chain must be nonempty")
    if difficulty == "easy":
        text = _EASY_TEMPLATES[int(rng.integers(len(_EASY_TEMPLATES)))].format(
            n=world.landmarks[chain[0]].name)
    else:
        text = _MEMORY_TEMPLATE.format(a=world.landmarks[chain[0]].name,
                                       b=world.landmarks[chain[1]].name)
    return Instruction(text, tokenize(text))


def _gen_easy_episode(world_seed: int, spec: WorldSpec, rng: np.random.Generator,
                      max_len: int) -> Episode | None:
    try:
        world = generate_world(world_seed, spec)
    except GenerationError:
        return None
    for _try in range(12):
        start = sample_free_pose(world, rng, clearance=spec.agent_radius + 0.05)
        vis = sorted(visible_landmarks(world, start))
        good = [li for li in vis
                if 1.0 <= geodesic_distance(world, start.xy, world.landmarks[li].xy) < math.inf]
        if not good:
            continue
        li = int(good[int(rng.integers(len(good)))])
        goal = world.landmarks[li].xy
        try:
            actions, poses = plan_route(world, start, goal, max_actions=max_len + 20)
        except PlanningError:
            continue
        if len(actions) > max_len or len(actions) < 6:
            continue
        instr = make_instruction(world, [li], "easy", rng)
        return Episode(world_seed, start, (float(goal[0]), float(goal[1])), [li], instr,
                       actions, path_length(poses), "easy", spec)
    return None


def _quantize_heading(theta: float) -> float:
    return wrap_angle(round(theta / TURN_RADIANS) * TURN_RADIANS)


def _gen_memory_episode(world_seed: int, spec: WorldSpec, rng: np.random.Generator,
                        min_len: int, sink_frames: int = 8) -> Episode | None:
    """Route: start (landmark A beside the initial stretch) -> far landmark B
    -> back to the point where A was last visible. A must leave view within
    the first ``sink_frames`` steps and stay out of view for the final 48
    frames, so only long-horizon memory of the opening frames can solve it."""
    try:
        world = generate_world(world_seed, spec)
    except GenerationError:
        return None
    lms = world.landmarks
    for _try in range(12):
        probe = sample_free_pose(world, rng, clearance=spec.agent_radius + 0.05)
        far = [(li, geodesic_distance(world, probe.xy, lms[li].xy))
               for li in range(len(lms))]
        far = [(li, d) for li, d in far if math.isfinite(d) and d >= 4.5]
        if not far:
            continue
        far.sort(key=lambda t: -t[1])
        b_idx = far[0][0]
        b_goal = lms[b_idx].xy
        # align the start heading with the route so the expert leads with
        # forward motion past A rather than spinning in place
        sc = world.snap_free(probe.x, probe.y)
        gc = world.snap_free(b_goal[0], b_goal[1])
        if sc is None or gc is None:
            continue
        cells = _astar(world, sc, gc)
        if cells is None or len(cells) < 12:
            continue
        ahead = world.cell_center(*cells[min(10, len(cells) - 1)])
        heading = _quantize_heading(math.atan2(ahead[1] - probe.y, ahead[0] - probe.x))
        start = Pose(probe.x, probe.y, heading)
        early_pts = [world.cell_center(i, j) for (i, j) in cells[:44]]
        cand_a = []
        for li in range(len(lms)):
            if li == b_idx:
                continue
            d_start = math.hypot(lms[li].x - start.x, lms[li].y - start.y)
            if not (1.0 <= d_start <= 3.5):
                continue
            d_path = min(math.hypot(lms[li].x - p[0], lms[li].y - p[1]) for p in early_pts)
            if d_path <= 1.0:
                cand_a.append(li)
        cand_a = [li for li in cand_a if li in visible_landmarks(world, start)]
        if not cand_a:
            continue
        a_idx = int(cand_a[int(rng.integers(len(cand_a)))])
        try:
            out_actions, out_poses = plan_route(world, start, b_goal)
        except PlanningError:
            continue
        out_actions = out_actions[:-1]  # drop Stop; continue into the return leg
        out_poses = out_poses[:-1]
        a_vis = [a_idx in visible_landmarks(world, p) for p in out_poses]
        if not any(a_vis[: sink_frames + 1]):
            continue
        if any(a_vis[sink_frames + 1:]):
            continue
        k = max(i for i in range(min(sink_frames + 1, len(a_vis))) if a_vis[i])
        q = out_poses[k].xy
        if geodesic_distance(world, start.xy, q) < 1.0:
            continue
        try:
            back_actions, back_poses = plan_route(world, out_poses[-1], q)
        except PlanningError:
            continue
        actions = out_actions + back_actions
        poses = out_poses + back_poses[1:]
        if not (min_len <= len(actions) <= spec.max_steps - 5):
            continue
        tail = poses[-48:]
        if any(a_idx in visible_landmarks(world, p) for p in tail):
            continue
        instr = make_instruction(world, [a_idx, b_idx], "memory", rng)
        return Episode(world_seed, start, (float(q[0]), float(q[1])), [a_idx, b_idx], instr,
                       actions, path_length(poses), "memory", spec)
    return None


def generate_suite(difficulty: str, count: int, seed: int, spec: WorldSpec,
                   max_len: int = 40, min_len: int = 80) -> list[Episode]:
    episodes: list[Episode] = []
    ws = seed * 1_000_003
    while len(episodes) < count:
        ws += 1
        rng = np.random.default_rng([seed, ws])
        if difficulty == "easy":
            ep = _gen_easy_episode(ws, spec, rng, max_len)
        else:
            ep = _gen_memory_episode(ws, spec, rng, min_len)
        if ep is not None:
            episodes.append(ep)
    return episodes


# -------------------------------------------------------------- datasets


def episode_to_json(ep: Episode) -> str:
    rec = {
        "world_seed": ep.world_seed,
        "start": {"x": ep.start.x, "y": ep.start.y, "theta": ep.start.heading},
        "goal": {"x": ep.goal[0], "y": ep.goal[1]},
        "instruction_text": ep.instruction.text,
        "token_ids": ep.instruction.token_ids,
        "expert_actions": "".join(ACTION_LETTERS[a] for a in ep.expert_actions),
        "l_shortest": round(ep.l_shortest, 6),
        "difficulty": ep.difficulty,
        "landmark_chain": ep.landmark_chain,
        "spec": {"bounds": ep.spec.bounds, "rooms_min": ep.spec.rooms_min,
                 "rooms_max": ep.spec.rooms_max, "landmarks_min": ep.spec.landmarks_min,
                 "landmarks_max": ep.spec.landmarks_max, "img": ep.spec.img,
                 "max_steps": ep.spec.max_steps},
    }
    return json.dumps(rec, sort_keys=True, separators=(",", ":"))


def episode_from_json(line: str) -> Episode:
    rec = json.loads(line)
    spec = WorldSpec(bounds=rec["spec"]["bounds"], rooms_min=rec["spec"]["rooms_min"],
                     rooms_max=rec["spec"]["rooms_max"],
                     landmarks_min=rec["spec"]["landmarks_min"],
                     landmarks_max=rec["spec"]["landmarks_max"], img=rec["spec"]["img"],
                     max_steps=rec["spec"]["max_steps"])
    return Episode(
        world_seed=rec["world_seed"],
        start=Pose(rec["start"]["x"], rec["start"]["y"], rec["start"]["theta"]),
        goal=(rec["goal"]["x"], rec["goal"]["y"]),
        landmark_chain=list(rec["landmark_chain"]),
        instruction=Instruction(rec["instruction_text"], list(rec["token_ids"])),
        expert_actions=[LETTER_ACTIONS[ch] for ch in rec["expert_actions"]],
        l_shortest=rec["l_shortest"],
        difficulty=rec["difficulty"],
        spec=spec,
    )


def save_dataset(path, episodes: list[Episode]):
    with open(path, "w") as fh:
        for ep in episodes:
            fh.write(episode_to_json(ep) + "\n")


def load_dataset(path) -> list[Episode]:
    with open(path) as fh:
        return [episode_from_json(line) for line in fh if line.strip()]


_WORLD_CACHE: dict[tuple, World] = {}


def get_world(seed: int, spec: WorldSpec) -> World:
    key = (seed, spec.key())
    if key not in _WORLD_CACHE:
        if len(_WORLD_CACHE) > 256:
            _WORLD_CACHE.clear()
        _WORLD_CACHE[key] = generate_world(seed, spec)
    return _WORLD_CACHE[key]
