"""Point-mass maze navigation with sparse goal reward.

The maze is a grid of square cells; the agent is a point with position and
velocity, driven by a bounded 2-D force at a fixed control rate. Layouts are
plain text: ``#`` wall, ``.`` free, ``S`` start, ``G`` goal. Lower-case
letters are free cells that also mark the checkpoints of a named route
(corridor); the default layouts use ``l``, ``m`` and ``r``.
"""
from __future__ import annotations

import functools
import math
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

ROUTE_NAMES = {"l": "left", "m": "middle", "r": "right"}

DESK_LAYOUT = """\
#######
#..G..#
#l#m#r#
#l#m#r#
#l#m#r#
#..S..#
#######"""

LARGE_LAYOUT = """\
#######
#..G..#
#l#m#r#
#l#m#r#
#l#m#r#
#l#m#r#
#l#m#r#
#l#m#r#
#l#m#r#
#l#m#r#
#..S..#
#######"""


@dataclass(frozen=True)
class MazeSpec:
    grid: tuple[str, ...]
    cell_size: float = 2.0
    goal_radius: float = 0.5
    dt: float = 0.1
    damping: float = 0.5
    max_force: float = 1.0
    max_episode_steps: int = 300
    reset_jitter: float = 0.05   # as a fraction of cell_size

    def __post_init__(self):
        rows = tuple(self.grid)
        object.__setattr__(self, "grid", rows)
        if not rows or len({len(r) for r in rows}) != 1:
            raise ValueError("maze rows must be non-empty and of equal length")
        text = "".join(rows)
        if text.count("S") != 1 or text.count("G") != 1:
            raise ValueError("maze needs exactly one 'S' and one 'G'")
        bad = set(text) - set("#.SG") - set("abcdefghijklmnopqrstuvwxyz")
        if bad:
            raise ValueError(f"unknown maze characters {sorted(bad)}")
        if not self.goal_radius < self.cell_size:
            raise ValueError("goal_radius must be smaller than cell_size")
        if min(self.cell_size, self.dt, self.max_force) <= 0 or self.damping < 0:
            raise ValueError("physical constants must be positive")

    # -- geometry --
    @property
    def shape(self) -> tuple[int, int]:
        return len(self.grid), len(self.grid[0])

    @property
    def walls(self) -> np.ndarray:
        return _walls(self.grid)

    @property
    def wall_cells(self) -> set[tuple[int, int]]:
        return {tuple(c) for c in np.argwhere(self.walls)}

    def _find(self, ch) -> tuple[int, int]:
        for i, row in enumerate(self.grid):
            if ch in row:
                return i, row.index(ch)
        raise KeyError(ch)

    @property
    def start_cell(self) -> tuple[int, int]:
        return self._find("S")

    @property
    def goal_cell(self) -> tuple[int, int]:
        return self._find("G")

    def cell_center(self, cell) -> np.ndarray:
        r, c = cell
        n_rows = self.shape[0]
        return np.array([(c + 0.5) * self.cell_size, (n_rows - r - 0.5) * self.cell_size])

    @property
    def start_position(self) -> np.ndarray:
        return self.cell_center(self.start_cell)

    @property
    def goal_position(self) -> np.ndarray:
        return self.cell_center(self.goal_cell)

    def cell_of(self, position) -> tuple[int, int]:
        x, y = position
        n_rows = self.shape[0]
        return n_rows - 1 - int(math.floor(y / self.cell_size)), int(math.floor(x / self.cell_size))

    def in_wall(self, position) -> bool:
        r, c = self.cell_of(position)
        n_rows, n_cols = self.shape
        if not (0 <= r < n_rows and 0 <= c < n_cols):
            return True
        return bool(self.walls[r, c])

    @property
    def routes(self) -> dict[str, list[tuple[int, int]]]:
        """Route name -> its checkpoint cells, from lower-case markers."""
        out: dict[str, list] = {}
        for i, row in enumerate(self.grid):
            for j, ch in enumerate(row):
                if ch.islower():
                    out.setdefault(ROUTE_NAMES.get(ch, ch), []).append((i, j))
        return out

    @property
    def max_speed(self) -> float:
        """Terminal speed under full force along one axis."""
        return self.max_force / self.damping if self.damping > 0 else math.inf


@functools.lru_cache(maxsize=None)
def _walls(grid: tuple[str, ...]) -> np.ndarray:
    w = np.array([[ch == "#" for ch in row] for row in grid])
    w.setflags(write=False)
    return w


def maze_from_text(text: str, **kw) -> MazeSpec:
    rows = [line.rstrip("\n") for line in text.strip("\n").splitlines() if line.strip()]
    return MazeSpec(tuple(rows), **kw)


def load_maze(path, **kw) -> MazeSpec:
    return maze_from_text(Path(path).read_text(), **kw)


def desk_maze(**kw) -> MazeSpec:
    return maze_from_text(DESK_LAYOUT, **kw)


def large_maze(**kw) -> MazeSpec:
    kw.setdefault("cell_size", 3.0)
    kw.setdefault("goal_radius", 0.75)
    kw.setdefault("max_episode_steps", 1000)
    return maze_from_text(LARGE_LAYOUT, **kw)


# --- dynamics --------------------------------------------------------------

@dataclass
class MazeState:
    position: np.ndarray
    velocity: np.ndarray
    step_index: int = 0

    @property
    def observation(self) -> np.ndarray:
        return np.concatenate([self.position, self.velocity])


def maze_reset(spec: MazeSpec, rng: np.random.Generator | None = None,
               jitter: bool = True) -> MazeState:
    pos = spec.start_position.copy()
    if jitter and rng is not None and spec.reset_jitter > 0:
        j = spec.reset_jitter * spec.cell_size
        pos = pos + rng.uniform(-j, j, size=2)
    return MazeState(pos, np.zeros(2), 0)


def step_arrays(spec: MazeSpec, pos: np.ndarray, vel: np.ndarray, action: np.ndarray):
    """Vectorized physics on (n, 2) arrays; returns (pos, vel, at_goal).

    Semi-implicit Euler, then axis-separated collision: a move that would
    enter a wall cell is stopped at the wall face and that velocity
    component is zeroed.
    """
    cs = spec.cell_size
    walls = spec.walls
    n_rows, n_cols = walls.shape
    eps = 1e-9 * cs
    a = np.clip(action, -spec.max_force, spec.max_force)
    vel = (1.0 - spec.damping * spec.dt) * vel + a * spec.dt
    pos = pos.copy()
    vel = vel.copy()
    for axis in (0, 1):
        new = pos[:, axis] + vel[:, axis] * spec.dt
        trial = pos.copy()
        trial[:, axis] = new
        col = np.floor(trial[:, 0] / cs).astype(int)
        row = n_rows - 1 - np.floor(trial[:, 1] / cs).astype(int)
        outside = (col < 0) | (col >= n_cols) | (row < 0) | (row >= n_rows)
        blocked = outside.copy()
        inside = ~outside
        blocked[inside] = walls[row[inside], col[inside]]
        if np.any(blocked):
            cur = np.floor(pos[blocked, axis] / cs)
            face = np.where(vel[blocked, axis] > 0, (cur + 1) * cs - eps, cur * cs + eps)
            new[blocked] = face
            vel[blocked, axis] = 0.0
        pos[:, axis] = new
    at_goal = np.linalg.norm(pos - spec.goal_position, axis=1) <= spec.goal_radius
    return pos, vel, at_goal


def maze_step(spec: MazeSpec, state: MazeState, action) -> tuple[MazeState, float, bool]:
    pos, vel, at_goal = step_arrays(
        spec, state.position[None], state.velocity[None], np.asarray(action, dtype=float)[None]
    )
    k = state.step_index + 1
    goal = bool(at_goal[0])
    done = goal or k >= spec.max_episode_steps
    return MazeState(pos[0], vel[0], k), (1.0 if goal else 0.0), done


# --- grid search -----------------------------------------------------------

def grid_path(spec: MazeSpec, start=None, goal=None, blocked=()) -> list[tuple[int, int]] | None:
    """4-connected BFS over free cells; ``blocked`` cells are treated as walls."""
    start = spec.start_cell if start is None else tuple(start)
    goal = spec.goal_cell if goal is None else tuple(goal)
    walls = spec.walls
    n_rows, n_cols = walls.shape
    blocked = set(blocked)
    prev = {start: None}
    queue = deque([start])
    while queue:
        cell = queue.popleft()
        if cell == goal:
            path = []
            while cell is not None:
                path.append(cell)
                cell = prev[cell]
            return path[::-1]
        r, c = cell
        for nb in ((r - 1, c), (r + 1, c), (r, c - 1), (r, c + 1)):
            if (0 <= nb[0] < n_rows and 0 <= nb[1] < n_cols and not walls[nb]
                    and nb not in blocked and nb not in prev):
                prev[nb] = cell
                queue.append(nb)
    return None


def route_path(spec: MazeSpec, name: str) -> list[tuple[int, int]]:
    """Shortest cell path through route ``name`` avoiding every other route."""
    routes = spec.routes
    if name not in routes:
        raise KeyError(f"maze has no route {name!r}; routes: {sorted(routes)}")
    others = [c for k, cells in routes.items() if k != name for c in cells]
    path = grid_path(spec, blocked=others)
    if path is None or not set(routes[name]) <= set(path):
        raise ValueError(f"route {name!r} is not traversable on its own")
    return path


def distinct_corridors(spec: MazeSpec) -> list[str]:
    """Routes that connect start to goal while every other route is blocked."""
    ok = []
    for name in spec.routes:
        try:
            route_path(spec, name)
        except ValueError:
            continue
        ok.append(name)
    return ok


def path_length(spec: MazeSpec, cells) -> float:
    pts = np.array([spec.cell_center(c) for c in cells])
    return float(np.sum(np.linalg.norm(np.diff(pts, axis=0), axis=1)))


def steps_to_cover(spec: MazeSpec, distance: float) -> int:
    """Steps for a point starting at rest under full force to travel ``distance``."""
    x = v = 0.0
    k = 0
    while x < distance:
        v = (1.0 - spec.damping * spec.dt) * v + spec.max_force * spec.dt
        x += v * spec.dt
        k += 1
        if k > 10**7:
            raise ValueError("distance unreachable under these dynamics")
    return k


def shortest_path_steps(spec: MazeSpec) -> int:
    """Lower bound on episode length: full-force travel along the grid shortest path."""
    path = grid_path(spec)
    if path is None:
        raise ValueError("goal unreachable from start")
    return steps_to_cover(spec, max(path_length(spec, path) - spec.goal_radius, 0.0))


# --- scripted data collection ----------------------------------------------

@dataclass
class Trajectory:
    route: str
    observations: np.ndarray   # (T + 1, 4)
    actions: np.ndarray        # (T, 2)
    rewards: np.ndarray        # (T,)
    dones: np.ndarray          # (T,)

    def __len__(self) -> int:
        return len(self.actions)

    @property
    def success(self) -> bool:
        return bool(self.rewards.sum() == 1.0 and self.rewards[-1] == 1.0)

    def visited_cells(self, spec: MazeSpec) -> set:
        return {spec.cell_of(p) for p in self.observations[:, :2]}


@dataclass
class CollectorConfig:
    speed_cap: tuple[float, float] = (0.2, 0.6)     # fraction of max_speed
    gain: float = 2.0
    noise_std: float = 0.15                         # fraction of max_force
    waypoint_jitter: float = 0.25                   # fraction of cell_size
    detour_prob: float = 0.5
    detour_offset: float = 0.35                     # fraction of cell_size
    reach_radius: float = 0.35                      # fraction of cell_size
    min_length_factor: float = 1.25
    max_discard_rate: float = 0.5


class CollectionError(RuntimeError):
    pass


def _waypoints(spec: MazeSpec, cells, cfg: CollectorConfig, rng) -> list[np.ndarray]:
    cs = spec.cell_size
    # keep the corners of the cell path; straight runs collapse to their ends
    keep = [cells[0]]
    for prev, cur, nxt in zip(cells, cells[1:], cells[2:]):
        if (cur[0] - prev[0], cur[1] - prev[1]) != (nxt[0] - cur[0], nxt[1] - cur[1]):
            keep.append(cur)
    pts = []
    for cell in keep[1:]:
        pts.append(spec.cell_center(cell) + rng.uniform(-1, 1, 2) * cfg.waypoint_jitter * cs)
    # weave: intermediate waypoints pushed sideways inside corridor cells
    inner = [c for c in cells[1:-1] if c not in keep]
    woven = []
    if inner and rng.random() < cfg.detour_prob:
        picks = sorted(rng.choice(len(inner), size=min(len(inner), int(rng.integers(1, 3))),
                                  replace=False))
        woven = [inner[i] for i in picks]
    out = []
    for cell in cells[1:]:
        if cell in woven:
            out.append(spec.cell_center(cell) + rng.uniform(-1, 1, 2) * cfg.detour_offset * cs)
        if cell in keep[1:]:
            out.append(pts[keep[1:].index(cell)])
    out.append(spec.goal_position.copy())
    return out


def scripted_rollout(spec: MazeSpec, route: str, rng: np.random.Generator,
                     cfg: CollectorConfig | None = None) -> Trajectory:
    """One noisy waypoint-following rollout through ``route``."""
    cfg = cfg or CollectorConfig()
    cells = route_path(spec, route) if spec.routes else grid_path(spec)
    wps = _waypoints(spec, cells, cfg, rng)
    v_cap = rng.uniform(*cfg.speed_cap) * min(spec.max_speed, 1e9)
    state = maze_reset(spec, rng)
    obs, acts, rews, dones = [state.observation], [], [], []
    k = 0
    reach = cfg.reach_radius * spec.cell_size
    done = False
    while not done:
        while k < len(wps) - 1 and np.linalg.norm(wps[k] - state.position) < reach:
            k += 1
        delta = wps[k] - state.position
        dist = np.linalg.norm(delta)
        v_des = v_cap * delta / max(dist, 1e-9)
        a = cfg.gain * (v_des - state.velocity) + rng.normal(0.0, cfg.noise_std * spec.max_force, 2)
        a = np.clip(a, -spec.max_force, spec.max_force)
        state, r, done = maze_step(spec, state, a)
        obs.append(state.observation)
        acts.append(a)
        rews.append(r)
        dones.append(r > 0)
    return Trajectory(route, np.array(obs), np.array(acts), np.array(rews), np.array(dones))


def collect_scripted_dataset(spec: MazeSpec, route_mix: dict[str, float], trajectory_count: int,
                             rng: np.random.Generator,
                             cfg: CollectorConfig | None = None) -> list[Trajectory]:
    """Successful, never-near-optimal trajectories with routes drawn from ``route_mix``.

    Rollouts that miss the goal or come in under ``min_length_factor`` times
    the shortest-path step count are discarded and redrawn.
    """
    cfg = cfg or CollectorConfig()
    names = list(route_mix)
    probs = np.array([route_mix[n] for n in names], dtype=float)
    if np.any(probs < 0) or abs(probs.sum() - 1.0) > 1e-9:
        raise ValueError("route probabilities must be non-negative and sum to 1")
    floor = math.ceil(cfg.min_length_factor * shortest_path_steps(spec))
    out: list[Trajectory] = []
    attempts = discarded = 0
    while len(out) < trajectory_count:
        route = names[int(rng.choice(len(names), p=probs))]
        traj = scripted_rollout(spec, route, rng, cfg)
        attempts += 1
        if traj.success and len(traj) >= floor:
            out.append(traj)
            continue
        discarded += 1
        if attempts >= 20 and discarded / attempts > cfg.max_discard_rate:
            raise CollectionError(
                f"{discarded}/{attempts} rollouts discarded; controller does not fit this maze"
            )
    return out


DEFAULT_ROUTE_MIX = {"left": 0.33, "middle": 0.22, "right": 0.45}
