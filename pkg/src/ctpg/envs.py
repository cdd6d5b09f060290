"""Multi-task environment suites.

Two desk-scale families are provided:

GridSkills
    Discrete grid navigation.  A task is a sequence of waypoints; every
    waypoint except the last must be activated with ``interact``.  The state
    only exposes the *current* waypoint, so tasks whose waypoint sequences
    share a prefix see literally the same states while they traverse it.
PointMass
    Continuous 2-D point mass in ``[-1, 1]^2`` whose dynamics coefficient
    (gravity or mass) is scaled linearly from 0.5x to 1.5x across tasks.

Suites are immutable: ``reset`` and ``step`` are pure functions of their
arguments (plus the caller's generator for ``reset``).
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

UP, DOWN, LEFT, RIGHT, INTERACT = range(5)
_MOVES = {UP: (0, -1), DOWN: (0, 1), LEFT: (-1, 0), RIGHT: (1, 0)}

STEP_PENALTY = -0.01
SUCCESS_REWARD = 1.0
ACTION_COST = 0.01


@dataclass(frozen=True)
class StepResult:
    next_state: np.ndarray
    reward: float
    terminated: bool
    truncated: bool
    success: bool = False


class TaskSuite:
    """Base class: a family of MDPs sharing state and action spaces."""

    name: str
    n_tasks: int
    state_dim: int
    discrete: bool
    n_actions: int  # discrete suites only
    action_dim: int  # continuous suites only
    episode_length: int
    metric_kind: str
    tabular: bool = False

    def reset(self, task: int, rng: np.random.Generator) -> np.ndarray:
        raise NotImplementedError

    def step(self, task: int, state, action, t: int | None = None) -> StepResult:
        raise NotImplementedError

    def features(self, states: np.ndarray) -> np.ndarray:
        """Map raw states to learner inputs (float vectors or table indices)."""
        return np.asarray(states, dtype=np.float64)

    @property
    def feature_dim(self) -> int:
        return self.state_dim

    def hardest_task(self) -> int:
        return self.n_tasks - 1

    def _check_task(self, task: int) -> None:
        if not 0 <= int(task) < self.n_tasks:
            raise IndexError(f"task {task} out of range for {self.n_tasks} tasks")

    def _check_state(self, state) -> np.ndarray:
        state = np.asarray(state, dtype=np.float64)
        if state.shape != (self.state_dim,):
            raise ValueError(f"state must have shape ({self.state_dim},), got {state.shape}")
        return state


# ---------------------------------------------------------------------------
# GridSkills


@dataclass(frozen=True)
class _GridTask:
    waypoints: tuple[int, ...]  # region ids
    final_interact: bool


@dataclass
class GridSkills(TaskSuite):
    """Waypoint-sequence gridworld.

    State vector: ``(agent_x, agent_y, target_x, target_y, stage)`` with raw
    integer coordinates.  ``stage`` counts activated waypoints.  Each region
    holds ``region_size`` cells; at reset one slot ``k`` is drawn and every
    waypoint of the episode uses cell ``k`` of its region.
    """

    grid_size: int
    walls: frozenset
    start: tuple[int, int]
    regions: tuple[tuple[tuple[int, int], ...], ...]
    tasks: tuple[_GridTask, ...]
    episode_length: int = 100
    graph: str = "prefix-chain"
    name: str = "gridskills"
    discrete: bool = True
    n_actions: int = 5
    action_dim: int = 1
    state_dim: int = 5
    metric_kind: str = "success_rate"
    tabular: bool = True
    _combos: dict = field(init=False, repr=False)

    def __post_init__(self):
        self.n_tasks = len(self.tasks)
        self.region_size = len(self.regions[0])
        if any(len(r) != self.region_size for r in self.regions):
            raise ValueError("all regions must hold the same number of cells")
        combos = {}
        for task in self.tasks:
            for k in range(self.region_size):
                for stage in range(len(task.waypoints) + 1):
                    wp = task.waypoints[min(stage, len(task.waypoints) - 1)]
                    key = (*self.regions[wp][k], stage)
                    combos.setdefault(key, len(combos))
        self._combos = combos

    # -- encoding ---------------------------------------------------------
    @property
    def n_states(self) -> int:
        """Size of the tabular index space."""
        return self.grid_size * self.grid_size * len(self._combos)

    @property
    def feature_dim(self) -> int:
        return self.state_dim

    def features(self, states):
        s = np.asarray(states, dtype=np.float64)
        single = s.ndim == 1
        s = np.atleast_2d(s).astype(np.int64)
        combo = np.array([self._combos[(tx, ty, st)] for tx, ty, st in s[:, 2:5]], dtype=np.int64)
        idx = (s[:, 1] * self.grid_size + s[:, 0]) * len(self._combos) + combo
        return idx[0] if single else idx

    def _encode(self, agent, target, stage) -> np.ndarray:
        return np.array([agent[0], agent[1], target[0], target[1], stage], dtype=np.float64)

    def _slot(self, task: int, state: np.ndarray) -> int:
        wps = self.tasks[task].waypoints
        stage = int(state[4])
        region = self.regions[wps[min(stage, len(wps) - 1)]]
        return region.index((int(state[2]), int(state[3])))

    # -- dynamics ---------------------------------------------------------
    def reset(self, task, rng):
        self._check_task(task)
        k = int(rng.integers(self.region_size))
        target = self.regions[self.tasks[task].waypoints[0]][k]
        return self._encode(self.start, target, 0)

    def step(self, task, state, action, t=None):
        self._check_task(task)
        state = self._check_state(state)
        spec = self.tasks[task]
        ax, ay, tx, ty, stage = (int(v) for v in state)
        action = int(action)
        if not 0 <= action < self.n_actions:
            raise ValueError(f"action {action} outside discrete space of size {self.n_actions}")
        last = len(spec.waypoints) - 1
        reward, success = STEP_PENALTY, False
        if action == INTERACT:
            if (ax, ay) == (tx, ty) and stage <= last:
                if stage == last:
                    if spec.final_interact:
                        success = True
                        stage += 1
                else:
                    k = self._slot(task, state)
                    stage += 1
                    tx, ty = self.regions[spec.waypoints[stage]][k]
        else:
            dx, dy = _MOVES[action]
            nx, ny = ax + dx, ay + dy
            if 0 <= nx < self.grid_size and 0 <= ny < self.grid_size and (nx, ny) not in self.walls:
                ax, ay = nx, ny
            if stage == last and not spec.final_interact and (ax, ay) == (tx, ty):
                success = True
                stage += 1
        if success:
            reward = SUCCESS_REWARD
        truncated = t is not None and t + 1 >= self.episode_length and not success
        return StepResult(self._encode((ax, ay), (tx, ty), stage), reward, success, truncated, success)

    # -- analysis ---------------------------------------------------------
    def optimal_length(self, task: int, slot: int) -> int:
        """Breadth-first search for the shortest successful action sequence."""
        self._check_task(task)
        target = self.regions[self.tasks[task].waypoints[0]][slot]
        s0 = self._encode(self.start, target, 0)
        seen = {tuple(s0)}
        frontier = deque([(s0, 0)])
        while frontier:
            s, depth = frontier.popleft()
            for a in range(self.n_actions):
                res = self.step(task, s, a)
                if res.success:
                    return depth + 1
                key = tuple(res.next_state)
                if key not in seen:
                    seen.add(key)
                    frontier.append((res.next_state, depth + 1))
        return -1

    def hardest_task(self) -> int:
        lengths = [max(self.optimal_length(i, k) for k in range(self.region_size)) for i in range(self.n_tasks)]
        return int(np.argmax(lengths))


def _gridskills_layout(n_tasks: int, grid_size: int, graph: str):
    g = grid_size
    wall_x = g // 3
    start = (0, g // 2)

    def bands(n):
        if n == 1:
            return [g // 2]
        return [1 + round(p * (g - 3) / (n - 1)) for p in range(n)]

    def pair(x, y):
        dy = 1 if y < g // 2 else -1
        return ((x, y), (x, y + dy))

    regions, tasks, gaps = [], [], []
    if graph in ("prefix-chain", "independent", "identical"):
        if graph == "prefix-chain":
            n_groups = -(-n_tasks // 2)
        elif graph == "identical":
            n_groups = 1
        else:
            n_groups = n_tasks
        rows = bands(n_groups)
        if len(set(rows)) != len(rows) or (n_groups > 1 and min(np.diff(rows)) < 2):
            raise ValueError(f"grid_size {grid_size} too small for {n_tasks} tasks with graph {graph!r}")
        for p, y in enumerate(rows):
            gaps.append(y)
            regions.append(pair(wall_x + 2, y))
            regions.append(pair(g - 1, y))
        for i in range(n_tasks):
            if graph == "prefix-chain":
                p = i // 2
                if i % 2 == 0:
                    tasks.append(_GridTask((2 * p,), final_interact=True))
                else:
                    tasks.append(_GridTask((2 * p, 2 * p + 1), final_interact=False))
            elif graph == "identical":
                tasks.append(_GridTask((0,), final_interact=bool(i % 2)))
            else:
                tasks.append(_GridTask((2 * i + 1,), final_interact=False))
    elif graph == "chain":
        y = g // 2
        gaps.append(y)
        xs = [wall_x + 2 + 2 * k for k in range(n_tasks)]
        if xs[-1] > g - 1:
            raise ValueError(f"grid_size {grid_size} too small for a {n_tasks}-task chain")
        regions = [pair(x, y) for x in xs]
        tasks = [_GridTask(tuple(range(i + 1)), final_interact=False) for i in range(n_tasks)]
    else:
        raise ValueError(f"unknown skill graph {graph!r}")

    walls = frozenset((wall_x, y) for y in range(g) if y not in gaps)
    cells = [c for r in regions for c in r]
    if len(set(cells)) != len(cells) or any(c in walls for c in cells):
        raise ValueError(f"grid_size {grid_size} too small for {n_tasks} tasks with graph {graph!r}")
    return walls, start, tuple(regions), tuple(tasks)


def shared_prefix_count(tasks: Sequence[_GridTask]) -> int:
    """Number of tasks whose first waypoint also opens some earlier task."""
    firsts = [t.waypoints[0] for t in tasks]
    return sum(1 for i, f in enumerate(firsts) if f in firsts[:i])


def build_gridskills(n_tasks: int, grid_size: int = 9, skill_graph_spec: str = "prefix-chain",
                     episode_length: int = 100, require_chain: bool = False) -> GridSkills:
    """Build a GridSkills suite.

    ``skill_graph_spec`` is one of ``prefix-chain`` (tasks 2p and 2p+1 share
    the corridor prefix, the odd task continues to a far waypoint),
    ``chain`` (task i extends task i-1 by one waypoint), ``identical`` (same
    goal, odd tasks must finish with ``interact``) or ``independent``.
    """
    if n_tasks < 2:
        raise ValueError("n_tasks >= 2 required")
    if grid_size < 5:
        raise ValueError("grid_size >= 5 required")
    walls, start, regions, tasks = _gridskills_layout(n_tasks, grid_size, skill_graph_spec)
    if require_chain and shared_prefix_count(tasks) < n_tasks - 1:
        raise ValueError(
            f"skill graph {skill_graph_spec!r} has {shared_prefix_count(tasks)} shared prefixes, "
            f"chain sharing needs {n_tasks - 1}")
    suite = GridSkills(grid_size=grid_size, walls=walls, start=start, regions=regions, tasks=tasks,
                       episode_length=episode_length, graph=skill_graph_spec)
    for i in range(n_tasks):
        for k in range(suite.region_size):
            n = suite.optimal_length(i, k)
            if n < 0 or n > episode_length:
                raise ValueError(f"task {i} unsolvable within {episode_length} steps")
    return suite


# ---------------------------------------------------------------------------
# PointMass


@dataclass
class PointMass(TaskSuite):
    """Point mass with velocity damping, optional gravity, clipped arena.

    State: ``(px, py, vx, vy, gx, gy)``.  Reward is evaluated on the
    pre-transition position: ``-|p - g| - 0.01 |a|^2``.
    """

    coefficients: tuple[float, ...]
    variation: str = "gravity-scale"
    episode_length: int = 200
    dt: float = 0.1
    damping: float = 0.9
    gravity: float = 0.5
    name: str = "pointmass"
    discrete: bool = False
    n_actions: int = 0
    action_dim: int = 2
    state_dim: int = 6
    metric_kind: str = "episode_return"

    def __post_init__(self):
        self.n_tasks = len(self.coefficients)

    @property
    def max_distance(self) -> float:
        return 2.0 * np.sqrt(2.0)

    def annulus(self, task: int) -> tuple[float, float]:
        inner = 0.3 + 0.3 * task / max(self.n_tasks - 1, 1)
        return inner, inner + 0.2

    def reset(self, task, rng):
        self._check_task(task)
        lo, hi = self.annulus(task)
        r = rng.uniform(lo, hi)
        theta = rng.uniform(0.0, 2.0 * np.pi)
        return np.array([0.0, 0.0, 0.0, 0.0, r * np.cos(theta), r * np.sin(theta)])

    def step(self, task, state, action, t=None):
        self._check_task(task)
        state = self._check_state(state)
        a = np.clip(np.asarray(action, dtype=np.float64).reshape(self.action_dim), -1.0, 1.0)
        pos, vel, goal = state[0:2], state[2:4], state[4:6]
        reward = -float(np.linalg.norm(pos - goal)) - ACTION_COST * float(a @ a)
        coef = self.coefficients[task]
        if self.variation == "gravity-scale":
            accel = a - np.array([0.0, self.gravity * coef])
        else:
            accel = a / coef - np.array([0.0, self.gravity])
        vel = self.damping * vel + self.dt * accel
        pos = pos + self.dt * vel
        hit = np.abs(pos) > 1.0
        pos = np.clip(pos, -1.0, 1.0)
        vel = np.where(hit, 0.0, vel)
        truncated = t is not None and t + 1 >= self.episode_length
        return StepResult(np.concatenate([pos, vel, goal]), reward, False, truncated, False)


def build_pointmass(n_tasks: int, variation: str = "gravity-scale", episode_length: int = 200) -> PointMass:
    if n_tasks < 2:
        raise ValueError("n_tasks >= 2 required")
    if variation not in ("gravity-scale", "mass-scale"):
        raise ValueError(f"unknown variation {variation!r}")
    coefs = tuple(float(c) for c in np.linspace(0.5, 1.5, n_tasks))
    return PointMass(coefficients=coefs, variation=variation, episode_length=episode_length)


# functional aliases matching the suite-level operations
def reset(suite: TaskSuite, task: int, rng: np.random.Generator) -> np.ndarray:
    return suite.reset(task, rng)


def step(suite: TaskSuite, task: int, state, action, t: int | None = None) -> StepResult:
    return suite.step(task, state, action, t)
