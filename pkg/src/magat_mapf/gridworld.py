"""Grid world: maps, cases, shielded multi-robot stepping and local observations.

Cells are ``(x, y)`` integer tuples with ``0 <= x < width`` and ``0 <= y < height``.
Observation tensors are indexed ``[channel, x_local, y_local]``.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from enum import IntEnum
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

Cell = tuple[int, int]

CASE_SCHEMA = "magat-mapf/case/v1"
MANIFEST_SCHEMA = "magat-mapf/manifest/v1"

DEFAULT_FOV = 9


class Action(IntEnum):
    """Motion primitives. The integer value is the model's logit index."""

    UP = 0
    DOWN = 1
    LEFT = 2
    RIGHT = 3
    IDLE = 4

    @property
    def delta(self) -> Cell:
        return _DELTAS[self]

    @property
    def symbol(self) -> str:
        return _SYMBOLS[self]

    @classmethod
    def from_symbol(cls, sym: str) -> "Action":
        return _FROM_SYMBOL[sym]

    @classmethod
    def between(cls, a: Cell, b: Cell) -> "Action":
        """Action that moves from cell ``a`` to the adjacent (or same) cell ``b``."""
        return _FROM_DELTA[(b[0] - a[0], b[1] - a[1])]


_DELTAS = {
    Action.UP: (0, 1),
    Action.DOWN: (0, -1),
    Action.LEFT: (-1, 0),
    Action.RIGHT: (1, 0),
    Action.IDLE: (0, 0),
}
_SYMBOLS = {Action.UP: "U", Action.DOWN: "D", Action.LEFT: "L", Action.RIGHT: "R", Action.IDLE: "I"}
_FROM_SYMBOL = {v: k for k, v in _SYMBOLS.items()}
_FROM_DELTA = {v: k for k, v in _DELTAS.items()}

DELTA_ARRAY = np.array([_DELTAS[a] for a in Action], dtype=np.int64)


def encode_actions(actions: Iterable[Action | int]) -> str:
    return "".join(Action(a).symbol for a in actions)


def decode_actions(symbols: str) -> list[Action]:
    return [Action.from_symbol(s) for s in symbols]


@dataclass(frozen=True)
class GridMap:
    width: int
    height: int
    obstacles: frozenset[Cell] = frozenset()

    def __post_init__(self):
        for x, y in self.obstacles:
            if not (0 <= x < self.width and 0 <= y < self.height):
                raise ValueError(f"obstacle {(x, y)} outside {self.width}x{self.height} map")

    def in_bounds(self, cell: Cell) -> bool:
        return 0 <= cell[0] < self.width and 0 <= cell[1] < self.height

    def is_free(self, cell: Cell) -> bool:
        return self.in_bounds(cell) and cell not in self.obstacles

    def free_cells(self) -> list[Cell]:
        return [
            (x, y)
            for x in range(self.width)
            for y in range(self.height)
            if (x, y) not in self.obstacles
        ]

    def neighbors(self, cell: Cell) -> list[Cell]:
        """Free cells reachable in one move, excluding staying put."""
        x, y = cell
        out = []
        for a in (Action.UP, Action.DOWN, Action.LEFT, Action.RIGHT):
            dx, dy = _DELTAS[a]
            nxt = (x + dx, y + dy)
            if self.is_free(nxt):
                out.append(nxt)
        return out

    def obstacle_array(self) -> np.ndarray:
        grid = np.zeros((self.width, self.height), dtype=np.uint8)
        for x, y in self.obstacles:
            grid[x, y] = 1
        return grid


@dataclass(frozen=True)
class GridWorldCase:
    map: GridMap
    starts: tuple[Cell, ...]
    goals: tuple[Cell, ...]
    expert_paths: tuple[tuple[Action, ...], ...] | None = None
    case_id: str = ""
    rng_seed: int = 0

    def __post_init__(self):
        if len(self.starts) != len(self.goals):
            raise ValueError("starts and goals differ in length")
        if len(set(self.starts)) != len(self.starts):
            raise ValueError("duplicate start cells")
        if len(set(self.goals)) != len(self.goals):
            raise ValueError("duplicate goal cells")
        for c in (*self.starts, *self.goals):
            if not self.map.is_free(c):
                raise ValueError(f"start/goal {c} is not a free cell")
        if self.expert_paths is not None and len(self.expert_paths) != len(self.starts):
            raise ValueError("expert_paths length differs from robot count")

    @property
    def n_robots(self) -> int:
        return len(self.starts)

    @property
    def expert_flowtime(self) -> int:
        if self.expert_paths is None:
            raise ValueError(f"case {self.case_id!r} has no expert paths")
        return sum(len(p) for p in self.expert_paths)

    @property
    def expert_makespan(self) -> int:
        if self.expert_paths is None:
            raise ValueError(f"case {self.case_id!r} has no expert paths")
        return max((len(p) for p in self.expert_paths), default=0)

    def with_paths(self, paths: Sequence[Sequence[Action]]) -> "GridWorldCase":
        return GridWorldCase(
            self.map, self.starts, self.goals,
            tuple(tuple(Action(a) for a in p) for p in paths),
            self.case_id, self.rng_seed,
        )

    def relabeled(self, order: Sequence[int]) -> "GridWorldCase":
        """Case whose robot ``i`` is this case's robot ``order[i]``."""
        paths = None if self.expert_paths is None else tuple(self.expert_paths[j] for j in order)
        return GridWorldCase(
            self.map,
            tuple(self.starts[j] for j in order),
            tuple(self.goals[j] for j in order),
            paths, self.case_id, self.rng_seed,
        )


@dataclass
class WorldState:
    positions: list[Cell]
    goals: list[Cell]
    time: int = 0

    @property
    def arrived(self) -> list[bool]:
        return [p == g for p, g in zip(self.positions, self.goals)]

    @classmethod
    def initial(cls, case: GridWorldCase) -> "WorldState":
        return cls(list(case.starts), list(case.goals), 0)


@dataclass
class ShieldReport:
    """Robots whose requested action was replaced by idle, with the reason."""

    shielded: dict[int, str] = field(default_factory=dict)

    def __bool__(self) -> bool:
        return bool(self.shielded)


class CaseRejected(Exception):
    def __init__(self, reason: str, detail: str = ""):
        super().__init__(f"{reason}: {detail}" if detail else reason)
        self.reason = reason


def _obstacle_count(width: int, height: int, density: float) -> int:
    # round() guards against products like 0.29*100 == 28.999999999999996
    return math.floor(round(density * width * height, 9))


def generate_map(width: int, height: int, obstacle_density: float, seed: int) -> GridMap:
    if width < 3 or height < 3:
        raise ValueError("map must be at least 3x3")
    if not 0 <= obstacle_density < 1:
        raise ValueError("obstacle density must lie in [0, 1)")
    rng = np.random.default_rng(seed)
    n = _obstacle_count(width, height, obstacle_density)
    flat = rng.choice(width * height, size=n, replace=False)
    return GridMap(width, height, frozenset((int(i) // height, int(i) % height) for i in flat))


def sample_endpoints(grid: GridMap, n_robots: int, rng: np.random.Generator) -> tuple[list[Cell], list[Cell]]:
    """Draw 2N pairwise-distinct free cells; the first N are starts, the rest goals."""
    free = grid.free_cells()
    if len(free) < 2 * n_robots:
        raise CaseRejected("TooDense", f"{len(free)} free cells for {n_robots} robots")
    idx = rng.choice(len(free), size=2 * n_robots, replace=False)
    cells = [free[int(i)] for i in idx]
    return cells[:n_robots], cells[n_robots:]


def generate_case(
    grid: GridMap,
    n_robots: int,
    seed: int,
    solver: Callable[[GridWorldCase], Sequence[Sequence[Action]]],
    case_id: str = "",
) -> GridWorldCase:
    """Sample a case and attach the solver's paths.

    ``solver`` raises ``expert.Unsolvable`` / ``expert.PlannerTimeout``; both are
    converted to :class:`CaseRejected`.
    """
    from .expert import PlannerFailure

    rng = np.random.default_rng(seed)
    starts, goals = sample_endpoints(grid, n_robots, rng)
    case = GridWorldCase(grid, tuple(starts), tuple(goals), None, case_id or f"case-{seed}", seed)
    try:
        paths = solver(case)
    except PlannerFailure as exc:
        raise CaseRejected(exc.reason, str(exc)) from exc
    return case.with_paths(paths)


def step(state: WorldState, grid: GridMap, joint_actions: Sequence[Action | int]) -> tuple[WorldState, ShieldReport]:
    """Advance one time step with collision shielding.

    Illegal moves become idle. Shielding is iterated to a fixpoint so the result
    does not depend on robot order: a robot idled in one pass can block movers
    into its cell in the next.
    """
    n = len(state.positions)
    if len(joint_actions) != n:
        raise ValueError(f"expected {n} actions, got {len(joint_actions)}")
    report = ShieldReport()
    cur = state.positions
    targets: list[Cell] = []
    for i, a in enumerate(joint_actions):
        dx, dy = _DELTAS[Action(a)]
        nxt = (cur[i][0] + dx, cur[i][1] + dy)
        if not grid.in_bounds(nxt):
            report.shielded[i] = "out_of_map"
            nxt = cur[i]
        elif nxt in grid.obstacles:
            report.shielded[i] = "obstacle"
            nxt = cur[i]
        targets.append(nxt)

    changed = True
    while changed:
        changed = False
        claims: dict[Cell, list[int]] = {}
        for i, t in enumerate(targets):
            claims.setdefault(t, []).append(i)
        for cell, who in claims.items():
            if len(who) > 1:
                for i in who:
                    if targets[i] != cur[i]:
                        targets[i] = cur[i]
                        report.shielded.setdefault(i, "vertex_conflict")
                        changed = True
        if changed:
            continue
        at = {c: i for i, c in enumerate(cur)}
        for i in range(n):
            j = at.get(targets[i])
            if j is not None and j != i and targets[j] == cur[i]:
                targets[i], targets[j] = cur[i], cur[j]
                report.shielded.setdefault(i, "edge_conflict")
                report.shielded.setdefault(j, "edge_conflict")
                changed = True
    return WorldState(targets, list(state.goals), state.time + 1), report


def find_illegal(state: WorldState, grid: GridMap, joint_actions: Sequence[Action | int]) -> bool:
    """True when executing the joint action unshielded would be illegal."""
    _, report = step(state, grid, joint_actions)
    return bool(report)


# ---------------------------------------------------------------- observation


def _round_half_away(num: int, den: int) -> int:
    """round(num/den) with halves away from zero, den > 0, exact integer arithmetic."""
    sign = -1 if num < 0 else 1
    return sign * ((2 * abs(num) + den) // (2 * den))


def goal_mark(delta: Cell, fov: int) -> Cell:
    """Goal-channel cell (local coordinates) for a goal at offset ``delta``.

    Inside the FOV the goal cell itself is marked. Otherwise the ray towards the
    goal is cut at the outer ring of the ``(fov+2)``-wide input and rounded to the
    nearest ring cell.
    """
    r = fov // 2
    c = r + 1
    dx, dy = delta
    m = max(abs(dx), abs(dy))
    if m <= r:
        return (c + dx, c + dy)
    ring = r + 1
    return (c + _round_half_away(dx * ring, m), c + _round_half_away(dy * ring, m))


class Observer:
    """Builds per-robot observations for one map; caches the padded obstacle grid."""

    def __init__(self, grid: GridMap, fov: int = DEFAULT_FOV):
        if fov % 2 != 1 or fov < 1:
            raise ValueError("fov must be a positive odd integer")
        self.grid = grid
        self.fov = fov
        self.r = fov // 2
        self.size = fov + 2
        pad = np.ones((grid.width + 2 * self.r, grid.height + 2 * self.r), dtype=np.uint8)
        pad[self.r:self.r + grid.width, self.r:self.r + grid.height] = grid.obstacle_array()
        self._padded = pad

    def observe_all(self, positions: Sequence[Cell], goals: Sequence[Cell]) -> np.ndarray:
        n = len(positions)
        r, s = self.r, self.size
        out = np.zeros((n, 3, s, s), dtype=np.uint8)
        pos = np.asarray(positions, dtype=np.int64).reshape(n, 2)
        for i in range(n):
            x, y = pos[i]
            out[i, 0, 1:-1, 1:-1] = self._padded[x:x + 2 * r + 1, y:y + 2 * r + 1]
        if n:
            rel = pos[None, :, :] - pos[:, None, :]
            vis = np.abs(rel).max(axis=2) <= r
            ii, jj = np.nonzero(vis)
            out[ii, 1, rel[ii, jj, 0] + r + 1, rel[ii, jj, 1] + r + 1] = 1
        for i in range(n):
            gx, gy = goal_mark((goals[i][0] - positions[i][0], goals[i][1] - positions[i][1]), self.fov)
            out[i, 2, gx, gy] = 1
        return out


def observe(state: WorldState, grid: GridMap, robot: int, fov: int = DEFAULT_FOV) -> np.ndarray:
    """Observation tensor ``(3, fov+2, fov+2)`` of one robot.

    Channels are obstacles, robots (self included) and goal. Obstacle and robot
    channels hold the FOV crop in the interior; out-of-map cells count as
    obstacles. The outer ring only ever carries the clipped goal mark.
    """
    obs = Observer(grid, fov).observe_all(state.positions, state.goals)
    return obs[robot]


# ---------------------------------------------------------------- persistence


def case_to_record(case: GridWorldCase) -> dict:
    return {
        "schema": CASE_SCHEMA,
        "case_id": case.case_id,
        "width": case.map.width,
        "height": case.map.height,
        "obstacles": sorted([list(c) for c in case.map.obstacles]),
        "starts": [list(c) for c in case.starts],
        "goals": [list(c) for c in case.goals],
        "expert_paths": None if case.expert_paths is None else [encode_actions(p) for p in case.expert_paths],
        "seed": case.rng_seed,
    }


def case_from_record(rec: dict) -> GridWorldCase:
    if rec.get("schema") != CASE_SCHEMA:
        raise ValueError(f"unsupported case schema {rec.get('schema')!r}")
    grid = GridMap(rec["width"], rec["height"], frozenset(tuple(c) for c in rec["obstacles"]))
    paths = rec.get("expert_paths")
    return GridWorldCase(
        grid,
        tuple(tuple(c) for c in rec["starts"]),
        tuple(tuple(c) for c in rec["goals"]),
        None if paths is None else tuple(tuple(decode_actions(p)) for p in paths),
        rec["case_id"],
        rec["seed"],
    )


def save_cases(path: str | Path, cases: Iterable[GridWorldCase]) -> None:
    with open(path, "w") as fh:
        for case in cases:
            fh.write(json.dumps(case_to_record(case), separators=(",", ":")) + "\n")


def load_cases(path: str | Path) -> list[GridWorldCase]:
    with open(path) as fh:
        return [case_from_record(json.loads(line)) for line in fh if line.strip()]


def split_ids(case_ids: Sequence[str], fractions: Sequence[float] = (0.70, 0.15, 0.15),
              names: Sequence[str] = ("train", "valid", "test"), seed: int = 0) -> dict[str, list[str]]:
    """Shuffle ids and cut them into disjoint named partitions."""
    if len(set(case_ids)) != len(case_ids):
        raise ValueError("case ids are not unique")
    if abs(sum(fractions) - 1.0) > 1e-9:
        raise ValueError("split fractions must sum to 1")
    order = list(case_ids)
    np.random.default_rng(seed).shuffle(order)
    counts = [math.floor(round(f * len(order), 9)) for f in fractions]
    counts[0] += len(order) - sum(counts)
    out, at = {}, 0
    for name, k in zip(names, counts):
        out[name] = order[at:at + k]
        at += k
    return out


def save_manifest(path: str | Path, splits: dict[str, list[str]], cases_file: str, config: dict | None = None) -> None:
    with open(path, "w") as fh:
        json.dump({"schema": MANIFEST_SCHEMA, "cases_file": cases_file, "splits": splits,
                   "config": config or {}}, fh, indent=1)


def load_manifest(path: str | Path) -> dict:
    with open(path) as fh:
        data = json.load(fh)
    if data.get("schema") != MANIFEST_SCHEMA:
        raise ValueError(f"unsupported manifest schema {data.get('schema')!r}")
    return data
