"""Expert planner: bounded-suboptimal ECBS and a brute-force joint-state oracle.

Cost model is flowtime: a robot accrues one unit per step until it reaches its
goal for the last time, then rests there and keeps occupying the cell.
"""
from __future__ import annotations

import heapq
import itertools
import time
from collections import deque
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Sequence

from .gridworld import Action, Cell, GridMap, GridWorldCase

TIE_BREAKS = ("fifo",)


class PlannerFailure(Exception):
    reason = "Failure"


class Unsolvable(PlannerFailure):
    reason = "Unsolvable"


class PlannerTimeout(PlannerFailure):
    reason = "Timeout"


@dataclass(frozen=True)
class PlannerConfig:
    w: float = 1.1
    time_budget: float = 60.0
    tie_break: str = "fifo"
    max_expansions: int | None = None  # deterministic budget on low-level expansions

    def __post_init__(self):
        if self.w < 1:
            raise ValueError("suboptimality bound w must be >= 1")
        if self.tie_break not in TIE_BREAKS:
            raise ValueError(f"unknown tie_break {self.tie_break!r}; choose from {TIE_BREAKS}")


@dataclass
class Solution:
    paths: tuple[tuple[Action, ...], ...]
    flowtime: int
    makespan: int
    expansions: dict[str, int] = field(default_factory=dict)


@dataclass(frozen=True)
class Constraint:
    """Forbid ``robot`` from being at ``cell`` at ``time``, or from traversing
    ``edge`` (from, to) arriving at ``time``."""

    robot: int
    time: int
    cell: Cell | None = None
    edge: tuple[Cell, Cell] | None = None


def bfs_distances(grid: GridMap, goal: Cell) -> dict[Cell, int]:
    dist = {goal: 0}
    queue = deque([goal])
    while queue:
        c = queue.popleft()
        for n in grid.neighbors(c):
            if n not in dist:
                dist[n] = dist[c] + 1
                queue.append(n)
    return dist


def positions_from_actions(start: Cell, actions: Sequence[Action]) -> list[Cell]:
    out = [start]
    for a in actions:
        dx, dy = Action(a).delta
        out.append((out[-1][0] + dx, out[-1][1] + dy))
    return out


def actions_from_positions(cells: Sequence[Cell]) -> tuple[Action, ...]:
    return tuple(Action.between(a, b) for a, b in zip(cells, cells[1:]))


def _at(path: Sequence[Cell], t: int) -> Cell:
    return path[t] if t < len(path) else path[-1]


def find_conflicts(paths: Sequence[Sequence[Cell]], first_only: bool = False) -> list[tuple]:
    """Vertex and edge conflicts between position sequences (robots rest at their last cell).

    Entries are ``("vertex", i, j, t, cell)`` or ``("edge", i, j, t, a, b)`` where the
    edge conflict has robot ``i`` moving ``a -> b`` and ``j`` moving ``b -> a``
    between ``t-1`` and ``t``. Ordered by time, then vertex before edge, then pair.
    """
    horizon = max((len(p) for p in paths), default=1)
    out = []
    n = len(paths)
    for t in range(horizon):
        occ: dict[Cell, list[int]] = {}
        for i in range(n):
            occ.setdefault(_at(paths[i], t), []).append(i)
        for cell, who in sorted(occ.items(), key=lambda kv: kv[1]):
            for i, j in itertools.combinations(who, 2):
                out.append(("vertex", i, j, t, cell))
                if first_only:
                    return out
        if t == 0:
            continue
        prev = {_at(paths[i], t - 1): i for i in range(n)}
        for i in range(n):
            a, b = _at(paths[i], t - 1), _at(paths[i], t)
            if a == b:
                continue
            j = prev.get(b)
            if j is not None and j > i and _at(paths[j], t) == a:
                out.append(("edge", i, j, t, a, b))
                if first_only:
                    return out
    return out


class _ConflictTable:
    """Occupancy of the other robots' current paths, for the focal heuristic."""

    def __init__(self, paths: Sequence[Sequence[Cell] | None], skip: int):
        self.vertex: dict[tuple[Cell, int], int] = {}
        self.edge: dict[tuple[Cell, Cell, int], int] = {}
        self.rest: dict[Cell, list[int]] = {}
        for j, p in enumerate(paths):
            if j == skip or p is None:
                continue
            for t, c in enumerate(p[:-1]):
                self.vertex[(c, t)] = self.vertex.get((c, t), 0) + 1
                nxt = p[t + 1]
                if nxt != c:
                    self.edge[(c, nxt, t + 1)] = self.edge.get((c, nxt, t + 1), 0) + 1
            self.rest.setdefault(p[-1], []).append(len(p) - 1)

    def cost(self, cur: Cell, nxt: Cell, t_next: int) -> int:
        k = self.vertex.get((nxt, t_next), 0)
        rest = self.rest.get(nxt)
        if rest:
            k += sum(1 for since in rest if since <= t_next)
        if cur != nxt:
            k += self.edge.get((nxt, cur, t_next), 0)
        return k


class _Budget:
    def __init__(self, cfg: PlannerConfig):
        self.deadline = time.perf_counter() + cfg.time_budget
        self.max_expansions = cfg.max_expansions
        self.low = 0
        self.high = 0

    def tick(self):
        self.low += 1
        if self.max_expansions is not None and self.low > self.max_expansions:
            raise PlannerTimeout(f"exceeded {self.max_expansions} low-level expansions")
        if (self.low & 255) == 0 and time.perf_counter() > self.deadline:
            raise PlannerTimeout("time budget exhausted")


def _low_level(
    grid: GridMap,
    start: Cell,
    goal: Cell,
    dist: dict[Cell, int],
    vertex_cons: frozenset,
    edge_cons: frozenset,
    cat: _ConflictTable,
    w: Fraction,
    budget: _Budget,
    n_free: int,
) -> tuple[list[Cell], int] | None:
    """Focal A* in space-time. Returns (positions, f_min lower bound) or None."""
    if start not in dist:
        return None
    goal_last = max((t for (c, t) in vertex_cons if c == goal), default=-1)
    horizon = max([t for (_, t) in vertex_cons] + [t for (_, _, t) in edge_cons] + [0]) + n_free + 1

    def h(c: Cell, t: int) -> int:
        return max(dist[c], goal_last + 1 - t) if c == goal else dist[c]

    seq = itertools.count()
    best: dict[tuple[Cell, int], int] = {}  # state -> conflicts of its best open/closed version
    parent: dict[tuple[Cell, int], tuple[Cell, int] | None] = {}
    closed: set[tuple[Cell, int]] = set()
    buckets: dict[int, list[tuple[Cell, int]]] = {}
    open_count: dict[int, int] = {}
    f_heap: list[int] = []
    focal: list[tuple] = []

    s0 = (start, 0)
    f0 = h(start, 0)
    best[s0] = 0
    parent[s0] = None
    buckets[f0] = [s0]
    open_count[f0] = 1
    heapq.heappush(f_heap, f0)
    f_min = f0
    bound = int(w * f_min)
    heapq.heappush(focal, (0, f0, 0, next(seq), s0))

    while focal:
        conf, f, neg_t, _, state = heapq.heappop(focal)
        if state in closed or best[state] != conf:
            continue
        budget.tick()
        closed.add(state)
        open_count[f] -= 1
        cell, t = state
        if cell == goal and t > goal_last:
            path = []
            s = state
            while s is not None:
                path.append(s[0])
                s = parent[s]
            return path[::-1], f_min

        if t < horizon:
            for a in Action:
                dx, dy = a.delta
                nxt = (cell[0] + dx, cell[1] + dy)
                if nxt != cell and not grid.is_free(nxt):
                    continue
                if nxt not in dist:
                    continue
                ns = (nxt, t + 1)
                if ns in closed or ns in vertex_cons or (cell, nxt, t + 1) in edge_cons:
                    continue
                nconf = conf + cat.cost(cell, nxt, t + 1)
                old = best.get(ns)
                if old is not None and old <= nconf:
                    continue
                nf = t + 1 + h(nxt, t + 1)
                best[ns] = nconf
                parent[ns] = state
                if old is None:
                    buckets.setdefault(nf, []).append(ns)
                    if open_count.get(nf, 0) == 0:
                        heapq.heappush(f_heap, nf)
                    open_count[nf] = open_count.get(nf, 0) + 1
                if nf <= bound:
                    heapq.heappush(focal, (nconf, nf, -(t + 1), next(seq), ns))

        while f_heap and open_count.get(f_heap[0], 0) == 0:
            heapq.heappop(f_heap)
        if not f_heap:
            return None
        if f_heap[0] > f_min:
            f_min = f_heap[0]
            new_bound = int(w * f_min)
            for fv in range(bound + 1, new_bound + 1):
                for s in buckets.get(fv, ()):
                    if s not in closed:
                        heapq.heappush(focal, (best[s], fv, -s[1], next(seq), s))
            bound = new_bound
    return None


@dataclass(eq=False)
class _HLNode:
    constraints: tuple  # per robot: (vertex frozenset, edge frozenset)
    paths: list
    lbs: list
    cost: int
    lb: int
    n_conflicts: int
    id: int


def ecbs_solve(case: GridWorldCase, cfg: PlannerConfig | None = None) -> Solution:
    """Enhanced Conflict-Based Search with suboptimality bound ``cfg.w``.

    Both levels run focal searches keyed on conflict counts; the returned
    flowtime is at most ``w`` times the optimum.
    """
    cfg = cfg or PlannerConfig()
    w = Fraction(str(cfg.w))
    budget = _Budget(cfg)
    grid = case.map
    n = case.n_robots
    n_free = len(grid.free_cells())
    dists = [bfs_distances(grid, g) for g in case.goals]
    for i, s in enumerate(case.starts):
        if s not in dists[i]:
            raise Unsolvable(f"robot {i} cannot reach its goal")

    empty = (frozenset(), frozenset())
    paths: list = [None] * n
    lbs = [0] * n
    for i in range(n):
        res = _low_level(grid, case.starts[i], case.goals[i], dists[i], *empty,
                         _ConflictTable(paths, i), w, budget, n_free)
        if res is None:
            raise Unsolvable(f"no path for robot {i}")
        paths[i], lbs[i] = res

    ids = itertools.count()

    def make(constraints, paths, lbs) -> _HLNode:
        cost = sum(len(p) - 1 for p in paths)
        return _HLNode(constraints, paths, lbs, cost, sum(lbs), len(find_conflicts(paths)), next(ids))

    open_nodes = [make((empty,) * n, paths, lbs)]
    while open_nodes:
        if time.perf_counter() > budget.deadline:
            raise PlannerTimeout("time budget exhausted")
        lb = min(nd.lb for nd in open_nodes)
        limit = w * lb
        node = min((nd for nd in open_nodes if nd.cost <= limit),
                   key=lambda nd: (nd.n_conflicts, nd.cost, nd.id))
        open_nodes.remove(node)
        budget.high += 1
        conflict = find_conflicts(node.paths, first_only=True)
        if not conflict:
            acts = tuple(actions_from_positions(p) for p in node.paths)
            return Solution(acts, node.cost, max((len(p) - 1 for p in node.paths), default=0),
                            {"high_level": budget.high, "low_level": budget.low})
        c = conflict[0]
        if c[0] == "vertex":
            _, i, j, t, cell = c
            splits = [(i, (cell, t), None), (j, (cell, t), None)]
        else:
            _, i, j, t, a, b = c
            splits = [(i, None, (a, b, t)), (j, None, (b, a, t))]
        for robot, vcon, econ in splits:
            vset, eset = node.constraints[robot]
            if vcon is not None:
                vset = vset | {vcon}
            if econ is not None:
                eset = eset | {econ}
            res = _low_level(grid, case.starts[robot], case.goals[robot], dists[robot], vset, eset,
                             _ConflictTable(node.paths, robot), w, budget, n_free)
            if res is None:
                continue
            cons = list(node.constraints)
            cons[robot] = (vset, eset)
            new_paths = list(node.paths)
            new_lbs = list(node.lbs)
            new_paths[robot], new_lbs[robot] = res
            open_nodes.append(make(tuple(cons), new_paths, new_lbs))
    raise Unsolvable("constraint tree exhausted")


def expert_solver(cfg: PlannerConfig | None = None):
    """Adapter for :func:`gridworld.generate_case`: returns the plan's action lists."""
    def solve(case: GridWorldCase):
        return ecbs_solve(case, cfg).paths
    return solve


def joint_state_oracle(case: GridWorldCase, max_robots: int = 3) -> int | None:
    """Exact optimal flowtime by A* over joint states, or None if unsolvable.

    A joint state is (positions, finished mask). A robot standing on its goal may
    be marked finished at zero cost; finished robots never move again. Every
    joint step costs the number of unfinished robots.
    """
    n = case.n_robots
    if n > max_robots:
        raise ValueError(f"oracle limited to {max_robots} robots, got {n}")
    grid = case.map
    goals = case.goals
    dists = [bfs_distances(grid, g) for g in goals]
    if any(s not in d for s, d in zip(case.starts, dists)):
        return None
    moves = {c: [c, *grid.neighbors(c)] for c in grid.free_cells()}
    full = (1 << n) - 1

    def h(pos, mask):
        return sum(dists[i][pos[i]] for i in range(n) if not mask >> i & 1)

    start = (tuple(case.starts), 0)
    g_best = {start: 0}
    heap = [(h(*start), 0, start)]
    while heap:
        f, g, state = heapq.heappop(heap)
        if g_best.get(state, g) < g:
            continue
        pos, mask = state
        if mask == full:
            return g
        succ = []
        for i in range(n):
            if not mask >> i & 1 and pos[i] == goals[i]:
                succ.append(((pos, mask | 1 << i), 0))
        active = [i for i in range(n) if not mask >> i & 1]
        options = [moves[pos[i]] if i in active else [pos[i]] for i in range(n)]
        for nxt in itertools.product(*options):
            if nxt == pos or len(set(nxt)) < n:
                continue
            if any(nxt[i] == pos[j] and nxt[j] == pos[i]
                   for i, j in itertools.combinations(range(n), 2) if pos[i] != nxt[i]):
                continue
            succ.append(((nxt, mask), len(active)))
        for ns, c in succ:
            ng = g + c
            if ng < g_best.get(ns, 1 << 60):
                g_best[ns] = ng
                heapq.heappush(heap, (ng + h(*ns), ng, ns))
    return None


@dataclass
class ValidationReport:
    collision_free: bool
    all_arrive: bool
    flowtime: int
    makespan: int
    first_conflict: tuple | None = None

    def __iter__(self):
        yield from (self.collision_free, self.all_arrive, self.flowtime, self.makespan)


def validate_solution(case: GridWorldCase, paths: Sequence[Sequence[Action]]) -> ValidationReport:
    """Replay paths without shielding and report conflicts, arrival, FT and makespan.

    A robot's length is its final arrival time when it ends on its goal (trailing
    idles dropped), else the full length of its action sequence.
    """
    if len(paths) != case.n_robots:
        raise ValueError(f"expected {case.n_robots} paths, got {len(paths)}")
    grid = case.map
    cells = [positions_from_actions(s, p) for s, p in zip(case.starts, paths)]
    first = None
    for i, seq in enumerate(cells):
        for t, c in enumerate(seq):
            if not grid.is_free(c):
                first = ("illegal", i, t, c)
                break
        if first:
            break
    if first is None:
        found = find_conflicts(cells, first_only=True)
        first = found[0] if found else None
    arrive = [seq[-1] == g for seq, g in zip(cells, case.goals)]
    lengths = []
    for seq, ok in zip(cells, arrive):
        k = len(seq) - 1
        if ok:
            while k > 0 and seq[k - 1] == seq[-1]:
                k -= 1
        lengths.append(k)
    return ValidationReport(first is None, all(arrive), sum(lengths), max(lengths, default=0), first)
