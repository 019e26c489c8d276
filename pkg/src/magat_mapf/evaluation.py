"""Closed-loop rollouts, success / flowtime metrics and generalisation sweeps."""
from __future__ import annotations

import json
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch

from .comm_graph import build_adjacency
from .gridworld import DEFAULT_FOV, Action, GridWorldCase, Observer, WorldState, step
from .model import PolicyNet, decide

DEFAULT_R_COMM = 7.0
HIST_BINS = np.linspace(0.0, 1.0, 51)  # 2% bins of the fraction of robots at goal


@dataclass
class RolloutRecord:
    case_id: str
    paths: list[list[tuple[int, int]]]
    arrived: list[bool]
    steps: int
    t_max: int
    lengths: list[int]  # final arrival time, or t_max for robots not at goal
    shield_events: list[tuple[int, int, str]] = field(default_factory=list)
    collided: bool = False
    attention: list | None = None

    @property
    def success(self) -> bool:
        return all(self.arrived) and not self.collided

    @property
    def flowtime(self) -> int:
        return sum(self.lengths)

    @property
    def robots_at_goal(self) -> float:
        return sum(self.arrived) / len(self.arrived)


@dataclass
class MetricsReport:
    n_cases: int
    success_rate: float
    mean_flowtime_increase: float
    robot_success: float
    histogram: list[float]
    records: list[RolloutRecord] = field(default_factory=list, repr=False)

    def summary(self) -> dict:
        return {
            "n_cases": self.n_cases,
            "alpha": self.success_rate,
            "mean_delta_ft": self.mean_flowtime_increase,
            "p_rg": self.robot_success,
        }


def t_max_for(case: GridWorldCase) -> int:
    if case.expert_paths is None:
        raise ValueError(f"case {case.case_id!r} has no expert paths; cannot set T_max")
    return 3 * case.expert_makespan


class ModelPolicy:
    """Adapter from a :class:`PolicyNet` to the rollout policy interface."""

    def __init__(self, model: PolicyNet, mode: str = "sample"):
        self.model = model
        self.mode = mode

    def __call__(self, Z, S, state, rngs, record=None):
        actions, _ = decide(self.model, Z, S, self.mode, rngs, record)
        return actions


class ExpertReplay:
    """Replays a case's expert paths, idling once a path is exhausted."""

    def __init__(self, case: GridWorldCase):
        self.paths = case.expert_paths

    def __call__(self, Z, S, state, rngs, record=None):
        t = state.time
        return [p[t] if t < len(p) else Action.IDLE for p in self.paths]


def idle_policy(Z, S, state, rngs, record=None):
    return [Action.IDLE] * len(state.positions)


def robot_rngs(seed: int, n: int) -> list[np.random.Generator]:
    return [np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(n)]


def rollout(
    case: GridWorldCase,
    policy: PolicyNet | Callable,
    mode: str = "sample",
    seed: int = 0,
    fov: int = DEFAULT_FOV,
    r_comm: float = DEFAULT_R_COMM,
    rngs: Sequence[np.random.Generator] | None = None,
    strict: bool = False,
    record_attention: bool = False,
) -> RolloutRecord:
    """Run the decentralised policy until every robot is on its goal or ``T_max`` steps pass.

    Each step: observe all robots, rebuild the communication graph, decide, and
    take a shielded step. With ``strict`` any shielded move ends the case as failed.
    ``rngs`` gives one generator per robot; by default they are spawned from ``seed``.
    """
    t_max = t_max_for(case)
    if isinstance(policy, PolicyNet):
        policy = ModelPolicy(policy, mode)
    n = case.n_robots
    rngs = list(rngs) if rngs is not None else robot_rngs(seed, n)
    observer = Observer(case.map, fov)
    state = WorldState.initial(case)
    paths = [[s] for s in case.starts]
    events: list[tuple[int, int, str]] = []
    attention = [] if record_attention else None
    collided = False
    while state.time < t_max and not all(state.arrived):
        Z = observer.observe_all(state.positions, state.goals)
        S = build_adjacency(state.positions, r_comm)
        rec = [] if record_attention else None
        actions = policy(Z, S, state, rngs, rec)
        if record_attention:
            attention.append(rec)
        state, report = step(state, case.map, actions)
        events.extend((state.time, i, why) for i, why in sorted(report.shielded.items()))
        for i, p in enumerate(state.positions):
            paths[i].append(p)
        if strict and report:
            collided = True
            break
    arrived = state.arrived
    lengths = []
    for i in range(n):
        if arrived[i]:
            k = len(paths[i]) - 1
            while k > 0 and paths[i][k - 1] == case.goals[i]:
                k -= 1
            lengths.append(k)
        else:
            lengths.append(t_max)
    return RolloutRecord(case.case_id, paths, arrived, state.time, t_max, lengths, events, collided, attention)


def flowtime_increase(record: RolloutRecord, expert_flowtime: int) -> float:
    if expert_flowtime <= 0:
        raise ValueError("expert flowtime must be positive")
    return (record.flowtime - expert_flowtime) / expert_flowtime


def case_seed(seed: int, index: int) -> int:
    return int(np.random.SeedSequence([seed, index]).generate_state(1)[0])


def _rollout_job(args):
    case, model, mode, seed, fov, r_comm, strict = args
    torch.set_num_threads(1)
    return rollout(case, model, mode, seed, fov, r_comm, strict=strict)


def evaluate_set(
    model: PolicyNet | Callable,
    cases: Sequence[GridWorldCase],
    n_workers: int = 1,
    mode: str = "sample",
    seed: int = 0,
    fov: int = DEFAULT_FOV,
    r_comm: float = DEFAULT_R_COMM,
    strict: bool = False,
) -> MetricsReport:
    """Roll out every case (fixed per-case seed) and aggregate alpha, mean delta_FT and p_rg."""
    jobs = [(c, model, mode, case_seed(seed, i), fov, r_comm, strict) for i, c in enumerate(cases)]
    if n_workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(n_workers) as pool:
            records = list(pool.map(_rollout_job, jobs, chunksize=max(1, len(jobs) // (4 * n_workers))))
    else:
        records = [_rollout_job(j) for j in jobs]
    return summarize(records, [c.expert_flowtime for c in cases])


def summarize(records: Sequence[RolloutRecord], expert_flowtimes: Sequence[int]) -> MetricsReport:
    n = len(records)
    if n == 0:
        return MetricsReport(0, 0.0, 0.0, 0.0, [0.0] * (len(HIST_BINS) - 1), [])
    alpha = sum(r.success for r in records) / n
    dft = float(np.mean([flowtime_increase(r, ft) for r, ft in zip(records, expert_flowtimes)]))
    frac = np.array([r.robots_at_goal for r in records])
    hist, _ = np.histogram(frac, bins=HIST_BINS)
    return MetricsReport(n, alpha, dft, float(frac.mean()), (hist / n).tolist(), list(records))


# ---------------------------------------------------------------- sweeps


@dataclass(frozen=True)
class SweepPoint:
    width: int
    height: int
    n_robots: int
    nominal_density: float
    n_cases: int
    obstacle_density: float = 0.1

    @property
    def robot_density(self) -> float:
        return self.n_robots / (self.width * self.height)

    @property
    def label(self) -> str:
        return f"{self.width}x{self.height}({self.n_robots})"


SWEEPS: dict[str, tuple[SweepPoint, ...]] = {
    "same-density": tuple(
        SweepPoint(s, s, n, 0.025, 1000)
        for s, n in ((20, 10), (28, 20), (35, 30), (40, 40), (45, 50), (50, 60), (65, 100))
    ),
    "increasing-density": tuple(
        SweepPoint(50, 50, n, d, 1000)
        for n, d in ((10, 0.004), (20, 0.008), (30, 0.012), (40, 0.016), (50, 0.02), (60, 0.024), (100, 0.04))
    ),
    "large-scale": (
        SweepPoint(200, 200, 500, 0.0125, 50),
        SweepPoint(200, 200, 1000, 0.025, 50),
        SweepPoint(100, 100, 500, 0.05, 50),
    ),
}


def sweep_points(name: str) -> tuple[SweepPoint, ...]:
    try:
        return SWEEPS[name]
    except KeyError:
        raise ValueError(f"unknown sweep {name!r}; choose from {sorted(SWEEPS)}") from None


def write_report(out_dir: str | Path, rows: Sequence[tuple[SweepPoint | None, MetricsReport]],
                 config: dict | None = None, tag: str = "report") -> None:
    """Summary JSONL (one line per sweep point), per-case details and a TSV for plotting."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / f"{tag}.jsonl", "w") as fh:
        for point, rep in rows:
            rec = {
                "map": point.label if point else None,
                "n_robots": point.n_robots if point else None,
                "rho_robot": point.robot_density if point else None,
                **rep.summary(),
                "histogram": rep.histogram,
                "config": config or {},
            }
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
    with open(out / f"{tag}_cases.jsonl", "w") as fh:
        for point, rep in rows:
            for r in rep.records:
                fh.write(json.dumps({
                    "map": point.label if point else None, "case_id": r.case_id, "success": r.success,
                    "steps": r.steps, "t_max": r.t_max, "lengths": r.lengths, "arrived": r.arrived,
                    "shield_events": len(r.shield_events),
                }) + "\n")
    with open(out / f"{tag}.tsv", "w") as fh:
        fh.write("map\tn_robots\trho_robot\talpha\tmean_delta_ft\tp_rg\n")
        for point, rep in rows:
            s = rep.summary()
            fh.write(f"{point.label if point else '-'}\t{point.n_robots if point else '-'}\t"
                     f"{point.robot_density if point else float('nan'):.6g}\t{s['alpha']:.6g}\t"
                     f"{s['mean_delta_ft']:.6g}\t{s['p_rg']:.6g}\n")
