"""Imitation learning on expert trajectories with online-expert dataset aggregation."""
from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Iterable, Iterator, Sequence

import numpy as np
import torch

from .autodiff import Adam, OptimizerState, cosine_lr, load_checkpoint, save_checkpoint
from .autodiff.ops import DTYPE, backward, cross_entropy
from .comm_graph import build_adjacency
from .evaluation import DEFAULT_R_COMM, case_seed, evaluate_set, rollout
from .expert import PlannerConfig, PlannerFailure, ecbs_solve, expert_solver, positions_from_actions
from .gridworld import (
    DEFAULT_FOV,
    Action,
    CaseRejected,
    GridWorldCase,
    Observer,
    case_from_record,
    case_to_record,
    generate_case,
    generate_map,
)
from .model import ModelConfig, PolicyNet

log = logging.getLogger(__name__)

CHECKPOINT_KIND = "magat-mapf/policy/v1"


@dataclass(frozen=True)
class TrainSchedule:
    batch_size: int = 64
    epochs: int = 100
    validate_every: int = 4
    n_valid: int = 100          # validation cases rolled out per round
    online_expert_every: int = 4
    n_online_expert: int = 50
    weight_decay: float = 1e-5
    lr_max: float = 1e-3
    lr_min: float = 1e-6
    lr_period: int | None = None  # defaults to ``epochs``
    replan_from: str = "start"    # "start" or "failure"
    seed: int = 0

    def __post_init__(self):
        if self.validate_every < 1 or self.online_expert_every < 1:
            raise ValueError("periods must be >= 1")
        if self.replan_from not in ("start", "failure"):
            raise ValueError("replan_from must be 'start' or 'failure'")

    def lr(self, epoch: int) -> float:
        """Learning rate for 1-based ``epoch``."""
        return cosine_lr(epoch - 1, self.lr_max, self.lr_min, self.lr_period or self.epochs)


PAPER_SCHEDULE = TrainSchedule(epochs=300, n_valid=1000, n_online_expert=500, lr_period=300)


class PairSet:
    """Training pairs grouped by robot count.

    Each pair is one time step of one case: observations of all robots, the
    adjacency, and the expert joint action.
    """

    def __init__(self):
        self._obs: dict[int, list[np.ndarray]] = {}
        self._adj: dict[int, list[np.ndarray]] = {}
        self._act: dict[int, list[np.ndarray]] = {}
        self.case_ids: list[str] = []
        self._packed: dict[int, tuple[np.ndarray, np.ndarray, np.ndarray]] | None = None

    def add(self, obs: np.ndarray, adj: np.ndarray, actions: np.ndarray, case_id: str) -> None:
        n = obs.shape[0]
        self._obs.setdefault(n, []).append(obs.astype(np.uint8))
        self._adj.setdefault(n, []).append(np.asarray(adj, dtype=np.float64))
        self._act.setdefault(n, []).append(np.asarray(actions, dtype=np.int64))
        self.case_ids.append(case_id)
        self._packed = None

    def extend(self, other: "PairSet") -> None:
        for n, group in other.packed().items():
            obs, adj, act = group
            self._obs.setdefault(n, []).extend(list(obs))
            self._adj.setdefault(n, []).extend(list(adj))
            self._act.setdefault(n, []).extend(list(act))
        self.case_ids.extend(other.case_ids)
        self._packed = None

    def __len__(self) -> int:
        return len(self.case_ids)

    def packed(self) -> dict[int, tuple[np.ndarray, np.ndarray, np.ndarray]]:
        if self._packed is None:
            self._packed = {
                n: (np.stack(self._obs[n]), np.stack(self._adj[n]), np.stack(self._act[n]))
                for n in sorted(self._obs)
            }
        return self._packed

    def batches(self, batch_size: int, rng: np.random.Generator | None = None
                ) -> Iterator[tuple[torch.Tensor, torch.Tensor, torch.Tensor]]:
        """Yield ``(Z, S, actions)`` mini-batches; shuffled when ``rng`` is given."""
        plan = []
        for n, (obs, _, _) in self.packed().items():
            idx = rng.permutation(len(obs)) if rng is not None else np.arange(len(obs))
            plan.extend((n, idx[i:i + batch_size]) for i in range(0, len(idx), batch_size))
        if rng is not None:
            plan = [plan[i] for i in rng.permutation(len(plan))]
        packed = self.packed()
        for n, sel in plan:
            obs, adj, act = packed[n]
            yield (torch.from_numpy(obs[sel]).to(DTYPE), torch.from_numpy(adj[sel]),
                   torch.from_numpy(act[sel]))


def expert_timeline(case: GridWorldCase) -> tuple[list[list[tuple[int, int]]], list[list[Action]]]:
    """Positions and expert actions per time step 0..makespan-1 (finished robots idle)."""
    m = case.expert_makespan
    cells = [positions_from_actions(s, p) for s, p in zip(case.starts, case.expert_paths)]
    positions = [[c[min(t, len(c) - 1)] for c in cells] for t in range(m)]
    actions = [[p[t] if t < len(p) else Action.IDLE for p in case.expert_paths] for t in range(m)]
    return positions, actions


def build_pairs(cases: Iterable[GridWorldCase], fov: int = DEFAULT_FOV, r_comm: float = DEFAULT_R_COMM,
                pairs: PairSet | None = None) -> PairSet:
    """One training pair per (case, time step) along the expert solution."""
    pairs = pairs if pairs is not None else PairSet()
    for case in cases:
        if case.expert_paths is None:
            raise ValueError(f"case {case.case_id!r} has no expert paths")
        observer = Observer(case.map, fov)
        positions, actions = expert_timeline(case)
        for pos, act in zip(positions, actions):
            pairs.add(observer.observe_all(pos, case.goals), build_adjacency(pos, r_comm),
                      np.array([int(a) for a in act]), case.case_id)
    return pairs


def batch_loss(model: PolicyNet, Z: torch.Tensor, S: torch.Tensor, actions: torch.Tensor
               ) -> tuple[torch.Tensor, int]:
    """Cross-entropy summed over robots, averaged over pairs; plus the correct-action count."""
    logits = model(Z, S)
    loss = cross_entropy(logits, actions, reduction="sum") / Z.shape[0]
    correct = int((logits.argmax(dim=-1) == actions).sum())
    return loss, correct


def train_epoch(model: PolicyNet, pairs: PairSet, optimizer: Adam, lr: float, batch_size: int,
                rng: np.random.Generator) -> dict:
    model.train()
    total, correct, n_pairs, n_robots = 0.0, 0, 0, 0
    for Z, S, act in pairs.batches(batch_size, rng):
        optimizer.zero_grad()
        loss, ok = batch_loss(model, Z, S, act)
        backward(loss)
        optimizer.step(lr)
        total += loss.item() * Z.shape[0]
        correct += ok
        n_pairs += Z.shape[0]
        n_robots += act.numel()
    return {"loss": total / max(n_pairs, 1), "accuracy": correct / max(n_robots, 1)}


@torch.no_grad()
def evaluate_pairs(model: PolicyNet, pairs: PairSet, batch_size: int = 256) -> dict:
    model.eval()
    total, correct, n_pairs, n_robots = 0.0, 0, 0, 0
    for Z, S, act in pairs.batches(batch_size):
        loss, ok = batch_loss(model, Z, S, act)
        total += loss.item() * Z.shape[0]
        correct += ok
        n_pairs += Z.shape[0]
        n_robots += act.numel()
    return {"loss": total / max(n_pairs, 1), "accuracy": correct / max(n_robots, 1)}


def online_expert_round(
    model: PolicyNet,
    training_cases: list[GridWorldCase],
    pairs: PairSet,
    planner: PlannerConfig,
    n_oe: int,
    rng: np.random.Generator,
    tag: str = "oe",
    fov: int = DEFAULT_FOV,
    r_comm: float = DEFAULT_R_COMM,
    replan_from: str = "start",
) -> dict:
    """Roll out ``n_oe`` random training cases; re-solve failures with ECBS and append their pairs.

    New cases are appended to ``training_cases`` (ids suffixed with ``tag``) so they
    never enter the validation or test splits.
    """
    if not training_cases:
        return {"failed": 0, "added_cases": 0, "added_pairs": 0, "skipped": 0}
    idx = rng.choice(len(training_cases), size=min(n_oe, len(training_cases)), replace=False)
    failed = added_pairs = skipped = 0
    new_cases = []
    for i in sorted(int(k) for k in idx):
        case = training_cases[i]
        rec = rollout(case, model, "sample", seed=int(rng.integers(2**31)), fov=fov, r_comm=r_comm)
        if rec.success:
            continue
        failed += 1
        if replan_from == "failure":
            starts = tuple(p[-1] for p in rec.paths)
        else:
            starts = case.starts
        base = GridWorldCase(case.map, starts, case.goals, None, f"{case.case_id}/{tag}", case.rng_seed)
        try:
            sol = ecbs_solve(base, planner)
        except PlannerFailure as exc:
            log.warning("online expert skipped %s: %s", case.case_id, exc)
            skipped += 1
            continue
        new_case = base.with_paths(sol.paths)
        before = len(pairs)
        build_pairs([new_case], fov, r_comm, pairs)
        added_pairs += len(pairs) - before
        new_cases.append(new_case)
    training_cases.extend(new_cases)
    return {"failed": failed, "added_cases": len(new_cases), "added_pairs": added_pairs, "skipped": skipped}


# ---------------------------------------------------------------- checkpoints


def save_policy(path: str | Path, model: PolicyNet, optimizer: Adam | None = None, meta: dict | None = None) -> None:
    arrays = model.named_arrays()
    info = {"kind": CHECKPOINT_KIND, "model": model.cfg.to_dict(), "model_name": model.cfg.name, **(meta or {})}
    if optimizer is not None:
        arrays.update(optimizer.state.to_arrays())
        info["adam_step"] = optimizer.state.step
    save_checkpoint(path, arrays, info)


def load_policy(path: str | Path, expect: ModelConfig | None = None) -> tuple[PolicyNet, dict, OptimizerState | None]:
    arrays, meta = load_checkpoint(path)
    if meta.get("kind") != CHECKPOINT_KIND:
        raise ValueError(f"{path}: not a policy checkpoint")
    cfg = ModelConfig.from_dict(meta["model"])
    if expect is not None and cfg != expect:
        raise ValueError(f"checkpoint model {cfg.name} ({cfg}) does not match requested {expect.name} ({expect})")
    model = PolicyNet(cfg)
    model.load_arrays(arrays)
    opt_state = OptimizerState.from_arrays(meta["adam_step"], arrays) if "adam_step" in meta else None
    return model, meta, opt_state


# ---------------------------------------------------------------- full run


@dataclass
class TrainResult:
    model: PolicyNet
    best_epoch: int
    best_val_success: float
    log: list[dict]


def run_training(
    model_cfg: ModelConfig,
    train_cases: Sequence[GridWorldCase],
    valid_cases: Sequence[GridWorldCase],
    schedule: TrainSchedule,
    out_dir: str | Path | None = None,
    planner: PlannerConfig | None = None,
    r_comm: float = DEFAULT_R_COMM,
    resume: str | Path | None = None,
    run_config: dict | None = None,
) -> TrainResult:
    """Train, validate every ``validate_every`` epochs, and augment with the online expert.

    The returned model carries the parameters of the best validation round
    (success rate under the stochastic policy). Writes ``train_log.jsonl`` and
    per-round checkpoints to ``out_dir`` when given.
    """
    torch.manual_seed(schedule.seed)
    planner = planner or PlannerConfig(time_budget=10.0)
    fov = model_cfg.fov
    rng = np.random.default_rng(schedule.seed)
    model = PolicyNet(model_cfg, seed=schedule.seed)
    optimizer = Adam(model.named_parameters(), weight_decay=schedule.weight_decay)
    start_epoch = 1
    train_cases = list(train_cases)
    if resume is not None:
        loaded, meta, opt_state = load_policy(resume, expect=model_cfg)
        model.load_arrays(loaded.named_arrays())
        optimizer = Adam(model.named_parameters(), weight_decay=schedule.weight_decay, state=opt_state)
        start_epoch = meta["epoch"] + 1
        rng = np.random.default_rng([schedule.seed, meta["epoch"]])

    oe_path = Path(out_dir) / "online_expert_cases.jsonl" if out_dir is not None else None
    if resume is not None and oe_path is not None and oe_path.exists():
        # cases added by earlier online-expert rounds up to the resumed epoch
        with open(oe_path) as fh:
            for line in fh:
                rec = json.loads(line)
                if rec["epoch"] <= start_epoch - 1:
                    train_cases.append(case_from_record(rec["case"]))
    pairs = build_pairs(train_cases, fov, r_comm)
    valid_pairs = build_pairs(valid_cases, fov, r_comm)
    valid_roll = list(valid_cases)[: schedule.n_valid]

    out = Path(out_dir) if out_dir is not None else None
    log_fh = None
    header = {"config": run_config or {}, "model": model_cfg.to_dict(), "schedule": asdict(schedule),
              "planner": asdict(planner), "r_comm": r_comm}
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        log_fh = open(out / "train_log.jsonl", "a" if resume else "w")
        if not resume and oe_path.exists():
            oe_path.unlink()
        if not resume:
            log_fh.write(json.dumps({"header": header}, sort_keys=True) + "\n")

    history: list[dict] = []
    best_state = {k: v.detach().clone() for k, v in model.state_dict().items()}
    best_epoch, best_success = 0, -1.0
    try:
        for epoch in range(start_epoch, schedule.epochs + 1):
            lr = schedule.lr(epoch)
            stats = train_epoch(model, pairs, optimizer, lr, schedule.batch_size, rng)
            rec = {"epoch": epoch, "lr": lr, "loss": stats["loss"], "accuracy": stats["accuracy"],
                   "n_pairs": len(pairs), "val_success_rate": None}
            if epoch % schedule.validate_every == 0 or epoch == schedule.epochs:
                vp = evaluate_pairs(model, valid_pairs)
                rep = evaluate_set(model, valid_roll, mode="sample", seed=schedule.seed + epoch,
                                   fov=fov, r_comm=r_comm)
                rec.update(val_loss=vp["loss"], val_accuracy=vp["accuracy"],
                           val_success_rate=rep.success_rate, val_p_rg=rep.robot_success)
                if rep.success_rate > best_success:
                    best_success, best_epoch = rep.success_rate, epoch
                    best_state = {k: v.detach().clone() for k, v in model.state_dict().items()}
                if out is not None:
                    save_policy(out / f"checkpoint_epoch{epoch:04d}.ckpt", model, optimizer,
                                {"epoch": epoch, "config": header})
            if epoch % schedule.online_expert_every == 0 and epoch < schedule.epochs:
                before = len(train_cases)
                oe = online_expert_round(model, train_cases, pairs, planner, schedule.n_online_expert,
                                         rng, f"oe{epoch}", fov, r_comm, schedule.replan_from)
                rec["online_expert"] = oe
                if oe_path is not None:
                    with open(oe_path, "a") as fh:
                        for case in train_cases[before:]:
                            fh.write(json.dumps({"epoch": epoch, "case": case_to_record(case)}, sort_keys=True) + "\n")
            history.append(rec)
            log.info("epoch %d lr %.3g loss %.4f acc %.3f val %s", epoch, lr, rec["loss"], rec["accuracy"],
                     rec["val_success_rate"])
            if log_fh is not None:
                log_fh.write(json.dumps(rec, sort_keys=True) + "\n")
                log_fh.flush()
    finally:
        if log_fh is not None:
            log_fh.close()
    model.load_state_dict(best_state)
    if out is not None:
        save_policy(out / "best.ckpt", model, None, {"epoch": best_epoch, "val_success_rate": best_success,
                                                      "config": header})
    return TrainResult(model, best_epoch, best_success, history)


def generate_cases(
    n_cases: int,
    width: int,
    height: int,
    n_robots: int,
    obstacle_density: float,
    seed: int,
    planner: PlannerConfig | None = None,
    prefix: str = "case",
    max_attempts: int | None = None,
) -> list[GridWorldCase]:
    """Random map per case; rejected instances are redrawn with the next seed."""
    planner = planner or PlannerConfig(time_budget=10.0)
    solver = expert_solver(planner)
    cases: list[GridWorldCase] = []
    attempt = 0
    limit = max_attempts if max_attempts is not None else 20 * n_cases + 100
    while len(cases) < n_cases:
        if attempt >= limit:
            raise RuntimeError(f"only {len(cases)} of {n_cases} cases after {attempt} attempts")
        s = case_seed(seed, attempt)
        attempt += 1
        grid = generate_map(width, height, obstacle_density, s)
        try:
            cases.append(generate_case(grid, n_robots, s, solver, f"{prefix}{len(cases):05d}"))
        except CaseRejected as exc:
            log.debug("attempt %d rejected: %s", attempt, exc.reason)
    return cases
