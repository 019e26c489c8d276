"""Command-line entry points: generate, solve, train, evaluate, verify."""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path

import torch
import yaml

from .evaluation import evaluate_set, rollout, sweep_points, write_report
from .expert import PlannerConfig, PlannerFailure, ecbs_solve
from .gridworld import (
    case_from_record,
    load_cases,
    load_manifest,
    save_cases,
    save_manifest,
    split_ids,
)
from .model import ModelConfig
from .training import TrainSchedule, generate_cases, load_policy, run_training

log = logging.getLogger("magat_mapf")


@dataclass(frozen=True)
class RunConfig:
    width: int = 10
    height: int = 10
    n_robots: int = 4
    obstacle_density: float = 0.1
    n_cases: int = 1000
    split: tuple[float, float, float] = (0.70, 0.15, 0.15)
    fov: int = 9
    r_comm: float = 7.0
    w: float = 1.1
    planner_time_budget: float = 60.0
    model: str = "MAGAT-F-32"
    epochs: int = 100
    batch_size: int = 64
    validate_every: int = 4
    n_valid: int = 100
    online_expert_every: int = 4
    n_online_expert: int = 50
    replan_from: str = "start"
    seed: int = 0
    workers: int = 0  # 0: all available cores
    data_dir: str = "data"
    out_dir: str = "runs"

    def planner(self) -> PlannerConfig:
        return PlannerConfig(w=self.w, time_budget=self.planner_time_budget)

    def model_config(self) -> ModelConfig:
        return ModelConfig.parse(self.model, fov=self.fov)

    def schedule(self) -> TrainSchedule:
        return TrainSchedule(batch_size=self.batch_size, epochs=self.epochs, validate_every=self.validate_every,
                             n_valid=self.n_valid, online_expert_every=self.online_expert_every,
                             n_online_expert=self.n_online_expert, replan_from=self.replan_from,
                             seed=self.seed)

    def n_workers(self) -> int:
        return self.workers or os.cpu_count() or 1

    def to_dict(self) -> dict:
        d = asdict(self)
        d["split"] = list(self.split)
        return d


MODES = {
    "desk": RunConfig(),
    "paper": RunConfig(width=20, height=20, n_robots=10, n_cases=30000, epochs=300,
                       n_valid=1000, n_online_expert=500),
}


def load_config(mode: str = "desk", path: str | None = None, **overrides) -> RunConfig:
    """Mode defaults, then the config file (YAML or JSON), then explicit overrides."""
    cfg = MODES[mode]
    known = {f.name for f in fields(RunConfig)}
    if path:
        with open(path) as fh:
            data = yaml.safe_load(fh) or {}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        if "split" in data:
            data["split"] = tuple(data["split"])
        cfg = replace(cfg, **data)
    return replace(cfg, **{k: v for k, v in overrides.items() if v is not None})


# ---------------------------------------------------------------- commands


def cmd_generate(cfg: RunConfig, args) -> int:
    out = Path(cfg.data_dir)
    out.mkdir(parents=True, exist_ok=True)
    cases = generate_cases(cfg.n_cases, cfg.width, cfg.height, cfg.n_robots, cfg.obstacle_density,
                           cfg.seed, cfg.planner())
    save_cases(out / "cases.jsonl", cases)
    splits = split_ids([c.case_id for c in cases], cfg.split, seed=cfg.seed)
    save_manifest(out / "manifest.json", splits, "cases.jsonl", cfg.to_dict())
    print(f"wrote {len(cases)} cases to {out} ({', '.join(f'{k} {len(v)}' for k, v in splits.items())})")
    return 0


def cmd_solve(cfg: RunConfig, args) -> int:
    src = Path(args.input)
    dst = Path(args.output or src)
    solved, failed = [], 0
    with open(src) as fh:
        records = [json.loads(line) for line in fh if line.strip()]
    for rec in records:
        case = case_from_record(rec)
        if case.expert_paths is not None and not args.force:
            solved.append(case)
            continue
        try:
            sol = ecbs_solve(case, cfg.planner())
        except PlannerFailure as exc:
            log.warning("case %s: %s", case.case_id, exc.reason)
            failed += 1
            continue
        solved.append(case.with_paths(sol.paths))
    save_cases(dst, solved)
    print(f"solved {len(solved)} cases, {failed} failed -> {dst}")
    return 0 if failed == 0 else 1


def _load_split(data_dir: str, split: str):
    manifest = load_manifest(Path(data_dir) / "manifest.json")
    by_id = {c.case_id: c for c in load_cases(Path(data_dir) / manifest["cases_file"])}
    return [by_id[i] for i in manifest["splits"][split]]


def cmd_train(cfg: RunConfig, args) -> int:
    train = _load_split(cfg.data_dir, "train")
    valid = _load_split(cfg.data_dir, "valid")
    out = Path(cfg.out_dir) / cfg.model
    result = run_training(cfg.model_config(), train, valid, cfg.schedule(), out, cfg.planner(),
                          cfg.r_comm, resume=args.resume, run_config=cfg.to_dict())
    print(f"best epoch {result.best_epoch}: validation success {result.best_val_success:.3f}; "
          f"checkpoints in {out}")
    return 0


def cmd_evaluate(cfg: RunConfig, args) -> int:
    model, meta, _ = load_policy(args.checkpoint)
    out = Path(cfg.out_dir) / "eval"
    echo = {"config": cfg.to_dict(), "checkpoint": str(args.checkpoint), "model": model.cfg.name}
    if args.debug_case:
        cases = {c.case_id: c for c in _load_split(cfg.data_dir, args.split)}
        case = cases[args.debug_case]
        rec = rollout(case, model, args.policy, seed=cfg.seed, fov=model.cfg.fov, r_comm=cfg.r_comm,
                      record_attention=True)
        out.mkdir(parents=True, exist_ok=True)
        dump = {
            **echo, "case_id": case.case_id, "success": rec.success, "paths": rec.paths,
            "attention": [[None if e is None else e.tolist() for e in step] for step in rec.attention],
        }
        path = out / f"attention_{case.case_id.replace('/', '_')}.json"
        path.write_text(json.dumps(dump))
        print(f"{case.case_id}: success={rec.success} steps={rec.steps}; attention dump {path}")
        return 0
    if args.sweep:
        rows = []
        for k, point in enumerate(sweep_points(args.sweep)):
            n = args.n_cases or point.n_cases
            cases = generate_cases(n, point.width, point.height, point.n_robots, point.obstacle_density,
                                   cfg.seed + k, cfg.planner(), prefix=f"{point.label}-")
            rep = evaluate_set(model, cases, cfg.n_workers(), args.policy, cfg.seed, model.cfg.fov, cfg.r_comm,
                               strict=args.strict)
            rows.append((point, rep))
            s = rep.summary()
            print(f"{point.label:>16} rho={point.robot_density:.4f} alpha={s['alpha']:.3f} "
                  f"dFT={s['mean_delta_ft']:.3f} p_rg={s['p_rg']:.3f}")
        write_report(out, rows, echo, tag=args.sweep)
    else:
        cases = _load_split(cfg.data_dir, args.split)
        rep = evaluate_set(model, cases, cfg.n_workers(), args.policy, cfg.seed, model.cfg.fov, cfg.r_comm,
                           strict=args.strict)
        write_report(out, [(None, rep)], echo, tag=args.split)
        s = rep.summary()
        print(f"{args.split}: n={s['n_cases']} alpha={s['alpha']:.3f} dFT={s['mean_delta_ft']:.3f} "
              f"p_rg={s['p_rg']:.3f}")
    print(f"report written to {out}")
    return 0


def cmd_verify(cfg: RunConfig, args) -> int:
    from .verify import run_all

    results = run_all(cfg.seed, quick=args.quick)
    for r in results:
        print(r.line())
    bad = [r.name for r in results if not r.passed]
    print("verify:", "all suites passed" if not bad else f"failed: {', '.join(bad)}")
    return 1 if bad else 0


# ---------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML or JSON file with RunConfig fields")
    common.add_argument("--mode", choices=sorted(MODES), default="desk")
    common.add_argument("--seed", type=int)
    common.add_argument("--workers", type=int)
    common.add_argument("--model", help="model string, e.g. MAGAT-F-32-P4")
    common.add_argument("--data-dir")
    common.add_argument("--out-dir")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="magat-mapf", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    sub.add_parser("generate", parents=[common], help="generate and solve a dataset with its split manifest")

    s = sub.add_parser("solve", parents=[common], help="attach ECBS solutions to a case file")
    s.add_argument("input")
    s.add_argument("--output")
    s.add_argument("--force", action="store_true", help="re-solve cases that already have paths")

    t = sub.add_parser("train", parents=[common], help="imitation learning with online expert")
    t.add_argument("--resume", help="checkpoint to continue from")

    e = sub.add_parser("evaluate", parents=[common], help="roll out a checkpoint")
    e.add_argument("checkpoint")
    e.add_argument("--sweep", choices=["same-density", "increasing-density", "large-scale"])
    e.add_argument("--n-cases", type=int, help="cases per sweep point (default: the sweep's own)")
    e.add_argument("--split", default="test")
    e.add_argument("--policy", choices=["sample", "greedy"], default="sample")
    e.add_argument("--strict", action="store_true", help="count any shielded move as failure")
    e.add_argument("--debug-case", help="roll out one case id and dump attention matrices per step")

    v = sub.add_parser("verify", parents=[common], help="run the property suites")
    v.add_argument("--quick", action="store_true")
    return p


COMMANDS = {"generate": cmd_generate, "solve": cmd_solve, "train": cmd_train,
            "evaluate": cmd_evaluate, "verify": cmd_verify}


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    torch.set_num_threads(1)
    try:
        cfg = load_config(args.mode, args.config, seed=args.seed, workers=args.workers, model=args.model,
                          data_dir=args.data_dir, out_dir=args.out_dir)
        return COMMANDS[args.command](cfg, args)
    except (ValueError, FileNotFoundError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
