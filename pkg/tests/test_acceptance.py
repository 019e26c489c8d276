"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

Criteria 8 and 9 train three 100-epoch models on CPU (40 to 45 minutes each). Finished
runs are kept under ``acceptance_runs/<fingerprint>/`` (or ``$MAGAT_ACCEPTANCE_DIR``)
and reused by later sessions. The fingerprint hashes the protocol below together
with the source of every module on the training path, so editing any of them
starts fresh runs. Delete the directory to force a rerun.

Run ``python tests/test_acceptance.py`` to train the three models ahead of pytest.
"""
from __future__ import annotations

import functools
import hashlib
import json
import os
import shutil
import sys
import time
from pathlib import Path

import pytest
import torch

import magat_mapf
from magat_mapf.evaluation import ExpertReplay, evaluate_set, flowtime_increase, idle_policy, rollout
from magat_mapf.gridworld import Action, GridMap, GridWorldCase
from magat_mapf.model import ModelConfig, PolicyNet
from magat_mapf.expert import PlannerConfig, ecbs_solve
from magat_mapf.training import TrainSchedule, build_pairs, evaluate_pairs, generate_cases, load_policy, run_training
from magat_mapf.verify import attention_suite, equivariance_suite, gradient_suite, oracle_suite, purity_suite

torch.set_num_threads(1)

PROTOCOL = {
    "width": 10, "height": 10, "n_robots": 4, "obstacle_density": 0.1,
    "n_train": 1000, "n_valid": 200, "n_test": 200, "data_seed": 2020,
    "epochs": 100, "batch_size": 64, "validate_every": 4, "rollout_valid": 100,
    "online_expert_every": 4, "n_online_expert": 50, "seed": 0, "r_comm": 7.0,
    "planner_w": 1.1, "planner_time_budget": 10.0, "eval_seed": 0,
}
TRAINING_PATH = ["autodiff/ops.py", "autodiff/optim.py", "autodiff/checkpoint.py", "comm_graph.py",
                 "evaluation.py", "expert.py", "gridworld.py", "model.py", "training.py"]
PKG_DIR = Path(magat_mapf.__file__).parent
ROOT = Path(__file__).resolve().parents[1]


def fingerprint() -> str:
    h = hashlib.sha256(json.dumps(PROTOCOL, sort_keys=True).encode())
    for rel in TRAINING_PATH:
        h.update(rel.encode())
        h.update((PKG_DIR / rel).read_bytes())
    return h.hexdigest()[:12]


def run_root() -> Path:
    base = Path(os.environ.get("MAGAT_ACCEPTANCE_DIR", ROOT / "acceptance_runs"))
    return base / fingerprint()


@functools.lru_cache(maxsize=1)
def dataset():
    p = PROTOCOL
    total = p["n_train"] + p["n_valid"] + p["n_test"]
    planner = PlannerConfig(w=p["planner_w"], time_budget=p["planner_time_budget"])
    cases = generate_cases(total, p["width"], p["height"], p["n_robots"], p["obstacle_density"],
                           p["data_seed"], planner)
    a, b = p["n_train"], p["n_train"] + p["n_valid"]
    return cases[:a], cases[a:b], cases[b:]


def schedule() -> TrainSchedule:
    p = PROTOCOL
    return TrainSchedule(batch_size=p["batch_size"], epochs=p["epochs"], validate_every=p["validate_every"],
                         n_valid=p["rollout_valid"], online_expert_every=p["online_expert_every"],
                         n_online_expert=p["n_online_expert"], seed=p["seed"])


def trained_run(name: str, model: str) -> Path:
    """Directory of a finished run, training it first when no finished copy exists."""
    out = run_root() / name
    if (out / "done.json").exists():
        return out
    if out.exists():
        shutil.rmtree(out)
    train, valid, _ = dataset()
    p = PROTOCOL
    t0 = time.perf_counter()
    res = run_training(ModelConfig.parse(model), train, valid, schedule(), out,
                       PlannerConfig(w=p["planner_w"], time_budget=p["planner_time_budget"]), p["r_comm"],
                       run_config={"protocol": PROTOCOL, "model": model})
    (out / "done.json").write_text(json.dumps({
        "model": model, "best_epoch": res.best_epoch, "best_val_success": res.best_val_success,
        "seconds": time.perf_counter() - t0, "fingerprint": fingerprint(),
    }, indent=1))
    return out


def read_log(run: Path) -> list[dict]:
    return [json.loads(x) for x in open(run / "train_log.jsonl")][1:]


# ---------------------------------------------------------------- criteria 1-7


def test_criterion_1_permutation_equivariance(acceptance_report):
    res = equivariance_suite(trials=1000, seed=0, tol=1e-9, max_n=20)
    ok = res.passed and res.worst < 1e-9 and res.seconds < 60
    acceptance_report(1, ok, f"{res.n_checked} trials, max |P A(X;S) - A(PX;PSP^T)| = {res.worst:.2e} "
                             f"(< 1e-9), {res.seconds:.1f}s (< 60s)")
    assert ok


def test_criterion_2_purity(acceptance_report):
    res = purity_suite(trials=100, seed=0)
    acceptance_report(2, res.passed, f"{res.n_checked - res.n_failed}/{res.n_checked} repeated forward passes "
                                     f"bitwise identical")
    assert res.passed


def test_criterion_3_attention_normalisation(acceptance_report):
    res = attention_suite(trials=200, seed=0)
    acceptance_report(3, res.passed, f"{res.n_checked - res.n_failed}/{res.n_checked} graphs: neighbour rows sum "
                                     f"to 1 +- 1e-9, off-edge and isolated rows exactly 0, all-ones MAGAT vs GNN "
                                     f"worst {res.worst:.2e} (< 1e-12)")
    assert res.passed


def test_criterion_4_gradients(acceptance_report):
    res = gradient_suite(seed=0, tol=1e-4)
    ok = res.passed and res.seconds < 300
    acceptance_report(4, ok, f"{res.n_checked - res.n_failed}/{res.n_checked} checks (every op + MAGAT-F-16 on 3 "
                             f"robots, {res.notes['model_entries']} parameter entries), worst rel err "
                             f"{res.worst:.2e} (< 1e-4), {res.seconds:.1f}s (< 300s)")
    assert ok


def test_criterion_5_expert_soundness(acceptance_report):
    res = oracle_suite(n_solvable=200, seed=0, w=1.1)
    ok = res.passed and res.n_checked >= 200 and res.seconds < 600
    acceptance_report(5, ok, f"{res.n_checked - res.n_failed}/{res.n_checked} solvable instances within 1.1x the "
                             f"joint-state optimum, collision-free (worst ratio {res.worst:.3f}); "
                             f"{res.notes['unsolvable_seen']} unsolvable draws refused; {res.seconds:.1f}s (< 600s)")
    assert ok


def test_criterion_6_metric_identities(acceptance_report):
    cases = generate_cases(100, 10, 10, 4, 0.1, seed=66)
    replay = [flowtime_increase(rollout(c, ExpertReplay(c)), c.expert_flowtime) for c in cases]
    replay_ok = all(d == 0.0 for d in replay)

    grid = GridMap(8, 8)
    base = GridWorldCase(grid, ((0, 0), (0, 5)), ((4, 0), (4, 5)), None, "planted")
    planted = base.with_paths(ecbs_solve(base).paths)
    replay0 = ExpertReplay(planted)

    def first_robot_only(Z, S, state, rngs, record=None):
        return [replay0(Z, S, state, rngs)[0], Action.IDLE]

    rec = rollout(planted, first_robot_only)
    planted_delta = flowtime_increase(rec, planted.expert_flowtime)
    planted_ok = ([len(p) for p in planted.expert_paths] == [4, 4] and rec.flowtime == 16 and planted_delta == 1.0)

    idle = [rollout(c, idle_policy) for c in cases[:20]]
    tmax_ok = all(r.t_max == 3 * c.expert_makespan and r.steps == r.t_max for r, c in zip(idle, cases))
    ok = replay_ok and planted_ok and tmax_ok
    acceptance_report(6, ok, f"expert replay delta_FT = 0 on {sum(d == 0.0 for d in replay)}/{len(cases)} cases; "
                             f"planted failure FT = {rec.flowtime}, delta_FT = {planted_delta}; idle rollouts stop at "
                             f"T_max = 3 T_MP* on {sum(r.steps == r.t_max for r in idle)}/{len(idle)}")
    assert ok


def test_criterion_7_shape_contracts(acceptance_report):
    cfg = ModelConfig.parse("MAGAT-F-32-P4")
    model = PolicyNet(cfg)
    X = torch.zeros(1, 5, 32, dtype=torch.float64)
    S = torch.ones(1, 5, 5, dtype=torch.float64) - torch.eye(5, dtype=torch.float64)
    layer_width = model.communicate(X, S).shape[-1]
    head_in = model.action_head.fc1.weight.shape[0]
    b64 = PolicyNet(ModelConfig.parse("MAGAT-B-64"))
    b_head_in = b64.action_head.fc1.weight.shape[0]
    logits = model(torch.zeros(5, 3, 11, 11, dtype=torch.float64), S[0])
    ok = (cfg.shared_width == 128 and layer_width == 128 and head_in == 128 and b_head_in == 128
          and tuple(logits.shape) == (5, 5))
    acceptance_report(7, ok, f"MAGAT-F-32-P4 shares {cfg.heads}x{cfg.num_features} = {cfg.shared_width} features, "
                             f"head concat width {layer_width}; MAGAT-B-64 ActionHead input {b_head_in}")
    assert ok


# ---------------------------------------------------------------- criteria 8-9


@pytest.fixture(scope="module")
def magat_run():
    return trained_run("MAGAT-F-32", "MAGAT-F-32")


@pytest.fixture(scope="module")
def gnn_run():
    return trained_run("GNN-F-32", "GNN-F-32")


@pytest.fixture(scope="module")
def magat_repeat():
    return trained_run("MAGAT-F-32-repeat", "MAGAT-F-32")


def assess(run: Path):
    """Best checkpoint's validation accuracy and test success, plus the training curve."""
    _, valid, test = dataset()
    model, meta, _ = load_policy(run / "best.ckpt")
    p = PROTOCOL
    val = evaluate_pairs(model, build_pairs(valid, model.cfg.fov, p["r_comm"]))
    rep = evaluate_set(model, test, mode="sample", seed=p["eval_seed"], fov=model.cfg.fov, r_comm=p["r_comm"])
    return {"val_accuracy": val["accuracy"], "test_success": rep.success_rate, "test_p_rg": rep.robot_success,
            "test_delta_ft": rep.mean_flowtime_increase, "best_epoch": meta["epoch"], "log": read_log(run)}


def write_curves(path: Path, runs: dict[str, list[dict]]) -> None:
    cols = ["loss", "accuracy", "val_loss", "val_accuracy", "val_success_rate"]
    with open(path, "w") as fh:
        fh.write("epoch\t" + "\t".join(f"{name}_{c}" for name in runs for c in cols) + "\n")
        for rows in zip(*runs.values()):
            vals = []
            for r in rows:
                vals += ["" if r.get(c) is None else f"{r[c]:.6g}" for c in cols]
            fh.write(f"{rows[0]['epoch']}\t" + "\t".join(vals) + "\n")


@pytest.mark.slow
def test_criterion_8_desk_learning_run(magat_run, gnn_run, acceptance_report):
    p = PROTOCOL
    _, _, test = dataset()
    magat, gnn = assess(magat_run), assess(gnn_run)
    untrained = PolicyNet(ModelConfig.parse("MAGAT-F-32"), seed=p["seed"])
    base = evaluate_set(untrained, test, mode="sample", seed=p["eval_seed"], r_comm=p["r_comm"]).success_rate

    log = magat["log"]
    loss1, loss100 = log[0]["loss"], log[-1]["loss"]
    a = len(log) == p["epochs"] and loss100 < 0.5 * loss1
    b = magat["val_accuracy"] >= 0.70
    c = magat["test_success"] >= 0.40 and magat["test_success"] > base
    curves = run_root() / "curves.tsv"
    write_curves(curves, {"MAGAT": magat["log"], "GNN": gnn["log"]})
    d = curves.exists() and len(gnn["log"]) == p["epochs"]

    print("epoch  MAGAT loss  MAGAT val success  GNN loss  GNN val success")
    for m, g in zip(magat["log"], gnn["log"]):
        if m["val_success_rate"] is not None:
            print(f"{m['epoch']:5d}  {m['loss']:10.4f}  {m['val_success_rate']:17.3f}  {g['loss']:8.4f}  "
                  f"{g['val_success_rate']:15.3f}")
    detail = (f"(a) loss {loss1:.3f} -> {loss100:.3f} (ratio {loss100 / loss1:.3f} < 0.5) {'ok' if a else 'FAIL'}; "
              f"(b) validation accuracy {magat['val_accuracy']:.3f} (>= 0.70) {'ok' if b else 'FAIL'}; "
              f"(c) test success {magat['test_success']:.3f} on {len(test)} cases (>= 0.40, untrained "
              f"{base:.3f}) {'ok' if c else 'FAIL'}; (d) GNN-F-32 test success {gnn['test_success']:.3f}, "
              f"validation accuracy {gnn['val_accuracy']:.3f}, curves in {curves}")
    ok = a and b and c and d
    acceptance_report(8, ok, detail)
    assert ok


@pytest.mark.slow
def test_criterion_9_reproducibility(magat_run, magat_repeat, acceptance_report):
    names = sorted(f.name for f in magat_run.iterdir() if f.name != "done.json")
    other = sorted(f.name for f in magat_repeat.iterdir() if f.name != "done.json")
    same = [n for n in names if n in other and (magat_run / n).read_bytes() == (magat_repeat / n).read_bytes()]
    ok = names == other and len(same) == len(names) and "train_log.jsonl" in same and "best.ckpt" in same
    n_ckpt = sum(n.endswith(".ckpt") for n in names)
    acceptance_report(9, ok, f"{len(same)}/{len(names)} files byte-identical across two same-seed runs "
                             f"(training log, {n_ckpt} checkpoints, online-expert cases)")
    assert ok


if __name__ == "__main__":
    for name, model in (("MAGAT-F-32", "MAGAT-F-32"), ("GNN-F-32", "GNN-F-32"), ("MAGAT-F-32-repeat", "MAGAT-F-32")):
        t = time.perf_counter()
        path = trained_run(name, model)
        print(f"{name}: {path} ({time.perf_counter() - t:.0f}s)", flush=True)
    sys.exit(0)
