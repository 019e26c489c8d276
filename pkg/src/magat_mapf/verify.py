"""Property suites: equivariance, purity, attention normalisation, gradients, expert soundness.

Each suite returns a :class:`SuiteResult`; ``run_all`` is what ``magat-mapf verify`` calls.
"""
from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np
import torch

from .autodiff import finite_difference_check, ops
from .autodiff.ops import DTYPE
from .comm_graph import permutation_matrix
from .expert import PlannerConfig, PlannerFailure, Unsolvable, ecbs_solve, joint_state_oracle, validate_solution
from .gridworld import CaseRejected, GridWorldCase, generate_map, sample_endpoints
from .model import GraphLayer, ModelConfig, PolicyNet


@dataclass
class SuiteResult:
    name: str
    n_checked: int
    n_failed: int
    worst: float = 0.0
    seconds: float = 0.0
    notes: dict = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return self.n_failed == 0 and self.n_checked > 0

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return (f"{status} {self.name}: {self.n_checked - self.n_failed}/{self.n_checked} ok, "
                f"worst {self.worst:.3g}, {self.seconds:.1f}s")


def random_graph(n: int, rng: np.random.Generator, p: float | None = None, symmetric: bool = True) -> np.ndarray:
    p = rng.uniform(0.1, 0.9) if p is None else p
    S = (rng.random((n, n)) < p).astype(np.float64)
    if symmetric:
        S = np.triu(S, 1)
        S = S + S.T
    np.fill_diagonal(S, 0.0)
    return S


def random_layer(kind: str, f_in: int, f_out: int, rng: np.random.Generator, taps: int = 2, heads: int = 1) -> GraphLayer:
    layer = GraphLayer(kind, f_in, f_out, taps, heads, 0.2)
    with torch.no_grad():
        for p in layer.parameters():
            p.copy_(torch.from_numpy(rng.normal(0.0, 0.5, size=tuple(p.shape))))
    return layer


def equivariance_suite(trials: int = 1000, seed: int = 0, tol: float = 1e-9, max_n: int = 20) -> SuiteResult:
    """max |P A(X;S) - A(PX; P S P^T)| over random graphs, layers and permutations."""
    t0 = time.perf_counter()
    rng = np.random.default_rng(seed)
    kinds = ("MAGAT", "GAT", "GNN")
    worst, failed = 0.0, 0
    with torch.no_grad():
        for trial in range(trials):
            n = int(rng.integers(1, max_n + 1))
            f, g = int(rng.integers(2, 9)), int(rng.integers(2, 9))
            layer = random_layer(kinds[trial % 3], f, g, rng, heads=int(rng.integers(1, 3)))
            S = random_graph(n, rng, symmetric=bool(rng.integers(2)))
            X = rng.normal(size=(n, f))
            P = permutation_matrix(rng.permutation(n))
            y = layer(torch.from_numpy(X), torch.from_numpy(S)).numpy()
            yp = layer(torch.from_numpy(P @ X), torch.from_numpy(P @ S @ P.T)).numpy()
            err = float(np.max(np.abs(P @ y - yp))) if n else 0.0
            worst = max(worst, err)
            failed += err >= tol
    return SuiteResult("equivariance", trials, failed, worst, time.perf_counter() - t0)


def purity_suite(trials: int = 100, seed: int = 0, cfg: ModelConfig | None = None) -> SuiteResult:
    """Repeated forward passes on the same (Z, S) give bit-identical logits."""
    t0 = time.perf_counter()
    rng = np.random.default_rng(seed)
    model = PolicyNet(cfg or ModelConfig.parse("MAGAT-F-16"), seed=seed)
    model.eval()
    failed = 0
    side = model.cfg.fov + 2
    with torch.no_grad():
        for _ in range(trials):
            n = int(rng.integers(1, 9))
            Z = torch.from_numpy((rng.random((n, 3, side, side)) < 0.3).astype(np.float64))
            S = torch.from_numpy(random_graph(n, rng))
            first = model(Z, S)
            again = model(Z.clone(), S.clone())
            failed += not torch.equal(first, again)
    return SuiteResult("purity", trials, failed, 0.0, time.perf_counter() - t0)


def attention_suite(trials: int = 200, seed: int = 0, tol: float = 1e-9) -> SuiteResult:
    """Rows of E sum to 1 on non-isolated nodes, are exactly 0 off-edge and on isolated rows,
    and MAGAT with all-ones attention reproduces the GNN layer."""
    t0 = time.perf_counter()
    rng = np.random.default_rng(seed)
    worst, failed, ones_gap = 0.0, 0, 0.0
    with torch.no_grad():
        for trial in range(trials):
            n = int(rng.integers(1, 16))
            f = int(rng.integers(2, 9))
            kind = "MAGAT" if trial % 2 == 0 else "GAT"
            layer = random_layer(kind, f, f, rng)
            S = random_graph(n, rng, p=float(rng.uniform(0.0, 0.8)), symmetric=bool(rng.integers(2)))
            X = torch.from_numpy(rng.normal(size=(n, f)))
            E = layer.attention(X, torch.from_numpy(S), 0).numpy()
            has_edge = S.sum(axis=1) > 0
            row_err = np.abs(E.sum(axis=1)[has_edge] - 1.0)
            err = float(row_err.max()) if row_err.size else 0.0
            bad = err >= tol or np.any(E[S == 0] != 0.0) or np.any(E[~has_edge] != 0.0)
            if kind == "MAGAT":
                gnn = GraphLayer("GNN", f, f, 2, 1, 0.2)
                gnn.A.copy_(layer.A)
                gap = float((layer(X, torch.from_numpy(S), attention="ones")
                             - gnn(X, torch.from_numpy(S))).abs().max())
                ones_gap = max(ones_gap, gap)
                bad = bad or gap >= 1e-12
            worst = max(worst, err)
            failed += bool(bad)
    return SuiteResult("attention", trials, failed, worst, time.perf_counter() - t0, {"ones_vs_gnn": ones_gap})


# ---------------------------------------------------------------- gradients


def _op_cases(rng: np.random.Generator):
    def t(*shape, low=-1.0, high=1.0):
        return torch.tensor(rng.uniform(low, high, size=shape), dtype=DTYPE, requires_grad=True)

    def away_from_zero(*shape):
        v = rng.uniform(0.1, 1.0, size=shape) * rng.choice([-1.0, 1.0], size=shape)
        return torch.tensor(v, dtype=DTYPE, requires_grad=True)

    w = torch.from_numpy(rng.normal(size=64))

    def weigh(y):
        flat = y.reshape(-1)
        return (flat * w[: flat.numel()].repeat(flat.numel() // 64 + 1)[: flat.numel()]).sum()

    a, b = t(3, 4), t(4, 5)
    yield "matmul", (lambda: weigh(ops.matmul(a, b))), [a, b]
    a, b = t(3, 4), t(4)
    yield "add", (lambda: weigh(ops.add(a, b))), [a, b]
    a, b = t(3, 4), t(3, 4)
    yield "mul", (lambda: weigh(ops.mul(a, b))), [a, b]
    a = away_from_zero(4, 5)
    yield "relu", (lambda: weigh(ops.relu(a))), [a]
    a = away_from_zero(4, 5)
    yield "leaky_relu", (lambda: weigh(ops.leaky_relu(a, 0.2))), [a]
    x, k, bias = t(2, 3, 5, 5), t(4, 3, 3, 3), t(4)
    yield "conv2d", (lambda: weigh(ops.conv2d(x, k, bias, padding=1))), [x, k, bias]
    base = rng.permutation(2 * 2 * 6 * 6).astype(np.float64).reshape(2, 2, 6, 6) / 10.0
    x = torch.tensor(base, dtype=DTYPE, requires_grad=True)  # distinct values: no pooling ties
    yield "max_pool", (lambda: weigh(ops.max_pool(x, 2))), [x]
    x, gw, gb = t(2, 4, 3, 3), t(4, low=0.5, high=1.5), t(4)
    yield "group_norm", (lambda: weigh(ops.group_norm(x, 2, gw, gb))), [x, gw, gb]
    a, b = t(3, 2), t(3, 4)
    yield "concat", (lambda: weigh(ops.concat([a, b], axis=-1))), [a, b]
    s = t(5, 5)
    mask = torch.from_numpy(random_graph(5, rng, p=0.5) > 0)
    yield "masked_softmax", (lambda: weigh(ops.masked_softmax(s, mask))), [s]
    logits = t(6, 5)
    labels = torch.from_numpy(rng.integers(0, 5, size=6))
    yield "cross_entropy", (lambda: ops.cross_entropy(logits, labels)), [logits]


def gradient_suite(seed: int = 0, tol: float = 1e-4, per_tensor: int = 24, h: float = 1e-3) -> SuiteResult:
    """Central differences on every op, then end to end on MAGAT-F-16 with 3 robots."""
    t0 = time.perf_counter()
    rng = np.random.default_rng(seed)
    notes, failed, checked, worst = {}, 0, 0, 0.0
    for name, fn, inputs in _op_cases(rng):
        res = finite_difference_check(fn, inputs, h=h, rng=rng, adaptive=True)
        notes[name] = res.max_rel_err
        checked += 1
        failed += not res.passed(tol)
        worst = max(worst, res.max_rel_err)

    model = PolicyNet(ModelConfig.parse("MAGAT-F-16"), seed=seed)
    side = model.cfg.fov + 2
    # observation-like binary cells plus a small jitter so no pooling window has ties
    cells = (rng.random((3, 3, side, side)) < 0.2).astype(np.float64)
    Z = torch.from_numpy(cells + rng.uniform(0.0, 0.1, size=cells.shape))
    S = torch.from_numpy(np.ones((3, 3)) - np.eye(3))
    labels = torch.tensor([0, 3, 4])
    params = list(model.parameters())
    res = finite_difference_check(lambda: ops.cross_entropy(model(Z, S), labels), params, h=h,
                                  max_per_input=per_tensor, rng=rng, adaptive=True)
    notes["model"] = res.max_rel_err
    notes["model_entries"] = res.n_checked
    checked += 1
    failed += not res.passed(tol)
    worst = max(worst, res.max_rel_err)
    return SuiteResult("gradients", checked, failed, worst, time.perf_counter() - t0, notes)


# ---------------------------------------------------------------- expert


def random_small_case(rng: np.random.Generator, case_id: str = "") -> GridWorldCase | None:
    side = int(rng.choice([4, 5]))
    n = int(rng.integers(2, 4))
    density = float(rng.uniform(0.10, 0.20))
    grid = generate_map(side, side, density, int(rng.integers(2**31)))
    try:
        starts, goals = sample_endpoints(grid, n, rng)
    except CaseRejected:
        return None
    return GridWorldCase(grid, tuple(starts), tuple(goals), None, case_id)


def oracle_suite(n_solvable: int = 200, seed: int = 0, w: float = 1.1, max_tries: int = 5000) -> SuiteResult:
    """ECBS vs the joint-state optimum on tiny instances.

    Counts only oracle-solvable instances toward ``n_solvable``; on unsolvable ones
    ECBS must not return a solution.
    """
    t0 = time.perf_counter()
    rng = np.random.default_rng(seed)
    cfg = PlannerConfig(w=w, time_budget=30.0)
    solvable = failed = unsolvable = tries = 0
    worst = 0.0
    while solvable < n_solvable and tries < max_tries:
        tries += 1
        case = random_small_case(rng, f"tiny{tries}")
        if case is None:
            continue
        opt = joint_state_oracle(case)
        if opt is None:
            unsolvable += 1
            try:
                ecbs_solve(case, PlannerConfig(w=w, time_budget=2.0))
                failed += 1  # claimed a solution where none exists
            except PlannerFailure:
                pass
            continue
        solvable += 1
        try:
            sol = ecbs_solve(case, cfg)
        except Unsolvable:
            failed += 1
            continue
        except PlannerFailure:
            failed += 1
            continue
        rep = validate_solution(case, sol.paths)
        ratio = sol.flowtime / opt if opt else (0.0 if sol.flowtime == 0 else float("inf"))
        worst = max(worst, ratio)
        if not (rep.collision_free and rep.all_arrive) or sol.flowtime > w * opt + 1e-9 or rep.flowtime != sol.flowtime:
            failed += 1
    return SuiteResult("expert", solvable, failed, worst, time.perf_counter() - t0,
                       {"unsolvable_seen": unsolvable, "tries": tries})


def run_all(seed: int = 0, quick: bool = False) -> list[SuiteResult]:
    scale = 10 if quick else 1
    return [
        equivariance_suite(1000 // scale, seed),
        purity_suite(100 // scale, seed),
        attention_suite(200 // scale, seed),
        gradient_suite(seed, per_tensor=4 if quick else 24),
        oracle_suite(200 // scale, seed),
    ]
