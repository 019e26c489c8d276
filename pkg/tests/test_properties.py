import numpy as np
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from magat_mapf.autodiff import masked_softmax, tensor
from magat_mapf.comm_graph import build_adjacency, graph_shift, permutation_matrix, permute
from magat_mapf.gridworld import Action, GridMap, Observer, WorldState, generate_map, step
from magat_mapf.verify import random_graph, random_layer

seeds = st.integers(0, 2**32 - 1)


@st.composite
def worlds(draw):
    w = draw(st.integers(3, 8))
    h = draw(st.integers(3, 8))
    grid = generate_map(w, h, draw(st.sampled_from([0.0, 0.1, 0.2])), draw(seeds))
    free = grid.free_cells()
    n = draw(st.integers(1, min(6, len(free))))
    cells = draw(st.permutations(free))[:n]
    actions = draw(st.lists(st.sampled_from(list(Action)), min_size=n, max_size=n))
    return grid, WorldState(list(cells), list(cells)), actions


@settings(max_examples=300, deadline=None)
@given(worlds())
def test_shielded_step_never_collides(world):
    grid, state, actions = world
    nxt, report = step(state, grid, actions)
    assert len(set(nxt.positions)) == len(nxt.positions)
    assert all(grid.is_free(p) for p in nxt.positions)
    for i in range(len(state.positions)):
        for j in range(len(state.positions)):
            if i != j:
                assert not (nxt.positions[i] == state.positions[j] and nxt.positions[j] == state.positions[i])
    for i, (a, b) in enumerate(zip(state.positions, nxt.positions)):
        moved_as_asked = b == (a[0] + Action(actions[i]).delta[0], a[1] + Action(actions[i]).delta[1])
        assert moved_as_asked or (b == a and (i in report.shielded or actions[i] == Action.IDLE))


@settings(max_examples=200, deadline=None)
@given(worlds(), st.sampled_from([3, 5, 9]))
def test_observation_has_one_goal_mark(world, fov):
    grid, state, _ = world
    goals = [(grid.width - 1 - x, grid.height - 1 - y) for x, y in state.positions]
    obs = Observer(grid, fov).observe_all(state.positions, goals)
    assert obs.shape == (len(goals), 3, fov + 2, fov + 2)
    assert (obs[:, 2].reshape(len(goals), -1).sum(1) == 1).all()
    assert (obs[:, 1, fov // 2 + 1, fov // 2 + 1] == 1).all()  # self mark at the centre


@settings(max_examples=200, deadline=None)
@given(st.lists(st.tuples(st.integers(0, 30), st.integers(0, 30)), min_size=1, max_size=15, unique=True),
       st.floats(0.5, 12.0))
def test_adjacency_matches_distances(points, r):
    S = build_adjacency(points, r)
    p = np.array(points, dtype=float)
    d = np.sqrt(((p[:, None] - p[None]) ** 2).sum(-1))
    assert np.array_equal(S, ((d > 0) & (d <= r)).astype(float))


@settings(max_examples=100, deadline=None)
@given(seeds)
def test_shift_and_layers_are_equivariant(seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(1, 12))
    S = random_graph(n, rng)
    X = rng.normal(size=(n, 4))
    P = permutation_matrix(rng.permutation(n))
    S2, X2 = permute(P, S, X)
    assert np.abs(graph_shift(S2, X2) - P @ graph_shift(S, X)).max() < 1e-12
    layer = random_layer(str(rng.choice(["GNN", "GAT", "MAGAT"])), 4, 3, rng, heads=int(rng.integers(1, 3)))
    Pt = tensor(P)
    out = layer(tensor(X), tensor(S))
    moved = layer(tensor(X2), tensor(S2))
    assert (moved - Pt @ out).abs().max() < 1e-9


@settings(max_examples=100, deadline=None)
@given(seeds)
def test_masked_softmax_support(seed):
    rng = np.random.default_rng(seed)
    scores = tensor(rng.normal(size=(6, 7)) * 20)
    mask = torch.from_numpy(rng.random((6, 7)) < 0.5)
    out = masked_softmax(scores, mask)
    assert torch.all(out[~mask] == 0)
    sums = out.sum(1)
    nonempty = mask.any(1)
    assert torch.all((sums[nonempty] - 1).abs() < 1e-9) and torch.all(sums[~nonempty] == 0)


def test_grid_neighbours_are_free_and_adjacent():
    grid = GridMap(3, 3, frozenset({(1, 1)}))
    assert sorted(grid.neighbors((1, 0))) == [(0, 0), (2, 0)]
