"""Distance-based communication graphs, the graph shift, and robot relabeling."""
from __future__ import annotations

from typing import Sequence

import numpy as np


def build_adjacency(positions: Sequence[Sequence[float]], r_comm: float, normalize: bool = False) -> np.ndarray:
    """Binary symmetric adjacency: 1 where ``0 < ||p_i - p_j|| <= r_comm``.

    With ``normalize`` the matrix is rescaled as ``D^-1/2 S D^-1/2``; entries stay in [0, 1].
    """
    if r_comm <= 0:
        raise ValueError("r_comm must be positive")
    p = np.asarray(positions, dtype=np.float64).reshape(len(positions), -1)
    d2 = ((p[:, None, :] - p[None, :, :]) ** 2).sum(axis=-1)
    # squared integer distances are exact, so the boundary case compares exactly
    S = ((d2 > 0) & (d2 <= float(r_comm) ** 2)).astype(np.float64)
    if normalize:
        deg = S.sum(axis=1)
        inv = np.where(deg > 0, 1.0 / np.sqrt(np.maximum(deg, 1.0)), 0.0)
        S = S * inv[:, None] * inv[None, :]
    return S


def graph_shift(S: np.ndarray, X: np.ndarray) -> np.ndarray:
    """Neighbourhood aggregation ``[SX]_if = sum_{j in N_i} s_ij x_jf``.

    Only nonzero entries of ``S`` are visited, so sparse graphs cost O(|E| F).
    """
    S = np.asarray(S, dtype=np.float64)
    X = np.asarray(X, dtype=np.float64)
    if S.shape[0] != S.shape[1] or S.shape[1] != X.shape[0]:
        raise ValueError(f"shape mismatch: S {S.shape}, X {X.shape}")
    out = np.zeros((S.shape[0], X.shape[1]))
    rows, cols = np.nonzero(S)
    np.add.at(out, rows, S[rows, cols][:, None] * X[cols])
    return out


def permutation_matrix(perm: Sequence[int]) -> np.ndarray:
    """Matrix ``P`` with ``(PX)_i = X_{perm[i]}``, i.e. ``perm`` is the inverse map pi^-1."""
    perm = np.asarray(perm)
    n = len(perm)
    if sorted(perm.tolist()) != list(range(n)):
        raise ValueError(f"not a permutation: {perm.tolist()}")
    P = np.zeros((n, n))
    P[np.arange(n), perm] = 1.0
    return P


def is_permutation_matrix(P: np.ndarray) -> bool:
    P = np.asarray(P)
    return (
        P.ndim == 2 and P.shape[0] == P.shape[1]
        and bool(np.isin(P, (0, 1)).all())
        and bool((P.sum(axis=0) == 1).all()) and bool((P.sum(axis=1) == 1).all())
    )


def permute(P: np.ndarray, S: np.ndarray, X: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Relabel robots: ``(P S P^T, P X)``."""
    if not (P.shape[0] == S.shape[0] == X.shape[0]):
        raise ValueError(f"shape mismatch: P {P.shape}, S {S.shape}, X {X.shape}")
    return P @ S @ P.T, P @ X


def dump_coo(S: np.ndarray) -> str:
    """Debug text: one ``i j weight`` line per nonzero entry."""
    rows, cols = np.nonzero(S)
    return "\n".join(f"{i} {j} {S[i, j]:.17g}" for i, j in zip(rows, cols))
