"""Policy network: residual CNN perception, graph layer (GNN / GAT / MAGAT), action MLP.

Tensors are float64. Batched graph inputs have shape ``(B, N, F)`` for features
and ``(B, N, N)`` for adjacency; a missing leading batch axis is accepted too.
"""
from __future__ import annotations

import math
import re
from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np
import torch
import torch.nn as nn

from .autodiff import ops
from .autodiff.ops import DTYPE
from .gridworld import DEFAULT_FOV

LAYER_KINDS = ("GNN", "GAT", "MAGAT")
PIPELINES = ("F", "B")
N_ACTIONS = 5

_NAME_RE = re.compile(r"^(GNN|GAT|MAGAT)-(F|B)-(\d+)(?:-P(\d+))?$")


@dataclass(frozen=True)
class ModelConfig:
    layer_kind: str = "MAGAT"
    pipeline_type: str = "F"
    num_features: int = 32
    heads: int = 1
    taps: int = 2
    layers: int = 1
    fov: int = DEFAULT_FOV
    leaky_slope: float = 0.2
    cnn_channels: tuple[int, ...] = (32, 64, 128)
    hidden: int = 128

    def __post_init__(self):
        if self.layer_kind not in LAYER_KINDS:
            raise ValueError(f"layer_kind must be one of {LAYER_KINDS}")
        if self.pipeline_type not in PIPELINES:
            raise ValueError(f"pipeline_type must be one of {PIPELINES}")
        if self.taps < 1 or self.layers < 1 or self.heads < 1 or self.num_features < 1:
            raise ValueError("taps, layers, heads and num_features must be >= 1")
        if len(self.cnn_channels) != 3:
            raise ValueError("perception uses exactly 3 residual blocks")

    @property
    def name(self) -> str:
        base = f"{self.layer_kind}-{self.pipeline_type}-{self.num_features}"
        return base + (f"-P{self.heads}" if self.heads > 1 else "")

    @property
    def shared_width(self) -> int:
        """Features a robot transmits per exchange, summed over heads."""
        return self.heads * self.num_features

    @property
    def head_input_width(self) -> int:
        width = self.heads * self.num_features
        return width + self.num_features if self.pipeline_type == "B" else width

    @classmethod
    def parse(cls, name: str, **overrides) -> "ModelConfig":
        m = _NAME_RE.match(name.strip())
        if not m:
            raise ValueError(f"bad model name {name!r}; expected KIND-TYPE-FEATURES[-P<n>]")
        kind, pipe, feats, heads = m.groups()
        return cls(kind, pipe, int(feats), int(heads or 1), **overrides)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["cnn_channels"] = list(self.cnn_channels)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        d["cnn_channels"] = tuple(d.get("cnn_channels", (32, 64, 128)))
        return cls(**d)


def _param(shape: Sequence[int]) -> nn.Parameter:
    return nn.Parameter(torch.zeros(*shape, dtype=DTYPE))


class Linear(nn.Module):
    def __init__(self, n_in: int, n_out: int, bias: bool = True):
        super().__init__()
        self.weight = _param((n_in, n_out))
        self.bias = _param((n_out,)) if bias else None

    def forward(self, x):
        y = ops.matmul(x, self.weight)
        return y if self.bias is None else ops.add(y, self.bias)


class MLP(nn.Module):
    """Linear - ReLU - Linear."""

    def __init__(self, n_in: int, hidden: int, n_out: int):
        super().__init__()
        self.fc1 = Linear(n_in, hidden)
        self.fc2 = Linear(hidden, n_out)

    def forward(self, x):
        return self.fc2(ops.relu(self.fc1(x)))


class ResidualBlock(nn.Module):
    """conv3x3 - groupnorm - relu, plus the (projected) input, then optional 2x max-pool."""

    def __init__(self, c_in: int, c_out: int, pool: bool):
        super().__init__()
        self.conv_w = _param((c_out, c_in, 3, 3))
        self.conv_b = _param((c_out,))
        self.norm_w = _param((c_out,))
        self.norm_b = _param((c_out,))
        self.groups = math.gcd(c_out, 8)
        self.skip_w = _param((c_out, c_in, 1, 1)) if c_in != c_out else None
        self.pool = pool

    def forward(self, x):
        y = ops.conv2d(x, self.conv_w, self.conv_b, padding=1)
        y = ops.group_norm(y, self.groups, self.norm_w, self.norm_b)
        y = ops.relu(y)
        skip = x if self.skip_w is None else ops.conv2d(x, self.skip_w)
        y = ops.add(y, skip)
        return ops.max_pool(y, 2) if self.pool else y


class PerceptionNet(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        c1, c2, c3 = cfg.cnn_channels
        self.blocks = nn.ModuleList([
            ResidualBlock(3, c1, pool=True),
            ResidualBlock(c1, c2, pool=True),
            ResidualBlock(c2, c3, pool=False),
        ])
        side = (cfg.fov + 2) // 2 // 2
        self.embed = MLP(c3 * side * side, cfg.hidden, 128)
        self.compress = MLP(128, cfg.hidden, cfg.num_features)

    def forward(self, z):
        """``z``: (M, 3, W_in, H_in) -> (M, F)."""
        for block in self.blocks:
            z = block(z)
        z = self.embed(z.reshape(z.shape[0], -1))
        return self.compress(ops.relu(z))


# ------------------------------------------------------------ graph layers


def magat_scores(X: torch.Tensor, W: torch.Tensor, S: torch.Tensor, slope: float = 0.2) -> torch.Tensor:
    """Key-query attention ``E``: row-wise masked softmax of LeakyReLU(x_i W x_j^T) over neighbours."""
    e = ops.matmul(ops.matmul(X, W), X.transpose(-1, -2))
    return ops.masked_softmax(ops.leaky_relu(e, slope), S != 0)


def gat_scores(X: torch.Tensor, A: torch.Tensor, H: torch.Tensor, S: torch.Tensor, slope: float = 0.2) -> torch.Tensor:
    """GAT attention on transformed features: ``e_ij = H^T [x_i A || x_j A]``."""
    Y = ops.matmul(X, A)
    g = A.shape[-1]
    src = ops.matmul(Y, H[:g].unsqueeze(-1))
    dst = ops.matmul(Y, H[g:].unsqueeze(-1)).transpose(-1, -2)
    return ops.masked_softmax(ops.leaky_relu(ops.add(src, dst), slope), S != 0)


def graph_conv(X: torch.Tensor, S: torch.Tensor, E: torch.Tensor | None, A: torch.Tensor) -> torch.Tensor:
    """``sum_k (E*S)^k X A_k`` with the k-th term built by k successive shifts."""
    shift = S if E is None else ops.mul(E, S)
    z = X
    out = ops.matmul(z, A[0])
    for k in range(1, A.shape[0]):
        z = ops.matmul(shift, z)
        out = ops.add(out, ops.matmul(z, A[k]))
    return out


class GraphLayer(nn.Module):
    """One graph convolution layer with ``heads`` independent parameter sets.

    ``A``: (P, K, F, G) filter taps. MAGAT adds ``W``: (P, F, F); GAT adds ``H``: (P, 2G).
    """

    def __init__(self, kind: str, n_in: int, n_out: int, taps: int, heads: int, slope: float):
        super().__init__()
        self.kind = kind
        self.slope = slope
        self.A = _param((heads, taps, n_in, n_out))
        self.W = _param((heads, n_in, n_in)) if kind == "MAGAT" else None
        self.H = _param((heads, 2 * n_out)) if kind == "GAT" else None

    @property
    def heads(self) -> int:
        return self.A.shape[0]

    def attention(self, X: torch.Tensor, S: torch.Tensor, head: int) -> torch.Tensor | None:
        if self.kind == "MAGAT":
            return magat_scores(X, self.W[head], S, self.slope)
        if self.kind == "GAT":
            A = self.A[head]
            tap = A[1] if A.shape[0] > 1 else A[0]
            return gat_scores(X, tap, self.H[head], S, self.slope)
        return None

    def forward(self, X: torch.Tensor, S: torch.Tensor, attention: str = "learned",
                record: list | None = None) -> torch.Tensor:
        """Concatenate ``relu(graph_conv)`` over heads -> (..., N, P*G).

        ``attention="ones"`` replaces E by all-ones (the plain GNN shift).
        """
        outs = []
        for p in range(self.heads):
            E = None if attention == "ones" else self.attention(X, S, p)
            if record is not None:
                record.append(None if E is None else E.detach().clone())
            outs.append(ops.relu(graph_conv(X, S, E, self.A[p])))
        return ops.concat(outs, axis=-1)


class PolicyNet(nn.Module):
    def __init__(self, cfg: ModelConfig, seed: int = 0):
        super().__init__()
        self.cfg = cfg
        self.perception = PerceptionNet(cfg)
        f = cfg.num_features
        layers = []
        width = f
        for _ in range(cfg.layers):
            layers.append(GraphLayer(cfg.layer_kind, width, f, cfg.taps, cfg.heads, cfg.leaky_slope))
            width = cfg.heads * f
        self.graph = nn.ModuleList(layers)
        self.action_head = MLP(cfg.head_input_width, cfg.hidden, N_ACTIONS)
        self.reset_parameters(seed)

    def reset_parameters(self, seed: int) -> None:
        """Uniform weights in +-1/sqrt(fan_in), zero biases, unit norm scales."""
        rng = np.random.default_rng(seed)
        with torch.no_grad():
            for name, p in self.named_parameters():
                leaf = name.rsplit(".", 1)[-1]
                if leaf in ("bias", "conv_b", "norm_b"):
                    p.zero_()
                elif leaf == "norm_w":
                    p.fill_(1.0)
                else:
                    fan_in = _fan_in(leaf, p.shape)
                    bound = 1.0 / math.sqrt(fan_in)
                    p.copy_(torch.from_numpy(rng.uniform(-bound, bound, size=tuple(p.shape))))

    def features(self, Z: torch.Tensor) -> torch.Tensor:
        """(B, N, 3, W, H) -> (B, N, F); each observation is processed independently."""
        B, N = Z.shape[:2]
        return self.perception(Z.reshape(B * N, *Z.shape[2:])).reshape(B, N, -1)

    def communicate(self, X: torch.Tensor, S: torch.Tensor, attention: str = "learned",
                    record: list | None = None) -> torch.Tensor:
        for layer in self.graph:
            X = layer(X, S, attention, record)
        return X

    def forward(self, Z: torch.Tensor, S: torch.Tensor, attention: str = "learned",
                record: list | None = None) -> torch.Tensor:
        """Logits ``(B, N, 5)`` from observations ``(B, N, 3, W, H)`` and adjacency ``(B, N, N)``."""
        squeeze = Z.ndim == 4
        if squeeze:
            Z, S = Z.unsqueeze(0), S.unsqueeze(0)
        if Z.shape[:2] != S.shape[:2] or S.shape[1] != S.shape[2]:
            raise ops.ShapeError(f"observation batch {tuple(Z.shape)} vs adjacency {tuple(S.shape)}")
        X = self.features(Z)
        mark = len(record) if record is not None else 0
        Y = self.communicate(X, S, attention, record)
        if squeeze and record is not None:
            record[mark:] = [None if e is None else e[0] for e in record[mark:]]
        if self.cfg.pipeline_type == "B":
            Y = ops.concat([X, Y], axis=-1)
        logits = self.action_head(Y)
        return logits[0] if squeeze else logits

    def named_arrays(self) -> dict[str, np.ndarray]:
        return {f"param.{k}": v.detach().numpy().copy() for k, v in self.named_parameters()}

    def load_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        with torch.no_grad():
            for k, v in self.named_parameters():
                src = arrays[f"param.{k}"]
                if src.shape != tuple(v.shape):
                    raise ValueError(f"checkpoint shape mismatch for {k}: {src.shape} vs {tuple(v.shape)}")
                v.copy_(torch.from_numpy(src))


def _fan_in(leaf: str, shape) -> int:
    if leaf in ("conv_w", "skip_w"):
        return int(np.prod(shape[1:]))
    if leaf == "A":
        return int(shape[-2])
    if leaf == "H":
        return int(shape[-1]) // 2
    return int(shape[-2]) if len(shape) >= 2 else int(shape[0])


# ---------------------------------------------------------------- policy


def action_probabilities(logits: torch.Tensor) -> np.ndarray:
    return torch.softmax(logits.detach(), dim=-1).numpy()


def choose_actions(probs: np.ndarray, mode: str = "sample",
                   rngs: Sequence[np.random.Generator] | np.random.Generator | None = None) -> np.ndarray:
    """Pick one action per row of ``probs``.

    ``greedy`` takes the argmax (lowest index on ties). ``sample`` draws by
    inverse CDF; with a list of generators row ``i`` uses ``rngs[i]``.
    """
    probs = np.asarray(probs)
    if mode == "greedy":
        return probs.argmax(axis=-1)
    if mode != "sample":
        raise ValueError(f"unknown mode {mode!r}")
    n = probs.shape[0]
    if rngs is None:
        rngs = np.random.default_rng()
    if isinstance(rngs, np.random.Generator):
        u = rngs.random(n)
    else:
        if len(rngs) != n:
            raise ValueError("need one generator per robot")
        u = np.array([g.random() for g in rngs])
    cdf = np.cumsum(probs, axis=-1)
    cdf[:, -1] = 1.0
    return (u[:, None] >= cdf).sum(axis=-1)


@torch.no_grad()
def decide(model: PolicyNet, Z, S, mode: str = "sample", rngs=None, record: list | None = None):
    """Actions and action distributions for one time step of N robots.

    ``Z``: (N, 3, W, H), ``S``: (N, N). Returns ``(actions (N,), probs (N, 5))``.
    """
    was_training = model.training
    model.eval()
    try:
        Zt = torch.as_tensor(np.asarray(Z), dtype=DTYPE)
        St = torch.as_tensor(np.asarray(S), dtype=DTYPE)
        logits = model(Zt, St, record=record)
    finally:
        model.train(was_training)
    probs = action_probabilities(logits)
    return choose_actions(probs, mode, rngs), probs
