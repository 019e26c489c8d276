"""Adam with L2 weight decay and a cosine-annealed learning rate."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import torch


def cosine_lr(epoch: float, lr_max: float = 1e-3, lr_min: float = 1e-6, period: int = 300) -> float:
    e = min(max(epoch, 0), period)
    return lr_min + 0.5 * (lr_max - lr_min) * (1.0 + math.cos(math.pi * e / period))


@dataclass
class OptimizerState:
    step: int = 0
    exp_avg: dict[str, torch.Tensor] = field(default_factory=dict)
    exp_avg_sq: dict[str, torch.Tensor] = field(default_factory=dict)

    def to_arrays(self) -> dict[str, np.ndarray]:
        out = {}
        for name, t in self.exp_avg.items():
            out[f"adam.m.{name}"] = t.numpy().copy()
        for name, t in self.exp_avg_sq.items():
            out[f"adam.v.{name}"] = t.numpy().copy()
        return out

    @classmethod
    def from_arrays(cls, step: int, arrays: dict[str, np.ndarray]) -> "OptimizerState":
        st = cls(step)
        for key, arr in arrays.items():
            if key.startswith("adam.m."):
                st.exp_avg[key[7:]] = torch.from_numpy(np.array(arr))
            elif key.startswith("adam.v."):
                st.exp_avg_sq[key[7:]] = torch.from_numpy(np.array(arr))
        return st


class Adam:
    """Adam where weight decay is added to the gradient (L2 penalty, not decoupled)."""

    def __init__(self, named_params, betas=(0.9, 0.999), eps: float = 1e-8,
                 weight_decay: float = 1e-5, state: OptimizerState | None = None):
        self.params = dict(named_params)
        self.betas = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.state = state or OptimizerState()
        for name, p in self.params.items():
            self.state.exp_avg.setdefault(name, torch.zeros_like(p, requires_grad=False))
            self.state.exp_avg_sq.setdefault(name, torch.zeros_like(p, requires_grad=False))
            if self.state.exp_avg[name].shape != p.shape:
                raise ValueError(f"moment shape mismatch for {name}")

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    @torch.no_grad()
    def step(self, lr: float) -> None:
        b1, b2 = self.betas
        self.state.step += 1
        k = self.state.step
        c1 = 1 - b1 ** k
        c2 = 1 - b2 ** k
        for name, p in self.params.items():
            if p.grad is None:
                continue
            g = p.grad
            if self.weight_decay:
                g = g + self.weight_decay * p
            m = self.state.exp_avg[name]
            v = self.state.exp_avg_sq[name]
            m.mul_(b1).add_(g, alpha=1 - b1)
            v.mul_(b2).addcmul_(g, g, value=1 - b2)
            denom = (v.sqrt() / math.sqrt(c2)).add_(self.eps)
            p.addcdiv_(m, denom, value=-lr / c1)
