"""Differentiable operations. Every op validates shapes and reports both operands."""
from __future__ import annotations

from typing import Sequence

import torch
import torch.nn.functional as F

DTYPE = torch.float64


class ShapeError(ValueError):
    pass


class BackwardError(RuntimeError):
    pass


def _shape_fail(op: str, a: torch.Tensor, b: torch.Tensor | Sequence[int]) -> ShapeError:
    sb = tuple(b.shape) if isinstance(b, torch.Tensor) else tuple(b)
    return ShapeError(f"{op}: incompatible shapes {tuple(a.shape)} and {sb}")


def tensor(data, requires_grad: bool = False) -> torch.Tensor:
    return torch.tensor(data, dtype=DTYPE, requires_grad=requires_grad)


def _broadcastable(a: torch.Tensor, b: torch.Tensor) -> bool:
    try:
        torch.broadcast_shapes(a.shape, b.shape)
    except RuntimeError:
        return False
    return True


def matmul(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    if a.ndim < 1 or b.ndim < 1 or a.shape[-1] != b.shape[-2 if b.ndim > 1 else 0]:
        raise _shape_fail("matmul", a, b)
    if a.ndim > 2 and b.ndim > 2:
        try:
            torch.broadcast_shapes(a.shape[:-2], b.shape[:-2])
        except RuntimeError:
            raise _shape_fail("matmul", a, b) from None
    return torch.matmul(a, b)


def add(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    if not _broadcastable(a, b):
        raise _shape_fail("add", a, b)
    return a + b


def mul(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    if not _broadcastable(a, b):
        raise _shape_fail("mul", a, b)
    return a * b


def relu(x: torch.Tensor) -> torch.Tensor:
    return torch.relu(x)


def leaky_relu(x: torch.Tensor, slope: float = 0.2) -> torch.Tensor:
    return F.leaky_relu(x, slope)


def conv2d(x: torch.Tensor, weight: torch.Tensor, bias: torch.Tensor | None = None,
           stride: int = 1, padding: int = 0) -> torch.Tensor:
    if x.ndim != 4 or weight.ndim != 4 or x.shape[1] != weight.shape[1]:
        raise _shape_fail("conv2d", x, weight)
    if bias is not None and bias.shape != (weight.shape[0],):
        raise _shape_fail("conv2d(bias)", weight, bias)
    return F.conv2d(x, weight, bias, stride=stride, padding=padding)


def max_pool(x: torch.Tensor, kernel: int = 2) -> torch.Tensor:
    if x.ndim != 4:
        raise ShapeError(f"max_pool: expected NCHW input, got {tuple(x.shape)}")
    return F.max_pool2d(x, kernel)


def group_norm(x: torch.Tensor, groups: int, weight: torch.Tensor, bias: torch.Tensor,
               eps: float = 1e-5) -> torch.Tensor:
    """Per-sample normalisation over channel groups; independent of the batch."""
    if x.ndim < 2 or weight.shape != (x.shape[1],) or x.shape[1] % groups:
        raise _shape_fail("group_norm", x, weight)
    return F.group_norm(x, groups, weight, bias, eps)


def concat(tensors: Sequence[torch.Tensor], axis: int = -1) -> torch.Tensor:
    if not tensors:
        raise ShapeError("concat: empty input")
    ref = tensors[0]
    ax = axis % ref.ndim
    for t in tensors[1:]:
        if t.ndim != ref.ndim or any(t.shape[d] != ref.shape[d] for d in range(ref.ndim) if d != ax):
            raise _shape_fail("concat", ref, t)
    return torch.cat(list(tensors), dim=axis)


def masked_softmax(scores: torch.Tensor, mask: torch.Tensor, dim: int = -1) -> torch.Tensor:
    """Softmax over entries where ``mask`` is true; masked entries are 0.

    A row with no unmasked entry comes back as all zeros.
    """
    if scores.shape != mask.shape:
        raise _shape_fail("masked_softmax", scores, mask)
    mask = mask.bool()
    z = scores.masked_fill(~mask, torch.finfo(scores.dtype).min)
    z = z - z.amax(dim=dim, keepdim=True).detach()
    e = torch.exp(z) * mask
    total = e.sum(dim=dim, keepdim=True)
    return e / torch.where(total > 0, total, torch.ones_like(total))


def cross_entropy(logits: torch.Tensor, labels: torch.Tensor, reduction: str = "sum") -> torch.Tensor:
    """Negative log-likelihood of integer ``labels`` under ``softmax(logits)`` on the last axis."""
    if logits.shape[:-1] != labels.shape:
        raise _shape_fail("cross_entropy", logits, labels)
    nll = -torch.log_softmax(logits, dim=-1).gather(-1, labels.long().unsqueeze(-1)).squeeze(-1)
    if reduction == "sum":
        return nll.sum()
    if reduction == "mean":
        return nll.mean()
    if reduction == "none":
        return nll
    raise ValueError(f"unknown reduction {reduction!r}")


def backward(loss: torch.Tensor) -> None:
    """Accumulate gradients of a scalar loss into every leaf that requires grad.

    Each loss tensor may be back-propagated once; zero the gradients and build a
    new graph before calling again.
    """
    if loss.numel() != 1:
        raise ShapeError(f"backward: loss must be scalar, got shape {tuple(loss.shape)}")
    if getattr(loss, "_backward_done", False):
        raise BackwardError("backward already called on this loss; recompute the forward pass")
    loss._backward_done = True
    loss.backward()
