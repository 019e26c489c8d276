"""Central finite-difference gradient checking."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
import torch


@dataclass
class GradCheckResult:
    max_rel_err: float
    n_checked: int
    worst: tuple | None = None  # (input index, flat index, analytic, numeric)

    def passed(self, tol: float = 1e-4) -> bool:
        return self.max_rel_err < tol


def rel_err(analytic: float, numeric: float, floor: float = 1e-7) -> float:
    """|a - n| / max(|a|, |n|, floor); the floor keeps vanishing gradients from dividing by ~0."""
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor)


def finite_difference_check(
    fn: Callable[[], torch.Tensor],
    inputs: Sequence[torch.Tensor],
    h: float = 1e-5,
    max_per_input: int | None = None,
    rng: np.random.Generator | None = None,
    floor: float = 1e-7,
    adaptive: bool = False,
) -> GradCheckResult:
    """Compare autograd gradients of scalar ``fn()`` with central differences.

    ``inputs`` are perturbed in place. With ``max_per_input`` a random subset of
    entries is checked per input. ``adaptive`` is for piecewise-smooth functions
    (ReLU, max-pool): see :func:`_adaptive_difference`.
    """
    rng = rng or np.random.default_rng(0)
    for x in inputs:
        x.grad = None
    out = fn()
    grads = torch.autograd.grad(out, list(inputs), allow_unused=True)
    worst_err, worst, count = 0.0, None, 0
    with torch.no_grad():
        for k, (x, g) in enumerate(zip(inputs, grads)):
            flat = x.view(-1)
            gflat = torch.zeros(flat.numel(), dtype=x.dtype) if g is None else g.reshape(-1)
            idx = np.arange(flat.numel())
            if max_per_input is not None and flat.numel() > max_per_input:
                idx = np.sort(rng.choice(flat.numel(), size=max_per_input, replace=False))
            for i in idx:
                orig = flat[i].item()
                if adaptive:
                    num = _adaptive_difference(fn, flat, int(i), orig, h)
                else:
                    num = _central(fn, flat, int(i), orig, h)
                ana = gflat[i].item()
                err = rel_err(ana, num, floor)
                count += 1
                if err > worst_err or worst is None:
                    worst_err, worst = err, (k, int(i), ana, num)
    return GradCheckResult(worst_err, count, worst)


def _central(fn, flat: torch.Tensor, i: int, orig: float, h: float) -> float:
    flat[i] = orig + h
    fp = fn().item()
    flat[i] = orig - h
    fm = fn().item()
    flat[i] = orig
    return (fp - fm) / (2 * h)


def _adaptive_difference(fn, flat: torch.Tensor, i: int, orig: float, h: float,
                         h_min: float = 1e-8, agree: float = 1e-6) -> float:
    """Derivative estimate for a piecewise-smooth ``fn``, stepping around kinks.

    Three second-order stencils are built at scale ``h``: central, one-sided to
    the left and one-sided to the right, each at steps ``h, h/2, h/4`` and
    Richardson-extrapolated over ``(h, h/2)`` and ``(h/2, h/4)``. A stencil is
    consistent when both extrapolations agree to ``agree`` (relative, plus the
    rounding noise ``eps |f| / h``) and its raw estimates agree loosely; a kink
    inside it breaks this. Decision at each scale:

    * all three consistent and equal: smooth around ``x``, use the central one;
    * exactly one one-sided stencil consistent: a kink lies on the other side,
      use it;
    * otherwise (a kink right next to ``x``, or on both sides) cut ``h`` tenfold.
    """
    f0 = fn().item()
    eps = float(np.finfo(np.float64).eps)
    cache: dict[float, float] = {0.0: f0}

    def at(t: float) -> float:
        if t not in cache:
            flat[i] = orig + t
            cache[t] = fn().item()
            flat[i] = orig
        return cache[t]

    def central(st: float) -> float:
        return (at(st) - at(-st)) / (2 * st)

    def one_sided(st: float) -> float:
        # signed step: (-3 f(x) + 4 f(x + st) - f(x + 2 st)) / (2 st)
        return (-3 * f0 + 4 * at(st) - at(2 * st)) / (2 * st)

    def close(a: float, b: float, rel: float, noise: float) -> bool:
        return abs(a - b) <= rel * max(abs(a), abs(b)) + noise

    fallback = None
    while True:
        noise = 16 * eps * max(abs(f0), 1.0) / h
        est = []
        for stencil, sign in ((central, 1.0), (one_sided, -1.0), (one_sided, 1.0)):
            d1, d2, d4 = (stencil(sign * h / k) for k in (1, 2, 4))
            r1, r2 = (4 * d2 - d1) / 3, (4 * d4 - d2) / 3
            ok = close(r1, r2, agree, noise) and close(d2, d4, 1e-3, noise)
            est.append((r1, ok))
        (c, c_ok), (lft, l_ok), (rgt, r_ok) = est
        if fallback is None:
            fallback = c
        if c_ok and l_ok and r_ok and close(c, lft, agree, 4 * noise) and close(c, rgt, agree, 4 * noise):
            return c
        if l_ok != r_ok:
            return lft if l_ok else rgt
        if h / 10 < h_min:
            return fallback
        h /= 10
        cache = {0.0: f0}
