"""Central finite-difference verification of reverse-mode gradients."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np
import torch


def _projected(fn, inputs, weights):
    out = fn(*inputs)
    return (out.to(torch.float64) * weights).sum()


def finite_difference_check(fn: Callable[..., torch.Tensor], inputs: Sequence[torch.Tensor],
                            eps: float = 1e-3, seed: int = 0, max_coords: int | None = None,
                            wrt: Sequence[int] | None = None, grads=None) -> float:
    """Largest gradient discrepancy between autograd and central differences.

    The output is reduced to a scalar with a fixed random projection.  For
    each checked input the discrepancy is ``max|g_ad - g_fd|`` divided by the
    larger of the two gradients' max-norms.  ``grads`` overrides the
    reverse-mode gradients (used to test the checker itself).
    """
    gen = torch.Generator().manual_seed(seed)
    inputs = [x.detach().clone() for x in inputs]
    wrt = list(range(len(inputs))) if wrt is None else list(wrt)
    with torch.no_grad():
        probe = fn(*inputs)
    weights = torch.randn(probe.shape, generator=gen, dtype=torch.float64)

    leaves = [x.requires_grad_(i in wrt) for i, x in enumerate(inputs)]
    if grads is None:
        f = _projected(fn, leaves, weights)
        ad = torch.autograd.grad(f, [leaves[i] for i in wrt], allow_unused=True)
        ad = [torch.zeros_like(leaves[i]) if g is None else g for i, g in zip(wrt, ad)]
    else:
        ad = list(grads)

    rng = np.random.default_rng(seed)
    worst = 0.0
    for slot, i in enumerate(wrt):
        x = leaves[i]
        n = x.numel()
        coords = np.arange(n) if max_coords is None or n <= max_coords else \
            np.sort(rng.choice(n, size=max_coords, replace=False))
        g_ad = ad[slot].detach().reshape(-1).to(torch.float64)[coords].numpy()
        g_fd = np.empty(len(coords))
        flat = x.data.view(-1)
        with torch.no_grad():
            for j, c in enumerate(coords):
                orig = flat[c].item()
                flat[c] = orig + eps
                fp = _projected(fn, leaves, weights).item()
                flat[c] = orig - eps
                fm = _projected(fn, leaves, weights).item()
                flat[c] = orig
                g_fd[j] = (fp - fm) / (2.0 * eps)
        scale = max(np.abs(g_ad).max(initial=0.0), np.abs(g_fd).max(initial=0.0), 1e-30)
        worst = max(worst, float(np.abs(g_ad - g_fd).max(initial=0.0) / scale))
    return worst


def numerical_gradient(fn: Callable[[torch.Tensor], torch.Tensor], x: torch.Tensor,
                       eps: float = 1e-6) -> torch.Tensor:
    """Central-difference gradient of a scalar-valued ``fn`` at ``x``."""
    x = x.detach().clone().to(torch.float64)
    g = torch.empty_like(x)
    flat, gflat = x.view(-1), g.view(-1)
    for c in range(flat.numel()):
        orig = flat[c].item()
        flat[c] = orig + eps
        fp = float(fn(x))
        flat[c] = orig - eps
        fm = float(fn(x))
        flat[c] = orig
        gflat[c] = (fp - fm) / (2.0 * eps)
    return g
