"""Named parameter storage with freeze flags and a decoupled-weight-decay Adam step."""

from __future__ import annotations

import math
from typing import Iterable

import numpy as np
import torch


class ParameterStore:
    """Named parameters, their trainable flags and AdamW moment estimates."""

    def __init__(self, params: dict[str, torch.nn.Parameter]):
        self.params = dict(params)
        self.exp_avg = {k: torch.zeros_like(p) for k, p in self.params.items()}
        self.exp_avg_sq = {k: torch.zeros_like(p) for k, p in self.params.items()}
        self.step = 0

    @classmethod
    def from_module(cls, module: torch.nn.Module) -> "ParameterStore":
        return cls(dict(module.named_parameters()))

    def names(self) -> list[str]:
        return list(self.params)

    def is_trainable(self, name: str) -> bool:
        return self.params[name].requires_grad

    def set_trainable(self, prefixes: Iterable[str], flag: bool) -> None:
        prefixes = tuple(prefixes)
        for name, p in self.params.items():
            if name.startswith(prefixes):
                p.requires_grad_(flag)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def snapshot(self) -> dict[str, np.ndarray]:
        return {k: p.detach().cpu().numpy().copy() for k, p in self.params.items()}


@torch.no_grad()
def adamw_step(store: ParameterStore, lr: float = 1e-4, betas=(0.9, 0.999), eps: float = 1e-8,
               weight_decay: float = 0.01) -> ParameterStore:
    """One AdamW update of every trainable parameter (missing gradients count as zero)."""
    beta1, beta2 = betas
    store.step += 1
    bc1 = 1.0 - beta1 ** store.step
    bc2 = 1.0 - beta2 ** store.step
    for name, p in store.params.items():
        if not p.requires_grad:
            continue
        grad = p.grad if p.grad is not None else torch.zeros_like(p)
        m, v = store.exp_avg[name], store.exp_avg_sq[name]
        m.mul_(beta1).add_(grad, alpha=1.0 - beta1)
        v.mul_(beta2).addcmul_(grad, grad, value=1.0 - beta2)
        if weight_decay:
            p.mul_(1.0 - lr * weight_decay)
        denom = (v / bc2).sqrt_().add_(eps)
        p.addcdiv_(m, denom, value=-lr / bc1)
    return store
