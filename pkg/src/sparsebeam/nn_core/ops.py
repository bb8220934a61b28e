"""Differentiable building blocks used by the DiCE network.

All ops take and return ``torch.Tensor``; reverse-mode gradients come from
torch's autograd tape.  Interpolation and set-max are implemented here so
their boundary and tie-breaking behaviour is fixed independently of torch
defaults.
"""

from __future__ import annotations

import itertools
from typing import Sequence

import torch
import torch.nn.functional as F

from ..errors import EmptySet, ShapeMismatch


def convolution(input: torch.Tensor, weight: torch.Tensor, bias: torch.Tensor | None,
                dims: int, stride: int = 1, pad: int = 0) -> torch.Tensor:
    """Zero-padded cross-correlation over ``(B, C, *spatial)`` inputs."""
    if dims not in (2, 3):
        raise ShapeMismatch(f"dims must be 2 or 3, got {dims}")
    if input.dim() != dims + 2 or weight.dim() != dims + 2:
        raise ShapeMismatch(f"expected {dims + 2}-D input and weight")
    if input.shape[1] != weight.shape[1]:
        raise ShapeMismatch(f"input has {input.shape[1]} channels, kernel expects {weight.shape[1]}")
    if any(k % 2 == 0 for k in weight.shape[2:]):
        raise ShapeMismatch("kernel sizes must be odd")
    if bias is not None and bias.shape != (weight.shape[0],):
        raise ShapeMismatch("bias must have one entry per output channel")
    conv = F.conv2d if dims == 2 else F.conv3d
    return conv(input, weight, bias, stride=stride, padding=pad)


def linear_map(input: torch.Tensor, weight: torch.Tensor, bias: torch.Tensor | None) -> torch.Tensor:
    """Affine map over the last axis: ``out_j = sum_i in_i * W[j, i] + b_j``."""
    if weight.dim() != 2 or input.shape[-1] != weight.shape[1]:
        raise ShapeMismatch(f"cannot map last dim {input.shape[-1]} with weight {tuple(weight.shape)}")
    if bias is not None and bias.shape != (weight.shape[0],):
        raise ShapeMismatch("bias must have one entry per output feature")
    return F.linear(input, weight, bias)


def relu(input: torch.Tensor) -> torch.Tensor:
    return torch.relu(input)


def group_normalize(input: torch.Tensor, groups: int, gain: torch.Tensor | None = None,
                    bias: torch.Tensor | None = None, eps: float = 1e-5) -> torch.Tensor:
    if input.dim() < 2 or input.shape[1] % groups:
        raise ShapeMismatch(f"{input.shape[1] if input.dim() > 1 else '?'} channels "
                            f"not divisible into {groups} groups")
    return F.group_norm(input, groups, gain, bias, eps)


def _corner_table(coords: torch.Tensor, sizes: Sequence[int]):
    """Flat indices and weights for every k-linear corner; invalid corners weigh 0."""
    base = torch.floor(coords)
    frac = coords - base
    base = base.long()
    strides = [1] * len(sizes)
    for k in range(len(sizes) - 2, -1, -1):
        strides[k] = strides[k + 1] * sizes[k + 1]
    idx_list, w_list = [], []
    for bits in itertools.product((0, 1), repeat=len(sizes)):
        w = torch.ones_like(frac[..., 0])
        flat = torch.zeros_like(base[..., 0])
        valid = torch.ones_like(w, dtype=torch.bool)
        for k, b in enumerate(bits):
            i = base[..., k] + b
            valid &= (i >= 0) & (i < sizes[k])
            w = w * (frac[..., k] if b else 1.0 - frac[..., k])
            flat = flat + i.clamp(0, sizes[k] - 1) * strides[k]
        idx_list.append(flat)
        w_list.append(torch.where(valid, w, torch.zeros_like(w)))
    return torch.stack(idx_list), torch.stack(w_list)


def grid_sample(grid: torch.Tensor, coords: torch.Tensor) -> torch.Tensor:
    """k-linear interpolation with zero padding.

    ``grid`` is ``(C, *spatial)`` or batched ``(B, C, *spatial)``; ``coords``
    is ``(P, k)`` or ``(B, P, k)`` in continuous index units, ``coords[..., j]``
    addressing spatial axis ``j``.  Returns ``(P, C)`` or ``(B, P, C)``.
    Gradients flow to ``grid`` only.
    """
    unbatched = coords.dim() == 2
    if unbatched:
        grid, coords = grid.unsqueeze(0), coords.unsqueeze(0)
    dims = coords.shape[-1]
    if grid.dim() != dims + 2 or grid.shape[0] != coords.shape[0]:
        raise ShapeMismatch(f"grid {tuple(grid.shape)} incompatible with coords {tuple(coords.shape)}")
    B, C = grid.shape[:2]
    with torch.no_grad():
        idx, w = _corner_table(coords.detach().to(torch.float64), grid.shape[2:])
    flat = grid.reshape(B, C, -1)
    out = None
    for c in range(idx.shape[0]):
        gathered = torch.gather(flat, 2, idx[c].unsqueeze(1).expand(B, C, -1))
        term = gathered * w[c].to(grid.dtype).unsqueeze(1)
        out = term if out is None else out + term
    out = out.transpose(1, 2)
    return out[0] if unbatched else out


def max_reduce_over_set(features: Sequence[torch.Tensor] | torch.Tensor) -> torch.Tensor:
    """Elementwise maximum over a set; the gradient goes to the first maximal member."""
    if isinstance(features, torch.Tensor):
        members = list(features.unbind(0))
    else:
        members = list(features)
    if not members:
        raise EmptySet("max over an empty set")
    best = members[0]
    for f in members[1:]:
        if f.shape != best.shape:
            raise ShapeMismatch("all members must share a shape")
        best = torch.where(f > best, f, best)
    return best
