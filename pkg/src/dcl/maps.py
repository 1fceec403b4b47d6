"""Soft and hard label map utilities.

A soft label map is a (num_classes, height, width) tensor of per-pixel
probabilities summing to one over the channel axis; a hard label map is an
integer (height, width) tensor of category indices.  Batched variants carry
a leading batch axis.
"""

from __future__ import annotations

import torch
import torch.nn.functional as F

LOG_EPS = 1e-8


class ShapeMismatch(ValueError):
    pass


def check_soft_map(probs: torch.Tensor, tol: float = 1e-5) -> None:
    """Raise if ``probs`` violates the soft-label-map invariants."""
    if probs.dim() not in (3, 4):
        raise ShapeMismatch(f"expected (C,H,W) or (B,C,H,W), got {tuple(probs.shape)}")
    if probs.min().item() < -tol:
        raise ValueError("negative probability entry")
    sums = probs.sum(dim=-3)
    err = (sums - 1.0).abs().max().item()
    if err > tol:
        raise ValueError(f"per-pixel channel sums deviate from 1 by {err:.2e}")


def resample_soft_map(probs: torch.Tensor, size: tuple[int, int]) -> torch.Tensor:
    """Bilinearly resample probabilities to ``size`` and renormalize per pixel.

    Accepts (C,H,W) or (B,C,H,W); differentiable.
    """
    squeeze = probs.dim() == 3
    x = probs.unsqueeze(0) if squeeze else probs
    if x.shape[-2:] != tuple(size):
        x = F.interpolate(x, size=size, mode="bilinear", align_corners=False)
        x = x.clamp_min(0.0)
        x = x / x.sum(dim=1, keepdim=True).clamp_min(LOG_EPS)
    return x.squeeze(0) if squeeze else x


def clamped_log(probs: torch.Tensor) -> torch.Tensor:
    """log of epsilon-clamped probabilities; safe at 0."""
    return torch.log(probs.clamp_min(LOG_EPS))


def uniform_map(num_classes: int, size: tuple[int, int], **kw) -> torch.Tensor:
    return torch.full((num_classes, *size), 1.0 / num_classes, **kw)
