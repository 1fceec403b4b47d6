"""Inference network: per-pixel soft label maps from images.

A light U-Net trained from scratch, deliberately free of feature
normalization so that the statistics gap between real and synthesized
images cannot be absorbed by normalization layers.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import nn

from .maps import ShapeMismatch


@dataclass(frozen=True)
class InferenceConfig:
    num_classes: int
    depth: int = 3
    base_channels: int = 32

    def __post_init__(self):
        if self.depth < 2:
            raise ValueError("depth must be >= 2")


def _double_conv(in_ch: int, out_ch: int) -> nn.Sequential:
    return nn.Sequential(
        nn.Conv2d(in_ch, out_ch, 3, padding=1),
        nn.ReLU(inplace=True),
        nn.Conv2d(out_ch, out_ch, 3, padding=1),
        nn.ReLU(inplace=True),
    )


class InferenceNet(nn.Module):
    def __init__(self, config: InferenceConfig):
        super().__init__()
        self.config = config
        chans = [config.base_channels * 2**k for k in range(config.depth)]
        self.encoders = nn.ModuleList()
        in_ch = 3
        for c in chans:
            self.encoders.append(_double_conv(in_ch, c))
            in_ch = c
        self.decoders = nn.ModuleList()
        for c_skip, c_in in zip(chans[-2::-1], chans[:0:-1]):
            self.decoders.append(_double_conv(c_in + c_skip, c_skip))
        self.head = nn.Conv2d(chans[0], config.num_classes, 1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        """(B, 3, H, W) image batch -> (B, num_classes, H, W) soft label maps."""
        if x.dim() != 4 or x.shape[1] != 3:
            raise ShapeMismatch(f"expected (B, 3, H, W), got {tuple(x.shape)}")
        skips = []
        for i, enc in enumerate(self.encoders):
            if i > 0:
                x = F.max_pool2d(x, 2)
            x = enc(x)
            skips.append(x)
        for dec, skip in zip(self.decoders, skips[-2::-1]):
            x = F.interpolate(x, scale_factor=2, mode="nearest")
            x = dec(torch.cat([x, skip], dim=1))
        return torch.softmax(self.head(x), dim=1)

    def infer(self, image: torch.Tensor) -> torch.Tensor:
        """Single-image convenience wrapper: (3, H, W) -> (C, H, W)."""
        if image.dim() != 3:
            raise ShapeMismatch(f"expected (3, H, W), got {tuple(image.shape)}")
        return self.forward(image.unsqueeze(0)).squeeze(0)


def hard_predict(probs: torch.Tensor) -> torch.Tensor:
    """Per-pixel argmax; ties break toward the smallest category index."""
    return probs.argmax(dim=-3)
