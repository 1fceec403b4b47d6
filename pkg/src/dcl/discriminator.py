"""Adversary: one image realness score plus one score per layout object.

A shared spectral-normalized ResNet backbone feeds an image-level head
(global pooling + linear) and an object-level head that extracts RoI
features for each foreground box by bilinear sampling and scores them with
a projection-style class conditioning: score = w . phi + embed(label) . phi.
The implicit background instance is not scored.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import nn
from torch.nn.utils import spectral_norm

from .layout import Layout
from .maps import ShapeMismatch


@dataclass
class DiscriminatorScores:
    p_img: torch.Tensor  # (B,)
    p_obj: list[torch.Tensor]  # per sample: (m_b,), layout box order


@dataclass(frozen=True)
class DiscriminatorConfig:
    num_classes: int
    ch: int = 8
    roi_size: int = 8


def _sn_conv(in_ch, out_ch, ksize, padding=0):
    return spectral_norm(nn.Conv2d(in_ch, out_ch, ksize, padding=padding))


class DownBlock(nn.Module):
    def __init__(self, in_ch: int, out_ch: int, downsample: bool = True):
        super().__init__()
        self.downsample = downsample
        self.conv1 = _sn_conv(in_ch, out_ch, 3, padding=1)
        self.conv2 = _sn_conv(out_ch, out_ch, 3, padding=1)
        self.conv_sc = _sn_conv(in_ch, out_ch, 1)

    def forward(self, x):
        t = self.conv1(F.relu(x))
        t = self.conv2(F.relu(t))
        s = self.conv_sc(x)
        if self.downsample:
            t = F.avg_pool2d(t, 2)
            s = F.avg_pool2d(s, 2)
        return t + s


def roi_extract(
    features: torch.Tensor, box: tuple[float, float, float, float], out_size: int = 8
) -> torch.Tensor:
    """Bilinear-sample a (C, out, out) grid of points spread uniformly inside
    the box on the feature lattice.

    Sampling points sit at the centers of an out_size x out_size subdivision
    of the box; coordinates are clamped at the feature border, so sub-pixel
    boxes degrade to (near-)nearest-cell lookups instead of failing.
    """
    if features.dim() != 3:
        raise ShapeMismatch(f"expected (C, H, W), got {tuple(features.shape)}")
    boxes = torch.tensor([box], dtype=features.dtype)
    idx = torch.zeros(1, dtype=torch.long)
    return _roi_sample(features.unsqueeze(0), boxes, idx, out_size)[0]


def _roi_sample(
    features: torch.Tensor,
    boxes: torch.Tensor,
    batch_idx: torch.Tensor,
    out_size: int,
) -> torch.Tensor:
    """Batched RoI sampling: (N, 4) normalized boxes -> (N, C, out, out)."""
    steps = (torch.arange(out_size, dtype=features.dtype) + 0.5) / out_size
    x0, y0, x1, y1 = boxes.unbind(dim=1)
    xs = x0[:, None] + steps[None, :] * (x1 - x0)[:, None]  # (N, out)
    ys = y0[:, None] + steps[None, :] * (y1 - y0)[:, None]
    grid = torch.stack(
        [
            xs[:, None, :].expand(-1, out_size, -1),
            ys[:, :, None].expand(-1, -1, out_size),
        ],
        dim=-1,
    )
    return F.grid_sample(
        features[batch_idx],
        grid * 2.0 - 1.0,
        mode="bilinear",
        padding_mode="border",
        align_corners=False,
    )


class Discriminator(nn.Module):
    def __init__(self, config: DiscriminatorConfig):
        super().__init__()
        self.config = config
        ch = config.ch
        self.block1 = DownBlock(3, 2 * ch)  # stride 2
        self.block2 = DownBlock(2 * ch, 4 * ch)  # stride 4: RoI feature level
        self.block3 = DownBlock(4 * ch, 8 * ch)  # stride 8
        self.block4 = DownBlock(8 * ch, 16 * ch)  # stride 16
        # score projections stay unnormalized so zeroed heads give exact zeros
        self.image_head = nn.Linear(16 * ch, 1)
        self.roi_trunk = DownBlock(4 * ch, 8 * ch)
        self.object_head = nn.Linear(8 * ch, 1, bias=False)
        self.class_embed = nn.Embedding(config.num_classes, 8 * ch)

    def forward(
        self, images: torch.Tensor, layouts: list[Layout]
    ) -> DiscriminatorScores:
        if images.dim() != 4 or images.shape[0] != len(layouts):
            raise ShapeMismatch(
                f"images {tuple(images.shape)} vs {len(layouts)} layouts"
            )
        f = self.block1(images)
        f_roi = self.block2(f)
        f = self.block4(self.block3(f_roi))
        p_img = self.image_head(F.relu(f).sum(dim=(2, 3))).squeeze(1)

        boxes, batch_idx, cats, counts = [], [], [], []
        for b, lay in enumerate(layouts):
            fg = lay.foreground_boxes
            counts.append(len(fg))
            for box in fg:
                boxes.append(box.box)
                batch_idx.append(b)
                cats.append(box.category)
        if boxes:
            rois = _roi_sample(
                f_roi,
                torch.tensor(boxes, dtype=images.dtype),
                torch.tensor(batch_idx, dtype=torch.long),
                self.config.roi_size,
            )
            phi = F.relu(self.roi_trunk(rois)).sum(dim=(2, 3))
            scores = self.object_head(phi).squeeze(1)
            scores = scores + (self.class_embed(torch.tensor(cats)) * phi).sum(dim=1)
        else:
            scores = images.new_zeros(0)
        p_obj, at = [], 0
        for n in counts:
            p_obj.append(scores[at : at + n])
            at += n
        return DiscriminatorScores(p_img, p_obj)

    def score(self, image: torch.Tensor, layout: Layout) -> DiscriminatorScores:
        """Single-sample convenience wrapper."""
        return self.forward(image.unsqueeze(0), [layout])
