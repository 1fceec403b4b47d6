"""Image generator with instance-sensitive, layout-aware feature normalization.

Each ResBlock doubles the resolution and normalizes features in two steps:
batch standardization, then a spatial affine recalibration whose per-pixel
(beta, gamma) are assembled from per-instance channel-wise parameters,
pasted into each instance's box and weighted by the current label-map
probability of the instance's category.  A per-block ToMask head refines
the label map from intermediate features, blended with the initial map
through a learnable skip weight.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import torch
import torch.nn.functional as F
from torch import nn

from .layout import Lattice, Layout, raster_bounds
from .maps import clamped_log, resample_soft_map

ASSEMBLE_EPS = 1e-8


class DegenerateBatch(ValueError):
    pass


class ConfigMismatch(ValueError):
    pass


class InstanceAffine(NamedTuple):
    beta: torch.Tensor  # (m + 1, C)
    gamma: torch.Tensor  # (m + 1, C)


class SpatialAffine(NamedTuple):
    beta: torch.Tensor  # (C, H, W)
    gamma: torch.Tensor  # (C, H, W)


@dataclass(frozen=True)
class GeneratorConfig:
    num_classes: int
    base_resolution: int = 4
    ch: int = 8
    n_blocks: int = 4
    d_z: int = 64
    d_e: int = 64
    d_y: int = 64

    def __post_init__(self):
        if self.n_blocks < 1:
            raise ValueError("n_blocks must be >= 1")

    @property
    def resolution(self) -> int:
        return self.base_resolution * 2**self.n_blocks

    @property
    def style_dim(self) -> int:
        return self.d_e + self.d_y

    @property
    def widths(self) -> list[int]:
        return [max(1, 16 * self.ch // 2**k) for k in range(self.n_blocks + 1)]


class BatchStandardize(nn.Module):
    """BatchNorm-style standardization without a learned affine.

    Channel statistics are pooled over batch and spatial dims; running
    statistics are tracked for evaluation mode.
    """

    def __init__(self, channels: int, eps: float = 1e-5, momentum: float = 0.1):
        super().__init__()
        self.eps = eps
        self.momentum = momentum
        self.register_buffer("running_mean", torch.zeros(channels))
        self.register_buffer("running_var", torch.ones(channels))

    def forward(self, f: torch.Tensor) -> torch.Tensor:
        if self.training:
            n = f.shape[0] * f.shape[2] * f.shape[3]
            if n < 2:
                raise DegenerateBatch("need batch*spatial >= 2 for batch statistics")
            mean = f.mean(dim=(0, 2, 3))
            var = f.var(dim=(0, 2, 3), unbiased=False)
            with torch.no_grad():
                self.running_mean += self.momentum * (mean - self.running_mean)
                self.running_var += self.momentum * (
                    var * n / (n - 1) - self.running_var
                )
        else:
            mean, var = self.running_mean, self.running_var
        return (f - mean[:, None, None]) / torch.sqrt(var[:, None, None] + self.eps)


class StyleProjection(nn.Module):
    """Linear map from instance style rows to channel-wise (beta, gamma).

    Zero-initialized so an untrained projection yields the identity
    recalibration (beta 0, gamma 1).
    """

    def __init__(self, style_dim: int, channels: int):
        super().__init__()
        self.proj = nn.Linear(style_dim, 2 * channels, bias=False)
        nn.init.zeros_(self.proj.weight)

    def forward(self, style: torch.Tensor) -> InstanceAffine:
        beta, gamma_raw = self.proj(style).chunk(2, dim=-1)
        return InstanceAffine(beta, 1.0 + gamma_raw)


def assemble_spatial_affine(
    aff: InstanceAffine, h: torch.Tensor, layout: Layout
) -> SpatialAffine:
    """Per-pixel affine parameters as the probability-weighted average of the
    per-instance parameters over the instances whose boxes cover the pixel.

    ``h`` is the (num_classes, H, W) label map at the feature resolution;
    instance i's weight at a pixel is h[category_i] inside its box, 0 outside.
    """
    d_l, height, width = h.shape
    lattice = Lattice(height, width)
    weights = []
    for b in layout.boxes:
        w_i = torch.zeros(height, width, dtype=h.dtype)
        r0, r1, c0, c1 = raster_bounds(b.box, lattice, allow_empty=True)
        if r0 < r1 and c0 < c1:
            w_i[r0:r1, c0:c1] = h[b.category, r0:r1, c0:c1]
        weights.append(w_i)
    w = torch.stack(weights)  # (m+1, H, W)
    den = w.sum(dim=0).clamp_min(ASSEMBLE_EPS)
    beta = torch.einsum("mc,mhw->chw", aff.beta, w) / den
    gamma = torch.einsum("mc,mhw->chw", aff.gamma, w) / den
    return SpatialAffine(beta, gamma)


def recalibrate(f_std: torch.Tensor, aff: SpatialAffine) -> torch.Tensor:
    """Elementwise gamma * f + beta with spatially varying parameters."""
    return aff.gamma * f_std + aff.beta


class LayoutContext:
    """Batched, padded view of per-sample layouts and style matrices.

    Caches box raster masks per feature resolution so the spatial affine
    assembly inside every normalization site is a couple of batched ops.
    """

    def __init__(self, layouts: list[Layout], styles: list[torch.Tensor]):
        self.layouts = layouts
        batch = len(layouts)
        m_max = max(len(lay.boxes) for lay in layouts)
        style_dim = styles[0].shape[1]
        dtype = styles[0].dtype
        self.styles = torch.zeros(batch, m_max, style_dim, dtype=dtype)
        self.categories = torch.zeros(batch, m_max, dtype=torch.long)
        for b, (lay, st) in enumerate(zip(layouts, styles)):
            self.styles[b, : st.shape[0]] = st
            self.categories[b, : len(lay.boxes)] = torch.tensor(
                [box.category for box in lay.boxes]
            )
        self.dtype = dtype
        self._rasters: dict[tuple[int, int], torch.Tensor] = {}

    def rasters(self, size: tuple[int, int]) -> torch.Tensor:
        """(B, M, H, W) box indicator masks at the given resolution."""
        key = (int(size[0]), int(size[1]))
        if key not in self._rasters:
            height, width = key
            masks = torch.zeros(
                len(self.layouts), self.categories.shape[1], height, width,
                dtype=self.dtype,
            )
            lattice = Lattice(height, width)
            for b, lay in enumerate(self.layouts):
                for i, box in enumerate(lay.boxes):
                    r0, r1, c0, c1 = raster_bounds(box.box, lattice, allow_empty=True)
                    if r0 < r1 and c0 < c1:
                        masks[b, i, r0:r1, c0:c1] = 1.0
            self._rasters[key] = masks
        return self._rasters[key]


class IslaNorm(nn.Module):
    """standardize -> instance affine -> spatial assembly -> recalibrate."""

    def __init__(self, channels: int, style_dim: int):
        super().__init__()
        self.standardize = BatchStandardize(channels)
        self.style_proj = StyleProjection(style_dim, channels)

    def forward(
        self, f: torch.Tensor, h: torch.Tensor, ctx: LayoutContext
    ) -> torch.Tensor:
        f_std = self.standardize(f)
        beta_rows, gamma_rows = self.style_proj(ctx.styles)  # (B, M, C)
        b_idx = ctx.categories[:, :, None, None].expand(
            -1, -1, f.shape[2], f.shape[3]
        )
        h_sel = torch.gather(h, 1, b_idx)  # (B, M, H, W)
        w = ctx.rasters(f.shape[-2:]) * h_sel
        den = w.sum(dim=1, keepdim=True).clamp_min(ASSEMBLE_EPS)
        beta = torch.einsum("bmc,bmhw->bchw", beta_rows, w) / den
        gamma = torch.einsum("bmc,bmhw->bchw", gamma_rows, w) / den
        return gamma * f_std + beta


class ToMask(nn.Module):
    """1x1 projection refining the label map from block features, blended
    with the initial map via a learnable skip weight on log-probabilities."""

    def __init__(self, channels: int, num_classes: int):
        super().__init__()
        self.proj = nn.Conv2d(channels + num_classes, num_classes, kernel_size=1)
        self.alpha = nn.Parameter(torch.zeros(()))

    def forward(
        self, f: torch.Tensor, h: torch.Tensor, h_init: torch.Tensor
    ) -> torch.Tensor:
        size = f.shape[-2:]
        h_here = resample_soft_map(h, size)
        init_here = resample_soft_map(h_init, size)
        logits = self.proj(torch.cat([f, h_here], dim=1))
        logits = logits + self.alpha * clamped_log(init_here)
        return torch.softmax(logits, dim=1)


class GenResBlock(nn.Module):
    """Upsampling residual block with two ISLA normalization sites."""

    def __init__(self, in_ch: int, out_ch: int, num_classes: int, style_dim: int):
        super().__init__()
        self.tomask = ToMask(in_ch, num_classes)
        self.norm1 = IslaNorm(in_ch, style_dim)
        self.norm2 = IslaNorm(out_ch, style_dim)
        self.conv1 = nn.Conv2d(in_ch, out_ch, 3, padding=1)
        self.conv2 = nn.Conv2d(out_ch, out_ch, 3, padding=1)
        self.conv_sc = nn.Conv2d(in_ch, out_ch, 1)

    def forward(self, f, h, h_init, ctx):
        h_new = self.tomask(f, h, h_init)
        t = self.norm1(f, h_new, ctx)
        t = F.relu(t)
        t = F.interpolate(t, scale_factor=2, mode="nearest")
        t = self.conv1(t)
        h_up = resample_soft_map(h_new, t.shape[-2:])
        t = self.norm2(t, h_up, ctx)
        t = F.relu(t)
        t = self.conv2(t)
        shortcut = self.conv_sc(F.interpolate(f, scale_factor=2, mode="nearest"))
        return t + shortcut, h_new


class Generator(nn.Module):
    """Synthesize images from (image latent, label map, instance styles)."""

    def __init__(self, config: GeneratorConfig):
        super().__init__()
        self.config = config
        widths = config.widths
        base = config.base_resolution
        self.stem = nn.Linear(config.d_z, widths[0] * base * base)
        self.blocks = nn.ModuleList(
            GenResBlock(widths[k], widths[k + 1], config.num_classes, config.style_dim)
            for k in range(config.n_blocks)
        )
        self.out_norm = BatchStandardize(widths[-1])
        self.out_conv = nn.Conv2d(widths[-1], 3, 3, padding=1)

    def forward(
        self,
        z: torch.Tensor,
        h_init: torch.Tensor,
        styles: list[torch.Tensor],
        layouts: list[Layout],
    ) -> tuple[torch.Tensor, torch.Tensor]:
        """Returns the synthesized batch and the last refined label map.

        ``h_init`` may be at any square resolution (it is resampled per
        block); its channel count must match the configured category count.
        """
        cfg = self.config
        if h_init.dim() != 4 or h_init.shape[1] != cfg.num_classes:
            raise ConfigMismatch(
                f"label map has {tuple(h_init.shape)} for {cfg.num_classes} classes"
            )
        if len(layouts) != z.shape[0] or h_init.shape[0] != z.shape[0]:
            raise ConfigMismatch("batch size disagreement between inputs")
        for lay in layouts:
            if (lay.lattice.height, lay.lattice.width) != (cfg.resolution,) * 2:
                raise ConfigMismatch(
                    f"layout lattice {lay.lattice} != output {cfg.resolution}"
                )
        ctx = LayoutContext(layouts, styles)
        base = cfg.base_resolution
        f = self.stem(z).view(z.shape[0], -1, base, base)
        h = h_init
        for block in self.blocks:
            f, h = block(f, h, h_init, ctx)
        x = torch.tanh(self.out_conv(F.relu(self.out_norm(f))))
        return x, h
