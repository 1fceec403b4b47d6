"""Mask generator: layout -> embedded instance styles -> initial soft label map.

Each instance contributes a decoded logit patch pasted into its box on the
mask lattice; channels belonging to no instance at a pixel are filled with a
large negative constant, and a per-pixel softmax turns the assembled logits
into the initial label map.  Logits add where boxes of the same category
overlap; the softmax resolves competition between categories.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import nn

from .layout import Lattice, Layout, raster_bounds

NEG_FILL = -10.0  # ~4.5e-5 softmax leak per non-contributing channel


@dataclass
class LatentBundle:
    """Image style code plus one style row per instance (background last)."""

    z_x: torch.Tensor  # (d_z,)
    z_objs: torch.Tensor  # (m + 1, d_y)


def sample_latents(
    layout: Layout,
    seed: int,
    d_z: int = 64,
    d_y: int = 64,
    dtype: torch.dtype = torch.float32,
) -> LatentBundle:
    """Standard-normal latents, deterministic under ``seed``."""
    g = torch.Generator().manual_seed(int(seed) & 0x7FFFFFFFFFFFFFFF)
    z_x = torch.randn(d_z, generator=g, dtype=dtype)
    z_objs = torch.randn(len(layout.boxes), d_y, generator=g, dtype=dtype)
    return LatentBundle(z_x, z_objs)


def nearest_cell(box, lattice: Lattice) -> tuple[int, int, int, int]:
    """Single-cell bounds nearest to the box center, for sub-pixel boxes."""
    x0, y0, x1, y1 = box
    c = min(lattice.width - 1, max(0, int((x0 + x1) / 2 * lattice.width)))
    r = min(lattice.height - 1, max(0, int((y0 + y1) / 2 * lattice.height)))
    return r, r + 1, c, c + 1


class MaskGenerator(nn.Module):
    """The network mapping (layout, instance latents) to the initial label map."""

    def __init__(
        self,
        num_classes: int,
        d_e: int = 64,
        d_y: int = 64,
        mask_size: int = 16,
        hidden: int = 128,
    ):
        super().__init__()
        self.num_classes = num_classes
        self.d_e = d_e
        self.d_y = d_y
        self.mask_size = mask_size
        self.label_embedding = nn.Parameter(torch.randn(num_classes, d_e) * 0.02)
        self.patch_decoder = nn.Sequential(
            nn.Linear(d_e + d_y, hidden),
            nn.ReLU(),
            nn.Linear(hidden, mask_size * mask_size),
        )

    def embed_labels(self, layout: Layout) -> torch.Tensor:
        """Row i is the embedding of instance i's category."""
        idx = torch.tensor([b.category for b in layout.boxes], dtype=torch.long)
        return self.label_embedding[idx]

    def style_matrix(self, layout: Layout, bundle: LatentBundle) -> torch.Tensor:
        """Concat(embedded labels, instance latents): one row per instance."""
        emb = self.embed_labels(layout)
        if bundle.z_objs.shape[0] != emb.shape[0]:
            raise ValueError(
                f"{bundle.z_objs.shape[0]} latent rows for {emb.shape[0]} instances"
            )
        return torch.cat([emb, bundle.z_objs.to(emb.dtype)], dim=1)

    def initial_map(self, style: torch.Tensor, layout: Layout) -> torch.Tensor:
        """Assemble per-instance logit patches into a (d_l, s, s) soft map."""
        s = self.mask_size
        lattice = Lattice(s, s)
        patches = self.patch_decoder(style)  # (m+1, s*s)
        dtype = patches.dtype
        sums = torch.zeros(self.num_classes, s, s, dtype=dtype)
        written = torch.zeros(self.num_classes, s, s, dtype=torch.bool)
        for i, b in enumerate(layout.boxes):
            r0, r1, c0, c1 = raster_bounds(b.box, lattice, allow_empty=True)
            if r0 >= r1 or c0 >= c1:
                r0, r1, c0, c1 = nearest_cell(b.box, lattice)
            patch = patches[i].view(1, 1, s, s)
            resized = F.interpolate(
                patch, size=(r1 - r0, c1 - c0), mode="bilinear", align_corners=False
            )[0, 0]
            sums[b.category, r0:r1, c0:c1] = sums[b.category, r0:r1, c0:c1] + resized
            written[b.category, r0:r1, c0:c1] = True
        logits = torch.where(written, sums, torch.tensor(NEG_FILL, dtype=dtype))
        return torch.softmax(logits, dim=0)

    def forward(
        self, layouts: list[Layout], bundles: list[LatentBundle]
    ) -> tuple[torch.Tensor, list[torch.Tensor]]:
        """Batched initial maps (B, d_l, s, s) plus the style matrix per sample."""
        styles = [self.style_matrix(lay, b) for lay, b in zip(layouts, bundles)]
        maps = [self.initial_map(st, lay) for st, lay in zip(styles, layouts)]
        return torch.stack(maps, dim=0), styles
