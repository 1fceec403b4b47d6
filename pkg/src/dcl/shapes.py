"""Procedural shapes-world dataset: colored primitives on a flat background.

Every sample is a deterministic function of its seed: a handful of shape
instances with exact bounding boxes, a hard-edged RGB rendering in [-1, 1],
and a pixel-perfect ground-truth label map (category of the topmost shape,
background elsewhere).  Ground truth is for evaluation only; training never
reads it.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .layout import CategorySet, LabeledBox, Lattice, Layout, raster_bounds

SHAPE_NAMES = ("rectangle", "ellipse", "triangle", "diamond", "cross", "ring")

# base RGB per class in [-1, 1]; background is a dark gray
BACKGROUND_COLOR = np.array([-0.8, -0.8, -0.8])
SHAPE_COLORS = np.array(
    [
        [0.9, -0.7, -0.7],   # rectangle: red
        [-0.7, 0.9, -0.7],   # ellipse: green
        [-0.7, -0.7, 0.9],   # triangle: blue
        [0.9, 0.9, -0.7],    # diamond: yellow
        [0.9, -0.7, 0.9],    # cross: magenta
        [-0.7, 0.9, 0.9],    # ring: cyan
    ]
)


def shape_predicate(name: str, a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Membership test on local box coordinates a, b in [0, 1].

    Each primitive touches all four box sides, so the box is the exact
    bounding box of the continuous shape.
    """
    if name == "rectangle":
        return np.ones_like(a, dtype=bool)
    if name == "ellipse":
        return (2 * a - 1) ** 2 + (2 * b - 1) ** 2 <= 1.0
    if name == "triangle":  # apex top-center, base on the bottom edge
        return np.abs(a - 0.5) <= b / 2
    if name == "diamond":
        return np.abs(a - 0.5) + np.abs(b - 0.5) <= 0.5
    if name == "cross":
        return (np.abs(a - 0.5) <= 1 / 6) | (np.abs(b - 0.5) <= 1 / 6)
    if name == "ring":
        r2 = (2 * a - 1) ** 2 + (2 * b - 1) ** 2
        return (r2 <= 1.0) & (r2 >= 0.25)
    raise ValueError(f"unknown shape {name!r}")


@dataclass(frozen=True)
class ShapesConfig:
    size: int = 64
    num_shape_classes: int = 6
    m_range: tuple[int, int] = (1, 4)
    extent_range: tuple[float, float] = (0.25, 0.55)
    color_jitter: float = 0.15
    position_jitter: float = 1.0

    def __post_init__(self):
        if not 1 <= self.num_shape_classes <= len(SHAPE_NAMES):
            raise ValueError(f"num_shape_classes must be in [1, {len(SHAPE_NAMES)}]")
        lo, hi = self.m_range
        if not 1 <= lo <= hi:
            raise ValueError("m_range must satisfy 1 <= lo <= hi")

    @property
    def categories(self) -> CategorySet:
        return CategorySet(("background",) + SHAPE_NAMES[: self.num_shape_classes])

    @property
    def lattice(self) -> Lattice:
        return Lattice(self.size, self.size)


def _rasterize_shape(name: str, box, lattice: Lattice) -> tuple[tuple, np.ndarray]:
    """Pixel-center rasterization of a primitive inside its box; no AA."""
    r0, r1, c0, c1 = raster_bounds(box, lattice, allow_empty=True)
    if r0 >= r1 or c0 >= c1:
        return (r0, r1, c0, c1), np.zeros((0, 0), dtype=bool)
    x0, y0, x1, y1 = box
    u = (np.arange(c0, c1) + 0.5) / lattice.width
    v = (np.arange(r0, r1) + 0.5) / lattice.height
    a = (u[None, :] - x0) / (x1 - x0)
    b = (v[:, None] - y0) / (y1 - y0)
    a, b = np.broadcast_arrays(a, b)
    return (r0, r1, c0, c1), shape_predicate(name, a, b)


def generate_shapes_sample(
    seed: int, config: ShapesConfig
) -> tuple[torch.Tensor, Layout, torch.Tensor]:
    """Deterministically render one sample.

    Returns (image, layout, hard_label_map): the image is a float32
    (3, H, W) tensor in [-1, 1], the layout holds the foreground boxes in
    draw order (first box at the back), and the label map is the exact
    per-pixel category of the topmost shape.
    """
    rng = np.random.default_rng(seed)
    lat = config.lattice
    h = w = config.size
    m = int(rng.integers(config.m_range[0], config.m_range[1] + 1))

    bg = np.clip(
        BACKGROUND_COLOR + rng.uniform(-config.color_jitter, config.color_jitter, 3),
        -1.0,
        1.0,
    )
    image = np.broadcast_to(bg[:, None, None], (3, h, w)).copy()
    labels = np.zeros((h, w), dtype=np.int64)

    boxes = []
    for _ in range(m):
        while True:  # resample until the shape covers at least one pixel
            cat = int(rng.integers(1, config.num_shape_classes + 1))
            bw = rng.uniform(*config.extent_range)
            bh = rng.uniform(*config.extent_range)
            cx = 0.5 + config.position_jitter * rng.uniform(-0.5, 0.5) * (1 - bw)
            cy = 0.5 + config.position_jitter * rng.uniform(-0.5, 0.5) * (1 - bh)
            box = (
                max(0.0, cx - bw / 2),
                max(0.0, cy - bh / 2),
                min(1.0, cx + bw / 2),
                min(1.0, cy + bh / 2),
            )
            name = SHAPE_NAMES[cat - 1]
            (r0, r1, c0, c1), mask = _rasterize_shape(name, box, lat)
            if mask.any():
                break
        color = np.clip(
            SHAPE_COLORS[cat - 1]
            + rng.uniform(-config.color_jitter, config.color_jitter, 3),
            -1.0,
            1.0,
        )
        region = image[:, r0:r1, c0:c1]
        region[:, mask] = color[:, None]
        labels[r0:r1, c0:c1][mask] = cat
        boxes.append(LabeledBox(cat, box))

    layout = Layout(tuple(boxes), lat)
    return (
        torch.from_numpy(image.astype(np.float32)),
        layout,
        torch.from_numpy(labels),
    )


def sample_seeds(dataset_seed: int, count: int) -> np.ndarray:
    """Stable per-sample seeds for a dataset of ``count`` samples."""
    return np.random.SeedSequence(dataset_seed).generate_state(count)
