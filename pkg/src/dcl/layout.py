"""Layout data model and lattice geometry.

A layout is an ordered list of category-labeled bounding boxes on an image
lattice.  Box coordinates are normalized to [0, 1] with a half-open
convention: a pixel belongs to a box iff its center falls in
[x0, x1) x [y0, y1).  Ordering of boxes is significant; instance i of a
layout owns row i of the per-instance style codes downstream.

``validate_layout`` appends an implicit full-lattice background box so that
every pixel has at least one contributing instance in the spatial affine
assembly and in the initial label map.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

BACKGROUND_BOX = (0.0, 0.0, 1.0, 1.0)


class LayoutError(ValueError):
    pass


class InvalidBox(LayoutError):
    pass


class UnknownCategory(LayoutError):
    pass


class TooManyInstances(LayoutError):
    pass


class EmptyRaster(LayoutError):
    """Box covers no pixel centers at the requested resolution."""


@dataclass(frozen=True)
class CategorySet:
    """Named category set; index 0 is reserved for background."""

    names: tuple[str, ...]
    background_id: int = 0

    def __post_init__(self):
        if len(set(self.names)) != len(self.names):
            raise ValueError("category names must be unique")
        if len(self.names) < 2:
            raise ValueError("need background plus at least one foreground class")
        if not 0 <= self.background_id < len(self.names):
            raise ValueError("background_id out of range")

    @property
    def count(self) -> int:
        return len(self.names)


@dataclass(frozen=True)
class Lattice:
    height: int
    width: int

    def __post_init__(self):
        if self.height <= 0 or self.width <= 0:
            raise ValueError("lattice dimensions must be positive")

    @property
    def size(self) -> int:
        return self.height * self.width


@dataclass(frozen=True)
class LabeledBox:
    category: int
    box: tuple[float, float, float, float]  # (x0, y0, x1, y1), normalized


@dataclass(frozen=True)
class Layout:
    boxes: tuple[LabeledBox, ...]
    lattice: Lattice
    has_background: bool = field(default=False)

    def __post_init__(self):
        object.__setattr__(self, "boxes", tuple(self.boxes))

    def __len__(self) -> int:
        return len(self.boxes)

    @property
    def num_foreground(self) -> int:
        """Number of layout instances excluding the appended background box."""
        return len(self.boxes) - 1 if self.has_background else len(self.boxes)

    @property
    def foreground_boxes(self) -> tuple[LabeledBox, ...]:
        return self.boxes[: self.num_foreground]


def _check_box(b: LabeledBox, categories: CategorySet | None) -> None:
    x0, y0, x1, y1 = b.box
    coords_ok = all(math.isfinite(v) and 0.0 <= v <= 1.0 for v in (x0, y0, x1, y1))
    if not coords_ok or not (x0 < x1 and y0 < y1):
        raise InvalidBox(f"degenerate or out-of-range box {b.box}")
    if categories is not None and not 0 <= b.category < categories.count:
        raise UnknownCategory(f"category {b.category} not in [0, {categories.count})")


def validate_layout(
    layout: Layout, categories: CategorySet, m_max: int = 8
) -> Layout:
    """Verify invariants and append the implicit background instance.

    Returns a new layout whose last box is a full-lattice background box.
    Idempotent: validating an already-validated layout is a no-op.
    """
    fg = list(layout.boxes)
    if layout.has_background or (
        fg
        and fg[-1].category == categories.background_id
        and fg[-1].box == BACKGROUND_BOX
    ):
        fg = fg[:-1]
    if len(fg) < 1:
        raise InvalidBox("layout needs at least one foreground box")
    if len(fg) > m_max:
        raise TooManyInstances(f"{len(fg)} boxes exceeds m_max={m_max}")
    for b in fg:
        _check_box(b, categories)
    background = LabeledBox(categories.background_id, BACKGROUND_BOX)
    return replace(layout, boxes=tuple(fg) + (background,), has_background=True)


def raster_bounds(
    box: tuple[float, float, float, float],
    lattice: Lattice,
    allow_empty: bool = False,
) -> tuple[int, int, int, int]:
    """Integer pixel bounds (r0, r1, c0, c1) of a box under the
    half-open pixel-center rule.  r1/c1 are exclusive."""
    x0, y0, x1, y1 = box
    h, w = lattice.height, lattice.width
    c0 = max(0, math.ceil(w * x0 - 0.5))
    c1 = min(w, math.ceil(w * x1 - 0.5))
    r0 = max(0, math.ceil(h * y0 - 0.5))
    r1 = min(h, math.ceil(h * y1 - 0.5))
    if (r0 >= r1 or c0 >= c1) and not allow_empty:
        raise EmptyRaster(f"box {box} covers no pixel centers on {h}x{w}")
    return r0, r1, c0, c1


def rasterize_box(box: LabeledBox, lattice: Lattice) -> np.ndarray:
    """Binary (height, width) mask of the pixels whose centers lie in the box."""
    r0, r1, c0, c1 = raster_bounds(box.box, lattice)
    mask = np.zeros((lattice.height, lattice.width), dtype=np.uint8)
    mask[r0:r1, c0:c1] = 1
    return mask
