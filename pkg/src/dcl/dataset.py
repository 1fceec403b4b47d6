"""Dataset manifests: writing shapes-world datasets and ingesting layouts.

A dataset directory holds ``manifest.jsonl`` (one JSON record per sample
with fields ``image``, ``boxes`` and optional ``mask``), a ``dataset.json``
metadata file, and the referenced 8-bit PNG files.  Paths are relative to
the manifest.  Ground-truth masks, when present, are exposed for evaluation
only.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from PIL import Image as PILImage

from .layout import CategorySet, LabeledBox, Lattice, Layout
from .shapes import ShapesConfig, generate_shapes_sample, sample_seeds


class ManifestParseError(ValueError):
    pass


class MissingImageFile(FileNotFoundError):
    pass


class BoxOutOfBounds(ValueError):
    pass


def image_to_uint8(image: torch.Tensor) -> np.ndarray:
    """(3, H, W) float in [-1, 1] -> (H, W, 3) uint8."""
    arr = image.detach().cpu().numpy()
    arr = np.clip((arr + 1.0) / 2.0, 0.0, 1.0)
    return np.round(arr * 255.0).astype(np.uint8).transpose(1, 2, 0)


def uint8_to_image(arr: np.ndarray) -> torch.Tensor:
    """(H, W, 3) uint8 -> (3, H, W) float32 in [-1, 1]."""
    x = arr.astype(np.float32).transpose(2, 0, 1) / 255.0
    return torch.from_numpy(x * 2.0 - 1.0)


def save_image(image: torch.Tensor, path: Path) -> None:
    PILImage.fromarray(image_to_uint8(image)).save(path)


def load_image(path: Path) -> torch.Tensor:
    with PILImage.open(path) as im:
        return uint8_to_image(np.asarray(im.convert("RGB")))


def save_mask(mask: torch.Tensor, path: Path) -> None:
    PILImage.fromarray(mask.cpu().numpy().astype(np.uint8), mode="L").save(path)


def load_mask(path: Path) -> torch.Tensor:
    with PILImage.open(path) as im:
        return torch.from_numpy(np.asarray(im.convert("L")).astype(np.int64))


@dataclass
class LayoutDataset:
    """Random-access view over a manifest directory."""

    root: Path
    records: list[dict]
    categories: CategorySet | None
    lattice: Lattice | None

    def __len__(self) -> int:
        return len(self.records)

    def layout(self, idx: int) -> Layout:
        rec = self.records[idx]
        boxes = []
        for entry in rec["boxes"]:
            cat, x0, y0, x1, y1 = entry
            if not (0.0 <= x0 < x1 <= 1.0 and 0.0 <= y0 < y1 <= 1.0):
                raise BoxOutOfBounds(f"record {idx}: box {entry[1:]}")
            boxes.append(LabeledBox(int(cat), (x0, y0, x1, y1)))
        lattice = self.lattice
        if lattice is None:
            with PILImage.open(self.root / rec["image"]) as im:
                lattice = Lattice(im.height, im.width)
        return Layout(tuple(boxes), lattice)

    def __getitem__(
        self, idx: int
    ) -> tuple[torch.Tensor, Layout, torch.Tensor | None]:
        rec = self.records[idx]
        img_path = self.root / rec["image"]
        if not img_path.exists():
            raise MissingImageFile(str(img_path))
        image = load_image(img_path)
        layout = self.layout(idx)
        mask = None
        if rec.get("mask"):
            mask_path = self.root / rec["mask"]
            if not mask_path.exists():
                raise MissingImageFile(str(mask_path))
            mask = load_mask(mask_path)
        return image, layout, mask

    def iter_samples(self, shuffle_seed: int | None = None):
        """Stream validated samples; order is deterministic per seed."""
        order = np.arange(len(self))
        if shuffle_seed is not None:
            order = np.random.default_rng(shuffle_seed).permutation(len(self))
        for idx in order:
            yield self[int(idx)]


def load_layout_dataset(
    path: str | Path, categories: CategorySet | None = None
) -> LayoutDataset:
    """Open a dataset directory (or manifest file) for iteration."""
    path = Path(path)
    manifest = path / "manifest.jsonl" if path.is_dir() else path
    root = manifest.parent
    if not manifest.exists():
        raise ManifestParseError(f"no manifest at {manifest}")

    lattice = None
    meta_path = root / "dataset.json"
    if meta_path.exists():
        meta = json.loads(meta_path.read_text())
        if categories is None:
            categories = CategorySet(tuple(meta["categories"]))
        lattice = Lattice(meta["height"], meta["width"])

    records = []
    for lineno, line in enumerate(manifest.read_text().splitlines(), start=1):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
        except json.JSONDecodeError as e:
            raise ManifestParseError(f"{manifest}:{lineno}: {e}") from e
        if "image" not in rec or "boxes" not in rec:
            raise ManifestParseError(f"{manifest}:{lineno}: missing image/boxes")
        records.append(rec)
    return LayoutDataset(root, records, categories, lattice)


def write_shapes_dataset(
    out_dir: str | Path, count: int, seed: int, config: ShapesConfig
) -> LayoutDataset:
    """Generate ``count`` samples into ``out_dir`` and return the open dataset."""
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    (out / "masks").mkdir(parents=True, exist_ok=True)
    cats = config.categories

    lines = []
    for i, s in enumerate(sample_seeds(seed, count)):
        image, layout, mask = generate_shapes_sample(int(s), config)
        img_rel = f"images/{i:06d}.png"
        mask_rel = f"masks/{i:06d}.png"
        save_image(image, out / img_rel)
        save_mask(mask, out / mask_rel)
        boxes = [
            [b.category, *[float(v) for v in b.box]] for b in layout.boxes
        ]
        lines.append(json.dumps({"image": img_rel, "boxes": boxes, "mask": mask_rel}))
    (out / "manifest.jsonl").write_text("\n".join(lines) + "\n")
    (out / "dataset.json").write_text(
        json.dumps(
            {
                "categories": list(cats.names),
                "height": config.size,
                "width": config.size,
                "seed": seed,
                "count": count,
            },
            indent=2,
        )
    )
    return load_layout_dataset(out)
