"""Three-player training loop over the two consensus chains.

Per step: (1) maximize the discriminator's hinge objective against the
current fakes (generator, mask generator and inference outputs treated as
constants); (2) re-score the fakes with the updated, frozen discriminator
and take one joint minimization step over generator, mask generator and
inference parameters, with the terms shared between the generator and
inference objectives counted once.

Training never touches ground-truth masks: batches carry images and
layouts only, and periodic evaluation runs outside the loss path.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
from torch import nn

from .dataset import LayoutDataset
from .generator import Generator, GeneratorConfig
from .inference import InferenceConfig, InferenceNet
from .discriminator import Discriminator, DiscriminatorConfig, DiscriminatorScores
from .layout import CategorySet, Layout, validate_layout
from .losses import (
    ConsensusBatch,
    FixedFeatureExtractor,
    LossWeights,
    PlayerLosses,
    assemble_losses,
    hinge_d,
)
from .mask_generator import LatentBundle, MaskGenerator
from .maps import resample_soft_map


class NonFiniteLoss(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    categories: tuple[str, ...]
    image_size: int = 64
    # model scale
    ch: int = 8
    disc_ch: int = 8
    d_z: int = 64
    d_e: int = 64
    d_y: int = 64
    mask_size: int = 16
    unet_depth: int = 3
    unet_base: int = 32
    m_max: int = 8
    feature_seed: int = 0
    # optimization
    learning_rate: float = 1e-4
    betas_g: tuple[float, float] = (0.0, 0.999)
    betas_d: tuple[float, float] = (0.0, 0.999)
    betas_i: tuple[float, float] = (0.9, 0.999)
    batch_size: int = 16
    epochs: int = 30
    seed: int = 0
    d_steps: int = 1
    g_steps: int = 1
    checkpoint_every: int = 1000
    eval_every_epochs: int = 1
    grad_clip: float = 0.0
    dtype: str = "float32"
    lambda_rec: float = 1.0
    lambda_perc: float = 1.0
    lambda_kl: float = 1.0

    def __post_init__(self):
        if len(self.categories) < 2:
            raise ValueError("need background plus at least one class")
        size, base = self.image_size, 4
        if size < base or size & (size - 1) or size % base:
            raise ValueError("image_size must be a power-of-two multiple of 4")
        for name in ("learning_rate", "batch_size", "epochs", "d_steps", "g_steps",
                     "checkpoint_every"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")

    @property
    def num_classes(self) -> int:
        return len(self.categories)

    @property
    def n_blocks(self) -> int:
        return int(self.image_size // 4).bit_length() - 1

    @property
    def category_set(self) -> CategorySet:
        return CategorySet(tuple(self.categories))

    @property
    def torch_dtype(self) -> torch.dtype:
        return getattr(torch, self.dtype)

    @property
    def loss_weights(self) -> LossWeights:
        return LossWeights(
            rec=self.lambda_rec, perc=self.lambda_perc, kl=self.lambda_kl
        )

    def hash(self) -> str:
        blob = json.dumps(asdict(self), sort_keys=True)
        return hashlib.sha256(blob.encode()).hexdigest()[:16]


def load_train_config(path: str | Path) -> TrainConfig:
    """Parse a JSON config file; unknown keys are errors."""
    data = json.loads(Path(path).read_text())
    known = set(TrainConfig.__dataclass_fields__)
    unknown = set(data) - known
    if unknown:
        raise ValueError(f"unknown config keys: {sorted(unknown)}")
    for key in ("categories", "betas_g", "betas_d", "betas_i"):
        if key in data:
            data[key] = tuple(data[key])
    return TrainConfig(**data)


@dataclass
class TrainBatch:
    """Images and layouts only; ground truth never rides along."""

    images: torch.Tensor  # (B, 3, H, W)
    layouts: list[Layout]


def build_players(config: TrainConfig) -> dict[str, nn.Module]:
    """Construct the four networks plus the frozen feature extractor."""
    torch.manual_seed(config.seed)
    gen_cfg = GeneratorConfig(
        num_classes=config.num_classes,
        ch=config.ch,
        n_blocks=config.n_blocks,
        d_z=config.d_z,
        d_e=config.d_e,
        d_y=config.d_y,
    )
    players = {
        "mask_generator": MaskGenerator(
            config.num_classes, config.d_e, config.d_y, config.mask_size
        ),
        "generator": Generator(gen_cfg),
        "inference": InferenceNet(
            InferenceConfig(config.num_classes, config.unet_depth, config.unet_base)
        ),
        "discriminator": Discriminator(
            DiscriminatorConfig(config.num_classes, config.disc_ch)
        ),
        "extractor": FixedFeatureExtractor(config.feature_seed),
    }
    dtype = config.torch_dtype
    for net in players.values():
        net.to(dtype)
    return players


class Trainer:
    def __init__(
        self,
        config: TrainConfig,
        train_data: LayoutDataset | None = None,
        val_data: LayoutDataset | None = None,
        out_dir: str | Path | None = None,
    ):
        self.config = config
        self.train_data = train_data
        self.val_data = val_data
        self.out_dir = Path(out_dir) if out_dir else None
        if self.out_dir:
            self.out_dir.mkdir(parents=True, exist_ok=True)

        players = build_players(config)
        self.mask_gen: MaskGenerator = players["mask_generator"]
        self.gen: Generator = players["generator"]
        self.inf: InferenceNet = players["inference"]
        self.disc: Discriminator = players["discriminator"]
        self.extractor: FixedFeatureExtractor = players["extractor"]

        lr = config.learning_rate
        self.opt_g = torch.optim.Adam(
            list(self.gen.parameters()) + list(self.mask_gen.parameters()),
            lr=lr, betas=config.betas_g,
        )
        self.opt_i = torch.optim.Adam(
            self.inf.parameters(), lr=lr, betas=config.betas_i
        )
        self.opt_d = torch.optim.Adam(
            self.disc.parameters(), lr=lr, betas=config.betas_d
        )

        self.g_latent = torch.Generator().manual_seed(config.seed + 1)
        self.data_rng = np.random.default_rng(config.seed + 2)
        self.step = 0
        self.epoch = 0
        self.pos = 0
        self.perm: np.ndarray = np.zeros(0, dtype=np.int64)
        self.records: list[dict] = []

    # ----- data plumbing -------------------------------------------------

    def load_batch(self, indices) -> TrainBatch:
        assert self.train_data is not None
        dtype = self.config.torch_dtype
        cats = self.config.category_set
        images, layouts = [], []
        for i in indices:
            image, layout, _ = self.train_data[int(i)]
            images.append(image.to(dtype))
            layouts.append(validate_layout(layout, cats, self.config.m_max))
        return TrainBatch(torch.stack(images), layouts)

    def draw_latents(self, layouts: list[Layout]) -> list[LatentBundle]:
        cfg = self.config
        dtype = cfg.torch_dtype
        bundles = []
        for lay in layouts:
            z_x = torch.randn(cfg.d_z, generator=self.g_latent, dtype=dtype)
            z_objs = torch.randn(
                len(lay.boxes), cfg.d_y, generator=self.g_latent, dtype=dtype
            )
            bundles.append(LatentBundle(z_x, z_objs))
        return bundles

    # ----- consensus chains ----------------------------------------------

    def latent_consensus_pass(
        self, layouts: list[Layout], bundles: list[LatentBundle]
    ) -> dict[str, torch.Tensor]:
        """layout -> initial map -> synthesized image -> inferred map."""
        h_init, styles = self.mask_gen(layouts, bundles)
        z = torch.stack([b.z_x for b in bundles])
        x_syn, h_final = self.gen(z, h_init, styles, layouts)
        h_syn_pred = self.inf(x_syn)
        return {
            "h_init": h_init,
            "h_final": h_final,
            "x_syn": x_syn,
            "h_syn_pred": h_syn_pred,
            "styles": styles,
        }

    def data_consensus_pass(
        self,
        images: torch.Tensor,
        layouts: list[Layout],
        bundles: list[LatentBundle],
        styles: list[torch.Tensor],
    ) -> dict[str, torch.Tensor]:
        """real image -> inferred map -> reconstruction (map not detached)."""
        h_real_pred = self.inf(images)
        z = torch.stack([b.z_x for b in bundles])
        x_recon, _ = self.gen(z, h_real_pred, styles, layouts)
        return {"h_real_pred": h_real_pred, "x_recon": x_recon}

    def forward_batch(self, batch: TrainBatch, bundles) -> ConsensusBatch:
        latent = self.latent_consensus_pass(batch.layouts, bundles)
        data = self.data_consensus_pass(
            batch.images, batch.layouts, bundles, latent["styles"]
        )
        h_target = resample_soft_map(latent["h_final"], batch.images.shape[-2:])
        return ConsensusBatch(
            x_real=batch.images,
            x_syn=latent["x_syn"],
            x_recon=data["x_recon"],
            h_target=h_target,
            h_syn_pred=latent["h_syn_pred"],
            h_real_pred=data["h_real_pred"],
        )

    # ----- optimization ---------------------------------------------------

    def _check_finite(self, record: dict[str, float]) -> None:
        bad = {k: v for k, v in record.items() if not np.isfinite(v)}
        if bad:
            raise NonFiniteLoss(f"non-finite loss components: {bad}; full: {record}")

    def train_step(self, batch: TrainBatch) -> PlayerLosses:
        cfg = self.config
        weights = cfg.loss_weights
        bundles = self.draw_latents(batch.layouts)

        # phase 1: discriminator ascent on detached fakes
        d_components = {}
        for _ in range(cfg.d_steps):
            with torch.no_grad():
                frozen = self.forward_batch(batch, bundles)
            scores_real = self.disc(batch.images, batch.layouts)
            scores_syn = self.disc(frozen.x_syn, batch.layouts)
            scores_recon = self.disc(frozen.x_recon, batch.layouts)
            d_real = hinge_d(scores_real, real=True)
            d_syn = hinge_d(scores_syn, real=False)
            d_recon = hinge_d(scores_recon, real=False)
            loss_d = d_real + d_syn + d_recon
            self.opt_d.zero_grad(set_to_none=True)
            loss_d.backward()
            if cfg.grad_clip > 0:
                nn.utils.clip_grad_norm_(self.disc.parameters(), cfg.grad_clip)
            self.opt_d.step()
            d_components = {
                "d_real": d_real.detach(),
                "d_syn": d_syn.detach(),
                "d_recon": d_recon.detach(),
            }
            frozen_scores_real = DiscriminatorScores(
                scores_real.p_img.detach(), [o.detach() for o in scores_real.p_obj]
            )

        # phase 2: joint generator/mask/inference descent, discriminator frozen
        for p in self.disc.parameters():
            p.requires_grad_(False)
        try:
            losses = None
            for _ in range(cfg.g_steps):
                out = self.forward_batch(batch, bundles)
                out.scores_real = frozen_scores_real
                out.scores_syn = self.disc(out.x_syn, batch.layouts)
                out.scores_recon = self.disc(out.x_recon, batch.layouts)
                losses = assemble_losses(out, self.extractor, weights)
                self.opt_g.zero_grad(set_to_none=True)
                self.opt_i.zero_grad(set_to_none=True)
                # loss_g already contains every joint term exactly once
                losses.loss_g.backward()
                if cfg.grad_clip > 0:
                    nn.utils.clip_grad_norm_(
                        list(self.gen.parameters())
                        + list(self.mask_gen.parameters())
                        + list(self.inf.parameters()),
                        cfg.grad_clip,
                    )
                self.opt_g.step()
                self.opt_i.step()
        finally:
            for p in self.disc.parameters():
                p.requires_grad_(True)

        losses.loss_d = loss_d.detach()
        losses.components.update(d_components)
        self.step += 1
        record = {"step": self.step, "epoch": self.epoch, **losses.floats()}
        self._check_finite({k: v for k, v in record.items() if k not in ("step", "epoch")})
        self._log(record)
        return losses

    def _log(self, record: dict) -> None:
        self.records.append(record)
        if self.out_dir:
            with (self.out_dir / "metrics.jsonl").open("a") as fh:
                fh.write(json.dumps(record) + "\n")

    # ----- epoch loop ------------------------------------------------------

    def train(self, epochs: int | None = None) -> None:
        assert self.train_data is not None, "trainer needs a training dataset"
        cfg = self.config
        target = cfg.epochs if epochs is None else epochs
        n = len(self.train_data)
        while self.epoch < target:
            if self.pos == 0:
                self.perm = self.data_rng.permutation(n)
            while self.pos + cfg.batch_size <= n:
                idx = self.perm[self.pos : self.pos + cfg.batch_size]
                self.pos += cfg.batch_size
                self.train_step(self.load_batch(idx))
                if self.step % cfg.checkpoint_every == 0 and self.out_dir:
                    self.save(self.out_dir / "latest.ckpt")
            self.pos = 0
            self.epoch += 1
            if (
                self.val_data is not None
                and cfg.eval_every_epochs > 0
                and self.epoch % cfg.eval_every_epochs == 0
            ):
                self._log({"step": self.step, "epoch": self.epoch,
                           **self.evaluate(self.val_data)})
            if self.out_dir:
                self.save(self.out_dir / "latest.ckpt")

    def evaluate(self, data: LayoutDataset, max_samples: int | None = None) -> dict:
        """Segmentation metrics of the inference net against ground truth.

        Evaluation-only: runs outside the loss path on a parameter snapshot.
        """
        from .evaluation import ConfusionMatrix, accumulate, metrics
        from .inference import hard_predict

        cm = ConfusionMatrix.zeros(self.config.num_classes)
        dtype = self.config.torch_dtype
        count = len(data) if max_samples is None else min(len(data), max_samples)
        with torch.no_grad():
            for i in range(count):
                image, _, mask = data[i]
                if mask is None:
                    continue
                pred = hard_predict(self.inf.infer(image.to(dtype)))
                accumulate(cm, mask, pred)
        return {f"val_{k}": v for k, v in metrics(cm).items()}

    # ----- checkpointing ----------------------------------------------------

    def save(self, path: str | Path) -> None:
        payload = {
            "config": asdict(self.config),
            "config_hash": self.config.hash(),
            "step": self.step,
            "epoch": self.epoch,
            "pos": self.pos,
            "perm": self.perm,
            "models": {
                "mask_generator": self.mask_gen.state_dict(),
                "generator": self.gen.state_dict(),
                "inference": self.inf.state_dict(),
                "discriminator": self.disc.state_dict(),
            },
            "optims": {
                "g": self.opt_g.state_dict(),
                "i": self.opt_i.state_dict(),
                "d": self.opt_d.state_dict(),
            },
            "rng": {
                "latent": self.g_latent.get_state(),
                "data": self.data_rng.bit_generator.state,
            },
        }
        torch.save(payload, path)

    @classmethod
    def load(
        cls,
        path: str | Path,
        train_data: LayoutDataset | None = None,
        val_data: LayoutDataset | None = None,
        out_dir: str | Path | None = None,
    ) -> "Trainer":
        payload = torch.load(path, weights_only=False)
        cfg_data = payload["config"]
        for key in ("categories", "betas_g", "betas_d", "betas_i"):
            cfg_data[key] = tuple(cfg_data[key])
        config = TrainConfig(**cfg_data)
        trainer = cls(config, train_data=train_data, val_data=val_data,
                      out_dir=out_dir)
        trainer.mask_gen.load_state_dict(payload["models"]["mask_generator"])
        trainer.gen.load_state_dict(payload["models"]["generator"])
        trainer.inf.load_state_dict(payload["models"]["inference"])
        trainer.disc.load_state_dict(payload["models"]["discriminator"])
        trainer.opt_g.load_state_dict(payload["optims"]["g"])
        trainer.opt_i.load_state_dict(payload["optims"]["i"])
        trainer.opt_d.load_state_dict(payload["optims"]["d"])
        trainer.step = payload["step"]
        trainer.epoch = payload["epoch"]
        trainer.pos = payload["pos"]
        trainer.perm = payload["perm"]
        trainer.g_latent.set_state(payload["rng"]["latent"])
        trainer.data_rng.bit_generator.state = payload["rng"]["data"]
        return trainer
