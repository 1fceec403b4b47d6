"""Loss terms: reconstruction, perceptual, label-map consensus, adversarial.

The perceptual metric uses a frozen random-orthogonal multi-scale conv
stack instead of a pretrained classifier, keeping the package
self-contained; the extractor sits behind a narrow interface so a
pretrained feature network could be dropped in.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import torch
import torch.nn.functional as F
from torch import nn

from .discriminator import DiscriminatorScores
from .maps import ShapeMismatch

KL_EPS = 1e-8


class MissingBranch(ValueError):
    pass


def _orthogonal(shape: tuple[int, ...], g: torch.Generator) -> torch.Tensor:
    """Deterministic orthogonal-initialized weight (flattened rows)."""
    rows = shape[0]
    cols = 1
    for s in shape[1:]:
        cols *= s
    a = torch.randn(max(rows, cols), min(rows, cols), generator=g)
    q, r = torch.linalg.qr(a)
    q = q * torch.sign(torch.diagonal(r))
    if rows < cols:
        q = q.t()
    return q[:rows, :cols].reshape(shape).contiguous()


class FixedFeatureExtractor(nn.Module):
    """Frozen 3-scale conv features at strides 1, 2 and 4."""

    def __init__(self, seed: int = 0, widths: tuple[int, int, int] = (16, 32, 64)):
        super().__init__()
        g = torch.Generator().manual_seed(seed)
        w1, w2, w3 = widths
        self.conv1 = nn.Conv2d(3, w1, 3, padding=1)
        self.conv2 = nn.Conv2d(w1, w2, 3, stride=2, padding=1)
        self.conv3 = nn.Conv2d(w2, w3, 3, stride=2, padding=1)
        for conv in (self.conv1, self.conv2, self.conv3):
            with torch.no_grad():
                conv.weight.copy_(_orthogonal(tuple(conv.weight.shape), g))
                conv.bias.zero_()
        for p in self.parameters():
            p.requires_grad_(False)

    def forward(self, x: torch.Tensor) -> list[torch.Tensor]:
        squeeze = x.dim() == 3
        if squeeze:
            x = x.unsqueeze(0)
        f1 = F.relu(self.conv1(x))
        f2 = F.relu(self.conv2(f1))
        f3 = F.relu(self.conv3(f2))
        feats = [f1, f2, f3]
        return [f.squeeze(0) for f in feats] if squeeze else feats


def recon_l1(x_real: torch.Tensor, x_recon: torch.Tensor) -> torch.Tensor:
    """Mean absolute pixel difference."""
    if x_real.shape != x_recon.shape:
        raise ShapeMismatch(f"{tuple(x_real.shape)} vs {tuple(x_recon.shape)}")
    return (x_real - x_recon).abs().mean()


def perceptual_l1(
    extractor: FixedFeatureExtractor, x_a: torch.Tensor, x_b: torch.Tensor
) -> torch.Tensor:
    """Sum over scales of the mean absolute feature difference."""
    feats_a = extractor(x_a)
    feats_b = extractor(x_b)
    return sum((fa - fb).abs().mean() for fa, fb in zip(feats_a, feats_b))


def mean_kl(h_target: torch.Tensor, h_pred: torch.Tensor) -> torch.Tensor:
    """Pixel-averaged KL(target || prediction) between soft label maps.

    No argmax is taken: the target's per-pixel uncertainty is preserved.
    Gradients flow into both arguments.
    """
    if h_target.shape != h_pred.shape:
        raise ShapeMismatch(f"{tuple(h_target.shape)} vs {tuple(h_pred.shape)}")
    per_pixel = (
        h_target * (torch.log(h_target + KL_EPS) - torch.log(h_pred + KL_EPS))
    ).sum(dim=-3)
    return per_pixel.mean()


def hinge_term(p: torch.Tensor, real: bool) -> torch.Tensor:
    """Margin penalty per score: zero once real scores reach +1 / fakes -1."""
    return F.relu(1.0 - p) if real else F.relu(1.0 + p)


def hinge_d(
    scores: DiscriminatorScores,
    real: bool,
    lambda_img: float = 1.0,
    lambda_obj: float = 1.0,
) -> torch.Tensor:
    """Discriminator hinge loss, image and object groups equally weighted."""
    per_sample = []
    for b, obj in enumerate(scores.p_obj):
        t_img = hinge_term(scores.p_img[b], real)
        t_obj = hinge_term(obj, real).mean()
        per_sample.append((lambda_img * t_img + lambda_obj * t_obj) / 2.0)
    return torch.stack(per_sample).mean()


def adv_g(scores: DiscriminatorScores) -> torch.Tensor:
    """Generator-side adversarial loss: negated mean realness score."""
    per_sample = [
        -(scores.p_img[b] + obj.mean()) / 2.0 for b, obj in enumerate(scores.p_obj)
    ]
    return torch.stack(per_sample).mean()


@dataclass(frozen=True)
class LossWeights:
    rec: float = 1.0
    perc: float = 1.0
    kl: float = 1.0
    img: float = 1.0
    obj: float = 1.0


@dataclass
class ConsensusBatch:
    """One batch's forward results for both consensus chains."""

    x_real: torch.Tensor | None = None
    x_syn: torch.Tensor | None = None
    x_recon: torch.Tensor | None = None
    h_target: torch.Tensor | None = None  # generator-refined map, image lattice
    h_syn_pred: torch.Tensor | None = None
    h_real_pred: torch.Tensor | None = None
    scores_real: DiscriminatorScores | None = None
    scores_syn: DiscriminatorScores | None = None
    scores_recon: DiscriminatorScores | None = None


@dataclass
class PlayerLosses:
    loss_g: torch.Tensor
    loss_d: torch.Tensor
    loss_i: torch.Tensor
    components: dict[str, torch.Tensor] = field(default_factory=dict)

    def floats(self) -> dict[str, float]:
        out = {
            "loss_g": float(self.loss_g),
            "loss_d": float(self.loss_d),
            "loss_i": float(self.loss_i),
        }
        out.update({k: float(v) for k, v in self.components.items()})
        return out


def assemble_losses(
    batch: ConsensusBatch,
    extractor: FixedFeatureExtractor,
    weights: LossWeights = LossWeights(),
) -> PlayerLosses:
    """Combine one batch's outputs into the three per-player losses."""
    missing = [k for k, v in vars(batch).items() if v is None]
    if missing:
        raise MissingBranch(f"absent chain outputs: {missing}")

    rec = recon_l1(batch.x_real, batch.x_recon)
    perc_recon = perceptual_l1(extractor, batch.x_real, batch.x_recon)
    perc_syn = perceptual_l1(extractor, batch.x_real, batch.x_syn)
    latent_kl = mean_kl(batch.h_target, batch.h_syn_pred)
    d_real = hinge_d(batch.scores_real, real=True, lambda_img=weights.img,
                     lambda_obj=weights.obj)
    d_syn = hinge_d(batch.scores_syn, real=False, lambda_img=weights.img,
                    lambda_obj=weights.obj)
    d_recon = hinge_d(batch.scores_recon, real=False, lambda_img=weights.img,
                      lambda_obj=weights.obj)
    adv_syn = adv_g(batch.scores_syn)
    adv_recon = adv_g(batch.scores_recon)

    loss_d = d_real + d_syn + d_recon
    loss_g = (
        weights.rec * rec
        + weights.perc * (perc_recon + perc_syn)
        + weights.kl * latent_kl
        + adv_syn
        + adv_recon
    )
    loss_i = weights.rec * rec + weights.perc * perc_recon + weights.kl * latent_kl
    return PlayerLosses(
        loss_g,
        loss_d,
        loss_i,
        components={
            "recon_l1": rec,
            "perc_recon": perc_recon,
            "perc_syn": perc_syn,
            "latent_kl": latent_kl,
            "adv_syn": adv_syn,
            "adv_recon": adv_recon,
            "d_real": d_real,
            "d_syn": d_syn,
            "d_recon": d_recon,
        },
    )
