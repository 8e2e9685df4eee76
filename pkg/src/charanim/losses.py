"""Training losses: adversarial, discriminator feature matching, perceptual.

The adversarial objective is the standard saturating cross-entropy for the
discriminator; the generator minimizes the non-saturating form (maximize
log D on fakes). Feature matching is the per-layer mean L1 distance between
discriminator features of real and generated pairs, summed over layers and
averaged over the two scales. The perceptual loss is a weighted sum of L1
feature distances from a frozen extractor; a seeded random-weight extractor
stands in when pretrained VGG weights are not available.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .networks import DiscriminatorOutput


@dataclass(frozen=True)
class LossWeights:
    adv: float = 1.0
    fm: float = 10.0
    perceptual: float = 10.0
    mask: float = 1.0


@dataclass
class LossReport:
    step: int
    adv_g: float
    adv_d: float
    fm: float
    perceptual: float
    total_g: float
    mask_bce: float | None = None

    def to_dict(self) -> dict:
        out = {
            "step": self.step,
            "adv_g": self.adv_g,
            "adv_d": self.adv_d,
            "fm": self.fm,
            "perceptual": self.perceptual,
            "total_g": self.total_g,
        }
        if self.mask_bce is not None:
            out["mask_bce"] = self.mask_bce
        return out


def _check_finite(name: str, tensors: list[torch.Tensor]) -> None:
    for t in tensors:
        if not torch.isfinite(t).all():
            raise RuntimeError(
                f"non-finite {name} logits: min={t.min().item():.4g} max={t.max().item():.4g}"
            )


def adversarial_losses(
    d_real: DiscriminatorOutput, d_fake: DiscriminatorOutput
) -> tuple[torch.Tensor, torch.Tensor]:
    """(generator loss, discriminator loss), averaged over patches and scales."""
    _check_finite("real", d_real.logits)
    _check_finite("fake", d_fake.logits)

    real_term = torch.stack(
        [F.binary_cross_entropy_with_logits(l, torch.ones_like(l)) for l in d_real.logits]
    ).mean()
    fake_term = torch.stack(
        [F.binary_cross_entropy_with_logits(l, torch.zeros_like(l)) for l in d_fake.logits]
    ).mean()
    adv_d = real_term + fake_term

    # Non-saturating generator objective: push fake patches toward "real".
    adv_g = torch.stack(
        [F.binary_cross_entropy_with_logits(l, torch.ones_like(l)) for l in d_fake.logits]
    ).mean()
    return adv_g, adv_d


def feature_matching_loss(
    real_features: list[list[torch.Tensor]], fake_features: list[list[torch.Tensor]]
) -> torch.Tensor:
    """Sum over discriminator layers of mean-L1 feature distance, averaged
    over scales. Real features are treated as constants."""
    if len(real_features) != len(fake_features):
        raise ValueError(
            f"scale count mismatch: {len(real_features)} vs {len(fake_features)}"
        )
    per_scale = []
    for scale_real, scale_fake in zip(real_features, fake_features):
        if len(scale_real) != len(scale_fake):
            raise ValueError(
                f"layer count mismatch: {len(scale_real)} vs {len(scale_fake)}"
            )
        total = None
        for fr, ff in zip(scale_real, scale_fake):
            if fr.shape != ff.shape:
                raise ValueError(f"feature shape mismatch: {tuple(fr.shape)} vs {tuple(ff.shape)}")
            term = (fr.detach() - ff).abs().mean()
            total = term if total is None else total + term
        per_scale.append(total)
    return torch.stack(per_scale).mean()


class RandomFeatureExtractor(nn.Module):
    """Frozen multi-scale conv feature extractor with seeded random weights.

    Deterministic stand-in for a pretrained VGG when downloaded weights are
    unavailable; preserves the identities (zero at x == y, symmetry) the
    perceptual loss is tested on.
    """

    name = "random-conv"

    def __init__(self, seed: int = 0, channels: tuple[int, ...] = (16, 32, 64, 64)):
        super().__init__()
        gen = torch.Generator().manual_seed(seed)
        blocks = []
        in_ch = 3
        for out_ch in channels:
            conv = nn.Conv2d(in_ch, out_ch, kernel_size=3, padding=1)
            with torch.no_grad():
                conv.weight.copy_(torch.randn(conv.weight.shape, generator=gen) * 0.2)
                conv.bias.zero_()
            blocks.append(nn.Sequential(conv, nn.LeakyReLU(0.2), nn.AvgPool2d(2)))
            in_ch = out_ch
        self.blocks = nn.ModuleList(blocks)
        self.stage_weights = [1.0] * len(blocks)
        for p in self.parameters():
            p.requires_grad_(False)
        self.eval()

    def forward(self, x: torch.Tensor) -> list[torch.Tensor]:
        feats = []
        for block in self.blocks:
            x = block(x)
            feats.append(x)
        return feats


class VggFeatureExtractor(nn.Module):
    """Pretrained VGG16 multi-stage features (pix2pixHD stage weighting)."""

    name = "vgg16"

    def __init__(self):
        super().__init__()
        from torchvision import models

        vgg = models.vgg16(weights=models.VGG16_Weights.IMAGENET1K_V1).features
        self.slices = nn.ModuleList(
            [vgg[:4], vgg[4:9], vgg[9:16], vgg[16:23], vgg[23:30]]
        )
        self.stage_weights = [1 / 32, 1 / 16, 1 / 8, 1 / 4, 1.0]
        for p in self.parameters():
            p.requires_grad_(False)
        self.eval()

    def forward(self, x: torch.Tensor) -> list[torch.Tensor]:
        feats = []
        for sl in self.slices:
            x = sl(x)
            feats.append(x)
        return feats


def make_perceptual_extractor(kind: str = "auto", seed: int = 0) -> nn.Module:
    """kind: "vgg16", "random", or "auto" (vgg16 with fallback to random)."""
    if kind == "vgg16":
        return VggFeatureExtractor()
    if kind == "random":
        return RandomFeatureExtractor(seed=seed)
    if kind == "auto":
        try:
            return VggFeatureExtractor()
        except Exception:
            return RandomFeatureExtractor(seed=seed)
    raise ValueError(f"unknown perceptual extractor kind {kind!r}")


def perceptual_loss(x: torch.Tensor, y: torch.Tensor, extractor: nn.Module) -> torch.Tensor:
    """Weighted sum of per-stage mean-L1 distances between extractor features.

    Inputs in [-1, 1]; the extractor is frozen, so gradients flow only
    through x and y.
    """
    if x.shape != y.shape:
        raise ValueError(f"image shape mismatch: {tuple(x.shape)} vs {tuple(y.shape)}")
    feats_x = extractor(x)
    feats_y = extractor(y)
    total = None
    for w, fx, fy in zip(extractor.stage_weights, feats_x, feats_y):
        term = w * (fx - fy).abs().mean()
        total = term if total is None else total + term
    return total


def total_generator_loss(
    adv_g: torch.Tensor,
    fm: torch.Tensor,
    perceptual: torch.Tensor,
    weights: LossWeights = LossWeights(),
    mask_bce: torch.Tensor | None = None,
) -> torch.Tensor:
    total = weights.adv * adv_g + weights.fm * fm + weights.perceptual * perceptual
    if mask_bce is not None:
        total = total + weights.mask * mask_bce
    return total
