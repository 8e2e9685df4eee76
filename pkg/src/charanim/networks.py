"""Generator and discriminator networks.

The generator encodes each keypoint layer with a single shared encoder, so
its parameter count does not depend on the number of layers. A small global
network embeds the combined keypoint map and predicts one multiplicative
scale map per layer; scaled layer features are concatenated in depth order
and decoded to the image (and optionally a foreground-mask logit map).

The discriminator is a pair of patch discriminators over [condition; image],
one at full resolution and one on a 2x downsampled copy.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, asdict
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .dataset import KeypointSchema
from .render import ConditioningStack

GENERATOR_MODES = ("full", "layer_no_scaling", "no_layer")


@dataclass(frozen=True)
class GeneratorConfig:
    base_channels: int = 32
    num_downsamples: int = 3
    num_residual_blocks: int = 6
    predict_mask: bool = False
    layer_count: int = 3
    mode: str = "full"

    def __post_init__(self):
        if self.mode not in GENERATOR_MODES:
            raise ValueError(f"mode must be one of {GENERATOR_MODES}, got {self.mode!r}")
        if self.layer_count < 1:
            raise ValueError("layer_count must be >= 1")


@dataclass
class GeneratorOutput:
    image: torch.Tensor  # (B, 3, H, W) in [-1, 1]
    mask_logits: torch.Tensor | None  # (B, 1, H, W) when predict_mask


@dataclass
class DiscriminatorOutput:
    logits: list[torch.Tensor]  # per scale, (B, 1, h, w) patch logits
    features: list[list[torch.Tensor]]  # per scale, T intermediate feature maps


def _norm(channels: int) -> nn.Module:
    return nn.InstanceNorm2d(channels, affine=False)


class ResidualBlock(nn.Module):
    def __init__(self, channels: int):
        super().__init__()
        self.block = nn.Sequential(
            nn.ReflectionPad2d(1),
            nn.Conv2d(channels, channels, kernel_size=3),
            _norm(channels),
            nn.ReLU(True),
            nn.ReflectionPad2d(1),
            nn.Conv2d(channels, channels, kernel_size=3),
            _norm(channels),
        )

    def forward(self, x):
        return x + self.block(x)


class LayerEncoder(nn.Module):
    """Downsampling encoder shared across all keypoint layers."""

    def __init__(self, base_channels: int, num_downsamples: int):
        super().__init__()
        layers: list[nn.Module] = [
            nn.ReflectionPad2d(3),
            nn.Conv2d(3, base_channels, kernel_size=7),
            _norm(base_channels),
            nn.ReLU(True),
        ]
        ch = base_channels
        for _ in range(num_downsamples):
            layers += [
                nn.Conv2d(ch, ch * 2, kernel_size=3, stride=2, padding=1),
                _norm(ch * 2),
                nn.ReLU(True),
            ]
            ch *= 2
        self.net = nn.Sequential(*layers)
        self.out_channels = ch

    def forward(self, x):
        return self.net(x)


class GlobalScaleNet(nn.Module):
    """Embeds the combined keypoint map and emits per-layer scale-map logits."""

    def __init__(self, base_channels: int, num_downsamples: int, layer_count: int, feat_channels: int):
        super().__init__()
        ch = max(base_channels // 2, 8)
        layers: list[nn.Module] = [
            nn.Conv2d(3, ch, kernel_size=3, padding=1),
            nn.ReLU(True),
        ]
        for _ in range(num_downsamples):
            layers += [
                nn.Conv2d(ch, ch * 2, kernel_size=3, stride=2, padding=1),
                _norm(ch * 2),
                nn.ReLU(True),
            ]
            ch *= 2
        layers += [nn.Conv2d(ch, layer_count * feat_channels, kernel_size=3, padding=1)]
        self.net = nn.Sequential(*layers)
        self.layer_count = layer_count
        self.feat_channels = feat_channels

    def forward(self, combined):
        logits = self.net(combined)
        # sigmoid * 2 keeps scales in (0, 2) with the identity at logit 0
        scales = torch.sigmoid(logits) * 2.0
        return list(torch.chunk(scales, self.layer_count, dim=1))


class Generator(nn.Module):
    """Keypoint-conditioned image generator.

    Inputs are conditioning maps in [0, 1]; they are shifted to [-1, 1]
    internally. The output image is tanh-activated in [-1, 1]. There is no
    noise input: generation is a deterministic function of the condition.
    """

    def __init__(self, cfg: GeneratorConfig):
        super().__init__()
        self.cfg = cfg
        self.encoder = LayerEncoder(cfg.base_channels, cfg.num_downsamples)
        feat_ch = self.encoder.out_channels

        if cfg.mode == "full":
            self.scale_net = GlobalScaleNet(
                cfg.base_channels, cfg.num_downsamples, cfg.layer_count, feat_ch
            )
        else:
            self.scale_net = None

        fused_in = feat_ch if cfg.mode == "no_layer" else feat_ch * cfg.layer_count
        self.fuse = nn.Sequential(
            nn.Conv2d(fused_in, feat_ch, kernel_size=3, padding=1),
            _norm(feat_ch),
            nn.ReLU(True),
        )
        self.blocks = nn.Sequential(*[ResidualBlock(feat_ch) for _ in range(cfg.num_residual_blocks)])

        ups: list[nn.Module] = []
        ch = feat_ch
        for _ in range(cfg.num_downsamples):
            ups += [
                nn.ConvTranspose2d(ch, ch // 2, kernel_size=3, stride=2, padding=1, output_padding=1),
                _norm(ch // 2),
                nn.ReLU(True),
            ]
            ch //= 2
        self.up = nn.Sequential(*ups)
        self.to_image = nn.Sequential(
            nn.ReflectionPad2d(3), nn.Conv2d(ch, 3, kernel_size=7), nn.Tanh()
        )
        self.to_mask = (
            nn.Sequential(nn.ReflectionPad2d(3), nn.Conv2d(ch, 1, kernel_size=7))
            if cfg.predict_mask
            else None
        )
        self.apply(_init_weights)

    def forward(self, layer_maps: torch.Tensor, combined_map: torch.Tensor) -> GeneratorOutput:
        """layer_maps: (B, L, 3, H, W); combined_map: (B, 3, H, W), both in [0, 1]."""
        cfg = self.cfg
        b, l, c, h, w = layer_maps.shape
        if l != cfg.layer_count or c != 3:
            raise ValueError(
                f"expected (B, {cfg.layer_count}, 3, H, W) layer maps, got {tuple(layer_maps.shape)}"
            )
        if combined_map.shape != (b, 3, h, w):
            raise ValueError(
                f"combined map {tuple(combined_map.shape)} does not match layers "
                f"{tuple(layer_maps.shape)}"
            )
        div = 2 ** cfg.num_downsamples
        if h % div or w % div:
            raise ValueError(f"resolution {w}x{h} not divisible by 2^{cfg.num_downsamples}")

        if cfg.mode == "no_layer":
            fused_in = self.encoder(combined_map * 2.0 - 1.0)
        else:
            feats = [self.encoder(layer_maps[:, i] * 2.0 - 1.0) for i in range(l)]
            if cfg.mode == "full":
                scales = self.scale_net(combined_map * 2.0 - 1.0)
                feats = [f * s for f, s in zip(feats, scales)]
            fused_in = torch.cat(feats, dim=1)

        x = self.up(self.blocks(self.fuse(fused_in)))
        image = self.to_image(x)
        mask_logits = self.to_mask(x) if self.to_mask is not None else None
        return GeneratorOutput(image=image, mask_logits=mask_logits)


class PatchDiscriminator(nn.Module):
    """PatchGAN classifier over a 6-channel [condition; image] input.

    Stages are kept separate so intermediate features are available for the
    feature-matching loss.
    """

    def __init__(self, in_channels: int = 6, base_channels: int = 64, n_layers: int = 3):
        super().__init__()
        stages = [
            nn.Sequential(
                nn.Conv2d(in_channels, base_channels, kernel_size=4, stride=2, padding=1),
                nn.LeakyReLU(0.2, True),
            )
        ]
        ch = base_channels
        for n in range(1, n_layers):
            stride = 2 if n < n_layers - 1 else 1
            out = min(ch * 2, 512)
            stages.append(
                nn.Sequential(
                    nn.Conv2d(ch, out, kernel_size=4, stride=stride, padding=1),
                    _norm(out),
                    nn.LeakyReLU(0.2, True),
                )
            )
            ch = out
        self.stages = nn.ModuleList(stages)
        self.head = nn.Conv2d(ch, 1, kernel_size=4, stride=1, padding=1)
        self.apply(_init_weights)

    def forward(self, x) -> tuple[torch.Tensor, list[torch.Tensor]]:
        features = []
        for stage in self.stages:
            x = stage(x)
            features.append(x)
        return self.head(x), features


class TwinPatchDiscriminator(nn.Module):
    """Two patch discriminators: full resolution and 0.5x downsampled."""

    def __init__(self, base_channels: int = 64, n_layers: int = 3):
        super().__init__()
        self.scale_full = PatchDiscriminator(6, base_channels, n_layers)
        self.scale_half = PatchDiscriminator(6, base_channels, n_layers)

    def forward(self, condition: torch.Tensor, image: torch.Tensor) -> DiscriminatorOutput:
        """condition in [0, 1], image in [-1, 1], same spatial size."""
        if condition.shape[-2:] != image.shape[-2:]:
            raise ValueError(
                f"condition {tuple(condition.shape[-2:])} and image "
                f"{tuple(image.shape[-2:])} resolutions differ"
            )
        x = torch.cat([condition * 2.0 - 1.0, image], dim=1)
        logits_full, feats_full = self.scale_full(x)
        x_half = F.avg_pool2d(x, kernel_size=3, stride=2, padding=1, count_include_pad=False)
        logits_half, feats_half = self.scale_half(x_half)
        return DiscriminatorOutput(
            logits=[logits_full, logits_half], features=[feats_full, feats_half]
        )


def _init_weights(module: nn.Module) -> None:
    if isinstance(module, (nn.Conv2d, nn.ConvTranspose2d)):
        nn.init.normal_(module.weight, 0.0, 0.02)
        if module.bias is not None:
            nn.init.zeros_(module.bias)


def stack_to_tensors(
    stack: ConditioningStack, device: str | torch.device = "cpu"
) -> tuple[torch.Tensor, torch.Tensor]:
    """Conditioning stack -> ((L, 3, H, W), (3, H, W)) float tensors in [0, 1]."""
    layers = torch.from_numpy(np.stack([m.transpose(2, 0, 1) for m in stack.layer_maps]))
    combined = torch.from_numpy(stack.combined_map.transpose(2, 0, 1))
    return layers.to(device), combined.to(device)


def image_to_tensor(image: np.ndarray, device: str | torch.device = "cpu") -> torch.Tensor:
    """(H, W, 3) [0, 1] numpy image -> (3, H, W) tensor in [-1, 1]."""
    return torch.from_numpy(image.transpose(2, 0, 1).copy()).to(device) * 2.0 - 1.0


def tensor_to_image(tensor: torch.Tensor) -> np.ndarray:
    """(3, H, W) [-1, 1] tensor -> (H, W, 3) float32 [0, 1] numpy image."""
    arr = ((tensor.detach().cpu().float() + 1.0) / 2.0).clamp(0.0, 1.0).numpy()
    return arr.transpose(1, 2, 0)


@dataclass
class Checkpoint:
    schema_hash: str
    schema_json: dict
    generator_config: GeneratorConfig
    generator_state: dict
    discriminator_state: dict | None
    iteration: int
    working_resolution: tuple[int, int]
    name: str = "character"


def save_checkpoint(ckpt: Checkpoint, path: str | Path) -> None:
    payload = {
        "schema_hash": ckpt.schema_hash,
        "schema_json": json.dumps(ckpt.schema_json),
        "generator_config": asdict(ckpt.generator_config),
        "generator_state": ckpt.generator_state,
        "discriminator_state": ckpt.discriminator_state,
        "iteration": ckpt.iteration,
        "working_resolution": list(ckpt.working_resolution),
        "name": ckpt.name,
    }
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save(payload, path)


def load_checkpoint(path: str | Path) -> Checkpoint:
    payload = torch.load(path, map_location="cpu", weights_only=False)
    return Checkpoint(
        schema_hash=payload["schema_hash"],
        schema_json=json.loads(payload["schema_json"]),
        generator_config=GeneratorConfig(**payload["generator_config"]),
        generator_state=payload["generator_state"],
        discriminator_state=payload.get("discriminator_state"),
        iteration=payload["iteration"],
        working_resolution=tuple(payload["working_resolution"]),
        name=payload.get("name", "character"),
    )


def verify_schema_hash(ckpt: Checkpoint, schema: KeypointSchema) -> None:
    actual = schema.content_hash()
    if actual != ckpt.schema_hash:
        raise ValueError(
            f"checkpoint was trained on schema {ckpt.schema_hash[:12]}..., "
            f"got schema {actual[:12]}..."
        )
