"""End-to-end adversarial training loop.

Each iteration draws a batch with replacement, re-draws the augmentation
subset, renders conditioning stacks from the augmented poses, then takes one
discriminator step followed by one generator step. Both networks see
augmented pairs: augmenting only the real side teaches the discriminator
that augmentation artifacts mean "real", so fakes are generated from the
augmented conditions too.
"""

from __future__ import annotations

import json
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from .augment import AugmentConfig, augment_sample
from .dataset import CharacterDataset, resample_dataset
from .losses import (
    LossReport,
    LossWeights,
    adversarial_losses,
    feature_matching_loss,
    make_perceptual_extractor,
    perceptual_loss,
    total_generator_loss,
)
from .networks import (
    Checkpoint,
    Generator,
    GeneratorConfig,
    TwinPatchDiscriminator,
    save_checkpoint,
    stack_to_tensors,
)
from .render import render_stack


@dataclass
class TrainConfig:
    iterations: int = 30000
    batch_size: int = 4
    lr_g: float = 2e-4
    lr_d: float = 2e-4
    betas: tuple[float, float] = (0.5, 0.999)
    working_resolution: tuple[int, int] = (256, 256)
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    generator: GeneratorConfig = field(default_factory=GeneratorConfig)
    loss_weights: LossWeights = field(default_factory=LossWeights)
    discriminator_channels: int = 64
    perceptual_extractor: str = "auto"
    checkpoint_every: int = 5000
    seed: int = 0
    device: str = "cpu"

    def __post_init__(self):
        if self.iterations <= 0:
            raise ValueError("iterations must be > 0")
        div = 2 ** self.generator.num_downsamples
        w, h = self.working_resolution
        if w % div or h % div:
            raise ValueError(
                f"working_resolution {w}x{h} must be divisible by 2^{self.generator.num_downsamples}"
            )


def train_config_to_dict(cfg: TrainConfig) -> dict:
    out = asdict(cfg)
    out["betas"] = list(cfg.betas)
    out["working_resolution"] = list(cfg.working_resolution)
    return out


def train_config_from_dict(raw: dict) -> TrainConfig:
    raw = dict(raw)
    if "augment" in raw:
        raw["augment"] = AugmentConfig(**raw["augment"])
    if "generator" in raw:
        raw["generator"] = GeneratorConfig(**raw["generator"])
    if "loss_weights" in raw:
        raw["loss_weights"] = LossWeights(**raw["loss_weights"])
    if "betas" in raw:
        raw["betas"] = tuple(raw["betas"])
    if "working_resolution" in raw:
        raw["working_resolution"] = tuple(raw["working_resolution"])
    return TrainConfig(**raw)


def load_train_config(path: str | Path) -> TrainConfig:
    return train_config_from_dict(json.loads(Path(path).read_text()))


@dataclass
class TrainResult:
    checkpoint: Checkpoint
    reports: list[LossReport]


def _batch_tensors(samples, schema, size, device, predict_mask):
    layers, combined, images, masks = [], [], [], []
    for s in samples:
        stack = render_stack(s.pose, schema, size)
        l, c = stack_to_tensors(stack, device)
        layers.append(l)
        combined.append(c)
        images.append(torch.from_numpy(s.image.transpose(2, 0, 1).copy()))
        if predict_mask:
            masks.append(torch.from_numpy(s.mask.astype(np.float32)[None]))
    x = torch.stack(images).to(device) * 2.0 - 1.0
    k_layers = torch.stack(layers)
    k_combined = torch.stack(combined)
    m = torch.stack(masks).to(device) if predict_mask else None
    return k_layers, k_combined, x, m


def train(
    dataset: CharacterDataset,
    cfg: TrainConfig,
    out_dir: str | Path | None = None,
    name: str = "character",
    progress: bool = False,
) -> TrainResult:
    """Train generator and discriminator on one character.

    Fully reproducible given cfg.seed on CPU. Writes versioned checkpoints
    and a JSONL loss log under out_dir when given; always returns the final
    checkpoint in memory.
    """
    gen_cfg = replace(cfg.generator, layer_count=dataset.schema.layer_count)
    if gen_cfg.predict_mask and not dataset.has_masks:
        raise ValueError("predict_mask requires a dataset where every sample has a mask")

    torch.manual_seed(cfg.seed)
    rng = np.random.default_rng(cfg.seed)
    device = torch.device(cfg.device)

    work = resample_dataset(dataset, cfg.working_resolution)
    schema = work.schema
    background = schema.background_color

    generator = Generator(gen_cfg).to(device)
    discriminator = TwinPatchDiscriminator(base_channels=cfg.discriminator_channels).to(device)
    extractor = make_perceptual_extractor(cfg.perceptual_extractor, seed=cfg.seed).to(device)

    opt_g = torch.optim.Adam(generator.parameters(), lr=cfg.lr_g, betas=cfg.betas)
    opt_d = torch.optim.Adam(discriminator.parameters(), lr=cfg.lr_d, betas=cfg.betas)

    out_path = Path(out_dir) if out_dir is not None else None
    log_fh = None
    if out_path is not None:
        out_path.mkdir(parents=True, exist_ok=True)
        (out_path / "train_config.json").write_text(json.dumps(train_config_to_dict(cfg), indent=2))
        log_fh = open(out_path / "train_log.jsonl", "a")

    def make_ckpt(iteration):
        return Checkpoint(
            schema_hash=dataset.schema.content_hash(),
            schema_json=dataset.schema.to_json_dict(),
            generator_config=gen_cfg,
            generator_state={k: v.cpu() for k, v in generator.state_dict().items()},
            discriminator_state={k: v.cpu() for k, v in discriminator.state_dict().items()},
            iteration=iteration,
            working_resolution=cfg.working_resolution,
            name=name,
        )

    reports: list[LossReport] = []
    n = len(work.samples)
    started = time.time()
    try:
        for step in range(1, cfg.iterations + 1):
            idx = rng.integers(0, n, size=cfg.batch_size)
            batch = [
                augment_sample(work.samples[int(i)], cfg.augment, rng, background)
                for i in idx
            ]
            k_layers, k_combined, x, m = _batch_tensors(
                batch, schema, cfg.working_resolution, device, gen_cfg.predict_mask
            )

            fake = generator(k_layers, k_combined)

            # discriminator step (generator frozen via detach)
            d_real = discriminator(k_combined, x)
            d_fake = discriminator(k_combined, fake.image.detach())
            _, adv_d = adversarial_losses(d_real, d_fake)
            opt_d.zero_grad(set_to_none=True)
            adv_d.backward()
            opt_d.step()

            # generator step against the updated discriminator
            with torch.no_grad():
                d_real_g = discriminator(k_combined, x)
            d_fake_g = discriminator(k_combined, fake.image)
            adv_g, _ = adversarial_losses(d_real_g, d_fake_g)
            fm = feature_matching_loss(d_real_g.features, d_fake_g.features)
            perc = perceptual_loss(fake.image, x, extractor)
            mask_bce = (
                F.binary_cross_entropy_with_logits(fake.mask_logits, m)
                if gen_cfg.predict_mask
                else None
            )
            total = total_generator_loss(adv_g, fm, perc, cfg.loss_weights, mask_bce)
            opt_g.zero_grad(set_to_none=True)
            total.backward()
            opt_g.step()

            report = LossReport(
                step=step,
                adv_g=adv_g.item(),
                adv_d=adv_d.item(),
                fm=fm.item(),
                perceptual=perc.item(),
                total_g=total.item(),
                mask_bce=mask_bce.item() if mask_bce is not None else None,
            )
            reports.append(report)
            if log_fh is not None:
                log_fh.write(json.dumps(report.to_dict()) + "\n")

            if not np.isfinite(report.total_g) or not np.isfinite(report.adv_d):
                tail = "\n".join(json.dumps(r.to_dict()) for r in reports[-10:])
                raise RuntimeError(f"non-finite loss at step {step}; last reports:\n{tail}")

            if progress and (step % 100 == 0 or step == 1):
                rate = step / max(time.time() - started, 1e-9)
                print(
                    f"step {step}/{cfg.iterations} adv_d={report.adv_d:.3f} "
                    f"adv_g={report.adv_g:.3f} fm={report.fm:.3f} perc={report.perceptual:.3f} "
                    f"({rate:.2f} it/s)",
                    flush=True,
                )

            if out_path is not None and cfg.checkpoint_every > 0 and step % cfg.checkpoint_every == 0:
                save_checkpoint(make_ckpt(step), out_path / f"ckpt_{step:06d}.pt")
    finally:
        if log_fh is not None:
            log_fh.close()

    final = make_ckpt(cfg.iterations)
    if out_path is not None:
        save_checkpoint(final, out_path / "checkpoint.pt")
    return TrainResult(checkpoint=final, reports=reports)
