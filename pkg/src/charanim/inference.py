"""Checkpoint-backed inference: pose in, image (and optional mask) out."""

from __future__ import annotations

from pathlib import Path

import numpy as np
import torch
from PIL import Image

from .dataset import KeypointSchema, Pose, _parse_schema
from .networks import Checkpoint, Generator, load_checkpoint, stack_to_tensors, tensor_to_image
from .render import render_stack


def schema_from_checkpoint(ckpt: Checkpoint) -> KeypointSchema:
    return _parse_schema(ckpt.schema_json, Path("<checkpoint>"), color_seed=0)


class InferenceSession:
    """Frozen generator plus its schema; safe for concurrent reads.

    Poses are given at the schema's reference resolution; generation runs at
    the checkpoint's working resolution and `generate` upscales back to
    reference resolution.
    """

    def __init__(self, ckpt: Checkpoint, device: str = "cpu"):
        self.checkpoint = ckpt
        self.schema = schema_from_checkpoint(ckpt)
        self.device = torch.device(device)
        self.generator = Generator(ckpt.generator_config).to(self.device)
        self.generator.load_state_dict(ckpt.generator_state)
        self.generator.eval()
        for p in self.generator.parameters():
            p.requires_grad_(False)

    @classmethod
    def from_file(cls, path: str | Path, device: str = "cpu") -> "InferenceSession":
        return cls(load_checkpoint(path), device)

    @property
    def predicts_mask(self) -> bool:
        return self.checkpoint.generator_config.predict_mask

    def _forward(self, pose: Pose):
        stack = render_stack(pose, self.schema, self.checkpoint.working_resolution)
        layers, combined = stack_to_tensors(stack, self.device)
        with torch.no_grad():
            return self.generator(layers[None], combined[None])

    def generate_working(self, pose: Pose) -> np.ndarray:
        """Image at working resolution, float32 (H, W, 3) in [0, 1]."""
        return tensor_to_image(self._forward(pose).image[0])

    def generate(self, pose: Pose) -> np.ndarray:
        """Image upscaled to the schema's reference resolution."""
        img = self.generate_working(pose)
        w, h = self.schema.reference_resolution
        if img.shape[:2] == (h, w):
            return img
        pil = Image.fromarray(np.clip(np.rint(img * 255), 0, 255).astype(np.uint8))
        return np.asarray(pil.resize((w, h), Image.BILINEAR), dtype=np.float32) / 255.0

    def predict_mask(self, pose: Pose) -> np.ndarray:
        """Binary mask at working resolution (logits thresholded at 0)."""
        out = self._forward(pose)
        if out.mask_logits is None:
            raise ValueError("checkpoint was trained without mask prediction")
        return (out.mask_logits[0, 0] > 0).cpu().numpy().astype(np.uint8)

    def mask_to_reference(self, mask: np.ndarray) -> np.ndarray:
        w, h = self.schema.reference_resolution
        if mask.shape == (h, w):
            return mask
        pil = Image.fromarray((mask * 255).astype(np.uint8), mode="L")
        return (np.asarray(pil.resize((w, h), Image.NEAREST)) >= 128).astype(np.uint8)

    def mask_fn_working(self):
        """Pose -> binary mask callable for the connectivity repair loop.

        Positions stay in reference coordinates; rendering scales them, so
        the returned masks are at working resolution.
        """
        return self.predict_mask
