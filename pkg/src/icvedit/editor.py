"""Inference: apply a trained checkpoint to a source video plus instruction."""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .errors import ShapeError
from .flow import SamplerConfig, euler_sample, sample_initial_noise
from .instructions import Instruction
from .latents import PixelVideo, decode_video, encode_video, split
from .model import VelocityTransformer
from .trainer import load_model


@dataclass(frozen=True)
class EditRequest:
    source: PixelVideo
    instruction: Instruction
    checkpoint_path: str | Path
    sampler: SamplerConfig = field(default_factory=SamplerConfig)
    codec_factor: int = 4

    def __post_init__(self):
        if self.source.height % self.codec_factor or self.source.width % self.codec_factor:
            raise ShapeError(
                f"source dims {self.source.values.shape[:3]} not divisible by "
                f"codec factor {self.codec_factor}"
            )


def model_velocity_fn(model: VelocityTransformer, instruction: Instruction):
    """Adapt a trained model to the sampler's (x, cond, t) -> velocity callable."""

    def velocity(x: np.ndarray, cond: np.ndarray, t: float) -> np.ndarray:
        with torch.no_grad():
            out = model(x, cond, instruction, t, capture=False)
        return out.velocity.numpy().astype(x.dtype)

    return velocity


def edit_with_model(
    model: VelocityTransformer,
    source: PixelVideo,
    instruction: Instruction,
    sampler: SamplerConfig,
    codec_factor: int = 4,
) -> PixelVideo:
    """Run the joint-denoising edit with an already-loaded model."""
    src_latent = encode_video(source, codec_factor)
    noise = sample_initial_noise(
        src_latent.frames, src_latent.height, src_latent.width, src_latent.channels,
        seed=sampler.seed,
    )
    final = euler_sample(model_velocity_fn(model, instruction), src_latent, noise, sampler)
    _, target_half = split(final)
    return decode_video(target_half, codec_factor)


def edit_video(req: EditRequest) -> PixelVideo:
    """Load the checkpoint and return the edited video (same dims as the source)."""
    model, _ = load_model(req.checkpoint_path)
    model.eval()
    return edit_with_model(model, req.source, req.instruction, req.sampler, req.codec_factor)


def write_video_file(video: PixelVideo, path: str | Path) -> None:
    """Raw array container: a single array block holding the (F, H, W, 3) video."""
    from .containers import write_array_block

    with open(path, "wb") as f:
        write_array_block(f, video.values.astype(np.float32))


def read_video_file(path: str | Path) -> PixelVideo:
    from .containers import read_array_block

    with open(path, "rb") as f:
        arr = read_array_block(f)
    if arr.ndim != 4 or arr.shape[-1] != 3:
        raise ShapeError(f"video container holds shape {arr.shape}, expected (F, H, W, 3)")
    return PixelVideo(arr.astype(np.float32))
