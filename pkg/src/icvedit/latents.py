"""Latent-grid domain types, a toy pixel<->latent codec, and editing regions.

A latent grid is a dense (frames, height, width, channels) array. Videos are
encoded by block statistics instead of a learned autoencoder: channels 0-2 are
per-block RGB means, channel 3 the per-block luminance standard deviation.
Everything here is pure and value-typed; arrays are frozen after construction.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ShapeError, ValidationError

CODEC_FACTOR = 4
LATENT_CHANNELS = 4
_LUMA = np.array([0.299, 0.587, 0.114], dtype=np.float64)  # Rec. 601


def _frozen_array(values, dtype=None) -> np.ndarray:
    arr = np.array(values, dtype=dtype, copy=True)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class LatentGrid:
    """Immutable (frames, height, width, channels) float array of latents."""

    values: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.values)
        if arr.ndim != 4:
            raise ShapeError(f"latent grid must be 4-D (F, H, W, C), got shape {arr.shape}")
        if min(arr.shape) < 1:
            raise ShapeError(f"all latent dimensions must be >= 1, got {arr.shape}")
        if not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(np.float32)
        if not np.all(np.isfinite(arr)):
            raise ValidationError("latent grid contains non-finite values")
        object.__setattr__(self, "values", _frozen_array(arr))

    @property
    def frames(self) -> int:
        return self.values.shape[0]

    @property
    def height(self) -> int:
        return self.values.shape[1]

    @property
    def width(self) -> int:
        return self.values.shape[2]

    @property
    def channels(self) -> int:
        return self.values.shape[3]

    @property
    def shape(self) -> tuple[int, int, int, int]:
        return tuple(self.values.shape)


@dataclass(frozen=True)
class InContextLatent:
    """Width-wise concatenation [source, target] with the single-video width."""

    grid: LatentGrid
    single_width: int

    def __post_init__(self):
        if self.single_width < 1:
            raise ShapeError(f"single_width must be >= 1, got {self.single_width}")
        if self.grid.width != 2 * self.single_width:
            raise ShapeError(
                f"joint width {self.grid.width} != 2 * single_width ({self.single_width})"
            )

    @property
    def shape(self) -> tuple[int, int, int, int]:
        return self.grid.shape


@dataclass(frozen=True)
class PixelVideo:
    """RGB video, values in [0, 1], shape (frames, height, width, 3)."""

    values: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.values)
        if arr.ndim != 4 or arr.shape[3] != 3:
            raise ShapeError(f"pixel video must be (F, H, W, 3), got shape {arr.shape}")
        if min(arr.shape[:3]) < 1:
            raise ShapeError(f"all video dimensions must be >= 1, got {arr.shape}")
        if not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(np.float32)
        if not np.all(np.isfinite(arr)):
            raise ValidationError("pixel video contains non-finite values")
        if arr.min() < 0.0 or arr.max() > 1.0:
            raise ValidationError(
                f"pixel values must lie in [0, 1], got range [{arr.min()}, {arr.max()}]"
            )
        object.__setattr__(self, "values", _frozen_array(arr))

    @property
    def frames(self) -> int:
        return self.values.shape[0]

    @property
    def height(self) -> int:
        return self.values.shape[1]

    @property
    def width(self) -> int:
        return self.values.shape[2]


@dataclass(frozen=True)
class EditMask:
    """Binary latent-resolution mask, 1 where the edit applies. Shape (F, H, W)."""

    values: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.values)
        if arr.ndim != 3:
            raise ShapeError(f"edit mask must be 3-D (F, H, W), got shape {arr.shape}")
        if not np.isin(arr, (0, 1)).all():
            raise ValidationError("edit mask values must be exactly 0 or 1")
        object.__setattr__(self, "values", _frozen_array(arr, dtype=np.uint8))

    @property
    def frames(self) -> int:
        return self.values.shape[0]

    @property
    def height(self) -> int:
        return self.values.shape[1]

    @property
    def width(self) -> int:
        return self.values.shape[2]

    def union_over_time(self) -> "EditMask":
        """Static mask: the per-frame masks OR-ed together, repeated per frame."""
        merged = self.values.any(axis=0, keepdims=True)
        return EditMask(np.broadcast_to(merged, self.values.shape))


@dataclass(frozen=True)
class RegionPartition:
    """Token index sets over the joint in-context sequence.

    a1: source-half tokens inside the edit region, a2: source-half tokens
    outside it, a3: all target-half tokens, q: target-half tokens inside the
    edit region. Indices follow the fixed (frame, row, column) token order of
    the joint grid.
    """

    a1: np.ndarray
    a2: np.ndarray
    a3: np.ndarray
    q: np.ndarray
    token_count: int

    def __post_init__(self):
        for name in ("a1", "a2", "a3", "q"):
            arr = np.asarray(getattr(self, name), dtype=np.int64)
            object.__setattr__(self, name, _frozen_array(arr))
        if self.token_count % 2 != 0:
            raise ValidationError("joint token count must be even")
        half = self.token_count // 2
        if len(self.a1) + len(self.a2) != half or len(self.a3) != half:
            raise ValidationError("a1 and a2 must partition the source half; a3 the target half")
        if np.intersect1d(self.a1, self.a2).size:
            raise ValidationError("a1 and a2 must be disjoint")
        if not np.isin(self.q, self.a3).all():
            raise ValidationError("q must be a subset of a3")

    @property
    def source_tokens(self) -> np.ndarray:
        """All source-half token indices (a1 ∪ a2), sorted."""
        return np.sort(np.concatenate([self.a1, self.a2]))


def concat_widthwise(src: LatentGrid, tgt: LatentGrid) -> InContextLatent:
    """Form the joint latent [src, tgt] along the width axis."""
    if src.shape != tgt.shape:
        raise ShapeError(f"source/target shape mismatch: {src.shape} vs {tgt.shape}")
    joint = np.concatenate([src.values, tgt.values], axis=2)
    return InContextLatent(LatentGrid(joint), single_width=src.width)


def split_values(values, single_width: int):
    """Split a joint array along width. Works on numpy arrays and torch tensors."""
    if values.shape[-2] != 2 * single_width:
        raise ShapeError(
            f"joint width {values.shape[-2]} != 2 * single_width ({single_width})"
        )
    return values[..., :single_width, :], values[..., single_width:, :]


def split(ic: InContextLatent) -> tuple[LatentGrid, LatentGrid]:
    """Inverse of concat_widthwise: (source half, target half)."""
    left, right = split_values(ic.grid.values, ic.single_width)
    return LatentGrid(left), LatentGrid(right)


def _block_view(arr: np.ndarray, factor: int, what: str) -> np.ndarray:
    frames, height, width = arr.shape[:3]
    if height % factor or width % factor:
        raise ShapeError(
            f"{what} spatial dims ({height}x{width}) must be divisible by factor {factor}"
        )
    rest = arr.shape[3:]
    return arr.reshape(frames, height // factor, factor, width // factor, factor, *rest)


def encode_video(video: PixelVideo, factor: int = CODEC_FACTOR) -> LatentGrid:
    """Block-statistics encoder standing in for a learned VAE.

    Channels 0-2: per-block RGB means; channel 3: per-block luminance standard
    deviation (population). Deterministic and differentiable-free by design.
    """
    v = video.values.astype(np.float64)
    blocks = _block_view(v, factor, "video")
    rgb = blocks.mean(axis=(2, 4))
    luma = v @ _LUMA
    luma_blocks = _block_view(luma, factor, "video")
    spread = luma_blocks.std(axis=(2, 4))
    latent = np.concatenate([rgb, spread[..., None]], axis=-1)
    return LatentGrid(latent.astype(np.float32))


def decode_video(latent: LatentGrid, factor: int = CODEC_FACTOR) -> PixelVideo:
    """Nearest-neighbor upsampling of the RGB channels, clamped to [0, 1]."""
    if latent.channels != LATENT_CHANNELS:
        raise ShapeError(f"decoder expects {LATENT_CHANNELS} channels, got {latent.channels}")
    rgb = latent.values[..., :3]
    up = rgb.repeat(factor, axis=1).repeat(factor, axis=2)
    return PixelVideo(np.clip(up, 0.0, 1.0).astype(np.float32))


def _two_means(values: np.ndarray, max_iters: int = 100) -> np.ndarray:
    """1-D 2-means with deterministic min/max center init.

    Returns a boolean array, True for membership in the higher-center cluster.
    Ties at the midpoint go to the higher cluster. Assignment depends only on
    the ordering of the values, so positive rescaling leaves it unchanged.
    """
    lo = float(values.min())
    hi = float(values.max())
    assign = values >= (lo + hi) / 2.0
    for _ in range(max_iters):
        lo = float(values[~assign].mean())
        hi = float(values[assign].mean())
        new_assign = values >= (lo + hi) / 2.0
        if np.array_equal(new_assign, assign):
            break
        assign = new_assign
    return assign


def binarize_mask(
    pixel_mask: np.ndarray,
    factor: int = CODEC_FACTOR,
    *,
    seed: int | None = None,
    union_over_time: bool = False,
) -> EditMask:
    """Project a binary pixel mask to latent resolution and re-binarize.

    The pixel mask is block-averaged to the latent grid (mirroring how masks
    ride through the codec) and the resulting fractional coverages are split
    into two clusters by k-means with k=2; the higher cluster becomes 1. If
    every averaged value is equal the constant is rounded (>= 0.5 -> 1).

    ``seed`` is accepted for interface stability; the min/max center
    initialization is deterministic and does not consume randomness.
    """
    del seed
    pm = np.asarray(pixel_mask)
    if pm.ndim != 3:
        raise ShapeError(f"pixel mask must be 3-D (F, H, W), got shape {pm.shape}")
    if not np.isin(pm, (0, 1)).all():
        raise ValidationError("pixel mask values must be exactly 0 or 1")
    avg = _block_view(pm.astype(np.float64), factor, "pixel mask").mean(axis=(2, 4))
    if avg.max() == avg.min():
        constant = 1 if avg.flat[0] >= 0.5 else 0
        out = np.full(avg.shape, constant, dtype=np.uint8)
    else:
        assign = _two_means(avg.ravel())
        out = assign.reshape(avg.shape).astype(np.uint8)
    mask = EditMask(out)
    return mask.union_over_time() if union_over_time else mask


def build_partition(mask: EditMask, single_width: int) -> RegionPartition:
    """Derive the joint-sequence token regions from a single-video edit mask.

    Tokens are enumerated in (frame, row, column) order over the joint grid of
    width 2 * single_width; the source half occupies columns [0, single_width).
    """
    if mask.width != single_width:
        raise ShapeError(f"mask width {mask.width} != single_width {single_width}")
    frames, height, width = mask.values.shape
    idx = np.arange(frames * height * 2 * width, dtype=np.int64).reshape(frames, height, 2 * width)
    hot = mask.values.astype(bool)
    # boolean indexing walks in row-major order, so results are already sorted
    a1 = idx[:, :, :width][hot]
    a2 = idx[:, :, :width][~hot]
    a3 = idx[:, :, width:].ravel()
    q = idx[:, :, width:][hot]
    return RegionPartition(a1=a1, a2=a2, a3=a3, q=q, token_count=idx.size)
