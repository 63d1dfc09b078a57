"""Training objectives: flow matching plus the two regional constraints.

All functions accept either numpy arrays or torch tensors and return a scalar
of the same backend, so the trainer can backpropagate through them while tests
exercise them on plain arrays. Empty regions contribute 0 to their mean by
convention (style edits have no non-edit region, for example).
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .errors import ShapeError, ValidationError
from .latents import EditMask, RegionPartition
from .model import AttentionTrace

REGION_MEAN_MODES = ("masked", "global")


@dataclass(frozen=True)
class LossConfig:
    lambda1: float = 1e-3  # latent-constraint weight
    lambda2: float = 1e-3  # attention-constraint weight
    region_mean_mode: str = "masked"
    attn_layers: tuple[int, ...] | None = None  # None = all layers
    enable_latent: bool = True
    enable_attn: bool = True

    def __post_init__(self):
        for name in ("lambda1", "lambda2"):
            value = getattr(self, name)
            if not np.isfinite(value) or value < 0:
                raise ValidationError(f"{name} must be finite and >= 0, got {value}")
        if self.region_mean_mode not in REGION_MEAN_MODES:
            raise ValidationError(
                f"region_mean_mode must be one of {REGION_MEAN_MODES}, got {self.region_mean_mode!r}"
            )


@dataclass(frozen=True)
class LossBreakdown:
    """Per-term loss record; serialized verbatim into the JSONL training log."""

    l_ic: float
    l_latent: float
    l_edit: float
    l_global: float
    l_attn: float
    total: float

    def to_dict(self) -> dict[str, float]:
        return {
            "l_ic": self.l_ic,
            "l_latent": self.l_latent,
            "l_edit": self.l_edit,
            "l_global": self.l_global,
            "l_attn": self.l_attn,
            "total": self.total,
        }


def _check_same_shape(a, b, op: str) -> None:
    if tuple(a.shape) != tuple(b.shape):
        raise ShapeError(f"{op}: shape mismatch {tuple(a.shape)} vs {tuple(b.shape)}")


def _zero_like(ref):
    """Backend-matching scalar zero that stays on the autograd graph."""
    return ref.sum() * 0


def flow_matching_loss(u, v):
    """Mean squared error between predicted and target velocity."""
    _check_same_shape(u, v, "flow_matching_loss")
    return ((u - v) ** 2).mean()


def latent_diff(src_hat, tgt_hat):
    """Elementwise absolute difference of the denoised halves."""
    _check_same_shape(src_hat, tgt_hat, "latent_diff")
    return abs(tgt_hat - src_hat)


def latent_region_loss(diff, mask: EditMask, mode: str = "masked"):
    """Non-edit-region mean discrepancy minus edit-region mean discrepancy.

    ``masked`` normalizes each mean by its own region size (empty region
    contributes 0); ``global`` divides both masked sums by the full element
    count, i.e. mean(diff*(1-M)) - mean(diff*M) taken literally.
    """
    if mode not in REGION_MEAN_MODES:
        raise ValidationError(f"unknown region mean mode {mode!r}")
    m = mask.values
    if tuple(diff.shape[:3]) != m.shape:
        raise ShapeError(f"mask shape {m.shape} does not match diff {tuple(diff.shape)}")
    if torch.is_tensor(diff):
        hot = torch.from_numpy(m.astype(bool))
        weights = torch.from_numpy(m.astype(np.float64)).to(diff.dtype)[..., None]
    else:
        hot = m.astype(bool)
        weights = m.astype(diff.dtype)[..., None]
    if mode == "global":
        return (diff * (1 - weights)).mean() - (diff * weights).mean()
    edit = diff[hot]
    non_edit = diff[~hot]
    edit_mean = edit.mean() if edit.shape[0] else _zero_like(diff)
    non_edit_mean = non_edit.mean() if non_edit.shape[0] else _zero_like(diff)
    return non_edit_mean - edit_mean


def _selected_layers(trace: AttentionTrace, layers) -> list:
    if layers is None:
        return list(trace.layers)
    return [trace.layers[i] for i in layers]


def _region_mean(probs_list: list, q_idx: np.ndarray, k_idx: np.ndarray):
    """Mean attention probability over (query in q, key in k), all layers/heads."""
    ref = probs_list[0]
    if len(q_idx) == 0 or len(k_idx) == 0:
        return _zero_like(ref)
    if torch.is_tensor(ref):
        q = torch.from_numpy(np.array(q_idx, dtype=np.int64))  # copy: inputs may be frozen
        k = torch.from_numpy(np.array(k_idx, dtype=np.int64))
        chunks = [p[..., q, :][..., k].reshape(-1) for p in probs_list]
        return torch.cat(chunks).mean()
    chunks = [np.asarray(p)[..., q_idx, :][..., k_idx].reshape(-1) for p in probs_list]
    return np.concatenate(chunks).mean()


def _check_trace(trace: AttentionTrace, part: RegionPartition) -> None:
    for layer in trace.layers:
        if layer.shape[-1] != part.token_count or layer.shape[-2] != part.token_count:
            raise ShapeError(
                f"trace covers {tuple(layer.shape[-2:])} tokens, partition has "
                f"{part.token_count}"
            )


def attention_edit_loss(trace: AttentionTrace, part: RegionPartition, layers=None):
    """mean Attn(q -> source edit region) - mean Attn(q -> source non-edit region)."""
    _check_trace(trace, part)
    probs = _selected_layers(trace, layers)
    return _region_mean(probs, part.q, part.a1) - _region_mean(probs, part.q, part.a2)


def attention_global_loss(trace: AttentionTrace, part: RegionPartition, layers=None):
    """mean Attn(q -> entire source half) - mean Attn(q -> entire target half)."""
    _check_trace(trace, part)
    probs = _selected_layers(trace, layers)
    return _region_mean(probs, part.q, part.source_tokens) - _region_mean(probs, part.q, part.a3)


def latent_region_losses_batched(diff: torch.Tensor, masks: list[EditMask], mode: str = "masked") -> torch.Tensor:
    """Per-sample latent_region_loss over a batched diff, as one tensor op.

    Equivalent to stacking latent_region_loss(diff[i], masks[i], mode); kept
    separate because the hot training path needs the sums expressed as dense
    multiplies (the elementwise reference does scatter-adds on backward).
    """
    if mode not in REGION_MEAN_MODES:
        raise ValidationError(f"unknown region mean mode {mode!r}")
    b = diff.shape[0]
    if len(masks) != b:
        raise ShapeError(f"{len(masks)} masks for batch of {b}")
    weights = np.stack([m.values.astype(np.float32) for m in masks])[..., None]
    if tuple(weights.shape[:-1]) != tuple(diff.shape[:-1]):
        raise ShapeError(f"mask shape {weights.shape[:-1]} does not match diff {tuple(diff.shape)}")
    w = torch.from_numpy(weights).to(diff.dtype)
    channels = diff.shape[-1]
    cells = int(np.prod(diff.shape[1:-1]))
    hot_counts = weights.reshape(b, -1).sum(axis=1) * channels
    cold_counts = cells * channels - hot_counts
    edit_sums = (diff * w).sum(dim=tuple(range(1, diff.dim())))
    cold_sums = (diff * (1 - w)).sum(dim=tuple(range(1, diff.dim())))
    if mode == "global":
        total = float(cells * channels)
        return cold_sums / total - edit_sums / total
    inv_hot = torch.from_numpy(
        np.where(hot_counts > 0, 1.0 / np.maximum(hot_counts, 1), 0.0)
    ).to(diff.dtype)
    inv_cold = torch.from_numpy(
        np.where(cold_counts > 0, 1.0 / np.maximum(cold_counts, 1), 0.0)
    ).to(diff.dtype)
    return cold_sums * inv_cold - edit_sums * inv_hot


def attention_losses_batched(
    trace: AttentionTrace, partitions: list[RegionPartition], layers=None
) -> tuple[torch.Tensor, torch.Tensor]:
    """Per-sample (edit, global) attention losses over a batched trace.

    Equivalent to looping attention_edit_loss / attention_global_loss over
    trace.sample(i); region sums are taken through indicator-vector einsums so
    the backward pass is matmul-shaped instead of 4 scatter-adds per sample.
    """
    layer_list = _selected_layers(trace, layers)
    ref = layer_list[0]
    b, heads, n, _ = ref.shape
    if len(partitions) != b:
        raise ShapeError(f"{len(partitions)} partitions for batch of {b}")
    q_ind = np.zeros((b, n), dtype=np.float32)
    k_ind = np.zeros((b, n, 3), dtype=np.float32)  # columns: a1, a2, a3
    counts = np.zeros((b, 4), dtype=np.float64)    # |q|, |a1|, |a2|, |a3|
    for i, part in enumerate(partitions):
        if part.token_count != n:
            raise ShapeError(f"partition {i} covers {part.token_count} tokens, trace has {n}")
        q_ind[i, part.q] = 1.0
        k_ind[i, part.a1, 0] = 1.0
        k_ind[i, part.a2, 1] = 1.0
        k_ind[i, part.a3, 2] = 1.0
        counts[i] = (len(part.q), len(part.a1), len(part.a2), len(part.a3))
    qv = torch.from_numpy(q_ind).to(ref.dtype)
    kv = torch.from_numpy(k_ind).to(ref.dtype)
    sums = None
    for layer in layer_list:
        per_key = torch.einsum("bhqk,bkr->bhqr", layer, kv)
        s = torch.einsum("bhqr,bq->br", per_key, qv)
        sums = s if sums is None else sums + s
    lh = len(layer_list) * heads

    def inv(count_products: np.ndarray) -> torch.Tensor:
        safe = np.where(count_products > 0, 1.0 / np.maximum(count_products, 1.0), 0.0)
        return torch.from_numpy((safe / lh).astype(np.float64)).to(ref.dtype)

    nq, n1, n2, n3 = counts.T
    edit = sums[:, 0] * inv(nq * n1) - sums[:, 1] * inv(nq * n2)
    source_sums = sums[:, 0] + sums[:, 1]
    glob = source_sums * inv(nq * (n1 + n2)) - sums[:, 2] * inv(nq * n3)
    return edit, glob


def total_loss(l_ic, l_latent, l_edit, l_global, cfg: LossConfig) -> LossBreakdown:
    """Combine per-term scalars into the weighted training objective record.

    Disabled flags zero their term before weighting. The breakdown satisfies
    l_attn == l_edit + l_global and total == l_ic + λ1·l_latent + λ2·l_attn
    bit-for-bit as computed here.
    """
    l_ic = float(l_ic)
    l_latent = float(l_latent) if cfg.enable_latent else 0.0
    l_edit = float(l_edit) if cfg.enable_attn else 0.0
    l_global = float(l_global) if cfg.enable_attn else 0.0
    l_attn = l_edit + l_global
    total = l_ic + cfg.lambda1 * l_latent + cfg.lambda2 * l_attn
    return LossBreakdown(
        l_ic=l_ic, l_latent=l_latent, l_edit=l_edit, l_global=l_global,
        l_attn=l_attn, total=total,
    )
