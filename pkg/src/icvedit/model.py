"""Tiny joint-denoising video transformer with attention capture and LoRA.

One token per latent cell. The joint (source|target) grid runs through
self-attention blocks with instruction cross-attention and timestep-conditioned
scale/shift; the clean source latent enters through a zero-initialized additive
condition branch at every block input, so at initialization the velocity is
independent of the condition content. Post-softmax self-attention probabilities
can be captured per layer for the attention-space objectives.

Parameter initialization is drawn from a seeded numpy generator in registration
order, which keeps it bitwise reproducible independent of torch's global RNG.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, replace as dc_replace
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .errors import NumericsError, ShapeError, ValidationError
from .instructions import INSTRUCTION_LEN, Instruction, VOCAB_SIZE, encode_instruction


@dataclass(frozen=True)
class ModelConfig:
    token_dim: int = 64
    heads: int = 4
    depth: int = 4
    instruction_vocab: int = VOCAB_SIZE
    instruction_len: int = INSTRUCTION_LEN
    lora_rank: int = 4
    latent_channels: int = 4
    max_frames: int = 8
    max_height: int = 16
    max_width: int = 16  # single-video width; the column table covers both halves
    cond_feeds_target: bool = False

    def __post_init__(self):
        if self.token_dim < 2 or self.token_dim % 2:
            raise ValidationError(f"token_dim must be even and >= 2, got {self.token_dim}")
        if self.heads < 1 or self.token_dim % self.heads:
            raise ValidationError(
                f"token_dim ({self.token_dim}) must be divisible by heads ({self.heads})"
            )
        if self.depth < 1:
            raise ValidationError(f"depth must be >= 1, got {self.depth}")
        if not 0 <= self.lora_rank <= self.token_dim:
            raise ValidationError(
                f"lora_rank must lie in [0, token_dim], got {self.lora_rank}"
            )
        for name in ("instruction_vocab", "instruction_len", "latent_channels",
                     "max_frames", "max_height", "max_width"):
            if getattr(self, name) < 1:
                raise ValidationError(f"{name} must be >= 1")

    @property
    def max_tokens(self) -> int:
        return self.max_frames * self.max_height * 2 * self.max_width


@dataclass(frozen=True)
class AttentionTrace:
    """Per-layer post-softmax self-attention probabilities.

    Each entry has shape (..., heads, queries, keys); during training the
    leading dimension is the batch and the tensors stay on the autograd graph.
    """

    layers: tuple

    def num_layers(self) -> int:
        return len(self.layers)

    def sample(self, i: int) -> "AttentionTrace":
        return AttentionTrace(tuple(layer[i] for layer in self.layers))

    def check_normalized(self, tol: float = 1e-5) -> None:
        for li, layer in enumerate(self.layers):
            arr = layer.detach().cpu().numpy() if torch.is_tensor(layer) else np.asarray(layer)
            if arr.min() < 0:
                raise ValidationError(f"negative attention probability in layer {li}")
            rows = arr.sum(axis=-1)
            if np.abs(rows - 1.0).max() > tol:
                raise ValidationError(f"attention rows of layer {li} do not sum to 1")


@dataclass(frozen=True)
class ForwardOutput:
    velocity: torch.Tensor
    trace: AttentionTrace | None = None


class LoRALinear(nn.Module):
    """Linear layer with an optional rank-r additive adapter: W + (1/r) B A."""

    def __init__(self, dim_in: int, dim_out: int, rank: int):
        super().__init__()
        self.base = nn.Linear(dim_in, dim_out)
        self.rank = rank
        if rank > 0:
            self.lora_a = nn.Parameter(torch.zeros(rank, dim_in))
            self.lora_b = nn.Parameter(torch.zeros(dim_out, rank))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        y = self.base(x)
        if self.rank > 0:
            y = y + (x @ self.lora_a.T) @ self.lora_b.T / self.rank
        return y

    def merged_weight(self) -> torch.Tensor:
        if self.rank > 0:
            return self.base.weight + (self.lora_b @ self.lora_a) / self.rank
        return self.base.weight


def effective_weight(module: LoRALinear) -> torch.Tensor:
    """The projection actually applied by a LoRA layer (base plus adapter)."""
    return module.merged_weight()


def _modulate(x: torch.Tensor, shift: torch.Tensor, scale: torch.Tensor) -> torch.Tensor:
    return x * (1.0 + scale) + shift


class _SelfAttention(nn.Module):
    def __init__(self, dim: int, heads: int, lora_rank: int):
        super().__init__()
        self.heads = heads
        self.head_dim = dim // heads
        self.q = LoRALinear(dim, dim, lora_rank)
        self.k = LoRALinear(dim, dim, lora_rank)
        self.v = LoRALinear(dim, dim, lora_rank)
        self.o = LoRALinear(dim, dim, lora_rank)

    def forward(self, x: torch.Tensor, capture: bool):
        b, n, d = x.shape
        q = self.q(x).view(b, n, self.heads, self.head_dim).transpose(1, 2)
        k = self.k(x).view(b, n, self.heads, self.head_dim).transpose(1, 2)
        v = self.v(x).view(b, n, self.heads, self.head_dim).transpose(1, 2)
        scores = q @ k.transpose(-1, -2) / math.sqrt(self.head_dim)
        probs = torch.softmax(scores, dim=-1)
        out = (probs @ v).transpose(1, 2).reshape(b, n, d)
        return self.o(out), probs if capture else None


class _CrossAttention(nn.Module):
    def __init__(self, dim: int, heads: int, lora_rank: int):
        super().__init__()
        self.heads = heads
        self.head_dim = dim // heads
        self.q = LoRALinear(dim, dim, lora_rank)
        self.k = LoRALinear(dim, dim, lora_rank)
        self.v = LoRALinear(dim, dim, lora_rank)
        self.o = LoRALinear(dim, dim, lora_rank)

    def forward(self, x: torch.Tensor, ctx: torch.Tensor) -> torch.Tensor:
        b, n, d = x.shape
        m = ctx.shape[1]
        q = self.q(x).view(b, n, self.heads, self.head_dim).transpose(1, 2)
        k = self.k(ctx).view(b, m, self.heads, self.head_dim).transpose(1, 2)
        v = self.v(ctx).view(b, m, self.heads, self.head_dim).transpose(1, 2)
        probs = torch.softmax(q @ k.transpose(-1, -2) / math.sqrt(self.head_dim), dim=-1)
        out = (probs @ v).transpose(1, 2).reshape(b, n, d)
        return self.o(out)


class _Block(nn.Module):
    def __init__(self, dim: int, heads: int, lora_rank: int):
        super().__init__()
        self.norm_attn = nn.LayerNorm(dim, elementwise_affine=False)
        self.attn = _SelfAttention(dim, heads, lora_rank)
        self.norm_cross = nn.LayerNorm(dim, elementwise_affine=False)
        self.cross = _CrossAttention(dim, heads, lora_rank)
        self.norm_mlp = nn.LayerNorm(dim, elementwise_affine=False)
        self.mlp = nn.Sequential(
            nn.Linear(dim, 4 * dim), nn.GELU(), nn.Linear(4 * dim, dim)
        )
        self.ada = nn.Linear(dim, 9 * dim)

    def forward(self, x: torch.Tensor, temb: torch.Tensor, ctx: torch.Tensor, capture: bool):
        mods = self.ada(F.silu(temb)).unsqueeze(1).chunk(9, dim=-1)
        sh_a, sc_a, g_a, sh_c, sc_c, g_c, sh_m, sc_m, g_m = mods
        attn_out, probs = self.attn(_modulate(self.norm_attn(x), sh_a, sc_a), capture)
        x = x + g_a * attn_out
        x = x + g_c * self.cross(_modulate(self.norm_cross(x), sh_c, sc_c), ctx)
        x = x + g_m * self.mlp(_modulate(self.norm_mlp(x), sh_m, sc_m))
        return x, probs


class VelocityTransformer(nn.Module):
    """Joint-latent velocity predictor u(x_t, condition, t)."""

    def __init__(self, cfg: ModelConfig, seed: int = 0, dtype: torch.dtype = torch.float32):
        super().__init__()
        self.cfg = cfg
        self.work_dtype = dtype
        d = cfg.token_dim
        self.input_proj = nn.Linear(cfg.latent_channels, d)
        self.cond_proj = nn.Linear(cfg.latent_channels, d)
        self.frame_pos = nn.Parameter(torch.zeros(cfg.max_frames, d))
        self.row_pos = nn.Parameter(torch.zeros(cfg.max_height, d))
        self.col_pos = nn.Parameter(torch.zeros(2 * cfg.max_width, d))
        self.instr_embed = nn.Embedding(cfg.instruction_vocab, d)
        self.instr_pos = nn.Parameter(torch.zeros(cfg.instruction_len, d))
        self.t_mlp = nn.Sequential(nn.Linear(d, d), nn.SiLU(), nn.Linear(d, d))
        self.blocks = nn.ModuleList(
            [_Block(d, cfg.heads, cfg.lora_rank) for _ in range(cfg.depth)]
        )
        self.norm_out = nn.LayerNorm(d, elementwise_affine=False)
        self.ada_out = nn.Linear(d, 2 * d)
        self.out_proj = nn.Linear(d, cfg.latent_channels)
        self._reset_parameters(seed)
        self.to(dtype)

    def _reset_parameters(self, seed: int) -> None:
        rng = np.random.default_rng(seed)
        for name, p in self.named_parameters():
            arr = rng.standard_normal(tuple(p.shape))
            if name.endswith(".bias") or name.startswith("cond_proj") or ".lora_b" in name:
                arr = np.zeros(tuple(p.shape))
            elif ".lora_a" in name or "pos" in name or "instr_embed" in name:
                arr = arr * 0.02
            elif arr.ndim == 2:
                arr = arr / math.sqrt(arr.shape[1])
            else:
                arr = arr * 0.02
            with torch.no_grad():
                p.copy_(torch.from_numpy(arr).to(p.dtype))

    def _sinusoidal(self, t_vec: torch.Tensor) -> torch.Tensor:
        half = self.cfg.token_dim // 2
        freqs = torch.exp(
            -math.log(10000.0)
            * torch.arange(half, dtype=t_vec.dtype, device=t_vec.device)
            / half
        )
        ang = t_vec[:, None] * 1000.0 * freqs[None, :]
        return torch.cat([torch.cos(ang), torch.sin(ang)], dim=-1)

    def _as_tensor(self, values) -> torch.Tensor:
        if torch.is_tensor(values):
            return values.to(self.work_dtype)
        arr = np.asarray(values)
        if not arr.flags.writeable:  # frozen domain-type arrays
            arr = arr.copy()
        return torch.from_numpy(arr).to(self.work_dtype)

    def instruction_ids(self, instruction) -> torch.Tensor:
        """Normalize an Instruction / id sequence / batch thereof to (B, L) long."""
        if isinstance(instruction, Instruction):
            ids = torch.from_numpy(encode_instruction(instruction))[None]
        elif isinstance(instruction, Sequence) and instruction and isinstance(instruction[0], Instruction):
            ids = torch.from_numpy(np.stack([encode_instruction(i) for i in instruction]))
        else:
            ids = torch.as_tensor(np.asarray(instruction), dtype=torch.int64)
            if ids.dim() == 1:
                ids = ids[None]
        if ids.shape[-1] != self.cfg.instruction_len:
            raise ShapeError(
                f"instruction length {ids.shape[-1]} != configured {self.cfg.instruction_len}"
            )
        if ids.min() < 0 or ids.max() >= self.cfg.instruction_vocab:
            raise ValidationError("instruction token id out of vocabulary")
        return ids

    def forward(self, xt, src_cond, instruction, t, capture: bool = False) -> ForwardOutput:
        """Predict the joint velocity; optionally capture self-attention probs.

        ``xt`` is (F, H, 2W, C) or batched (B, F, H, 2W, C); ``src_cond`` the
        matching clean source latent of width W. ``t`` is a scalar or (B,).
        """
        xt_t = self._as_tensor(xt)
        cond_t = self._as_tensor(src_cond)
        squeeze = xt_t.dim() == 4
        if squeeze:
            xt_t = xt_t[None]
            cond_t = cond_t[None]
        if xt_t.dim() != 5 or cond_t.dim() != 5:
            raise ShapeError("expected (B, F, H, W, C) latents")
        b, frames, height, width2, channels = xt_t.shape
        if width2 % 2:
            raise ShapeError(f"joint width must be even, got {width2}")
        w = width2 // 2
        if cond_t.shape != (b, frames, height, w, channels):
            raise ShapeError(
                f"condition shape {tuple(cond_t.shape)} does not match source half "
                f"{(b, frames, height, w, channels)}"
            )
        cfg = self.cfg
        if channels != cfg.latent_channels:
            raise ShapeError(f"expected {cfg.latent_channels} channels, got {channels}")
        if frames > cfg.max_frames or height > cfg.max_height or width2 > 2 * cfg.max_width:
            raise ShapeError(
                f"grid {frames}x{height}x{width2} exceeds configured maxima "
                f"{cfg.max_frames}x{cfg.max_height}x{2 * cfg.max_width}"
            )
        ids = self.instruction_ids(instruction)
        if ids.shape[0] == 1 and b > 1:
            ids = ids.expand(b, -1)
        if ids.shape[0] != b:
            raise ShapeError(f"instruction batch {ids.shape[0]} != latent batch {b}")
        t_vec = torch.as_tensor(t, dtype=self.work_dtype).reshape(-1)
        if t_vec.numel() == 1 and b > 1:
            t_vec = t_vec.expand(b)
        if t_vec.numel() != b:
            raise ShapeError(f"timestep batch {t_vec.numel()} != latent batch {b}")

        n = frames * height * width2
        x = self.input_proj(xt_t.reshape(b, n, channels))
        pos = (
            self.frame_pos[:frames, None, None, :]
            + self.row_pos[None, :height, None, :]
            + self.col_pos[None, None, :width2, :]
        ).reshape(n, -1)
        x = x + pos

        cond_tok = self.cond_proj(cond_t)
        cond_add = torch.zeros(
            b, frames, height, width2, cfg.token_dim, dtype=x.dtype, device=x.device
        )
        cond_add[:, :, :, :w] = cond_tok
        if cfg.cond_feeds_target:
            cond_add[:, :, :, w:] = cond_tok
        cond_add = cond_add.reshape(b, n, cfg.token_dim)

        ctx = self.instr_embed(ids) + self.instr_pos[None]
        temb = self.t_mlp(self._sinusoidal(t_vec))

        traces = []
        for i, block in enumerate(self.blocks):
            x, probs = block(x + cond_add, temb, ctx, capture)
            if not torch.isfinite(x).all():
                raise NumericsError(f"non-finite activations after block {i}", layer=i)
            if capture:
                traces.append(probs)

        shift, scale = self.ada_out(F.silu(temb)).unsqueeze(1).chunk(2, dim=-1)
        y = self.out_proj(_modulate(self.norm_out(x), shift, scale))
        if not torch.isfinite(y).all():
            raise NumericsError("non-finite activations in output projection", layer=cfg.depth)
        velocity = y.reshape(b, frames, height, width2, channels)
        if squeeze:
            velocity = velocity[0]
            traces = [tr[0] for tr in traces]
        trace = AttentionTrace(tuple(traces)) if capture else None
        return ForwardOutput(velocity=velocity, trace=trace)

    def forward_grids(self, xt_ic, src_cond, instruction, t, capture: bool = False) -> ForwardOutput:
        """Domain-typed convenience wrapper over latent-grid values."""
        return self.forward(xt_ic.grid.values, src_cond.values, instruction, t, capture=capture)


def init_params(cfg: ModelConfig, seed: int, dtype: torch.dtype = torch.float32) -> VelocityTransformer:
    """Build a model with deterministic, seeded parameter initialization."""
    return VelocityTransformer(cfg, seed=seed, dtype=dtype)


def merge_lora(model: VelocityTransformer) -> VelocityTransformer:
    """Fold every adapter product into its base weight; returns a rank-0 model."""
    cfg = dc_replace(model.cfg, lora_rank=0)
    merged = VelocityTransformer(cfg, seed=0, dtype=model.work_dtype)
    src = model.state_dict()
    out_state = {}
    for key in merged.state_dict():
        if key.endswith("base.weight"):
            owner = key[: -len("base.weight")]
            if owner + "lora_a" in src:
                a = src[owner + "lora_a"]
                bmat = src[owner + "lora_b"]
                out_state[key] = src[key] + (bmat @ a) / model.cfg.lora_rank
                continue
        out_state[key] = src[key]
    merged.load_state_dict(out_state)
    return merged


def lora_parameter_count(dim: int, rank: int) -> int:
    """Adapter parameters added to one dim x dim projection."""
    return 2 * rank * dim
