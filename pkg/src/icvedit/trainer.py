"""Training loop: batching, AdamW, two-stage schedule, checkpoints, grad checks.

The rng consumption order is fixed so ablation runs stay comparable: per step
one draw for the batch indices, then per sample a timestep draw followed by a
noise draw. Everything that touches randomness goes through the numpy
generator owned by the TrainState; torch's global RNG is never consumed.
"""
from __future__ import annotations

import json
import math
import struct
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch

from .containers import read_array_block, read_exact, write_array_block
from .datagen import SamplePair, derive_seed, read_shard
from .errors import CheckpointError, TrainingError, ValidationError
from .flow import (
    TimestepDistribution,
    noisy_interpolate,
    one_step_denoise,
    sample_timestep,
    velocity_target,
)
from .latents import EditMask, RegionPartition, binarize_mask, build_partition, encode_video
from .losses import (
    LossBreakdown,
    LossConfig,
    attention_edit_loss,
    attention_global_loss,
    attention_losses_batched,
    flow_matching_loss,
    latent_diff,
    latent_region_loss,
    latent_region_losses_batched,
    total_loss,
)
from .model import ModelConfig, VelocityTransformer, init_params
from .instructions import Instruction, encode_instruction

CHECKPOINT_MAGIC = b"RCCK"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class TrainConfig:
    steps: int
    batch: int
    shard_paths: tuple[str, ...]
    out_dir: str
    stage1_lr: float = 1e-4
    stage2_lr: float = 2e-5
    stage_boundary: int | None = None  # default: halfway
    loss_cfg: LossConfig = field(default_factory=LossConfig)
    model_cfg: ModelConfig = field(default_factory=ModelConfig)
    seed: int = 0
    grad_clip: float = 1.0
    checkpoint_every: int = 0  # 0 = final checkpoint only
    timestep: TimestepDistribution = field(default_factory=TimestepDistribution)
    codec_factor: int = 4
    deterministic: bool = False

    def __post_init__(self):
        if self.steps < 1 or self.batch < 1:
            raise ValidationError("steps and batch must be >= 1")
        if self.stage1_lr <= 0 or self.stage2_lr <= 0:
            raise ValidationError("learning rates must be positive")
        if self.stage_boundary is not None and not 0 <= self.stage_boundary <= self.steps:
            raise ValidationError("stage_boundary must lie in [0, steps]")
        if self.grad_clip <= 0:
            raise ValidationError("grad_clip must be positive")

    @property
    def boundary(self) -> int:
        return self.steps // 2 if self.stage_boundary is None else self.stage_boundary

    def lr_at(self, step: int) -> float:
        return self.stage1_lr if step < self.boundary else self.stage2_lr


class AdamW:
    """Decoupled-weight-decay Adam over an ordered parameter list."""

    def __init__(self, params, betas=(0.9, 0.999), eps=1e-8, weight_decay=0.01):
        self.params = list(params)
        self.betas = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.m = [torch.zeros_like(p) for p in self.params]
        self.v = [torch.zeros_like(p) for p in self.params]
        self.step_count = 0

    @torch.no_grad()
    def step(self, lr: float) -> None:
        self.step_count += 1
        b1, b2 = self.betas
        bc1 = 1.0 - b1**self.step_count
        bc2 = 1.0 - b2**self.step_count
        for p, m, v in zip(self.params, self.m, self.v):
            g = p.grad if p.grad is not None else torch.zeros_like(p)
            if self.weight_decay:
                p.mul_(1.0 - lr * self.weight_decay)
            m.mul_(b1).add_(g, alpha=1.0 - b1)
            v.mul_(b2).addcmul_(g, g, value=1.0 - b2)
            denom = (v / bc2).sqrt_().add_(self.eps)
            p.addcdiv_(m / bc1, denom, value=-lr)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None


@torch.no_grad()
def clip_gradients(params, max_norm: float) -> float:
    """Scale gradients so their global L2 norm is at most max_norm."""
    grads = [p.grad for p in params if p.grad is not None]
    if not grads:
        return 0.0
    total = torch.sqrt(sum((g.double() ** 2).sum() for g in grads))
    norm = float(total)
    if norm > max_norm:
        scale = max_norm / (norm + 1e-6)
        for g in grads:
            g.mul_(scale)
    return norm


@dataclass
class _EncodedSample:
    x1_joint: torch.Tensor      # (F, H, 2W, C) clean joint latent
    cond: torch.Tensor          # (F, H, W, C) source latent
    instr_ids: torch.Tensor     # (L,) int64
    mask: EditMask
    partition: RegionPartition


class TrainState:
    """Mutable training state: model, optimizer, rng and step counter."""

    def __init__(self, model: VelocityTransformer, adam: AdamW, rng: np.random.Generator,
                 step: int = 0):
        self.model = model
        self.adam = adam
        self.rng = rng
        self.step = step
        self._cache: dict[int, tuple[SamplePair, _EncodedSample]] = {}

    @classmethod
    def new(cls, cfg: TrainConfig) -> "TrainState":
        model = init_params(cfg.model_cfg, seed=derive_seed(cfg.seed, 0))
        adam = AdamW(model.parameters())
        rng = np.random.default_rng(derive_seed(cfg.seed, 1))
        return cls(model, adam, rng)

    def encoded(self, pair: SamplePair, cfg: TrainConfig) -> _EncodedSample:
        key = id(pair)
        hit = self._cache.get(key)
        if hit is not None:
            return hit[1]
        factor = cfg.codec_factor
        src = encode_video(pair.source, factor)
        tgt = encode_video(pair.target, factor)
        joint = np.concatenate([src.values, tgt.values], axis=2)
        mask = binarize_mask(pair.pixel_mask, factor)
        part = build_partition(mask, src.width)
        enc = _EncodedSample(
            x1_joint=torch.from_numpy(joint.copy()),
            cond=torch.from_numpy(src.values.copy()),
            instr_ids=torch.from_numpy(encode_instruction(pair.instruction)),
            mask=mask,
            partition=part,
        )
        self._cache[key] = (pair, enc)
        return enc


def train_step(state: TrainState, batch: list[SamplePair], cfg: TrainConfig) -> LossBreakdown:
    """One optimization step over a batch of pairs; advances state.step."""
    if not batch:
        raise ValidationError("batch must be nonempty")
    enc = [state.encoded(pair, cfg) for pair in batch]
    shape0 = tuple(enc[0].x1_joint.shape)
    if any(tuple(e.x1_joint.shape) != shape0 for e in enc):
        raise ValidationError("all pairs in a batch must share dimensions")
    w = shape0[2] // 2
    lcfg = cfg.loss_cfg

    # fixed rng order: per sample a timestep draw, then a noise draw
    ts, noises = [], []
    for e in enc:
        ts.append(sample_timestep(state.rng, cfg.timestep))
        noises.append(state.rng.standard_normal(shape0, dtype=np.float32))

    x1 = torch.stack([e.x1_joint for e in enc])
    x0 = torch.from_numpy(np.stack(noises))
    t_vec = torch.tensor(ts, dtype=torch.float32)
    t_bc = t_vec.reshape(-1, 1, 1, 1, 1)
    xt = noisy_interpolate(x1, x0, t_bc)
    v = velocity_target(x1, x0)
    cond = torch.stack([e.cond for e in enc])
    ids = torch.stack([e.instr_ids for e in enc])

    out = state.model(xt, cond, ids, t_vec, capture=lcfg.enable_attn)
    u = out.velocity
    l_ic_t = flow_matching_loss(u, v)
    zero = u.sum() * 0

    if lcfg.enable_latent:
        x_hat = one_step_denoise(xt, u, t_bc)
        src_hat = x_hat[..., :w, :]
        tgt_hat = x_hat[..., w:, :]
        diff = latent_diff(src_hat, tgt_hat)
        l_latent_t = latent_region_losses_batched(
            diff, [e.mask for e in enc], lcfg.region_mean_mode
        ).mean()
    else:
        l_latent_t = zero

    if lcfg.enable_attn:
        edit_vec, global_vec = attention_losses_batched(
            out.trace, [e.partition for e in enc], lcfg.attn_layers
        )
        l_edit_t = edit_vec.mean()
        l_global_t = global_vec.mean()
    else:
        l_edit_t, l_global_t = zero, zero

    total_t = l_ic_t + lcfg.lambda1 * l_latent_t + lcfg.lambda2 * (l_edit_t + l_global_t)
    breakdown = total_loss(
        l_ic_t.item(), l_latent_t.item(), l_edit_t.item(), l_global_t.item(), lcfg
    )
    if not math.isfinite(breakdown.total):
        raise TrainingError(
            f"non-finite loss at step {state.step}: {breakdown.to_dict()}"
        )

    state.adam.zero_grad()
    total_t.backward()
    clip_gradients(state.adam.params, cfg.grad_clip)
    state.adam.step(cfg.lr_at(state.step))
    state.step += 1
    return breakdown


def save_checkpoint(path: str | Path, state: TrainState, cfg: TrainConfig) -> None:
    """RCCK container: JSON header, then param/m/v arrays in declared order."""
    names = [name for name, _ in state.model.named_parameters()]
    header = {
        "step": state.step,
        "adam_step_count": state.adam.step_count,
        "adam_betas": list(state.adam.betas),
        "adam_eps": state.adam.eps,
        "adam_weight_decay": state.adam.weight_decay,
        "rng_state": state.rng.bit_generator.state,
        "param_names": names,
        "model_cfg": asdict(cfg.model_cfg),
        "loss_cfg": asdict(cfg.loss_cfg),
        "seed": cfg.seed,
    }
    blob = json.dumps(header).encode("utf-8")
    params = dict(state.model.named_parameters())
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<H", CHECKPOINT_VERSION))
        f.write(struct.pack("<I", len(blob)))
        f.write(blob)
        for name in names:
            write_array_block(f, params[name].detach().numpy().astype(np.float32))
        for group in (state.adam.m, state.adam.v):
            for tensor in group:
                write_array_block(f, tensor.numpy().astype(np.float32))


def _read_checkpoint_header(f) -> dict:
    magic = read_exact(f, 4, CheckpointError)
    if magic != CHECKPOINT_MAGIC:
        raise CheckpointError(f"bad checkpoint magic {magic!r}")
    (version,) = struct.unpack("<H", read_exact(f, 2, CheckpointError))
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    (length,) = struct.unpack("<I", read_exact(f, 4, CheckpointError))
    try:
        return json.loads(read_exact(f, length, CheckpointError).decode("utf-8"))
    except json.JSONDecodeError as exc:
        raise CheckpointError(f"corrupt checkpoint header: {exc}") from exc


def load_model(path: str | Path) -> tuple[VelocityTransformer, dict]:
    """Rebuild just the model (for inference); returns (model, header)."""
    with open(path, "rb") as f:
        header = _read_checkpoint_header(f)
        model_cfg = ModelConfig(**header["model_cfg"])
        model = init_params(model_cfg, seed=0)
        with torch.no_grad():
            for name in header["param_names"]:
                arr = read_array_block(f, CheckpointError)
                target = dict(model.named_parameters()).get(name)
                if target is None or tuple(target.shape) != arr.shape:
                    raise CheckpointError(f"checkpoint parameter {name!r} does not fit the model")
                target.copy_(torch.from_numpy(arr))
    return model, header


def load_checkpoint(path: str | Path, cfg: TrainConfig) -> TrainState:
    """Restore a full training state; cfg.model_cfg must match the container."""
    with open(path, "rb") as f:
        header = _read_checkpoint_header(f)
        stored_cfg = ModelConfig(**header["model_cfg"])
        if stored_cfg != cfg.model_cfg:
            raise CheckpointError("checkpoint model config does not match the run config")
        model = init_params(cfg.model_cfg, seed=0)
        named = dict(model.named_parameters())
        with torch.no_grad():
            for name in header["param_names"]:
                arr = read_array_block(f, CheckpointError)
                named[name].copy_(torch.from_numpy(arr))
        adam = AdamW(
            model.parameters(),
            betas=tuple(header["adam_betas"]),
            eps=header["adam_eps"],
            weight_decay=header["adam_weight_decay"],
        )
        adam.step_count = header["adam_step_count"]
        ordered = [named[name] for name in header["param_names"]]
        if [id(p) for p in ordered] != [id(p) for p in adam.params]:
            raise CheckpointError("parameter order mismatch while restoring optimizer")
        for group in (adam.m, adam.v):
            for tensor in group:
                arr = read_array_block(f, CheckpointError)
                tensor.copy_(torch.from_numpy(arr))
    rng = np.random.default_rng(0)
    rng.bit_generator.state = header["rng_state"]
    return TrainState(model, adam, rng, step=header["step"])


def run(cfg: TrainConfig, resume_from: str | Path | None = None) -> dict:
    """Execute the configured run; returns a small JSON-serializable report."""
    start = time.time()
    if cfg.deterministic:
        torch.set_num_threads(1)
    pairs: list[SamplePair] = []
    for shard in cfg.shard_paths:
        pairs.extend(read_shard(shard))
    if not pairs:
        raise ValidationError("no training pairs found in the given shards")
    out_dir = Path(cfg.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    state = load_checkpoint(resume_from, cfg) if resume_from else TrainState.new(cfg)
    log_path = out_dir / "train_log.jsonl"
    mode = "a" if resume_from else "w"
    last: LossBreakdown | None = None
    with open(log_path, mode) as log:
        while state.step < cfg.steps:
            step = state.step
            lr = cfg.lr_at(step)
            idx = state.rng.integers(0, len(pairs), size=cfg.batch)
            batch = [pairs[int(i)] for i in idx]
            last = train_step(state, batch, cfg)
            log.write(json.dumps({"step": step, **last.to_dict(), "lr": lr}) + "\n")
            if cfg.checkpoint_every and state.step % cfg.checkpoint_every == 0:
                save_checkpoint(out_dir / f"ckpt_{state.step:06d}.rcck", state, cfg)
    final_path = out_dir / "ckpt_final.rcck"
    save_checkpoint(final_path, state, cfg)
    report = {
        "steps": state.step,
        "final_loss": last.to_dict() if last else None,
        "wall_seconds": time.time() - start,
        "log_path": str(log_path),
        "checkpoint_path": str(final_path),
    }
    with open(out_dir / "train_report.json", "w") as f:
        json.dump(report, f, indent=2)
    try:
        from .reporting import plot_loss_curves

        plot_loss_curves(log_path, out_dir / "loss_curves.png")
    except Exception:  # figure rendering must never fail a run
        pass
    return report


_GRAD_CHECK_LOSSES = ("ic", "latent", "attn", "full")


def grad_check(
    model_cfg: ModelConfig | None = None,
    losses: tuple[str, ...] = _GRAD_CHECK_LOSSES,
    seed: int = 0,
    h: float = 1e-5,
    loss_cfg: LossConfig | None = None,
) -> dict[str, dict[str, float]]:
    """Central-difference validation of every parameter gradient, at float64.

    Runs a fixed tiny forward pipeline for each requested loss term and
    compares analytic gradients against (f(p+h) - f(p-h)) / 2h elementwise.
    Relative error uses max(|analytic|, |numeric|, 1e-6) as denominator.
    Returns {loss_name: {parameter_group: max_rel_error, ..., "max": overall}}.
    """
    for name in losses:
        if name not in _GRAD_CHECK_LOSSES:
            raise ValidationError(f"unknown grad-check loss {name!r}")
    cfg = model_cfg or ModelConfig(
        token_dim=8, heads=2, depth=1, lora_rank=4,
        max_frames=1, max_height=2, max_width=2,
    )
    lcfg = loss_cfg or LossConfig()
    model = init_params(cfg, seed=derive_seed(seed, 0), dtype=torch.float64)
    rng = np.random.default_rng(derive_seed(seed, 1))

    frames, height, w = 1, 2, 2
    c = cfg.latent_channels
    x1 = torch.from_numpy(rng.standard_normal((frames, height, 2 * w, c)))
    x0 = torch.from_numpy(rng.standard_normal((frames, height, 2 * w, c)))
    cond = x1[:, :, :w, :].clone()
    t = sample_timestep(rng, TimestepDistribution())
    xt = noisy_interpolate(x1, x0, t)
    v = velocity_target(x1, x0)
    mask = EditMask(np.array([[[1, 0], [0, 1]]], dtype=np.uint8))
    part = build_partition(mask, w)
    instr = Instruction(task="replace", subject=(0, 0), object2=(1, 1))

    def loss_value(selection: str) -> torch.Tensor:
        out = model(xt, cond, instr, t, capture=selection in ("attn", "full"))
        u = out.velocity
        if selection == "ic":
            return flow_matching_loss(u, v)
        x_hat = one_step_denoise(xt, u, t)
        diff = latent_diff(x_hat[..., :w, :], x_hat[..., w:, :])
        if selection == "latent":
            return latent_region_loss(diff, mask, lcfg.region_mean_mode)
        l_edit = attention_edit_loss(out.trace, part, lcfg.attn_layers)
        l_glob = attention_global_loss(out.trace, part, lcfg.attn_layers)
        if selection == "attn":
            return l_edit + l_glob
        l_lat = latent_region_loss(diff, mask, lcfg.region_mean_mode)
        return flow_matching_loss(u, v) + lcfg.lambda1 * l_lat + lcfg.lambda2 * (l_edit + l_glob)

    params = list(model.named_parameters())
    report: dict[str, dict[str, float]] = {}
    for selection in losses:
        loss = loss_value(selection)
        analytic = torch.autograd.grad(loss, [p for _, p in params], allow_unused=True)
        group_err: dict[str, float] = {}
        overall = 0.0
        with torch.no_grad():
            for (name, p), a in zip(params, analytic):
                a = torch.zeros_like(p) if a is None else a
                flat = p.reshape(-1)
                worst = 0.0
                for i in range(flat.numel()):
                    orig = flat[i].item()
                    flat[i] = orig + h
                    up = loss_value(selection).item()
                    flat[i] = orig - h
                    down = loss_value(selection).item()
                    flat[i] = orig
                    numeric = (up - down) / (2.0 * h)
                    ana = a.reshape(-1)[i].item()
                    denom = max(abs(ana), abs(numeric), 1e-6)
                    worst = max(worst, abs(ana - numeric) / denom)
                group_err[name] = worst
                overall = max(overall, worst)
        group_err["max"] = overall
        report[selection] = group_err
    return report
