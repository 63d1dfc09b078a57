"""Rectified-flow primitives and a plain Euler sampler.

The straight-line path x_t = t*x1 + (1-t)*x0 has the constant velocity
x1 - x0, which makes the one-step backward estimate x_t + (1-t)*u exact when u
is the true velocity. The array ops are operator-only so they work on both
numpy arrays and torch tensors (the trainer needs gradients to flow through
them).
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .errors import ShapeError
from .latents import InContextLatent, LatentGrid, split_values

_T_EPS = 1e-12

VelocityFn = Callable[[np.ndarray, np.ndarray, float], np.ndarray]


@dataclass(frozen=True)
class TimestepDistribution:
    """Logit-normal draw: t = sigmoid(mu + sigma * z), z ~ N(0, 1)."""

    mu: float = 0.0
    sigma: float = 1.0

    def __post_init__(self):
        if not math.isfinite(self.mu) or not math.isfinite(self.sigma):
            raise ValueError("mu and sigma must be finite")
        if self.sigma < 0:
            raise ValueError(f"sigma must be >= 0, got {self.sigma}")


@dataclass(frozen=True)
class SamplerConfig:
    steps: int = 20
    source_rectify: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.steps < 1:
            raise ValueError(f"steps must be >= 1, got {self.steps}")


def sample_timestep(rng: np.random.Generator, dist: TimestepDistribution) -> float:
    """Draw a training timestep, clamped to stay strictly inside (0, 1)."""
    z = float(rng.standard_normal())
    a = dist.mu + dist.sigma * z
    t = 0.5 * (1.0 + math.tanh(a / 2.0))  # sigmoid without overflow
    return min(max(t, _T_EPS), 1.0 - _T_EPS)


def _check_same_shape(a, b, op: str) -> None:
    if tuple(a.shape) != tuple(b.shape):
        raise ShapeError(f"{op}: shape mismatch {tuple(a.shape)} vs {tuple(b.shape)}")


def noisy_interpolate(x1, x0, t):
    """x_t = t*x1 + (1-t)*x0. ``t`` may be a scalar or broadcastable array."""
    _check_same_shape(x1, x0, "noisy_interpolate")
    return t * x1 + (1.0 - t) * x0


def velocity_target(x1, x0):
    """Ground-truth velocity of the straight-line path: x1 - x0."""
    _check_same_shape(x1, x0, "velocity_target")
    return x1 - x0


def one_step_denoise(xt, u, t):
    """Single-prediction clean-latent estimate: xt + (1-t)*u."""
    _check_same_shape(xt, u, "one_step_denoise")
    return xt + (1.0 - t) * u


def sample_initial_noise(
    frames: int,
    height: int,
    single_width: int,
    channels: int,
    seed: int,
    dtype=np.float32,
) -> InContextLatent:
    """Standard-normal joint latent of width 2 * single_width, seeded."""
    rng = np.random.default_rng(seed)
    noise = rng.standard_normal(
        (frames, height, 2 * single_width, channels), dtype=np.float64
    ).astype(dtype)
    return InContextLatent(LatentGrid(noise), single_width)


def euler_sample(
    velocity_fn: VelocityFn,
    cond: LatentGrid,
    init_noise: InContextLatent,
    cfg: SamplerConfig,
) -> InContextLatent:
    """Integrate the flow ODE on a uniform grid t_k = k/steps.

    ``velocity_fn(x, cond_values, t)`` must return a velocity of x's shape.
    With ``source_rectify`` the source half is overwritten after every step
    with its known schedule value t_{k+1}*x1_src + (1-t_{k+1})*x0_src, built
    from ``cond`` and the initial noise, so at t=1 it equals ``cond`` exactly.
    """
    w = init_noise.single_width
    out_dtype = init_noise.grid.values.dtype
    # accumulate at float64 so 32-bit inputs do not collect per-step rounding
    x = np.array(init_noise.grid.values, dtype=np.float64)
    if cond.shape != (init_noise.grid.frames, init_noise.grid.height, w, init_noise.grid.channels):
        raise ShapeError(
            f"condition shape {cond.shape} does not match the source half of {init_noise.shape}"
        )
    x0_src = x[:, :, :w, :].copy()
    x1_src = cond.values.astype(np.float64)
    dt = 1.0 / cfg.steps
    for k in range(cfg.steps):
        t = k / cfg.steps
        u = np.asarray(velocity_fn(x, cond.values, t))
        if u.shape != x.shape:
            raise ShapeError(f"velocity shape {u.shape} != latent shape {x.shape}")
        x = x + dt * u.astype(np.float64)
        if cfg.source_rectify:
            t_next = (k + 1) / cfg.steps
            x[:, :, :w, :] = noisy_interpolate(x1_src, x0_src, t_next)
    return InContextLatent(LatentGrid(x.astype(out_dtype)), w)


def split_joint(values, single_width: int):
    """Convenience re-export of width splitting for sampler callers."""
    return split_values(values, single_width)
