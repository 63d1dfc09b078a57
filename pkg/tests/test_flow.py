import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from icvedit.errors import ShapeError
from icvedit.flow import (
    SamplerConfig,
    TimestepDistribution,
    euler_sample,
    noisy_interpolate,
    one_step_denoise,
    sample_initial_noise,
    sample_timestep,
    velocity_target,
)
from icvedit.latents import LatentGrid, split


class TestSampleTimestep:
    def test_sigma_zero_mu_zero(self):
        t = sample_timestep(np.random.default_rng(0), TimestepDistribution(mu=0.0, sigma=0.0))
        assert t == 0.5

    def test_sigma_zero_mu_two(self):
        t = sample_timestep(np.random.default_rng(0), TimestepDistribution(mu=2.0, sigma=0.0))
        assert t == pytest.approx(1.0 / (1.0 + math.exp(-2.0)), abs=1e-12)

    def test_same_seed_same_draw(self):
        dist = TimestepDistribution()
        a = sample_timestep(np.random.default_rng(7), dist)
        b = sample_timestep(np.random.default_rng(7), dist)
        assert a == b

    @given(st.floats(-50, 50), st.floats(0, 50), st.integers(0, 2**32 - 1))
    def test_open_interval(self, mu, sigma, seed):
        t = sample_timestep(np.random.default_rng(seed), TimestepDistribution(mu, sigma))
        assert 0.0 < t < 1.0

    def test_negative_sigma_rejected(self):
        with pytest.raises(ValueError):
            TimestepDistribution(sigma=-1.0)


class TestPointwiseOps:
    def test_interpolate_endpoints(self, rng):
        x1 = rng.standard_normal((2, 2, 2, 2))
        x0 = rng.standard_normal((2, 2, 2, 2))
        assert np.array_equal(noisy_interpolate(x1, x0, 0.0), x0)
        assert np.array_equal(noisy_interpolate(x1, x0, 1.0), x1)

    def test_interpolate_arithmetic(self):
        x1 = np.full((1, 1, 1, 1), 2.0)
        x0 = np.zeros((1, 1, 1, 1))
        assert noisy_interpolate(x1, x0, 0.5).item() == 1.0

    def test_interpolate_linearity(self, rng):
        a, b, c = (rng.standard_normal((1, 2, 2, 1)) for _ in range(3))
        t = 0.375  # dyadic so the identity is float-exact
        lhs = noisy_interpolate(a + c, b, t)
        rhs = noisy_interpolate(a, b, t) + t * c
        assert np.abs(lhs - rhs).max() < 1e-12

    def test_velocity_trivials(self, rng):
        x = rng.standard_normal((1, 2, 2, 1))
        assert not velocity_target(x, x).any()
        assert velocity_target(np.ones((1, 1, 1, 1)), np.zeros((1, 1, 1, 1))).item() == 1.0

    def test_velocity_translation_invariance(self, rng):
        a, b, c = (rng.standard_normal((1, 2, 2, 1)) for _ in range(3))
        lhs = velocity_target(a + c, b + c)
        rhs = velocity_target(a, b)
        assert np.abs(lhs - rhs).max() < 1e-12  # float rounding only

    def test_denoise_trivials(self):
        xt = np.full((1, 1, 1, 1), 0.5)
        u = np.ones((1, 1, 1, 1))
        assert one_step_denoise(xt, u, 0.5).item() == 1.0
        assert one_step_denoise(xt, u, 1.0).item() == 0.5

    def test_denoise_recovers_x1_for_any_t(self, rng):
        x1 = rng.standard_normal((2, 2, 2, 2))
        x0 = rng.standard_normal((2, 2, 2, 2))
        for t in (0.0, 0.123, 0.5, 0.987):
            xt = noisy_interpolate(x1, x0, t)
            u = velocity_target(x1, x0)
            assert np.abs(one_step_denoise(xt, u, t) - x1).max() < 1e-12

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            noisy_interpolate(np.zeros((1, 1, 1, 1)), np.zeros((1, 1, 2, 1)), 0.5)
        with pytest.raises(ShapeError):
            velocity_target(np.zeros((1, 1, 1, 1)), np.zeros((2, 1, 1, 1)))
        with pytest.raises(ShapeError):
            one_step_denoise(np.zeros((1, 1, 1, 1)), np.zeros((1, 2, 1, 1)), 0.5)

    @given(st.integers(0, 2**32 - 1))
    def test_exactness_identity_float64(self, seed):
        r = np.random.default_rng(seed)
        x1 = r.standard_normal((1, 2, 4, 2))
        x0 = r.standard_normal((1, 2, 4, 2))
        t = float(r.uniform(0, 1))
        rebuilt = one_step_denoise(noisy_interpolate(x1, x0, t), velocity_target(x1, x0), t)
        assert np.abs(rebuilt - x1).max() <= 1e-12

    def test_exactness_identity_float32(self, rng):
        x1 = rng.standard_normal((2, 4, 4, 4)).astype(np.float32)
        x0 = rng.standard_normal((2, 4, 4, 4)).astype(np.float32)
        t = 0.371
        rebuilt = one_step_denoise(
            noisy_interpolate(x1, x0, t), velocity_target(x1, x0), t
        )
        assert np.abs(rebuilt - x1).max() <= 1e-6


class TestEulerSample:
    def setup_method(self):
        r = np.random.default_rng(99)
        self.x1 = r.standard_normal((2, 3, 8, 4))
        self.cond = LatentGrid(self.x1[:, :, :4, :])
        self.noise = sample_initial_noise(2, 3, 4, 4, seed=5, dtype=np.float64)
        self.x0 = self.noise.grid.values

    def oracle(self, x, cond, t):
        return self.x1 - self.x0

    @pytest.mark.parametrize("steps", [1, 4, 20])
    def test_oracle_recovers_target(self, steps):
        out = euler_sample(
            self.oracle, self.cond, self.noise, SamplerConfig(steps=steps, source_rectify=False)
        )
        assert np.abs(out.grid.values - self.x1).max() <= 1e-6

    def test_source_rectify_final_half_exact(self):
        out = euler_sample(self.oracle, self.cond, self.noise, SamplerConfig(steps=7))
        src_half, _ = split(out)
        assert np.array_equal(src_half.values, self.cond.values.astype(np.float64))

    def test_deterministic(self):
        cfg = SamplerConfig(steps=5, seed=3)
        a = euler_sample(self.oracle, self.cond, self.noise, cfg)
        b = euler_sample(self.oracle, self.cond, self.noise, cfg)
        assert np.array_equal(a.grid.values, b.grid.values)

    def test_dimension_mismatch_rejected(self):
        bad = lambda x, c, t: np.zeros((1, 1, 1, 1))
        with pytest.raises(ShapeError):
            euler_sample(bad, self.cond, self.noise, SamplerConfig(steps=1))
        with pytest.raises(ShapeError):
            euler_sample(self.oracle, LatentGrid(np.zeros((1, 1, 1, 4))), self.noise,
                         SamplerConfig(steps=1))

    def test_initial_noise_seeded(self):
        a = sample_initial_noise(2, 3, 4, 4, seed=5)
        b = sample_initial_noise(2, 3, 4, 4, seed=5)
        c = sample_initial_noise(2, 3, 4, 4, seed=6)
        assert np.array_equal(a.grid.values, b.grid.values)
        assert not np.array_equal(a.grid.values, c.grid.values)
