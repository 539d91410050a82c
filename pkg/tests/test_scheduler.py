"""
Unit Tests for the Diffusion Scheduler Core

Tests noise schedules, forward noising, clean-latent estimation,
DDIM stepping and SDEdit initialization.
"""

import math

import numpy as np
import pytest

from backbones.denoisers import OracleDenoiser
from diffusion.grids import GridError, ImageGrid, LatentGrid
from diffusion.scheduler import (
    GuidanceContext,
    NoiseSchedule,
    ScheduleError,
    ScheduleKind,
    add_noise,
    ddim_step,
    estimate_x0,
    make_schedule,
    predict_previous,
    sdedit_init,
    seeded_noise,
    start_step_for_strength,
)


@pytest.fixture
def schedule():
    return make_schedule(20)


@pytest.fixture
def guidance():
    return GuidanceContext(prompt_embedding=np.zeros(4), prompt="a signer")


class TestMakeSchedule:
    """Test schedule construction and validation."""

    def test_linear_schedule_is_cumulative_product(self, schedule):
        """Test that alpha_bars equal the cumulative product of alphas."""
        assert schedule.num_steps == 20
        assert np.array_equal(schedule.alpha_bars, np.cumprod(schedule.alphas))
        assert np.all(np.diff(schedule.alpha_bars) < 0)

    def test_linear_schedule_endpoints(self, schedule):
        """Test that the default betas run from 1e-4 to 0.02."""
        assert schedule.alphas[0] == pytest.approx(1 - 1e-4)
        assert schedule.alphas[-1] == pytest.approx(1 - 0.02)

    def test_cosine_schedule_valid(self):
        """Test that the cosine schedule yields alphas in (0, 1]."""
        cosine = make_schedule(10, ScheduleKind.COSINE)
        assert np.all(cosine.alphas > 0)
        assert np.all(cosine.alphas <= 1)
        assert np.array_equal(cosine.alpha_bars, np.cumprod(cosine.alphas))

    def test_zero_steps_rejected(self):
        """Test that T = 0 is rejected."""
        with pytest.raises(ScheduleError, match="num_steps"):
            make_schedule(0)

    def test_beta_out_of_range_rejected(self):
        """Test that betas producing alphas outside (0, 1] are rejected."""
        with pytest.raises(ScheduleError, match="outside"):
            make_schedule(10, params={'beta_start': 0.1, 'beta_end': 1.5})

    def test_from_alphas_rejects_zero(self):
        """Test that an explicit alpha of zero is rejected."""
        with pytest.raises(ScheduleError):
            NoiseSchedule.from_alphas([0.9, 0.0])

    def test_alpha_bar_zero_step_is_one(self, schedule):
        """Test the alpha_bar(0) = 1 convention."""
        assert schedule.alpha_bar(0) == 1.0
        assert schedule.alpha_bar(1) == schedule.alpha_bars[0]

    def test_schedule_arrays_read_only(self, schedule):
        """Test that schedules cannot be mutated after construction."""
        with pytest.raises(ValueError):
            schedule.alphas[0] = 0.5

    def test_inconsistent_alpha_bars_rejected(self):
        """Test that alpha_bars must match cumprod(alphas) exactly."""
        with pytest.raises(ScheduleError, match="cumulative"):
            NoiseSchedule(num_steps=2, alphas=np.array([0.9, 0.9]), alpha_bars=np.array([0.9, 0.9]))


class TestNoiseAlgebra:
    """Test forward noising and clean-latent estimation."""

    def test_estimate_inverts_add_noise(self, schedule):
        """Test estimate_x0(add_noise(x0, t, n), n, t) = x0 on 1000 random latents."""
        rng = np.random.default_rng(0)
        for _ in range(1000):
            x0 = LatentGrid(rng.standard_normal((2, 4, 4)))
            noise = LatentGrid(rng.standard_normal((2, 4, 4)))
            t = int(rng.integers(1, schedule.num_steps + 1))
            x_t = add_noise(x0, t, noise, schedule)
            recovered = estimate_x0(x_t, noise, t, schedule)
            assert np.max(np.abs(recovered.data - x0.data)) < 1e-6

    def test_add_noise_formula(self, schedule):
        """Test x_t = sqrt(ab) x0 + sqrt(1 - ab) eps."""
        x0 = LatentGrid(np.ones((1, 2, 2)))
        noise = LatentGrid(np.full((1, 2, 2), 2.0))
        ab = schedule.alpha_bar(10)
        x_t = add_noise(x0, 10, noise, schedule)
        assert np.allclose(x_t.data, math.sqrt(ab) + 2.0 * math.sqrt(1 - ab))

    def test_shape_mismatch_rejected(self, schedule):
        """Test that x0 and noise must share a shape."""
        with pytest.raises(GridError, match="Shape mismatch"):
            add_noise(LatentGrid(np.zeros((2, 4, 4))), 5, LatentGrid(np.zeros((2, 4, 3))), schedule)

    def test_step_outside_range_rejected(self, schedule):
        """Test that t must lie in [1, T]."""
        x = LatentGrid(np.zeros((1, 2, 2)))
        with pytest.raises(ScheduleError, match="outside"):
            add_noise(x, 21, x, schedule)
        with pytest.raises(ScheduleError, match="outside"):
            estimate_x0(x, x, 0, schedule)

    def test_non_finite_grid_rejected(self):
        """Test that NaN entries never enter a grid."""
        with pytest.raises(GridError, match="NaN"):
            LatentGrid(np.array([[[np.nan]]]))


class TestDDIMStep:
    """Test deterministic DDIM updates."""

    def test_ddim_step_composes_estimate_and_predict(self, schedule):
        """Test ddim_step = predict_previous after estimate_x0."""
        rng = np.random.default_rng(1)
        x_t = LatentGrid(rng.standard_normal((2, 4, 4)))
        eps = LatentGrid(rng.standard_normal((2, 4, 4)))
        expected = predict_previous(estimate_x0(x_t, eps, 7, schedule), eps, 7, schedule)
        assert np.array_equal(ddim_step(x_t, eps, 7, schedule).data, expected.data)

    def test_final_step_returns_clean_estimate(self, schedule):
        """Test that stepping from t = 1 returns the x0 estimate exactly."""
        rng = np.random.default_rng(2)
        x_t = LatentGrid(rng.standard_normal((2, 4, 4)))
        eps = LatentGrid(rng.standard_normal((2, 4, 4)))
        assert np.array_equal(
            ddim_step(x_t, eps, 1, schedule).data,
            estimate_x0(x_t, eps, 1, schedule).data
        )

    @pytest.mark.parametrize("num_steps", [5, 20])
    def test_oracle_sweep_recovers_target(self, num_steps, guidance):
        """Test that a full reverse sweep with the oracle denoiser recovers x0."""
        rng = np.random.default_rng(num_steps)
        target = rng.standard_normal((2, 4, 4))
        sched = make_schedule(num_steps)
        oracle = OracleDenoiser(target=target, schedule=sched)

        x_t = LatentGrid(rng.standard_normal((2, 4, 4)))
        for t in range(num_steps, 0, -1):
            eps = oracle.predict_noise(x_t, t, guidance)
            x_t = ddim_step(x_t, eps, t, sched)

        assert np.max(np.abs(x_t.data - target)) < 1e-6

    def test_ddim_step_preserves_grid_type(self, schedule):
        """Test that image grids stay image grids."""
        x = ImageGrid(np.zeros((1, 2, 2)))
        assert isinstance(ddim_step(x, x, 3, schedule), ImageGrid)


class TestSDEditInit:
    """Test noisy initialization from an encoded frame."""

    def test_start_step_rounding(self, schedule):
        """Test round-half-up(strength * T) with a floor of 1."""
        assert start_step_for_strength(0.75, schedule) == 15
        assert start_step_for_strength(1.0, schedule) == 20
        assert start_step_for_strength(0.01, schedule) == 1
        assert start_step_for_strength(0.525, schedule) == 11

    def test_invalid_strength_rejected(self, schedule):
        """Test that strength outside (0, 1] is rejected."""
        with pytest.raises(ScheduleError, match="strength"):
            start_step_for_strength(0.0, schedule)
        with pytest.raises(ScheduleError, match="strength"):
            start_step_for_strength(1.5, schedule)

    def test_seeded_and_reproducible(self, schedule):
        """Test that the same seed gives identical starting latents."""
        x0 = LatentGrid(np.random.default_rng(3).standard_normal((2, 4, 4)))
        first, step = sdedit_init(x0, 0.75, schedule, 7)
        second, _ = sdedit_init(x0, 0.75, schedule, 7)
        other, _ = sdedit_init(x0, 0.75, schedule, 8)
        assert step == 15
        assert np.array_equal(first.data, second.data)
        assert not np.array_equal(first.data, other.data)

    def test_matches_add_noise(self, schedule):
        """Test that initialization is add_noise at the start step with seeded noise."""
        x0 = LatentGrid(np.ones((1, 3, 3)))
        x_start, step = sdedit_init(x0, 0.5, schedule, 11)
        noise = LatentGrid(seeded_noise(x0.shape, 11))
        assert np.array_equal(x_start.data, add_noise(x0, step, noise, schedule).data)


class TestGuidanceContext:
    """Test guidance fingerprints."""

    def test_fingerprint_tracks_prompt_and_control(self):
        """Test that prompt or control changes alter the fingerprint."""
        base = GuidanceContext(np.ones(3), prompt="a")
        same = GuidanceContext(np.ones(3), prompt="a")
        other_prompt = GuidanceContext(np.ones(3), prompt="b")
        with_control = GuidanceContext(np.ones(3), control_signal=ImageGrid(np.zeros((1, 2, 2))), prompt="a")
        assert base.fingerprint() == same.fingerprint()
        assert base.fingerprint() != other_prompt.fingerprint()
        assert base.fingerprint() != with_control.fingerprint()

    def test_negative_guidance_scale_rejected(self):
        """Test that guidance_scale must be non-negative."""
        with pytest.raises(ScheduleError, match="guidance_scale"):
            GuidanceContext(np.ones(3), guidance_scale=-1.0)
