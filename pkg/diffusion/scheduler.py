"""
Diffusion Scheduler Core

Implements the latent diffusion algebra every frame's generation loop runs:
- Noise schedules (linear-beta, cosine, explicit alphas)
- Forward noising q(x_t | x_0)
- Clean-latent estimation from predicted noise
- Deterministic DDIM stepping (eta = 0)
- SDEdit-style noisy initialization from an encoded frame

All functions are pure; schedules are immutable after construction.
"""

import hashlib
import math
from dataclasses import dataclass
from enum import Enum
from typing import Any, Dict, Optional, Sequence, Tuple

import numpy as np

from diffusion.grids import ImageGrid, LatentGrid, require_same_shape


DEFAULT_NUM_STEPS = 20
DEFAULT_STRENGTH = 0.75
DEFAULT_BETA_START = 1e-4
DEFAULT_BETA_END = 0.02
COSINE_OFFSET = 0.008
COSINE_MAX_BETA = 0.999


class ScheduleError(ValueError):
    """Raised for invalid schedule parameters or step indices."""
    pass


class ScheduleKind(str, Enum):
    """Supported noise schedule families."""
    LINEAR_BETA = "linear_beta"
    COSINE = "cosine"


@dataclass(frozen=True, eq=False)
class NoiseSchedule:
    """
    The alpha / cumulative-alpha sequence governing noising and DDIM stepping.

    Step indices run 1..T. alpha_bar(0) is 1 by convention so that the final
    DDIM step returns the clean estimate exactly.
    """

    num_steps: int
    alphas: np.ndarray
    alpha_bars: np.ndarray

    def __post_init__(self):
        alphas = np.array(self.alphas, dtype=np.float64)
        alpha_bars = np.array(self.alpha_bars, dtype=np.float64)

        if self.num_steps < 1:
            raise ScheduleError(f"num_steps must be >= 1, got {self.num_steps}")
        if alphas.shape != (self.num_steps,) or alpha_bars.shape != (self.num_steps,):
            raise ScheduleError(
                f"Expected {self.num_steps} alphas and alpha_bars, "
                f"got {alphas.shape} and {alpha_bars.shape}"
            )
        if not np.all(np.isfinite(alphas)) or np.any(alphas <= 0.0) or np.any(alphas > 1.0):
            raise ScheduleError(f"All alphas must lie in (0, 1], got {alphas.tolist()}")
        if not np.array_equal(alpha_bars, np.cumprod(alphas)):
            raise ScheduleError("alpha_bars must be the exact cumulative product of alphas")
        if np.any(alpha_bars <= 0.0):
            raise ScheduleError("Cumulative alphas underflowed to zero")

        alphas.setflags(write=False)
        alpha_bars.setflags(write=False)
        object.__setattr__(self, 'alphas', alphas)
        object.__setattr__(self, 'alpha_bars', alpha_bars)

    @classmethod
    def from_alphas(cls, alphas: Sequence[float]) -> 'NoiseSchedule':
        """Build a schedule from an explicit alpha sequence."""
        alphas_arr = np.asarray(alphas, dtype=np.float64)
        if alphas_arr.ndim != 1 or alphas_arr.size == 0:
            raise ScheduleError("alphas must be a non-empty 1-D sequence")
        if np.any(alphas_arr <= 0.0) or np.any(alphas_arr > 1.0):
            raise ScheduleError(f"All alphas must lie in (0, 1], got {alphas_arr.tolist()}")
        return cls(
            num_steps=int(alphas_arr.size),
            alphas=alphas_arr,
            alpha_bars=np.cumprod(alphas_arr)
        )

    def check_step(self, t: int, allow_zero: bool = False) -> None:
        """Raise ScheduleError unless t is a valid step index."""
        lowest = 0 if allow_zero else 1
        if not lowest <= t <= self.num_steps:
            raise ScheduleError(f"Step {t} outside [{lowest}, {self.num_steps}]")

    def alpha_bar(self, t: int) -> float:
        """Cumulative alpha at step t, with alpha_bar(0) = 1."""
        self.check_step(t, allow_zero=True)
        if t == 0:
            return 1.0
        return float(self.alpha_bars[t - 1])

    def normalized_step(self, t: int) -> float:
        """t / T, used for stage-window gating."""
        return t / self.num_steps


@dataclass(frozen=True, eq=False)
class GuidanceContext:
    """
    Conditioning passed to the denoiser: prompt embedding (c_p), optional
    edge-map control signal (c_n) and the classifier-free guidance scale.
    """

    prompt_embedding: np.ndarray
    control_signal: Optional[ImageGrid] = None
    guidance_scale: float = 7.5
    prompt: str = ""

    def __post_init__(self):
        embedding = np.asarray(self.prompt_embedding, dtype=np.float64).reshape(-1)
        if self.guidance_scale < 0:
            raise ScheduleError(f"guidance_scale must be non-negative, got {self.guidance_scale}")
        object.__setattr__(self, 'prompt_embedding', embedding)

    def fingerprint(self) -> str:
        """Stable hash of prompt text, prompt embedding and control-signal checksum."""
        digest = hashlib.sha256()
        digest.update(self.prompt.encode('utf-8'))
        digest.update(np.ascontiguousarray(self.prompt_embedding).tobytes())
        if self.control_signal is not None:
            digest.update(self.control_signal.checksum().encode())
        return digest.hexdigest()


def _linear_beta_alphas(num_steps: int, params: Dict[str, Any]) -> np.ndarray:
    beta_start = float(params.get('beta_start', DEFAULT_BETA_START))
    beta_end = float(params.get('beta_end', DEFAULT_BETA_END))
    betas = np.linspace(beta_start, beta_end, num_steps, dtype=np.float64)
    return 1.0 - betas


def _cosine_alphas(num_steps: int, params: Dict[str, Any]) -> np.ndarray:
    offset = float(params.get('offset', COSINE_OFFSET))
    max_beta = float(params.get('max_beta', COSINE_MAX_BETA))

    def f(step: float) -> float:
        return math.cos((step / num_steps + offset) / (1 + offset) * math.pi / 2) ** 2

    betas = np.array([
        min(1.0 - f(step) / f(step - 1), max_beta)
        for step in range(1, num_steps + 1)
    ], dtype=np.float64)
    return 1.0 - betas


def make_schedule(
    num_steps: int = DEFAULT_NUM_STEPS,
    schedule_kind: ScheduleKind = ScheduleKind.LINEAR_BETA,
    params: Optional[Dict[str, Any]] = None
) -> NoiseSchedule:
    """
    Build a noise schedule.

    Args:
        num_steps: T, number of diffusion steps (>= 1)
        schedule_kind: linear_beta or cosine
        params: Kind-specific parameters (beta_start/beta_end, offset/max_beta)

    Returns:
        NoiseSchedule with alpha_bars = cumprod(alphas)

    Raises:
        ScheduleError: If num_steps < 1 or the parameters produce alphas outside (0, 1]
    """
    if num_steps < 1:
        raise ScheduleError(f"num_steps must be >= 1, got {num_steps}")

    params = params or {}
    kind = ScheduleKind(schedule_kind)

    if kind == ScheduleKind.LINEAR_BETA:
        alphas = _linear_beta_alphas(num_steps, params)
    else:
        alphas = _cosine_alphas(num_steps, params)

    if np.any(alphas <= 0.0) or np.any(alphas > 1.0):
        raise ScheduleError(
            f"{kind.value} parameters {params} produce alphas outside (0, 1]: "
            f"min={alphas.min():.6g}, max={alphas.max():.6g}"
        )

    return NoiseSchedule.from_alphas(alphas)


def add_noise(x0: LatentGrid, t: int, noise: LatentGrid, schedule: NoiseSchedule) -> LatentGrid:
    """Sample x_t = sqrt(alpha_bar_t) * x0 + sqrt(1 - alpha_bar_t) * noise."""
    require_same_shape(x0, noise, "x0 and noise")
    schedule.check_step(t)
    alpha_bar = schedule.alpha_bar(t)
    return x0.with_data(
        math.sqrt(alpha_bar) * x0.data + math.sqrt(1.0 - alpha_bar) * noise.data
    )


def estimate_x0(x_t: LatentGrid, eps_pred: LatentGrid, t: int, schedule: NoiseSchedule) -> LatentGrid:
    """Predicted clean latent (x_t - sqrt(1 - alpha_bar_t) * eps) / sqrt(alpha_bar_t)."""
    require_same_shape(x_t, eps_pred, "x_t and eps_pred")
    schedule.check_step(t)
    alpha_bar = schedule.alpha_bar(t)
    if alpha_bar <= 0.0:
        raise ScheduleError(f"alpha_bar at step {t} is zero; cannot estimate x0")
    return x_t.with_data(
        (x_t.data - math.sqrt(1.0 - alpha_bar) * eps_pred.data) / math.sqrt(alpha_bar)
    )


def predict_previous(x0_hat: LatentGrid, eps_pred: LatentGrid, t: int, schedule: NoiseSchedule) -> LatentGrid:
    """
    Second half of a DDIM step: x_{t-1} from a (possibly fused) clean estimate.
    """
    require_same_shape(x0_hat, eps_pred, "x0_hat and eps_pred")
    schedule.check_step(t)
    alpha_bar_prev = schedule.alpha_bar(t - 1)
    return x0_hat.with_data(
        math.sqrt(alpha_bar_prev) * x0_hat.data + math.sqrt(1.0 - alpha_bar_prev) * eps_pred.data
    )


def ddim_step(x_t: LatentGrid, eps_pred: LatentGrid, t: int, schedule: NoiseSchedule) -> LatentGrid:
    """Deterministic DDIM update from step t to t - 1."""
    x0_hat = estimate_x0(x_t, eps_pred, t, schedule)
    return predict_previous(x0_hat, eps_pred, t, schedule)


def start_step_for_strength(strength: float, schedule: NoiseSchedule) -> int:
    """round-half-up(strength * T), never below step 1."""
    if not 0.0 < strength <= 1.0:
        raise ScheduleError(f"strength must lie in (0, 1], got {strength}")
    return max(1, int(math.floor(strength * schedule.num_steps + 0.5)))


def seeded_noise(shape: Tuple[int, ...], rng_seed) -> np.ndarray:
    """Standard normal noise from a seeded generator (seed may be an int or int sequence)."""
    return np.random.default_rng(rng_seed).standard_normal(shape)


def sdedit_init(
    x0: LatentGrid,
    strength: float,
    schedule: NoiseSchedule,
    rng_seed: int
) -> Tuple[LatentGrid, int]:
    """
    Partially noise an encoded frame as the starting point for generation.

    Returns:
        Tuple of (x_start, start_step) where start_step = round-half-up(strength * T)
    """
    start_step = start_step_for_strength(strength, schedule)
    noise = x0.with_data(seeded_noise(x0.shape, rng_seed))
    return add_noise(x0, start_step, noise, schedule), start_step
