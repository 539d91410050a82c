"""
Toy Denoisers

- toy_hash: pseudo-random noise keyed on (seed, step, guidance fingerprint),
  plus a term routed through named attention sites so attention control
  changes the prediction.
- toy_oracle: returns the exact noise that makes estimate_x0 recover a
  recorded target latent.
"""

import hashlib
import math
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from backbones.base import BackboneKind, Denoiser, register_backbone
from diffusion.attention import AttentionHook, AttentionWeights, FrameFeatures, self_attention
from diffusion.grids import LatentGrid, average_pool
from diffusion.scheduler import GuidanceContext, NoiseSchedule, make_schedule

# Attention sites and their pooling factors relative to the latent grid
HASH_ATTENTION_SITES: Tuple[Tuple[str, int], ...] = (
    ("down_blocks.attn1", 4),
    ("mid_block.attn1", 8),
)


def _stable_seed(*parts) -> int:
    digest = hashlib.sha256(":".join(str(p) for p in parts).encode('utf-8')).digest()
    return int.from_bytes(digest[:8], 'little')


def _pool_factor(height: int, width: int, factor: int) -> int:
    while factor > 1 and (height % factor or width % factor):
        factor //= 2
    return max(factor, 1)


@register_backbone(BackboneKind.DENOISER, "toy_hash")
class HashDenoiser(Denoiser):
    """
    eps = N(0, I) seeded by sha256(seed, t, guidance) + coupling * sum over sites of
    upsample(V - attention(V)).

    With plain self-attention the site term is the same for identical latents, and
    cross-frame attention pulls it towards the anchor/previous frame's values.
    """

    concurrent_safe = True

    def __init__(
        self,
        seed: int = 0,
        coupling: float = 1.0,
        sites: Optional[Sequence[str]] = None,
        channels: int = 3
    ):
        self.seed = seed
        self.coupling = float(coupling)
        self.channels = channels
        known = dict(HASH_ATTENTION_SITES)
        if sites is None:
            self._sites = list(HASH_ATTENTION_SITES)
        else:
            unknown = [s for s in sites if s not in known]
            if unknown:
                raise ValueError(f"Unknown attention sites {unknown}. Available: {', '.join(known)}")
            self._sites = [(s, known[s]) for s in sites]
        # Read-only after construction
        self._weights: Dict[str, AttentionWeights] = {
            site: AttentionWeights.random(
                channels, channels, seed=_stable_seed(self.seed, site), value_identity=True
            )
            for site, _ in self._sites
        }

    @property
    def attention_sites(self) -> List[str]:
        return [site for site, _ in self._sites]

    def predict_noise(
        self,
        x_t: LatentGrid,
        t: int,
        guidance: GuidanceContext,
        attention_hook: Optional[AttentionHook] = None
    ) -> LatentGrid:
        if x_t.channels != self.channels:
            raise ValueError(f"Denoiser built for {self.channels} latent channels, got {x_t.channels}")
        rng = np.random.default_rng(_stable_seed(self.seed, t, guidance.fingerprint()))
        eps = rng.standard_normal(x_t.shape)

        channels, height, width = x_t.shape
        for site, nominal_factor in self._sites:
            factor = _pool_factor(height, width, nominal_factor)
            pooled = average_pool(x_t.data, factor)
            tokens = pooled.reshape(channels, -1).T
            weights = self._weights[site]
            features = FrameFeatures(tokens, frame_id=-1)

            if attention_hook is not None:
                attended = attention_hook(site, features, weights)
            else:
                attended = self_attention(features, weights)

            residual = (tokens @ weights.w_v - attended).T.reshape(pooled.shape)
            upsampled = np.repeat(np.repeat(residual, factor, axis=1), factor, axis=2)
            eps = eps + self.coupling * upsampled

        return x_t.with_data(eps)


@register_backbone(BackboneKind.DENOISER, "toy_oracle")
class OracleDenoiser(Denoiser):
    """
    eps = (x_t - sqrt(alpha_bar_t) * target) / sqrt(1 - alpha_bar_t), so that
    estimate_x0 returns target at every step.

    The schedule must match the one the sampler uses.
    """

    concurrent_safe = True

    def __init__(
        self,
        target=None,
        target_fill: float = 0.5,
        schedule: Optional[NoiseSchedule] = None,
        num_steps: int = 20,
        schedule_kind: str = "linear_beta"
    ):
        self.target = None if target is None else np.asarray(target, dtype=np.float64)
        self.target_fill = float(target_fill)
        self.schedule = schedule or make_schedule(num_steps, schedule_kind)

    def _target_for(self, x_t: LatentGrid) -> np.ndarray:
        if self.target is None:
            return np.full(x_t.shape, self.target_fill)
        if self.target.shape != x_t.shape:
            raise ValueError(f"Oracle target shape {self.target.shape} != latent shape {x_t.shape}")
        return self.target

    def predict_noise(
        self,
        x_t: LatentGrid,
        t: int,
        guidance: GuidanceContext,
        attention_hook: Optional[AttentionHook] = None
    ) -> LatentGrid:
        alpha_bar = self.schedule.alpha_bar(t)
        if alpha_bar >= 1.0:
            return x_t.with_data(np.zeros(x_t.shape))
        target = self._target_for(x_t)
        return x_t.with_data(
            (x_t.data - math.sqrt(alpha_bar) * target) / math.sqrt(1.0 - alpha_bar)
        )
