"""
Attention Control

Self-attention baseline and the cross-frame substitution that replaces the
current frame's keys and values with those of the anchor frame and the
previously generated frame.

A denoiser exposes named attention sites and calls a hook at each one; the
CrossFrameAttentionController is the hook the pipeline registers.
"""

from dataclasses import dataclass
from typing import Callable, Iterable, Optional

import numpy as np
from scipy.special import softmax

from diffusion.frame_bank import FrameBank
from utils.logging_config import setup_logger

logger = setup_logger(__name__)


class AttentionShapeError(ValueError):
    """Raised when projection weights and token matrices do not line up."""
    pass


@dataclass(frozen=True, eq=False)
class AttentionWeights:
    """Query/key/value projections, each of shape (d_model, d)."""

    w_q: np.ndarray
    w_k: np.ndarray
    w_v: np.ndarray

    def __post_init__(self):
        shapes = set()
        for name in ('w_q', 'w_k', 'w_v'):
            matrix = np.asarray(getattr(self, name), dtype=np.float64)
            if matrix.ndim != 2:
                raise AttentionShapeError(f"{name} must be a matrix, got shape {matrix.shape}")
            shapes.add(matrix.shape)
            object.__setattr__(self, name, matrix)
        if len(shapes) != 1:
            raise AttentionShapeError(f"w_q, w_k and w_v must share one shape, got {sorted(shapes)}")

    @property
    def d_model(self) -> int:
        return self.w_q.shape[0]

    @property
    def d(self) -> int:
        return self.w_q.shape[1]

    @classmethod
    def random(cls, d_model: int, d: int, seed: int, value_identity: bool = False) -> 'AttentionWeights':
        """Seeded Gaussian projections scaled by 1/sqrt(d_model)."""
        rng = np.random.default_rng(seed)
        scale = 1.0 / np.sqrt(d_model)
        w_q = rng.standard_normal((d_model, d)) * scale
        w_k = rng.standard_normal((d_model, d)) * scale
        if value_identity:
            if d != d_model:
                raise AttentionShapeError("value_identity requires d == d_model")
            w_v = np.eye(d_model)
        else:
            w_v = rng.standard_normal((d_model, d)) * scale
        return cls(w_q=w_q, w_k=w_k, w_v=w_v)


@dataclass(frozen=True, eq=False)
class FrameFeatures:
    """Latent tokens entering an attention layer, shape (sequence_length, d_model)."""

    tokens: np.ndarray
    frame_id: int

    def __post_init__(self):
        tokens = np.asarray(self.tokens, dtype=np.float64)
        if tokens.ndim != 2 or tokens.shape[0] < 1:
            raise AttentionShapeError(
                f"tokens must have shape (sequence_length >= 1, d_model), got {tokens.shape}"
            )
        object.__setattr__(self, 'tokens', tokens)

    @property
    def d_model(self) -> int:
        return self.tokens.shape[1]


# (site name, current features, projection weights) -> attention output (sequence_length, d)
AttentionHook = Callable[[str, FrameFeatures, AttentionWeights], np.ndarray]


def _check_compatible(features: FrameFeatures, w: AttentionWeights, role: str) -> None:
    if features.d_model != w.d_model:
        raise AttentionShapeError(
            f"{role} features have d_model={features.d_model}, weights expect {w.d_model}"
        )


def attention_map(queries: np.ndarray, keys: np.ndarray) -> np.ndarray:
    """Row-stochastic softmax(Q K^T / sqrt(d))."""
    d = queries.shape[1]
    logits = queries @ keys.T / np.sqrt(d)
    return softmax(logits, axis=1)


def self_attention(v: FrameFeatures, w: AttentionWeights) -> np.ndarray:
    """Softmax(Q K^T / sqrt(d)) V with Q, K, V all projected from v."""
    _check_compatible(v, w, "current")
    q = v.tokens @ w.w_q
    k = v.tokens @ w.w_k
    values = v.tokens @ w.w_v
    return attention_map(q, k) @ values


def cross_frame_attention(
    v: FrameFeatures,
    anchor: FrameFeatures,
    previous: FrameFeatures,
    w: AttentionWeights
) -> np.ndarray:
    """
    Queries from the current frame; keys and values from [anchor; previous].

    anchor and previous may be the same object (frame right after the anchor).
    """
    _check_compatible(v, w, "current")
    _check_compatible(anchor, w, "anchor")
    _check_compatible(previous, w, "previous")

    context = np.concatenate([anchor.tokens, previous.tokens], axis=0)
    q = v.tokens @ w.w_q
    k = context @ w.w_k
    values = context @ w.w_v
    return attention_map(q, k) @ values


class CrossFrameAttentionController:
    """
    Attention hook that records per-site, per-step features into a FrameBank and
    substitutes cross-frame attention for self-attention on allowed sites.

    Usage:
        controller = CrossFrameAttentionController(bank)
        controller.begin_frame(anchor_index, previous_index=None)   # anchor: plain self-attention
        for t in steps:
            controller.set_step(t)
            denoiser.predict_noise(x_t, t, guidance, attention_hook=controller)
        controller.begin_frame(i, previous_index=i - 1)              # cross-frame from here on
    """

    def __init__(
        self,
        bank: FrameBank,
        site_allowlist: Optional[Iterable[str]] = None,
        enabled: bool = True
    ):
        self.bank = bank
        self.site_allowlist = set(site_allowlist) if site_allowlist is not None else None
        self.enabled = enabled
        self.frame_index: Optional[int] = None
        self.previous_index: Optional[int] = None
        self.step: Optional[int] = None
        self.cross_frame_calls = 0

    def begin_frame(self, frame_index: int, previous_index: Optional[int]) -> None:
        """Start generating a frame. previous_index=None means plain self-attention."""
        self.frame_index = frame_index
        self.previous_index = previous_index
        self.step = None

    def set_step(self, t: int) -> None:
        self.step = t

    def site_allowed(self, site: str) -> bool:
        return self.site_allowlist is None or site in self.site_allowlist

    def __call__(self, site: str, v: FrameFeatures, w: AttentionWeights) -> np.ndarray:
        if self.frame_index is None or self.step is None:
            raise AttentionShapeError("Attention controller used before begin_frame/set_step")

        self.bank.store_features(self.frame_index, site, self.step, v)

        if not self.enabled or self.previous_index is None or not self.site_allowed(site):
            return self_attention(v, w)

        anchor = self.bank.get_features(self.bank.anchor_index, site, self.step)
        previous = self.bank.get_features(self.previous_index, site, self.step)
        if anchor is None or previous is None:
            logger.debug(f"No cached features for {site} at step {self.step}, using self-attention")
            return self_attention(v, w)

        self.cross_frame_calls += 1
        return cross_frame_attention(v, anchor, previous, w)
