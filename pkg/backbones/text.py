"""Deterministic hashing text encoder."""

import hashlib

import numpy as np

from backbones.base import BackboneKind, TextEncoder, register_backbone


@register_backbone(BackboneKind.TEXT_ENCODER, "hashing")
class HashingTextEncoder(TextEncoder):
    """Unit-norm Gaussian embedding seeded by the sha256 of the prompt."""

    concurrent_safe = True

    def __init__(self, dim: int = 16):
        if dim < 1:
            raise ValueError(f"dim must be >= 1, got {dim}")
        self.dim = dim

    def encode(self, prompt: str) -> np.ndarray:
        seed = int.from_bytes(hashlib.sha256(prompt.encode('utf-8')).digest()[:8], 'little')
        embedding = np.random.default_rng(seed).standard_normal(self.dim)
        return embedding / np.linalg.norm(embedding)
