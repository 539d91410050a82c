"""
Block-Matching Flow and Motion Estimators

Exhaustive SAD search over a small window per block. Candidates are visited in
order of increasing displacement and only strictly better costs replace the
current best, so flat regions resolve to zero motion.
"""

import math
from typing import List, Tuple

import numpy as np

from backbones.base import BackboneKind, FlowEstimator, MotionEstimator, register_backbone
from diffusion.flow_fusion import (
    DEFAULT_OCCLUSION_THRESHOLD,
    FlowField,
    OcclusionMask,
    estimate_flow_and_occlusion,
)
from diffusion.grids import ImageGrid, require_same_shape


def _candidate_offsets(radius: int) -> List[Tuple[int, int]]:
    offsets = [(dx, dy) for dy in range(-radius, radius + 1) for dx in range(-radius, radius + 1)]
    return sorted(offsets, key=lambda c: (abs(c[0]) + abs(c[1]), c[1], c[0]))


def _block_sums(values: np.ndarray, block: int) -> np.ndarray:
    height, width = values.shape
    rows = math.ceil(height / block)
    cols = math.ceil(width / block)
    padded = np.zeros((rows * block, cols * block))
    padded[:height, :width] = values
    return padded.reshape(rows, block, cols, block).sum(axis=(1, 3))


def block_match(source: np.ndarray, target: np.ndarray, block_size: int = 8, search_radius: int = 2) -> np.ndarray:
    """
    Per-block displacement such that target[y, x] ~ source[y + dy, x + dx].

    Args:
        source: (H, W) grayscale array sampled by the flow
        target: (H, W) grayscale array the flow is defined on
        block_size: Side of the square matching block
        search_radius: Maximum |dx| and |dy|

    Returns:
        Displacement of shape (2, H, W) as (dx, dy)
    """
    height, width = target.shape
    r = search_radius
    padded = np.pad(source, r, mode='edge')

    candidates = _candidate_offsets(r)
    costs = np.stack([
        _block_sums(np.abs(target - padded[r + dy:r + dy + height, r + dx:r + dx + width]), block_size)
        for dx, dy in candidates
    ])

    # argmin returns the first minimum, i.e. the smallest displacement among ties
    best = np.argmin(costs, axis=0)
    block_flow = np.asarray(candidates, dtype=np.float64)[best]

    dense = np.repeat(np.repeat(block_flow, block_size, axis=0), block_size, axis=1)[:height, :width]
    return dense.transpose(2, 0, 1).copy()


@register_backbone(BackboneKind.FLOW, "block_matching")
class BlockMatchingFlowEstimator(FlowEstimator):
    """SAD block matching on the channel-mean image, in both directions."""

    concurrent_safe = True

    def __init__(self, block_size: int = 8, search_radius: int = 2):
        if block_size < 1 or search_radius < 0:
            raise ValueError(f"Invalid block_size={block_size} / search_radius={search_radius}")
        self.block_size = block_size
        self.search_radius = search_radius

    def estimate(self, src: ImageGrid, dst: ImageGrid) -> Tuple[FlowField, FlowField]:
        require_same_shape(src, dst, "flow source and destination")
        src_gray = src.data.mean(axis=0)
        dst_gray = dst.data.mean(axis=0)
        forward = block_match(src_gray, dst_gray, self.block_size, self.search_radius)
        backward = block_match(dst_gray, src_gray, self.block_size, self.search_radius)
        return FlowField(forward), FlowField(backward)


@register_backbone(BackboneKind.MOTION, "block_matching")
class BlockMatchingMotionEstimator(MotionEstimator):
    """Face motion from block-matching flow plus its forward-backward occlusion map."""

    concurrent_safe = True

    def __init__(
        self,
        block_size: int = 8,
        search_radius: int = 2,
        occlusion_threshold: float = DEFAULT_OCCLUSION_THRESHOLD
    ):
        self.flow = BlockMatchingFlowEstimator(block_size, search_radius)
        self.occlusion_threshold = occlusion_threshold

    def estimate(self, source: ImageGrid, driving: ImageGrid) -> Tuple[FlowField, OcclusionMask]:
        return estimate_flow_and_occlusion(source, driving, self.flow, self.occlusion_threshold)
