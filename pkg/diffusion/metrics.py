"""Temporal-consistency metrics for generated frame sequences."""

from typing import List, Optional, Sequence

import numpy as np

from diffusion.flow_fusion import FlowField, FlowFieldError, OcclusionMask, warp
from diffusion.grids import ImageGrid, require_same_shape
from utils.logging_config import setup_logger

logger = setup_logger(__name__)


def warped_mse(
    frames: Sequence[ImageGrid],
    flows: Sequence[FlowField],
    masks: Optional[Sequence[OcclusionMask]] = None
) -> List[float]:
    """
    Per-pair MSE between frame i+1 and frame i warped onto it.

    Args:
        frames: N frames of identical shape
        flows: N-1 flows; flows[i] warps frame i onto frame i+1
        masks: Optional N-1 occlusion masks; occluded pixels (1) are excluded

    Returns:
        List of N-1 mean squared errors

    Raises:
        FlowFieldError: If the number of flows or masks does not match the frames
    """
    if len(flows) != max(len(frames) - 1, 0):
        raise FlowFieldError(f"Expected {len(frames) - 1} flows for {len(frames)} frames, got {len(flows)}")
    if masks is not None and len(masks) != len(flows):
        raise FlowFieldError(f"Expected {len(flows)} masks, got {len(masks)}")

    errors = []
    for i, flow in enumerate(flows):
        current, following = frames[i], frames[i + 1]
        require_same_shape(current, following, f"frames {i} and {i + 1}")

        squared = (warp(current, flow).data - following.data) ** 2
        if masks is None:
            errors.append(float(np.mean(squared)))
            continue

        valid = 1.0 - masks[i].resized(current.spatial_shape).binarize().mask
        valid_count = float(valid.sum()) * current.channels
        if valid_count == 0:
            logger.warning(f"Frame pair {i}->{i + 1} fully occluded, skipping")
            continue
        errors.append(float((squared * valid).sum() / valid_count))

    return errors


def mean_warped_mse(
    frames: Sequence[ImageGrid],
    flows: Sequence[FlowField],
    masks: Optional[Sequence[OcclusionMask]] = None
) -> Optional[float]:
    """Mean of warped_mse over all frame pairs, or None for fewer than two frames."""
    if len(frames) < 2:
        logger.warning("Warped MSE requires at least 2 frames")
        return None

    errors = warped_mse(frames, flows, masks)
    if not errors:
        return None
    return float(np.mean(errors))
