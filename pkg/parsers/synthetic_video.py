"""
Synthetic Test Videos

Small clips with known ground-truth motion:
- moving square: a textured square translating over a static textured background
- static: one textured frame repeated
"""

from dataclasses import dataclass
from typing import List, Tuple

import numpy as np

from diffusion.flow_fusion import FlowField, OcclusionMask
from diffusion.grids import ImageGrid
from parsers.frame_io import FrameSequence


@dataclass
class SyntheticVideo:
    """Frames plus ground truth; flows[i] and masks[i] relate frame i to frame i+1."""

    sequence: FrameSequence
    flows: List[FlowField]
    masks: List[OcclusionMask]


def _background(rng: np.random.Generator, channels: int, size: int) -> np.ndarray:
    return 0.3 + 0.1 * rng.random((channels, size, size))


def make_moving_square_video(
    num_frames: int = 16,
    size: int = 64,
    square_size: int = 16,
    velocity: Tuple[int, int] = (2, 0),
    start: Tuple[int, int] = (4, 36),
    seed: int = 0,
    fps: float = 25.0
) -> SyntheticVideo:
    """
    Textured square moving by an integer velocity (vx, vy) per frame.

    Raises:
        ValueError: If the square leaves the frame
    """
    if num_frames < 1:
        raise ValueError(f"num_frames must be >= 1, got {num_frames}")

    vx, vy = velocity
    x0, y0 = start
    end_x = x0 + vx * (num_frames - 1)
    end_y = y0 + vy * (num_frames - 1)
    for x, y in ((x0, y0), (end_x, end_y)):
        if x < 0 or y < 0 or x + square_size > size or y + square_size > size:
            raise ValueError(f"Square at ({x}, {y}) leaves the {size}x{size} frame")

    rng = np.random.default_rng(seed)
    background = _background(rng, 3, size)
    texture = 0.7 + 0.2 * rng.random((3, square_size, square_size))

    frames = []
    regions = []
    for i in range(num_frames):
        x, y = x0 + vx * i, y0 + vy * i
        frame = background.copy()
        frame[:, y:y + square_size, x:x + square_size] = texture
        frames.append(ImageGrid(frame))

        region = np.zeros((size, size), dtype=bool)
        region[y:y + square_size, x:x + square_size] = True
        regions.append(region)

    flows = []
    masks = []
    for i in range(num_frames - 1):
        displacement = np.zeros((2, size, size))
        displacement[0][regions[i + 1]] = -vx
        displacement[1][regions[i + 1]] = -vy
        flows.append(FlowField(displacement, source_id=i, target_id=i + 1))

        # background uncovered by the square has no valid source in frame i
        uncovered = regions[i] & ~regions[i + 1]
        masks.append(OcclusionMask(uncovered[np.newaxis].astype(np.float64)))

    return SyntheticVideo(FrameSequence(frames=frames, fps=fps), flows, masks)


def make_static_video(num_frames: int = 8, size: int = 64, seed: int = 0, fps: float = 25.0) -> SyntheticVideo:
    """The same textured frame num_frames times, with zero flow and no occlusion."""
    if num_frames < 1:
        raise ValueError(f"num_frames must be >= 1, got {num_frames}")

    rng = np.random.default_rng(seed)
    frame = _background(rng, 3, size)
    frames = [ImageGrid(frame.copy()) for _ in range(num_frames)]
    flows = [FlowField.zeros(size, size, i, i + 1) for i in range(num_frames - 1)]
    masks = [OcclusionMask.zeros(size, size) for _ in range(num_frames - 1)]
    return SyntheticVideo(FrameSequence(frames=frames, fps=fps), flows, masks)
