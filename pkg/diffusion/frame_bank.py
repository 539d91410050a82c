"""
Frame Bank

Run-scoped cache of what later frames need from earlier ones:
- attention-site features per (frame, site, step)
- the anchor frame's predicted x0 per step (flow fusion stage 1 and AdaIN)
- decoded generated frames (reference construction in stage 2, face source)

Owned by the pipeline orchestrator; not shared across runs.
"""

from dataclasses import dataclass, field
from typing import Dict, Optional, Tuple

from diffusion.grids import ImageGrid, LatentGrid


@dataclass
class FrameBank:
    """Cached features, latents and decoded outputs of generated frames."""

    anchor_index: Optional[int] = None
    features: Dict[Tuple[int, str, int], object] = field(default_factory=dict)
    anchor_x0: Dict[int, LatentGrid] = field(default_factory=dict)
    generated: Dict[int, ImageGrid] = field(default_factory=dict)

    def store_features(self, frame_index: int, site: str, step: int, features) -> None:
        self.features[(frame_index, site, step)] = features

    def get_features(self, frame_index: Optional[int], site: str, step: int):
        if frame_index is None:
            return None
        return self.features.get((frame_index, site, step))

    def release_features(self, frame_index: int) -> None:
        """Drop a frame's attention features once no later frame attends to it."""
        if frame_index == self.anchor_index:
            return
        for key in [k for k in self.features if k[0] == frame_index]:
            del self.features[key]

    def store_anchor_x0(self, step: int, x0_hat: LatentGrid) -> None:
        self.anchor_x0[step] = x0_hat

    def get_anchor_x0(self, step: int) -> Optional[LatentGrid]:
        return self.anchor_x0.get(step)

    def store_generated(self, frame_index: int, image: ImageGrid) -> None:
        self.generated[frame_index] = image

    def get_generated(self, frame_index: int) -> Optional[ImageGrid]:
        return self.generated.get(frame_index)
