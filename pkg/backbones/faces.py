"""
Toy Face Backbones

- static_box detector: one fixed box per frame, optionally missing on given frames
- ellipse parser: hard elliptical face mask centered in the crop
- warp generator: image-space warp of the source by the dense motion,
  keeping the source where the occlusion map says the warp is invalid
"""

from typing import Optional, Sequence

import numpy as np

from backbones.base import (
    BackboneKind,
    BoundingBox,
    FaceDetector,
    FaceGenerator,
    FaceParser,
    register_backbone,
)
from diffusion.flow_fusion import FlowField, OcclusionMask, align_mask, warp
from diffusion.grids import ImageGrid, pixel_grid

# Default face box as fractions of (width, height): upper center, where a signer's face sits
DEFAULT_RELATIVE_BOX = (0.375, 0.125, 0.25, 0.25)


@register_backbone(BackboneKind.FACE_DETECTOR, "static_box")
class StaticBoxDetector(FaceDetector):
    """Returns the same box on every frame except those listed in missing_frames."""

    concurrent_safe = True

    def __init__(
        self,
        box: Optional[Sequence[int]] = None,
        relative_box: Sequence[float] = DEFAULT_RELATIVE_BOX,
        missing_frames: Sequence[int] = ()
    ):
        if box is not None and len(box) != 4:
            raise ValueError(f"box must be (x, y, width, height), got {box}")
        self.box = tuple(int(v) for v in box) if box is not None else None
        self.relative_box = tuple(float(v) for v in relative_box)
        self.missing_frames = set(missing_frames)

    def detect(self, frame: ImageGrid, frame_index: int = 0) -> Optional[BoundingBox]:
        if frame_index in self.missing_frames:
            return None
        if self.box is not None:
            return self.box

        height, width = frame.spatial_shape
        rx, ry, rw, rh = self.relative_box
        return (
            int(round(rx * width)),
            int(round(ry * height)),
            max(1, int(round(rw * width))),
            max(1, int(round(rh * height))),
        )


@register_backbone(BackboneKind.FACE_PARSER, "ellipse")
class EllipseFaceParser(FaceParser):
    """1 inside an axis-aligned ellipse with semi-axes given as fractions of the crop."""

    concurrent_safe = True

    def __init__(self, semi_axis_x: float = 0.35, semi_axis_y: float = 0.45):
        if not (0.0 < semi_axis_x <= 0.5 and 0.0 < semi_axis_y <= 0.5):
            raise ValueError("Ellipse semi-axes must lie in (0, 0.5]")
        self.semi_axis_x = semi_axis_x
        self.semi_axis_y = semi_axis_y

    def parse(self, crop: ImageGrid) -> np.ndarray:
        height, width = crop.spatial_shape
        ys, xs = pixel_grid(height, width)
        cy, cx = (height - 1) / 2.0, (width - 1) / 2.0
        inside = (
            ((xs - cx) / (self.semi_axis_x * width)) ** 2
            + ((ys - cy) / (self.semi_axis_y * height)) ** 2
        ) <= 1.0
        return inside[np.newaxis].astype(np.float64)


@register_backbone(BackboneKind.FACE_GENERATOR, "warp")
class WarpFaceGenerator(FaceGenerator):
    """output = M * source + (1 - M) * warp(source, motion)."""

    concurrent_safe = True

    def generate(self, source: ImageGrid, dense_motion: FlowField, occlusion: OcclusionMask) -> ImageGrid:
        warped = warp(source, dense_motion)
        mask = align_mask(occlusion, source.spatial_shape).mask
        return source.with_data(mask * source.data + (1.0 - mask) * warped.data)
