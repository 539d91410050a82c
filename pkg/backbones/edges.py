"""Sobel edge detector standing in for a learned edge model."""

import numpy as np
from scipy import ndimage

from backbones.base import BackboneKind, EdgeDetector, register_backbone
from diffusion.grids import ImageGrid


@register_backbone(BackboneKind.EDGE, "sobel")
class SobelEdgeDetector(EdgeDetector):
    """Sobel gradient magnitude of the channel mean, normalized by its maximum."""

    concurrent_safe = True

    def detect(self, image: ImageGrid) -> ImageGrid:
        gray = image.data.mean(axis=0)
        gx = ndimage.sobel(gray, axis=1, mode='nearest')
        gy = ndimage.sobel(gray, axis=0, mode='nearest')
        magnitude = np.hypot(gx, gy)

        peak = magnitude.max()
        if peak <= 0.0:
            return ImageGrid(np.zeros((1,) + gray.shape))
        return ImageGrid((magnitude / peak)[np.newaxis])
