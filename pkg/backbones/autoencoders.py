"""Toy image/latent codecs."""

from backbones.base import AutoEncoder, BackboneKind, register_backbone
from diffusion.grids import ImageGrid, LatentGrid, average_pool, resize_bilinear


@register_backbone(BackboneKind.AUTOENCODER, "identity")
class IdentityAutoEncoder(AutoEncoder):
    """Lossless: the latent is the image."""

    concurrent_safe = True
    latent_scale = 1

    def encode(self, image: ImageGrid) -> LatentGrid:
        return LatentGrid(image.data.copy())

    def decode(self, latent: LatentGrid) -> ImageGrid:
        return ImageGrid(latent.data.copy())


@register_backbone(BackboneKind.AUTOENCODER, "avgpool")
class AvgPoolAutoEncoder(AutoEncoder):
    """
    Lossy: average-pool encode, bilinear upsample decode.

    Frame sides must be divisible by the factor.
    """

    concurrent_safe = True

    def __init__(self, factor: int = 2):
        if factor < 1:
            raise ValueError(f"factor must be >= 1, got {factor}")
        self.latent_scale = factor

    def encode(self, image: ImageGrid) -> LatentGrid:
        return LatentGrid(average_pool(image.data, self.latent_scale))

    def decode(self, latent: LatentGrid) -> ImageGrid:
        height, width = latent.spatial_shape
        out_shape = (height * self.latent_scale, width * self.latent_scale)
        return ImageGrid(resize_bilinear(latent.data, out_shape))
