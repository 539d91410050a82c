"""
Unit Tests for Fidelity-Oriented Encoding

Tests that residual correction never increases decode error and
usually reduces it with a lossy codec.
"""

import numpy as np
import pytest

from backbones.autoencoders import AvgPoolAutoEncoder, IdentityAutoEncoder
from diffusion.flow_fusion import fidelity_encode
from diffusion.grids import GridError, ImageGrid, LatentGrid


def decode_mse(codec, latent, image):
    return float(np.mean((codec.decode(latent).data - image.data) ** 2))


class NegatingCodec:
    """Codec whose residual corrections always make things worse."""

    def encode(self, image):
        return LatentGrid(-image.data)

    def decode(self, latent):
        return ImageGrid(latent.data.copy())


class TestFidelityEncode:
    """Test the corrected encoding loop."""

    def test_lossy_codec_improves(self):
        """Test non-increasing error on 50 random 8x8 images, strictly lower in >= 90%."""
        codec = AvgPoolAutoEncoder(factor=2)
        rng = np.random.default_rng(0)
        strict = 0
        for _ in range(50):
            image = ImageGrid(rng.random((3, 8, 8)))
            plain = decode_mse(codec, codec.encode(image), image)
            corrected = decode_mse(codec, fidelity_encode(image, codec, correction_steps=2), image)
            assert corrected <= plain
            if corrected < plain:
                strict += 1
        assert strict >= 45

    def test_identity_codec_unchanged(self):
        """Test that a lossless codec returns the plain encoding."""
        codec = IdentityAutoEncoder()
        image = ImageGrid(np.random.default_rng(1).random((3, 8, 8)))
        assert np.array_equal(fidelity_encode(image, codec).data, image.data)

    def test_zero_steps_is_plain_encode(self):
        """Test that correction_steps = 0 skips correction."""
        codec = AvgPoolAutoEncoder()
        image = ImageGrid(np.random.default_rng(2).random((3, 8, 8)))
        assert np.array_equal(fidelity_encode(image, codec, 0).data, codec.encode(image).data)

    def test_harmful_correction_rejected(self):
        """Test that corrections that increase error are never accepted."""
        codec = NegatingCodec()
        image = ImageGrid(np.random.default_rng(3).random((1, 4, 4)))
        result = fidelity_encode(image, codec, correction_steps=2)
        assert np.array_equal(result.data, codec.encode(image).data)

    def test_latent_shape_follows_codec(self):
        """Test that the corrected latent has the codec's latent shape."""
        codec = AvgPoolAutoEncoder(factor=2)
        image = ImageGrid(np.random.default_rng(4).random((3, 8, 8)))
        assert fidelity_encode(image, codec).shape == (3, 4, 4)

    def test_negative_steps_rejected(self):
        """Test that a negative number of corrections is rejected."""
        with pytest.raises(GridError, match="correction_steps"):
            fidelity_encode(ImageGrid(np.zeros((1, 2, 2))), IdentityAutoEncoder(), -1)
