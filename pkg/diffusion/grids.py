"""
Latent and Image Grids

Channel x height x width tensors shared by every stage of the pipeline:
- LatentGrid: x_0, x_t, predicted x0 and per-frame latents
- ImageGrid: decoded frames, edge maps and face crops
- Bilinear sampling and resizing helpers (clamp-to-edge)
"""

import hashlib
from dataclasses import dataclass, replace
from enum import Enum
from typing import Tuple

import numpy as np
from scipy import ndimage


class GridError(ValueError):
    """Raised when a grid is malformed or two grids cannot be combined."""
    pass


class GridSpace(str, Enum):
    """Which space a grid lives in."""
    LATENT = "latent"
    IMAGE = "image"


@dataclass(frozen=True, eq=False)
class LatentGrid:
    """
    Real-valued (channels, height, width) tensor.

    Entries must be finite: NaN/Inf never cross a module boundary.
    """

    data: np.ndarray
    space: GridSpace = GridSpace.LATENT

    def __post_init__(self):
        arr = np.asarray(self.data, dtype=np.float64)
        if arr.ndim != 3:
            raise GridError(f"Grid must have shape (channels, height, width), got {arr.shape}")
        if not np.all(np.isfinite(arr)):
            raise GridError("Grid contains NaN or Inf entries")
        object.__setattr__(self, 'data', arr)

    @property
    def shape(self) -> Tuple[int, int, int]:
        return self.data.shape

    @property
    def channels(self) -> int:
        return self.data.shape[0]

    @property
    def spatial_shape(self) -> Tuple[int, int]:
        return self.data.shape[1], self.data.shape[2]

    def with_data(self, data: np.ndarray) -> 'LatentGrid':
        """Same grid type and space, new values."""
        return replace(self, data=data)

    def checksum(self) -> str:
        """Stable sha256 of the float64 values and shape."""
        digest = hashlib.sha256()
        digest.update(str(self.shape).encode())
        digest.update(np.ascontiguousarray(self.data).tobytes())
        return digest.hexdigest()


@dataclass(frozen=True, eq=False)
class ImageGrid(LatentGrid):
    """Decoded frame or image-space map, nominal value range [0, 1]."""

    space: GridSpace = GridSpace.IMAGE


def require_same_shape(a: LatentGrid, b: LatentGrid, what: str = "grids") -> None:
    """Raise GridError unless both grids have identical shapes."""
    if a.shape != b.shape:
        raise GridError(f"Shape mismatch between {what}: {a.shape} != {b.shape}")


def pixel_grid(height: int, width: int) -> Tuple[np.ndarray, np.ndarray]:
    """Return (ys, xs) integer coordinate planes of the given size."""
    ys, xs = np.mgrid[0:height, 0:width]
    return ys.astype(np.float64), xs.astype(np.float64)


def sample_bilinear(
    array: np.ndarray,
    ys: np.ndarray,
    xs: np.ndarray,
    mode: str = 'nearest',
    cval: float = 0.0
) -> np.ndarray:
    """
    Bilinearly sample every channel of a (C, H, W) array at (ys, xs).

    mode='nearest' clamps out-of-bounds coordinates to the edge;
    mode='constant' fills them with cval.
    """
    coords = np.stack([ys, xs])
    return np.stack([
        ndimage.map_coordinates(channel, coords, order=1, mode=mode, cval=cval)
        for channel in array
    ])


def resize_bilinear(array: np.ndarray, out_shape: Tuple[int, int]) -> np.ndarray:
    """
    Resize a (C, H, W) array to (C, *out_shape) with half-pixel aligned bilinear sampling.
    """
    in_h, in_w = array.shape[1], array.shape[2]
    out_h, out_w = out_shape
    if (in_h, in_w) == (out_h, out_w):
        return array.copy()

    scale_y = in_h / out_h
    scale_x = in_w / out_w
    ys, xs = pixel_grid(out_h, out_w)
    src_y = (ys + 0.5) * scale_y - 0.5
    src_x = (xs + 0.5) * scale_x - 0.5
    return sample_bilinear(array, src_y, src_x)


def average_pool(array: np.ndarray, factor: int) -> np.ndarray:
    """Average-pool a (C, H, W) array by an integer factor (H and W must divide)."""
    channels, height, width = array.shape
    if height % factor or width % factor:
        raise GridError(f"Spatial shape {(height, width)} not divisible by pool factor {factor}")
    return array.reshape(
        channels, height // factor, factor, width // factor, factor
    ).mean(axis=(2, 4))
