"""
Frame Sequence I/O

A video is a directory of lexicographically ordered PNG frames plus an
optional manifest.json:

{
    "version": 1,
    "fps": 25.0,
    "frames": [
        {"filename": "frame_00000.png", "index": 0,
         "source_filename": "0001.png", "checksum": "<sha256 of the source file>"}
    ]
}

Container decoding/encoding (mp4 etc.) is left to external tooling.
"""

import hashlib
import json
from pathlib import Path
from typing import List, Optional

import numpy as np
from PIL import Image
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from diffusion.grids import ImageGrid
from utils.logging_config import setup_logger

logger = setup_logger(__name__)


MANIFEST_NAME = "manifest.json"
MANIFEST_VERSION = 1
DEFAULT_FPS = 25.0
DEFAULT_MAX_FRAMES = 180
FRAME_PATTERN = "*.png"


class FrameSequenceError(ValueError):
    """Raised for missing input directories, empty or inconsistent frame sets."""
    pass


class FrameRecord(BaseModel):
    """Provenance of one frame."""

    index: int = Field(ge=0)
    source_filename: str
    checksum: str = ""


class FrameSequence(BaseModel):
    """Ordered frames sharing one resolution, with fps and per-frame provenance."""

    model_config = ConfigDict(arbitrary_types_allowed=True)

    frames: List[ImageGrid]
    fps: float = DEFAULT_FPS
    records: List[FrameRecord] = Field(default_factory=list)

    @field_validator('frames')
    @classmethod
    def frames_share_resolution(cls, v):
        """At least one frame, all of the same shape."""
        if not v:
            raise FrameSequenceError("A frame sequence needs at least one frame")
        shape = v[0].shape
        for index, frame in enumerate(v):
            if frame.shape != shape:
                raise FrameSequenceError(f"Frame {index} has shape {frame.shape}, expected {shape}")
        return v

    @field_validator('fps')
    @classmethod
    def positive_fps(cls, v):
        if v <= 0:
            raise FrameSequenceError(f"fps must be positive, got {v}")
        return v

    @model_validator(mode='after')
    def fill_records(self):
        """Synthesize records for in-memory sequences; otherwise one record per frame."""
        if not self.records:
            self.records = [
                FrameRecord(index=i, source_filename=f"frame_{i:05d}.png")
                for i in range(len(self.frames))
            ]
        elif len(self.records) != len(self.frames):
            raise FrameSequenceError(
                f"{len(self.records)} records for {len(self.frames)} frames"
            )
        return self

    def __len__(self) -> int:
        return len(self.frames)

    @property
    def resolution(self):
        return self.frames[0].spatial_shape

    def with_frames(self, frames: List[ImageGrid]) -> 'FrameSequence':
        """Same fps and provenance, new frames."""
        return FrameSequence(frames=frames, fps=self.fps, records=list(self.records))


def _file_checksum(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _read_png(path: Path) -> ImageGrid:
    with Image.open(path) as image:
        pixels = np.asarray(image.convert('RGB'), dtype=np.float64) / 255.0
    return ImageGrid(pixels.transpose(2, 0, 1))


def _to_pil(frame: ImageGrid) -> Image.Image:
    pixels = np.round(np.clip(frame.data, 0.0, 1.0) * 255.0).astype(np.uint8)
    if frame.channels == 1:
        return Image.fromarray(pixels[0])
    if frame.channels == 3:
        return Image.fromarray(np.ascontiguousarray(pixels.transpose(1, 2, 0)))
    raise FrameSequenceError(f"Cannot write a {frame.channels}-channel frame as PNG")


def _read_manifest_fps(directory: Path) -> Optional[float]:
    manifest_path = directory / MANIFEST_NAME
    if not manifest_path.exists():
        return None
    try:
        manifest = json.loads(manifest_path.read_text(encoding='utf-8'))
        return float(manifest['fps'])
    except Exception as e:
        logger.warning(f"Ignoring unreadable manifest {manifest_path}: {e}")
        return None


def load_frame_sequence(
    directory,
    max_frames: int = DEFAULT_MAX_FRAMES,
    fps: Optional[float] = None
) -> FrameSequence:
    """
    Load a PNG frame directory.

    Args:
        directory: Directory containing frames
        max_frames: Cap on the number of frames
        fps: Frame rate if neither the manifest nor the caller provide one

    Returns:
        FrameSequence in lexicographic filename order

    Raises:
        FrameSequenceError: Missing directory, no frames, cap exceeded or mixed resolutions
    """
    directory = Path(directory)
    if not directory.is_dir():
        raise FrameSequenceError(f"Input directory not found: {directory}")

    paths = sorted(directory.glob(FRAME_PATTERN), key=lambda p: p.name)
    if not paths:
        raise FrameSequenceError(f"No PNG frames in {directory}")
    if len(paths) > max_frames:
        raise FrameSequenceError(f"{len(paths)} frames exceed the cap of {max_frames}")

    frames = []
    records = []
    for index, path in enumerate(paths):
        try:
            frames.append(_read_png(path))
        except Exception as e:
            raise FrameSequenceError(f"Cannot read frame {path}: {e}") from e
        records.append(FrameRecord(index=index, source_filename=path.name, checksum=_file_checksum(path)))

    manifest_fps = _read_manifest_fps(directory)
    effective_fps = manifest_fps or fps or DEFAULT_FPS

    try:
        sequence = FrameSequence(frames=frames, fps=effective_fps, records=records)
    except ValidationError as e:
        raise FrameSequenceError(f"Invalid frame sequence in {directory}: {e}") from e

    logger.info(f"Loaded {len(frames)} frames from {directory} ({effective_fps} fps)")
    return sequence


def write_frame_sequence(sequence: FrameSequence, directory) -> Path:
    """
    Write frames as frame_00000.png, ... plus manifest.json.

    Output is deterministic: identical sequences produce byte-identical files.

    Returns:
        Path to the written manifest
    """
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)

    entries = []
    for index, (frame, record) in enumerate(zip(sequence.frames, sequence.records)):
        filename = f"frame_{index:05d}.png"
        _to_pil(frame).save(directory / filename, format='PNG')
        entries.append({
            'filename': filename,
            'index': index,
            'source_filename': record.source_filename,
            'checksum': record.checksum,
        })

    manifest = {
        'version': MANIFEST_VERSION,
        'fps': sequence.fps,
        'frames': entries,
    }
    manifest_path = directory / MANIFEST_NAME
    manifest_path.write_text(json.dumps(manifest, indent=2, sort_keys=True), encoding='utf-8')

    logger.info(f"Wrote {len(entries)} frames to {directory}")
    return manifest_path
