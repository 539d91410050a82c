"""
Face Enhancement Service

Restores the signer's facial expressions on diffusion output:
- Detect and crop aligned faces (driving faces from the input video,
  source face from the first generated frame)
- Estimate dense face motion and a multi-resolution occlusion pyramid
- Animate the source face with that motion
- Paste the animated face back with a parsed, feathered face mask:
  I' = M * F_E + (1 - M) * I'

Alignment is a similarity transform (scale + translation, no rotation).
"""

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np
from scipy import ndimage

from backbones.base import BoundingBox, FaceDetector, FaceGenerator, FaceParser, MotionEstimator
from diffusion.flow_fusion import FlowField, FlowFieldError, OcclusionMask
from diffusion.grids import GridError, ImageGrid, pixel_grid, sample_bilinear
from utils.logging_config import get_perf_logger, setup_logger

logger = setup_logger(__name__)


DEFAULT_CROP_SIZE = 256
DEFAULT_MARGIN = 1.25
DEFAULT_FEATHER_PX = 3
DEFAULT_PYRAMID_LEVELS = 1


class NoFaceDetectedError(LookupError):
    """Raised when a frame has no detection and no previously known box exists."""
    pass


class FaceEnhancementError(RuntimeError):
    """A face backbone failed on a frame."""

    def __init__(self, message: str, frame_index: int):
        super().__init__(message)
        self.frame_index = frame_index


@dataclass(frozen=True, eq=False)
class FaceCrop:
    """
    Aligned square face crop.

    align_transform maps crop pixel coordinates (u, v) to frame coordinates:
    [x, y] = A[:, :2] @ [u, v] + A[:, 2]
    """

    image: ImageGrid
    bbox: BoundingBox
    align_transform: np.ndarray
    detected_box: Optional[BoundingBox] = None

    def __post_init__(self):
        transform = np.asarray(self.align_transform, dtype=np.float64)
        if transform.shape != (2, 3):
            raise GridError(f"align_transform must be 2x3, got {transform.shape}")
        if self.bbox[2] != self.bbox[3]:
            raise GridError(f"Face crop box must be square, got {self.bbox}")
        object.__setattr__(self, 'align_transform', transform)

    @property
    def crop_size(self) -> int:
        return self.image.spatial_shape[0]

    def to_frame(self, points: np.ndarray) -> np.ndarray:
        """Map (N, 2) crop (u, v) points to frame (x, y)."""
        points = np.asarray(points, dtype=np.float64)
        return points @ self.align_transform[:, :2].T + self.align_transform[:, 2]

    def to_crop(self, points: np.ndarray) -> np.ndarray:
        """Map (N, 2) frame (x, y) points to crop (u, v)."""
        points = np.asarray(points, dtype=np.float64)
        linear = self.align_transform[:, :2]
        return (points - self.align_transform[:, 2]) @ np.linalg.inv(linear).T


@dataclass(frozen=True, eq=False)
class MotionMap:
    """Dense motion at crop resolution plus occlusion maps at halving resolutions."""

    dense_motion: FlowField
    occlusion_pyramid: List[OcclusionMask] = field(default_factory=list)

    def __post_init__(self):
        if not self.occlusion_pyramid:
            raise FlowFieldError("Occlusion pyramid needs at least one level")
        if self.occlusion_pyramid[0].spatial_shape != self.dense_motion.spatial_shape:
            raise FlowFieldError(
                f"Finest occlusion level {self.occlusion_pyramid[0].spatial_shape} != "
                f"motion {self.dense_motion.spatial_shape}"
            )
        for finer, coarser in zip(self.occlusion_pyramid, self.occlusion_pyramid[1:]):
            expected = tuple(max(1, s // 2) for s in finer.spatial_shape)
            if coarser.spatial_shape != expected:
                raise FlowFieldError(
                    f"Pyramid level {coarser.spatial_shape} does not halve {finer.spatial_shape}"
                )


@dataclass(frozen=True, eq=False)
class FaceMask:
    """Face mask at frame resolution, entries in [0, 1]."""

    mask: np.ndarray

    def __post_init__(self):
        mask = np.asarray(self.mask, dtype=np.float64)
        if mask.ndim != 3 or mask.shape[0] != 1:
            raise GridError(f"Face mask must have shape (1, H, W), got {mask.shape}")
        if not np.all(np.isfinite(mask)) or np.any(mask < 0.0) or np.any(mask > 1.0):
            raise GridError("Face mask entries must lie in [0, 1]")
        object.__setattr__(self, 'mask', mask)


def square_box(
    box: BoundingBox,
    frame_shape: Tuple[int, int],
    margin: float = DEFAULT_MARGIN
) -> BoundingBox:
    """
    Square box around a detection, enlarged by margin and clamped inside the frame.
    """
    height, width = frame_shape
    x, y, w, h = box
    center_x = x + w / 2.0
    center_y = y + h / 2.0

    side = int(round(max(w, h) * margin))
    side = max(1, min(side, height, width))

    x0 = int(round(center_x - side / 2.0))
    y0 = int(round(center_y - side / 2.0))
    x0 = min(max(x0, 0), width - side)
    y0 = min(max(y0, 0), height - side)
    return (x0, y0, side, side)


def crop_transform(bbox: BoundingBox, crop_size: int) -> np.ndarray:
    """Pixel-center aligned similarity transform from crop to frame coordinates."""
    x0, y0, side, _ = bbox
    scale = side / crop_size
    return np.array([
        [scale, 0.0, x0 + 0.5 * scale - 0.5],
        [0.0, scale, y0 + 0.5 * scale - 0.5],
    ])


def extract_face(
    frame: ImageGrid,
    detector: FaceDetector,
    frame_index: int = 0,
    previous_box: Optional[BoundingBox] = None,
    crop_size: int = DEFAULT_CROP_SIZE,
    margin: float = DEFAULT_MARGIN
) -> FaceCrop:
    """
    Detect, square, clamp and crop the face in a frame.

    Args:
        frame: Full frame
        detector: Face detector backbone
        frame_index: Passed to the detector
        previous_box: Last known detection, reused when this frame has none
        crop_size: Side of the output crop
        margin: Box enlargement factor

    Returns:
        FaceCrop with the detection that produced it in detected_box

    Raises:
        NoFaceDetectedError: If nothing is detected and no previous box is known
    """
    detected = detector.detect(frame, frame_index)
    if detected is None:
        if previous_box is None:
            raise NoFaceDetectedError(f"No face detected in frame {frame_index}")
        logger.debug(f"Frame {frame_index}: no detection, reusing box {previous_box}")
        detected = previous_box

    return crop_face(frame, detected, crop_size, margin)


def crop_face(
    frame: ImageGrid,
    box: BoundingBox,
    crop_size: int = DEFAULT_CROP_SIZE,
    margin: float = DEFAULT_MARGIN
) -> FaceCrop:
    """Crop a known face box (squared, enlarged and clamped) to crop_size x crop_size."""
    bbox = square_box(box, frame.spatial_shape, margin)
    transform = crop_transform(bbox, crop_size)

    vs, us = pixel_grid(crop_size, crop_size)
    xs = transform[0, 0] * us + transform[0, 2]
    ys = transform[1, 1] * vs + transform[1, 2]
    image = ImageGrid(sample_bilinear(frame.data, ys, xs))

    return FaceCrop(image=image, bbox=bbox, align_transform=transform, detected_box=tuple(box))


def build_occlusion_pyramid(mask: OcclusionMask, levels: int = DEFAULT_PYRAMID_LEVELS) -> List[OcclusionMask]:
    """Occlusion maps at full, 1/2, 1/4, ... resolution."""
    if levels < 1:
        raise FlowFieldError(f"Pyramid needs at least one level, got {levels}")

    pyramid = [mask]
    for _ in range(levels - 1):
        height, width = pyramid[-1].spatial_shape
        pyramid.append(pyramid[-1].resized((max(1, height // 2), max(1, width // 2))))
    return pyramid


def estimate_face_motion(
    source: FaceCrop,
    driving: FaceCrop,
    estimator: MotionEstimator,
    pyramid_levels: int = DEFAULT_PYRAMID_LEVELS
) -> MotionMap:
    """Dense motion warping the source crop onto the driving crop."""
    if source.image.spatial_shape != driving.image.spatial_shape:
        raise FlowFieldError(
            f"Source crop {source.image.spatial_shape} and driving crop "
            f"{driving.image.spatial_shape} differ in size"
        )
    dense_motion, occlusion = estimator.estimate(source.image, driving.image)
    return MotionMap(dense_motion, build_occlusion_pyramid(occlusion, pyramid_levels))


def animate_face(
    source: FaceCrop,
    motion: MotionMap,
    generator: FaceGenerator,
    placement: Optional[FaceCrop] = None
) -> FaceCrop:
    """
    Drive the source face with motion.

    The result carries placement's box and transform (the driving face's location),
    defaulting to the source's own.
    """
    if motion.dense_motion.spatial_shape != source.image.spatial_shape:
        raise FlowFieldError(
            f"Motion {motion.dense_motion.spatial_shape} not at crop resolution {source.image.spatial_shape}"
        )

    animated = generator.generate(source.image, motion.dense_motion, motion.occlusion_pyramid[0])
    if animated.shape != source.image.shape:
        raise GridError(f"Generator returned {animated.shape}, expected {source.image.shape}")

    target = placement or source
    return FaceCrop(
        image=animated,
        bbox=target.bbox,
        align_transform=target.align_transform,
        detected_box=target.detected_box
    )


def paste_face(frame: ImageGrid, enhanced: FaceCrop, crop_mask: np.ndarray) -> Tuple[np.ndarray, FaceMask]:
    """
    Map the enhanced crop and its mask into frame coordinates.

    Returns:
        Tuple of (face image at frame resolution, FaceMask zero outside the crop box)
    """
    height, width = frame.spatial_shape
    size = enhanced.crop_size

    ys, xs = pixel_grid(height, width)
    crop_points = enhanced.to_crop(np.stack([xs.ravel(), ys.ravel()], axis=1))
    us = crop_points[:, 0].reshape(height, width)
    vs = crop_points[:, 1].reshape(height, width)

    inside = (us >= -0.5) & (us <= size - 0.5) & (vs >= -0.5) & (vs <= size - 0.5)
    face = sample_bilinear(enhanced.image.data, vs, us)
    mask = sample_bilinear(crop_mask, vs, us) * inside
    return face, FaceMask(np.clip(mask, 0.0, 1.0))


def feather_mask(mask: FaceMask, feather_px: int = DEFAULT_FEATHER_PX) -> FaceMask:
    """Linear ramp over the innermost feather_px pixels of the mask support."""
    if feather_px <= 0:
        return mask
    support = mask.mask[0] > 0.0
    distance = ndimage.distance_transform_edt(support)
    ramp = np.clip(distance / feather_px, 0.0, 1.0)
    return FaceMask(mask.mask * ramp[np.newaxis])


def composite_face(
    frame: ImageGrid,
    enhanced: FaceCrop,
    parser: FaceParser,
    feather_px: int = DEFAULT_FEATHER_PX
) -> ImageGrid:
    """
    Blend the enhanced face into the frame: I' = M * F_E + (1 - M) * I'.

    The mask is parsed on the crop, then mapped with the same transform. A parser
    failure returns the frame unchanged.
    """
    try:
        crop_mask = np.asarray(parser.parse(enhanced.image), dtype=np.float64)
        expected = (1,) + enhanced.image.spatial_shape
        if crop_mask.shape != expected:
            raise GridError(f"Parser returned mask {crop_mask.shape}, expected {expected}")
        if np.any(crop_mask < 0.0) or np.any(crop_mask > 1.0) or not np.all(np.isfinite(crop_mask)):
            raise GridError("Parser mask entries must lie in [0, 1]")
    except Exception as e:
        logger.warning(f"Face parsing failed, frame left unchanged: {e}")
        return frame

    face, mask = paste_face(frame, enhanced, crop_mask)
    weights = feather_mask(mask, feather_px).mask
    return frame.with_data(weights * face + (1.0 - weights) * frame.data)


@dataclass
class FaceEnhancementResult:
    """Output frames plus warnings raised while enhancing."""

    frames: List[ImageGrid]
    enhanced: bool
    warnings: List[str] = field(default_factory=list)
    durations_ms: List[float] = field(default_factory=list)


class FaceEnhancer:
    """
    Runs the face module over a whole generated sequence.

    Driving faces come from the input frames; the source face is cropped from the
    first generated frame (the anchor). Motion is estimated between the source face
    and each driving face. With relative motion, the anchor's input face replaces the
    source face as the motion reference, and the motion is still applied to the source face.
    """

    def __init__(
        self,
        detector: FaceDetector,
        parser: FaceParser,
        motion_estimator: MotionEstimator,
        generator: FaceGenerator,
        crop_size: int = DEFAULT_CROP_SIZE,
        margin: float = DEFAULT_MARGIN,
        feather_px: int = DEFAULT_FEATHER_PX,
        pyramid_levels: int = DEFAULT_PYRAMID_LEVELS,
        relative_motion: bool = False,
        workers: int = 1
    ):
        self.detector = detector
        self.parser = parser
        self.motion_estimator = motion_estimator
        self.generator = generator
        self.crop_size = crop_size
        self.margin = margin
        self.feather_px = feather_px
        self.pyramid_levels = pyramid_levels
        self.relative_motion = relative_motion
        self.workers = workers

    def extract_driving_faces(self, frames: Sequence[ImageGrid]) -> List[Optional[FaceCrop]]:
        """
        Driving face crop per input frame, reusing the last known box on missed frames.

        Frames before the first detection take the first detected box; the list is
        all None when no face is ever detected.
        """
        crops: List[Optional[FaceCrop]] = []
        last_box: Optional[BoundingBox] = None
        for index, frame in enumerate(frames):
            try:
                crop = extract_face(frame, self.detector, index, last_box, self.crop_size, self.margin)
            except NoFaceDetectedError:
                crops.append(None)
                continue
            last_box = crop.detected_box
            crops.append(crop)

        first_known = next((c for c in crops if c is not None), None)
        if first_known is None:
            return crops
        return [
            c if c is not None else crop_face(frames[i], first_known.detected_box, self.crop_size, self.margin)
            for i, c in enumerate(crops)
        ]

    def enhance(
        self,
        generated: Sequence[ImageGrid],
        inputs: Sequence[ImageGrid],
        anchor_index: int
    ) -> FaceEnhancementResult:
        """
        Enhance every generated frame.

        Returns:
            FaceEnhancementResult; if no face is ever detected the frames are returned
            unchanged with a warning
        """
        driving_faces = self.extract_driving_faces(inputs)
        anchor_driving = driving_faces[anchor_index]
        if anchor_driving is None:
            message = "No face detected in any frame, face enhancement disabled"
            logger.warning(message)
            return FaceEnhancementResult(frames=list(generated), enhanced=False, warnings=[message])

        source = crop_face(generated[anchor_index], anchor_driving.detected_box, self.crop_size, self.margin)
        motion_reference = anchor_driving if self.relative_motion else source

        warnings: List[str] = []
        durations: List[float] = [0.0] * len(generated)

        def enhance_frame(index: int) -> ImageGrid:
            with get_perf_logger(
                logger, f"face enhancement frame {index}", threshold_ms=2000, frame_index=index
            ) as perf:
                driving = driving_faces[index]
                try:
                    motion = estimate_face_motion(
                        motion_reference, driving, self.motion_estimator, self.pyramid_levels
                    )
                    animated = animate_face(source, motion, self.generator, placement=driving)
                except Exception as e:
                    raise FaceEnhancementError(f"Face animation failed on frame {index}: {e}", index) from e
                output = composite_face(generated[index], animated, self.parser, self.feather_px)
            durations[index] = perf.duration_ms
            if output is generated[index]:
                warnings.append(f"Frame {index}: face parsing failed, frame left unchanged")
            return output

        indices = range(len(generated))
        if self.workers > 1:
            with ThreadPoolExecutor(max_workers=self.workers) as executor:
                frames = list(executor.map(enhance_frame, indices))
        else:
            frames = [enhance_frame(i) for i in indices]

        logger.info(f"Face enhancement applied to {len(frames)} frames")
        return FaceEnhancementResult(
            frames=frames, enhanced=True, warnings=sorted(warnings), durations_ms=durations
        )
