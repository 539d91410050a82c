"""
Unit Tests for the Face Enhancement Service

Tests crop geometry, motion estimation, animation and paste-back compositing,
plus the whole-sequence enhancer and its fallbacks.
"""

import numpy as np
import pytest

from backbones.base import FaceParser, MotionEstimator
from backbones.faces import EllipseFaceParser, StaticBoxDetector, WarpFaceGenerator
from backbones.flow import BlockMatchingMotionEstimator
from diffusion.flow_fusion import FlowField, FlowFieldError, OcclusionMask
from diffusion.grids import ImageGrid
from services.face_enhancement import (
    FaceCrop,
    FaceEnhancementError,
    FaceEnhancer,
    MotionMap,
    NoFaceDetectedError,
    animate_face,
    build_occlusion_pyramid,
    crop_face,
    composite_face,
    crop_transform,
    estimate_face_motion,
    extract_face,
    paste_face,
    square_box,
)


def random_frame(seed, size=32):
    return ImageGrid(np.random.default_rng(seed).random((3, size, size)))


def identity_crop(image, bbox):
    """Crop whose pixels map one-to-one onto the frame box."""
    return FaceCrop(image=image, bbox=bbox, align_transform=crop_transform(bbox, image.spatial_shape[0]))


class ConstantParser(FaceParser):
    def __init__(self, mask):
        self.mask = mask

    def parse(self, crop):
        return self.mask


class FailingParser(FaceParser):
    def parse(self, crop):
        raise RuntimeError("parser crashed")


class FailingMotion(MotionEstimator):
    def estimate(self, source, driving):
        raise RuntimeError("motion model unavailable")


class RecordingMotion(BlockMatchingMotionEstimator):
    def __init__(self):
        super().__init__()
        self.sources = []

    def estimate(self, source, driving):
        self.sources.append(source)
        return super().estimate(source, driving)


class TestCropGeometry:
    """Test square boxes, crop transforms and face extraction."""

    def test_square_box_centered(self):
        """Test that a box is enlarged by the margin around its center."""
        assert square_box((24, 24, 16, 16), (64, 64), 1.25) == (22, 22, 20, 20)

    def test_square_box_clamped_to_frame(self):
        """Test that boxes near the border are shifted inside the frame."""
        assert square_box((0, 0, 16, 16), (64, 64), 1.25) == (0, 0, 20, 20)
        assert square_box((56, 56, 8, 8), (64, 64), 1.25) == (54, 54, 10, 10)

    def test_square_box_never_exceeds_frame(self):
        """Test that the side is capped at the frame's shorter side."""
        assert square_box((0, 0, 40, 40), (32, 32), 1.25) == (0, 0, 32, 32)

    def test_extract_face_crop_size(self):
        """Test that crops have the configured resolution and a square box."""
        frame = random_frame(0, 64)
        crop = extract_face(frame, StaticBoxDetector(), crop_size=32)
        assert crop.image.shape == (3, 32, 32)
        assert crop.bbox == (22, 6, 20, 20)
        assert crop.detected_box == (24, 8, 16, 16)

    def test_transform_round_trip(self):
        """Test that to_crop inverts to_frame to well under half a pixel."""
        crop = extract_face(random_frame(1, 64), StaticBoxDetector(), crop_size=32)
        points = np.random.default_rng(2).uniform(0, 31, size=(50, 2))
        assert np.max(np.abs(crop.to_crop(crop.to_frame(points)) - points)) < 0.5
        assert np.allclose(crop.to_crop(crop.to_frame(points)), points)

    def test_crop_samples_frame(self):
        """Test that a crop of the same size as its box copies frame pixels."""
        frame = random_frame(3)
        crop = extract_face(frame, StaticBoxDetector(box=(8, 8, 16, 16)), crop_size=16, margin=1.0)
        assert crop.bbox == (8, 8, 16, 16)
        assert np.allclose(crop.image.data, frame.data[:, 8:24, 8:24])

    def test_missing_detection_reuses_previous_box(self):
        """Test that a frame without detection reuses the previous box."""
        detector = StaticBoxDetector(box=(8, 8, 16, 16), missing_frames=[1])
        crop = extract_face(random_frame(4), detector, frame_index=1, previous_box=(4, 4, 8, 8), crop_size=16)
        assert crop.detected_box == (4, 4, 8, 8)

    def test_no_detection_raises(self):
        """Test that NoFaceDetectedError is raised without any known box."""
        detector = StaticBoxDetector(missing_frames=[0])
        with pytest.raises(NoFaceDetectedError, match="frame 0"):
            extract_face(random_frame(5), detector, frame_index=0)

    def test_non_square_crop_box_rejected(self):
        """Test that FaceCrop requires a square box."""
        with pytest.raises(ValueError, match="square"):
            FaceCrop(image=random_frame(6, 8), bbox=(0, 0, 8, 6), align_transform=np.zeros((2, 3)))


class TestFaceMotion:
    """Test motion estimation and occlusion pyramids."""

    def test_identical_crops_have_zero_motion(self):
        """Test that identical source and driving faces give zero motion and no occlusion."""
        crop = identity_crop(random_frame(7), (0, 0, 32, 32))
        motion = estimate_face_motion(crop, crop, BlockMatchingMotionEstimator())
        assert not np.any(motion.dense_motion.displacement)
        assert not np.any(motion.occlusion_pyramid[0].mask)

    def test_shifted_crop_gives_constant_motion(self):
        """Test that a 2-pixel horizontal shift is recovered everywhere."""
        source = random_frame(8)
        shifted = np.pad(source.data[:, :, 2:], ((0, 0), (0, 0), (0, 2)), mode='edge')
        driving = ImageGrid(shifted)
        motion = estimate_face_motion(
            identity_crop(source, (0, 0, 32, 32)),
            identity_crop(driving, (0, 0, 32, 32)),
            BlockMatchingMotionEstimator()
        )
        assert np.all(motion.dense_motion.displacement[0] == 2.0)
        assert np.all(motion.dense_motion.displacement[1] == 0.0)

    def test_pyramid_levels_halve(self):
        """Test a four-level pyramid for a 256 crop."""
        pyramid = build_occlusion_pyramid(OcclusionMask.zeros(256, 256), levels=4)
        assert [level.spatial_shape for level in pyramid] == [(256, 256), (128, 128), (64, 64), (32, 32)]

    def test_motion_map_validated(self):
        """Test that a mismatched or empty pyramid is rejected."""
        with pytest.raises(FlowFieldError, match="Finest"):
            MotionMap(FlowField.zeros(8, 8), [OcclusionMask.zeros(4, 4)])
        with pytest.raises(FlowFieldError, match="at least one"):
            MotionMap(FlowField.zeros(8, 8), [])
        with pytest.raises(FlowFieldError, match="halve"):
            MotionMap(FlowField.zeros(8, 8), [OcclusionMask.zeros(8, 8), OcclusionMask.zeros(3, 3)])

    def test_crop_size_mismatch_rejected(self):
        """Test that source and driving crops must share a resolution."""
        with pytest.raises(FlowFieldError, match="differ"):
            estimate_face_motion(
                identity_crop(random_frame(9, 16), (0, 0, 16, 16)),
                identity_crop(random_frame(9, 8), (0, 0, 8, 8)),
                BlockMatchingMotionEstimator()
            )


class TestAnimateFace:
    """Test driving the source face."""

    @pytest.fixture
    def source(self):
        return identity_crop(random_frame(10, 16), (0, 0, 16, 16))

    def test_zero_motion_returns_source(self, source):
        """Test that zero motion reproduces the source face."""
        motion = MotionMap(FlowField.zeros(16, 16), [OcclusionMask.zeros(16, 16)])
        animated = animate_face(source, motion, WarpFaceGenerator())
        assert np.allclose(animated.image.data, source.image.data, atol=1e-12)

    def test_shift_moves_source(self, source):
        """Test that constant motion shifts the source where nothing is occluded."""
        displacement = np.zeros((2, 16, 16))
        displacement[0] = 2.0
        motion = MotionMap(FlowField(displacement), [OcclusionMask.zeros(16, 16)])
        animated = animate_face(source, motion, WarpFaceGenerator())
        assert np.allclose(animated.image.data[:, :, :-2], source.image.data[:, :, 2:])

    def test_full_occlusion_keeps_source(self, source):
        """Test that an all-occluded map keeps the source face."""
        displacement = np.full((2, 16, 16), 1.0)
        motion = MotionMap(FlowField(displacement), [OcclusionMask.ones(16, 16)])
        animated = animate_face(source, motion, WarpFaceGenerator())
        assert np.allclose(animated.image.data, source.image.data)

    def test_placement_carries_driving_box(self, source):
        """Test that the animated face takes the placement's box and transform."""
        placement = identity_crop(random_frame(11, 16), (4, 4, 16, 16))
        motion = MotionMap(FlowField.zeros(16, 16), [OcclusionMask.zeros(16, 16)])
        animated = animate_face(source, motion, WarpFaceGenerator(), placement=placement)
        assert animated.bbox == (4, 4, 16, 16)
        assert np.array_equal(animated.align_transform, placement.align_transform)


class TestCompositeFace:
    """Test paste-back with parsed and feathered masks."""

    @pytest.fixture
    def frame(self):
        return random_frame(12)

    @pytest.fixture
    def enhanced(self):
        return identity_crop(random_frame(13, 16), (8, 8, 16, 16))

    def test_zero_mask_leaves_frame_unchanged(self, frame, enhanced):
        """Test that an empty face mask keeps every pixel."""
        parser = ConstantParser(np.zeros((1, 16, 16)))
        out = composite_face(frame, enhanced, parser, feather_px=3)
        assert np.array_equal(out.data, frame.data)

    def test_full_mask_replaces_box(self, frame, enhanced):
        """Test that a full mask without feathering replaces exactly the crop box."""
        out = composite_face(frame, enhanced, ConstantParser(np.ones((1, 16, 16))), feather_px=0)
        assert np.allclose(out.data[:, 8:24, 8:24], enhanced.image.data)
        outside = np.ones((32, 32), dtype=bool)
        outside[8:24, 8:24] = False
        assert np.array_equal(out.data[:, outside], frame.data[:, outside])

    def test_feathering_ramps_border(self, frame, enhanced):
        """Test that feathering keeps the interior and blends the border pixels."""
        out = composite_face(frame, enhanced, ConstantParser(np.ones((1, 16, 16))), feather_px=3)
        assert np.allclose(out.data[:, 10:22, 10:22], enhanced.image.data[:, 2:14, 2:14])
        expected_edge = enhanced.image.data[:, 8, 0] / 3.0 + frame.data[:, 16, 8] * 2.0 / 3.0
        assert np.allclose(out.data[:, 16, 8], expected_edge)

    def test_checkerboard_mask_oracle(self, frame, enhanced):
        """Test per-pixel selection with a hard checkerboard mask."""
        checker = (np.add.outer(np.arange(16), np.arange(16)) % 2).astype(np.float64)
        out = composite_face(frame, enhanced, ConstantParser(checker[np.newaxis]), feather_px=0)
        expected = np.where(checker > 0, enhanced.image.data, frame.data[:, 8:24, 8:24])
        assert np.allclose(out.data[:, 8:24, 8:24], expected)

    def test_parser_failure_returns_frame(self, frame, enhanced):
        """Test that a failing parser leaves the frame object untouched."""
        assert composite_face(frame, enhanced, FailingParser()) is frame

    def test_invalid_parser_mask_returns_frame(self, frame, enhanced):
        """Test that a wrongly shaped or out-of-range mask is treated as a parser failure."""
        assert composite_face(frame, enhanced, ConstantParser(np.ones((1, 8, 8)))) is frame
        assert composite_face(frame, enhanced, ConstantParser(np.full((1, 16, 16), 2.0))) is frame

    def test_output_is_convex_combination(self, frame):
        """Test that every output pixel lies between the frame and the pasted face."""
        rng = np.random.default_rng(14)
        enhanced = FaceCrop(
            image=random_frame(15, 16), bbox=(4, 4, 20, 20), align_transform=crop_transform((4, 4, 20, 20), 16)
        )
        soft_mask = rng.random((1, 16, 16))
        out = composite_face(frame, enhanced, ConstantParser(soft_mask), feather_px=2)
        face, _ = paste_face(frame, enhanced, soft_mask)
        low = np.minimum(face, frame.data) - 1e-12
        high = np.maximum(face, frame.data) + 1e-12
        assert np.all((out.data >= low) & (out.data <= high))


class TestFaceEnhancer:
    """Test enhancement of whole sequences."""

    def make_enhancer(self, detector=None, parser=None, motion=None, **kwargs):
        return FaceEnhancer(
            detector=detector or StaticBoxDetector(),
            parser=parser or EllipseFaceParser(),
            motion_estimator=motion or BlockMatchingMotionEstimator(),
            generator=WarpFaceGenerator(),
            crop_size=32,
            **kwargs
        )

    @pytest.fixture
    def frames(self):
        return [random_frame(20 + i, 64) for i in range(4)]

    def test_no_face_falls_back(self, frames):
        """Test that a video without faces is returned unchanged with a warning."""
        enhancer = self.make_enhancer(detector=StaticBoxDetector(missing_frames=range(4)))
        result = enhancer.enhance(frames, frames, anchor_index=2)
        assert not result.enhanced
        assert all(out is original for out, original in zip(result.frames, frames))
        assert any("No face detected" in w for w in result.warnings)

    def test_missed_frame_reuses_last_box(self, frames):
        """Test that a frame without detection reuses the previous frame's box."""
        enhancer = self.make_enhancer(detector=StaticBoxDetector(box=(20, 4, 16, 16), missing_frames=[2]))
        crops = enhancer.extract_driving_faces(frames)
        assert crops[2].detected_box == (20, 4, 16, 16)

    def test_leading_misses_take_first_detection(self, frames):
        """Test that frames before the first detection use the first detected box."""
        enhancer = self.make_enhancer(detector=StaticBoxDetector(box=(20, 4, 16, 16), missing_frames=[0, 1]))
        crops = enhancer.extract_driving_faces(frames)
        assert all(crop is not None for crop in crops)
        assert crops[0].detected_box == (20, 4, 16, 16)

    def test_changes_confined_to_face_box(self, frames):
        """Test that enhancement only touches pixels inside the squared face box."""
        generated = [random_frame(40 + i, 64) for i in range(4)]
        result = self.make_enhancer().enhance(generated, frames, anchor_index=2)

        x0, y0, side, _ = square_box(StaticBoxDetector().detect(frames[0]), (64, 64), 1.25)
        outside = np.ones((64, 64), dtype=bool)
        outside[y0:y0 + side, x0:x0 + side] = False

        assert result.enhanced
        assert len(result.durations_ms) == 4
        for out, original in zip(result.frames, generated):
            assert np.array_equal(out.data[:, outside], original.data[:, outside])
        assert not np.allclose(result.frames[0].data, generated[0].data)

    def test_parser_failures_collected(self, frames):
        """Test that parse failures leave frames unchanged and are reported."""
        result = self.make_enhancer(parser=FailingParser()).enhance(frames, frames, anchor_index=0)
        assert result.enhanced
        assert all(out is original for out, original in zip(result.frames, frames))
        assert len(result.warnings) == 4

    def test_motion_failure_names_frame(self, frames):
        """Test that a failing motion backbone raises with the frame index."""
        with pytest.raises(FaceEnhancementError) as excinfo:
            self.make_enhancer(motion=FailingMotion()).enhance(frames, frames, anchor_index=0)
        assert excinfo.value.frame_index == 0

    def test_parallel_matches_sequential(self, frames):
        """Test that worker threads give the same frames as a sequential run."""
        generated = [random_frame(60 + i, 64) for i in range(4)]
        sequential = self.make_enhancer().enhance(generated, frames, anchor_index=1)
        parallel = self.make_enhancer(workers=3).enhance(generated, frames, anchor_index=1)
        for a, b in zip(sequential.frames, parallel.frames):
            assert np.array_equal(a.data, b.data)

    def test_motion_source_is_generated_anchor_face(self, frames):
        """Test that motion is estimated from the generated anchor's face by default."""
        generated = [random_frame(80 + i, 64) for i in range(4)]
        motion = RecordingMotion()
        enhancer = self.make_enhancer(motion=motion)
        enhancer.enhance(generated, frames, anchor_index=2)

        box = enhancer.extract_driving_faces(frames)[2].detected_box
        expected = crop_face(generated[2], box, 32, enhancer.margin).image
        assert len(motion.sources) == 4
        assert all(np.array_equal(source.data, expected.data) for source in motion.sources)

    def test_relative_motion_uses_anchor_input_face(self, frames):
        """Test that relative motion estimates from the anchor's input face."""
        generated = [random_frame(80 + i, 64) for i in range(4)]
        motion = RecordingMotion()
        enhancer = self.make_enhancer(motion=motion, relative_motion=True)
        enhancer.enhance(generated, frames, anchor_index=2)

        expected = enhancer.extract_driving_faces(frames)[2].image
        assert all(np.array_equal(source.data, expected.data) for source in motion.sources)
