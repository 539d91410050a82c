"""
Video Anonymization Pipeline

Per-video loop:
1. Edge maps for all frames (control signal)
2. Encode + SDEdit initialization with per-frame seeds (master seed XOR index)
3. Generate the anchor frame with plain self-attention
4. Generate the remaining frames in temporal order with cross-frame attention
   (anchor + previous generated frame), flow fusion stage 1 early, reference
   fusion stage 2 and AdaIN late in denoising
5. Decode
6. Optional face enhancement
"""

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

from backbones.base import BackboneBundle
from diffusion.attention import CrossFrameAttentionController
from diffusion.flow_fusion import (
    FlowField,
    OcclusionMask,
    adain,
    build_reference_frame,
    estimate_flow_and_occlusion,
    ofg_stage1,
    ofg_stage2_update,
)
from diffusion.frame_bank import FrameBank
from diffusion.grids import ImageGrid, LatentGrid
from diffusion.metrics import mean_warped_mse
from diffusion.scheduler import (
    GuidanceContext,
    NoiseSchedule,
    estimate_x0,
    make_schedule,
    predict_previous,
    sdedit_init,
)
from parsers.frame_io import FrameSequence
from services.face_enhancement import FaceEnhancer
from services.pipeline_config import PipelineConfig
from services.run_report import RunReport
from utils.logging_config import frame_context, get_perf_logger, setup_logger

logger = setup_logger(__name__)


SLOW_FRAME_MS = 10000


class PipelineError(RuntimeError):
    """A run aborted; frame_index names the frame being processed, if any."""

    def __init__(self, message: str, frame_index: Optional[int] = None):
        super().__init__(message)
        self.frame_index = frame_index


@dataclass
class FusionInputs:
    """Flows and occlusion masks relating the anchor and previous frame to the current one."""

    flow_anchor: FlowField
    mask_anchor: OcclusionMask
    flow_prev: FlowField
    mask_prev: OcclusionMask


@dataclass
class GenerationStats:
    """Counts of fusion operations actually applied."""

    stage1_calls: int = 0
    stage2_calls: int = 0
    adain_calls: int = 0
    frames_generated: int = 0
    generation_order: List[int] = field(default_factory=list)


def select_anchor(sequence: FrameSequence, config: PipelineConfig) -> int:
    """
    Explicit anchor_index if set, otherwise the middle frame floor(N / 2).

    Raises:
        PipelineError: If an explicit index is outside [0, N-1]
    """
    num_frames = len(sequence)
    if config.anchor_index == "auto":
        return num_frames // 2
    if not 0 <= config.anchor_index < num_frames:
        raise PipelineError(f"anchor_index {config.anchor_index} outside [0, {num_frames - 1}]")
    return config.anchor_index


def frame_seed(master_seed: int, frame_index: int) -> int:
    return master_seed ^ frame_index


def previous_frame_index(frame_index: int, anchor_index: int) -> Optional[int]:
    """Temporal predecessor; frame 0 uses the anchor, the anchor has none."""
    if frame_index == anchor_index:
        return None
    if frame_index == 0:
        return anchor_index
    return frame_index - 1


def generation_order(num_frames: int, anchor_index: int) -> List[int]:
    """Anchor first, then every other frame in temporal order."""
    return [anchor_index] + [i for i in range(num_frames) if i != anchor_index]


def feature_release_schedule(order: Sequence[int], anchor_index: int) -> Dict[int, List[int]]:
    """
    Frames whose attention features can be dropped once each frame is generated.

    A frame's features are last read by the later of its own generation and its
    successor's; the anchor's are kept for the whole run by the frame bank.
    """
    last_use: Dict[int, int] = {}
    for position, index in enumerate(order):
        last_use[index] = position
        previous = previous_frame_index(index, anchor_index)
        if previous is not None:
            last_use[previous] = position

    schedule: Dict[int, List[int]] = {index: [] for index in order}
    for frame, position in last_use.items():
        schedule[order[position]].append(frame)
    return schedule


class VideoAnonymizer:
    """
    Orchestrates one anonymization run. Owns all mutable run state
    (frame bank, attention controller, report).
    """

    def __init__(self, config: PipelineConfig, backbones: BackboneBundle, report: Optional[RunReport] = None):
        self.config = config
        self.backbones = backbones
        self.report = report if report is not None else RunReport()
        self.schedule: NoiseSchedule = make_schedule(
            config.steps, config.schedule_kind, config.schedule_params
        )
        self.stats = GenerationStats()
        self.bank: Optional[FrameBank] = None
        self.controller: Optional[CrossFrameAttentionController] = None

    def extract_edges(self, frames: Sequence[ImageGrid]) -> List[ImageGrid]:
        """Edge maps in frame order, in parallel when the detector allows it."""
        detector = self.backbones.edge

        def detect(index: int) -> ImageGrid:
            try:
                return detector.detect(frames[index])
            except Exception as e:
                raise PipelineError(f"Edge detection failed on frame {index}: {e}", index) from e

        indices = range(len(frames))
        if self.config.workers > 1 and detector.concurrent_safe:
            with ThreadPoolExecutor(max_workers=self.config.workers) as executor:
                return list(executor.map(detect, indices))
        return [detect(i) for i in indices]

    def _fusion_inputs(self, frames: Sequence[ImageGrid], index: int, anchor: int, previous: int) -> FusionInputs:
        estimator = self.backbones.flow
        threshold = self.config.occlusion_threshold
        flow_anchor, mask_anchor = estimate_flow_and_occlusion(
            frames[anchor], frames[index], estimator, threshold, source_id=anchor, target_id=index
        )
        if previous == anchor:
            flow_prev, mask_prev = flow_anchor, mask_anchor
        else:
            flow_prev, mask_prev = estimate_flow_and_occlusion(
                frames[previous], frames[index], estimator, threshold, source_id=previous, target_id=index
            )
        return FusionInputs(flow_anchor, mask_anchor, flow_prev, mask_prev)

    def _denoise(
        self,
        index: int,
        previous: Optional[int],
        x_t: LatentGrid,
        start_step: int,
        guidance: GuidanceContext,
        fusion: Optional[FusionInputs]
    ) -> LatentGrid:
        config = self.config
        schedule = self.schedule
        bank = self.bank
        codec = self.backbones.autoencoder
        is_anchor = previous is None
        seed = frame_seed(config.seed, index)

        for t in range(start_step, 0, -1):
            self.controller.set_step(t)
            eps = self.backbones.denoiser.predict_noise(x_t, t, guidance, attention_hook=self.controller)
            x0_hat = estimate_x0(x_t, eps, t, schedule)

            if is_anchor:
                bank.store_anchor_x0(t, x0_hat)
            else:
                anchor_x0 = bank.get_anchor_x0(t)
                if fusion is not None and anchor_x0 is not None and config.in_window(config.stage1_window, t):
                    x0_hat = ofg_stage1(x0_hat, anchor_x0, fusion.flow_anchor, fusion.mask_anchor)
                    self.stats.stage1_calls += 1
                if config.adain and anchor_x0 is not None and config.in_window(config.stage2_window, t):
                    x0_hat = adain(x0_hat, anchor_x0)
                    self.stats.adain_calls += 1

            x_prev = predict_previous(x0_hat, eps, t, schedule)

            if fusion is not None and config.in_window(config.stage2_window, t):
                reference = build_reference_frame(
                    codec.decode(x0_hat),
                    bank.get_generated(previous),
                    bank.get_generated(bank.anchor_index),
                    fusion.flow_prev,
                    fusion.flow_anchor,
                    fusion.mask_prev,
                    fusion.mask_anchor,
                )
                x_prev = ofg_stage2_update(
                    x_prev, reference, t, schedule, codec,
                    rng_seed=[seed, t],
                    correction_steps=config.fidelity_correction_steps
                )
                self.stats.stage2_calls += 1

            x_t = x_prev

        return x_t

    def run(
        self,
        sequence: FrameSequence,
        ground_truth_flows: Optional[Sequence[FlowField]] = None,
        ground_truth_masks: Optional[Sequence[OcclusionMask]] = None
    ) -> FrameSequence:
        """
        Anonymize a frame sequence.

        Args:
            sequence: Input frames
            ground_truth_flows: Optional flows[i] warping frame i onto i+1, used only
                to record a temporal-consistency metric in the report
            ground_truth_masks: Optional occlusion masks matching ground_truth_flows

        Returns:
            Output FrameSequence with the input's length, resolution, fps and provenance

        Raises:
            PipelineError: On any backbone failure, naming the failing frame
        """
        config = self.config
        backbones = self.backbones
        frames = sequence.frames
        num_frames = len(frames)
        anchor = select_anchor(sequence, config)

        logger.info("=" * 60)
        logger.info(f"Anonymizing {num_frames} frames, anchor {anchor}, prompt '{config.prompt}'")
        logger.info("=" * 60)

        self.report.config = config.model_dump(mode='json')
        self.report.info.update({'num_frames': num_frames, 'anchor_index': anchor})

        prompt_embedding = backbones.text_encoder.encode(config.prompt)
        edges = self.extract_edges(frames)

        starts: Dict[int, Tuple[LatentGrid, int]] = {}
        for index, frame in enumerate(frames):
            try:
                latent = backbones.autoencoder.encode(frame)
                starts[index] = sdedit_init(latent, config.strength, self.schedule, frame_seed(config.seed, index))
            except Exception as e:
                raise PipelineError(f"Encoding failed on frame {index}: {e}", index) from e

        self.bank = FrameBank(anchor_index=anchor)
        self.controller = CrossFrameAttentionController(
            self.bank, config.attention_sites, enabled=config.cross_frame_attention
        )

        order = generation_order(num_frames, anchor)
        releases = feature_release_schedule(order, anchor)
        for index in order:
            previous = previous_frame_index(index, anchor)
            with get_perf_logger(
                logger, f"generate frame {index}", threshold_ms=SLOW_FRAME_MS, frame_index=index
            ) as perf:
                try:
                    fusion = None
                    if config.flow_fusion and previous is not None:
                        fusion = self._fusion_inputs(frames, index, anchor, previous)

                    guidance = GuidanceContext(
                        prompt_embedding=prompt_embedding,
                        control_signal=edges[index],
                        guidance_scale=config.guidance_scale,
                        prompt=config.prompt,
                    )
                    x_start, start_step = starts[index]
                    self.controller.begin_frame(index, previous)
                    latent = self._denoise(index, previous, x_start, start_step, guidance, fusion)
                    image = backbones.autoencoder.decode(latent)
                except PipelineError:
                    raise
                except Exception as e:
                    logger.error(f"Generation failed on frame {index}: {e}", exc_info=True, extra=frame_context(index))
                    raise PipelineError(f"Generation failed on frame {index}: {e}", index) from e

            if image.shape != frames[index].shape:
                raise PipelineError(
                    f"Decoded frame {index} has shape {image.shape}, input has {frames[index].shape}", index
                )

            self.bank.store_generated(index, image)
            for done in releases[index]:
                self.bank.release_features(done)
            self.stats.frames_generated += 1
            self.stats.generation_order.append(index)
            self.report.add_timing(index, 'generate', perf.duration_ms)

        outputs = [self.bank.get_generated(i) for i in range(num_frames)]

        if config.face_enhance:
            outputs = self._enhance_faces(outputs, frames, anchor)

        self._record_summary(outputs, ground_truth_flows, ground_truth_masks)
        logger.info(f"Anonymization complete: {num_frames} frames")
        return sequence.with_frames(outputs)

    def _enhance_faces(self, outputs: List[ImageGrid], inputs: Sequence[ImageGrid], anchor: int) -> List[ImageGrid]:
        config = self.config
        backbones = self.backbones
        enhancer = FaceEnhancer(
            detector=backbones.face_detector,
            parser=backbones.face_parser,
            motion_estimator=backbones.motion,
            generator=backbones.face_generator,
            crop_size=config.face_crop_size,
            margin=config.face_margin,
            feather_px=config.face_feather_px,
            pyramid_levels=config.face_pyramid_levels,
            relative_motion=config.relative_face_motion,
            workers=config.workers if backbones.concurrent_safe else 1,
        )
        try:
            result = enhancer.enhance(outputs, inputs, anchor)
        except Exception as e:
            frame_index = getattr(e, 'frame_index', None)
            logger.error(f"Face enhancement failed: {e}", exc_info=True, extra=frame_context(frame_index))
            raise PipelineError(f"Face enhancement failed: {e}", frame_index) from e

        for message in result.warnings:
            self.report.add_warning(message)
        if result.enhanced:
            for index, duration in enumerate(result.durations_ms):
                self.report.add_timing(index, 'face_enhance', duration)
        self.report.info['face_enhanced'] = result.enhanced
        return result.frames

    def _record_summary(
        self,
        outputs: List[ImageGrid],
        ground_truth_flows: Optional[Sequence[FlowField]],
        ground_truth_masks: Optional[Sequence[OcclusionMask]]
    ) -> None:
        self.report.info.update({
            'generation_order': list(self.stats.generation_order),
            'stage1_calls': self.stats.stage1_calls,
            'stage2_calls': self.stats.stage2_calls,
            'adain_calls': self.stats.adain_calls,
            'cross_frame_attention_calls': self.controller.cross_frame_calls,
        })
        if ground_truth_flows is not None:
            self.report.set_metric(
                'mean_warped_mse', mean_warped_mse(outputs, ground_truth_flows, ground_truth_masks)
            )


def anonymize_video(
    sequence: FrameSequence,
    config: PipelineConfig,
    backbones: BackboneBundle,
    report: Optional[RunReport] = None
) -> FrameSequence:
    """
    Anonymize a video with the given configuration and backbones.

    Identical inputs, config and backbones give bit-identical output.
    """
    return VideoAnonymizer(config, backbones, report).run(sequence)
