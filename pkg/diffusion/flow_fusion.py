"""
Optical-Flow Guided Latent Fusion

Temporal consistency operations applied while a frame is being denoised:
- Backward warping of latents/images by a flow field (bilinear, clamp-to-edge)
- Forward-backward occlusion masks
- Stage 1: fusing the warped anchor estimate into the current x0 estimate
- Stage 2: building a warped reference image and blending its re-noised
  encoding into the sampled latent
- Fidelity-oriented encoding of reference images
- AdaIN color correction

Mask convention: 1 = occluded / invalid warp (keep own content),
0 = valid warp (use the warped reference).

Flow convention: displacement[:, y, x] = (dx, dy) maps a target pixel to its
source location, so warp(src, flow)[y, x] = src[y + dy, x + dx].
"""

from dataclasses import dataclass
from typing import TYPE_CHECKING, Optional, Tuple

import numpy as np

from diffusion.grids import (
    GridError,
    ImageGrid,
    LatentGrid,
    pixel_grid,
    require_same_shape,
    resize_bilinear,
    sample_bilinear,
)
from diffusion.scheduler import NoiseSchedule, add_noise, seeded_noise
from utils.logging_config import setup_logger

if TYPE_CHECKING:
    from backbones.base import AutoEncoder, FlowEstimator

logger = setup_logger(__name__)


DEFAULT_OCCLUSION_THRESHOLD = 1.0
DEFAULT_CORRECTION_STEPS = 2
MASK_BINARIZE_THRESHOLD = 0.5
ADAIN_EPS = 1e-12

# Step halvings tried before a fidelity correction is abandoned
MAX_CORRECTION_HALVINGS = 4


class FlowFieldError(ValueError):
    """Raised for malformed flows/masks or flows that cannot be aligned with content."""
    pass


@dataclass(frozen=True, eq=False)
class FlowField:
    """Per-pixel (dx, dy) displacement, shape (2, height, width)."""

    displacement: np.ndarray
    source_id: int = -1
    target_id: int = -1

    def __post_init__(self):
        disp = np.asarray(self.displacement, dtype=np.float64)
        if disp.ndim != 3 or disp.shape[0] != 2:
            raise FlowFieldError(f"Flow must have shape (2, height, width), got {disp.shape}")
        if not np.all(np.isfinite(disp)):
            raise FlowFieldError("Flow contains NaN or Inf entries")
        height, width = disp.shape[1], disp.shape[2]
        diagonal = float(np.hypot(height, width))
        if disp.size and float(np.max(np.hypot(disp[0], disp[1]))) > diagonal:
            raise FlowFieldError(f"Flow magnitude exceeds the grid diagonal {diagonal:.1f}")
        object.__setattr__(self, 'displacement', disp)

    @classmethod
    def zeros(cls, height: int, width: int, source_id: int = -1, target_id: int = -1) -> 'FlowField':
        return cls(np.zeros((2, height, width)), source_id, target_id)

    @property
    def spatial_shape(self) -> Tuple[int, int]:
        return self.displacement.shape[1], self.displacement.shape[2]

    def resized(self, out_shape: Tuple[int, int]) -> 'FlowField':
        """
        Bilinearly resize the field and rescale displacement values by the resolution ratio.
        """
        if out_shape == self.spatial_shape:
            return self

        in_h, in_w = self.spatial_shape
        out_h, out_w = out_shape
        ratio_y = out_h / in_h
        ratio_x = out_w / in_w
        if not np.isclose(ratio_y, ratio_x):
            raise FlowFieldError(
                f"Cannot align flow {self.spatial_shape} with grid {out_shape}: aspect ratio differs"
            )

        resized = resize_bilinear(self.displacement, out_shape)
        resized[0] *= ratio_x
        resized[1] *= ratio_y
        return FlowField(resized, self.source_id, self.target_id)


@dataclass(frozen=True, eq=False)
class OcclusionMask:
    """Validity mask of shape (1, height, width) with entries in [0, 1]."""

    mask: np.ndarray

    def __post_init__(self):
        mask = np.asarray(self.mask, dtype=np.float64)
        if mask.ndim != 3 or mask.shape[0] != 1:
            raise FlowFieldError(f"Mask must have shape (1, height, width), got {mask.shape}")
        if not np.all(np.isfinite(mask)) or np.any(mask < 0.0) or np.any(mask > 1.0):
            raise FlowFieldError("Mask entries must lie in [0, 1]")
        object.__setattr__(self, 'mask', mask)

    @classmethod
    def zeros(cls, height: int, width: int) -> 'OcclusionMask':
        return cls(np.zeros((1, height, width)))

    @classmethod
    def ones(cls, height: int, width: int) -> 'OcclusionMask':
        return cls(np.ones((1, height, width)))

    @property
    def spatial_shape(self) -> Tuple[int, int]:
        return self.mask.shape[1], self.mask.shape[2]

    def binarize(self, threshold: float = MASK_BINARIZE_THRESHOLD) -> 'OcclusionMask':
        return OcclusionMask((self.mask >= threshold).astype(np.float64))

    def intersect(self, other: 'OcclusionMask') -> 'OcclusionMask':
        """Occluded in both: elementwise min of the binarized masks."""
        if self.spatial_shape != other.spatial_shape:
            raise FlowFieldError(
                f"Mask shape mismatch: {self.spatial_shape} != {other.spatial_shape}"
            )
        return OcclusionMask(np.minimum(self.binarize().mask, other.binarize().mask))

    def resized(self, out_shape: Tuple[int, int]) -> 'OcclusionMask':
        if out_shape == self.spatial_shape:
            return self
        return OcclusionMask(np.clip(resize_bilinear(self.mask, out_shape), 0.0, 1.0))


@dataclass(frozen=True, eq=False)
class ReferenceFrame:
    """Warped-and-fused reference image plus the mask of pixels occluded from every reference."""

    image: ImageGrid
    combined_mask: OcclusionMask

    def __post_init__(self):
        if self.image.spatial_shape != self.combined_mask.spatial_shape:
            raise FlowFieldError(
                f"Reference image {self.image.spatial_shape} and mask "
                f"{self.combined_mask.spatial_shape} differ in size"
            )


def _warp_array(array: np.ndarray, displacement: np.ndarray) -> np.ndarray:
    height, width = array.shape[1], array.shape[2]
    ys, xs = pixel_grid(height, width)
    return sample_bilinear(array, ys + displacement[1], xs + displacement[0])


def align_flow(flow: FlowField, spatial_shape: Tuple[int, int]) -> FlowField:
    """Resize a flow to the given grid, rejecting anything that still mismatches."""
    aligned = flow.resized(spatial_shape)
    if aligned.spatial_shape != spatial_shape:
        raise FlowFieldError(f"Flow {aligned.spatial_shape} does not match grid {spatial_shape}")
    return aligned


def align_mask(mask: OcclusionMask, spatial_shape: Tuple[int, int]) -> OcclusionMask:
    """Resize to the given grid and binarize."""
    return mask.resized(spatial_shape).binarize()


def warp(content: LatentGrid, flow: FlowField) -> LatentGrid:
    """
    Backward-warp content by flow with bilinear sampling; out-of-bounds samples clamp to edge.

    Returns the same grid type as content.
    """
    aligned = align_flow(flow, content.spatial_shape)
    return content.with_data(_warp_array(content.data, aligned.displacement))


def _blend(mask: np.ndarray, own: np.ndarray, reference: np.ndarray) -> np.ndarray:
    return mask * own + (1.0 - mask) * reference


def ofg_stage1(
    x0_hat_i: LatentGrid,
    x0_hat_a: LatentGrid,
    flow_a_to_i: FlowField,
    mask_a_i: OcclusionMask
) -> LatentGrid:
    """
    Fuse the warped anchor estimate into the current estimate:
    x0_i = M * x0_i + (1 - M) * warp(x0_a).
    """
    require_same_shape(x0_hat_i, x0_hat_a, "current and anchor x0 estimates")
    mask = align_mask(mask_a_i, x0_hat_i.spatial_shape)
    warped_anchor = warp(x0_hat_a, flow_a_to_i)
    return x0_hat_i.with_data(_blend(mask.mask, x0_hat_i.data, warped_anchor.data))


def build_reference_frame(
    decoded_current: ImageGrid,
    generated_prev: ImageGrid,
    generated_anchor: ImageGrid,
    flow_prev: FlowField,
    flow_anchor: FlowField,
    mask_prev: OcclusionMask,
    mask_anchor: OcclusionMask
) -> ReferenceFrame:
    """
    Reference image for late-stage fusion:
    I = M_a * (M_p * current + (1 - M_p) * warp(prev)) + (1 - M_a) * warp(anchor),
    with combined mask M_a ∩ M_p (elementwise min).
    """
    require_same_shape(decoded_current, generated_prev, "current and previous frames")
    require_same_shape(decoded_current, generated_anchor, "current and anchor frames")

    spatial = decoded_current.spatial_shape
    for name, item in (
        ('flow_prev', flow_prev), ('flow_anchor', flow_anchor),
        ('mask_prev', mask_prev), ('mask_anchor', mask_anchor),
    ):
        if item.spatial_shape != spatial:
            raise FlowFieldError(f"{name} shape {item.spatial_shape} != frame shape {spatial}")

    m_prev = mask_prev.binarize()
    m_anchor = mask_anchor.binarize()

    warped_prev = _warp_array(generated_prev.data, flow_prev.displacement)
    warped_anchor = _warp_array(generated_anchor.data, flow_anchor.displacement)

    inner = _blend(m_prev.mask, decoded_current.data, warped_prev)
    image = _blend(m_anchor.mask, inner, warped_anchor)

    return ReferenceFrame(
        image=decoded_current.with_data(image),
        combined_mask=m_anchor.intersect(m_prev)
    )


def _decode_mse(encoder: 'AutoEncoder', latent: LatentGrid, image: ImageGrid) -> float:
    return float(np.mean((encoder.decode(latent).data - image.data) ** 2))


def fidelity_encode(
    image: ImageGrid,
    encoder: 'AutoEncoder',
    correction_steps: int = DEFAULT_CORRECTION_STEPS
) -> LatentGrid:
    """
    Encode an image while compensating the encode/decode round-trip loss.

    Each round adds encode(image - decode(z)) to z. A round is only accepted if the
    decode error does not grow; the step is halved up to MAX_CORRECTION_HALVINGS
    times before the correction stops.
    """
    if correction_steps < 0:
        raise GridError(f"correction_steps must be >= 0, got {correction_steps}")

    latent = encoder.encode(image)
    if correction_steps == 0:
        return latent

    error = _decode_mse(encoder, latent, image)

    for round_index in range(correction_steps):
        residual = image.with_data(image.data - encoder.decode(latent).data)
        direction = encoder.encode(residual).data
        if not np.any(direction):
            break

        step = 1.0
        accepted = False
        for _ in range(MAX_CORRECTION_HALVINGS + 1):
            candidate = latent.with_data(latent.data + step * direction)
            candidate_error = _decode_mse(encoder, candidate, image)
            if candidate_error <= error:
                latent, error = candidate, candidate_error
                accepted = True
                break
            step *= 0.5

        if not accepted:
            logger.debug(f"Fidelity correction stopped after {round_index} rounds")
            break

    return latent


def ofg_stage2_update(
    x_next: LatentGrid,
    reference: ReferenceFrame,
    t: int,
    schedule: NoiseSchedule,
    encoder: 'AutoEncoder',
    rng_seed,
    correction_steps: int = DEFAULT_CORRECTION_STEPS
) -> LatentGrid:
    """
    Blend the re-noised reference into the sampled latent:
    x_{t-1} = M * x_{t-1} + (1 - M) * xbar_{t-1}.

    At t = 1 the reference is used un-noised (alpha_bar_0 = 1).
    """
    schedule.check_step(t)
    reference_latent = fidelity_encode(reference.image, encoder, correction_steps)
    require_same_shape(x_next, reference_latent, "sampled latent and encoded reference")

    if t - 1 == 0:
        renoised = reference_latent
    else:
        noise = reference_latent.with_data(seeded_noise(reference_latent.shape, rng_seed))
        renoised = add_noise(reference_latent, t - 1, noise, schedule)

    mask = align_mask(reference.combined_mask, x_next.spatial_shape)
    return x_next.with_data(_blend(mask.mask, x_next.data, renoised.data))


def adain(x: LatentGrid, style_ref: LatentGrid) -> LatentGrid:
    """
    Match per-channel mean and standard deviation of x to style_ref.

    A zero-variance channel of x contributes no normalized term, so a constant
    channel maps to the style mean.
    """
    if x.channels != style_ref.channels:
        raise GridError(f"Channel mismatch: {x.channels} != {style_ref.channels}")

    x_flat = x.data.reshape(x.channels, -1)
    style_flat = style_ref.data.reshape(style_ref.channels, -1)

    x_mean = x_flat.mean(axis=1, keepdims=True)
    x_std = x_flat.std(axis=1, keepdims=True)
    style_mean = style_flat.mean(axis=1, keepdims=True)
    style_std = style_flat.std(axis=1, keepdims=True)

    centered = x_flat - x_mean
    safe_std = np.where(x_std > ADAIN_EPS, x_std, 1.0)
    normalized = np.where(x_std > ADAIN_EPS, centered / safe_std, 0.0)

    out = normalized * style_std + style_mean
    return x.with_data(out.reshape(x.shape))


def forward_backward_occlusion(
    forward: FlowField,
    backward: FlowField,
    threshold: float = DEFAULT_OCCLUSION_THRESHOLD
) -> OcclusionMask:
    """
    Mark pixels whose forward flow is not undone by the backward flow, or whose
    forward flow leaves the frame.

    mask = 1 where |w_fwd + warp(w_bwd, w_fwd)| > threshold.
    """
    if forward.spatial_shape != backward.spatial_shape:
        raise FlowFieldError(
            f"Forward {forward.spatial_shape} and backward {backward.spatial_shape} flows differ in size"
        )

    height, width = forward.spatial_shape
    fwd = forward.displacement
    bwd_at_target = _warp_array(backward.displacement, fwd)
    round_trip = np.hypot(fwd[0] + bwd_at_target[0], fwd[1] + bwd_at_target[1])

    ys, xs = pixel_grid(height, width)
    src_x = xs + fwd[0]
    src_y = ys + fwd[1]
    out_of_bounds = (src_x < 0) | (src_x > width - 1) | (src_y < 0) | (src_y > height - 1)

    occluded = (round_trip > threshold) | out_of_bounds
    return OcclusionMask(occluded[np.newaxis].astype(np.float64))


def estimate_flow_and_occlusion(
    frame_src: ImageGrid,
    frame_dst: ImageGrid,
    estimator: 'FlowEstimator',
    threshold: float = DEFAULT_OCCLUSION_THRESHOLD,
    source_id: int = -1,
    target_id: int = -1
) -> Tuple[FlowField, OcclusionMask]:
    """
    Flow that warps frame_src onto frame_dst, plus its occlusion mask.

    Raises:
        GridError: If the frames differ in shape
    """
    require_same_shape(frame_src, frame_dst, "source and destination frames")
    forward, backward = estimator.estimate(frame_src, frame_dst)
    forward = FlowField(forward.displacement, source_id, target_id)
    mask = forward_backward_occlusion(forward, backward, threshold)
    return forward, mask
