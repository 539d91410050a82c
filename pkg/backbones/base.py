"""
Backbone Interfaces and Registry

Declares every heavy-model interface the pipeline consumes. Implementations
register themselves under a (kind, name) key and are built from configuration:

    @register_backbone(BackboneKind.DENOISER, "toy_hash")
    class HashDenoiser(Denoiser):
        ...

    denoiser = get_backbone("denoiser", "toy_hash", {"coupling": 1.0})

Constructors receive the opaque options map as keyword arguments.
"""

from abc import ABC, abstractmethod
from dataclasses import dataclass, fields
from enum import Enum
from typing import Any, Dict, List, Mapping, Optional, Tuple, Type

import numpy as np

from diffusion.attention import AttentionHook
from diffusion.flow_fusion import FlowField, OcclusionMask
from diffusion.grids import ImageGrid, LatentGrid
from diffusion.scheduler import GuidanceContext
from utils.logging_config import setup_logger

logger = setup_logger(__name__)


# (x, y, width, height) in frame pixels
BoundingBox = Tuple[int, int, int, int]


class BackboneNotFoundError(ValueError):
    """Raised when no backbone is registered under the requested kind/name."""
    pass


class BackboneError(RuntimeError):
    """Raised when a backbone cannot be built or violates its interface contract."""
    pass


class BackboneKind(str, Enum):
    """Interface families the pipeline consumes."""
    TEXT_ENCODER = "text_encoder"
    DENOISER = "denoiser"
    AUTOENCODER = "autoencoder"
    EDGE = "edge"
    FLOW = "flow"
    FACE_DETECTOR = "face_detector"
    FACE_PARSER = "face_parser"
    MOTION = "motion"
    FACE_GENERATOR = "face_generator"


class Backbone(ABC):
    """Common base: implementations declare whether concurrent calls are safe."""

    concurrent_safe: bool = False


class TextEncoder(Backbone):
    """Prompt text -> prompt embedding c_p."""

    @abstractmethod
    def encode(self, prompt: str) -> np.ndarray:
        pass


class Denoiser(Backbone):
    """
    Noise predictor eps_theta(x_t, t, c_p, c_n).

    Implementations with attention layers call attention_hook(site, features, weights)
    at each site listed in attention_sites and use its return value as the layer output.
    """

    @property
    def attention_sites(self) -> List[str]:
        return []

    @abstractmethod
    def predict_noise(
        self,
        x_t: LatentGrid,
        t: int,
        guidance: GuidanceContext,
        attention_hook: Optional[AttentionHook] = None
    ) -> LatentGrid:
        """
        Predict the noise present in x_t.

        Returns:
            LatentGrid of the same shape as x_t; deterministic for fixed inputs
        """
        pass


class AutoEncoder(Backbone):
    """Image <-> latent codec."""

    latent_scale: int = 1

    @abstractmethod
    def encode(self, image: ImageGrid) -> LatentGrid:
        pass

    @abstractmethod
    def decode(self, latent: LatentGrid) -> ImageGrid:
        pass


class EdgeDetector(Backbone):
    """Image -> single-channel edge map in [0, 1] of the same spatial size."""

    @abstractmethod
    def detect(self, image: ImageGrid) -> ImageGrid:
        pass


class FlowEstimator(Backbone):
    """
    Dense optical flow between two frames.

    estimate(src, dst) returns (forward, backward): forward maps dst pixels to src
    locations (warp(src, forward) ~ dst); backward maps src pixels to dst locations.
    """

    @abstractmethod
    def estimate(self, src: ImageGrid, dst: ImageGrid) -> Tuple[FlowField, FlowField]:
        pass


class FaceDetector(Backbone):
    """Frame -> at most one face box, or None when no face is found."""

    @abstractmethod
    def detect(self, frame: ImageGrid, frame_index: int = 0) -> Optional[BoundingBox]:
        pass


class FaceParser(Backbone):
    """Face crop -> soft face mask of shape (1, H, W) in [0, 1]."""

    @abstractmethod
    def parse(self, crop: ImageGrid) -> np.ndarray:
        pass


class MotionEstimator(Backbone):
    """
    (source crop, driving crop) -> dense motion warping source onto driving,
    plus the finest-level occlusion map.
    """

    @abstractmethod
    def estimate(self, source: ImageGrid, driving: ImageGrid) -> Tuple[FlowField, OcclusionMask]:
        pass


class FaceGenerator(Backbone):
    """Animate the source crop with dense motion; crop in, crop out at fixed resolution."""

    @abstractmethod
    def generate(self, source: ImageGrid, dense_motion: FlowField, occlusion: OcclusionMask) -> ImageGrid:
        pass


# Registry of available backbones: kind -> name -> class
_BACKBONE_REGISTRY: Dict[BackboneKind, Dict[str, Type[Backbone]]] = {kind: {} for kind in BackboneKind}


def register_backbone(kind: str, name: str):
    """
    Decorator to register a backbone implementation.

    Usage:
        @register_backbone("edge", "sobel")
        class SobelEdgeDetector(EdgeDetector):
            ...
    """
    backbone_kind = BackboneKind(kind)

    def decorator(cls: Type[Backbone]):
        _BACKBONE_REGISTRY[backbone_kind][name.lower()] = cls
        return cls
    return decorator


def get_backbone(kind: str, name: str, options: Optional[Mapping[str, Any]] = None) -> Backbone:
    """
    Factory method to build a backbone instance.

    Args:
        kind: Interface family (e.g. "denoiser", "flow")
        name: Registered implementation name (e.g. "toy_hash")
        options: Keyword arguments passed to the constructor

    Returns:
        Instance of the registered class

    Raises:
        BackboneNotFoundError: If kind or name is not registered
        BackboneError: If the constructor rejects the options
    """
    try:
        backbone_kind = BackboneKind(kind)
    except ValueError as e:
        available = ", ".join(k.value for k in BackboneKind)
        raise BackboneNotFoundError(
            f"Backbone kind '{kind}' not found. Available: {available}"
        ) from e

    implementations = _BACKBONE_REGISTRY[backbone_kind]
    key = name.lower()
    if key not in implementations:
        available = ", ".join(sorted(implementations.keys()))
        raise BackboneNotFoundError(
            f"Backbone '{name}' for '{backbone_kind.value}' not found. "
            f"Available: {available}"
        )

    try:
        return implementations[key](**dict(options or {}))
    except (TypeError, ValueError) as e:
        raise BackboneError(
            f"Cannot build {backbone_kind.value} backbone '{name}' with options {dict(options or {})}: {e}"
        ) from e


def list_available_backbones(kind: Optional[str] = None) -> Dict[str, List[str]]:
    """
    Get registered backbone names, per kind.

    Returns:
        Mapping of kind -> sorted names (only the requested kind if given)
    """
    kinds = [BackboneKind(kind)] if kind is not None else list(BackboneKind)
    return {k.value: sorted(_BACKBONE_REGISTRY[k].keys()) for k in kinds}


@dataclass
class BackboneBundle:
    """One instance per interface, as consumed by the pipeline."""

    text_encoder: TextEncoder
    denoiser: Denoiser
    autoencoder: AutoEncoder
    edge: EdgeDetector
    flow: FlowEstimator
    face_detector: FaceDetector
    face_parser: FaceParser
    motion: MotionEstimator
    face_generator: FaceGenerator

    @property
    def concurrent_safe(self) -> bool:
        return all(getattr(self, f.name).concurrent_safe for f in fields(self))


_EXPECTED_BASES: Dict[BackboneKind, Type[Backbone]] = {
    BackboneKind.TEXT_ENCODER: TextEncoder,
    BackboneKind.DENOISER: Denoiser,
    BackboneKind.AUTOENCODER: AutoEncoder,
    BackboneKind.EDGE: EdgeDetector,
    BackboneKind.FLOW: FlowEstimator,
    BackboneKind.FACE_DETECTOR: FaceDetector,
    BackboneKind.FACE_PARSER: FaceParser,
    BackboneKind.MOTION: MotionEstimator,
    BackboneKind.FACE_GENERATOR: FaceGenerator,
}


def build_backbones(selections: Mapping[str, Mapping[str, Any]]) -> BackboneBundle:
    """
    Build one backbone per kind from {kind: {"name": ..., "options": {...}}}.

    Raises:
        BackboneError: If a kind is missing or an implementation has the wrong interface
    """
    built: Dict[str, Backbone] = {}
    for kind in BackboneKind:
        if kind.value not in selections:
            raise BackboneError(f"No backbone selected for '{kind.value}'")
        selection = selections[kind.value]
        instance = get_backbone(kind.value, selection['name'], selection.get('options'))
        if not isinstance(instance, _EXPECTED_BASES[kind]):
            raise BackboneError(
                f"'{selection['name']}' does not implement {_EXPECTED_BASES[kind].__name__}"
            )
        built[kind.value] = instance
        logger.debug(f"Built {kind.value} backbone '{selection['name']}'")

    return BackboneBundle(**built)
