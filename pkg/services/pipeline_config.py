"""
Pipeline Configuration

Run-level settings for video anonymization.

Precedence: CLI flag > JSON config file > built-in default. Merging happens on
plain dicts before validation:

    config = merge_config(load_config_file(path), flags)
"""

import json
import os
from pathlib import Path
from typing import Any, Dict, List, Literal, Mapping, Optional, Tuple, Union

from pydantic import BaseModel, Field, field_validator, model_validator

from diffusion.flow_fusion import DEFAULT_CORRECTION_STEPS, DEFAULT_OCCLUSION_THRESHOLD
from diffusion.scheduler import DEFAULT_NUM_STEPS, DEFAULT_STRENGTH, ScheduleKind
from parsers.frame_io import DEFAULT_FPS, DEFAULT_MAX_FRAMES
from services.face_enhancement import (
    DEFAULT_CROP_SIZE,
    DEFAULT_FEATHER_PX,
    DEFAULT_MARGIN,
    DEFAULT_PYRAMID_LEVELS,
)
from utils.logging_config import setup_logger

logger = setup_logger(__name__)


class ConfigError(ValueError):
    """Raised when a config file cannot be read or parsed."""
    pass


# Default implementation per backbone kind
DEFAULT_BACKBONES: Dict[str, Dict[str, Any]] = {
    "text_encoder": {"name": "hashing", "options": {}},
    "denoiser": {"name": "toy_hash", "options": {}},
    "autoencoder": {"name": "identity", "options": {}},
    "edge": {"name": "sobel", "options": {}},
    "flow": {"name": "block_matching", "options": {}},
    "face_detector": {"name": "static_box", "options": {}},
    "face_parser": {"name": "ellipse", "options": {}},
    "motion": {"name": "block_matching", "options": {}},
    "face_generator": {"name": "warp", "options": {}},
}

# Target identity prompts, selectable with --preset
PROMPT_PRESETS: Dict[str, str] = {
    "superman": "a Superman in blue uniform is making gestures",
    "cg_blond": "a man in CG style, blond hair, is making gestures",
    "ink_wash": "a woman in Chinese ink wash painting is making gestures",
}

DEFAULT_STAGE1_WINDOW = (0.5, 1.0)
DEFAULT_STAGE2_WINDOW = (0.0, 0.3)

# Environment overrides, applied below file and flag values
ENV_SEED = "SIGNANON_SEED"
ENV_WORKERS = "SIGNANON_WORKERS"


class BackboneSelection(BaseModel):
    """Registered implementation name plus constructor options."""

    name: str
    options: Dict[str, Any] = Field(default_factory=dict)


class PipelineConfig(BaseModel):
    """
    Validated run configuration.

    Windows are (lo, hi) intervals of the normalized step t/T; a step is inside
    a window when lo <= t/T <= hi.
    """

    prompt: str
    strength: float = DEFAULT_STRENGTH
    steps: int = DEFAULT_NUM_STEPS
    seed: int = 0
    anchor_index: Union[int, Literal["auto"]] = "auto"
    stage1_window: Tuple[float, float] = DEFAULT_STAGE1_WINDOW
    stage2_window: Tuple[float, float] = DEFAULT_STAGE2_WINDOW
    face_enhance: bool = True
    backbones: Dict[str, BackboneSelection] = Field(default_factory=dict, validate_default=True)

    schedule_kind: ScheduleKind = ScheduleKind.LINEAR_BETA
    schedule_params: Dict[str, float] = Field(default_factory=dict)
    guidance_scale: float = 7.5

    cross_frame_attention: bool = True
    attention_sites: Optional[List[str]] = None
    flow_fusion: bool = True
    adain: bool = True
    fidelity_correction_steps: int = DEFAULT_CORRECTION_STEPS
    occlusion_threshold: float = DEFAULT_OCCLUSION_THRESHOLD

    face_crop_size: int = DEFAULT_CROP_SIZE
    face_margin: float = DEFAULT_MARGIN
    face_feather_px: int = DEFAULT_FEATHER_PX
    face_pyramid_levels: int = DEFAULT_PYRAMID_LEVELS
    relative_face_motion: bool = False

    fps: float = DEFAULT_FPS
    max_frames: int = DEFAULT_MAX_FRAMES
    workers: int = 1

    @field_validator('strength')
    @classmethod
    def strength_in_range(cls, v):
        if not 0.0 < v <= 1.0:
            raise ValueError(f'strength must lie in (0, 1], got {v}')
        return v

    @field_validator('steps', 'max_frames', 'workers', 'face_pyramid_levels')
    @classmethod
    def at_least_one(cls, v):
        if v < 1:
            raise ValueError(f'Value must be >= 1, got {v}')
        return v

    @field_validator('seed', 'fidelity_correction_steps', 'face_feather_px')
    @classmethod
    def non_negative_int(cls, v):
        if v < 0:
            raise ValueError(f'Value cannot be negative: {v}')
        return v

    @field_validator('guidance_scale', 'occlusion_threshold')
    @classmethod
    def non_negative_float(cls, v):
        if v < 0:
            raise ValueError(f'Value cannot be negative: {v}')
        return v

    @field_validator('fps')
    @classmethod
    def positive_fps(cls, v):
        if v <= 0:
            raise ValueError(f'fps must be positive, got {v}')
        return v

    @field_validator('anchor_index')
    @classmethod
    def anchor_non_negative(cls, v):
        if v != "auto" and v < 0:
            raise ValueError(f'anchor_index must be >= 0 or "auto", got {v}')
        return v

    @field_validator('stage1_window', 'stage2_window')
    @classmethod
    def window_in_unit_interval(cls, v):
        lo, hi = v
        if not 0.0 <= lo <= hi <= 1.0:
            raise ValueError(f'Window must satisfy 0 <= lo <= hi <= 1, got {v}')
        return v

    @field_validator('face_crop_size')
    @classmethod
    def crop_size_minimum(cls, v):
        if v < 16:
            raise ValueError(f'face_crop_size must be >= 16, got {v}')
        return v

    @field_validator('face_margin')
    @classmethod
    def margin_minimum(cls, v):
        if v < 1.0:
            raise ValueError(f'face_margin must be >= 1, got {v}')
        return v

    @field_validator('backbones', mode='before')
    @classmethod
    def fill_default_backbones(cls, v):
        """Unspecified kinds take the defaults; a bare string selects a name without options."""
        merged: Dict[str, Any] = {kind: dict(sel) for kind, sel in DEFAULT_BACKBONES.items()}
        for kind, selection in (v or {}).items():
            if kind not in DEFAULT_BACKBONES:
                raise ValueError(
                    f"Unknown backbone kind '{kind}'. Available: {', '.join(DEFAULT_BACKBONES)}"
                )
            if isinstance(selection, str):
                selection = {"name": selection, "options": {}}
            merged[kind] = selection
        return merged

    @model_validator(mode='after')
    def prompt_not_blank(self):
        if not self.prompt.strip():
            raise ValueError('prompt must not be blank')
        return self

    def in_window(self, window: Tuple[float, float], t: int) -> bool:
        lo, hi = window
        return lo <= t / self.steps <= hi

    def backbone_selections(self) -> Dict[str, Dict[str, Any]]:
        """
        Plain {kind: {"name", "options"}} mapping for build_backbones.

        The oracle denoiser is handed this run's schedule unless its options set one.
        """
        selections = {
            kind: {"name": sel.name, "options": dict(sel.options)}
            for kind, sel in self.backbones.items()
        }
        denoiser = selections["denoiser"]
        if denoiser["name"] == "toy_oracle":
            denoiser["options"].setdefault("num_steps", self.steps)
            denoiser["options"].setdefault("schedule_kind", self.schedule_kind.value)
        return selections


def load_config_file(path) -> Dict[str, Any]:
    """
    Read a JSON config file into a plain dict (validated later by merge_config).

    Raises:
        ConfigError: If the file is missing or not a JSON object
    """
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"Config file not found: {path}")
    try:
        data = json.loads(path.read_text(encoding='utf-8'))
    except json.JSONDecodeError as e:
        raise ConfigError(f"Invalid JSON in {path}: {e}") from e
    if not isinstance(data, dict):
        raise ConfigError(f"Config file {path} must contain a JSON object")
    logger.debug(f"Loaded config file {path} with keys {sorted(data)}")
    return data


def _environment_overrides() -> Dict[str, Any]:
    overrides: Dict[str, Any] = {}
    if os.getenv(ENV_SEED):
        overrides['seed'] = int(os.environ[ENV_SEED])
    if os.getenv(ENV_WORKERS):
        overrides['workers'] = int(os.environ[ENV_WORKERS])
    return overrides


def merge_config(
    file_values: Optional[Mapping[str, Any]] = None,
    flag_values: Optional[Mapping[str, Any]] = None
) -> PipelineConfig:
    """
    Build the effective config: flags override the file, the file overrides
    environment and built-in defaults. Flag values of None count as unset.

    Backbone selections merge per kind.
    """
    file_values = dict(file_values or {})
    flags = {k: v for k, v in (flag_values or {}).items() if v is not None}

    merged: Dict[str, Any] = {**_environment_overrides(), **file_values, **flags}
    merged['backbones'] = {
        **(file_values.get('backbones') or {}),
        **(flags.get('backbones') or {}),
    }
    return PipelineConfig.model_validate(merged)
