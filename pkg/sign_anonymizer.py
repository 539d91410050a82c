"""
Sign Language Video Anonymizer

Command-line entry point: reads a PNG frame directory, replaces the signer's
identity according to a text prompt and writes the anonymized frames, a
manifest and a run report.

Usage:
    python sign_anonymizer.py --input in/ --output out/ --preset ink_wash --seed 7

Exit codes: 0 success, 1 runtime failure, 2 usage error.
"""

import argparse
import sys
from typing import Any, Dict, List, Optional, Tuple

from pydantic import ValidationError

from backbones.base import BackboneError, BackboneNotFoundError, build_backbones
from parsers.frame_io import FrameSequenceError, load_frame_sequence, write_frame_sequence
from services.pipeline import PipelineError, anonymize_video
from services.pipeline_config import PROMPT_PRESETS, ConfigError, load_config_file, merge_config
from services.run_report import RunReport
from utils.logging_config import setup_logger

logger = setup_logger(__name__)


EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_USAGE = 2


def parse_window(value: str) -> Tuple[float, float]:
    """'LO:HI' -> (lo, hi)."""
    try:
        lo, hi = (float(part) for part in value.split(':'))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected LO:HI, got '{value}'")
    return lo, hi


def parse_anchor(value: str):
    if value == "auto":
        return value
    try:
        return int(value)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected an integer or 'auto', got '{value}'")


def parse_backbone(value: str) -> Tuple[str, str]:
    """'KIND=NAME' -> (kind, name)."""
    kind, sep, name = value.partition('=')
    if not sep or not kind or not name:
        raise argparse.ArgumentTypeError(f"expected KIND=NAME, got '{value}'")
    return kind.strip(), name.strip()


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="sign_anonymizer",
        description="Text-guided sign language video anonymization"
    )
    parser.add_argument('--input', required=True, help="Directory of input PNG frames")
    parser.add_argument('--output', required=True, help="Directory for output frames and report")
    parser.add_argument('--prompt', help="Target identity/style prompt")
    parser.add_argument('--preset', choices=sorted(PROMPT_PRESETS), help="Use a predefined prompt")
    parser.add_argument('--config', help="JSON config file (flags override it)")
    parser.add_argument('--seed', type=int)
    parser.add_argument('--steps', type=int)
    parser.add_argument('--strength', type=float)
    parser.add_argument('--anchor', type=parse_anchor, help="Anchor frame index or 'auto'")
    parser.add_argument('--stage1', type=parse_window, help="Stage-1 fusion window LO:HI of t/T")
    parser.add_argument('--stage2', type=parse_window, help="Stage-2 fusion/AdaIN window LO:HI of t/T")
    parser.add_argument('--no-face-enhance', action='store_true', help="Skip the face enhancement stage")
    parser.add_argument('--no-flow-fusion', action='store_true', help="Disable optical-flow guided fusion")
    parser.add_argument('--no-cross-frame-attention', action='store_true', help="Use plain self-attention")
    parser.add_argument(
        '--backbone', type=parse_backbone, action='append', default=[], metavar='KIND=NAME',
        help="Select a registered backbone, e.g. denoiser=toy_oracle (repeatable)"
    )
    parser.add_argument('--max-frames', type=int)
    parser.add_argument('--workers', type=int)
    return parser


def flags_from_args(args: argparse.Namespace) -> Dict[str, Any]:
    """Map parsed flags onto config keys; unset flags are None."""
    prompt = args.prompt
    if prompt is None and args.preset is not None:
        prompt = PROMPT_PRESETS[args.preset]

    flags: Dict[str, Any] = {
        'prompt': prompt,
        'seed': args.seed,
        'steps': args.steps,
        'strength': args.strength,
        'anchor_index': args.anchor,
        'stage1_window': args.stage1,
        'stage2_window': args.stage2,
        'max_frames': args.max_frames,
        'workers': args.workers,
        'face_enhance': False if args.no_face_enhance else None,
        'flow_fusion': False if args.no_flow_fusion else None,
        'cross_frame_attention': False if args.no_cross_frame_attention else None,
    }
    if args.backbone:
        flags['backbones'] = {kind: name for kind, name in args.backbone}
    return flags


def run_cli(argv: Optional[List[str]] = None) -> int:
    """
    Parse flags, run the pipeline and write outputs.

    Returns:
        Process exit code
    """
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code) if e.code is not None else EXIT_OK

    try:
        file_values = load_config_file(args.config) if args.config else {}
        flags = flags_from_args(args)
        if flags['prompt'] is None and 'prompt' not in file_values:
            raise ConfigError("a prompt is required (--prompt, --preset or the config file)")
        config = merge_config(file_values, flags)
    except (ConfigError, ValidationError, ValueError) as e:
        parser.print_usage(sys.stderr)
        print(f"{parser.prog}: error: {e}", file=sys.stderr)
        return EXIT_USAGE

    report = RunReport()
    try:
        sequence = load_frame_sequence(args.input, config.max_frames, config.fps)
        backbones = build_backbones(config.backbone_selections())
        output = anonymize_video(sequence, config, backbones, report)
        write_frame_sequence(output, args.output)
        report.write(args.output)
    except (FrameSequenceError, PipelineError, BackboneError, BackboneNotFoundError) as e:
        logger.error(f"Anonymization failed: {e}")
        return EXIT_FAILURE
    except Exception as e:
        logger.error(f"Unexpected failure: {e}", exc_info=True)
        return EXIT_FAILURE

    for warning in report.warnings:
        logger.warning(warning)
    logger.info(f"Wrote {len(output)} frames to {args.output}")
    return EXIT_OK


def main():
    sys.exit(run_cli())


if __name__ == "__main__":
    main()
