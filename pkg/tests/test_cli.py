"""
Command-Line Tests

Runs sign_anonymizer.run_cli against synthetic frame directories.
"""

import argparse
import json

import pytest

from parsers.frame_io import MANIFEST_NAME, write_frame_sequence
from parsers.synthetic_video import make_moving_square_video
from services.pipeline_config import PROMPT_PRESETS
from services.run_report import REPORT_NAME, TIMINGS_NAME
from sign_anonymizer import EXIT_FAILURE, EXIT_OK, EXIT_USAGE, parse_window, run_cli


@pytest.fixture
def input_dir(tmp_path):
    video = make_moving_square_video(num_frames=6, size=32, square_size=8, start=(2, 12))
    directory = tmp_path / "input"
    write_frame_sequence(video.sequence, directory)
    return directory


def base_args(input_dir, output_dir, *extra):
    return ["--input", str(input_dir), "--output", str(output_dir), "--steps", "5", *extra]


class TestRunCli:
    """Test exit codes and outputs."""

    def test_successful_run_writes_outputs(self, input_dir, tmp_path):
        """Test that a run writes frames, a manifest and a report."""
        output = tmp_path / "out"
        code = run_cli(base_args(input_dir, output, "--prompt", "a woman", "--seed", "7"))

        assert code == EXIT_OK
        assert len(list(output.glob("frame_*.png"))) == 6
        manifest = json.loads((output / MANIFEST_NAME).read_text())
        assert len(manifest['frames']) == 6
        assert manifest['frames'][0]['source_filename'] == "frame_00000.png"

        report = json.loads((output / REPORT_NAME).read_text())
        assert report['config']['seed'] == 7
        assert report['info']['num_frames'] == 6
        assert report['info']['face_enhanced'] is True
        assert (output / TIMINGS_NAME).exists()

    def test_no_face_enhance_flag(self, input_dir, tmp_path):
        """Test that --no-face-enhance skips the face stage."""
        output = tmp_path / "out"
        assert run_cli(base_args(input_dir, output, "--prompt", "a woman", "--no-face-enhance")) == EXIT_OK
        report = json.loads((output / REPORT_NAME).read_text())
        assert report['config']['face_enhance'] is False
        assert 'face_enhanced' not in report['info']

    def test_runs_are_byte_identical(self, input_dir, tmp_path):
        """Test that two runs with the same seed write identical frames and manifests."""
        args = ("--prompt", "a woman", "--seed", "3", "--no-face-enhance")
        assert run_cli(base_args(input_dir, tmp_path / "a", *args)) == EXIT_OK
        assert run_cli(base_args(input_dir, tmp_path / "b", *args)) == EXIT_OK
        for path in sorted((tmp_path / "a").glob("frame_*.png")):
            assert path.read_bytes() == (tmp_path / "b" / path.name).read_bytes()
        assert (tmp_path / "a" / MANIFEST_NAME).read_bytes() == (tmp_path / "b" / MANIFEST_NAME).read_bytes()

    def test_preset_prompt(self, input_dir, tmp_path):
        """Test that --preset selects the stored prompt."""
        output = tmp_path / "out"
        assert run_cli(base_args(input_dir, output, "--preset", "ink_wash", "--no-face-enhance")) == EXIT_OK
        report = json.loads((output / REPORT_NAME).read_text())
        assert report['config']['prompt'] == PROMPT_PRESETS['ink_wash']

    def test_config_file_overridden_by_flags(self, input_dir, tmp_path):
        """Test that flags win over config file values."""
        config_path = tmp_path / "config.json"
        config_path.write_text(json.dumps({'prompt': "a man", 'seed': 1, 'face_enhance': False}))
        output = tmp_path / "out"
        assert run_cli(base_args(input_dir, output, "--config", str(config_path), "--seed", "5")) == EXIT_OK
        report = json.loads((output / REPORT_NAME).read_text())
        assert report['config']['seed'] == 5
        assert report['config']['prompt'] == "a man"

    def test_unknown_flag_is_usage_error(self, input_dir, tmp_path, capsys):
        """Test that an unknown flag exits 2 with usage on stderr."""
        code = run_cli(base_args(input_dir, tmp_path / "out", "--prompt", "x", "--bogus"))
        assert code == EXIT_USAGE
        assert "usage:" in capsys.readouterr().err

    def test_invalid_strength_is_usage_error(self, input_dir, tmp_path, capsys):
        """Test that an out-of-range value exits 2."""
        code = run_cli(base_args(input_dir, tmp_path / "out", "--prompt", "x", "--strength", "1.5"))
        assert code == EXIT_USAGE
        assert "strength" in capsys.readouterr().err

    def test_missing_prompt_is_usage_error(self, input_dir, tmp_path):
        """Test that a prompt is required."""
        assert run_cli(base_args(input_dir, tmp_path / "out")) == EXIT_USAGE

    def test_missing_input_is_failure(self, tmp_path):
        """Test that a missing input directory exits 1."""
        assert run_cli(base_args(tmp_path / "missing", tmp_path / "out", "--prompt", "x")) == EXIT_FAILURE

    def test_unknown_backbone_is_failure(self, input_dir, tmp_path):
        """Test that an unregistered backbone name exits 1."""
        code = run_cli(base_args(input_dir, tmp_path / "out", "--prompt", "x", "--backbone", "denoiser=nope"))
        assert code == EXIT_FAILURE

    def test_malformed_backbone_is_usage_error(self, input_dir, tmp_path):
        """Test that a selection without KIND=NAME exits 2."""
        code = run_cli(base_args(input_dir, tmp_path / "out", "--prompt", "x", "--backbone", "toy_oracle"))
        assert code == EXIT_USAGE

    def test_oracle_backbone_selection(self, input_dir, tmp_path):
        """Test that --backbone switches implementations."""
        output = tmp_path / "out"
        code = run_cli(base_args(
            input_dir, output, "--prompt", "x", "--no-face-enhance", "--backbone", "denoiser=toy_oracle"
        ))
        assert code == EXIT_OK
        report = json.loads((output / REPORT_NAME).read_text())
        assert report['config']['backbones']['denoiser']['name'] == "toy_oracle"


class TestParseWindow:
    """Test window flag parsing."""

    def test_parse_window(self):
        """Test LO:HI parsing."""
        assert parse_window("0.2:0.8") == (0.2, 0.8)

    def test_parse_window_rejects_garbage(self):
        """Test that malformed windows are rejected."""
        with pytest.raises(argparse.ArgumentTypeError, match="LO:HI"):
            parse_window("0.5")
