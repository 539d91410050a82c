"""
Write a Synthetic Test Clip

Creates a PNG frame directory (plus manifest) that sign_anonymizer.py can read.

Usage:
    python scripts/make_synthetic_video.py out/clip --frames 16 --size 64
    python scripts/make_synthetic_video.py out/still --static
"""

import argparse
import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).resolve().parent.parent))

from parsers.frame_io import write_frame_sequence  # noqa: E402
from parsers.synthetic_video import make_moving_square_video, make_static_video  # noqa: E402


def main():
    parser = argparse.ArgumentParser(description="Write a synthetic frame directory")
    parser.add_argument('output', help="Target directory")
    parser.add_argument('--frames', type=int, default=16)
    parser.add_argument('--size', type=int, default=64)
    parser.add_argument('--seed', type=int, default=0)
    parser.add_argument('--static', action='store_true', help="Repeat one frame instead of a moving square")
    args = parser.parse_args()

    print("=" * 60)
    print("Synthetic Clip")
    print("=" * 60)

    if args.static:
        video = make_static_video(args.frames, args.size, args.seed)
    else:
        video = make_moving_square_video(args.frames, args.size, seed=args.seed)

    manifest = write_frame_sequence(video.sequence, args.output)
    print(f"[*] Frames: {len(video.sequence)} at {args.size}x{args.size}")
    print(f"[*] Manifest: {manifest}")


if __name__ == "__main__":
    main()
