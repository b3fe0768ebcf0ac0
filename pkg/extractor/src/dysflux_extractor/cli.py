"""Command-line entry point: dysflux-extract."""

from __future__ import annotations

import argparse
import logging
import sys

from .backbone import BACKBONE_ALIASES, RANDOM_BACKBONE
from .extract import ExtractionJob, extract


def build_parser():
    parser = argparse.ArgumentParser(
        prog="dysflux-extract",
        description="Run a pretrained speech backbone over audio clips and write "
                    ".dyfh hidden-state files",
    )
    parser.add_argument("--manifest", required=True, help="dysflux JSON-lines manifest")
    parser.add_argument("--audio-dir", required=True, help="directory of <clip_id>.wav files")
    parser.add_argument("--out-dir", required=True, help="directory for .dyfh outputs")
    parser.add_argument(
        "--backbone", default="english-asr-base",
        help=f"alias ({', '.join(BACKBONE_ALIASES)}), '{RANDOM_BACKBONE}' for an "
             "untrained base-architecture encoder, or any 12-layer/768-dim "
             "checkpoint id or local path",
    )
    parser.add_argument("--jobs", type=int, default=1)
    parser.add_argument("--sample-rate", type=int, default=16000)
    parser.add_argument("--seed", type=int, default=0,
                        help="initialization seed for the random-base backbone")
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO, stream=sys.stderr,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    job = ExtractionJob(
        manifest_path=args.manifest,
        audio_dir=args.audio_dir,
        out_dir=args.out_dir,
        backbone=args.backbone,
        sample_rate=args.sample_rate,
        jobs=args.jobs,
        seed=args.seed,
    )
    result = extract(job)
    print(f"written {len(result.written)}, skipped {len(result.skipped)}, "
          f"failed {len(result.failed)}")
    for clip_id, reason in result.failed:
        print(f"  failed {clip_id}: {reason}", file=sys.stderr)
    return 0 if result.ok else 1


if __name__ == "__main__":
    sys.exit(main())
