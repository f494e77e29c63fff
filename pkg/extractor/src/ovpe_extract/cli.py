"""Command line front end: `ovpe-extract regions|text`."""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from .encoders import build_encoder
from .jobs import DEFAULT_TEMPLATES, ExtractionConfigError, ExtractionJob, extract_regions, extract_text


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ovpe-extract")
    sub = parser.add_subparsers(dest="command", required=True)

    regions = sub.add_parser("regions", help="dump region embeddings for boxes")
    regions.add_argument("--coco", required=True, help="COCO-style annotation JSON")
    regions.add_argument("--images", required=True, help="image directory")
    regions.add_argument("--output", required=True, help="output .ovpe path")
    regions.add_argument("--encoder", default="color-signature")
    regions.add_argument("--dim", type=int, default=64)
    regions.add_argument("--boxes", choices=["ground-truth", "proposals"], default="ground-truth")
    regions.add_argument("--proposals", default=None, help="proposal JSON (with --boxes proposals)")

    text = sub.add_parser("text", help="dump a class-name text bank")
    text.add_argument("--coco", default=None, help="take class names from this COCO JSON")
    text.add_argument("--names", default=None, help="class-name list file, one per line")
    text.add_argument("--output", required=True)
    text.add_argument("--encoder", default="color-signature")
    text.add_argument("--dim", type=int, default=64)
    text.add_argument("--template", action="append", default=None,
                      help="prompt template with {category}; repeatable")
    text.add_argument("--split-spec", default=None, help="JSON mapping name -> base|novel")
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        encoder = build_encoder(args.encoder, dim=args.dim)
        if args.command == "regions":
            job = ExtractionJob(
                coco_json=args.coco,
                image_dir=args.images,
                output_path=args.output,
                boxes_source=args.boxes,
                proposals_path=args.proposals,
            )
            manifest = extract_regions(job, encoder)
            print(f"regions: {manifest['records']} records -> {args.output}")
        else:
            if args.names:
                names = [l.strip() for l in Path(args.names).read_text().splitlines() if l.strip()]
            elif args.coco:
                doc = json.loads(Path(args.coco).read_text())
                names = [c["name"] for c in doc["categories"]]
            else:
                raise ExtractionConfigError("text command needs --names or --coco")
            split = json.loads(Path(args.split_spec).read_text()) if args.split_spec else None
            templates = args.template or list(DEFAULT_TEMPLATES)
            manifest = extract_text(names, templates, encoder, args.output, split)
            print(f"text: {manifest['classes']} classes -> {args.output}")
        return 0
    except (ExtractionConfigError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
