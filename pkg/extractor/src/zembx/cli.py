"""Command-line entry points for the extraction bridge."""

from __future__ import annotations

import argparse
import sys

from .errors import ExtractorError
from .jobs import ExtractionJob, extract_crops, extract_text, read_manifest
from .templates import BUILTIN_TEMPLATE_SETS


def _read_lines(path):
    with open(path, "r", encoding="utf-8") as f:
        return [line.strip() for line in f if line.strip()]


def _resolve_templates(spec: str) -> list[str]:
    if spec in BUILTIN_TEMPLATE_SETS:
        return list(BUILTIN_TEMPLATE_SETS[spec])
    return _read_lines(spec)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="zembx", description="Encode prompts and image crops into ZEMB files"
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("extract-text", help="encode class prompts per template")
    p.add_argument("--model", required=True, help="hash-v1-<dim> or hf-clip:<model>")
    p.add_argument("--classes", required=True, help="text file, one class name per line")
    p.add_argument(
        "--templates",
        default="resisc45",
        help="builtin set name or a file with one template per line",
    )
    p.add_argument("--out", required=True, help="output directory")

    p = sub.add_parser("extract-crops", help="encode manifest crops")
    p.add_argument("--model", required=True)
    p.add_argument("--manifest", required=True, help="JSON lines crop manifest")
    p.add_argument("--out", required=True, help="output ZEMB path")

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "extract-text":
            job = ExtractionJob(
                model=args.model,
                templates=_resolve_templates(args.templates),
                class_names=_read_lines(args.classes),
            )
            for path in extract_text(job, args.out):
                print(f"wrote {path}")
        else:
            job = ExtractionJob(
                model=args.model,
                templates=["{}"],
                crops=read_manifest(args.manifest),
            )
            print(f"wrote {extract_crops(job, args.out)}")
        return 0
    except (ExtractorError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
