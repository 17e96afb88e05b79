"""Command line for batch exports.

`export-images` writes one token tensor per image; `export-texts` writes one
embedding table for a prompt file (one prompt per line, as emitted by the
detection engine's `prompts` command).
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="clip-export")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("export-images", formatter_class=argparse.ArgumentDefaultsHelpFormatter)
    p.add_argument("images", nargs="+", help="input image files")
    p.add_argument("--model", default="openai/clip-vit-base-patch16", help="model identifier")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--target-size", type=int, default=417)
    p.add_argument("--patch-size", type=int, default=16)

    p = sub.add_parser("export-texts", formatter_class=argparse.ArgumentDefaultsHelpFormatter)
    p.add_argument("prompts", help="text file with one prompt per line")
    p.add_argument("--model", default="openai/clip-vit-base-patch16", help="model identifier")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--name", default="text_embeddings", help="output file stem")

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    from .backends import BackendError
    from .export import ExportError, ExportJob, export_image_tokens, export_text_embeddings

    try:
        if args.command == "export-images":
            job = ExportJob(
                model_id=args.model,
                output_dir=args.out,
                target_size=args.target_size,
                patch_size=args.patch_size,
            )
            written = export_image_tokens(job, args.images)
            for path in written:
                print(path)
        else:
            job = ExportJob(model_id=args.model, output_dir=args.out)
            prompts = Path(args.prompts).read_text(encoding="utf-8").splitlines()
            print(export_text_embeddings(job, prompts, name=args.name))
        return 0
    except (BackendError, ExportError, OSError) as err:
        print(f"export failed: {err}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
