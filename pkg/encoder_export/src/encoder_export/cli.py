"""Command line for the export bridge.

  encoder-export vit    --model <id|random:seed> --out <dir>
  encoder-export corpus --corpus <dir> --model <id|random:seed> --out <dir>
"""

from __future__ import annotations

import argparse
import sys


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="encoder-export")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("vit", help="export vision-tower weights + fixture")
    p.add_argument("--model", default="openai/clip-vit-base-patch32",
                   help="checkpoint id/path, or random:<seed> for a seeded init")
    p.add_argument("--out", required=True)

    p = sub.add_parser("corpus", help="precompute corpus text/image embeddings")
    p.add_argument("--corpus", required=True)
    p.add_argument("--model", default="openai/clip-vit-base-patch32")
    p.add_argument("--out", required=True)

    args = parser.parse_args(argv)
    try:
        if args.command == "vit":
            from .exporter import export_encoder

            manifest = export_encoder(args.model, args.out)
            print(f"wrote {manifest}")
        else:
            from .corpus import export_corpus_embeddings

            n = export_corpus_embeddings(args.corpus, args.model, args.out)
            print(f"wrote {n} corpus embeddings to {args.out}")
    except Exception as e:  # batch tool: any failure is a nonzero exit
        print(f"error: {e}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
