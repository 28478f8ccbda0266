"""Exporter command line: checkpoint + corpus in, `.bsc` + `.tok` out."""

from __future__ import annotations

import argparse
import sys

from .export import ExportError, ExportSpec, export_checkpoint, tokenize_corpus


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="bsc-export",
        description="Convert a GPT-2-family checkpoint and a text corpus into "
                    "the .bsc/.tok artifacts the compression toolchain consumes.",
    )
    parser.add_argument("--checkpoint", required=True,
                        help="path to a local GPT-2-family checkpoint directory")
    parser.add_argument("--out-model", default=None, help="output .bsc path")
    parser.add_argument("--corpus", default=None, help="UTF-8 text corpus path")
    parser.add_argument("--out-tokens", default=None, help="output .tok path")
    parser.add_argument("--max-tokens", type=int, default=None)
    args = parser.parse_args(argv)

    spec = ExportSpec(
        checkpoint=args.checkpoint,
        out_model=args.out_model,
        corpus=args.corpus,
        out_tokens=args.out_tokens,
        max_tokens=args.max_tokens,
    )
    try:
        if args.out_model:
            data = export_checkpoint(spec)
            print(f"wrote {args.out_model} ({len(data)} bytes)")
        if args.out_tokens:
            if not args.corpus:
                parser.error("--out-tokens needs --corpus")
            data = tokenize_corpus(spec)
            print(f"wrote {args.out_tokens} ({(len(data) - 16) // 4} tokens)")
        if not args.out_model and not args.out_tokens:
            parser.error("nothing to do: pass --out-model and/or --out-tokens")
    except ExportError as exc:
        print(f"export error: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
