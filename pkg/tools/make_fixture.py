"""Build the committed small-checkpoint fixtures for the acceptance suite.

Trains the tiny GPT-2-family checkpoint on the synthetic grammar corpus
(deterministic seed), exports it through the exporter package, and tokenizes
held-out calibration/eval slices.  Writes:

    tests/fixtures/tiny_gpt2.bsc
    tests/fixtures/calib.tok
    tests/fixtures/eval.tok

Usage:  python3 tools/make_fixture.py [--work-dir DIR] [--train-steps N]
"""

from __future__ import annotations

import argparse
import subprocess
import sys
import tempfile
from pathlib import Path

from bsc_exporter.export import ExportSpec, export_checkpoint, tokenize_corpus
from bsc_exporter.tiny_checkpoint import TRAIN_FRACTION, build_tiny_checkpoint

REPO = Path(__file__).resolve().parent.parent
FIXTURES = REPO / "tests" / "fixtures"

CALIB_TOKENS = 16384
EVAL_TOKENS = 8192


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--work-dir", default=None,
                        help="where to keep the checkpoint (default: temp dir)")
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--train-steps", type=int, default=400)
    args = parser.parse_args(argv)

    work = Path(args.work_dir) if args.work_dir else Path(tempfile.mkdtemp(prefix="fixture-"))
    ckpt_dir = work / "checkpoint"
    info = build_tiny_checkpoint(
        out_dir=str(ckpt_dir),
        seed=args.seed,
        n_embd=128,
        n_layer=4,
        n_head=4,
        n_positions=256,
        corpus_chars=2_000_000,
        train_steps=args.train_steps,
    )

    FIXTURES.mkdir(parents=True, exist_ok=True)
    model_path = FIXTURES / "tiny_gpt2.bsc"
    export_checkpoint(ExportSpec(checkpoint=str(ckpt_dir), out_model=str(model_path)))
    print(f"wrote {model_path} ({model_path.stat().st_size} bytes)")

    # Calibration and eval slices come from the held-out tail of the corpus
    # (the trainer only crops from the leading TRAIN_FRACTION).
    text = Path(info["corpus_path"]).read_text(encoding="utf-8")
    val_text = text[int(len(text) * TRAIN_FRACTION):]
    slices = {
        "calib.tok": (val_text[: CALIB_TOKENS + 64], CALIB_TOKENS),
        "eval.tok": (val_text[CALIB_TOKENS + 64: CALIB_TOKENS + 64 + EVAL_TOKENS + 64],
                     EVAL_TOKENS),
    }
    for name, (slice_text, cap) in slices.items():
        slice_path = work / f"{name}.txt"
        slice_path.write_text(slice_text, encoding="utf-8")
        out = FIXTURES / name
        tokenize_corpus(ExportSpec(
            checkpoint=str(ckpt_dir), corpus=str(slice_path),
            out_tokens=str(out), max_tokens=cap,
        ))
        print(f"wrote {out} ({out.stat().st_size} bytes)")

    proc = subprocess.run(
        [sys.executable, "-m", "bsc.cli", "eval", "--model", str(model_path),
         "--tokens", str(FIXTURES / "eval.tok"), "--seqlen", "256"],
        capture_output=True, text=True,
    )
    print(proc.stdout.strip())
    if proc.returncode != 0:
        print(proc.stderr, file=sys.stderr)
        return proc.returncode
    print(f"checkpoint kept at {ckpt_dir}")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
