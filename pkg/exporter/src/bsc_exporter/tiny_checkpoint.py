"""Build (and optionally train) a tiny GPT-2-family checkpoint.

No public hub is reachable from this environment, so desk-scale runs use a
locally constructed byte-vocabulary checkpoint: standard GPT-2 architecture,
vocab 256, briefly trained on the synthetic grammar corpus so perplexity
carries real signal.  Fully deterministic for a fixed seed.

Run as a module to build one:

    python -m bsc_exporter.tiny_checkpoint --out-dir ckpt --train-steps 400
"""

from __future__ import annotations

import argparse
import math
import os

from .byte_tokenizer import encode
from .corpus import build_corpus

TRAIN_FRACTION = 0.8  # leading share of the corpus used for training crops


def build_tiny_checkpoint(
    out_dir: str,
    seed: int = 0,
    n_embd: int = 256,
    n_layer: int = 4,
    n_head: int = 4,
    n_positions: int = 256,
    corpus_chars: int = 2_000_000,
    train_steps: int = 400,
    batch_size: int = 16,
    learning_rate: float = 3e-4,
    log=print,
) -> dict:
    """Create checkpoint + corpus under *out_dir*; returns paths and val loss."""
    import torch
    from transformers import GPT2Config, GPT2LMHeadModel

    os.makedirs(out_dir, exist_ok=True)
    text = build_corpus(seed=seed, size_chars=corpus_chars)
    corpus_path = os.path.join(out_dir, "corpus.txt")
    with open(corpus_path, "w", encoding="utf-8") as fh:
        fh.write(text)

    torch.manual_seed(seed)
    config = GPT2Config(
        vocab_size=256,
        n_positions=n_positions,
        n_embd=n_embd,
        n_layer=n_layer,
        n_head=n_head,
        bos_token_id=0,
        eos_token_id=0,
    )
    model = GPT2LMHeadModel(config)

    ids = torch.from_numpy(encode(text)).long()
    split = int(len(ids) * TRAIN_FRACTION)
    train_ids, val_ids = ids[:split], ids[split:]

    val_loss = None
    if train_steps > 0:
        gen = torch.Generator().manual_seed(seed + 1)
        opt = torch.optim.AdamW(model.parameters(), lr=learning_rate)
        model.train()
        for step in range(train_steps):
            starts = torch.randint(
                0, len(train_ids) - n_positions - 1, (batch_size,), generator=gen
            )
            batch = torch.stack([train_ids[s: s + n_positions] for s in starts])
            loss = model(batch, labels=batch).loss
            opt.zero_grad()
            loss.backward()
            opt.step()
            if step % 50 == 0 or step == train_steps - 1:
                train_loss = float(loss.detach())
                log(f"step {step}: train loss {train_loss:.4f} "
                    f"(ppl {math.exp(train_loss):.2f})")
        model.eval()
        with torch.no_grad():
            window = val_ids[: n_positions * 16]
            batch = window[: (len(window) // n_positions) * n_positions]
            batch = batch.reshape(-1, n_positions)
            val_loss = float(model(batch, labels=batch).loss)
            log(f"validation loss {val_loss:.4f} (ppl {math.exp(val_loss):.2f})")

    model.save_pretrained(out_dir, safe_serialization=True)
    return {
        "checkpoint_dir": out_dir,
        "corpus_path": corpus_path,
        "train_tokens": int(split),
        "val_loss": val_loss,
    }


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--out-dir", required=True)
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--n-embd", type=int, default=256)
    parser.add_argument("--n-layer", type=int, default=4)
    parser.add_argument("--n-head", type=int, default=4)
    parser.add_argument("--n-positions", type=int, default=256)
    parser.add_argument("--corpus-chars", type=int, default=2_000_000)
    parser.add_argument("--train-steps", type=int, default=400)
    parser.add_argument("--batch-size", type=int, default=16)
    parser.add_argument("--learning-rate", type=float, default=3e-4)
    args = parser.parse_args(argv)
    info = build_tiny_checkpoint(
        out_dir=args.out_dir,
        seed=args.seed,
        n_embd=args.n_embd,
        n_layer=args.n_layer,
        n_head=args.n_head,
        n_positions=args.n_positions,
        corpus_chars=args.corpus_chars,
        train_steps=args.train_steps,
        batch_size=args.batch_size,
        learning_rate=args.learning_rate,
    )
    print(f"checkpoint: {info['checkpoint_dir']}")
    print(f"corpus: {info['corpus_path']}")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
