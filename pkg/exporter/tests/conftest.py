from __future__ import annotations

import pytest

from bsc_exporter.tiny_checkpoint import build_tiny_checkpoint


@pytest.fixture(scope="session")
def checkpoint_info(tmp_path_factory):
    """Small random-init GPT-2-family checkpoint plus its corpus (no training)."""
    out = tmp_path_factory.mktemp("ckpt")
    return build_tiny_checkpoint(
        out_dir=str(out),
        seed=3,
        n_embd=64,
        n_layer=2,
        n_head=2,
        n_positions=64,
        corpus_chars=60_000,
        train_steps=0,
        log=lambda *_: None,
    )
