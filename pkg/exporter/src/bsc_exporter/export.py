"""Checkpoint and corpus conversion.

Maps a GPT-2-family checkpoint onto the container's site taxonomy: the fused
QKV projection splits into three d-wide sites, every weight is normalized to
the ``y = x @ w`` orientation (``w`` stored d_in x d_out) and widened or cast
to float32.  Tokenization uses the checkpoint's tokenizer; vocab-256
checkpoints use the byte-level tokenizer.
"""

from __future__ import annotations

import os
import tempfile
from dataclasses import dataclass

import numpy as np

from . import byte_tokenizer, container_format, tok_format


class ExportError(Exception):
    pass


@dataclass
class ExportSpec:
    checkpoint: str
    out_model: str | None = None
    corpus: str | None = None
    out_tokens: str | None = None
    max_tokens: int | None = None


def _atomic_write(path: str, data: bytes) -> None:
    directory = os.path.dirname(os.path.abspath(path)) or "."
    fd, tmp = tempfile.mkstemp(prefix=".export-", dir=directory)
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _load_config(checkpoint: str):
    from transformers import AutoConfig

    config = AutoConfig.from_pretrained(checkpoint)
    if config.model_type != "gpt2":
        raise ExportError(
            f"unsupported architecture {config.model_type!r}; expected a GPT-2-family checkpoint"
        )
    return config


def _load_gpt2(checkpoint: str):
    import torch
    from transformers import GPT2LMHeadModel

    config = _load_config(checkpoint)
    with torch.no_grad():
        model = GPT2LMHeadModel.from_pretrained(checkpoint)
    model.eval()
    return config, model


def _f32(tensor) -> np.ndarray:
    return np.ascontiguousarray(tensor.detach().to("cpu").float().numpy().astype(np.float32))


def export_checkpoint(spec: ExportSpec) -> bytes:
    """Convert the checkpoint into container bytes (and write them if asked)."""
    config, model = _load_gpt2(spec.checkpoint)
    sd = {k: v for k, v in model.state_dict().items()}
    d = config.n_embd
    mlp = config.n_inner if config.n_inner else 4 * d
    manifest = {
        "architecture": "gpt2-like",
        "layer_count": config.n_layer,
        "hidden": d,
        "mlp": mlp,
        "heads": config.n_head,
        "vocab": config.vocab_size,
        "context": config.n_positions,
        "types": ["K", "Q", "V", "O", "Up", "Down"],
        "ln_eps": float(config.layer_norm_epsilon),
        "orientation": "y = x @ w; w stores d_in x d_out",
    }

    def fetch(name: str) -> np.ndarray:
        if name not in sd:
            raise ExportError(f"checkpoint tensor {name!r} missing")
        return _f32(sd[name])

    def oriented(name: str, d_in: int, d_out: int) -> np.ndarray:
        w = fetch(name)
        if w.shape == (d_in, d_out):
            return w
        if w.shape == (d_out, d_in):
            return np.ascontiguousarray(w.T)  # source stored d_out x d_in
        raise ExportError(f"{name}: shape {w.shape} fits neither orientation of "
                          f"({d_in}, {d_out})")

    tensors: list[tuple[str, np.ndarray]] = []
    tensors.append(("embed.token", fetch("transformer.wte.weight")))
    tensors.append(("embed.pos", fetch("transformer.wpe.weight")))
    for i in range(config.n_layer):
        p = f"transformer.h.{i}"
        tensors.append((f"layers.{i}.ln1.weight", fetch(f"{p}.ln_1.weight")))
        tensors.append((f"layers.{i}.ln1.bias", fetch(f"{p}.ln_1.bias")))
        fused_w = oriented(f"{p}.attn.c_attn.weight", d, 3 * d)
        fused_b = fetch(f"{p}.attn.c_attn.bias")
        # Fused projection is [query | key | value] along the output axis.
        for t, col in (("Q", 0), ("K", 1), ("V", 2)):
            tensors.append((f"layers.{i}.{t}", np.ascontiguousarray(
                fused_w[:, col * d:(col + 1) * d])))
            tensors.append((f"layers.{i}.{t}.bias", np.ascontiguousarray(
                fused_b[col * d:(col + 1) * d])))
        tensors.append((f"layers.{i}.O", oriented(f"{p}.attn.c_proj.weight", d, d)))
        tensors.append((f"layers.{i}.O.bias", fetch(f"{p}.attn.c_proj.bias")))
        tensors.append((f"layers.{i}.ln2.weight", fetch(f"{p}.ln_2.weight")))
        tensors.append((f"layers.{i}.ln2.bias", fetch(f"{p}.ln_2.bias")))
        tensors.append((f"layers.{i}.Up", oriented(f"{p}.mlp.c_fc.weight", d, mlp)))
        tensors.append((f"layers.{i}.Up.bias", fetch(f"{p}.mlp.c_fc.bias")))
        tensors.append((f"layers.{i}.Down", oriented(f"{p}.mlp.c_proj.weight", mlp, d)))
        tensors.append((f"layers.{i}.Down.bias", fetch(f"{p}.mlp.c_proj.bias")))
    tensors.append(("norm.final.weight", fetch("transformer.ln_f.weight")))
    tensors.append(("norm.final.bias", fetch("transformer.ln_f.bias")))
    head_name = "lm_head.weight" if "lm_head.weight" in sd else "transformer.wte.weight"
    tensors.append(("head.weight", oriented(head_name, d, config.vocab_size)))

    data = container_format.serialize(
        tensors, manifest, extras={"source": {"kind": "gpt2-checkpoint"}}
    )
    if spec.out_model:
        _atomic_write(spec.out_model, data)
    return data


def _encode_corpus(text: str, checkpoint: str, vocab: int) -> np.ndarray:
    if vocab == byte_tokenizer.VOCAB_SIZE:
        return byte_tokenizer.encode(text)
    try:
        from transformers import AutoTokenizer

        tokenizer = AutoTokenizer.from_pretrained(checkpoint)
    except Exception as exc:
        raise ExportError(
            f"no tokenizer available for checkpoint {checkpoint!r}: {exc}"
        ) from exc
    return np.asarray(tokenizer.encode(text), dtype=np.int32)


def tokenize_corpus(spec: ExportSpec) -> bytes:
    """Encode the corpus file into a `.tok` stream matching the checkpoint."""
    if spec.corpus is None:
        raise ExportError("no corpus path given")
    config = _load_config(spec.checkpoint)
    raw = open(spec.corpus, "rb").read()
    try:
        text = raw.decode("utf-8")
    except UnicodeDecodeError as exc:
        raise ExportError(
            f"corpus is not valid UTF-8 at byte offset {exc.start}: {exc.reason}"
        ) from exc
    ids = _encode_corpus(text, spec.checkpoint, config.vocab_size)
    if spec.max_tokens is not None:
        ids = ids[: spec.max_tokens]
    data = tok_format.serialize(ids, config.vocab_size)
    if spec.out_tokens:
        _atomic_write(spec.out_tokens, data)
    return data
