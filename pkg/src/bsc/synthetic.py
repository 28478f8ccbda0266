"""Deterministic synthetic models, grams and token streams for desk-scale runs."""

from __future__ import annotations

import numpy as np

from .calibration import GramStats, accumulate_gram
from .container import Container, ModelManifest

GPT2_TYPES = ("K", "Q", "V", "O", "Up", "Down")
GENERIC_TYPES = ("K", "Q", "V", "O", "Up", "Gate", "Down")


def gen_synthetic_model(
    layers: int,
    hidden: int,
    vocab: int,
    seed: int,
    mlp: int | None = None,
    heads: int | None = None,
    context: int = 256,
    arch: str = "gpt2-like",
    types: tuple[str, ...] | None = None,
) -> Container:
    """Random small decoder-only model container, reproducible for a fixed seed.

    LayerNorm gains sit near 1 with nonzero offsets so calibration activations
    keep full column rank.
    """
    if mlp is None:
        mlp = 4 * hidden
    if heads is None:
        heads = 4 if hidden % 4 == 0 else 1
    if hidden % heads != 0:
        raise ValueError(f"hidden {hidden} not divisible by heads {heads}")
    if types is None:
        types = GPT2_TYPES if arch == "gpt2-like" else GENERIC_TYPES
    manifest = ModelManifest(
        architecture=arch,
        layer_count=layers,
        hidden=hidden,
        mlp=mlp,
        heads=heads,
        vocab=vocab,
        context=context,
        types=tuple(types),
    )
    rng = np.random.default_rng(seed)

    def w(*shape) -> np.ndarray:
        return (0.02 * rng.standard_normal(shape)).astype(np.float32)

    container = Container(manifest=manifest.to_dict())
    container.add("embed.token", w(vocab, hidden))
    container.add("embed.pos", w(context, hidden))
    for i in range(layers):
        container.add(f"layers.{i}.ln1.weight", (1.0 + 0.02 * rng.standard_normal(hidden)).astype(np.float32))
        container.add(f"layers.{i}.ln1.bias", w(hidden))
        for t in ("K", "Q", "V", "O"):
            d1, d2 = manifest.site_shape(t)
            container.add(f"layers.{i}.{t}", w(d1, d2))
            container.add(f"layers.{i}.{t}.bias", w(d2))
        container.add(f"layers.{i}.ln2.weight", (1.0 + 0.02 * rng.standard_normal(hidden)).astype(np.float32))
        container.add(f"layers.{i}.ln2.bias", w(hidden))
        for t in manifest.types:
            if t in ("K", "Q", "V", "O"):
                continue
            d1, d2 = manifest.site_shape(t)
            container.add(f"layers.{i}.{t}", w(d1, d2))
            container.add(f"layers.{i}.{t}.bias", w(d2))
    container.add("norm.final.weight", (1.0 + 0.02 * rng.standard_normal(hidden)).astype(np.float32))
    container.add("norm.final.bias", w(hidden))
    container.add("head.weight", w(hidden, vocab))
    container.validate_manifest()
    return container


def gen_synthetic_grams(
    manifest: ModelManifest, seed: int, tokens_per_site: int | None = None
) -> dict[str, GramStats]:
    """Seeded random-activation Grams for every inventoried site.

    Covers architectures the runtime cannot execute (e.g. Gate-bearing generic
    manifests); activation count exceeds the width so Grams are PD.
    """
    rng = np.random.default_rng(seed)
    grams: dict[str, GramStats] = {}
    for layer in range(manifest.layer_count):
        for t in manifest.types:
            d1, _ = manifest.site_shape(t)
            rows = tokens_per_site if tokens_per_site is not None else 2 * d1 + 16
            x = rng.standard_normal((rows, d1)) / np.sqrt(d1)
            site = manifest.site_name(layer, t)
            grams[site] = accumulate_gram(x, GramStats.zeros(site, d1))
    return grams


def gen_tokens(count: int, vocab: int, seed: int) -> np.ndarray:
    """Uniform random token ids."""
    rng = np.random.default_rng(seed)
    return rng.integers(0, vocab, size=count, dtype=np.int32)
