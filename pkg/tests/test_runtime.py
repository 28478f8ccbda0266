from __future__ import annotations

import numpy as np
import pytest
from bsc.calibration import calibrate_model
from bsc.container import Container, ModelManifest
from bsc.decomposition import CompressionRatioSpec
from bsc.pipeline import compress_model
from bsc.planner import DEFAULT_POLICIES, build_plan
from bsc.runtime import (
    EvalConfig,
    LinearSite,
    RuntimeModelError,
    TinyGptModel,
    bench,
    flop_report,
    perplexity,
)
from bsc.synthetic import gen_tokens
from conftest import rel_err


def manual_model(
    vocab: int,
    hidden: int,
    layers: int = 1,
    heads: int = 4,
    context: int = 64,
    mlp: int | None = None,
) -> Container:
    """All-zero weights with unit LayerNorm gains; tests overwrite what they need."""
    mlp = mlp if mlp is not None else 4 * hidden
    mf = ModelManifest(
        architecture="gpt2-like", layer_count=layers, hidden=hidden, mlp=mlp,
        heads=heads, vocab=vocab, context=context, types=("K", "Q", "V", "O", "Up", "Down"),
    )
    c = Container(manifest=mf.to_dict())
    c.add("embed.token", np.zeros((vocab, hidden), dtype=np.float64))
    c.add("embed.pos", np.zeros((context, hidden), dtype=np.float64))
    for i in range(layers):
        c.add(f"layers.{i}.ln1.weight", np.ones(hidden))
        c.add(f"layers.{i}.ln1.bias", np.zeros(hidden))
        for t in ("K", "Q", "V", "O"):
            c.add(f"layers.{i}.{t}", np.zeros((hidden, hidden)))
        c.add(f"layers.{i}.ln2.weight", np.ones(hidden))
        c.add(f"layers.{i}.ln2.bias", np.zeros(hidden))
        c.add(f"layers.{i}.Up", np.zeros((hidden, mlp)))
        c.add(f"layers.{i}.Down", np.zeros((mlp, hidden)))
    c.add("norm.final.weight", np.ones(hidden))
    c.add("norm.final.bias", np.zeros(hidden))
    c.add("head.weight", np.zeros((hidden, vocab)))
    return c


def test_zero_model_head_bias_passthrough():
    c = manual_model(vocab=12, hidden=16)
    bias = np.linspace(-1.0, 1.0, 12)
    c.add("head.bias", bias)
    model = TinyGptModel.from_container(c)
    logits = model.forward_logits(np.zeros((2, 5), dtype=np.int64))
    assert np.array_equal(logits, np.broadcast_to(bias, logits.shape))


def test_uniform_logits_ppl_equals_vocab():
    c = manual_model(vocab=50, hidden=16)
    model = TinyGptModel.from_container(c)
    ids = gen_tokens(400, 50, seed=0)
    ppl = perplexity(model, ids, EvalConfig(seq_len=40))
    assert abs(ppl - 50.0) < 1e-6 * 50.0


def test_lookup_model_ppl_is_one():
    vocab, hidden = 50, 64
    c = manual_model(vocab=vocab, hidden=hidden, context=64)
    wte = np.zeros((vocab, hidden))
    wte[np.arange(vocab), np.arange(vocab)] = 1.0
    c.tensors["embed.token"] = wte
    # Solve head weights so position with token i emits logits beta*onehot(next(i)).
    eps = 1e-5
    z = (wte - wte.mean(axis=1, keepdims=True)) / np.sqrt(wte.var(axis=1, keepdims=True) + eps)
    nxt = (np.arange(vocab) + 7) % vocab
    beta = 60.0
    targets = beta * np.eye(vocab)[nxt]
    c.tensors["head.weight"] = np.linalg.lstsq(z, targets, rcond=None)[0]
    model = TinyGptModel.from_container(c)
    ids = np.zeros(200, dtype=np.int64)
    for j in range(1, 200):
        ids[j] = nxt[ids[j - 1]]
    ppl = perplexity(model, ids, EvalConfig(seq_len=50))
    assert abs(ppl - 1.0) < 1e-6


def test_causality_is_exact(toy_model):
    rng = np.random.default_rng(41)
    a = rng.integers(0, 128, size=(1, 32), dtype=np.int64)
    b = a.copy()
    b[0, 20] = (b[0, 20] + 1) % 128
    la = toy_model.forward_logits(a)
    lb = toy_model.forward_logits(b)
    assert np.array_equal(la[0, :20], lb[0, :20])
    assert not np.array_equal(la[0, 20:], lb[0, 20:])


def test_token_and_shape_validation(toy_model):
    with pytest.raises(ValueError, match="out of range"):
        toy_model.forward_logits(np.array([[0, 128]]))
    with pytest.raises(ValueError, match="exceeds context"):
        toy_model.forward_logits(np.zeros((1, 4096), dtype=np.int64))
    with pytest.raises(ValueError):
        toy_model.forward_logits(np.zeros((1, 2, 3), dtype=np.int64))


def test_eval_config_validation():
    with pytest.raises(ValueError):
        EvalConfig(seq_len=1)
    with pytest.raises(ValueError):
        EvalConfig(seq_len=8, stride=9)
    with pytest.raises(ValueError):
        EvalConfig(seq_len=8, batch_size=0)
    assert EvalConfig(seq_len=8).effective_stride == 8


def test_perplexity_empty_stream(toy_model):
    with pytest.raises(ValueError, match="shorter than one"):
        perplexity(toy_model, np.arange(8), EvalConfig(seq_len=64))


def test_factorized_sites_match_dense_reconstruction(toy_container, toy_grams):
    plan = build_plan(
        toy_container.model_manifest(), DEFAULT_POLICIES, 2, CompressionRatioSpec(0.2)
    )
    compressed, _ = compress_model(toy_container, plan, grams=toy_grams)
    fact_model = TinyGptModel.from_container(compressed)
    assert any(s.factorized for s in fact_model.sites())

    dense = Container(manifest=dict(toy_container.manifest))
    for name in toy_container.order:
        dense.add(name, toy_container.tensors[name])
    for site in fact_model.sites():
        if site.factorized:
            dense.tensors[site.name] = site.dense_equivalent()
    dense_model = TinyGptModel.from_container(dense)

    ids = gen_tokens(256, 128, seed=5).reshape(2, 128)
    diff = np.abs(fact_model.forward_logits(ids) - dense_model.forward_logits(ids)).max()
    assert diff < 1e-6


def test_perplexity_matches_independent_nll_script(toy_container, toy_tokens):
    from nll_oracle import reference_ppl

    model = TinyGptModel.from_container(toy_container)
    ours = perplexity(model, toy_tokens[:2048], EvalConfig(seq_len=64))
    reference = reference_ppl(toy_container, toy_tokens[:2048], seq_len=64)
    assert rel_err(ours, reference) < 0.005


def test_site_flops_dense_vs_factorized():
    dense = LinearSite(name="s", weight=np.zeros((8, 8)))
    assert dense.flops_per_token() == 2 * 8 * 8
    low = LinearSite(name="s", basis=np.zeros((8, 2)), coeff=np.zeros((2, 8)))
    assert low.flops_per_token() == 2 * (8 * 2 + 2 * 8)
    assert low.flops_per_token() < dense.flops_per_token()  # k=2 < 8*8/(8+8)=4
    identity_point = LinearSite(name="s", basis=np.zeros((8, 4)), coeff=np.zeros((4, 8)))
    assert identity_point.flops_per_token() == dense.flops_per_token()


def test_flop_report_composition(toy_model):
    report = flop_report(toy_model, batch=2, seq=16)
    mf = toy_model.manifest
    per_layer = 4 * (2 * 64 * 64) + 2 * (2 * 64 * 256)
    assert sum(report.per_site_per_token.values()) == mf.layer_count * per_layer
    assert report.head_per_token == 2 * 64 * 128
    assert report.attention_total == mf.layer_count * 2 * 2 * 64 * 16 * 17
    assert report.total == report.linear_per_token * 32 + report.attention_total


def test_bench_runs_and_validates(toy_model):
    result = bench(toy_model, batch=4, seq=16, runs=3, warmup=1)
    assert result.tokens_per_sec > 0
    assert len(result.run_seconds) == 3
    assert result.flops.tokens == 64
    with pytest.raises(ValueError):
        bench(toy_model, batch=4, seq=16, runs=2)


def test_runtime_rejects_generic_architecture():
    from bsc.synthetic import gen_synthetic_model

    c = gen_synthetic_model(layers=1, hidden=16, vocab=32, seed=0, arch="generic")
    with pytest.raises(RuntimeModelError, match="not executable"):
        TinyGptModel.from_container(c)


def test_linear_site_validation():
    with pytest.raises(RuntimeModelError):
        LinearSite(name="s")  # neither dense nor factorized
    with pytest.raises(RuntimeModelError):
        LinearSite(name="s", weight=np.zeros((4, 4)), basis=np.zeros((4, 2)),
                   coeff=np.zeros((2, 4)))
    with pytest.raises(RuntimeModelError):
        LinearSite(name="s", basis=np.zeros((4, 2)), coeff=np.zeros((3, 4)))


def test_calibration_taps_cover_all_sites(toy_model, toy_tokens):
    rec = calibrate_model(toy_model, toy_tokens, samples=2, seq_len=32)
    mf = toy_model.manifest
    expected = {
        mf.site_name(layer, t) for layer in range(mf.layer_count) for t in mf.types
    }
    assert set(rec.grams) == expected
    assert all(g.token_count == 64 for g in rec.grams.values())
    # K/Q/V read the same normalized input, so their grams agree exactly.
    assert np.array_equal(rec.grams["layers.0.K"].gram, rec.grams["layers.0.Q"].gram)


def test_perplexity_batch_size_invariance(toy_model, toy_tokens):
    ids = toy_tokens[:1024]
    values = {
        bs: perplexity(toy_model, ids, EvalConfig(seq_len=64, batch_size=bs))
        for bs in (1, 3, 8)
    }
    assert values[1] == values[3] == values[8]


def test_perplexity_stride_variants(toy_model, toy_tokens):
    ids = toy_tokens[:1024]
    non_overlap = perplexity(toy_model, ids, EvalConfig(seq_len=64))
    sliding = perplexity(toy_model, ids, EvalConfig(seq_len=64, stride=32))
    assert np.isfinite(sliding) and np.isfinite(non_overlap)
    # More context per predicted position can only help this much at toy scale.
    assert abs(np.log(sliding) - np.log(non_overlap)) < 1.0
