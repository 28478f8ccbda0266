"""Acceptance suite.

Each test enforces one release criterion at its stated tolerance and prints a
single ``A<n>: PASS``/``FAIL`` line (run with ``pytest -s`` to see them).
"""

from __future__ import annotations

import time
from contextlib import contextmanager
from pathlib import Path

import numpy as np
import pytest

from bsc.calibration import calibrate_model, whitening_factor
from bsc.container import Container, read_container_file
from bsc.decomposition import (
    CompressionRatioSpec,
    rank_for_budget,
    stored_params,
)
from bsc.linalg import frobenius_norm, singular_values, svd_tail_norm, truncated_svd
from bsc.pipeline import account_params, compress_model
from bsc.planner import (
    DEFAULT_POLICIES,
    POLICY_PER_LAYER,
    POLICY_SHARE,
    PairwiseLossMatrix,
    build_plan,
    pairwise_loss_matrix,
    type_shareability,
)
from bsc.runtime import EvalConfig, TinyGptModel, bench, perplexity
from bsc.synthetic import gen_synthetic_grams, gen_synthetic_model, gen_tokens
from bsc.tokens import read_tokens_file
from conftest import rel_err

FIXTURES = Path(__file__).parent / "fixtures"


@contextmanager
def criterion(name: str):
    start = time.perf_counter()
    try:
        yield
    except BaseException:
        print(f"{name}: FAIL")
        raise
    print(f"{name}: PASS ({time.perf_counter() - start:.2f}s)")


def test_a1_eckart_young_oracle():
    with criterion("A1 truncated-SVD optimality vs random competitors"):
        start = time.perf_counter()
        rng = np.random.default_rng(100)
        for _ in range(200):
            m = int(rng.integers(2, 9))
            n = int(rng.integers(2, 13))
            a = rng.standard_normal((m, n))
            k = int(rng.integers(1, min(m, n) + 1))
            res = truncated_svd(a, k)
            ours = frobenius_norm(a - res.reconstruct())
            expected = svd_tail_norm(singular_values(a), k)
            if expected > 0:
                assert rel_err(ours, expected) < 1e-9
            else:
                assert ours < 1e-12
            for _ in range(100):
                alt = rng.standard_normal((m, k)) @ rng.standard_normal((k, n))
                assert ours <= frobenius_norm(a - alt)
        assert time.perf_counter() - start < 10.0


def test_a2_whitening_identity(toy_model, toy_tokens):
    with criterion("A2 whitening loss identity on recorded activations"):
        start = time.perf_counter()
        sites = {"layers.0.K", "layers.2.Up", "layers.1.Down"}
        rec = calibrate_model(toy_model, toy_tokens, samples=4, seq_len=128,
                              sites=sites, keep_activations=True)
        rng = np.random.default_rng(101)
        checks = 0
        while checks < 50:
            for site in sorted(sites):
                stats = rec.grams[site]
                white = whitening_factor(stats)
                assert white.jitter_used == 0.0
                x = np.vstack(rec.activations[site])
                delta = rng.standard_normal((stats.width, 16))
                lhs = frobenius_norm(x @ delta)
                rhs = frobenius_norm(white.s @ delta)
                assert rel_err(lhs, rhs) < 1e-8
                checks += 1
                if checks == 50:
                    break
        assert time.perf_counter() - start < 5.0


def test_a3_budget_formula():
    with criterion("A3 rank budget formula"):
        assert rank_for_budget(8, 8, 2, CompressionRatioSpec(0.5)) == 2
        assert rank_for_budget(4096, 4096, 1, CompressionRatioSpec(0.2)) == 1638
        rng = np.random.default_rng(102)
        for _ in range(1000):
            d1 = int(rng.integers(1, 600))
            d2 = int(rng.integers(1, 600))
            n = int(rng.integers(1, 9))
            x = float(rng.uniform(0.01, 1.0))
            spec = CompressionRatioSpec(1.0 - x)
            k = rank_for_budget(d1, d2, n, spec)
            budget = d1 * d2 * n * x
            slack = d1 + d2 * n
            assert stored_params(d1, d2, n, k) < budget + slack
            if int(np.floor(budget / slack)) >= 1:
                assert stored_params(d1, d2, n, k) <= budget


def _pair_container(w0: np.ndarray, w1: np.ndarray):
    from bsc.calibration import GramStats

    d = w0.shape[0]
    c = gen_synthetic_model(layers=2, hidden=d, vocab=32, seed=1, heads=1)
    c.tensors["layers.0.K"] = w0.astype(np.float64)
    c.tensors["layers.1.K"] = w1.astype(np.float64)
    grams = {
        f"layers.{i}.K": GramStats(site=f"layers.{i}.K", gram=np.eye(d), token_count=d)
        for i in range(2)
    }
    return c, grams


def test_a4_sharing_decision_oracle():
    with criterion("A4 sharing-decision oracles and reference-loss classification"):
        rng = np.random.default_rng(103)
        for trial in range(10):
            w = rng.standard_normal((8, 8))
            c, grams = _pair_container(w, w.copy())
            heat = pairwise_loss_matrix(c, grams, "K", CompressionRatioSpec(0.2))
            assert heat.losses[0, 1] <= heat.losses[0, 0] + heat.losses[1, 1]
        for trial in range(10):
            w0 = np.zeros((8, 8))
            w1 = np.zeros((8, 8))
            w0[:4, :] = rng.standard_normal((4, 8))
            w1[4:, :] = rng.standard_normal((4, 8))
            c, grams = _pair_container(w0, w1)
            heat = pairwise_loss_matrix(c, grams, "K", CompressionRatioSpec(0.5))
            assert heat.losses[0, 1] > max(heat.losses[0, 0], heat.losses[1, 1])
        heatmaps = {
            "K": PairwiseLossMatrix("K", np.array([[33508.2, 61817.3],
                                                   [61817.3, 33174.7]])),
            "O": PairwiseLossMatrix("O", np.array([[4355.1, 10618.3],
                                                   [10618.3, 4895.7]])),
        }
        policies = type_shareability(heatmaps)
        assert policies["K"] == POLICY_SHARE
        assert policies["O"] == POLICY_PER_LAYER


def test_a5_dense_factorized_equivalence(toy_container, toy_grams, toy_tokens):
    with criterion("A5 dense/factorized logit and perplexity equivalence"):
        start = time.perf_counter()
        mf = toy_container.model_manifest()
        ids = toy_tokens[:256].reshape(2, 128)
        for r in (0.2, 0.4):
            for g in (1, 2, 4):
                plan = build_plan(mf, DEFAULT_POLICIES, g, CompressionRatioSpec(r))
                out, _ = compress_model(
                    toy_container, plan, grams=toy_grams,
                    calib_tokens=toy_tokens, calib_samples=8, calib_seq_len=128,
                )
                fact = TinyGptModel.from_container(out)
                dense = Container(manifest=dict(toy_container.manifest))
                for name in toy_container.order:
                    dense.add(name, toy_container.tensors[name])
                for site in fact.sites():
                    if site.factorized:
                        dense.tensors[site.name] = site.dense_equivalent()
                ref = TinyGptModel.from_container(dense)
                diff = np.abs(fact.forward_logits(ids) - ref.forward_logits(ids)).max()
                assert diff < 1e-6, f"r={r} g={g}: logit diff {diff}"

        plan0 = build_plan(mf, DEFAULT_POLICIES, 1, CompressionRatioSpec(0.0))
        out0, _ = compress_model(toy_container, plan0, grams=toy_grams)
        config = EvalConfig(seq_len=128)
        dense_ppl = perplexity(TinyGptModel.from_container(toy_container),
                               toy_tokens[:4096], config)
        round_ppl = perplexity(TinyGptModel.from_container(out0),
                               toy_tokens[:4096], config)
        assert rel_err(dense_ppl, round_ppl) < 1e-6
        assert time.perf_counter() - start < 120.0


def test_a6_baseline_parity(toy_container, toy_grams):
    with criterion("A6 singleton-group output equals per-layer baseline byte for byte"):
        mf = toy_container.model_manifest()
        spec = CompressionRatioSpec(0.2)
        shared = build_plan(mf, DEFAULT_POLICIES, 1, spec)
        baseline = build_plan(mf, {t: POLICY_PER_LAYER for t in mf.types}, 1, spec)
        a, _ = compress_model(toy_container, shared, grams=toy_grams)
        b, _ = compress_model(toy_container, baseline, grams=toy_grams)
        assert a.order == b.order
        for name in a.order:
            assert a.tensors[name].tobytes() == b.tensors[name].tobytes(), name


def test_a7_flops_and_throughput():
    with criterion("A7 factorized FLOPs and wall-clock throughput at half ratio"):
        container = gen_synthetic_model(layers=4, hidden=256, vocab=512, seed=21,
                                        context=64)
        mf = container.model_manifest()
        grams = gen_synthetic_grams(mf, seed=22)
        plan = build_plan(mf, DEFAULT_POLICIES, 2, CompressionRatioSpec(0.5),
                          sequential_update=False)
        out, _ = compress_model(container, plan, grams=grams)
        dense_model = TinyGptModel.from_container(container)
        fact_model = TinyGptModel.from_container(out)

        dense_sites = {s.name: s.flops_per_token() for s in dense_model.sites()}
        fact_sites = {s.name: s.flops_per_token() for s in fact_model.sites()}
        assert set(dense_sites) == set(fact_sites)
        for name in fact_sites:
            assert fact_sites[name] < dense_sites[name], name
        assert sum(fact_sites.values()) < sum(dense_sites.values())

        fact_bench = bench(fact_model, batch=128, seq=32, runs=5, warmup=2, seed=23)
        dense_bench = bench(dense_model, batch=128, seq=32, runs=5, warmup=2, seed=23)
        ratio = fact_bench.tokens_per_sec / dense_bench.tokens_per_sec
        print(f"  throughput_ratio={ratio:.3f} "
              f"(factorized {fact_bench.tokens_per_sec:.0f} tok/s, "
              f"dense {dense_bench.tokens_per_sec:.0f} tok/s; "
              f"external GPU reference measurement at this ratio: 1.57x, non-binding)")
        assert ratio > 1.0


def test_a8_end_to_end_small_checkpoint():
    with criterion("A8 end-to-end small-checkpoint compression"):
        start = time.perf_counter()
        model_path = FIXTURES / "tiny_gpt2.bsc"
        calib_path = FIXTURES / "calib.tok"
        eval_path = FIXTURES / "eval.tok"
        for p in (model_path, calib_path, eval_path):
            assert p.exists(), (
                f"missing fixture {p}; regenerate with tools/make_fixture.sh"
            )
        container = read_container_file(model_path)
        mf = container.model_manifest()
        calib_ids, _ = read_tokens_file(calib_path)
        eval_ids, _ = read_tokens_file(eval_path)
        assert eval_ids.size >= 4096
        eval_ids = eval_ids[:4096]

        dense_model = TinyGptModel.from_container(container)
        config = EvalConfig(seq_len=min(256, mf.context))
        dense_ppl = perplexity(dense_model, eval_ids, config)

        policies = dict(DEFAULT_POLICIES)
        for t in mf.types:
            if t not in ("K", "Q", "V", "Up"):
                policies[t] = DEFAULT_POLICIES.get(t, POLICY_PER_LAYER)
                if policies[t] == POLICY_SHARE:
                    policies[t] = POLICY_PER_LAYER
        plan = build_plan(mf, policies, 2, CompressionRatioSpec(0.2))
        rec = calibrate_model(dense_model, calib_ids, samples=64,
                              seq_len=min(256, mf.context))
        out, report = compress_model(container, plan, grams=rec.grams)

        compressed_ppl = perplexity(TinyGptModel.from_container(out), eval_ids, config)
        counts = account_params(out)
        print(f"  dense_ppl={dense_ppl:.4f} compressed_ppl={compressed_ppl:.4f} "
              f"scope_removed={counts.scope_removed:.4f}")
        assert np.isfinite(compressed_ppl)
        assert compressed_ppl <= 2.0 * dense_ppl
        assert abs(counts.scope_removed - 0.2) <= 0.005
        assert time.perf_counter() - start < 1200.0
