"""Minimal decoder-only transformer runtime.

GPT-2-style execution: learned positional embeddings, pre-LayerNorm, softmax
attention with a causal mask, tanh-approximated GELU MLP.  Linear sites are
either dense or factorized; a factorized site computes ``(x @ basis) @ coeff``
and never materializes the product ``basis @ coeff``.  The forward pass runs
in float64 with float64 log-probability accumulation.
"""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .container import Container, ContainerError, ModelManifest

Tap = Callable[[str, np.ndarray], None]


class RuntimeModelError(Exception):
    """Model cannot be executed by this runtime."""


@dataclass
class LinearSite:
    """One projection: dense weight or shared-basis factorization, plus bias."""

    name: str
    weight: np.ndarray | None = None
    basis: np.ndarray | None = None
    coeff: np.ndarray | None = None
    bias: np.ndarray | None = None

    def __post_init__(self):
        dense = self.weight is not None
        fact = self.basis is not None and self.coeff is not None
        if dense == fact:
            raise RuntimeModelError(f"{self.name}: site must be dense xor factorized")
        if fact and self.basis.shape[1] != self.coeff.shape[0]:
            raise RuntimeModelError(f"{self.name}: basis/coeff rank mismatch")

    @property
    def factorized(self) -> bool:
        return self.weight is None

    @property
    def d_in(self) -> int:
        return int(self.basis.shape[0] if self.factorized else self.weight.shape[0])

    @property
    def d_out(self) -> int:
        return int(self.coeff.shape[1] if self.factorized else self.weight.shape[1])

    @property
    def rank(self) -> int | None:
        return int(self.basis.shape[1]) if self.factorized else None

    def apply(self, x: np.ndarray) -> np.ndarray:
        if self.factorized:
            y = (x @ self.basis) @ self.coeff
        else:
            y = x @ self.weight
        if self.bias is not None:
            y = y + self.bias
        return y

    def flops_per_token(self) -> int:
        """Multiply-add count (2 FLOPs each) from shape arithmetic alone."""
        if self.factorized:
            k = self.rank
            return 2 * (self.d_in * k + k * self.d_out)
        return 2 * self.d_in * self.d_out

    def dense_equivalent(self) -> np.ndarray:
        """Materialized weight matrix (for equivalence checks, not inference)."""
        return self.weight if not self.factorized else self.basis @ self.coeff


def _layer_norm(x: np.ndarray, gain: np.ndarray, bias: np.ndarray, eps: float) -> np.ndarray:
    mean = x.mean(axis=-1, keepdims=True)
    var = x.var(axis=-1, keepdims=True)
    return (x - mean) / np.sqrt(var + eps) * gain + bias


def _gelu_tanh(x: np.ndarray) -> np.ndarray:
    # GPT-2 family activation: 0.5*x*(1+tanh(sqrt(2/pi)*(x+0.044715*x^3)))
    return 0.5 * x * (1.0 + np.tanh(0.7978845608028654 * (x + 0.044715 * x * x * x)))


@dataclass
class _Block:
    ln1_g: np.ndarray
    ln1_b: np.ndarray
    q: LinearSite
    k: LinearSite
    v: LinearSite
    o: LinearSite
    ln2_g: np.ndarray
    ln2_b: np.ndarray
    up: LinearSite
    down: LinearSite


class TinyGptModel:
    """Executable model backed by a container (dense or compressed)."""

    def __init__(self, manifest: ModelManifest, wte, wpe, blocks, lnf_g, lnf_b, head: LinearSite):
        self.manifest = manifest
        self.wte = wte
        self.wpe = wpe
        self.blocks: list[_Block] = blocks
        self.lnf_g = lnf_g
        self.lnf_b = lnf_b
        self.head = head

    @classmethod
    def from_container(cls, container: Container) -> "TinyGptModel":
        mf = container.model_manifest()
        if mf.architecture != "gpt2-like":
            raise RuntimeModelError(
                f"architecture {mf.architecture!r} is not executable by this runtime"
            )
        compression = (container.manifest or {}).get("compression")
        site_plans: dict[str, tuple[str, int]] = {}
        bases: dict[str, np.ndarray] = {}
        if compression:
            for t, tplan in compression["types"].items():
                if tplan["policy"] == "exclude":
                    continue
                for group in tplan["groups"]:
                    basis_name = f"group.{group['id']}.{t}.basis"
                    bases[basis_name] = container.tensor_f64(basis_name)
                    for layer in group["layers"]:
                        site_plans[mf.site_name(layer, t)] = (basis_name, int(group["k"]))

        def fetch(name: str) -> np.ndarray:
            if name not in container.tensors:
                raise ContainerError("missing-tensor", f"{name!r} required by runtime")
            return container.tensor_f64(name)

        def opt(name: str) -> np.ndarray | None:
            return container.tensor_f64(name) if name in container.tensors else None

        def site(layer: int, t: str) -> LinearSite:
            name = mf.site_name(layer, t)
            bias = opt(f"{name}.bias")
            if name in site_plans:
                basis_name, _ = site_plans[name]
                # Bases are shared by reference across the sites of one group.
                return LinearSite(
                    name=name,
                    basis=bases[basis_name],
                    coeff=fetch(f"{name}.coeff"),
                    bias=bias,
                )
            return LinearSite(name=name, weight=fetch(name), bias=bias)

        blocks = []
        for i in range(mf.layer_count):
            blocks.append(
                _Block(
                    ln1_g=fetch(f"layers.{i}.ln1.weight"),
                    ln1_b=fetch(f"layers.{i}.ln1.bias"),
                    q=site(i, "Q"),
                    k=site(i, "K"),
                    v=site(i, "V"),
                    o=site(i, "O"),
                    ln2_g=fetch(f"layers.{i}.ln2.weight"),
                    ln2_b=fetch(f"layers.{i}.ln2.bias"),
                    up=site(i, "Up"),
                    down=site(i, "Down"),
                )
            )
        head = LinearSite(name="head", weight=fetch("head.weight"), bias=opt("head.bias"))
        return cls(
            manifest=mf,
            wte=fetch("embed.token"),
            wpe=fetch("embed.pos"),
            blocks=blocks,
            lnf_g=fetch("norm.final.weight"),
            lnf_b=fetch("norm.final.bias"),
            head=head,
        )

    def sites(self) -> list[LinearSite]:
        out = []
        for b in self.blocks:
            out.extend([b.k, b.q, b.v, b.o, b.up, b.down])
        return out

    def forward_logits(self, tokens, tap: Tap | None = None) -> np.ndarray:
        """Causal logits of shape (batch, seq, vocab).

        ``tap(site_name, x)`` receives the 2-D float64 input of every matrix
        site, flattened over batch and sequence, in execution order.
        """
        ids = np.asarray(tokens)
        if ids.ndim == 1:
            ids = ids[None, :]
        if ids.ndim != 2:
            raise ValueError(f"token batch must be 1-D or 2-D, got shape {ids.shape}")
        mf = self.manifest
        bsz, seq = ids.shape
        if seq > mf.context:
            raise ValueError(f"sequence length {seq} exceeds context {mf.context}")
        if seq < 1:
            raise ValueError("empty token batch")
        if ids.min() < 0 or ids.max() >= mf.vocab:
            raise ValueError(f"token id out of range [0, {mf.vocab})")

        eps = mf.ln_eps
        n_head = mf.heads
        head_dim = mf.hidden // n_head
        x = self.wte[ids] + self.wpe[:seq]
        causal = np.triu(np.full((seq, seq), -np.inf), k=1)

        for i, blk in enumerate(self.blocks):
            h = _layer_norm(x, blk.ln1_g, blk.ln1_b, eps)
            flat = h.reshape(-1, mf.hidden)
            if tap is not None:
                tap(f"layers.{i}.K", flat)
                tap(f"layers.{i}.Q", flat)
                tap(f"layers.{i}.V", flat)
            q = blk.q.apply(h).reshape(bsz, seq, n_head, head_dim).transpose(0, 2, 1, 3)
            k = blk.k.apply(h).reshape(bsz, seq, n_head, head_dim).transpose(0, 2, 1, 3)
            v = blk.v.apply(h).reshape(bsz, seq, n_head, head_dim).transpose(0, 2, 1, 3)
            scores = q @ k.transpose(0, 1, 3, 2) / np.sqrt(head_dim)
            scores = scores + causal
            scores -= scores.max(axis=-1, keepdims=True)
            probs = np.exp(scores)
            probs /= probs.sum(axis=-1, keepdims=True)
            ctx = (probs @ v).transpose(0, 2, 1, 3).reshape(bsz, seq, mf.hidden)
            if tap is not None:
                tap(f"layers.{i}.O", ctx.reshape(-1, mf.hidden))
            x = x + blk.o.apply(ctx)

            h2 = _layer_norm(x, blk.ln2_g, blk.ln2_b, eps)
            if tap is not None:
                tap(f"layers.{i}.Up", h2.reshape(-1, mf.hidden))
            a = _gelu_tanh(blk.up.apply(h2))
            if tap is not None:
                tap(f"layers.{i}.Down", a.reshape(-1, mf.mlp))
            x = x + blk.down.apply(a)

        x = _layer_norm(x, self.lnf_g, self.lnf_b, eps)
        return self.head.apply(x)


@dataclass(frozen=True)
class EvalConfig:
    """Perplexity evaluation settings; windows are non-overlapping by default."""

    seq_len: int
    stride: int | None = None
    batch_size: int = 8

    def __post_init__(self):
        if self.seq_len < 2:
            raise ValueError("seq_len must be >= 2")
        if self.stride is not None and not (1 <= self.stride <= self.seq_len):
            raise ValueError("stride must lie in [1, seq_len]")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")

    @property
    def effective_stride(self) -> int:
        return self.seq_len if self.stride is None else self.stride


def _log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def perplexity(model: TinyGptModel, token_ids, config: EvalConfig) -> float:
    """exp(mean negative log-likelihood) over all predicted positions."""
    ids = np.asarray(token_ids).ravel()
    seq, stride = config.seq_len, config.effective_stride
    starts = []
    s = 0
    while s + seq <= ids.size:
        starts.append(s)
        if s + seq == ids.size:
            break
        s += stride
    if not starts:
        raise ValueError(f"token stream of {ids.size} tokens is shorter than one "
                         f"{seq}-token window")

    total_nll = 0.0
    total_predicted = 0
    for batch_start in range(0, len(starts), config.batch_size):
        chunk = starts[batch_start: batch_start + config.batch_size]
        windows = np.stack([ids[s: s + seq] for s in chunk])
        logprobs = _log_softmax(model.forward_logits(windows))
        for row, s in enumerate(chunk):
            # Window position p predicts token s+p+1; positions already scored
            # by the previous window are context only.
            p_lo = 0 if s == 0 else max(0, seq - stride - 1)
            targets = windows[row, p_lo + 1:]
            picked = logprobs[row, np.arange(p_lo, seq - 1), targets]
            total_nll -= float(picked.sum())
            total_predicted += targets.size
    if total_predicted == 0:
        raise ValueError("no predicted positions; stream too short")
    return float(np.exp(total_nll / total_predicted))


@dataclass(frozen=True)
class FlopReport:
    """Exact shape-arithmetic FLOP counts for one (batch, seq) forward."""

    per_site_per_token: dict[str, int]
    head_per_token: int
    attention_total: int
    tokens: int

    @property
    def linear_per_token(self) -> int:
        return sum(self.per_site_per_token.values()) + self.head_per_token

    @property
    def total(self) -> int:
        return self.linear_per_token * self.tokens + self.attention_total


def flop_report(model: TinyGptModel, batch: int, seq: int) -> FlopReport:
    per_site = {s.name: s.flops_per_token() for s in model.sites()}
    # Causal attention: position t attends to t+1 keys; QK^T and PV each cost
    # 2*d multiply-adds per attended position.
    attn = len(model.blocks) * batch * 2 * model.manifest.hidden * seq * (seq + 1)
    return FlopReport(
        per_site_per_token=per_site,
        head_per_token=model.head.flops_per_token(),
        attention_total=attn,
        tokens=batch * seq,
    )


@dataclass(frozen=True)
class BenchResult:
    tokens_per_sec: float
    run_seconds: tuple[float, ...]
    flops: FlopReport


def bench(model: TinyGptModel, batch: int, seq: int, runs: int = 5, warmup: int = 2,
          seed: int = 0) -> BenchResult:
    """Median wall-clock throughput over warm runs plus the FLOP accounting."""
    if runs < 3:
        raise ValueError("need at least 3 timed runs")
    rng = np.random.default_rng(seed)
    ids = rng.integers(0, model.manifest.vocab, size=(batch, seq), dtype=np.int64)
    for _ in range(warmup):
        model.forward_logits(ids)
    times = []
    for _ in range(runs):
        t0 = time.perf_counter()
        model.forward_logits(ids)
        times.append(time.perf_counter() - t0)
    median = float(np.median(times))
    return BenchResult(
        tokens_per_sec=batch * seq / median,
        run_seconds=tuple(times),
        flops=flop_report(model, batch, seq),
    )
