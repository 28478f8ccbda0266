"""Calibration statistics and whitening.

Runs the reference forward pass over calibration tokens, accumulates one Gram
matrix (X^T X) per matrix site, merges Grams across the layers of a sharing
group (the Gram of vertically concatenated inputs is the sum of the Grams),
and derives the triangular whitening factor S with ``S^T S = gram`` so that
``||X @ M||_F == ||S @ M||_F`` for every M.
"""

from __future__ import annotations

import re
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import linalg
from .container import Container
from .runtime import TinyGptModel

JITTER_BASE = 1e-6
JITTER_GROWTH = 10.0
JITTER_RETRIES = 3

_GRAM_RECORD = re.compile(r"^site\.(\d+)\.([A-Za-z]+)\.gram$")


class WhiteningError(Exception):
    """Positive definiteness unattainable within the jitter schedule."""


@dataclass
class GramStats:
    """Accumulated X^T X for one site (or one merged sharing group)."""

    site: str
    gram: np.ndarray
    token_count: int = 0

    @classmethod
    def zeros(cls, site: str, width: int) -> "GramStats":
        return cls(site=site, gram=np.zeros((width, width), dtype=np.float64))

    @property
    def width(self) -> int:
        return int(self.gram.shape[0])

    def copy(self) -> "GramStats":
        return GramStats(site=self.site, gram=self.gram.copy(), token_count=self.token_count)

    def validate(self) -> None:
        scale = float(np.abs(self.gram).max()) if self.gram.size else 0.0
        asym = float(np.abs(self.gram - self.gram.T).max())
        if asym > 1e-8 * max(scale, np.finfo(np.float64).tiny):
            raise ValueError(f"{self.site}: gram not symmetric (asymmetry {asym:.3e})")
        if np.diag(self.gram).min(initial=0.0) < -1e-12 * max(scale, 1.0):
            raise ValueError(f"{self.site}: gram has a negative diagonal entry")


@dataclass(frozen=True)
class WhiteningFactor:
    """Upper-triangular S with S^T S == gram (+ jitter*I), so ||XM||_F == ||SM||_F."""

    s: np.ndarray
    jitter_used: float

    @property
    def width(self) -> int:
        return int(self.s.shape[0])


def accumulate_gram(activations, stats: GramStats) -> GramStats:
    """Add X^T X of an activation batch (tokens x width) into *stats* in place."""
    x = linalg.as_matrix(activations, "activations")
    if x.shape[1] != stats.width:
        raise ValueError(
            f"{stats.site}: activation width {x.shape[1]} != gram width {stats.width}"
        )
    g = x.T @ x
    stats.gram += 0.5 * (g + g.T)
    stats.token_count += x.shape[0]
    return stats


def merge_grams(stats_list, site: str | None = None) -> GramStats:
    """Sum Grams across the layers of one type (vertical input concatenation)."""
    stats_list = list(stats_list)
    if not stats_list:
        raise ValueError("merge_grams needs at least one input")
    width = stats_list[0].width
    for s in stats_list:
        if s.width != width:
            raise ValueError(f"gram width mismatch: {s.site} has {s.width}, expected {width}")
    merged = GramStats(
        site=site if site is not None else "+".join(s.site for s in stats_list),
        gram=np.zeros((width, width), dtype=np.float64),
    )
    for s in stats_list:
        merged.gram += s.gram
        merged.token_count += s.token_count
    return merged


def whitening_factor(stats: GramStats) -> WhiteningFactor:
    """Cholesky-derived upper-triangular whitening factor of a Gram matrix.

    The first attempt uses the Gram as-is (jitter 0).  On a pivot failure the
    diagonal jitter escalates from 1e-6 * mean(diag) by x10 for up to three
    retries; rank-deficient calibration Grams are routine, so this is the
    expected recovery path, and the jitter actually used is reported.
    """
    if stats.token_count <= 0:
        raise WhiteningError(f"{stats.site}: no calibration tokens accumulated")
    stats.validate()
    mean_diag = float(np.mean(np.diag(stats.gram)))
    if mean_diag <= 0.0:
        raise WhiteningError(f"{stats.site}: gram diagonal is zero; nothing to whiten")
    jitters = [0.0] + [
        JITTER_BASE * mean_diag * JITTER_GROWTH**i for i in range(JITTER_RETRIES)
    ]
    eye = np.eye(stats.width)
    last: Exception | None = None
    for jitter in jitters:
        try:
            lower = linalg.cholesky_factor(stats.gram + jitter * eye)
        except linalg.NotPositiveDefiniteError as exc:
            last = exc
            continue
        return WhiteningFactor(s=np.ascontiguousarray(lower.T), jitter_used=jitter)
    raise WhiteningError(
        f"{stats.site}: positive definiteness unattainable after {JITTER_RETRIES} "
        f"jitter retries (max jitter {jitters[-1]:.3e})"
    ) from last


@dataclass
class GramRecorder:
    """Tap target that folds runtime activations into per-site Gram statistics."""

    sites: set[str] | None = None
    keep_activations: bool = False
    grams: dict[str, GramStats] = field(default_factory=dict)
    activations: dict[str, list[np.ndarray]] = field(default_factory=dict)

    def tap(self, site: str, x: np.ndarray) -> None:
        if self.sites is not None and site not in self.sites:
            return
        if site not in self.grams:
            self.grams[site] = GramStats.zeros(site, x.shape[1])
        accumulate_gram(x, self.grams[site])
        if self.keep_activations:
            self.activations.setdefault(site, []).append(np.array(x, copy=True))

    def merge_from(self, other: "GramRecorder") -> None:
        for site, stats in other.grams.items():
            if site in self.grams:
                self.grams[site].gram += stats.gram
                self.grams[site].token_count += stats.token_count
            else:
                self.grams[site] = stats
        for site, chunks in other.activations.items():
            self.activations.setdefault(site, []).extend(chunks)


def calibration_windows(token_ids, samples: int, seq_len: int) -> np.ndarray:
    """First *samples* non-overlapping windows of the stream (fewer if short)."""
    ids = np.asarray(token_ids).ravel()
    available = ids.size // seq_len
    count = min(samples, available)
    if count < 1:
        raise ValueError(
            f"stream of {ids.size} tokens holds no {seq_len}-token calibration window"
        )
    return ids[: count * seq_len].reshape(count, seq_len)


def calibrate_model(
    model: TinyGptModel,
    token_ids,
    samples: int,
    seq_len: int,
    sites: set[str] | None = None,
    batch_size: int = 8,
    threads: int = 1,
    keep_activations: bool = False,
) -> GramRecorder:
    """Accumulate per-site Grams by forwarding calibration windows.

    Batches are dealt round-robin to workers holding private partial Grams;
    partials merge in worker order, so results are bitwise reproducible for a
    fixed thread count and agree to ~1e-12 across thread counts.
    """
    windows = calibration_windows(token_ids, samples, seq_len)
    batches = [windows[i: i + batch_size] for i in range(0, windows.shape[0], batch_size)]
    threads = max(1, threads)

    def run_worker(worker_id: int) -> GramRecorder:
        rec = GramRecorder(sites=sites, keep_activations=keep_activations)
        for b in range(worker_id, len(batches), threads):
            model.forward_logits(batches[b], tap=rec.tap)
        return rec

    if threads == 1:
        return run_worker(0)
    with ThreadPoolExecutor(max_workers=threads) as pool:
        partials = list(pool.map(run_worker, range(threads)))
    combined = GramRecorder(sites=sites, keep_activations=keep_activations)
    for rec in partials:
        combined.merge_from(rec)
    return combined


def gram_record_name(site: str) -> str:
    """Map a site id ``layers.{i}.{type}`` to its record name ``site.{i}.{type}.gram``."""
    if not site.startswith("layers."):
        raise ValueError(f"not a layer site id: {site!r}")
    return "site." + site[len("layers."):] + ".gram"


def site_from_gram_record(name: str) -> str:
    m = _GRAM_RECORD.match(name)
    if not m:
        raise ValueError(f"not a gram record name: {name!r}")
    return f"layers.{m.group(1)}.{m.group(2)}"


def write_gram_container(grams: dict[str, GramStats], manifest: dict | None = None) -> Container:
    """Persist Grams as a container with ``site.{i}.{type}.gram`` records."""

    def order_key(site: str) -> tuple[int, str]:
        parts = site.split(".")
        return (int(parts[1]), parts[2])

    container = Container(manifest=manifest)
    counts = {}
    for site in sorted(grams.keys(), key=order_key):
        record = gram_record_name(site)
        container.add(record, np.asarray(grams[site].gram, dtype=np.float64))
        counts[record] = int(grams[site].token_count)
    container.extras["grams"] = {"token_counts": counts}
    return container


def read_gram_container(container: Container) -> dict[str, GramStats]:
    counts = container.extras.get("grams", {}).get("token_counts", {})
    grams: dict[str, GramStats] = {}
    for name in container.order:
        if not _GRAM_RECORD.match(name):
            continue
        site = site_from_gram_record(name)
        grams[site] = GramStats(
            site=site,
            gram=container.tensor_f64(name),
            token_count=int(counts.get(name, 0)),
        )
    if not grams:
        raise ValueError("container holds no gram records")
    return grams
