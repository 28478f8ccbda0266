"""End-to-end compression: calibrate, factorize groups, emit, account.

The working order honors the sequential-update setting: when active, layer
stages are processed front to back and the Grams of not-yet-compressed sites
are recomputed by forwarding the calibration tokens through the already
compressed prefix (one extra forward sweep per stage boundary).  Biases,
embeddings, norms and the head ride along verbatim.
"""

from __future__ import annotations

import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from .calibration import GramStats, calibrate_model, merge_grams, whitening_factor
from .container import MATRIX_TYPES, Container, ModelManifest
from .decomposition import BasisFactorization, factorize_group
from .planner import POLICY_EXCLUDE, CompressionPlan, consecutive_groups, plan_text
from .runtime import TinyGptModel


class PipelineError(Exception):
    """Pipeline could not run with the given inputs."""


@dataclass(frozen=True)
class ParamCounts:
    """Element counts by tensor role plus original/stored totals.

    ``scope`` covers the matrix sites subject to compression; the whole-model
    view adds embeddings, norms, biases and the head.  Gram records never
    count as parameters.
    """

    by_role: dict[str, int]
    scope_original: int
    scope_stored: int
    whole_original: int
    whole_stored: int

    @property
    def scope_retained(self) -> float:
        return self.scope_stored / self.scope_original if self.scope_original else 1.0

    @property
    def scope_removed(self) -> float:
        return 1.0 - self.scope_retained

    @property
    def whole_retained(self) -> float:
        return self.whole_stored / self.whole_original if self.whole_original else 1.0

    @property
    def whole_removed(self) -> float:
        return 1.0 - self.whole_retained


def _role_of(name: str) -> str:
    parts = name.split(".")
    if name.startswith("embed."):
        return "embed"
    if name.startswith("head."):
        return "head"
    if name.startswith("site.") and name.endswith(".gram"):
        return "gram"
    if name.startswith("norm.") or (parts[0] == "layers" and parts[2].startswith("ln")):
        return "norm"
    if name.endswith(".bias"):
        return "bias"
    if parts[0] == "group" and name.endswith(".basis"):
        return "basis"
    if parts[0] == "layers" and name.endswith(".coeff"):
        return "coeff"
    if parts[0] == "layers" and len(parts) == 3 and parts[2] in MATRIX_TYPES:
        return "matrix"
    return "other"


def account_params(container: Container) -> ParamCounts:
    """Exact element counts by role plus compressed-scope and whole-model ratios."""
    mf = container.model_manifest()
    by_role: dict[str, int] = {}
    for name in container.order:
        role = _role_of(name)
        by_role[role] = by_role.get(role, 0) + int(container.tensors[name].size)

    compression = (container.manifest or {}).get("compression")
    scope_types = []
    if compression:
        scope_types = [
            t for t, tp in compression["types"].items() if tp["policy"] != POLICY_EXCLUDE
        ]
    else:
        scope_types = list(mf.types)

    scope_original = 0
    scope_stored = 0
    for t in scope_types:
        d1, d2 = mf.site_shape(t)
        scope_original += mf.layer_count * d1 * d2
        if compression:
            for g in compression["types"][t]["groups"]:
                scope_stored += d1 * g["k"] + g["k"] * d2 * len(g["layers"])
        else:
            scope_stored += mf.layer_count * d1 * d2

    whole_stored = sum(v for role, v in by_role.items() if role != "gram")
    whole_original = whole_stored - by_role.get("basis", 0) - by_role.get("coeff", 0)
    # Dense equivalents of the factorized sites.
    if compression:
        for t, tp in compression["types"].items():
            if tp["policy"] == POLICY_EXCLUDE:
                continue
            d1, d2 = mf.site_shape(t)
            whole_original += mf.layer_count * d1 * d2
    return ParamCounts(
        by_role=by_role,
        scope_original=scope_original,
        scope_stored=scope_stored,
        whole_original=whole_original,
        whole_stored=whole_stored,
    )


@dataclass(frozen=True)
class GroupReport:
    type_tag: str
    group_id: int
    layers: tuple[int, ...]
    k: int
    whitened_loss: float
    jitter_used: float
    rank_clamped: bool

    def to_dict(self) -> dict:
        return {
            "type": self.type_tag,
            "group": self.group_id,
            "layers": list(self.layers),
            "k": self.k,
            "whitened_loss": self.whitened_loss,
            "jitter_used": self.jitter_used,
            "rank_clamped": self.rank_clamped,
        }


@dataclass
class CompressionReport:
    target_removed: float
    group_size: int
    sequential_update: bool
    groups: list[GroupReport] = field(default_factory=list)
    params: ParamCounts | None = None
    stage_seconds: dict[str, float] = field(default_factory=dict)

    @property
    def per_type_loss(self) -> dict[str, float]:
        out: dict[str, float] = {}
        for g in self.groups:
            out[g.type_tag] = out.get(g.type_tag, 0.0) + g.whitened_loss
        return out

    @property
    def per_type_loss_squared(self) -> dict[str, float]:
        out: dict[str, float] = {}
        for g in self.groups:
            out[g.type_tag] = out.get(g.type_tag, 0.0) + g.whitened_loss**2
        return out

    @property
    def jitter_events(self) -> list[dict]:
        return [g.to_dict() for g in self.groups if g.jitter_used > 0.0]

    @property
    def achieved_removed_scope(self) -> float:
        return self.params.scope_removed if self.params else 0.0

    def to_dict(self, include_timings: bool = True) -> dict:
        d = {
            "target_removed": self.target_removed,
            "group_size": self.group_size,
            "sequential_update": self.sequential_update,
            "groups": [g.to_dict() for g in self.groups],
            "per_type_loss": self.per_type_loss,
            "per_type_loss_squared": self.per_type_loss_squared,
            "jitter_events": self.jitter_events,
            "params": {
                "by_role": self.params.by_role,
                "scope_original": self.params.scope_original,
                "scope_stored": self.params.scope_stored,
                "scope_removed": self.params.scope_removed,
                "whole_original": self.params.whole_original,
                "whole_stored": self.params.whole_stored,
                "whole_removed": self.params.whole_removed,
            }
            if self.params
            else None,
        }
        if include_timings:
            d["stage_seconds"] = dict(self.stage_seconds)
        return d

    def to_text(self) -> str:
        p = self.params
        lines = [
            "compression report",
            f"  target removed fraction: {self.target_removed}",
            f"  group size: {self.group_size}   sequential update: "
            f"{'on' if self.sequential_update else 'off'}",
            f"  scope params: {p.scope_stored} stored / {p.scope_original} original "
            f"(removed {p.scope_removed:.4%})",
            f"  whole-model params: {p.whole_stored} stored / {p.whole_original} original "
            f"(removed {p.whole_removed:.4%})",
        ]
        for t, loss in sorted(self.per_type_loss.items()):
            lines.append(f"  type {t}: total whitened loss {loss:.6g}")
        if self.jitter_events:
            lines.append(f"  jitter events: {len(self.jitter_events)}")
        for name, secs in self.stage_seconds.items():
            lines.append(f"  stage {name}: {secs:.3f}s")
        return "\n".join(lines) + "\n"


def _plan_sites(plan: CompressionPlan, mf: ModelManifest) -> set[str]:
    sites = set()
    for t, tplan in plan.types.items():
        if tplan.policy == POLICY_EXCLUDE:
            continue
        for g in tplan.groups:
            for layer in g.layers:
                sites.add(mf.site_name(layer, t))
    return sites


def _check_plan(plan: CompressionPlan, mf: ModelManifest) -> None:
    for t in plan.types:
        if t not in mf.types:
            raise PipelineError(f"plan covers type {t!r} absent from the manifest")
    plan.validate(mf.layer_count)


def _factorize_one(
    container: Container,
    mf: ModelManifest,
    grams: Mapping[str, GramStats],
    type_tag: str,
    group,
) -> tuple[BasisFactorization, float]:
    weights = [container.tensor_f64(mf.site_name(layer, type_tag)) for layer in group.layers]
    site_grams = []
    for layer in group.layers:
        site = mf.site_name(layer, type_tag)
        if site not in grams:
            raise PipelineError(f"missing gram for site {site!r}")
        site_grams.append(grams[site])
    white = whitening_factor(merge_grams(site_grams))
    fact = factorize_group(
        weights, white, group.k, group_id=group.group_id, type_tag=type_tag
    )
    return fact, white.jitter_used


def _emit(
    container: Container,
    plan: CompressionPlan,
    mf: ModelManifest,
    factorizations: Mapping[tuple[str, int], BasisFactorization],
    report: CompressionReport | None = None,
) -> Container:
    """Build the output container: verbatim passthrough plus basis/coeff tensors."""
    replaced = set()
    compression: dict = {
        "ratio_removed": plan.ratio.removed_fraction,
        "group_size": plan.group_size,
        "sequential_update": plan.sequential_update,
        "types": {},
    }
    for t in mf.types:
        if t not in plan.types:
            continue
        tplan = plan.types[t]
        entry = {"policy": tplan.policy, "groups": []}
        for g in tplan.groups:
            if (t, g.group_id) not in factorizations:
                continue
            entry["groups"].append(
                {"id": g.group_id, "layers": list(g.layers), "k": g.k}
            )
            for layer in g.layers:
                replaced.add(mf.site_name(layer, t))
        compression["types"][t] = entry

    manifest = dict(container.manifest)
    manifest["compression"] = compression
    out = Container(manifest=manifest, extras=dict(container.extras))
    out.extras["plan_text"] = plan_text(plan, mf)
    for name in container.order:
        if name in replaced:
            continue
        out.add(name, container.tensors[name])
    for t in mf.types:
        if t not in plan.types:
            continue
        for g in plan.types[t].groups:
            fact = factorizations.get((t, g.group_id))
            if fact is None:
                continue
            out.add(f"group.{g.group_id}.{t}.basis", fact.basis)
            for member, layer in enumerate(g.layers):
                out.add(f"layers.{layer}.{t}.coeff", fact.coeffs[member])
    if report is not None:
        out.extras["report"] = report.to_dict(include_timings=False)
    return out


def compress_model(
    container: Container,
    plan: CompressionPlan,
    grams: Mapping[str, GramStats] | None = None,
    calib_tokens=None,
    calib_samples: int = 256,
    calib_seq_len: int = 2048,
    calib_batch_size: int = 8,
    threads: int = 1,
) -> tuple[Container, CompressionReport]:
    """Compress a dense model container according to *plan*.

    Grams may be supplied directly or computed here from a calibration token
    stream.  Sequential-update mode always needs the token stream, because
    later-stage Grams are measured through the compressed prefix.
    """
    mf = container.model_manifest()
    if (container.manifest or {}).get("compression"):
        raise PipelineError("input container is already compressed")
    container.validate_manifest()
    _check_plan(plan, mf)
    report = CompressionReport(
        target_removed=plan.ratio.removed_fraction,
        group_size=plan.group_size,
        sequential_update=plan.sequential_update,
    )

    def calibrate(target: Container, sites: set[str] | None) -> dict[str, GramStats]:
        if mf.architecture != "gpt2-like":
            raise PipelineError(
                "calibration forwarding needs a runtime-supported architecture; "
                f"{mf.architecture!r} is not executable (supply precomputed grams "
                "and disable sequential update)"
            )
        model = TinyGptModel.from_container(target)
        rec = calibrate_model(
            model,
            calib_tokens,
            samples=calib_samples,
            seq_len=calib_seq_len,
            sites=sites,
            batch_size=calib_batch_size,
            threads=threads,
        )
        return rec.grams

    t0 = time.perf_counter()
    if grams is None:
        if calib_tokens is None:
            raise PipelineError(
                "no grams supplied and no calibration tokens to compute them from"
            )
        current = calibrate(container, _plan_sites(plan, mf))
        report.stage_seconds["calibrate"] = time.perf_counter() - t0
    else:
        current = dict(grams)

    work: dict[tuple[str, int], BasisFactorization] = {}
    jitters: dict[tuple[str, int], float] = {}

    def run_group(t: str, group) -> None:
        fact, jitter = _factorize_one(container, mf, current, t, group)
        work[(t, group.group_id)] = fact
        jitters[(t, group.group_id)] = jitter

    t0 = time.perf_counter()
    if not plan.sequential_update:
        jobs = [
            (t, g)
            for t in mf.types
            if t in plan.types and plan.types[t].policy != POLICY_EXCLUDE
            for g in plan.types[t].groups
        ]
        if threads > 1:
            with ThreadPoolExecutor(max_workers=threads) as pool:
                list(pool.map(lambda job: run_group(*job), jobs))
        else:
            for job in jobs:
                run_group(*job)
    else:
        if calib_tokens is None:
            raise PipelineError("sequential update needs the calibration token stream")
        stages = consecutive_groups(mf.layer_count, plan.group_size)
        if len(stages) > 1 and mf.architecture != "gpt2-like":
            raise PipelineError(
                "sequential update forwards through the compressed prefix; "
                f"architecture {mf.architecture!r} is not executable"
            )
        recalib_seconds = 0.0
        for stage_idx, stage_layers in enumerate(stages):
            for t in mf.types:
                if t not in plan.types or plan.types[t].policy == POLICY_EXCLUDE:
                    continue
                for g in plan.types[t].groups:
                    if g.layers[0] in stage_layers:
                        run_group(t, g)
            if stage_idx + 1 < len(stages):
                boundary = stages[stage_idx + 1][0]
                remaining = {
                    mf.site_name(layer, t)
                    for t in plan.types
                    if plan.types[t].policy != POLICY_EXCLUDE
                    for layer in range(boundary, mf.layer_count)
                }
                prefix = _emit(container, plan, mf, work)
                r0 = time.perf_counter()
                current.update(calibrate(prefix, remaining))
                recalib_seconds += time.perf_counter() - r0
        report.stage_seconds["sequential_recalibrate"] = recalib_seconds
    report.stage_seconds["factorize"] = time.perf_counter() - t0

    for t in mf.types:
        if t not in plan.types or plan.types[t].policy == POLICY_EXCLUDE:
            continue
        for g in plan.types[t].groups:
            fact = work[(t, g.group_id)]
            report.groups.append(
                GroupReport(
                    type_tag=t,
                    group_id=g.group_id,
                    layers=g.layers,
                    k=g.k,
                    whitened_loss=fact.whitened_loss,
                    jitter_used=jitters[(t, g.group_id)],
                    rank_clamped=g.rank_clamped,
                )
            )

    t0 = time.perf_counter()
    out = _emit(container, plan, mf, work, report=None)
    report.params = account_params(out)
    out.extras["report"] = report.to_dict(include_timings=False)
    report.stage_seconds["emit"] = time.perf_counter() - t0
    return out, report
