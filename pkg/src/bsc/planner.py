"""Sharing policy and layer grouping.

Which matrix types share a basis across layers, and which consecutive layers
form each sharing group.  By default K/Q/V/Up/Gate share and O/Down stay
per-layer; ``analyze`` mode recomputes the pairwise-loss heatmaps and
re-derives the policies from them with a majority rule over adjacent pairs
(a quantitative stand-in for eyeballing the heatmaps, flagged as such in
reports).
"""

from __future__ import annotations

import json
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Mapping

import numpy as np

from .calibration import GramStats, merge_grams, whitening_factor
from .container import Container, ModelManifest
from .decomposition import CompressionRatioSpec, full_rank, rank_for_budget, truncation_loss

POLICY_SHARE = "share"
POLICY_PER_LAYER = "per-layer"
POLICY_EXCLUDE = "exclude"

# Down projects a high dimension back to a low one: concatenating raises the
# rank of the stack, so sharing is ruled out by construction, not measured.
DEFAULT_POLICIES = {
    "K": POLICY_SHARE,
    "Q": POLICY_SHARE,
    "V": POLICY_SHARE,
    "Up": POLICY_SHARE,
    "Gate": POLICY_SHARE,
    "O": POLICY_PER_LAYER,
    "Down": POLICY_PER_LAYER,
}

ADJACENT_MAJORITY_THRESHOLD = 0.5


@dataclass(frozen=True)
class PairwiseLossMatrix:
    """Whitened truncation losses for one matrix type.

    Entry (i, i) is the loss of compressing layer i alone; entry (i, j) is the
    loss when layers i and j share one basis at the same target ratio.
    """

    type_tag: str
    losses: np.ndarray

    def __post_init__(self):
        m = self.losses
        if m.ndim != 2 or m.shape[0] != m.shape[1]:
            raise ValueError(f"loss matrix must be square, got {m.shape}")
        if not np.array_equal(m, m.T):
            raise ValueError("loss matrix must be symmetric")
        if m.size and m.min() < 0:
            raise ValueError("losses must be non-negative")

    @property
    def layer_count(self) -> int:
        return int(self.losses.shape[0])

    def adjacent_share_wins(self) -> list[bool]:
        """Per adjacent pair (i, i+1): does sharing beat the two separate losses?"""
        d = np.diag(self.losses)
        return [
            bool(self.losses[i, i + 1] < d[i] + d[i + 1])
            for i in range(self.layer_count - 1)
        ]

    def to_csv(self) -> str:
        lines = ["layer," + ",".join(str(j) for j in range(self.layer_count))]
        for i in range(self.layer_count):
            lines.append(str(i) + "," + ",".join(repr(float(v)) for v in self.losses[i]))
        return "\n".join(lines) + "\n"

    def to_plot_data(self) -> dict:
        # Squared values ride along so additive comparisons can be replicated
        # under either norm convention.
        return {
            "type": self.type_tag,
            "layers": self.layer_count,
            "loss": [[float(v) for v in row] for row in self.losses],
            "loss_squared": [[float(v * v) for v in row] for row in self.losses],
        }


@dataclass(frozen=True)
class LayerGroup:
    group_id: int
    layers: tuple[int, ...]
    k: int
    rank_clamped: bool = False


@dataclass(frozen=True)
class TypePlan:
    policy: str
    groups: tuple[LayerGroup, ...]


@dataclass(frozen=True)
class CompressionPlan:
    ratio: CompressionRatioSpec
    group_size: int
    sequential_update: bool
    types: dict[str, TypePlan]

    def validate(self, layer_count: int) -> None:
        for t, tplan in self.types.items():
            if tplan.policy == POLICY_EXCLUDE:
                if tplan.groups:
                    raise ValueError(f"{t}: excluded types carry no groups")
                continue
            covered = []
            for g in tplan.groups:
                layers = g.layers
                if list(layers) != sorted(layers):
                    raise ValueError(f"{t}: group {g.group_id} layers not ascending")
                if layers != tuple(range(layers[0], layers[-1] + 1)):
                    raise ValueError(f"{t}: group {g.group_id} layers not consecutive")
                covered.extend(layers)
            if covered != list(range(layer_count)):
                raise ValueError(f"{t}: groups do not partition layers 0..{layer_count - 1}")

    def to_dict(self) -> dict:
        return {
            "ratio_removed": self.ratio.removed_fraction,
            "group_size": self.group_size,
            "sequential_update": self.sequential_update,
            "types": {
                t: {
                    "policy": p.policy,
                    "groups": [
                        {
                            "id": g.group_id,
                            "layers": list(g.layers),
                            "k": g.k,
                            "rank_clamped": g.rank_clamped,
                        }
                        for g in p.groups
                    ],
                }
                for t, p in self.types.items()
            },
        }


def _pair_loss(
    weights_by_layer: list[np.ndarray],
    grams: list[GramStats],
    i: int,
    j: int,
    spec: CompressionRatioSpec,
) -> float:
    d1, d2 = weights_by_layer[i].shape
    if i == j:
        k = rank_for_budget(d1, d2, 1, spec)
        return truncation_loss([weights_by_layer[i]], whitening_factor(grams[i]), k)
    merged = merge_grams([grams[i], grams[j]])
    k = rank_for_budget(d1, d2, 2, spec)
    return truncation_loss(
        [weights_by_layer[i], weights_by_layer[j]], whitening_factor(merged), k
    )


def pairwise_loss_matrix(
    container: Container,
    grams: Mapping[str, GramStats],
    type_tag: str,
    spec: CompressionRatioSpec,
    threads: int = 1,
) -> PairwiseLossMatrix:
    """L x L heatmap of single-layer (diagonal) and two-layer shared losses."""
    mf = container.model_manifest()
    if type_tag not in mf.types:
        raise ValueError(f"type {type_tag!r} not in manifest inventory {mf.types}")
    weights = []
    site_grams = []
    for layer in range(mf.layer_count):
        site = mf.site_name(layer, type_tag)
        if site not in grams:
            raise ValueError(f"missing gram for site {site!r}")
        weights.append(container.tensor_f64(site))
        site_grams.append(grams[site])

    cells = [(i, j) for i in range(mf.layer_count) for j in range(i, mf.layer_count)]

    def compute(cell: tuple[int, int]) -> float:
        return _pair_loss(weights, site_grams, cell[0], cell[1], spec)

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            values = list(pool.map(compute, cells))
    else:
        values = [compute(c) for c in cells]

    losses = np.zeros((mf.layer_count, mf.layer_count))
    for (i, j), v in zip(cells, values):
        losses[i, j] = v
        losses[j, i] = v
    return PairwiseLossMatrix(type_tag=type_tag, losses=losses)


def type_shareability(heatmaps: Mapping[str, PairwiseLossMatrix]) -> dict[str, str]:
    """Classify each analyzed type as share / per-layer.

    A type shares when the fraction of adjacent pairs whose shared loss is
    strictly below the sum of the two single-layer losses exceeds 0.5.  Down
    is always per-layer and is never analyzed.
    """
    policies: dict[str, str] = {}
    for t, heatmap in heatmaps.items():
        if t == "Down":
            policies[t] = POLICY_PER_LAYER
            continue
        wins = heatmap.adjacent_share_wins()
        if not wins:
            policies[t] = POLICY_PER_LAYER
            continue
        frac = sum(wins) / len(wins)
        policies[t] = POLICY_SHARE if frac > ADJACENT_MAJORITY_THRESHOLD else POLICY_PER_LAYER
    policies.setdefault("Down", POLICY_PER_LAYER)
    return policies


def consecutive_groups(layer_count: int, group_size: int) -> list[tuple[int, ...]]:
    """Consecutive runs [0..g-1], [g..2g-1], ...; the last run may be shorter."""
    return [
        tuple(range(start, min(start + group_size, layer_count)))
        for start in range(0, layer_count, group_size)
    ]


def build_plan(
    manifest: ModelManifest,
    policies: Mapping[str, str],
    group_size: int,
    spec: CompressionRatioSpec,
    sequential_update: bool | None = None,
) -> CompressionPlan:
    """Assemble the full plan: groups per type plus the per-group rank.

    At ratio 0 every group keeps full rank (lossless roundtrip); otherwise the
    rank comes from the storage-budget formula.  ``sequential_update=None``
    defaults to: on when the removed fraction is >= 0.4.
    """
    if group_size < 1:
        raise ValueError("group size must be >= 1")
    if group_size > manifest.layer_count:
        warnings.warn(
            f"group size {group_size} exceeds layer count {manifest.layer_count}; clamping",
            stacklevel=2,
        )
        group_size = manifest.layer_count
    if sequential_update is None:
        sequential_update = spec.removed_fraction >= 0.4

    types: dict[str, TypePlan] = {}
    for t in manifest.types:
        policy = policies.get(t, DEFAULT_POLICIES.get(t, POLICY_PER_LAYER))
        if policy == POLICY_EXCLUDE:
            types[t] = TypePlan(policy=policy, groups=())
            continue
        d1, d2 = manifest.site_shape(t)
        runs = (
            consecutive_groups(manifest.layer_count, group_size)
            if policy == POLICY_SHARE
            else consecutive_groups(manifest.layer_count, 1)
        )
        groups = []
        for gid, layers in enumerate(runs):
            n = len(layers)
            if spec.removed_fraction == 0.0:
                k = full_rank(d1, d2, n)
                clamped = False
            else:
                k = rank_for_budget(d1, d2, n, spec)
                clamped = (
                    int(np.floor(d1 * d2 * n * spec.retained_fraction / (d1 + d2 * n))) < 1
                )
            groups.append(LayerGroup(group_id=gid, layers=layers, k=k, rank_clamped=clamped))
        types[t] = TypePlan(policy=policy, groups=tuple(groups))

    plan = CompressionPlan(
        ratio=spec,
        group_size=group_size,
        sequential_update=sequential_update,
        types=types,
    )
    plan.validate(manifest.layer_count)
    return plan


def plan_text(plan: CompressionPlan, manifest: ModelManifest) -> str:
    """Human-readable plan document (embedded in compressed container headers)."""
    lines = [
        "compression plan",
        f"  target removed fraction: {plan.ratio.removed_fraction}",
        f"  retained fraction:       {plan.ratio.retained_fraction}",
        f"  shared group size:       {plan.group_size}",
        f"  sequential update:       {'on' if plan.sequential_update else 'off'}",
        f"  layers:                  {manifest.layer_count}",
    ]
    for t in manifest.types:
        tplan = plan.types[t]
        lines.append(f"  type {t}: {tplan.policy}")
        if tplan.policy == POLICY_EXCLUDE:
            lines.append("    kept dense")
            continue
        d1, d2 = manifest.site_shape(t)
        for g in tplan.groups:
            run = f"{g.layers[0]}..{g.layers[-1]}" if len(g.layers) > 1 else str(g.layers[0])
            flag = "  [rank clamped to 1: over budget]" if g.rank_clamped else ""
            lines.append(
                f"    group {g.group_id}: layers {run}  k={g.k}  "
                f"stored={d1 * g.k + g.k * d2 * len(g.layers)}{flag}"
            )
    return "\n".join(lines) + "\n"


def heatmaps_to_json(heatmaps: Mapping[str, PairwiseLossMatrix], policies: Mapping[str, str],
                     spec: CompressionRatioSpec) -> str:
    payload = {
        "ratio_removed": spec.removed_fraction,
        "policy_rule": (
            "share iff the fraction of adjacent pairs with loss(i,i+1) < "
            "loss(i,i)+loss(i+1,i+1) exceeds "
            f"{ADJACENT_MAJORITY_THRESHOLD} (toolkit formalization of the heatmap analysis)"
        ),
        "policies": dict(policies),
        "heatmaps": {t: h.to_plot_data() for t, h in heatmaps.items()},
    }
    return json.dumps(payload, sort_keys=True, indent=2)
