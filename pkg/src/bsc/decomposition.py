"""Shared-basis factorization of a layer group.

The same-type weight matrices of a group are horizontally concatenated,
scaled by the group's whitening factor, and truncated by SVD.  The basis
(d1 x k) is recovered through a triangular solve against the whitening
factor; each layer keeps its own (k x d2) coefficient block.  The retained
rank comes from a closed-form budget: storing one basis plus n coefficient
blocks at rank k costs d1*k + k*d2*n parameters, which pinned to a retained
fraction x of the original n*d1*d2 gives k = floor(d1*d2*n*x / (d1 + d2*n)).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import linalg
from .calibration import WhiteningFactor


@dataclass(frozen=True)
class CompressionRatioSpec:
    """Fraction of parameters to remove; the retained fraction drives rank."""

    removed_fraction: float

    def __post_init__(self):
        if not 0.0 <= self.removed_fraction < 1.0:
            raise ValueError(f"removed fraction must lie in [0, 1), got {self.removed_fraction}")

    @property
    def retained_fraction(self) -> float:
        return 1.0 - self.removed_fraction


@dataclass
class BasisFactorization:
    """One shared basis plus per-layer coefficient blocks, in group layer order."""

    group_id: int
    type_tag: str
    basis: np.ndarray
    coeffs: list[np.ndarray]
    k: int
    whitened_loss: float

    def __post_init__(self):
        if self.k < 1:
            raise ValueError("rank k must be >= 1")
        if len(self.coeffs) < 1:
            raise ValueError("a factorization carries at least one coefficient block")
        if not np.isfinite(self.basis).all():
            raise ValueError("basis contains non-finite values")


def rank_for_budget(d1: int, d2: int, n: int, spec: CompressionRatioSpec) -> int:
    """Rank meeting the storage budget; clamps to 1 (over-budget is reported upstream)."""
    if min(d1, d2, n) < 1:
        raise ValueError("d1, d2 and n must all be >= 1")
    x = spec.retained_fraction
    k = int(np.floor(d1 * d2 * n * x / (d1 + d2 * n)))
    return max(1, k)


def full_rank(d1: int, d2: int, n: int) -> int:
    """Rank of a lossless factorization of the concatenated group matrix."""
    return min(d1, n * d2)


def stored_params(d1: int, d2: int, n: int, k: int) -> int:
    return d1 * k + k * d2 * n


def _check_group(weights, s: WhiteningFactor, k: int) -> tuple[list[np.ndarray], int, int]:
    mats = [linalg.as_matrix(w, f"weights[{i}]") for i, w in enumerate(weights)]
    if not mats:
        raise ValueError("group must contain at least one weight matrix")
    d1, d2 = mats[0].shape
    for m in mats:
        if m.shape != (d1, d2):
            raise ValueError(f"group shapes differ: {m.shape} vs {(d1, d2)}")
    if s.width != d1:
        raise ValueError(f"whitening width {s.width} != weight rows {d1}")
    if not 1 <= k <= full_rank(d1, d2, len(mats)):
        raise ValueError(f"k={k} out of range [1, {full_rank(d1, d2, len(mats))}]")
    return mats, d1, d2


def factorize_group(
    weights,
    s: WhiteningFactor,
    k: int,
    group_id: int = 0,
    type_tag: str = "",
) -> BasisFactorization:
    """Factorize one sharing group at rank *k* under whitening *s*.

    Concatenates the weights in ascending layer order, truncates the SVD of
    the whitened concatenation, and undoes the whitening on the basis with a
    triangular solve (no explicit inverse).  ``whitened_loss`` is the exact
    residual of the truncation in whitened space.
    """
    mats, _, d2 = _check_group(weights, s, k)
    concat = np.hstack(mats)
    scaled = s.s @ concat
    full = linalg.svd(scaled)
    sv = full.singular_values
    scaled_basis = full.u[:, :k] * sv[:k]
    basis = linalg.triangular_solve(s.s, scaled_basis, side="left", tri="upper")
    vt_k = full.vt[:k, :]
    coeffs = [np.ascontiguousarray(vt_k[:, i * d2: (i + 1) * d2]) for i in range(len(mats))]
    return BasisFactorization(
        group_id=group_id,
        type_tag=type_tag,
        basis=basis,
        coeffs=coeffs,
        k=k,
        whitened_loss=linalg.svd_tail_norm(sv, k),
    )


def reconstruct(f: BasisFactorization, layer_index: int) -> np.ndarray:
    """Approximated dense weight of one group member: basis @ coeffs[layer]."""
    if not 0 <= layer_index < len(f.coeffs):
        raise IndexError(f"layer index {layer_index} outside group of {len(f.coeffs)}")
    return f.basis @ f.coeffs[layer_index]


def truncation_loss(weights, s: WhiteningFactor, k: int) -> float:
    """Whitened residual sqrt(sum of squared trailing singular values).

    Same contract as :func:`factorize_group` but never materializes factors.
    """
    mats, _, _ = _check_group(weights, s, k)
    sv = linalg.singular_values(s.s @ np.hstack(mats))
    return linalg.svd_tail_norm(sv, k)
