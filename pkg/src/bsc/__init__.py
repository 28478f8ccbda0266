"""Cross-layer shared-basis SVD compression toolkit.

Weight matrices of the same type across a group of consecutive layers are
horizontally concatenated, whitened by a Cholesky factor of their calibration
Gram, and truncated by SVD into one shared basis plus per-layer coefficients.
A minimal decoder-only runtime validates compressed models by perplexity and
throughput.
"""

from .calibration import (
    GramRecorder,
    GramStats,
    WhiteningFactor,
    accumulate_gram,
    calibrate_model,
    merge_grams,
    whitening_factor,
)
from .container import Container, ModelManifest, TensorRecord, read_container, write_container
from .decomposition import (
    BasisFactorization,
    CompressionRatioSpec,
    factorize_group,
    rank_for_budget,
    reconstruct,
    truncation_loss,
)
from .linalg import SvdResult, cholesky_factor, frobenius_norm, triangular_solve, truncated_svd
from .pipeline import CompressionReport, account_params, compress_model
from .planner import (
    CompressionPlan,
    PairwiseLossMatrix,
    build_plan,
    pairwise_loss_matrix,
    type_shareability,
)
from .runtime import EvalConfig, LinearSite, TinyGptModel, bench, perplexity

__version__ = "0.1.0"

__all__ = [
    "BasisFactorization",
    "CompressionPlan",
    "CompressionRatioSpec",
    "CompressionReport",
    "Container",
    "EvalConfig",
    "GramRecorder",
    "GramStats",
    "LinearSite",
    "ModelManifest",
    "PairwiseLossMatrix",
    "SvdResult",
    "TensorRecord",
    "TinyGptModel",
    "WhiteningFactor",
    "account_params",
    "accumulate_gram",
    "bench",
    "build_plan",
    "calibrate_model",
    "cholesky_factor",
    "compress_model",
    "factorize_group",
    "frobenius_norm",
    "merge_grams",
    "pairwise_loss_matrix",
    "perplexity",
    "rank_for_budget",
    "read_container",
    "reconstruct",
    "triangular_solve",
    "truncated_svd",
    "truncation_loss",
    "type_shareability",
    "whitening_factor",
    "write_container",
]
