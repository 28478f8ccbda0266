"""Dense float64 matrix kernels.

All factorization arithmetic runs in 64-bit floats; callers holding 32-bit
model tensors widen them before reaching this module.  Matrices are plain
2-D ``numpy`` arrays in row-major order.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.linalg


class LinalgError(ValueError):
    """A kernel rejected its input."""


class NotPositiveDefiniteError(LinalgError):
    """Cholesky hit a non-positive pivot; the caller may retry with jitter."""


class SingularTriangularError(LinalgError):
    """Triangular solve found a zero or near-zero diagonal element."""


def as_matrix(a, name: str = "matrix") -> np.ndarray:
    """Validate and return *a* as a finite, 2-D, C-contiguous float64 array."""
    m = np.asarray(a, dtype=np.float64)
    if m.ndim != 2:
        raise LinalgError(f"{name} must be 2-D, got shape {m.shape}")
    if not np.isfinite(m).all():
        raise LinalgError(f"{name} contains non-finite values")
    return np.ascontiguousarray(m)


@dataclass(frozen=True)
class SvdResult:
    """Thin SVD factors: ``u @ diag(singular_values) @ vt`` approximates the input.

    Singular values are non-negative and descending; ``u`` and ``vt`` have
    orthonormal columns / rows.
    """

    u: np.ndarray
    singular_values: np.ndarray
    vt: np.ndarray

    @property
    def rank(self) -> int:
        return int(self.singular_values.shape[0])

    def reconstruct(self) -> np.ndarray:
        return (self.u * self.singular_values) @ self.vt


def svd(a) -> SvdResult:
    """Full thin SVD (rank = min(rows, cols))."""
    m = as_matrix(a)
    u, s, vt = np.linalg.svd(m, full_matrices=False)
    return SvdResult(u=u, singular_values=s, vt=vt)


def truncated_svd(a, k: int) -> SvdResult:
    """Best rank-*k* factors of *a* in the Frobenius sense (Eckart-Young).

    Raises:
        LinalgError: if k is outside [1, min(rows, cols)] or *a* is non-finite.
    """
    m = as_matrix(a)
    r = min(m.shape)
    if not 1 <= k <= r:
        raise LinalgError(f"k={k} out of range [1, {r}] for shape {m.shape}")
    full = svd(m)
    return SvdResult(
        u=full.u[:, :k],
        singular_values=full.singular_values[:k],
        vt=full.vt[:k, :],
    )


def singular_values(a) -> np.ndarray:
    """Descending singular values without materializing the factors."""
    return np.linalg.svd(as_matrix(a), compute_uv=False)


def svd_tail_norm(sv: np.ndarray, k: int) -> float:
    """sqrt(sum of squared singular values past index k): the rank-k residual norm."""
    tail = np.asarray(sv, dtype=np.float64)[k:]
    return float(np.sqrt(np.sum(tail * tail)))


def cholesky_factor(a) -> np.ndarray:
    """Lower-triangular L with ``L @ L.T`` equal to the symmetric PD input.

    Raises:
        LinalgError: input not symmetric within 1e-8 relative.
        NotPositiveDefiniteError: non-positive pivot (input not PD at working
            precision; the caller escalates jitter).
    """
    m = as_matrix(a)
    if m.shape[0] != m.shape[1]:
        raise LinalgError(f"cholesky needs a square matrix, got {m.shape}")
    scale = float(np.abs(m).max()) if m.size else 0.0
    asym = float(np.abs(m - m.T).max())
    if asym > 1e-8 * max(scale, np.finfo(np.float64).tiny):
        raise LinalgError(
            f"cholesky input not symmetric: max asymmetry {asym:.3e} vs scale {scale:.3e}"
        )
    sym = 0.5 * (m + m.T)
    try:
        return np.linalg.cholesky(sym)
    except np.linalg.LinAlgError as exc:
        raise NotPositiveDefiniteError(str(exc)) from exc


def triangular_solve(t, b, side: str = "left", tri: str = "lower") -> np.ndarray:
    """Solve ``t @ z = b`` (side='left') or ``z @ t = b`` (side='right').

    *t* must be square and structurally triangular (exact zeros in the
    opposite strict triangle) with a well-conditioned diagonal.
    """
    tm = as_matrix(t, "t")
    bm = as_matrix(b, "b")
    if tm.shape[0] != tm.shape[1]:
        raise LinalgError(f"t must be square, got {tm.shape}")
    if side not in ("left", "right"):
        raise LinalgError(f"side must be 'left' or 'right', got {side!r}")
    if tri not in ("lower", "upper"):
        raise LinalgError(f"tri must be 'lower' or 'upper', got {tri!r}")
    lower = tri == "lower"
    off = np.triu(tm, 1) if lower else np.tril(tm, -1)
    if np.any(off != 0.0):
        raise LinalgError(f"t is not {tri}-triangular")
    diag = np.abs(np.diag(tm))
    dmax = float(diag.max()) if diag.size else 0.0
    tol = tm.shape[0] * np.finfo(np.float64).eps * dmax
    if dmax == 0.0 or float(diag.min()) <= tol:
        raise SingularTriangularError(
            "near-singular triangular matrix: |diag| in "
            f"[{float(diag.min()) if diag.size else 0.0:.3e}, {dmax:.3e}]"
        )
    if side == "left":
        if tm.shape[0] != bm.shape[0]:
            raise LinalgError(f"shape mismatch: t {tm.shape} vs b {bm.shape}")
        return scipy.linalg.solve_triangular(tm, bm, lower=lower)
    if tm.shape[0] != bm.shape[1]:
        raise LinalgError(f"shape mismatch: b {bm.shape} vs t {tm.shape}")
    # z @ t = b  <=>  t.T @ z.T = b.T
    zt = scipy.linalg.solve_triangular(tm, bm.T, lower=lower, trans="T")
    return np.ascontiguousarray(zt.T)


def frobenius_norm(a) -> float:
    """sqrt of the sum of squared entries."""
    return float(np.linalg.norm(as_matrix(a), "fro"))
