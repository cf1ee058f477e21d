"""Dense linear algebra: column-space projectors, subspace cosines, simplex
projection and the PSD square root used by the Frechet utility metric.

Everything runs in float64.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

RANK_TOLERANCE = 1e-8


class RankDeficient(ValueError):
    """Basis columns are (numerically) linearly dependent."""


class ZeroVector(ValueError):
    pass


class NotSymmetric(ValueError):
    pass


def _as_basis(basis) -> np.ndarray:
    b = np.asarray(basis, dtype=np.float64)
    if b.ndim == 1:
        b = b[:, None]
    if b.ndim != 2:
        raise ValueError(f"basis must be 2-D, got shape {b.shape}")
    return b


def check_rank(basis, rank_tolerance: float = RANK_TOLERANCE) -> None:
    b = _as_basis(basis)
    d, l = b.shape
    if l < 1 or l > d:
        raise RankDeficient(f"need 1 <= l <= d, got basis of shape {b.shape}")
    if not np.all(np.isfinite(b)):
        raise ValueError("basis has non-finite entries")
    sv = np.linalg.svd(b, compute_uv=False)
    if sv[0] == 0.0 or sv[-1] < rank_tolerance * sv[0]:
        raise RankDeficient(
            f"smallest singular value {sv[-1]:.3e} below tolerance "
            f"(largest {sv[0]:.3e}); duplicate or collinear tokens?"
        )


def projection_matrix(basis, rank_tolerance: float = RANK_TOLERANCE,
                      allow_pinv: bool = False) -> np.ndarray:
    """Orthogonal projector V (V^T V)^{-1} V^T onto the column space of `basis`.

    The Gram inverse goes through a Cholesky solve. With ``allow_pinv`` a
    rank-deficient basis falls back to the pseudo-inverse instead of raising.
    """
    v = _as_basis(basis)
    try:
        check_rank(v, rank_tolerance)
    except RankDeficient:
        if not allow_pinv:
            raise
        p = v @ np.linalg.pinv(v)
        return 0.5 * (p + p.T)
    gram = v.T @ v
    chol = np.linalg.cholesky(gram)
    # solve (L L^T) X = V^T
    y = np.linalg.solve(chol, v.T)
    x = np.linalg.solve(chol.T, y)
    p = v @ x
    return 0.5 * (p + p.T)


def cosine_to_subspace(x, basis, rank_tolerance: float = RANK_TOLERANCE) -> float:
    """cos(x, Px) = |Px| / |x| with P the projector onto span(basis)."""
    x = np.asarray(x, dtype=np.float64)
    nx = np.linalg.norm(x)
    if nx <= 1e-12:
        raise ZeroVector("cosine of a zero vector is undefined")
    p = projection_matrix(basis, rank_tolerance)
    val = np.linalg.norm(p @ x) / nx
    return float(min(max(val, 0.0), 1.0))


def project_simplex(row) -> np.ndarray:
    """Euclidean projection onto the probability simplex (sort and threshold)."""
    v = np.asarray(row, dtype=np.float64).ravel()
    n = v.size
    if n == 0:
        raise ValueError("empty vector")
    u = np.sort(v)[::-1]
    css = np.cumsum(u) - 1.0
    idx = np.arange(1, n + 1)
    cond = u - css / idx > 0
    rho = idx[cond][-1]
    theta = css[rho - 1] / rho
    w = np.maximum(v - theta, 0.0)
    # renormalise away the last bits of rounding error
    s = w.sum()
    if s > 0:
        w = w / s
    return w


def project_simplex_rows(mat) -> np.ndarray:
    m = np.asarray(mat, dtype=np.float64)
    return np.stack([project_simplex(r) for r in m]) if m.ndim == 2 else project_simplex(m)


def psd_sqrt(m, tol: float = 1e-8) -> np.ndarray:
    """Symmetric PSD square root via eigendecomposition; tiny negative
    eigenvalues (>= -tol) are clamped to zero."""
    a = np.asarray(m, dtype=np.float64)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ValueError(f"square matrix required, got {a.shape}")
    scale = max(1.0, float(np.max(np.abs(a))))
    if np.max(np.abs(a - a.T)) > tol * scale:
        raise NotSymmetric("matrix is not symmetric")
    a = 0.5 * (a + a.T)
    w, q = np.linalg.eigh(a)
    if w.min() < -tol * scale:
        raise ValueError(f"matrix is not PSD (min eigenvalue {w.min():.3e})")
    w = np.clip(w, 0.0, None)
    s = (q * np.sqrt(w)) @ q.T
    return 0.5 * (s + s.T)


@dataclass(frozen=True)
class Subspace:
    """Basis (d x l) with its cached projector."""

    basis: np.ndarray
    projector: np.ndarray = field(repr=False)
    layer_index: int = 0

    @classmethod
    def from_basis(cls, basis, layer_index: int = 0,
                   rank_tolerance: float = RANK_TOLERANCE) -> "Subspace":
        b = _as_basis(basis).copy()
        p = projection_matrix(b, rank_tolerance)
        b.setflags(write=False)
        p.setflags(write=False)
        return cls(basis=b, projector=p, layer_index=layer_index)

    @property
    def dim(self) -> int:
        return self.basis.shape[1]

    def residual(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        return x - self.projector @ x
