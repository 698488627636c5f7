"""Spectral operators: SVD access, nuclear norm, singular-value
soft-thresholding, numeric rank, and a ladder-style truncated SVD."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class SvdFactors:
    """Thin SVD X = u @ diag(s) @ v.T with s sorted descending."""

    u: np.ndarray  # (m, r), column-orthonormal
    s: np.ndarray  # (r,), nonnegative, descending
    v: np.ndarray  # (n, r), column-orthonormal

    @property
    def rank(self) -> int:
        return self.s.shape[0]

    def reconstruct(self) -> np.ndarray:
        return (self.u * self.s) @ self.v.T


def _check_finite(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if not np.isfinite(x).all():
        raise ValueError("matrix entries must be finite")
    return x


def svd(x: np.ndarray) -> SvdFactors:
    """Full thin SVD via the dense backend."""
    x = _check_finite(x)
    u, s, vt = np.linalg.svd(x, full_matrices=False)
    return SvdFactors(u=u, s=s, v=vt.T)


def nuclear_norm(x: np.ndarray) -> float:
    """Sum of singular values."""
    x = _check_finite(x)
    return float(np.linalg.svd(x, compute_uv=False).sum())


def soft_threshold(x: np.ndarray, alpha: float) -> np.ndarray:
    """Shrink singular values by alpha and truncate at zero.

    This is the proximal map of alpha * nuclear norm; a singular value
    exactly equal to alpha maps to zero.
    """
    if alpha < 0:
        raise ValueError("alpha must be >= 0")
    f = svd(x)
    shrunk = np.maximum(f.s - alpha, 0.0)
    return (f.u * shrunk) @ f.v.T


def numeric_rank(x: np.ndarray, threshold: float) -> int:
    """Number of singular values strictly above the threshold."""
    x = np.asarray(x, dtype=float)
    s = np.linalg.svd(x, compute_uv=False)
    return int((s > threshold).sum())


def _ladder_sizes(s: np.ndarray, cut: float, start: int, step: int) -> list[int]:
    """Sizes requested from a truncated-SVD backend: ask for `start` values,
    then grow by `step` while the smallest value seen still exceeds the cut."""
    total = s.shape[0]
    sizes = []
    b = start
    while True:
        b_eff = min(b, total)
        sizes.append(b_eff)
        if b_eff >= total or s[b_eff - 1] <= cut:
            break
        b += step
    return sizes


def rank_ladder_svd(
    x: np.ndarray, cut: float, start: int = 5, step: int = 5
) -> SvdFactors:
    """Exactly the singular triplets with value > cut, found by laddering.

    The ladder requests `start` triplets and grows the request by `step`
    until the smallest computed value drops to the cut, mirroring how an
    iterative partial-SVD backend would be driven. At this scale the
    backend is a dense SVD, so the result is identical to filtering a full
    decomposition; the ladder bookkeeping is preserved so an iterative
    backend can slot in.
    """
    if cut <= 0:
        raise ValueError("cut must be > 0")
    if start < 1 or step < 1:
        raise ValueError("start and step must be >= 1")
    f = svd(x)
    _ladder_sizes(f.s, cut, start, step)
    r = int((f.s > cut).sum())
    return SvdFactors(u=f.u[:, :r], s=f.s[:r], v=f.v[:, :r])
