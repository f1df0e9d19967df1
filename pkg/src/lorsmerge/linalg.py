"""Dense SVD primitives used by the pruning preprocessors.

Everything here accumulates in float64 and is deterministic: the LAPACK call
runs with the BLAS pool pinned to one thread, so results are bit-identical no
matter how many worker threads the caller runs per-tensor jobs on. A fixed
sign convention (first nonzero entry of each left singular vector made
non-negative) removes the remaining sign ambiguity.
"""

from dataclasses import dataclass

import numpy as np
from threadpoolctl import threadpool_limits


@dataclass(frozen=True)
class SVDFactors:
    """Thin SVD ``W = U diag(sigma) V^T`` with ``U: d x m``, ``V: k x m``,
    ``m = min(d, k)``; sigma is non-increasing and non-negative."""

    u: np.ndarray
    sigma: np.ndarray
    v: np.ndarray

    def __post_init__(self):
        m = self.sigma.shape[0]
        if self.u.ndim != 2 or self.v.ndim != 2 or self.u.shape[1] != m or self.v.shape[1] != m:
            raise ValueError(
                f"inconsistent factor shapes: U {self.u.shape}, sigma {self.sigma.shape}, "
                f"V {self.v.shape}"
            )

    @property
    def rank(self) -> int:
        return int(self.sigma.shape[0])

    @property
    def shape(self) -> tuple[int, int]:
        return (self.u.shape[0], self.v.shape[0])

    def truncate(self, r: int) -> "SVDFactors":
        if not 0 <= r <= self.rank:
            raise ValueError(f"truncation rank {r} out of range [0, {self.rank}]")
        return SVDFactors(
            np.ascontiguousarray(self.u[:, :r]),
            np.ascontiguousarray(self.sigma[:r]),
            np.ascontiguousarray(self.v[:, :r]),
        )


def svd(w: np.ndarray) -> SVDFactors:
    """Thin SVD of a rank-2 tensor, computed in float64.

    Deterministic for a given input: fixed LAPACK path, single BLAS thread,
    sign-normalized singular vectors.
    """
    if w.ndim != 2:
        raise ValueError(f"svd requires a rank-2 tensor, got rank {w.ndim}")
    if not np.all(np.isfinite(w)):
        raise ValueError("svd requires finite entries")
    w64 = w.astype(np.float64)
    with threadpool_limits(limits=1, user_api="blas"):
        u, s, vt = np.linalg.svd(w64, full_matrices=False)
    v = vt.T
    # sign convention: first nonzero entry of each U column >= 0
    first_nz = (u != 0.0).argmax(axis=0)
    lead = u[first_nz, np.arange(u.shape[1])]
    flip = lead < 0.0
    u = np.where(flip[np.newaxis, :], -u, u)
    v = np.where(flip[np.newaxis, :], -v, v)
    return SVDFactors(np.ascontiguousarray(u), s, np.ascontiguousarray(v))


def low_rank_approx(f: SVDFactors, r: int) -> np.ndarray:
    """Rank-``r`` reconstruction ``U_r diag(sigma_r) V_r^T`` rounded to
    float32. ``r`` must lie in [1, m]."""
    if not 1 <= r <= f.rank:
        raise ValueError(f"rank {r} out of range [1, {f.rank}]")
    with threadpool_limits(limits=1, user_api="blas"):
        recon = (f.u[:, :r] * f.sigma[:r]) @ f.v[:, :r].T
    return recon.astype(np.float32)


def frobenius(a: np.ndarray) -> float:
    """Frobenius norm accumulated in float64."""
    return float(np.linalg.norm(a.astype(np.float64)))
