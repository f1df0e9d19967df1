"""Per-matrix pruning preprocessors: magnitude pruning (MP), singular value
pruning (SVP), and the combined low-rank + sparse decomposition (LoRS).

All ratios are RETAIN ratios in percent: ``p`` keeps the top p% of entries by
magnitude, ``r`` keeps the top r% of singular values. Rank-1 tensors are not
handled here; callers exempt them (biases and norms pass through merging
untouched).
"""

from dataclasses import dataclass, field
from fractions import Fraction
from typing import Iterator

import numpy as np

from .linalg import SVDFactors, low_rank_approx, svd


def _as_fraction(pct: float) -> Fraction:
    # heal binary noise in human-entered percentages (0.1 stays 1/10)
    return Fraction(float(pct)).limit_denominator(1_000_000)


def retain_count(p: float, numel: int) -> int:
    """Number of entries kept by MP: ``ceil(p/100 * numel)``, computed in
    exact rational arithmetic so float noise cannot shift the count."""
    if not 0.0 <= p <= 100.0:
        raise ValueError(f"retain percentage must be in [0, 100], got {p}")
    q = _as_fraction(p) * numel / 100
    return int(-(-q.numerator // q.denominator))


def retain_rank(r: float, m: int) -> int:
    """Rank kept by SVP: ``max(1, round(r/100 * m))`` with half-up rounding;
    ``r == 0`` is the explicit no-low-rank sentinel and maps to 0."""
    if not 0.0 <= r <= 100.0:
        raise ValueError(f"retain percentage must be in [0, 100], got {r}")
    if r == 0.0:
        return 0
    q = _as_fraction(r) * m / 100 + Fraction(1, 2)
    return max(1, q.numerator // q.denominator)


@dataclass(frozen=True)
class PruneConfig:
    """Retain ratios for one model's task vector: ``mp_retain_p`` percent of
    entries (sparse part), ``svp_retain_r`` percent of singular values
    (low-rank part)."""

    mp_retain_p: float = 100.0
    svp_retain_r: float = 100.0

    def __post_init__(self):
        if not 0.0 <= self.mp_retain_p <= 100.0:
            raise ValueError(f"mp_retain_p must be in [0, 100], got {self.mp_retain_p}")
        if not 0.0 <= self.svp_retain_r <= 100.0:
            raise ValueError(f"svp_retain_r must be in [0, 100], got {self.svp_retain_r}")


def _validate_matrix(w: np.ndarray, op: str) -> None:
    if w.ndim != 2:
        raise ValueError(
            f"{op} requires a rank-2 tensor, got rank {w.ndim} "
            "(vectors are exempt from pruning; callers must skip them)"
        )
    if not np.all(np.isfinite(w)):
        raise ValueError(f"{op} requires finite entries")


def magnitude_prune(w: np.ndarray, p: float) -> np.ndarray:
    """Keep exactly ``retain_count(p, d*k)`` largest-|w| entries, zero the
    rest. Ties break toward the lower row-major flat index, so the operation
    is deterministic and bitwise idempotent."""
    _validate_matrix(w, "magnitude_prune")
    n_keep = retain_count(p, w.size)
    flat = w.ravel()
    order = np.argsort(-np.abs(flat), kind="stable")
    out = np.zeros_like(flat)
    keep = order[:n_keep]
    out[keep] = flat[keep]
    return out.reshape(w.shape)


def singular_value_prune(w: np.ndarray, r: float) -> np.ndarray:
    """Truncated-SVD reconstruction keeping ``max(1, round(r/100 * min(d,k)))``
    singular values. ``r`` must be positive; use :func:`lors` with the r=0
    sentinel for a pure-MP pipeline."""
    if r <= 0.0:
        raise ValueError(f"svp retain percentage must be in (0, 100], got {r}")
    _validate_matrix(w, "singular_value_prune")
    f = svd(w)
    return low_rank_approx(f, retain_rank(r, f.rank))


@dataclass(frozen=True)
class LoRSDecomposition:
    """Low-rank + sparse split of one matrix.

    ``low_rank`` holds the rank-r truncated factors (rank 0 when the sentinel
    disabled the low-rank part). The sparse component is a coordinate list
    over the magnitude-pruned residual ``W - dense(L)``; exact zeros in the
    residual are not stored. ``dense()`` reconstructs ``dense(L) + dense(S)``.
    """

    low_rank: SVDFactors
    rows: np.ndarray
    cols: np.ndarray
    values: np.ndarray
    shape: tuple[int, int]
    dense_low_rank: np.ndarray = field(repr=False)

    @property
    def rank(self) -> int:
        return self.low_rank.rank

    @property
    def nnz(self) -> int:
        return int(self.values.size)

    def sparse_triples(self) -> Iterator[tuple[int, int, float]]:
        for r, c, v in zip(self.rows, self.cols, self.values):
            yield int(r), int(c), float(v)

    def dense(self) -> np.ndarray:
        if self.rank == 0:
            out = np.zeros(self.shape, dtype=np.float32)
            out[self.rows, self.cols] = self.values
            return out
        out = self.dense_low_rank.copy()
        out[self.rows, self.cols] += self.values
        return out

    def reconstruction_error(self, w: np.ndarray) -> float:
        from .linalg import frobenius

        denom = frobenius(w)
        if denom == 0.0:
            return 0.0
        return frobenius(w.astype(np.float64) - self.dense().astype(np.float64)) / denom


def lors(w: np.ndarray, cfg: PruneConfig) -> LoRSDecomposition:
    """Split ``w`` into a rank-``r`` component plus a sparse residual.

    The low-rank part keeps the top ``svp_retain_r`` percent of singular
    values; the sparse part magnitude-prunes the residual ``w - dense(L)`` at
    ``mp_retain_p`` percent. Degenerate configs reduce to the constituent
    methods: ``svp_retain_r == 0`` is pure MP, ``mp_retain_p == 0`` pure SVP.
    """
    _validate_matrix(w, "lors")
    d, k = w.shape
    if cfg.svp_retain_r == 0.0:
        factors = SVDFactors(
            np.zeros((d, 0), dtype=np.float64),
            np.zeros((0,), dtype=np.float64),
            np.zeros((k, 0), dtype=np.float64),
        )
        dense_l = np.zeros((d, k), dtype=np.float32)
        residual = w.astype(np.float32, copy=True)
    else:
        f = svd(w)
        rank = retain_rank(cfg.svp_retain_r, f.rank)
        factors = f.truncate(rank)
        dense_l = low_rank_approx(f, rank)
        residual = np.subtract(w, dense_l)
    sparse = magnitude_prune(residual, cfg.mp_retain_p)
    rows, cols = np.nonzero(sparse)
    return LoRSDecomposition(
        low_rank=factors,
        rows=rows,
        cols=cols,
        values=np.ascontiguousarray(sparse[rows, cols]),
        shape=(d, k),
        dense_low_rank=dense_l,
    )


def lors_dense(w: np.ndarray, cfg: PruneConfig) -> np.ndarray:
    """Convenience: ``lors(w, cfg).dense()``."""
    return lors(w, cfg).dense()
