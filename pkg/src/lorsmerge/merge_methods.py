"""Merging algorithms over checkpoints and task vectors.

Five methods are exposed: plain weight averaging (``wa``), task arithmetic
(``ta``), trim/elect/disjoint-mean merging (``ties``), random drop-and-rescale
followed by task arithmetic (``dare_ta``), and the generic preprocessed merge
(``preproc_ta``) that applies a low-rank + sparse split to each task vector
before task arithmetic. Degenerate prune configs turn ``preproc_ta`` into
pure-MP or pure-SVP merging.

Determinism contract: reductions over models run in ascending model index and
element accumulation happens in float64 with a single final rounding to
float32, so identical inputs produce bit-identical outputs regardless of how
many worker threads process tensors.
"""

import json
import logging
import re
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Callable, Sequence

import numpy as np

from .pruning import PruneConfig, lors, magnitude_prune
from .rng import philox_stream
from .tensor_store import (
    META_BASE_FINGERPRINT,
    TensorMap,
    _require_compatible,
    diff,
    fingerprint,
)

logger = logging.getLogger(__name__)

METHODS = ("wa", "ta", "ties", "dare_ta", "preproc_ta")

LayerFilter = Callable[[str, np.ndarray], bool]


def make_layer_filter(min_dim: int = 64, exclude_pattern: str = r"embed") -> LayerFilter:
    """Predicate selecting matrices eligible for pruning: rank-2 tensors with
    both dims >= ``min_dim`` whose name does not match ``exclude_pattern``
    (embeddings are not linear layers)."""
    pattern = re.compile(exclude_pattern, re.IGNORECASE) if exclude_pattern else None

    def layer_filter(name: str, arr: np.ndarray) -> bool:
        if arr.ndim != 2 or min(arr.shape) < min_dim:
            return False
        return not (pattern and pattern.search(name))

    return layer_filter


default_layer_filter = make_layer_filter()

# rank-2 tensors of any size; what the toy workbench uses
any_matrix_filter: LayerFilter = lambda name, arr: arr.ndim == 2


@dataclass(frozen=True)
class MergeRecipe:
    """Method identifier plus hyperparameters for one merge step."""

    method: str
    lam: float = 1.0
    per_model_prune: dict[str, PruneConfig] = field(default_factory=dict)
    ties_trim_k: float = 100.0
    dare_drop_rate: float = 0.0
    seed: int = 0
    layer_filter: LayerFilter | None = None

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"unknown merge method {self.method!r}; expected one of {METHODS}")
        if not np.isfinite(self.lam) or self.lam < 0.0:
            raise ValueError(f"lambda must be finite and >= 0, got {self.lam}")
        if not 0.0 < self.ties_trim_k <= 100.0:
            raise ValueError(f"ties_trim_k must be in (0, 100], got {self.ties_trim_k}")
        if not 0.0 <= self.dare_drop_rate < 1.0:
            raise ValueError(f"dare_drop_rate must be in [0, 1), got {self.dare_drop_rate}")
        if not 0 <= int(self.seed) < 2**64:
            raise ValueError(f"seed must be an unsigned 64-bit integer, got {self.seed}")

    def prune_for(self, model_id: str) -> PruneConfig:
        return self.per_model_prune.get(model_id, PruneConfig())


def _check_same_base(base: TensorMap, deltas: Sequence[TensorMap]) -> None:
    """Warn when a delta was taken against a different base checkpoint."""
    tagged = [d for d in deltas if META_BASE_FINGERPRINT in d.meta]
    if not tagged:
        return
    base_fp = fingerprint(base)
    for i, d in enumerate(deltas):
        fp = d.meta.get(META_BASE_FINGERPRINT)
        if fp is not None and fp != base_fp:
            logger.warning(
                "delta %d was computed against a different base "
                "(fingerprint %s... vs %s...); merging assumes a shared base",
                i,
                fp[:12],
                base_fp[:12],
            )


def weight_average(models: Sequence[TensorMap]) -> TensorMap:
    """Uniform element-wise mean, accumulated in float64 in ascending model
    index order."""
    if not models:
        raise ValueError("weight_average requires at least one model")
    ref = models[0]
    for i, m in enumerate(models[1:], start=1):
        _require_compatible(ref, m, f"weight_average(model {i})")
    out = {}
    for name, arr in ref.items():
        acc = arr.astype(np.float64)
        for m in models[1:]:
            acc = acc + m[name].astype(np.float64)
        out[name] = (acc / len(models)).astype(np.float32)
    return TensorMap(out, meta={"method": "wa", "n_models": str(len(models))})


def task_arithmetic(base: TensorMap, deltas: Sequence[TensorMap], lam: float) -> TensorMap:
    """``base + lam * sum(deltas)`` with the sum taken in ascending task
    index; accumulation in float64, one final rounding."""
    if not deltas:
        raise ValueError("task_arithmetic requires at least one delta")
    if not np.isfinite(lam):
        raise ValueError(f"lambda must be finite, got {lam}")
    for i, d in enumerate(deltas):
        _require_compatible(base, d, f"task_arithmetic(delta {i})")
    _check_same_base(base, deltas)
    out = {}
    for name, arr in base.items():
        acc = np.zeros(arr.shape, dtype=np.float64)
        for d in deltas:
            acc = acc + d[name].astype(np.float64)
        out[name] = (arr.astype(np.float64) + float(lam) * acc).astype(np.float32)
    return TensorMap(
        out,
        meta={
            "method": "ta",
            "lambda": repr(float(lam)),
            "n_models": str(len(deltas)),
            META_BASE_FINGERPRINT: fingerprint(base),
        },
    )


def _trim_any_rank(arr: np.ndarray, trim_k: float) -> np.ndarray:
    if arr.ndim == 1:
        return magnitude_prune(arr.reshape(1, -1), trim_k).reshape(arr.shape)
    return magnitude_prune(arr, trim_k)


def ties_merge(
    base: TensorMap, deltas: Sequence[TensorMap], lam: float, trim_k: float = 100.0
) -> TensorMap:
    """Trim each delta to its top ``trim_k`` percent by magnitude (all
    tensors, vectors included), elect a per-coordinate sign by the larger
    total magnitude, then average the trimmed values that match the elected
    sign. Exact sign-magnitude ties elect no sign and merge to zero."""
    if not deltas:
        raise ValueError("ties_merge requires at least one delta")
    if not 0.0 < trim_k <= 100.0:
        raise ValueError(f"trim_k must be in (0, 100], got {trim_k}")
    if not np.isfinite(lam):
        raise ValueError(f"lambda must be finite, got {lam}")
    for i, d in enumerate(deltas):
        _require_compatible(base, d, f"ties_merge(delta {i})")
    _check_same_base(base, deltas)
    out = {}
    for name, arr in base.items():
        trimmed = [_trim_any_rank(d[name], trim_k).astype(np.float64) for d in deltas]
        pos = np.zeros(arr.shape, dtype=np.float64)
        neg = np.zeros(arr.shape, dtype=np.float64)
        for t in trimmed:
            pos = pos + np.maximum(t, 0.0)
            neg = neg + np.maximum(-t, 0.0)
        elected = np.sign(pos - neg)
        total = np.zeros(arr.shape, dtype=np.float64)
        count = np.zeros(arr.shape, dtype=np.float64)
        for t in trimmed:
            match = (np.sign(t) == elected) & (t != 0.0)
            total = total + np.where(match, t, 0.0)
            count = count + match
        merged = np.divide(total, count, out=np.zeros_like(total), where=count > 0)
        out[name] = (arr.astype(np.float64) + float(lam) * merged).astype(np.float32)
    return TensorMap(
        out,
        meta={
            "method": "ties",
            "lambda": repr(float(lam)),
            "ties_trim_k": repr(float(trim_k)),
            "n_models": str(len(deltas)),
            META_BASE_FINGERPRINT: fingerprint(base),
        },
    )


def dare_drop(delta: TensorMap, drop_rate: float, seed: int) -> TensorMap:
    """Zero each element independently with probability ``drop_rate`` and
    rescale survivors by ``1 / (1 - drop_rate)``.

    The mask comes from a counter-based stream keyed by (seed, tensor name);
    element ``i`` consumes the i-th draw of its tensor's stream, so output is
    reproducible and independent of tensor processing order.
    """
    if not 0.0 <= drop_rate < 1.0:
        raise ValueError(f"drop_rate must be in [0, 1), got {drop_rate}")
    out = {}
    for name, arr in delta.items():
        gen = philox_stream(seed, name)
        u = gen.random(arr.size)
        keep = (u >= drop_rate).reshape(arr.shape)
        scaled = arr.astype(np.float64) / (1.0 - drop_rate)
        out[name] = np.where(keep, scaled, 0.0).astype(np.float32)
    meta = dict(delta.meta)
    meta.update({"dare_drop_rate": repr(float(drop_rate)), "dare_seed": str(int(seed))})
    return TensorMap(out, meta=meta)


def _preprocess_one(args: tuple[np.ndarray, PruneConfig]) -> np.ndarray:
    arr, cfg = args
    return lors(arr, cfg).dense()


def merge_with_preprocessor(
    base: TensorMap,
    deltas: Sequence[TensorMap],
    recipe: MergeRecipe,
    ids: Sequence[str] | None = None,
    threads: int = 1,
) -> TensorMap:
    """Low-rank + sparse pruning of each task vector followed by task
    arithmetic.

    Tensors passing the recipe's layer filter are replaced by the dense
    reconstruction of their pruned decomposition; everything else (vectors,
    filtered-out matrices) passes through untouched. Per-model configs come
    from ``recipe.per_model_prune`` keyed by ``ids`` (model indices as strings
    when omitted); missing ids default to retain-everything.
    """
    if recipe.method != "preproc_ta":
        raise ValueError(f"merge_with_preprocessor requires method 'preproc_ta', got {recipe.method!r}")
    if not deltas:
        raise ValueError("merge_with_preprocessor requires at least one delta")
    if ids is None:
        ids = [str(i) for i in range(len(deltas))]
    if len(ids) != len(deltas):
        raise ValueError(f"got {len(ids)} ids for {len(deltas)} deltas")
    layer_filter = recipe.layer_filter or default_layer_filter

    jobs: list[tuple[int, str, np.ndarray, PruneConfig]] = []
    for i, (model_id, delta) in enumerate(zip(ids, deltas)):
        cfg = recipe.prune_for(model_id)
        for name, arr in delta.items():
            if layer_filter(name, arr):
                jobs.append((i, name, arr, cfg))

    if threads > 1 and len(jobs) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(_preprocess_one, [(arr, cfg) for _, _, arr, cfg in jobs]))
    else:
        results = [_preprocess_one((arr, cfg)) for _, _, arr, cfg in jobs]

    processed: list[dict[str, np.ndarray]] = [dict(d.items()) for d in deltas]
    for (i, name, _, _), pruned in zip(jobs, results):
        processed[i][name] = pruned
    pruned_deltas = [
        TensorMap(entries, meta=d.meta) for entries, d in zip(processed, deltas)
    ]

    merged = task_arithmetic(base, pruned_deltas, recipe.lam)
    prune_doc = {
        model_id: [recipe.prune_for(model_id).svp_retain_r, recipe.prune_for(model_id).mp_retain_p]
        for model_id in ids
    }
    meta = dict(merged.meta)
    meta.update(
        {
            "method": "preproc_ta",
            "model_ids": json.dumps(list(ids)),
            "prune_svp_r_mp_p": json.dumps(prune_doc, sort_keys=True),
        }
    )
    return merged.replace_meta(meta)


def merge_models(
    base: TensorMap,
    models: Sequence[TensorMap],
    recipe: MergeRecipe,
    ids: Sequence[str] | None = None,
    threads: int = 1,
) -> TensorMap:
    """Dispatch a recipe over full checkpoints; task vectors are taken
    against ``base`` for the delta-based methods."""
    if not models:
        raise ValueError("merge_models requires at least one model")
    if recipe.method == "wa":
        merged = weight_average(models)
        return merged.replace_meta({**merged.meta, META_BASE_FINGERPRINT: fingerprint(base)})
    deltas = [diff(m, base) for m in models]
    if recipe.method == "ta":
        return task_arithmetic(base, deltas, recipe.lam)
    if recipe.method == "ties":
        return ties_merge(base, deltas, recipe.lam, recipe.ties_trim_k)
    if recipe.method == "dare_ta":
        dropped = [
            dare_drop(d, recipe.dare_drop_rate, (recipe.seed + i) % 2**64)
            for i, d in enumerate(deltas)
        ]
        merged = task_arithmetic(base, dropped, recipe.lam)
        meta = dict(merged.meta)
        meta.update(
            {
                "method": "dare_ta",
                "dare_drop_rate": repr(float(recipe.dare_drop_rate)),
                "seed": str(int(recipe.seed)),
            }
        )
        return merged.replace_meta(meta)
    if recipe.method == "preproc_ta":
        return merge_with_preprocessor(base, deltas, recipe, ids=ids, threads=threads)
    raise ValueError(f"unknown merge method {recipe.method!r}")


def with_layer_filter(recipe: MergeRecipe, layer_filter: LayerFilter) -> MergeRecipe:
    return replace(recipe, layer_filter=layer_filter)
