"""Declarative merge plans: parse a YAML document into a tree of merge steps
and execute it depth-first.

Document schema (top-level key ``plan``, children recurse with the same keys):

.. code-block:: yaml

    plan:
      name: multilingual-asr          # required
      base: pretrained.safetensors    # required: theta_0 of this step
      method: lors                    # wa | ta | ties | dare | lors
      lambda: 0.15                    # required except for wa
      seed: 0                         # dare only (optional elsewhere)
      ties_trim_k: 20                 # ties only
      dare_drop_rate: 0.9             # dare only
      models:                         # leaf checkpoints
        - {id: ca, path: ca.safetensors, svp_r: 5, mp_p: 40}
        - {id: fr, path: fr.safetensors, svp_r: 1, mp_p: 10}
      children: []                    # nested plans; their results join the
                                      # models of this step (after them, in
                                      # listed order)

``svp_r``/``mp_p`` are retain percentages consumed by the ``lors`` method;
models that omit them default to retain-everything, as do child results.
Unknown keys are rejected. File references are checked eagerly at parse time,
resolved against the document's directory.
"""

from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import yaml

from .errors import PlanExecutionError, SchemaError
from .merge_methods import MergeRecipe, merge_models
from .pruning import PruneConfig
from .tensor_store import TensorMap, load_checkpoint, save_checkpoint

_METHOD_ALIASES = {
    "wa": "wa",
    "ta": "ta",
    "ties": "ties",
    "dare": "dare_ta",
    "lors": "preproc_ta",
}

_NODE_KEYS = {
    "name",
    "base",
    "method",
    "lambda",
    "seed",
    "ties_trim_k",
    "dare_drop_rate",
    "models",
    "children",
}
_MODEL_KEYS = {"id", "path", "svp_r", "mp_p"}


@dataclass(frozen=True)
class LeafModel:
    model_id: str
    path: Path
    prune: PruneConfig


@dataclass(frozen=True)
class PlanNode:
    name: str
    base: Path
    method: str
    lam: float
    seed: int
    ties_trim_k: float
    dare_drop_rate: float
    models: tuple[LeafModel, ...]
    children: tuple["PlanNode", ...] = field(default

=())

    def recipe(self) -> MergeRecipe:
        per_model = {m.model_id: m.prune for m in self.models}
        return MergeRecipe(
            method=self.method,
            lam=self.lam,
            per_model_prune=per_model,
            ties_trim_k=self.ties_trim_k,
            dare_drop_rate=self.dare_drop_rate,
            seed=self.seed,
        )


@dataclass(frozen=True)
class MergePlan:
    root: PlanNode

    @property
    def name(self) -> str:
        return self.root.name
