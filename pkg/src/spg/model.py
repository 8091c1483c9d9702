"""Task-incremental model: one shared feature extractor, one dense head per task.

The extractor is an all-ReLU stack so a head on top forms a standard MLP
classifier; routing is by task id and previous heads are never discarded.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import nn
from .nn import Batch, GradientSet, Layer, LayerParams, Network


@dataclass
class TILModel:
    extractor: Network
    heads: dict[int, LayerParams] = field(default_factory=dict)

    @property
    def feature_dim(self) -> int:
        return self.extractor.out_dim

    @property
    def in_dim(self) -> int:
        return self.extractor.in_dim

    def copy(self) -> "TILModel":
        return TILModel(self.extractor.copy(), {t: h.copy() for t, h in self.heads.items()})


def build_model(in_dim: int, hidden_dims: list[int], rng: np.random.Generator) -> TILModel:
    """Extractor with ReLU on every layer; heads are added per task later."""
    dims = [in_dim, *hidden_dims]
    if len(dims) < 2:
        raise ValueError("extractor needs at least one layer")
    layers = [Layer(nn.init_layer(dims[i], dims[i + 1], rng), nn.RELU)
              for i in range(len(dims) - 1)]
    return TILModel(Network(layers))


def add_head(model: TILModel, task_id: int, num_classes: int,
             rng: np.random.Generator) -> None:
    if task_id in model.heads:
        raise ValueError(f"head for task {task_id} already exists")
    if num_classes < 2:
        raise ValueError(f"head needs >= 2 classes, got {num_classes}")
    model.heads[task_id] = nn.init_layer(model.feature_dim, num_classes, rng)


def _head(model: TILModel, task_id: int) -> LayerParams:
    try:
        return model.heads[task_id]
    except KeyError:
        raise ValueError(f"no head for task {task_id}") from None


def composed_network(model: TILModel, task_id: int) -> Network:
    """Extractor layers + the task head as one network (shared param objects)."""
    head = _head(model, task_id)
    return Network([*model.extractor.layers, Layer(head, nn.IDENTITY)])


def forward_task(model: TILModel, task_id: int, batch: Batch) -> np.ndarray:
    """Logits of the task head applied to the shared extractor's features."""
    return nn.forward(composed_network(model, task_id), batch)


def backward_task(model: TILModel, task_id: int, batch: Batch, loss_kind: str):
    """(loss, extractor GradientSet, head gradient) through the task's head."""
    loss, grads = nn.backward(composed_network(model, task_id), batch, loss_kind)
    return loss, GradientSet(grads.layers[:-1]), grads.layers[-1]


def evaluate_accuracy(model: TILModel, task_id: int, batch: Batch) -> float:
    if batch.labels is None:
        raise ValueError("accuracy needs labels")
    if len(batch) == 0:
        raise ValueError("accuracy of an empty batch")
    logits = forward_task(model, task_id, batch)
    return float(np.mean(np.argmax(logits, axis=1) == batch.labels))


def param_count(model: TILModel) -> tuple[int, dict[int, int]]:
    """Exact parameter counts: (extractor total, per-head totals)."""
    extractor = sum(p.size for p in model.extractor.params)
    return extractor, {t: h.size for t, h in model.heads.items()}
