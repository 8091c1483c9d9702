"""Per-parameter importance from gradients, and its accumulation across tasks.

A layer's importance is |tanh(Norm(g))| where Norm standardises the layer's
gradient vector (weights and bias together) to mean 0, population variance 1.
Importance for a task is the elementwise max over gradients taken through the
current head (labelled loss) and, when cross-head importance is enabled, every
previous head (logit-sum loss on the current task's inputs). Across tasks the
importance accumulates by elementwise max, starting from all zeros.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import model as model_mod
from . import nn
from .nn import Batch, GradientSet, ShapeError
from .model import TILModel

# Below this variance the layer gradient carries no relative signal and is
# treated as degenerate (importance 0) instead of dividing by ~0. The same
# factor is also applied relative to the gradient's mean square, so an
# all-equal vector stays degenerate at any magnitude: its float variance is
# rounding noise that scales with the values.
DEGENERATE_VARIANCE = 1e-24


@dataclass
class ImportanceState:
    """Accumulated per-layer importance for the extractor, in [0, 1].

    Entries are < 1 analytically; exactly 1.0 only via float tanh saturation.
    mean_importance caches the mean over every entry of every layer.
    """

    per_layer: list[np.ndarray]
    tasks_seen: int = 0
    mean_importance: float = 0.0

    def copy(self) -> "ImportanceState":
        return ImportanceState([v.copy() for v in self.per_layer],
                               self.tasks_seen, self.mean_importance)


@dataclass
class TaskImportance:
    """Importance of one task's parameters (post max over heads).

    per_head keeps the per-head components (head task id -> per-layer vectors)
    when cross-head importance ran, for the overwrite statistics.
    """

    per_layer: list[np.ndarray]
    per_head: dict[int, list[np.ndarray]] | None = None


@dataclass
class ChiStats:
    """How often/much cross-head importance overwrites other importances.

    f_each / g_each compare against the current task's own importance,
    f_total / g_total against the previously accumulated importance. The gap
    means are over the triggering subsets only; when a subset is empty the
    gap is reported as 0.0 with the matching *_empty flag set.
    """

    f_each: float
    g_each: float
    f_total: float
    g_total: float
    g_each_empty: bool = False
    g_total_empty: bool = False


def zero_state(model: TILModel) -> ImportanceState:
    return ImportanceState([np.zeros(p.size) for p in model.extractor.params])


def layer_normalize(g: np.ndarray) -> np.ndarray:
    """(g - mean) / sqrt(population variance); zeros when variance is degenerate."""
    g = np.asarray(g, dtype=np.float64)
    if g.ndim != 1 or g.size == 0:
        raise ValueError(f"expected a non-empty vector, got shape {g.shape}")
    var = g.var()
    if var < DEGENERATE_VARIANCE or var <= DEGENERATE_VARIANCE * np.mean(g * g):
        return np.zeros_like(g)
    return (g - g.mean()) / np.sqrt(var)


def raw_importance(g: np.ndarray) -> np.ndarray:
    """|tanh(Norm(g))| elementwise; values in [0, 1)."""
    return np.abs(np.tanh(layer_normalize(g)))


def _check_congruent(state: ImportanceState, vectors: list[np.ndarray]) -> None:
    if len(state.per_layer) != len(vectors):
        raise ShapeError(f"{len(vectors)} layers vs state's {len(state.per_layer)}")
    for i, (a, b) in enumerate(zip(state.per_layer, vectors)):
        if a.shape != b.shape:
            raise ShapeError(f"layer {i}: shape {b.shape} != state's {a.shape}")


def importance_gradient(model: TILModel, head_task: int, batch: Batch,
                        current_task: int, batch_size: int = 64) -> GradientSet:
    """Extractor gradients of the importance loss through one head.

    Through the current task's head the loss is cross entropy on the task's
    labels; through a previous head it is the logit sum, treating the current
    inputs as unlabelled probes of that head. The gradient is accumulated over
    the whole dataset in fixed-order mini-batches: summed, then divided by the
    number of batches. No parameters are updated.
    """
    if head_task not in model.heads:
        raise ValueError(f"no head for task {head_task}")
    if head_task > current_task:
        raise ValueError(f"head task {head_task} is later than current task {current_task}")
    loss_kind = nn.CROSS_ENTROPY if head_task == current_task else nn.LOGIT_SUM
    n = len(batch)
    if n == 0:
        raise ValueError("importance gradient of an empty dataset")

    total: GradientSet | None = None
    n_batches = 0
    for start in range(0, n, batch_size):
        sl = slice(start, min(start + batch_size, n))
        labels = batch.labels[sl] if batch.labels is not None else None
        sub = Batch(batch.inputs[sl], labels)
        _, grads, _ = model_mod.backward_task(model, head_task, sub, loss_kind)
        n_batches += 1
        if total is None:
            total = grads
        else:
            for t, g in zip(total.layers, grads.layers):
                t.weights += g.weights
                t.bias += g.bias
    assert total is not None
    for t in total.layers:
        t.weights /= n_batches
        t.bias /= n_batches
    return total


def compute_task_importance(model: TILModel, task_id: int, batch: Batch,
                            chi_enabled: bool, batch_size: int = 64) -> TaskImportance:
    """Importance of the just-trained task's parameters.

    With cross-head importance enabled, takes the elementwise max over the
    importance computed through every head up to and including the current
    one; otherwise only the current head contributes.
    """
    if task_id not in model.heads:
        raise ValueError(f"no head for task {task_id}")
    heads = sorted(t for t in model.heads if t <= task_id) if chi_enabled else [task_id]

    per_head: dict[int, list[np.ndarray]] = {}
    for tau in heads:
        grads = importance_gradient(model, tau, batch, task_id, batch_size)
        per_head[tau] = [raw_importance(g.flat()) for g in grads.layers]

    combined = [np.maximum.reduce([per_head[tau][i] for tau in heads])
                for i in range(len(model.extractor.params))]
    return TaskImportance(combined, per_head if chi_enabled else None)


def accumulate(state: ImportanceState, task_importance: TaskImportance) -> ImportanceState:
    """Elementwise running max of importance; the only cross-task state kept."""
    _check_congruent(state, task_importance.per_layer)
    merged = [np.maximum(s, t) for s, t in zip(state.per_layer, task_importance.per_layer)]
    mean = float(np.concatenate(merged).mean())
    return ImportanceState(merged, state.tasks_seen + 1, mean)


def fisher_importance(model: TILModel, task_id: int, batch: Batch,
                      ) -> TaskImportance:
    """Diagonal empirical Fisher squashed through the same |tanh(Norm(.))| map.

    Fisher entries are the mean over samples of squared per-sample
    cross-entropy gradients, so the variant stays a drop-in replacement for
    the gradient-based importance with the same [0, 1) range.
    """
    if task_id not in model.heads:
        raise ValueError(f"no head for task {task_id}")
    if batch.labels is None:
        raise ValueError("fisher importance needs labels")
    n = len(batch)
    if n == 0:
        raise ValueError("fisher importance of an empty dataset")

    fisher = [np.zeros(p.size) for p in model.extractor.params]
    for k in range(n):
        sample = Batch(batch.inputs[k : k + 1], batch.labels[k : k + 1])
        _, grads, _ = model_mod.backward_task(model, task_id, sample, nn.CROSS_ENTROPY)
        for f, g in zip(fisher, grads.layers):
            f += g.flat() ** 2
    per_layer = [raw_importance(f / n) for f in fisher]
    return TaskImportance(per_layer, None)


def chi_overwrite_stats(current: list[np.ndarray],
                        previous_heads: dict[int, list[np.ndarray]],
                        accumulated: list[np.ndarray]) -> ChiStats:
    """Overwrite frequency/gap of cross-head importance vs the current task's
    own importance (each) and vs the accumulated importance (total)."""
    if not previous_heads:
        raise ValueError("overwrite statistics need at least one previous head")

    cur = np.concatenate(current)
    acc = np.concatenate(accumulated)
    chi = np.maximum.reduce([np.concatenate(v) for v in previous_heads.values()])
    if chi.shape != cur.shape or acc.shape != cur.shape:
        raise ShapeError("importance vectors disagree in total length")

    each = chi > cur
    total = chi > acc
    f_each = float(each.mean())
    f_total = float(total.mean())
    g_each = float((chi[each] - cur[each]).mean()) if each.any() else 0.0
    g_total = float((chi[total] - acc[total]).mean()) if total.any() else 0.0
    return ChiStats(f_each, g_each, f_total, g_total,
                    g_each_empty=not each.any(), g_total_empty=not total.any())
