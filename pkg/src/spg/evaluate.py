"""Continual-learning metrics, the pruning-validity experiment, and the
representation probe."""

from __future__ import annotations

import numpy as np

from . import model as model_mod
from . import nn
from .config import TrainConfig
from .data import TaskDataset
from .model import TILModel
from .nn import Batch, Network
from .seeding import PROBE, derived_rng

PRUNE_STRATEGIES = ("nothing", "lowest", "random", "highest")


class AccuracyMatrix:
    """alpha[i, j]: test accuracy of task i just after learning task j (i <= j)."""

    def __init__(self, n_tasks: int):
        if n_tasks < 1:
            raise ValueError(f"need at least one task, got {n_tasks}")
        self.n_tasks = n_tasks
        self.values = np.full((n_tasks, n_tasks), np.nan)

    def set(self, task: int, after: int, acc: float) -> None:
        if not 0 <= task <= after < self.n_tasks:
            raise ValueError(f"alpha[{task}, {after}] is outside the lower stream order")
        if not 0.0 <= acc <= 1.0:
            raise ValueError(f"accuracy {acc} outside [0, 1]")
        self.values[task, after] = acc

    def get(self, task: int, after: int) -> float:
        if not 0 <= task <= after < self.n_tasks:
            raise ValueError(f"alpha[{task}, {after}] is outside the lower stream order")
        return float(self.values[task, after])

    def is_complete(self) -> bool:
        i, j = np.tril_indices(self.n_tasks)
        return bool(np.isfinite(self.values[j, i]).all())

    def final_accuracies(self) -> np.ndarray:
        return self.values[:, self.n_tasks - 1].copy()

    def diagonal(self) -> np.ndarray:
        return np.diag(self.values).copy()

    def copy(self) -> "AccuracyMatrix":
        out = AccuracyMatrix(self.n_tasks)
        out.values = self.values.copy()
        return out


def avg_accuracy(matrix: AccuracyMatrix) -> float:
    """Mean accuracy over all tasks after the final task."""
    if not matrix.is_complete():
        raise ValueError("accuracy matrix is incomplete")
    return float(matrix.final_accuracies().mean())


def forward_transfer(matrix: AccuracyMatrix, one_reference: np.ndarray) -> float:
    """Mean over tasks of (accuracy just after learning - independent-model accuracy)."""
    beta = np.asarray(one_reference, dtype=np.float64)
    if beta.shape != (matrix.n_tasks,):
        raise ValueError(f"reference has shape {beta.shape}, need ({matrix.n_tasks},)")
    return float((matrix.diagonal() - beta).mean())


def backward_transfer(matrix: AccuracyMatrix) -> float | None:
    """Mean over earlier tasks of (final accuracy - accuracy when learned).

    Negative values mean forgetting; undefined (None) for a single task.
    """
    if matrix.n_tasks == 1:
        return None
    if not matrix.is_complete():
        raise ValueError("accuracy matrix is incomplete")
    final = matrix.final_accuracies()[:-1]
    diag = matrix.diagonal()[:-1]
    return float((final - diag).mean())


def prune_model(model: TILModel, importance_per_layer: list[np.ndarray],
                strategy: str, percent: float,
                rng: np.random.Generator | None = None) -> TILModel:
    """Copy of the model with a fraction of extractor parameters zeroed.

    Selection is a global rank over all extractor parameters: the lowest or
    highest importance entries, or a uniform random subset.
    """
    if strategy not in PRUNE_STRATEGIES:
        raise ValueError(f"strategy must be one of {PRUNE_STRATEGIES}, got {strategy!r}")
    pruned = model.copy()
    if strategy == "nothing":
        return pruned
    if not 0 < percent <= 100:
        raise ValueError(f"percent must be in (0, 100], got {percent}")

    flat = np.concatenate([v for v in importance_per_layer])
    sizes = [p.size for p in model.extractor.params]
    if flat.size != sum(sizes):
        raise ValueError(f"importance covers {flat.size} parameters, extractor has {sum(sizes)}")
    k = int(round(flat.size * percent / 100.0))
    if strategy == "lowest":
        chosen = np.argsort(flat, kind="stable")[:k]
    elif strategy == "highest":
        chosen = np.argsort(flat, kind="stable")[flat.size - k:]
    else:
        if rng is None:
            raise ValueError("random pruning needs an rng")
        chosen = rng.choice(flat.size, size=k, replace=False)

    keep = np.ones(flat.size)
    keep[chosen] = 0.0
    offset = 0
    for p in pruned.extractor.params:
        p.set_flat(p.flat() * keep[offset : offset + p.size])
        offset += p.size
    return pruned


def pruning_experiment(model: TILModel, task_id: int,
                       importance_per_layer: list[np.ndarray], strategy: str,
                       percent: float, test: Batch,
                       rng: np.random.Generator | None = None) -> float:
    """Test accuracy of the task after pruning; the source model is untouched."""
    pruned = prune_model(model, importance_per_layer, strategy, percent, rng)
    return model_mod.evaluate_accuracy(pruned, task_id, test)


def representation_probe(extractor: Network, probe_data: TaskDataset,
                         train: TrainConfig) -> float:
    """Test accuracy of a fresh linear head trained on the frozen extractor.

    Features are computed once (the extractor receives no gradient), then a
    single dense layer is fit with SGD and validation early stopping.
    """
    if probe_data.input_dim != extractor.in_dim:
        raise nn.ShapeError(
            f"probe data dim {probe_data.input_dim} != extractor input {extractor.in_dim}")

    def features(batch: Batch) -> np.ndarray:
        return nn.forward(extractor, Batch(batch.inputs))

    f_train = features(probe_data.train)
    f_val = features(probe_data.val)
    f_test = features(probe_data.test)

    rng = derived_rng(train.seed, PROBE, probe_data.task_id)
    head = nn.init_layer(f_train.shape[1], probe_data.num_classes, rng)
    head_net = Network([nn.Layer(head, nn.IDENTITY)])

    def acc(feats: np.ndarray, labels: np.ndarray) -> float:
        logits = nn.forward(head_net, Batch(feats))
        return float(np.mean(np.argmax(logits, axis=1) == labels))

    best_val, best_params, bad = -1.0, head.copy(), 0
    n = f_train.shape[0]
    for _ in range(train.epochs):
        order = rng.permutation(n)
        for start in range(0, n, train.batch_size):
            idx = order[start : start + train.batch_size]
            sub = Batch(f_train[idx], probe_data.train.labels[idx])
            _, grads = nn.backward(head_net, sub, nn.CROSS_ENTROPY)
            nn.sgd_step([head], grads, train.lr)
        val = acc(f_val, probe_data.val.labels)
        if val >= best_val:
            best_params = head.copy()
        if val > best_val:
            best_val, bad = val, 0
        else:
            bad += 1
            if bad >= train.patience:
                break
    head.weights, head.bias = best_params.weights, best_params.bias
    return acc(f_test, probe_data.test.labels)
