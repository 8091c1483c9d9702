"""The continual training loop and its baselines.

One run walks the task stream in order: add a head, train with the method's
gradient transform, then (for the soft/hard-masking family) recompute and
accumulate parameter importance. NCL trains with no transform, ONE trains a
fresh model per task, MTL trains all tasks jointly, and the EWC variants add
a quadratic penalty on anchored parameters instead of masking gradients.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import importance as imp_mod
from . import masking
from . import model as model_mod
from . import nn
from . import seeding
from .config import Method, TrainConfig
from .data import TaskDataset, TaskStream
from .evaluate import AccuracyMatrix
from .importance import ChiStats, ImportanceState, TaskImportance
from .model import TILModel
from .nn import Batch, GradientSet, LayerParams, ShapeError


@dataclass
class EwcState:
    """Anchored extractor parameters and per-parameter penalty weights."""

    anchor: list[np.ndarray]
    omega: list[np.ndarray]

    def copy(self) -> "EwcState":
        return EwcState([a.copy() for a in self.anchor], [o.copy() for o in self.omega])


@dataclass
class TrainLog:
    train_losses: list[float] = field(default_factory=list)
    val_accuracies: list[float] = field(default_factory=list)
    best_epoch: int = 0

    @property
    def epochs_run(self) -> int:
        return len(self.train_losses)


@dataclass
class RunSnapshot:
    """Everything needed to resume a run at a task boundary."""

    method_label: str
    seed: int
    config_hash: str
    n_tasks: int
    tasks_done: int
    model: TILModel
    importance_state: ImportanceState | None
    ewc_state: EwcState | None
    matrix_values: np.ndarray
    blocked_history: list
    chi_history: list
    epochs_history: list[int]
    mean_history: list


@dataclass
class RunResult:
    method: Method
    seed: int
    n_tasks: int
    matrix: AccuracyMatrix
    importance_history: list[ImportanceState | None]
    blocked_history: list
    chi_history: list
    epochs_history: list[int]
    mean_history: list
    model: TILModel
    importance_state: ImportanceState | None
    ewc_state: EwcState | None


def ewc_penalty_grad(params: Sequence[LayerParams], state: EwcState,
                     lam: float) -> tuple[float, GradientSet]:
    """Quadratic penalty (lam/2) * sum omega * (theta - anchor)^2 and its gradient."""
    if lam <= 0:
        raise ValueError(f"lambda must be positive, got {lam}")
    if len(state.anchor) != len(params):
        raise ShapeError(f"{len(params)} layers vs {len(state.anchor)} anchors")
    penalty = 0.0
    grads = []
    for p, anchor, omega in zip(params, state.anchor, state.omega):
        flat = p.flat()
        if flat.shape != anchor.shape or flat.shape != omega.shape:
            raise ShapeError(f"anchor/omega shape {anchor.shape} != layer size {flat.shape}")
        diff = flat - anchor
        penalty += 0.5 * lam * float(np.dot(omega * diff, diff))
        g = LayerParams(np.zeros_like(p.weights), np.zeros_like(p.bias))
        g.set_flat(lam * omega * diff)
        grads.append(g)
    return penalty, GradientSet(grads)


def _snapshot_params(model: TILModel, task_id: int):
    return ([p.copy() for p in model.extractor.params], model.heads[task_id].copy())


def _restore_params(model: TILModel, task_id: int, snap) -> None:
    ext, head = snap
    for p, s in zip(model.extractor.params, ext):
        p.weights = s.weights.copy()
        p.bias = s.bias.copy()
    model.heads[task_id].weights = head.weights.copy()
    model.heads[task_id].bias = head.bias.copy()


def train_task(model: TILModel, task_id: int, dataset: TaskDataset, cfg: TrainConfig,
               method: Method, rng: np.random.Generator, *,
               importance_state: ImportanceState | None = None,
               ewc_state: EwcState | None = None) -> TrainLog:
    """SGD epochs on one task with the method's gradient transform.

    Stops early when validation accuracy has not improved for ``patience``
    epochs, then restores the best-validation parameters.
    """
    if method.is_spg_family and importance_state is None:
        raise ValueError(f"{method.label} needs an importance state")

    hard_masks = None
    if method.tag == "SPG_HARD":
        hard_masks = masking.harden(importance_state, method.threshold)

    def transform_extractor(grads: GradientSet) -> GradientSet:
        if hard_masks is not None:
            return masking.hard_mask_extractor(grads, hard_masks)
        if method.is_spg_family:
            return masking.soft_mask_extractor(grads, importance_state)
        return grads

    mask_head = method.is_spg_family and method.tag != "SPG_NO_SMH"
    use_penalty = method.is_ewc_family and ewc_state is not None

    head = model.heads[task_id]
    train = dataset.train
    n = len(train)
    log = TrainLog()
    best_val, best_snap, bad = -1.0, _snapshot_params(model, task_id), 0

    for epoch in range(cfg.epochs):
        order = rng.permutation(n)
        loss_sum = 0.0
        n_batches = 0
        for start in range(0, n, cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            sub = Batch(train.inputs[idx], train.labels[idx])
            loss, ext_grads, head_grad = model_mod.backward_task(
                model, task_id, sub, nn.CROSS_ENTROPY)
            loss_sum += loss
            n_batches += 1
            if use_penalty:
                _, pen = ewc_penalty_grad(model.extractor.params, ewc_state, method.lam)
                for g, p in zip(ext_grads.layers, pen.layers):
                    g.weights += p.weights
                    g.bias += p.bias
            ext_grads = transform_extractor(ext_grads)
            if mask_head:
                head_grad = masking.soft_mask_head(head_grad, importance_state.mean_importance)
            nn.sgd_step(model.extractor.params, ext_grads, cfg.lr)
            nn.sgd_step([head], GradientSet([head_grad]), cfg.lr)

        log.train_losses.append(loss_sum / n_batches)
        val = model_mod.evaluate_accuracy(model, task_id, dataset.val)
        log.val_accuracies.append(val)
        # keep the latest params among tied-best epochs; stop only when
        # validation has not strictly improved for `patience` epochs
        if val >= best_val:
            best_snap = _snapshot_params(model, task_id)
            log.best_epoch = epoch
        if val > best_val:
            best_val, bad = val, 0
        else:
            bad += 1
            if bad >= cfg.patience:
                break

    _restore_params(model, task_id, best_snap)
    return log


def _evaluate_row(model: TILModel, stream: TaskStream, upto: int,
                  matrix: AccuracyMatrix) -> None:
    for tau in range(upto + 1):
        matrix.set(tau, upto, model_mod.evaluate_accuracy(model, tau, stream.tasks[tau].test))


def _after_task_update(method: Method, model: TILModel, task: TaskDataset,
                       state: ImportanceState | None, ewc_state: EwcState | None,
                       batch_size: int, blocked_eps: float):
    """Post-task importance bookkeeping for the masking and EWC families."""
    blocked = chi = None
    new_state, new_ewc = state, ewc_state
    t = task.task_id

    if method.is_spg_family or method.tag == "EWC_GI":
        if method.tag in ("SPG_FI",):
            ti = imp_mod.fisher_importance(model, t, task.train)
        else:
            ti = imp_mod.compute_task_importance(
                model, t, task.train, chi_enabled=method.uses_chi, batch_size=batch_size)
        if method.uses_chi and ti.per_head is not None and len(ti.per_head) > 1:
            previous = {tau: v for tau, v in ti.per_head.items() if tau < t}
            chi = imp_mod.chi_overwrite_stats(ti.per_head[t], previous, state.per_layer)
        new_state = imp_mod.accumulate(state, ti)
        blocked = masking.blocked_fraction(new_state, blocked_eps)
        if method.tag == "EWC_GI":
            new_ewc = EwcState([p.flat() for p in model.extractor.params],
                               [v.copy() for v in new_state.per_layer])
    elif method.tag == "EWC_FI":
        ti = imp_mod.fisher_importance(model, t, task.train)
        if ewc_state is None:
            omega = [v.copy() for v in ti.per_layer]
        else:
            omega = [o + v for o, v in zip(ewc_state.omega, ti.per_layer)]
        new_ewc = EwcState([p.flat() for p in model.extractor.params], omega)

    return new_state, new_ewc, blocked, chi


def run_continual(stream: TaskStream, method: Method, cfg: TrainConfig,
                  hidden: Sequence[int], *, blocked_eps: float = 1e-6,
                  after_task: Callable[[int, TILModel, ImportanceState | None], None] | None = None,
                  snapshot_hook: Callable[[RunSnapshot], None] | None = None,
                  resume_from: RunSnapshot | None = None,
                  config_hash: str = "",
                  stop_after: int | None = None) -> RunResult:
    """Walk the stream with the given method, producing the accuracy matrix
    and the per-task importance/blocked/overwrite histories."""
    if method.tag == "ONE":
        return _run_one(stream, method, cfg, hidden, config_hash=config_hash)
    if method.tag == "MTL":
        return _run_mtl(stream, method, cfg, hidden, config_hash=config_hash)

    n_tasks = len(stream)
    seed = cfg.seed
    needs_state = method.is_spg_family or method.tag == "EWC_GI"

    if resume_from is not None:
        if resume_from.method_label != method.label or resume_from.seed != seed:
            raise ValueError("snapshot belongs to a different (method, seed)")
        if config_hash and resume_from.config_hash != config_hash:
            raise ValueError("snapshot was produced under a different config")
        model = resume_from.model.copy()
        state = None if resume_from.importance_state is None else resume_from.importance_state.copy()
        ewc_state = None if resume_from.ewc_state is None else resume_from.ewc_state.copy()
        matrix = AccuracyMatrix(n_tasks)
        matrix.values = resume_from.matrix_values.copy()
        blocked_history = list(resume_from.blocked_history)
        chi_history = list(resume_from.chi_history)
        epochs_history = list(resume_from.epochs_history)
        mean_history = list(resume_from.mean_history)
        importance_history: list[ImportanceState | None] = [None] * resume_from.tasks_done
        start = resume_from.tasks_done
    else:
        model = model_mod.build_model(stream.input_dim, list(hidden),
                                      seeding.derived_rng(seed, seeding.INIT))
        state = imp_mod.zero_state(model) if needs_state else None
        ewc_state = None
        matrix = AccuracyMatrix(n_tasks)
        blocked_history, chi_history, epochs_history, mean_history = [], [], [], []
        importance_history = []
        start = 0

    for t in range(start, n_tasks):
        task = stream.tasks[t]
        rng = seeding.derived_rng(seed, seeding.TASK, t)
        model_mod.add_head(model, t, task.num_classes, rng)
        log = train_task(model, t, task, cfg, method, rng,
                         importance_state=state, ewc_state=ewc_state)
        state, ewc_state, blocked, chi = _after_task_update(
            method, model, task, state, ewc_state, cfg.batch_size, blocked_eps)
        _evaluate_row(model, stream, t, matrix)

        epochs_history.append(log.epochs_run)
        blocked_history.append(blocked)
        chi_history.append(chi)
        mean_history.append(None if state is None else state.mean_importance)
        importance_history.append(state.copy() if state is not None else None)
        if after_task is not None:
            after_task(t, model, state)
        if snapshot_hook is not None:
            snapshot_hook(RunSnapshot(
                method.label, seed, config_hash, n_tasks, t + 1, model.copy(),
                None if state is None else state.copy(),
                None if ewc_state is None else ewc_state.copy(),
                matrix.values.copy(), list(blocked_history), list(chi_history),
                list(epochs_history), list(mean_history)))
        if stop_after is not None and t == stop_after:
            break

    return RunResult(method, seed, n_tasks, matrix, importance_history,
                     blocked_history, chi_history, epochs_history, mean_history,
                     model, state, ewc_state)


def _run_one(stream: TaskStream, method: Method, cfg: TrainConfig,
             hidden: Sequence[int], *, config_hash: str = "") -> RunResult:
    """Independent model per task; its diagonal is the forward-transfer reference."""
    n_tasks = len(stream)
    matrix = AccuracyMatrix(n_tasks)
    epochs_history = []
    last_model = None
    accs = []
    for t, task in enumerate(stream.tasks):
        model = model_mod.build_model(stream.input_dim, list(hidden),
                                      seeding.derived_rng(cfg.seed, seeding.ONE_MODEL, t))
        rng = seeding.derived_rng(cfg.seed, seeding.TASK, t)
        model_mod.add_head(model, t, task.num_classes, rng)
        log = train_task(model, t, task, cfg, Method("NCL"), rng)
        epochs_history.append(log.epochs_run)
        accs.append(model_mod.evaluate_accuracy(model, t, task.test))
        last_model = model
        # a task's model is never revisited: its accuracy never changes
        for after in range(t, n_tasks):
            matrix.set(t, after, accs[t])
    return RunResult(method, cfg.seed, n_tasks, matrix, [None] * n_tasks,
                     [None] * n_tasks, [None] * n_tasks, epochs_history,
                     [None] * n_tasks, last_model, None, None)


def one_reference(stream: TaskStream, cfg: TrainConfig,
                  hidden: Sequence[int]) -> tuple[np.ndarray, RunResult]:
    """Per-task accuracies of the independent-model reference."""
    result = _run_one(stream, Method("ONE"), cfg, hidden)
    return result.matrix.diagonal(), result


def _run_mtl(stream: TaskStream, method: Method, cfg: TrainConfig,
             hidden: Sequence[int], *, config_hash: str = "") -> RunResult:
    """Joint training on all tasks; batch size scales with the task count."""
    n_tasks = len(stream)
    seed = cfg.seed
    model = model_mod.build_model(stream.input_dim, list(hidden),
                                  seeding.derived_rng(seed, seeding.INIT))
    for t, task in enumerate(stream.tasks):
        model_mod.add_head(model, t, task.num_classes,
                           seeding.derived_rng(seed, seeding.TASK, t))

    inputs = np.concatenate([task.train.inputs for task in stream.tasks])
    labels = np.concatenate([task.train.labels for task in stream.tasks])
    task_of = np.concatenate([np.full(len(task.train), t, dtype=np.int64)
                              for t, task in enumerate(stream.tasks)])
    n = len(inputs)
    batch_size = cfg.batch_size * n_tasks
    rng = seeding.derived_rng(seed, seeding.MTL)

    def snapshot():
        return ([p.copy() for p in model.extractor.params],
                {t: h.copy() for t, h in model.heads.items()})

    def restore(snap):
        ext, heads = snap
        for p, s in zip(model.extractor.params, ext):
            p.weights, p.bias = s.weights.copy(), s.bias.copy()
        for t, h in heads.items():
            model.heads[t].weights, model.heads[t].bias = h.weights.copy(), h.bias.copy()

    def mean_val_accuracy() -> float:
        return float(np.mean([model_mod.evaluate_accuracy(model, t, task.val)
                              for t, task in enumerate(stream.tasks)]))

    best_val, best_snap, bad = -1.0, snapshot(), 0
    log = TrainLog()
    for epoch in range(cfg.epochs):
        order = rng.permutation(n)
        loss_sum, n_batches = 0.0, 0
        for start in range(0, n, batch_size):
            idx = order[start : start + batch_size]
            total = len(idx)
            ext_acc = GradientSet([LayerParams(np.zeros_like(p.weights), np.zeros_like(p.bias))
                                   for p in model.extractor.params])
            head_grads: dict[int, LayerParams] = {}
            batch_loss = 0.0
            for t in np.unique(task_of[idx]):
                sel = idx[task_of[idx] == t]
                share = len(sel) / total
                sub = Batch(inputs[sel], labels[sel])
                loss, ext_grads, head_grad = model_mod.backward_task(
                    model, int(t), sub, nn.CROSS_ENTROPY)
                batch_loss += share * loss
                for acc, g in zip(ext_acc.layers, ext_grads.layers):
                    acc.weights += share * g.weights
                    acc.bias += share * g.bias
                head_grads[int(t)] = LayerParams(share * head_grad.weights,
                                                 share * head_grad.bias)
            nn.sgd_step(model.extractor.params, ext_acc, cfg.lr)
            for t, g in head_grads.items():
                nn.sgd_step([model.heads[t]], GradientSet([g]), cfg.lr)
            loss_sum += batch_loss
            n_batches += 1
        log.train_losses.append(loss_sum / n_batches)
        val = mean_val_accuracy()
        log.val_accuracies.append(val)
        if val >= best_val:
            best_snap = snapshot()
            log.best_epoch = epoch
        if val > best_val:
            best_val, bad = val, 0
        else:
            bad += 1
            if bad >= cfg.patience:
                break
    restore(best_snap)

    matrix = AccuracyMatrix(n_tasks)
    for t, task in enumerate(stream.tasks):
        acc = model_mod.evaluate_accuracy(model, t, task.test)
        # joint training is a reference point, not a sequential run: the
        # matrix is constant along the learning axis
        for after in range(t, n_tasks):
            matrix.set(t, after, acc)
    return RunResult(method, seed, n_tasks, matrix, [None] * n_tasks,
                     [None] * n_tasks, [None] * n_tasks, [log.epochs_run] * n_tasks,
                     [None] * n_tasks, model, None, None)


def fit_single_task(task: TaskDataset, cfg: TrainConfig,
                    hidden: Sequence[int]) -> tuple[TILModel, TaskImportance, TrainLog]:
    """Train a fresh model on one task and compute its importance (no CHI).

    This is the setting of the pruning-validity experiment: a single task,
    no continual learning.
    """
    model = model_mod.build_model(task.input_dim, list(hidden),
                                  seeding.derived_rng(cfg.seed, seeding.INIT))
    rng = seeding.derived_rng(cfg.seed, seeding.TASK, task.task_id)
    model_mod.add_head(model, task.task_id, task.num_classes, rng)
    log = train_task(model, task.task_id, task, cfg, Method("NCL"), rng)
    ti = imp_mod.compute_task_importance(model, task.task_id, task.train,
                                         chi_enabled=False, batch_size=cfg.batch_size)
    return model, ti, log
