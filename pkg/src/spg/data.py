"""Task streams: synthetic Gaussian-cluster tasks and splits of IDX image files."""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .nn import Batch

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801

DISSIMILAR = "dissimilar"
SIMILAR = "similar"
SPLIT_IDX = "split_idx"

DEFAULT_SPLITS = (0.8, 0.1, 0.1)


class IdxFormatError(ValueError):
    """IDX file rejected; ``reason`` is one of bad_magic / truncated / count_mismatch."""

    def __init__(self, reason: str, message: str):
        super().__init__(message)
        self.reason = reason


@dataclass
class TaskDataset:
    task_id: int
    num_classes: int
    train: Batch
    val: Batch
    test: Batch

    def __post_init__(self):
        for name in ("train", "val", "test"):
            split = getattr(self, name)
            if split.labels is None:
                raise ValueError(f"{name} split needs labels")
            if len(split) and (split.labels.min() < 0 or split.labels.max() >= self.num_classes):
                raise ValueError(f"{name} labels outside [0, {self.num_classes})")

    @property
    def input_dim(self) -> int:
        return self.train.inputs.shape[1]


@dataclass
class TaskStream:
    tasks: list[TaskDataset]
    kind: str

    def __post_init__(self):
        if not self.tasks:
            raise ValueError("empty task stream")

    def __len__(self) -> int:
        return len(self.tasks)

    @property
    def input_dim(self) -> int:
        return self.tasks[0].input_dim


def _split_indices(n: int, splits: tuple[float, float, float],
                   rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    if abs(sum(splits) - 1.0) > 1e-9:
        raise ValueError(f"split fractions must sum to 1, got {splits}")
    order = rng.permutation(n)
    n_train = int(round(splits[0] * n))
    n_val = int(round(splits[1] * n))
    return order[:n_train], order[n_train : n_train + n_val], order[n_train + n_val :]


def _make_task(task_id: int, num_classes: int, per_class: list[np.ndarray],
               splits: tuple[float, float, float], rng: np.random.Generator) -> TaskDataset:
    # split each class separately so every split keeps the label balance
    parts = {name: ([], []) for name in ("train", "val", "test")}
    for label, xs in enumerate(per_class):
        idx_train, idx_val, idx_test = _split_indices(len(xs), splits, rng)
        for name, idx in (("train", idx_train), ("val", idx_val), ("test", idx_test)):
            parts[name][0].append(xs[idx])
            parts[name][1].append(np.full(len(idx), label, dtype=np.int64))
    batches = {}
    for name, (xs, ys) in parts.items():
        batches[name] = Batch(np.concatenate(xs), np.concatenate(ys))
    return TaskDataset(task_id, num_classes, batches["train"], batches["val"], batches["test"])


def gen_dissimilar_stream(n_tasks: int, classes_per_task: int, dim: int,
                          samples_per_class: int, seed: int, *,
                          sigma: float = 0.5,
                          splits: tuple[float, float, float] = DEFAULT_SPLITS) -> TaskStream:
    """Tasks with disjoint classes: fresh isotropic Gaussian clusters per task.

    Cluster means are uniform in [-3, 3]^dim, never reused across tasks, so
    later tasks share no class semantics with earlier ones.
    """
    if min(n_tasks, classes_per_task, dim, samples_per_class) <= 0:
        raise ValueError("all stream arguments must be positive")
    rng = np.random.default_rng(np.random.SeedSequence([int(seed)]))
    means = rng.uniform(-3.0, 3.0, size=(n_tasks * classes_per_task, dim))
    if len(np.unique(means, axis=0)) != len(means):
        raise AssertionError("cluster means collided; change the seed")

    tasks = []
    for t in range(n_tasks):
        per_class = []
        for c in range(classes_per_task):
            m = means[t * classes_per_task + c]
            per_class.append(m + sigma * rng.standard_normal((samples_per_class, dim)))
        tasks.append(_make_task(t, classes_per_task, per_class, splits, rng))
    return TaskStream(tasks, DISSIMILAR)


def _small_rotation(dim: int, drift: float, rng: np.random.Generator) -> np.ndarray:
    """Orthogonal matrix near the identity via the Cayley transform."""
    a = rng.standard_normal((dim, dim))
    skew = a - a.T
    norm = np.linalg.norm(skew)
    if norm == 0 or drift == 0:
        return np.eye(dim)
    b = (drift / norm) * skew
    eye = np.eye(dim)
    return np.linalg.solve(eye + b, eye - b)


def gen_similar_stream(n_tasks: int, classes: int, dim: int, samples_per_class: int,
                       seed: int, drift: float = 0.2, *, sigma: float = 0.5,
                       splits: tuple[float, float, float] = DEFAULT_SPLITS) -> TaskStream:
    """Tasks sharing one set of classes, each a slightly shifted realisation.

    Every task applies its own small rotation plus a per-class mean
    perturbation of magnitude <= drift to the shared cluster means; drift 0
    makes all tasks identically distributed.
    """
    if min(n_tasks, classes, dim, samples_per_class) <= 0:
        raise ValueError("all stream arguments must be positive")
    if drift < 0:
        raise ValueError(f"drift must be >= 0, got {drift}")
    rng = np.random.default_rng(np.random.SeedSequence([int(seed)]))
    base_means = rng.uniform(-3.0, 3.0, size=(classes, dim))

    tasks = []
    for t in range(n_tasks):
        rot = _small_rotation(dim, drift, rng)
        direction = rng.standard_normal((classes, dim))
        direction /= np.linalg.norm(direction, axis=1, keepdims=True)
        delta = drift * rng.uniform(0.0, 1.0, size=(classes, 1)) * direction
        task_means = base_means @ rot.T + delta
        per_class = [m + sigma * rng.standard_normal((samples_per_class, dim))
                     for m in task_means]
        tasks.append(_make_task(t, classes, per_class, splits, rng))
    return TaskStream(tasks, SIMILAR)


def _read_header(raw: bytes, path: str, magic: int, n_dims: int) -> tuple[tuple[int, ...], int]:
    header_len = 4 * (1 + n_dims)
    if len(raw) < header_len:
        raise IdxFormatError("truncated", f"{path}: header truncated at {len(raw)} bytes")
    fields = struct.unpack(f">{1 + n_dims}i", raw[:header_len])
    if fields[0] != magic:
        raise IdxFormatError(
            "bad_magic", f"{path}: magic 0x{fields[0]:08x}, expected 0x{magic:08x}")
    return tuple(fields[1:]), header_len


def load_idx(images_path: str, labels_path: str) -> tuple[np.ndarray, np.ndarray]:
    """(inputs, labels) from a big-endian IDX image/label file pair.

    Images are u8 pixels scaled to [0, 1] and flattened row-major to
    (n, rows*cols) float64; labels are u8 class indices.
    """
    with open(images_path, "rb") as f:
        raw = f.read()
    (n, rows, cols), offset = _read_header(raw, str(images_path), IDX_IMAGES_MAGIC, 3)
    payload = raw[offset:]
    if len(payload) != n * rows * cols:
        raise IdxFormatError(
            "truncated",
            f"{images_path}: payload {len(payload)} bytes, expected {n * rows * cols}")
    images = np.frombuffer(payload, dtype=np.uint8).reshape(n, rows * cols)
    inputs = images.astype(np.float64) / 255.0

    with open(labels_path, "rb") as f:
        raw = f.read()
    (n_labels,), offset = _read_header(raw, str(labels_path), IDX_LABELS_MAGIC, 1)
    payload = raw[offset:]
    if len(payload) != n_labels:
        raise IdxFormatError(
            "truncated", f"{labels_path}: payload {len(payload)} bytes, expected {n_labels}")
    if n_labels != n:
        raise IdxFormatError(
            "count_mismatch", f"{images_path} has {n} images but {labels_path} has "
            f"{n_labels} labels")
    labels = np.frombuffer(payload, dtype=np.uint8).astype(np.int64)
    return inputs, labels


def split_by_class(inputs: np.ndarray, labels: np.ndarray, n_tasks: int, seed: int, *,
                   splits: tuple[float, float, float] = DEFAULT_SPLITS) -> TaskStream:
    """Partition the label space into n_tasks contiguous chunks of classes.

    Class ids are shuffled once (seeded) before the contiguous partition, and
    labels are remapped to [0, classes_per_task) within each task.
    """
    inputs = np.asarray(inputs, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    class_ids = np.unique(labels)
    if len(class_ids) % n_tasks != 0:
        raise ValueError(f"{len(class_ids)} classes not divisible by {n_tasks} tasks")
    per_task = len(class_ids) // n_tasks
    rng = np.random.default_rng(np.random.SeedSequence([int(seed)]))
    shuffled = rng.permutation(class_ids)

    tasks = []
    for t in range(n_tasks):
        chunk = shuffled[t * per_task : (t + 1) * per_task]
        per_class = [inputs[labels == c] for c in chunk]
        tasks.append(_make_task(t, per_task, per_class, splits, rng))
    return TaskStream(tasks, SPLIT_IDX)
