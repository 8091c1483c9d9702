"""Lossless run checkpoints: a JSON header line plus raw float64 arrays.

The header carries the manifest (array names and shapes) and every scalar of
the run's progress; the payload is the arrays' little-endian bytes in
manifest order. Round-trips are bitwise so a resumed run equals an
uninterrupted one.
"""

from __future__ import annotations

import json
import os

import numpy as np

from .importance import ChiStats, ImportanceState
from .model import TILModel
from .nn import Layer, LayerParams, Network, RELU
from .trainer import EwcState, RunSnapshot

FORMAT_NAME = "spg-checkpoint"
VERSION = 1

Checkpoint = RunSnapshot


class CheckpointError(RuntimeError):
    """Checkpoint rejected; ``reason`` is corrupt / hash_mismatch / incompatible."""

    def __init__(self, reason: str, message: str):
        super().__init__(message)
        self.reason = reason


def _chi_to_json(chi: ChiStats | None):
    if chi is None:
        return None
    return {"f_each": chi.f_each, "g_each": chi.g_each, "f_total": chi.f_total,
            "g_total": chi.g_total, "g_each_empty": chi.g_each_empty,
            "g_total_empty": chi.g_total_empty}


def _chi_from_json(obj) -> ChiStats | None:
    if obj is None:
        return None
    return ChiStats(obj["f_each"], obj["g_each"], obj["f_total"], obj["g_total"],
                    obj["g_each_empty"], obj["g_total_empty"])


def save_checkpoint(path: str, snap: RunSnapshot) -> None:
    arrays: list[tuple[str, np.ndarray]] = []
    for i, p in enumerate(snap.model.extractor.params):
        arrays.append((f"extractor/{i}/weights", p.weights))
        arrays.append((f"extractor/{i}/bias", p.bias))
    for t in sorted(snap.model.heads):
        h = snap.model.heads[t]
        arrays.append((f"head/{t}/weights", h.weights))
        arrays.append((f"head/{t}/bias", h.bias))
    if snap.importance_state is not None:
        for i, v in enumerate(snap.importance_state.per_layer):
            arrays.append((f"importance/{i}", v))
    if snap.ewc_state is not None:
        for i, v in enumerate(snap.ewc_state.anchor):
            arrays.append((f"ewc/anchor/{i}", v))
        for i, v in enumerate(snap.ewc_state.omega):
            arrays.append((f"ewc/omega/{i}", v))
    arrays.append(("matrix", snap.matrix_values))

    header = {
        "format": FORMAT_NAME,
        "version": VERSION,
        "method": snap.method_label,
        "seed": snap.seed,
        "config_hash": snap.config_hash,
        "n_tasks": snap.n_tasks,
        "tasks_done": snap.tasks_done,
        "head_ids": sorted(snap.model.heads),
        "importance": None if snap.importance_state is None else {
            "tasks_seen": snap.importance_state.tasks_seen,
            "mean_importance": snap.importance_state.mean_importance,
        },
        "has_ewc": snap.ewc_state is not None,
        "blocked_history": snap.blocked_history,
        "chi_history": [_chi_to_json(c) for c in snap.chi_history],
        "epochs_history": snap.epochs_history,
        "mean_history": snap.mean_history,
        "arrays": [{"name": name, "shape": list(a.shape)} for name, a in arrays],
    }
    with open(path, "wb") as f:
        f.write(json.dumps(header, sort_keys=True).encode() + b"\n")
        for _, a in arrays:
            f.write(np.ascontiguousarray(a, dtype="<f8").tobytes())


def load_checkpoint(path: str) -> RunSnapshot:
    try:
        with open(path, "rb") as f:
            raw = f.read()
    except OSError as e:
        raise CheckpointError("corrupt", f"cannot read {path}: {e}") from e
    newline = raw.find(b"\n")
    if newline < 0:
        raise CheckpointError("corrupt", f"{path}: no header line")
    try:
        header = json.loads(raw[:newline].decode())
    except (json.JSONDecodeError, UnicodeDecodeError) as e:
        raise CheckpointError("corrupt", f"{path}: unreadable header: {e}") from e
    if header.get("format") != FORMAT_NAME or header.get("version") != VERSION:
        raise CheckpointError("corrupt", f"{path}: not a version-{VERSION} checkpoint")

    payload = raw[newline + 1 :]
    manifest = header["arrays"]
    expected = sum(int(np.prod(entry["shape"])) for entry in manifest) * 8
    if len(payload) != expected:
        raise CheckpointError(
            "corrupt", f"{path}: payload {len(payload)} bytes, manifest needs {expected}")

    arrays: dict[str, np.ndarray] = {}
    offset = 0
    for entry in manifest:
        count = int(np.prod(entry["shape"]))
        vec = np.frombuffer(payload, dtype="<f8", count=count, offset=offset)
        arrays[entry["name"]] = vec.reshape(entry["shape"]).copy()
        offset += count * 8

    n_layers = len([k for k in arrays if k.startswith("extractor/") and k.endswith("/weights")])
    layers = [Layer(LayerParams(arrays[f"extractor/{i}/weights"], arrays[f"extractor/{i}/bias"]),
                    RELU) for i in range(n_layers)]
    heads = {t: LayerParams(arrays[f"head/{t}/weights"], arrays[f"head/{t}/bias"])
             for t in header["head_ids"]}
    model = TILModel(Network(layers), heads)

    state = None
    if header["importance"] is not None:
        per_layer = [arrays[f"importance/{i}"] for i in range(n_layers)]
        state = ImportanceState(per_layer, header["importance"]["tasks_seen"],
                                header["importance"]["mean_importance"])
    ewc = None
    if header["has_ewc"]:
        ewc = EwcState([arrays[f"ewc/anchor/{i}"] for i in range(n_layers)],
                       [arrays[f"ewc/omega/{i}"] for i in range(n_layers)])

    blocked = [None if b is None else (list(b[0]), float(b[1]))
               for b in header["blocked_history"]]
    return RunSnapshot(
        method_label=header["method"], seed=header["seed"],
        config_hash=header["config_hash"], n_tasks=header["n_tasks"],
        tasks_done=header["tasks_done"], model=model, importance_state=state,
        ewc_state=ewc, matrix_values=arrays["matrix"], blocked_history=blocked,
        chi_history=[_chi_from_json(c) for c in header["chi_history"]],
        epochs_history=list(header["epochs_history"]),
        mean_history=list(header["mean_history"]))


def check_compatible(snap: RunSnapshot, config_hash: str, method_label: str,
                     seed: int, path: str = "<checkpoint>") -> None:
    if snap.config_hash != config_hash:
        raise CheckpointError(
            "hash_mismatch",
            f"{path}: was written under config {snap.config_hash[:12]}..., the current "
            f"config hashes to {config_hash[:12]}...; refusing to resume")
    if snap.method_label != method_label or snap.seed != seed:
        raise CheckpointError(
            "incompatible",
            f"{path}: belongs to ({snap.method_label}, seed {snap.seed}), "
            f"not ({method_label}, seed {seed})")
