"""Command-line entry points: run, prune, probe.

Every output is a deterministic function of (config, seed): records carry no
timestamps, floats are written with round-trippable repr, and files are
emitted in a fixed order regardless of worker scheduling.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import os
import sys
import traceback
from concurrent.futures import ThreadPoolExecutor

import numpy as np

from . import checkpoint as ckpt_mod
from . import evaluate as eval_mod
from . import seeding
from . import trainer as trainer_mod
from .config import ConfigError, Method, RunConfig, load_config
from .evaluate import PRUNE_STRATEGIES
from .model import TILModel, param_count
from .trainer import RunResult, run_continual

THREADS_ENV = "SPG_THREADS"

AGGREGATE_COLUMNS = ("method", "n_seeds", "accuracy_mean", "accuracy_std",
                     "fwt_mean", "fwt_std", "bwt_mean", "bwt_std")
BLOCKED_COLUMNS = ("task", "layer", "fraction")
PRUNE_COLUMNS = ("seed", "strategy", "percent", "accuracy", "chance")
PROBE_COLUMNS = ("method", "seed", "tasks_learned", "probe_accuracy")


def _chi_json(chi):
    return None if chi is None else ckpt_mod._chi_to_json(chi)


def build_record(result: RunResult, beta: np.ndarray) -> dict:
    matrix = result.matrix
    ext_count, head_counts = param_count(result.model)
    bwt = eval_mod.backward_transfer(matrix)
    per_task = []
    for t in range(result.n_tasks):
        blocked = result.blocked_history[t]
        per_task.append({
            "task": t,
            "accuracy": matrix.get(t, t),
            "epochs": result.epochs_history[t],
            "mean_importance": result.mean_history[t],
            "blocked_per_layer": None if blocked is None else list(blocked[0]),
            "blocked_total": None if blocked is None else blocked[1],
            "chi": _chi_json(result.chi_history[t]),
        })
    values = matrix.values
    return {
        "method": result.method.label,
        "seed": result.seed,
        "n_tasks": result.n_tasks,
        "accuracy_matrix": [[values[i, j] if i <= j else None
                             for j in range(result.n_tasks)]
                            for i in range(result.n_tasks)],
        "avg_accuracy": eval_mod.avg_accuracy(matrix),
        "forward_transfer": eval_mod.forward_transfer(matrix, beta),
        "backward_transfer": bwt,
        "one_reference": [float(b) for b in beta],
        "param_counts": {"extractor": ext_count,
                         "heads": {str(t): c for t, c in sorted(head_counts.items())}},
        "per_task": per_task,
    }


def write_json(path: str, obj: dict) -> None:
    with open(path, "w") as f:
        json.dump(obj, f, sort_keys=True, indent=2)
        f.write("\n")


def write_csv(path: str, columns: tuple[str, ...], rows: list[tuple]) -> None:
    with open(path, "w", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(columns)
        writer.writerows(rows)


def blocked_rows(result: RunResult) -> list[tuple]:
    rows = []
    for t, blocked in enumerate(result.blocked_history):
        if blocked is None:
            continue
        per_layer, total = blocked
        for i, frac in enumerate(per_layer):
            rows.append((t, i, repr(float(frac))))
        rows.append((t, "total", repr(float(total))))
    return rows


def extractor_hash(model: TILModel) -> str:
    h = hashlib.sha256()
    for p in model.extractor.params:
        h.update(np.ascontiguousarray(p.weights, dtype="<f8").tobytes())
        h.update(np.ascontiguousarray(p.bias, dtype="<f8").tobytes())
    return h.hexdigest()


def _mean_std(values: list[float]) -> tuple[float, float]:
    arr = np.asarray(values, dtype=np.float64)
    std = float(arr.std(ddof=1)) if len(arr) > 1 else 0.0
    return float(arr.mean()), std


def _thread_count(args) -> int:
    if args.threads is not None:
        return max(1, args.threads)
    env = os.environ.get(THREADS_ENV)
    if env:
        return max(1, int(env))
    return 1


def _out_dir(cfg: RunConfig, args) -> str:
    out = args.out or cfg.out_dir
    if not out:
        raise ConfigError("no output directory: set out_dir in the config or pass --out")
    os.makedirs(os.path.join(out, "runs"), exist_ok=True)
    os.makedirs(os.path.join(out, "checkpoints"), exist_ok=True)
    return out


def _seeds(cfg: RunConfig, args) -> list[int]:
    if args.seeds:
        return [int(s) for s in args.seeds.split(",")]
    return list(cfg.seeds)


def _run_one_seed(cfg: RunConfig, seed: int, out: str, resume: bool):
    """All methods for one seed, sharing the stream and the ONE reference."""
    stream = cfg.build_stream(seed)
    tc = cfg.train.with_seed(seed)
    beta, one_result = trainer_mod.one_reference(stream, tc, cfg.hidden)
    out_runs: dict[str, tuple[RunResult, np.ndarray]] = {}
    for method in cfg.methods:
        if method.tag == "ONE":
            out_runs[method.label] = (one_result, beta)
            continue
        ckpt_path = os.path.join(out, "checkpoints", f"{method.slug}_seed{seed}.ckpt")
        resume_from = None
        if resume and method.tag != "MTL" and os.path.exists(ckpt_path):
            snap = ckpt_mod.load_checkpoint(ckpt_path)
            ckpt_mod.check_compatible(snap, cfg.config_hash(), method.label, seed, ckpt_path)
            if snap.tasks_done < len(stream):
                resume_from = snap
        hook = None
        if method.tag != "MTL":
            hook = lambda s, p=ckpt_path: ckpt_mod.save_checkpoint(p, s)
        result = run_continual(stream, method, tc, cfg.hidden,
                               blocked_eps=cfg.blocked_eps, snapshot_hook=hook,
                               resume_from=resume_from, config_hash=cfg.config_hash())
        out_runs[method.label] = (result, beta)
    return out_runs


def cmd_run(cfg: RunConfig, args) -> int:
    out = _out_dir(cfg, args)
    seeds = _seeds(cfg, args)
    threads = _thread_count(args)

    if threads == 1:
        by_seed = {seed: _run_one_seed(cfg, seed, out, args.resume) for seed in seeds}
    else:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            futures = {seed: pool.submit(_run_one_seed, cfg, seed, out, args.resume)
                       for seed in seeds}
            by_seed = {seed: fut.result() for seed, fut in futures.items()}

    records: dict[str, list[dict]] = {m.label: [] for m in cfg.methods}
    for method in cfg.methods:
        for seed in seeds:
            result, beta = by_seed[seed][method.label]
            record = build_record(result, beta)
            records[method.label].append(record)
            stem = os.path.join(out, "runs", f"{method.slug}_seed{seed}")
            write_json(stem + ".json", record)
            write_csv(stem + "_blocked.csv", BLOCKED_COLUMNS, blocked_rows(result))

    rows = []
    for method in cfg.methods:
        recs = records[method.label]
        acc_m, acc_s = _mean_std([r["avg_accuracy"] for r in recs])
        fwt_m, fwt_s = _mean_std([r["forward_transfer"] for r in recs])
        bwts = [r["backward_transfer"] for r in recs]
        if any(b is None for b in bwts):
            bwt_m = bwt_s = ""
        else:
            mean, std = _mean_std(bwts)
            bwt_m, bwt_s = repr(mean), repr(std)
        rows.append((method.label, len(recs), repr(acc_m), repr(acc_s),
                     repr(fwt_m), repr(fwt_s), bwt_m, bwt_s))
    write_csv(os.path.join(out, "aggregate.csv"), AGGREGATE_COLUMNS, rows)
    print(f"wrote {sum(len(r) for r in records.values())} run records and "
          f"aggregate.csv to {out}")
    return 0


def cmd_prune(cfg: RunConfig, args) -> int:
    out = _out_dir(cfg, args)
    seeds = _seeds(cfg, args)
    rows = []
    for seed in seeds:
        stream = cfg.build_stream(seed)
        task = stream.tasks[0]
        model, ti, _ = trainer_mod.fit_single_task(task, cfg.train.with_seed(seed), cfg.hidden)
        chance = 1.0 / task.num_classes
        plan = [("nothing", 0.0)]
        for pct in cfg.prune_percents:
            plan += [("lowest", pct), ("random", pct), ("highest", pct)]
        for i, (strategy, pct) in enumerate(plan):
            rng = seeding.derived_rng(seed, seeding.PRUNE, i)
            acc = eval_mod.pruning_experiment(model, task.task_id, ti.per_layer,
                                              strategy, pct, task.test, rng)
            rows.append((seed, strategy, repr(float(pct)), repr(acc), repr(chance)))
    write_csv(os.path.join(out, "prune.csv"), PRUNE_COLUMNS, rows)
    print(f"wrote {len(rows)} pruning rows to {out}/prune.csv")
    return 0


def cmd_probe(cfg: RunConfig, args) -> int:
    if cfg.probe is None:
        raise ConfigError("probe command needs a 'probe' section in the config")
    out = _out_dir(cfg, args)
    seeds = _seeds(cfg, args)
    rows = []
    for seed in seeds:
        stream = cfg.build_stream(seed)
        probe_task = cfg.build_probe_task(stream.input_dim)
        tc = cfg.train.with_seed(seed)
        for method in cfg.methods:
            if method.tag in ("ONE", "MTL"):
                raise ConfigError(f"probe tracks sequential methods, not {method.tag}")
            accs: list[float] = []

            def probe_now(t: int, model: TILModel, _state) -> None:
                before = extractor_hash(model)
                acc = eval_mod.representation_probe(model.extractor, probe_task, tc)
                if extractor_hash(model) != before:
                    raise RuntimeError("probe mutated the extractor")
                accs.append(acc)

            def save_task_ckpt(snap, m=method, s=seed):
                path = os.path.join(out, "checkpoints",
                                    f"{m.slug}_seed{s}_task{snap.tasks_done}.ckpt")
                ckpt_mod.save_checkpoint(path, snap)

            run_continual(stream, method, tc, cfg.hidden, blocked_eps=cfg.blocked_eps,
                          after_task=probe_now, snapshot_hook=save_task_ckpt,
                          config_hash=cfg.config_hash())
            rows.extend((method.label, seed, t + 1, repr(acc))
                        for t, acc in enumerate(accs))
    rows.sort(key=lambda r: (r[0], r[1], r[2]))
    write_csv(os.path.join(out, "probe.csv"), PROBE_COLUMNS, rows)
    print(f"wrote {len(rows)} probe rows to {out}/probe.csv")
    return 0


def make_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="spg", description="Soft-masked continual-learning experiments")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, help_text in (("run", "continual runs over methods x seeds"),
                            ("prune", "single-task importance-pruning experiment"),
                            ("probe", "frozen-extractor representation probe")):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", required=True, help="path to the JSON run config")
        p.add_argument("--out", default=None, help="output directory (overrides config)")
        p.add_argument("--seeds", default=None, help="comma-separated seed override")
        p.add_argument("--threads", type=int, default=None,
                       help=f"worker threads (or ${THREADS_ENV})")
        p.add_argument("--resume", action="store_true",
                       help="continue from per-run checkpoints when present")
    return parser


def main(argv: list[str] | None = None) -> int:
    args = make_parser().parse_args(argv)
    try:
        cfg = load_config(args.config)
        if args.command == "run":
            return cmd_run(cfg, args)
        if args.command == "prune":
            return cmd_prune(cfg, args)
        return cmd_probe(cfg, args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2
    except Exception:
        traceback.print_exc()
        return 1


if __name__ == "__main__":
    sys.exit(main())
