import csv
import json
import os

import numpy as np
import pytest

from spg import cli
from spg.checkpoint import CheckpointError, check_compatible, load_checkpoint, save_checkpoint
from spg.config import ConfigError, Method, parse_config
from spg.trainer import run_continual


def base_config(**overrides):
    cfg = {
        "stream": {"kind": "dissimilar", "n_tasks": 2, "classes_per_task": 2,
                   "dim": 6, "samples_per_class": 40},
        "arch": {"hidden": [8]},
        "methods": ["NCL", "SPG"],
        "train": {"lr": 0.2, "epochs": 6, "batch_size": 16, "patience": 2},
        "seeds": [0, 1],
    }
    cfg.update(overrides)
    return cfg


def write_config(tmp_path, cfg, name="config.json"):
    path = tmp_path / name
    path.write_text(json.dumps(cfg))
    return str(path)


def read_rows(path):
    with open(path) as f:
        return list(csv.DictReader(f))


class TestMethodParsing:
    def test_plain_and_parameterised_tags(self):
        assert Method.parse("SPG").label == "SPG"
        assert Method.parse("SPG_HARD(0.6)").threshold == 0.6
        assert Method.parse("EWC_GI(10)").lam == 10.0
        assert Method.parse("EWC_FI(2.5)").label == "EWC_FI(2.5)"

    @pytest.mark.parametrize("bad", ["SPG_HARD(0.5)", "EWC_FI(0)", "EWC_FI", "SGD",
                                     "SPG_HARD", "spg"])
    def test_invalid_methods_rejected(self, bad):
        with pytest.raises(ConfigError):
            Method.parse(bad)

    def test_slug_is_filename_safe(self):
        assert "(" not in Method.parse("SPG_HARD(0.6)").slug


class TestConfigValidation:
    def test_valid_config_parses(self):
        cfg = parse_config(base_config())
        assert cfg.hidden == (8,)
        assert [m.label for m in cfg.methods] == ["NCL", "SPG"]
        assert cfg.blocked_eps == 1e-6

    def test_unknown_top_level_key_rejected(self):
        with pytest.raises(ConfigError, match="unknown keys.*typo"):
            parse_config(base_config(typo=1))

    def test_unknown_stream_key_rejected(self):
        cfg = base_config()
        cfg["stream"]["sigm"] = 0.4
        with pytest.raises(ConfigError, match="stream"):
            parse_config(cfg)

    def test_unknown_train_key_rejected(self):
        cfg = base_config()
        cfg["train"]["momentum"] = 0.9
        with pytest.raises(ConfigError, match="train"):
            parse_config(cfg)

    def test_missing_keys_rejected(self):
        cfg = base_config()
        del cfg["train"]["lr"]
        with pytest.raises(ConfigError, match="missing"):
            parse_config(cfg)

    def test_duplicate_seeds_rejected(self):
        with pytest.raises(ConfigError, match="duplicates"):
            parse_config(base_config(seeds=[0, 0]))

    def test_bad_stream_kind_rejected(self):
        cfg = base_config()
        cfg["stream"] = {"kind": "imagenet"}
        with pytest.raises(ConfigError):
            parse_config(cfg)

    def test_config_hash_stable_under_key_order(self):
        a = parse_config(base_config())
        flipped = dict(reversed(list(base_config().items())))
        b = parse_config(flipped)
        assert a.config_hash() == b.config_hash()


class TestCheckpoint:
    def make_snapshot(self, tag="SPG"):
        stream = parse_config(base_config()).build_stream(0)
        snaps = []
        run_continual(stream, Method.parse(tag), parse_config(base_config()).train.with_seed(0),
                      [8], snapshot_hook=snaps.append, config_hash="abc", stop_after=0)
        return snaps[0]

    def test_roundtrip_is_bitwise(self, tmp_path):
        snap = self.make_snapshot()
        path = str(tmp_path / "run.ckpt")
        save_checkpoint(path, snap)
        back = load_checkpoint(path)
        assert back.method_label == snap.method_label
        assert back.tasks_done == snap.tasks_done
        for a, b in zip(snap.model.extractor.params, back.model.extractor.params):
            assert a.weights.tobytes() == b.weights.tobytes()
            assert a.bias.tobytes() == b.bias.tobytes()
        for t in snap.model.heads:
            assert snap.model.heads[t].weights.tobytes() == back.model.heads[t].weights.tobytes()
        for a, b in zip(snap.importance_state.per_layer, back.importance_state.per_layer):
            assert a.tobytes() == b.tobytes()
        assert back.importance_state.mean_importance == snap.importance_state.mean_importance
        assert np.array_equal(back.matrix_values, snap.matrix_values, equal_nan=True)
        assert back.blocked_history == snap.blocked_history

    def test_ewc_state_roundtrip(self, tmp_path):
        snap = self.make_snapshot("EWC_GI(5)")
        path = str(tmp_path / "ewc.ckpt")
        save_checkpoint(path, snap)
        back = load_checkpoint(path)
        for a, b in zip(snap.ewc_state.omega, back.ewc_state.omega):
            assert a.tobytes() == b.tobytes()

    def test_truncated_file_rejected_without_partial_state(self, tmp_path):
        snap = self.make_snapshot()
        path = str(tmp_path / "run.ckpt")
        save_checkpoint(path, snap)
        blob = open(path, "rb").read()
        open(path, "wb").write(blob[: len(blob) - 17])
        with pytest.raises(CheckpointError) as err:
            load_checkpoint(path)
        assert err.value.reason == "corrupt"

    def test_garbage_header_rejected(self, tmp_path):
        path = str(tmp_path / "junk.ckpt")
        open(path, "wb").write(b"not a checkpoint\nxxxx")
        with pytest.raises(CheckpointError) as err:
            load_checkpoint(path)
        assert err.value.reason == "corrupt"

    def test_hash_mismatch_refused_with_explanation(self, tmp_path):
        snap = self.make_snapshot()
        with pytest.raises(CheckpointError, match="refusing to resume") as err:
            check_compatible(snap, "different-hash", "SPG", 0)
        assert err.value.reason == "hash_mismatch"

    def test_resume_from_file_equals_uninterrupted(self, tmp_path):
        cfg = parse_config(base_config())
        stream = cfg.build_stream(0)
        tc = cfg.train.with_seed(0)
        full = run_continual(stream, Method("SPG"), tc, [8], config_hash="abc")

        snaps = []
        run_continual(stream, Method("SPG"), tc, [8], snapshot_hook=snaps.append,
                      config_hash="abc", stop_after=0)
        path = str(tmp_path / "partial.ckpt")
        save_checkpoint(path, snaps[0])
        resumed = run_continual(stream, Method("SPG"), tc, [8],
                                resume_from=load_checkpoint(path), config_hash="abc")
        for a, b in zip(full.model.extractor.params, resumed.model.extractor.params):
            assert a.weights.tobytes() == b.weights.tobytes()
        assert np.array_equal(full.matrix.values, resumed.matrix.values, equal_nan=True)


class TestCmdRun:
    def run_cli(self, tmp_path, cfg, out_name="out", extra=()):
        config_path = write_config(tmp_path, cfg)
        out = str(tmp_path / out_name)
        code = cli.main(["run", "--config", config_path, "--out", out, *extra])
        return code, out

    def test_fanout_and_outputs(self, tmp_path):
        code, out = self.run_cli(tmp_path, base_config())
        assert code == 0
        records = sorted(os.listdir(os.path.join(out, "runs")))
        jsons = [r for r in records if r.endswith(".json")]
        assert len(jsons) == 4  # 2 methods x 2 seeds
        assert os.path.exists(os.path.join(out, "aggregate.csv"))

    def test_rerun_is_byte_identical(self, tmp_path):
        _, out1 = self.run_cli(tmp_path, base_config(), "out1")
        _, out2 = self.run_cli(tmp_path, base_config(), "out2")
        for sub in ("aggregate.csv",):
            a = open(os.path.join(out1, sub), "rb").read()
            b = open(os.path.join(out2, sub), "rb").read()
            assert a == b
        for name in sorted(os.listdir(os.path.join(out1, "runs"))):
            a = open(os.path.join(out1, "runs", name), "rb").read()
            b = open(os.path.join(out2, "runs", name), "rb").read()
            assert a == b

    def test_threads_do_not_change_bytes(self, tmp_path):
        _, out1 = self.run_cli(tmp_path, base_config(), "out1")
        _, out2 = self.run_cli(tmp_path, base_config(), "out2", extra=("--threads", "2"))
        a = open(os.path.join(out1, "aggregate.csv"), "rb").read()
        b = open(os.path.join(out2, "aggregate.csv"), "rb").read()
        assert a == b

    def test_aggregate_matches_records(self, tmp_path):
        _, out = self.run_cli(tmp_path, base_config())
        rows = {r["method"]: r for r in read_rows(os.path.join(out, "aggregate.csv"))}
        for method in ("NCL", "SPG"):
            accs = []
            for seed in (0, 1):
                with open(os.path.join(out, "runs", f"{method}_seed{seed}.json")) as f:
                    accs.append(json.load(f)["avg_accuracy"])
            assert float(rows[method]["accuracy_mean"]) == pytest.approx(
                np.mean(accs), abs=1e-12)
            assert float(rows[method]["accuracy_std"]) == pytest.approx(
                np.std(accs, ddof=1), abs=1e-12)

    def test_record_contents(self, tmp_path):
        _, out = self.run_cli(tmp_path, base_config())
        with open(os.path.join(out, "runs", "SPG_seed0.json")) as f:
            record = json.load(f)
        assert record["n_tasks"] == 2
        assert record["accuracy_matrix"][1][0] is None
        assert record["param_counts"]["extractor"] == 6 * 8 + 8
        assert record["per_task"][0]["blocked_total"] is not None
        assert record["per_task"][1]["chi"] is not None
        assert record["per_task"][0]["chi"] is None

    def test_blocked_csv_schema(self, tmp_path):
        _, out = self.run_cli(tmp_path, base_config())
        rows = read_rows(os.path.join(out, "runs", "SPG_seed0_blocked.csv"))
        assert rows and set(rows[0]) == {"task", "layer", "fraction"}
        layers = {r["layer"] for r in rows}
        assert "total" in layers and "0" in layers
        ncl_rows = read_rows(os.path.join(out, "runs", "NCL_seed0_blocked.csv"))
        assert ncl_rows == []

    def test_seeds_override(self, tmp_path):
        config_path = write_config(tmp_path, base_config())
        out = str(tmp_path / "out")
        code = cli.main(["run", "--config", config_path, "--out", out, "--seeds", "7"])
        assert code == 0
        assert sorted(os.listdir(os.path.join(out, "runs"))) == [
            "NCL_seed7.json", "NCL_seed7_blocked.csv",
            "SPG_seed7.json", "SPG_seed7_blocked.csv"]

    def test_resume_reproduces_records(self, tmp_path):
        cfg = base_config()
        _, clean = self.run_cli(tmp_path, cfg, "clean")

        parsed = parse_config(cfg)
        stream = parsed.build_stream(0)
        out = str(tmp_path / "resumed")
        os.makedirs(os.path.join(out, "checkpoints"))
        os.makedirs(os.path.join(out, "runs"))
        snaps = []
        run_continual(stream, Method("SPG"), parsed.train.with_seed(0), parsed.hidden,
                      snapshot_hook=snaps.append, config_hash=parsed.config_hash(),
                      stop_after=0)
        save_checkpoint(os.path.join(out, "checkpoints", "SPG_seed0.ckpt"), snaps[0])

        config_path = write_config(tmp_path, cfg, "resume.json")
        code = cli.main(["run", "--config", config_path, "--out", out, "--resume"])
        assert code == 0
        a = open(os.path.join(clean, "runs", "SPG_seed0.json"), "rb").read()
        b = open(os.path.join(out, "runs", "SPG_seed0.json"), "rb").read()
        assert a == b

    def test_invalid_config_exits_2(self, tmp_path):
        config_path = write_config(tmp_path, base_config(typo=True))
        assert cli.main(["run", "--config", config_path, "--out", str(tmp_path / "o")]) == 2

    def test_missing_config_exits_2(self, tmp_path):
        assert cli.main(["run", "--config", str(tmp_path / "nope.json")]) == 2


class TestCmdPrune:
    def test_rows_and_roundtrip(self, tmp_path):
        cfg = base_config(prune={"percents": [10, 20]})
        cfg["seeds"] = [0]
        config_path = write_config(tmp_path, cfg)
        out = str(tmp_path / "out")
        assert cli.main(["prune", "--config", config_path, "--out", out]) == 0
        rows = read_rows(os.path.join(out, "prune.csv"))
        assert len(rows) == 1 + 3 * 2
        assert set(r["strategy"] for r in rows) == {"nothing", "lowest", "random", "highest"}
        for r in rows:
            acc = float(r["accuracy"])
            assert 0.0 <= acc <= 1.0
            assert float(r["chance"]) == 0.5


class TestCmdProbe:
    def test_probe_csv_schema(self, tmp_path):
        cfg = base_config(probe={"classes": 2, "samples_per_class": 40, "seed": 99})
        cfg["methods"] = ["SPG"]
        cfg["seeds"] = [0]
        config_path = write_config(tmp_path, cfg)
        out = str(tmp_path / "out")
        assert cli.main(["probe", "--config", config_path, "--out", out]) == 0
        rows = read_rows(os.path.join(out, "probe.csv"))
        assert [r["tasks_learned"] for r in rows] == ["1", "2"]
        assert set(rows[0]) == {"method", "seed", "tasks_learned", "probe_accuracy"}
        ckpts = os.listdir(os.path.join(out, "checkpoints"))
        assert sorted(ckpts) == ["SPG_seed0_task1.ckpt", "SPG_seed0_task2.ckpt"]

    def test_probe_requires_config_section(self, tmp_path):
        config_path = write_config(tmp_path, base_config())
        assert cli.main(["probe", "--config", config_path,
                         "--out", str(tmp_path / "o")]) == 2
