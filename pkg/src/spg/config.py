"""Run configuration: method tags, training hyper-parameters, config files.

Config files are JSON with strict unknown-key rejection, so typos fail fast
instead of silently running a different experiment.
"""

from __future__ import annotations

import hashlib
import json
import re
from dataclasses import dataclass, replace

from . import data as data_mod
from .data import TaskStream

HARD_THRESHOLDS = (0.2, 0.4, 0.6, 0.8)

SPG = "SPG"
SPG_NO_CHI = "SPG_NO_CHI"
SPG_NO_SMH = "SPG_NO_SMH"
SPG_HARD = "SPG_HARD"
SPG_FI = "SPG_FI"
NCL = "NCL"
ONE = "ONE"
MTL = "MTL"
EWC_FI = "EWC_FI"
EWC_GI = "EWC_GI"

_PLAIN_TAGS = (SPG, SPG_NO_CHI, SPG_NO_SMH, SPG_FI, NCL, ONE, MTL)
_PARAM_RE = re.compile(r"^([A-Z_]+)\(([-0-9.eE+]+)\)$")


class ConfigError(ValueError):
    """Invalid run configuration."""


@dataclass(frozen=True)
class Method:
    """A training method tag plus its parameter, if any.

    SPG_HARD carries the hard-mask threshold; the EWC variants carry the
    penalty strength lambda.
    """

    tag: str
    threshold: float | None = None
    lam: float | None = None

    def __post_init__(self):
        if self.tag == SPG_HARD:
            if self.threshold not in HARD_THRESHOLDS:
                raise ConfigError(
                    f"SPG_HARD threshold must be one of {HARD_THRESHOLDS}, got {self.threshold}")
        elif self.tag in (EWC_FI, EWC_GI):
            if self.lam is None or self.lam <= 0:
                raise ConfigError(f"{self.tag} needs lambda > 0, got {self.lam}")
        elif self.tag in _PLAIN_TAGS:
            if self.threshold is not None or self.lam is not None:
                raise ConfigError(f"{self.tag} takes no parameter")
        else:
            raise ConfigError(f"unknown method tag {self.tag!r}")

    @classmethod
    def parse(cls, text: str) -> "Method":
        text = text.strip()
        if text in _PLAIN_TAGS:
            return cls(text)
        m = _PARAM_RE.match(text)
        if m:
            tag, value = m.group(1), float(m.group(2))
            if tag == SPG_HARD:
                return cls(tag, threshold=value)
            if tag in (EWC_FI, EWC_GI):
                return cls(tag, lam=value)
        raise ConfigError(f"cannot parse method {text!r}")

    @property
    def label(self) -> str:
        if self.tag == SPG_HARD:
            return f"SPG_HARD({self.threshold:g})"
        if self.tag in (EWC_FI, EWC_GI):
            return f"{self.tag}({self.lam:g})"
        return self.tag

    @property
    def slug(self) -> str:
        return self.label.replace("(", "_").replace(")", "").replace(".", "p")

    @property
    def is_spg_family(self) -> bool:
        return self.tag in (SPG, SPG_NO_CHI, SPG_NO_SMH, SPG_HARD, SPG_FI)

    @property
    def is_ewc_family(self) -> bool:
        return self.tag in (EWC_FI, EWC_GI)

    @property
    def uses_chi(self) -> bool:
        return self.tag in (SPG, SPG_NO_SMH, SPG_HARD, EWC_GI)


@dataclass(frozen=True)
class TrainConfig:
    lr: float
    epochs: int
    batch_size: int
    patience: int
    seed: int = 0

    def __post_init__(self):
        if self.lr <= 0:
            raise ConfigError(f"lr must be positive, got {self.lr}")
        for name in ("epochs", "batch_size", "patience"):
            v = getattr(self, name)
            if not isinstance(v, int) or v <= 0:
                raise ConfigError(f"{name} must be a positive integer, got {v!r}")

    def with_seed(self, seed: int) -> "TrainConfig":
        return replace(self, seed=seed)


def _check_keys(obj: dict, where: str, required: tuple[str, ...],
                optional: tuple[str, ...] = ()) -> None:
    if not isinstance(obj, dict):
        raise ConfigError(f"{where} must be an object, got {type(obj).__name__}")
    unknown = sorted(set(obj) - set(required) - set(optional))
    if unknown:
        raise ConfigError(f"{where}: unknown keys {unknown}")
    missing = sorted(set(required) - set(obj))
    if missing:
        raise ConfigError(f"{where}: missing keys {missing}")


def _positive_int(obj: dict, key: str, where: str) -> int:
    v = obj[key]
    if not isinstance(v, int) or isinstance(v, bool) or v <= 0:
        raise ConfigError(f"{where}.{key} must be a positive integer, got {v!r}")
    return v


def _positive_num(obj: dict, key: str, where: str) -> float:
    v = obj[key]
    if not isinstance(v, (int, float)) or isinstance(v, bool) or v <= 0:
        raise ConfigError(f"{where}.{key} must be a positive number, got {v!r}")
    return float(v)


_STREAM_KEYS = {
    data_mod.DISSIMILAR: (("kind", "n_tasks", "classes_per_task", "dim", "samples_per_class"),
                          ("seed", "sigma")),
    data_mod.SIMILAR: (("kind", "n_tasks", "classes", "dim", "samples_per_class"),
                       ("seed", "sigma", "drift")),
    data_mod.SPLIT_IDX: (("kind", "images", "labels", "n_tasks"), ("seed",)),
}


def _validate_stream(obj: dict) -> dict:
    if not isinstance(obj, dict) or "kind" not in obj:
        raise ConfigError("stream must be an object with a 'kind'")
    kind = obj["kind"]
    if kind not in _STREAM_KEYS:
        raise ConfigError(f"stream.kind must be one of {sorted(_STREAM_KEYS)}, got {kind!r}")
    required, optional = _STREAM_KEYS[kind]
    _check_keys(obj, "stream", required, optional)
    for key in required:
        if key == "kind":
            continue
        if key in ("images", "labels"):
            if not isinstance(obj[key], str):
                raise ConfigError(f"stream.{key} must be a path string")
        else:
            _positive_int(obj, key, "stream")
    if "seed" in obj and (not isinstance(obj["seed"], int) or isinstance(obj["seed"], bool)):
        raise ConfigError(f"stream.seed must be an integer, got {obj['seed']!r}")
    if "sigma" in obj:
        _positive_num(obj, "sigma", "stream")
    if "drift" in obj and (not isinstance(obj["drift"], (int, float)) or obj["drift"] < 0):
        raise ConfigError(f"stream.drift must be >= 0, got {obj['drift']!r}")
    return obj


@dataclass(frozen=True)
class RunConfig:
    stream: dict
    hidden: tuple[int, ...]
    methods: tuple[Method, ...]
    train: TrainConfig
    seeds: tuple[int, ...]
    out_dir: str | None
    blocked_eps: float
    prune_percents: tuple[float, ...]
    probe: dict | None
    raw: dict

    def config_hash(self) -> str:
        """Hash of the canonical config payload (no timestamps involved)."""
        blob = json.dumps(self.raw, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()

    def build_stream(self, seed: int) -> TaskStream:
        """The run's task stream; its seed defaults to the run seed."""
        s = dict(self.stream)
        kind = s.pop("kind")
        stream_seed = s.pop("seed", seed)
        if kind == data_mod.DISSIMILAR:
            return data_mod.gen_dissimilar_stream(
                s["n_tasks"], s["classes_per_task"], s["dim"], s["samples_per_class"],
                stream_seed, sigma=s.get("sigma", 0.5))
        if kind == data_mod.SIMILAR:
            return data_mod.gen_similar_stream(
                s["n_tasks"], s["classes"], s["dim"], s["samples_per_class"],
                stream_seed, drift=s.get("drift", 0.2), sigma=s.get("sigma", 0.5))
        inputs, labels = data_mod.load_idx(s["images"], s["labels"])
        return data_mod.split_by_class(inputs, labels, s["n_tasks"], stream_seed)

    def build_probe_task(self, input_dim: int):
        """Probe dataset used to score frozen extractors; fixed across runs."""
        if self.probe is None:
            raise ConfigError("config has no 'probe' section")
        p = self.probe
        stream = data_mod.gen_dissimilar_stream(
            1, p["classes"], input_dim, p["samples_per_class"], p["seed"],
            sigma=p.get("sigma", 0.5))
        return stream.tasks[0]


def parse_config(obj: dict) -> RunConfig:
    _check_keys(obj, "config", ("stream", "arch", "methods", "train", "seeds"),
                ("out_dir", "blocked_eps", "prune", "probe"))
    stream = _validate_stream(obj["stream"])

    _check_keys(obj["arch"], "arch", ("hidden",))
    hidden = obj["arch"]["hidden"]
    if (not isinstance(hidden, list) or not hidden
            or not all(isinstance(h, int) and h > 0 for h in hidden)):
        raise ConfigError(f"arch.hidden must be a non-empty list of positive ints, got {hidden!r}")

    if not isinstance(obj["methods"], list) or not obj["methods"]:
        raise ConfigError("methods must be a non-empty list")
    methods = tuple(Method.parse(m) if isinstance(m, str) else _bad_method(m)
                    for m in obj["methods"])

    _check_keys(obj["train"], "train", ("lr", "epochs", "batch_size", "patience"))
    train = TrainConfig(
        lr=_positive_num(obj["train"], "lr", "train"),
        epochs=_positive_int(obj["train"], "epochs", "train"),
        batch_size=_positive_int(obj["train"], "batch_size", "train"),
        patience=_positive_int(obj["train"], "patience", "train"),
    )

    seeds = obj["seeds"]
    if (not isinstance(seeds, list) or not seeds
            or not all(isinstance(s, int) and not isinstance(s, bool) and s >= 0 for s in seeds)):
        raise ConfigError(f"seeds must be a non-empty list of non-negative ints, got {seeds!r}")
    if len(set(seeds)) != len(seeds):
        raise ConfigError("seeds contains duplicates")

    out_dir = obj.get("out_dir")
    if out_dir is not None and not isinstance(out_dir, str):
        raise ConfigError(f"out_dir must be a string, got {out_dir!r}")

    blocked_eps = obj.get("blocked_eps", 1e-6)
    if not isinstance(blocked_eps, (int, float)) or not 0 < blocked_eps < 1:
        raise ConfigError(f"blocked_eps must be in (0, 1), got {blocked_eps!r}")

    percents: tuple[float, ...] = (10.0, 20.0)
    if "prune" in obj:
        _check_keys(obj["prune"], "prune", ("percents",))
        raw_pcts = obj["prune"]["percents"]
        if (not isinstance(raw_pcts, list) or not raw_pcts
                or not all(isinstance(p, (int, float)) and 0 < p < 100 for p in raw_pcts)):
            raise ConfigError(f"prune.percents must be numbers in (0, 100), got {raw_pcts!r}")
        percents = tuple(float(p) for p in raw_pcts)

    probe = None
    if "probe" in obj:
        _check_keys(obj["probe"], "probe", ("classes", "samples_per_class", "seed"), ("sigma",))
        _positive_int(obj["probe"], "classes", "probe")
        _positive_int(obj["probe"], "samples_per_class", "probe")
        if not isinstance(obj["probe"]["seed"], int):
            raise ConfigError("probe.seed must be an integer")
        probe = obj["probe"]

    return RunConfig(stream=stream, hidden=tuple(hidden), methods=methods, train=train,
                     seeds=tuple(seeds), out_dir=out_dir, blocked_eps=float(blocked_eps),
                     prune_percents=percents, probe=probe, raw=obj)


def _bad_method(m) -> Method:
    raise ConfigError(f"methods entries must be strings, got {m!r}")


def load_config(path: str) -> RunConfig:
    try:
        with open(path) as f:
            obj = json.load(f)
    except OSError as e:
        raise ConfigError(f"cannot read config {path}: {e}") from e
    except json.JSONDecodeError as e:
        raise ConfigError(f"config {path} is not valid JSON: {e}") from e
    return parse_config(obj)
