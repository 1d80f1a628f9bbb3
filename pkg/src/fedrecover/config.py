"""Experiment configuration: typed flat ``key = value`` files with dotted keys.

A config file looks like::

    # comments start with '#'
    experiment = sparse_linear
    [data]
    p = 64
    s = 8
    [algo]
    name = fast_fedda, fedda

``[section]`` headers prefix the keys that follow them, so ``p`` above is
``data.p``. Lists are comma separated. Resolution order is
defaults < preset < file < command-line overrides.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Dict, Iterable, Mapping, Optional

from fedrecover.errors import ConfigError

EXPERIMENTS = ("sparse_linear", "low_rank", "logistic_csv")
ALGORITHM_NAMES = ("fast_fedda", "cfedda", "mc_fedda", "fedda", "fedmid")


def _bool(text):
    t = str(text).strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _float(text):
    return float(str(text).strip())


def _int(text):
    f = float(str(text).strip())
    if not f.is_integer():
        raise ValueError(f"not an integer: {text!r}")
    return int(f)


def _opt(conv):
    def parse(text):
        if text is None or str(text).strip().lower() in ("", "none", "auto"):
            return None
        return conv(text)

    return parse


def _list(conv):
    def parse(text):
        if isinstance(text, (list, tuple)):
            return [conv(x) for x in text]
        t = str(text).strip()
        if not t:
            return []
        return [conv(x) for x in t.split(",") if x.strip()]

    return parse


def _str(text):
    return str(text).strip()


# key -> (parser, default)
SCHEMA: Dict[str, tuple] = {
    "experiment": (_str, "sparse_linear"),
    "data.p": (_int, 64),
    "data.s": (_int, 8),
    "data.p1": (_int, 16),
    "data.p2": (_int, 16),
    "data.rank": (_int, 4),
    "data.clients": (_int, 8),
    "data.samples_per_client": (_int, 64),
    "data.heterogeneous": (_bool, True),
    "data.noise_std": (_float, 1.0),
    "data.csv_dir": (_str, ""),
    "data.test_dir": (_str, ""),
    "data.label_column": (_str, "label"),
    "data.num_classes": (_int, 10),
    "algo.name": (_list(_str), ["fast_fedda"]),
    "algo.mu": (_float, 0.1),
    "algo.L": (_float, 34.375),
    "algo.L_constrained": (_opt(_float), 37.5),
    "algo.a": (_opt(_int), None),
    "algo.gamma": (_opt(_float), None),
    "algo.lam": (_float, 0.18),
    "algo.epsilon0": (_float, math.inf),
    "algo.eta_c": (_float, 0.001),
    "algo.eta_s": (_float, 1.0),
    "reg.kind": (_opt(_str), None),
    "reg.subspace_dim": (_opt(_int), None),
    "domain.radius": (_float, math.inf),
    "schedule.lambdas": (_list(_float), []),
    "schedule.epsilons": (_list(_float), []),
    "schedule.lambda0": (_opt(_float), None),
    "schedule.stages": (_int, 3),
    "schedule.rounds": (_list(_int), []),
    "schedule.local_steps": (_list(_int), []),
    "run.rounds": (_int, 300),
    "run.local_steps": (_int, 5),
    "run.batch_size": (_int, 10),
    "run.clients_per_round": (_int, 0),
    "run.seeds": (_list(_int), [0]),
    "run.eval_every": (_int, 1),
    "run.workers": (_int, 1),
    "run.output": (_str, "runs"),
    "metrics.support_threshold": (_float, 1e-3),
    "metrics.rank_threshold": (_float, 1e-3),
}

PRESETS: Dict[str, Dict[str, Any]] = {
    "lasso-full": {
        "experiment": "sparse_linear",
        "data.p": 1024, "data.s": 512, "data.clients": 64, "data.samples_per_client": 128,
        "run.clients_per_round": 10, "run.local_steps": 10, "run.batch_size": 10,
        "algo.lam": 0.5**5, "algo.mu": 0.1, "algo.L": 550.0, "algo.L_constrained": 600.0,
        "algo.eta_c": 0.001, "algo.eta_s": 1.0,
        "schedule.lambdas": [0.5**3, 0.5**4, 0.5**5],
    },
    "lowrank-full": {
        "experiment": "low_rank",
        "data.p1": 32, "data.p2": 32, "data.rank": 16, "data.clients": 64,
        "data.samples_per_client": 128,
        "run.clients_per_round": 10, "run.local_steps": 10, "run.batch_size": 10,
        "algo.lam": 0.1, "algo.mu": 0.1, "algo.L": 550.0, "algo.L_constrained": 600.0,
        "algo.eta_c": 0.001, "algo.eta_s": 1.0,
        "schedule.lambdas": [0.3, 0.15, 0.1],
    },
    "lasso-desk": {
        "experiment": "sparse_linear",
        "data.p": 64, "data.s": 8, "data.clients": 8, "data.samples_per_client": 64,
        "run.clients_per_round": 0, "run.local_steps": 5, "run.batch_size": 10, "run.rounds": 300,
        "algo.lam": 0.18, "algo.mu": 0.1, "algo.L": 34.375, "algo.L_constrained": 7.5,
        "algo.eta_c": 0.001, "algo.eta_s": 1.0,
        "schedule.lambdas": [0.72, 0.36, 0.18],
    },
    "lowrank-desk": {
        "experiment": "low_rank",
        "data.p1": 16, "data.p2": 16, "data.rank": 4, "data.clients": 8,
        "data.samples_per_client": 64,
        "run.clients_per_round": 0, "run.local_steps": 5, "run.batch_size": 10, "run.rounds": 300,
        "algo.lam": 0.6, "algo.mu": 0.1, "algo.L": 40.0, "algo.L_constrained": 8.75,
        "algo.eta_c": 0.001, "algo.eta_s": 1.0,
        "schedule.lambdas": [1.8, 0.9, 0.6], "schedule.rounds": [100, 100, 400],
    },
}


def parse_value(key: str, value):
    if key not in SCHEMA:
        raise ConfigError(f"unknown config key {key!r}")
    parser = SCHEMA[key][0]
    if value is not None and not isinstance(value, (str, list, tuple)):
        value = str(value)
    try:
        return parser(value)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad value for {key}: {exc}") from None


def format_value(value) -> str:
    if value is None:
        return "none"
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, (list, tuple)):
        return ", ".join(format_value(v) for v in value)
    return str(value)


def parse_text(text: str, source: str = "<config>") -> Dict[str, Any]:
    out: Dict[str, Any] = {}
    section = ""
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if line.startswith("[") and line.endswith("]"):
            section = line[1:-1].strip()
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value'")
        key, value = (part.strip() for part in line.split("=", 1))
        if section and "." not in key:
            key = f"{section}.{key}"
        try:
            out[key] = parse_value(key, value)
        except ConfigError as exc:
            raise ConfigError(f"{source}:{lineno}: {exc}") from None
    return out


def parse_assignments(items: Iterable[str]) -> Dict[str, Any]:
    out = {}
    for item in items:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        key, value = (part.strip() for part in item.split("=", 1))
        out[key] = parse_value(key, value)
    return out


def load_file(path) -> Dict[str, Any]:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    if path.suffix == ".json":
        # a run-metadata sidecar carries the fully resolved config
        try:
            blob = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON: {exc}") from None
        values = blob.get("config", blob)
        return {k: parse_value(k, v) for k, v in values.items()}
    return parse_text(text, str(path))


@dataclass(frozen=True)
class ExperimentConfig:
    values: Mapping[str, Any]

    def __getitem__(self, key):
        return self.values[key]

    def replace(self, **updates) -> "ExperimentConfig":
        return resolve(base=self.values, overrides=updates)

    def updated(self, overrides: Mapping[str, Any]) -> "ExperimentConfig":
        return resolve(base=self.values, overrides=overrides)

    def to_text(self) -> str:
        return "".join(f"{k} = {format_value(self.values[k])}\n" for k in SCHEMA)

    def to_json_dict(self) -> Dict[str, Any]:
        out = {}
        for k in SCHEMA:
            v = self.values[k]
            out[k] = format_value(v) if isinstance(v, float) and not math.isfinite(v) else v
        return out

    @property
    def algorithms(self):
        return list(self.values["algo.name"])

    @property
    def seeds(self):
        return list(self.values["run.seeds"])


def resolve(preset: Optional[str] = None, file_values: Optional[Mapping] = None,
            overrides: Optional[Mapping] = None, base: Optional[Mapping] = None) -> ExperimentConfig:
    values = {k: default for k, (_, default) in SCHEMA.items()}
    if base:
        values.update(base)
    if preset:
        if preset not in PRESETS:
            raise ConfigError(f"unknown preset {preset!r}; choose from {sorted(PRESETS)}")
        values.update({k: parse_value(k, v) for k, v in PRESETS[preset].items()})
    for layer in (file_values, overrides):
        if layer:
            for k, v in layer.items():
                values[k] = parse_value(k, v)
    cfg = ExperimentConfig(values)
    validate(cfg)
    return cfg


def validate(cfg: ExperimentConfig) -> None:
    v = cfg.values
    unknown = set(v) - set(SCHEMA)
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    if v["experiment"] not in EXPERIMENTS:
        raise ConfigError(f"experiment must be one of {EXPERIMENTS}")
    for name in v["algo.name"]:
        if name not in ALGORITHM_NAMES:
            raise ConfigError(f"unknown algorithm {name!r}; choose from {ALGORITHM_NAMES}")
    if not v["algo.name"]:
        raise ConfigError("algo.name must list at least one algorithm")
    positive = ["data.clients", "data.samples_per_client", "run.rounds", "run.local_steps",
                "run.batch_size", "run.eval_every", "run.workers", "schedule.stages"]
    for key in positive:
        if v[key] < 1:
            raise ConfigError(f"{key} must be positive")
    if v["experiment"] == "sparse_linear" and not (1 <= v["data.s"] <= v["data.p"]):
        raise ConfigError("need 1 <= data.s <= data.p")
    if v["experiment"] == "low_rank" and not (1 <= v["data.rank"] <= min(v["data.p1"], v["data.p2"])):
        raise ConfigError("need 1 <= data.rank <= min(data.p1, data.p2)")
    if v["experiment"] == "logistic_csv" and not v["data.csv_dir"]:
        raise ConfigError("logistic_csv needs data.csv_dir")
    if not 0 <= v["run.clients_per_round"] <= v["data.clients"] and v["experiment"] != "logistic_csv":
        raise ConfigError("run.clients_per_round must be in [0, data.clients]")
    if v["algo.mu"] <= 0 or v["algo.L"] < v["algo.mu"]:
        raise ConfigError("need algo.mu > 0 and algo.L >= algo.mu")
    if v["algo.lam"] < 0 or v["algo.eta_c"] < 0 or v["algo.eta_s"] < 0:
        raise ConfigError("algo.lam, algo.eta_c, algo.eta_s must be nonnegative")
    if not v["algo.epsilon0"] > 0 or not v["domain.radius"] > 0:
        raise ConfigError("algo.epsilon0 and domain.radius must be positive")
    if v["reg.kind"] not in (None, "l1", "nuclear", "zero"):
        raise ConfigError("reg.kind must be l1, nuclear or zero")
    if not v["run.seeds"]:
        raise ConfigError("run.seeds must list at least one seed")
    sched_len = len(v["schedule.lambdas"])
    for key in ("schedule.epsilons", "schedule.rounds", "schedule.local_steps"):
        n = len(v[key])
        if n and sched_len and n != sched_len:
            raise ConfigError(f"{key} needs {sched_len} entries to match schedule.lambdas")
