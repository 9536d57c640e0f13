"""Experiment configuration: a TOML file with a strict schema.

Every section is optional except ``[strategy]``.  Unknown sections or keys
raise :class:`ConfigError` naming the offending dotted key, before any
computation starts.

Example::

    [experiment]
    seeds = [0, 1, 2]
    epochs = 30

    [dataset]
    kind = "blobs"
    n = 2000

    [model]
    kind = "mlp"
    hidden = [32]
    batchnorm = true

    [partition]
    K = 4
    skew_target = 0.67

    [strategy]
    kind = "splitavg"
    cut = 1
"""

from __future__ import annotations

import sys
from dataclasses import dataclass, field
from pathlib import Path

from .errors import ConfigError
from .federation import KINDS

if sys.version_info >= (3, 11):
    import tomllib
else:  # pragma: no cover
    import tomli as tomllib

# key -> (accepted types, default); a default of REQUIRED must be supplied
REQUIRED = object()
NUM = (int, float)

SCHEMA: dict[str, dict[str, tuple]] = {
    "experiment": {
        "name": (str, "experiment"),
        "seeds": (list, [0]),
        "epochs": (int, 30),
        "out": (str, "results"),
        "embeddings": (str, ""),
    },
    "dataset": {
        "kind": (str, "blobs"),  # blobs | regression | csv
        "n": (int, 2000),
        "classes": (int, 2),
        "dims": (int, 8),
        "separation": (NUM, 4.0),
        "noise": (NUM, 0.1),
        "shape": (list, []),
        "path": (str, ""),
        "task": (str, "classification"),
        "label": (str, "label"),
        "test_fraction": (NUM, 0.25),
        "seed": (int, -1),  # -1: derive from the master seed
    },
    "model": {
        "kind": (str, "mlp"),  # mlp | cnn | layers
        "hidden": (list, [32]),
        "batchnorm": (bool, True),
        "channels": (list, [8, 16]),
        "norm": (str, "batch"),
        "kernel": (int, 3),
        "layers": (list, []),
    },
    "partition": {
        "K": (int, 4),
        "skew_target": (NUM, -1.0),
        "skew_fraction": (NUM, 0.0),
        "tolerance": (NUM, 0.05),
        "dominant_labels": (list, []),
        "quotas": (list, []),
        "sizes": (list, []),
        "assignments": (list, []),
    },
    "strategy": {
        "kind": (str, REQUIRED),
        "cut": (int, -1),
        "lr": (NUM, 0.001),
        "momentum": (NUM, 0.9),
        "batch_size": (int, 32),
        "server_momentum": (NUM, 0.9),
        "shared_fraction": (NUM, 0.05),
        "gn_groups": (int, 0),
        "St": (int, 0),
        "patience": (int, 0),
    },
}

LAYER_KEYS = {
    "dense": {"out"},
    "conv": {"out", "kernel", "stride", "pad"},
    "relu": set(),
    "flatten": set(),
    "pool": set(),
    "batchnorm": set(),
    "groupnorm": {"groups"},
}


@dataclass
class ExperimentConfig:
    experiment: dict = field(default_factory=dict)
    dataset: dict = field(default_factory=dict)
    model: dict = field(default_factory=dict)
    partition: dict = field(default_factory=dict)
    strategy: dict = field(default_factory=dict)
    source: str = ""

    def to_dict(self) -> dict:
        return {s: dict(getattr(self, s)) for s in SCHEMA}

    @property
    def seeds(self) -> list[int]:
        return list(self.experiment["seeds"])


def _check_type(key, value, types):
    if types is bool:
        ok = isinstance(value, bool)
    else:
        ok = isinstance(value, types) and not (isinstance(value, bool) and types is not bool)
    if not ok:
        names = types.__name__ if isinstance(types, type) else "number"
        raise ConfigError(f"{key}: expected {names}, got {type(value).__name__}")


def parse_config(raw: dict, source: str = "") -> ExperimentConfig:
    """Validate a nested mapping and fill defaults."""
    unknown = sorted(set(raw) - set(SCHEMA))
    if unknown:
        raise ConfigError(f"unknown section [{unknown[0]}]")
    if "strategy" not in raw:
        raise ConfigError("missing section [strategy]")
    sections = {}
    for name, schema in SCHEMA.items():
        given = raw.get(name, {})
        if not isinstance(given, dict):
            raise ConfigError(f"{name}: expected a section")
        for key in given:
            if key not in schema:
                raise ConfigError(f"unknown key {name}.{key}")
        out = {}
        for key, (types, default) in schema.items():
            if key in given:
                _check_type(f"{name}.{key}", given[key], types)
                out[key] = given[key]
            elif default is REQUIRED:
                raise ConfigError(f"missing key {name}.{key}")
            else:
                out[key] = list(default) if isinstance(default, list) else default
        sections[name] = out
    cfg = ExperimentConfig(**sections, source=source)
    _validate(cfg)
    return cfg


def _validate(cfg: ExperimentConfig):
    s, d, m, p, e = cfg.strategy, cfg.dataset, cfg.model, cfg.partition, cfg.experiment
    if s["kind"] not in KINDS:
        raise ConfigError(f"strategy.kind: unknown strategy {s['kind']!r}; choose from {', '.join(KINDS)}")
    if s["kind"] in ("splitnn", "splitavg", "splitavg_v2") and s["cut"] < 0:
        raise ConfigError(f"strategy.cut: required for {s['kind']}")
    if d["kind"] not in ("blobs", "regression", "csv"):
        raise ConfigError(f"dataset.kind: unknown dataset {d['kind']!r}")
    if d["kind"] == "csv" and not d["path"]:
        raise ConfigError("dataset.path: required for csv datasets")
    if d["task"] not in ("classification", "regression"):
        raise ConfigError(f"dataset.task: unknown task {d['task']!r}")
    if not 0 < d["test_fraction"] < 1:
        raise ConfigError("dataset.test_fraction: must lie in (0, 1)")
    if m["kind"] not in ("mlp", "cnn", "layers"):
        raise ConfigError(f"model.kind: unknown model {m['kind']!r}")
    if m["norm"] not in ("batch", "group", "none"):
        raise ConfigError(f"model.norm: unknown norm {m['norm']!r}")
    for i, layer in enumerate(m["layers"]):
        if not isinstance(layer, dict) or layer.get("type") not in LAYER_KEYS:
            raise ConfigError(f"model.layers[{i}].type: expected one of {', '.join(LAYER_KEYS)}")
        extra = set(layer) - {"type"} - LAYER_KEYS[layer["type"]]
        if extra:
            raise ConfigError(f"unknown key model.layers[{i}].{sorted(extra)[0]}")
    if m["kind"] == "layers" and not m["layers"]:
        raise ConfigError("model.layers: required when model.kind = 'layers'")
    if p["K"] < 1:
        raise ConfigError("partition.K: must be >= 1")
    if p["skew_target"] > 1 or not 0 <= p["skew_fraction"] <= 1:
        raise ConfigError("partition.skew_target/skew_fraction: must lie in [0, 1]")
    if not e["seeds"] or not all(isinstance(x, int) for x in e["seeds"]):
        raise ConfigError("experiment.seeds: expected a non-empty list of integers")
    if e["epochs"] < 0:
        raise ConfigError("experiment.epochs: must be >= 0")


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as e:
        raise ConfigError(f"{path}: {e.strerror or e}") from e
    try:
        raw = tomllib.loads(text)
    except tomllib.TOMLDecodeError as e:
        raise ConfigError(f"{path}: {e}") from e
    return parse_config(raw, str(path))
