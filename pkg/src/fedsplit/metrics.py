"""Evaluation metrics, the feature-divergence diagnostic, embedding export and result files."""

from __future__ import annotations

import csv
import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import ConfigError

SCHEMA_VERSION = 1


def accuracy(pred: np.ndarray, labels) -> float:
    """Fraction of rows whose argmax matches the integer label."""
    labels = np.asarray(labels).astype(np.int64)
    return float(np.mean(np.argmax(pred, axis=1) == labels))


def mae(pred: np.ndarray, labels) -> float:
    return float(np.mean(np.abs(np.asarray(pred, float).reshape(len(pred), -1)[:, 0]
                                - np.asarray(labels, float))))


def score(kind: str, pred: np.ndarray, labels) -> float:
    if kind == "classification":
        return accuracy(pred, labels)
    if kind == "regression":
        return mae(pred, labels)
    raise ConfigError(f"unknown task kind {kind!r}")


@dataclass
class Metrics:
    task: str
    per_institution: list[float]
    loss_curve: list[float] = field(default_factory=list)
    comm_totals: dict = field(default_factory=dict)

    @property
    def value(self) -> float:
        return float(np.mean(self.per_institution))

    @property
    def accuracy(self) -> float | None:
        return self.value if self.task == "classification" else None

    @property
    def mae(self) -> float | None:
        return self.value if self.task == "regression" else None

    def to_dict(self) -> dict:
        d = asdict(self)
        d["accuracy" if self.task == "classification" else "mae"] = self.value
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "Metrics":
        return cls(d["task"], list(d["per_institution"]), list(d["loss_curve"]),
                   dict(d["comm_totals"]))


def config_hash(config: dict) -> str:
    """Stable digest of a JSON-serialisable configuration."""
    canon = json.dumps(config, sort_keys=True, separators=(",", ":"), default=str)
    return hashlib.sha256(canon.encode()).hexdigest()[:16]


@dataclass
class RunRecord:
    config_hash: str
    seed: int
    strategy: str
    partition_ks: float | None
    metrics: Metrics
    epochs: int
    wall_time: float
    label: str = ""

    def to_dict(self) -> dict:
        d = asdict(self)
        d["metrics"] = self.metrics.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "RunRecord":
        d = dict(d)
        d["metrics"] = Metrics.from_dict(d["metrics"])
        return cls(**d)


CSV_COLUMNS = ["label", "strategy", "seed", "config_hash", "partition_ks", "task", "metric",
               "epochs", "total_scalars", "wall_time"]


def emit_report(records: Sequence[RunRecord], out_dir) -> tuple[Path, Path]:
    """Write ``results.json`` and ``results.csv`` into ``out_dir``."""
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
        jpath, cpath = out / "results.json", out / "results.csv"
        jpath.write_text(json.dumps({"schema_version": SCHEMA_VERSION,
                                     "records": [r.to_dict() for r in records]}, indent=2),
                         encoding="utf-8")
        with cpath.open("w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(CSV_COLUMNS)
            for r in records:
                w.writerow([r.label, r.strategy, r.seed, r.config_hash,
                            "" if r.partition_ks is None else repr(r.partition_ks),
                            r.metrics.task, repr(r.metrics.value), r.epochs,
                            r.metrics.comm_totals.get("total_scalars", 0), f"{r.wall_time:.3f}"])
    except OSError as e:
        raise OSError(f"cannot write report to {out}: {e.strerror or e}") from e
    return jpath, cpath


def load_report(path) -> list[RunRecord]:
    path = Path(path)
    if path.is_dir():
        path = path / "results.json"
    data = json.loads(path.read_text(encoding="utf-8"))
    if data.get("schema_version") != SCHEMA_VERSION:
        raise ConfigError(f"{path}: unsupported schema version {data.get('schema_version')!r}")
    return [RunRecord.from_dict(r) for r in data["records"]]


# ---------------------------------------------------------------------------
# Diagnostics
# ---------------------------------------------------------------------------


def feature_divergence(features: Sequence[np.ndarray]) -> list[float]:
    """Distance of each institution's mean feature from the pooled mean.

    Distances are L2 norms divided by the pooled feature standard deviation
    (root mean of the per-dimension variances).  Returns zeros when the pooled
    features have no spread.
    """
    if len(features) < 2:
        raise ConfigError("feature divergence needs at least two institutions")
    arrs = [np.asarray(f, float) for f in features]
    if any(a.ndim == 0 or a.shape[0] == 0 for a in arrs):
        raise ConfigError("every institution needs at least one feature vector")
    flat = [a.reshape(a.shape[0], -1) for a in arrs]
    pooled = np.concatenate(flat, axis=0)
    mu = pooled.mean(axis=0)
    sd = float(np.sqrt(pooled.var(axis=0).mean()))
    if sd == 0.0:
        return [0.0] * len(flat)
    return [float(np.linalg.norm(f.mean(axis=0) - mu) / sd) for f in flat]


def boundary_index(model, layer_tag) -> int:
    """Resolve a tag (boundary index, ``"input"``, ``"output"`` or a layer class name) to a boundary."""
    n = len(model.layers)
    if isinstance(layer_tag, (int, np.integer)) or (isinstance(layer_tag, str) and layer_tag.isdigit()):
        c = int(layer_tag)
        if 0 <= c <= n:
            return c
    elif layer_tag == "input":
        return 0
    elif layer_tag == "output":
        return n
    elif isinstance(layer_tag, str):
        # "Dense" names the output of the first Dense layer, "Dense:2" the second
        name, _, nth = layer_tag.partition(":")
        hits = [i + 1 for i, layer in enumerate(model.layers) if type(layer).__name__ == name]
        k = int(nth) if nth.isdigit() else 1
        if 1 <= k <= len(hits):
            return hits[k - 1]
    raise ConfigError(f"unknown layer tag {layer_tag!r} for a {n}-layer model")


def embeddings(model, features: np.ndarray, boundary: int, batch_size: int = 1024) -> np.ndarray:
    from . import nn

    head = nn.LayerStack(list(model.layers[:boundary]), None, model.input_shape)
    rows = [nn.forward(head, features[i:i + batch_size], train=False)[0]
            for i in range(0, len(features), batch_size)]
    out = np.concatenate(rows, axis=0) if rows else np.zeros((0,))
    return out.reshape(len(features), -1)


def export_embeddings(model, dataset, layer_tag, path) -> Path:
    """CSV of ``sample_id, label, f0..`` with activations at ``layer_tag``."""
    c = boundary_index(model, layer_tag)
    emb = embeddings(model, dataset.features, c)
    path = Path(path)
    with path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["sample_id", "label"] + [f"f{j}" for j in range(emb.shape[1])])
        for i, (lab, row) in enumerate(zip(dataset.labels, emb)):
            w.writerow([i, repr(lab.item())] + [repr(float(v)) for v in row])
    return path
