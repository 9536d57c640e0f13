"""Build datasets, models and partitions from an :class:`ExperimentConfig` and run them."""

from __future__ import annotations

import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from . import nn
from . import partition as P
from . import strategies as S
from .config import ExperimentConfig
from .errors import ConfigError
from .metrics import Metrics, RunRecord, config_hash
from .seeding import stream

log = logging.getLogger(__name__)


def _sub_seed(seed: int, name: str) -> int:
    return int(stream(seed, name).integers(2**31 - 1))


def build_dataset(cfg: ExperimentConfig, seed: int) -> tuple[P.Dataset, P.Dataset]:
    """(train, test) for ``seed``; an explicit ``dataset.seed`` pins the data."""
    d = cfg.dataset
    data_seed = d["seed"] if d["seed"] >= 0 else _sub_seed(seed, "dataset")
    if d["kind"] == "blobs":
        shape = tuple(d["shape"]) or None
        full = P.synth_classification(d["n"], d["classes"], d["dims"], d["separation"],
                                      data_seed, shape)
    elif d["kind"] == "regression":
        full = P.synth_regression(d["n"], d["dims"], d["noise"], data_seed)
    else:
        full = P.load_csv(d["path"], {"label": d["label"], "task": d["task"],
                                      "classes": d["classes"]})
    return P.train_test_split(full, d["test_fraction"], seed=data_seed)


def build_model(cfg: ExperimentConfig, data: P.Dataset, seed: int) -> nn.LayerStack:
    m = cfg.model
    rng = stream(seed, "init")
    task = data.task
    shape = data.sample_shape
    if m["kind"] == "mlp":
        if len(shape) != 1:
            raise ConfigError("model.kind: mlp needs flat features; use cnn for images")
        return nn.mlp(shape[0], m["hidden"], task, rng, batchnorm=m["batchnorm"])
    if m["kind"] == "cnn":
        if len(shape) != 3:
            raise ConfigError("model.kind: cnn needs (channels, height, width) samples")
        norm = None if m["norm"] == "none" else m["norm"]
        return nn.small_cnn(shape, m["channels"], task, rng, norm=norm, kernel=m["kernel"])
    return build_layers(m["layers"], shape, task, rng)


def build_layers(specs, in_shape, task, rng) -> nn.LayerStack:
    """Explicit layer list; widths and channel counts are inferred from the running shape."""
    layers: list[nn.Layer] = []
    shape = tuple(in_shape)
    for i, spec in enumerate(specs):
        t = spec["type"]
        if t == "dense":
            if len(shape) != 1:
                raise ConfigError(f"model.layers[{i}]: dense needs flat input, got {shape}")
            layer = nn.Dense(shape[0], spec["out"], rng)
        elif t == "conv":
            k = spec.get("kernel", 3)
            layer = nn.Conv2D(shape[0], spec["out"], k, spec.get("stride", 1), spec.get("pad", k // 2), rng)
        elif t == "relu":
            layer = nn.ReLU()
        elif t == "flatten":
            layer = nn.Flatten()
        elif t == "pool":
            layer = nn.GlobalAvgPool()
        elif t == "batchnorm":
            layer = nn.BatchNorm(shape[0])
        else:
            layer = nn.GroupNorm(spec.get("groups", nn.default_groups(shape[0], len(shape) > 1)), shape[0])
        layers.append(layer)
        shape = layer.output_shape(shape)
    return nn.LayerStack(layers, task, tuple(in_shape))


def build_partition(cfg: ExperimentConfig, train: P.Dataset, seed: int) -> P.Partition:
    p = cfg.partition
    K = p["K"]
    pseed = _sub_seed(seed, "partition")
    if p["assignments"]:
        part = P.Partition(p["assignments"])
        if part.K != K:
            raise ConfigError(f"partition.assignments: {part.K} lists for K={K}")
        if max(part.all_indices()) >= len(train):
            raise ConfigError("partition.assignments: index beyond the training set")
        return part
    if K == 1:
        return P.Partition([list(range(len(train)))])
    if p["sizes"]:
        if len(p["sizes"]) != K:
            raise ConfigError("partition.sizes: need one size per institution")
        return P.make_quantity_skew_partition(train, P.scale_sizes(p["sizes"], len(train)), pseed)
    dominant = p["dominant_labels"] or None
    quotas = p["quotas"] or P.feasible_quotas(train, K, dominant)
    if p["skew_target"] >= 0:
        return P.make_label_skew_partition(
            train, P.calibrate_skew(train, K, p["skew_target"], pseed, p["tolerance"],
                                    quotas=quotas, dominant_labels=dominant))
    return P.make_label_skew_partition(train, P.SkewSpec(K, p["skew_fraction"], dominant, quotas, pseed))


def strategy_config(cfg: ExperimentConfig, **override) -> S.StrategyConfig:
    s = dict(cfg.strategy)
    s.update(override)
    return S.StrategyConfig(
        kind=s["kind"], cut=s["cut"] if s["cut"] >= 0 else None, lr=s["lr"],
        momentum=s["momentum"], batch_size=s["batch_size"],
        server_momentum=s["server_momentum"], shared_fraction=s["shared_fraction"],
        gn_groups=s["gn_groups"] or None, epochs=cfg.experiment["epochs"],
        St=s["St"] or None, patience=s["patience"] or None)


@dataclass
class RunResult:
    record: RunRecord
    state: S.FederationState
    train: P.Dataset
    test: P.Dataset


def run_one(cfg: ExperimentConfig, seed: int, **override) -> RunResult:
    """Train one seed of ``cfg`` and evaluate it on the held-out split."""
    t0 = time.perf_counter()
    train, test = build_dataset(cfg, seed)
    model = build_model(cfg, train, seed)
    part = build_partition(cfg, train, seed)
    scfg = strategy_config(cfg, **override)
    ks = P.mean_pairwise_ks(train, part) if part.K > 1 else 0.0
    state = S.setup(model, train, part, scfg, seed)
    validation = test if scfg.patience else None
    S.train(state, validation=validation)
    metrics: Metrics = S.evaluate(state, test)
    log.info("%s seed %d: %s %.4f", scfg.kind, seed, "acc" if metrics.task == "classification"
             else "mae", metrics.value)
    full = cfg.to_dict()
    full["strategy"].update(override)
    for key in ("seeds", "out"):  # where and how often a config runs is not part of its identity
        full["experiment"].pop(key)
    record = RunRecord(config_hash(full), seed, scfg.kind, ks, metrics, state.round,
                       time.perf_counter() - t0, cfg.experiment["name"])
    return RunResult(record, state, train, test)


def run_seeds(cfg: ExperimentConfig, seeds=None, parallel: int = 1, **override) -> list[RunResult]:
    """Run several seeds; ``parallel > 1`` uses that many threads (results keep seed order)."""
    seeds = list(cfg.seeds if seeds is None else seeds)
    if parallel <= 1:
        return [run_one(cfg, s, **override) for s in seeds]
    with ThreadPoolExecutor(max_workers=parallel) as pool:
        return list(pool.map(lambda s: run_one(cfg, s, **override), seeds))


# ---------------------------------------------------------------------------
# Cut-layer sweep
# ---------------------------------------------------------------------------


@dataclass
class SweepRow:
    cut: int
    boundary: str
    server_params: int
    metric: float
    status: str


def chance_level(test: P.Dataset) -> float:
    """Metric of the best constant predictor (majority class, or median for MAE)."""
    if test.task.kind == "classification":
        return float(np.bincount(test.labels.astype(int)).max() / len(test))
    return float(np.mean(np.abs(test.labels - np.median(test.labels))))


def sweep_cut(cfg: ExperimentConfig, seed: int, margin: float = 0.05) -> list[SweepRow]:
    """Run the configured split strategy at every cut ``0..N``.

    A row is FAILED when the server sub-network has no learnable weights (the
    institutions then never share anything) or when its metric is within
    ``margin`` of the constant-predictor level.
    """
    import warnings

    if cfg.strategy["kind"] not in ("splitnn", "splitavg", "splitavg_v2"):
        raise ConfigError("strategy.kind: sweep-cut needs a split strategy")
    train, _ = build_dataset(cfg, seed)
    n_layers = len(build_model(cfg, train, seed).layers)
    rows = []
    for cut in range(n_layers + 1):
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", nn.LastLayerCutWarning)
            res = run_one(cfg, seed, cut=cut)
        model = res.state.model
        fs_params = sum(t.size for layer in model.layers[cut:] for t in layer.params())
        name = "input" if cut == 0 else f"after {type(model.layers[cut - 1]).__name__}"
        metric = res.record.metrics.value
        chance = chance_level(res.test)
        if res.test.task.kind == "classification":
            near_chance = metric <= chance + margin
        else:
            near_chance = metric >= chance * (1 - margin)
        if fs_params == 0:
            status = "FAILED: no server weights"
        elif near_chance:
            status = "FAILED: near chance"
        else:
            status = "ok"
        rows.append(SweepRow(cut, name, fs_params, metric, status))
    return rows
