"""Datasets, heterogeneous partitions and the KS measure of label skew."""

from __future__ import annotations

import csv
import itertools
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import ConfigError, PartitionError
from .nn import REGRESSION, Task, classification


@dataclass
class Dataset:
    """``features`` is (M, ...) float64; ``labels`` is a length-M vector."""

    features: np.ndarray
    labels: np.ndarray
    task: Task

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        self.labels = np.asarray(self.labels).reshape(-1)
        m = self.features.shape[0]
        if m < 1:
            raise ConfigError("dataset needs at least one sample")
        if self.labels.shape[0] != m:
            raise ConfigError(f"{self.labels.shape[0]} labels for {m} samples")
        if not np.isfinite(self.features).all():
            raise ConfigError("dataset features contain non-finite values")
        if self.task.kind == "classification":
            if not np.all(self.labels == np.round(self.labels)):
                raise ConfigError("class labels must be integers")
            self.labels = self.labels.astype(np.int64)
            if self.labels.min() < 0 or self.labels.max() >= self.task.classes:
                raise ConfigError(f"class labels must lie in [0, {self.task.classes})")
        else:
            self.labels = self.labels.astype(np.float64)

    def __len__(self):
        return self.features.shape[0]

    @property
    def sample_shape(self) -> tuple[int, ...]:
        return self.features.shape[1:]

    def subset(self, indices) -> "Dataset":
        idx = np.asarray(indices, dtype=np.int64)
        return Dataset(self.features[idx], self.labels[idx], self.task)


@dataclass
class Partition:
    """Disjoint, nonempty index lists, one per institution."""

    assignments: list[list[int]]

    def __post_init__(self):
        self.assignments = [[int(i) for i in a] for a in self.assignments]
        seen: set[int] = set()
        for k, a in enumerate(self.assignments):
            if not a:
                raise PartitionError(f"institution {k} received no samples")
            s = set(a)
            if len(s) != len(a) or seen & s:
                raise PartitionError("partition assignments overlap")
            seen |= s

    @property
    def K(self) -> int:
        return len(self.assignments)

    @property
    def sizes(self) -> list[int]:
        return [len(a) for a in self.assignments]

    def all_indices(self) -> list[int]:
        return [i for a in self.assignments for i in a]

    def to_json(self) -> str:
        return json.dumps(self.assignments)

    @classmethod
    def from_json(cls, text: str) -> "Partition":
        return cls(json.loads(text))


@dataclass
class SkewSpec:
    K: int
    skew_fraction: float = 0.0
    dominant_labels: list[int] | None = None  # class index, or quantile bin for regression
    quotas: list[int] | None = None
    seed: int = 0
    measured_ks: float | None = field(default=None, compare=False)

    def __post_init__(self):
        if self.K < 1:
            raise ConfigError("K must be positive")
        if not 0.0 <= self.skew_fraction <= 1.0:
            raise ConfigError("skew_fraction must lie in [0, 1]")


# ---------------------------------------------------------------------------
# KS statistic
# ---------------------------------------------------------------------------


def ks_two_sample(labels_a, labels_b) -> float:
    """Largest gap between the two empirical CDFs."""
    a = np.sort(np.asarray(labels_a, dtype=np.float64).reshape(-1))
    b = np.sort(np.asarray(labels_b, dtype=np.float64).reshape(-1))
    if a.size == 0 or b.size == 0:
        raise ConfigError("ks_two_sample needs two nonempty samples")
    grid = np.concatenate([a, b])
    cdf_a = np.searchsorted(a, grid, side="right") / a.size
    cdf_b = np.searchsorted(b, grid, side="right") / b.size
    return float(np.max(np.abs(cdf_a - cdf_b)))


def pairwise_ks(dataset: Dataset, partition: Partition) -> np.ndarray:
    """Symmetric K x K matrix of KS statistics between institutions."""
    k = partition.K
    out = np.zeros((k, k))
    labels = [dataset.labels[a] for a in partition.assignments]
    for i, j in itertools.combinations(range(k), 2):
        out[i, j] = out[j, i] = ks_two_sample(labels[i], labels[j])
    return out


def mean_pairwise_ks(dataset: Dataset, partition: Partition) -> float:
    k = partition.K
    if k < 2:
        raise ConfigError("mean pairwise KS needs at least two institutions")
    mat = pairwise_ks(dataset, partition)
    return float(mat[np.triu_indices(k, 1)].mean())


# ---------------------------------------------------------------------------
# Partitioners
# ---------------------------------------------------------------------------


def dominance_keys(dataset: Dataset, n_bins: int = 4) -> np.ndarray:
    """Class index, or quantile-bin index for regression labels."""
    if dataset.task.kind == "classification":
        return dataset.labels
    edges = np.quantile(dataset.labels, np.linspace(0, 1, n_bins + 1)[1:-1])
    return np.searchsorted(edges, dataset.labels, side="right")


def _n_keys(dataset, n_bins):
    return dataset.task.classes if dataset.task.kind == "classification" else n_bins


def feasible_quotas(dataset: Dataset, K: int, dominant_labels=None, n_bins: int = 4) -> list[int]:
    """Equal quotas that still fit when every institution is fully skewed.

    Starts from ``M // K`` and shrinks until each dominant label has enough
    samples for all institutions that share it.
    """
    dominant = (list(dominant_labels) if dominant_labels is not None
                else [i % _n_keys(dataset, n_bins) for i in range(K)])
    counts = np.bincount(dominance_keys(dataset, n_bins), minlength=max(dominant) + 1)
    q = len(dataset) // K
    for key in set(dominant):
        q = min(q, int(counts[key]) // dominant.count(key))
    if q < 1:
        raise PartitionError("some dominant label has too few samples for its institutions")
    return [q] * K


def make_label_skew_partition(dataset: Dataset, spec: SkewSpec, n_bins: int = 4) -> Partition:
    """Each institution takes ``round(s * quota)`` samples of its dominant label,
    then fills the rest of its quota uniformly from whatever is left.

    Dominant draws happen for all institutions before any remainder draw.
    """
    m, k = len(dataset), spec.K
    quotas = list(spec.quotas) if spec.quotas is not None else [m // k] * k
    dominant = (list(spec.dominant_labels) if spec.dominant_labels is not None
                else [i % _n_keys(dataset, n_bins) for i in range(k)])
    if len(quotas) != k or len(dominant) != k:
        raise ConfigError("quotas and dominant_labels need one entry per institution")
    if sum(quotas) > m or min(quotas) < 1:
        raise PartitionError(f"quotas {quotas} infeasible for {m} samples")

    rng = np.random.default_rng(spec.seed)
    keys = dominance_keys(dataset, n_bins)
    order = rng.permutation(m)
    taken = np.zeros(m, dtype=bool)
    pools = {key: [i for i in order if keys[i] == key] for key in set(dominant)}
    cursor = dict.fromkeys(pools, 0)
    out: list[list[int]] = [[] for _ in range(k)]

    for inst, (quota, key) in enumerate(zip(quotas, dominant)):
        need = int(round(spec.skew_fraction * quota))
        pool, start = pools[key], cursor[key]
        if start + need > len(pool):
            raise PartitionError(
                f"label pool {key} exhausted: institution {inst} needs {need}, "
                f"{len(pool) - start} left")
        chosen = pool[start:start + need]
        cursor[key] = start + need
        taken[chosen] = True
        out[inst].extend(int(i) for i in chosen)

    rest = iter(int(i) for i in rng.permutation(m) if not taken[i])
    for inst, quota in enumerate(quotas):
        out[inst].extend(itertools.islice(rest, quota - len(out[inst])))
        if len(out[inst]) != quota:
            raise PartitionError("not enough samples left to fill quotas")
    return Partition(out)


def make_iid_partition(dataset: Dataset, K: int, seed: int = 0) -> Partition:
    return make_label_skew_partition(dataset, SkewSpec(K, 0.0, seed=seed))


def calibrate_skew(dataset: Dataset, K: int, target_ks: float, seed: int = 0,
                   tol: float = 0.05, max_iter: int = 30, quotas=None,
                   dominant_labels=None) -> SkewSpec:
    """Bisect the skew fraction until the mean pairwise KS is within ``tol``.

    When the target is out of reach the closest spec found is returned; its
    ``measured_ks`` tells how close it got.
    """
    if not 0.0 <= target_ks <= 1.0:
        raise ConfigError("target KS must lie in [0, 1]")

    def measure(s):
        spec = SkewSpec(K, s, dominant_labels, quotas, seed)
        spec.measured_ks = mean_pairwise_ks(dataset, make_label_skew_partition(dataset, spec))
        return spec

    lo, hi = measure(0.0), measure(1.0)
    if target_ks <= lo.measured_ks:
        return lo
    best = min((lo, hi), key=lambda sp: abs(sp.measured_ks - target_ks))
    if target_ks >= hi.measured_ks:
        return hi
    a, b = 0.0, 1.0
    for _ in range(max_iter):
        if abs(best.measured_ks - target_ks) <= tol:
            break
        mid = measure((a + b) / 2)
        if abs(mid.measured_ks - target_ks) < abs(best.measured_ks - target_ks):
            best = mid
        if mid.measured_ks < target_ks:
            a = mid.skew_fraction
        else:
            b = mid.skew_fraction
    return best


def make_quantity_skew_partition(dataset: Dataset, sizes: Sequence[int], seed: int = 0) -> Partition:
    """IID draws with the given (unequal) institution sizes."""
    sizes = [int(s) for s in sizes]
    if not sizes or min(sizes) < 1 or sum(sizes) > len(dataset):
        raise PartitionError(f"sizes {sizes} infeasible for {len(dataset)} samples")
    perm = np.random.default_rng(seed).permutation(len(dataset))
    bounds = np.cumsum([0] + sizes)
    return Partition([perm[bounds[i]:bounds[i + 1]].tolist() for i in range(len(sizes))])


def scale_sizes(sizes: Sequence[int], total: int) -> list[int]:
    """Rescale institution sizes to sum to at most ``total``, each at least 1."""
    s = sum(sizes)
    return [max(1, int(math.floor(x * total / s))) for x in sizes]


def train_test_split(dataset: Dataset, test_fraction: float, seed: int = 0):
    m = len(dataset)
    n_test = int(round(test_fraction * m))
    if not 0 < n_test < m:
        raise ConfigError(f"test_fraction {test_fraction} leaves an empty split")
    perm = np.random.default_rng(seed).permutation(m)
    return dataset.subset(np.sort(perm[n_test:])), dataset.subset(np.sort(perm[:n_test]))


# ---------------------------------------------------------------------------
# Synthetic data
# ---------------------------------------------------------------------------


def synth_classification(n: int, C: int = 2, dims: int = 8, separation: float = 4.0,
                         seed: int = 0, shape: tuple[int, ...] | None = None) -> Dataset:
    """Balanced Gaussian blobs with unit covariance.

    Class means sit on orthogonal directions (random rotation) so every pair
    of means is ``separation`` apart.  ``shape`` reshapes each sample, e.g. to
    (channels, H, W) for convolutional models.
    """
    if shape is not None:
        dims = int(np.prod(shape))
    if C < 2 or dims < 1 or n < 10 * C or separation < 0:
        raise ConfigError("synth_classification needs C >= 2, dims >= 1, n >= 10*C, separation >= 0")
    rng = np.random.default_rng(seed)
    basis, _ = np.linalg.qr(rng.normal(size=(max(dims, C), max(dims, C))))
    if C <= dims:
        means = basis[:C, :dims] * separation / math.sqrt(2)
    else:
        raw = rng.normal(size=(C, dims))
        means = raw / np.linalg.norm(raw, axis=1, keepdims=True) * separation / 2
    labels = rng.permutation(np.arange(n) % C)
    x = means[labels] + rng.normal(size=(n, dims))
    if shape is not None:
        x = x.reshape((n,) + tuple(shape))
    return Dataset(x, labels, classification(C))


def synth_regression(n: int, dims: int = 8, noise: float = 0.1, seed: int = 0) -> Dataset:
    """Linear target plus a tanh nonlinearity and Gaussian noise."""
    if n < 10 or dims < 1 or noise < 0:
        raise ConfigError("synth_regression needs n >= 10, dims >= 1, noise >= 0")
    rng = np.random.default_rng(seed)
    w = rng.normal(size=dims) / math.sqrt(dims)
    v = rng.normal(size=dims) / math.sqrt(dims)
    x = rng.normal(size=(n, dims))
    y = x @ w + np.tanh(2.0 * (x @ v)) + noise * rng.normal(size=n)
    return Dataset(x, y, REGRESSION)


# ---------------------------------------------------------------------------
# CSV
# ---------------------------------------------------------------------------


def load_csv(path, schema: dict | None = None) -> Dataset:
    """Read a header-plus-rows CSV with one label column (default ``label``).

    ``schema`` keys: ``label`` (column name), ``features`` (column list,
    default all others), ``task`` (``classification``/``regression``) and
    ``classes``.
    """
    schema = dict(schema or {})
    label_col = schema.get("label", "label")
    path = Path(path)
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise ConfigError(f"{path}: empty file") from None
        if label_col not in header:
            raise ConfigError(f"{path}: no label column {label_col!r} in header")
        feat_cols = schema.get("features") or [h for h in header if h != label_col]
        missing = [c for c in feat_cols if c not in header]
        if missing:
            raise ConfigError(f"{path}: feature columns {missing} not in header")
        pos = [header.index(c) for c in feat_cols]
        lpos = header.index(label_col)
        rows, labels = [], []
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(header):
                raise ConfigError(f"{path}:{lineno}: expected {len(header)} cells, got {len(row)}")
            try:
                rows.append([float(row[p]) for p in pos])
                labels.append(float(row[lpos]))
            except ValueError as exc:
                raise ConfigError(f"{path}:{lineno}: non-numeric cell ({exc})") from None
    if not rows:
        raise ConfigError(f"{path}: no data rows")
    labels = np.array(labels)
    if schema.get("task", "classification") == "regression":
        task = REGRESSION
    else:
        task = classification(int(schema.get("classes", max(2, int(labels.max()) + 1))))
    return Dataset(np.array(rows), labels, task)


def write_csv(dataset: Dataset, path) -> None:
    feats = dataset.features.reshape(len(dataset), -1)
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow([f"x{i}" for i in range(feats.shape[1])] + ["label"])
        for row, lab in zip(feats, dataset.labels):
            w.writerow([repr(float(v)) for v in row] + [repr(lab.item())])
