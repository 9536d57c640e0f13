"""Institution and server state, boundary messages and the communication ledger.

Every array that crosses the institution/server boundary is wrapped in a
:class:`Message` and appended to a :class:`CommLedger`, so transferred data is
counted in scalars (the unit of the ``float32`` figures it is compared with).
"""

from __future__ import annotations

import csv
import json
import math
from collections import defaultdict
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import ConfigError, LedgerError
from .nn import LayerStack, OptimState, deserialize_weights, join, serialize_weights

SERVER = -1


class Variant(str, Enum):
    FEATURE_MAPS = "FeatureMaps"
    CUT_GRADIENTS = "CutGradients"
    FULL_WEIGHTS = "FullWeights"
    FULL_GRADIENTS = "FullGradients"
    PREDICTION_CHUNK = "PredictionChunk"
    CHUNK_GRADIENTS = "ChunkGradients"
    LOSS_SCALAR = "LossScalar"
    SHARED_DATA = "SharedData"


@dataclass(frozen=True)
class Message:
    variant: Variant
    origin: int
    destination: int
    payload: tuple = ()
    scalar_count: int = -1

    @property
    def direction(self) -> str:
        if self.destination == SERVER:
            return "up"
        if self.origin == SERVER:
            return "down"
        return "peer"


def payload_size(payload) -> int:
    return int(sum(np.size(p) for p in payload))


def make_message(variant: Variant, origin: int, destination: int, *arrays) -> Message:
    """Message whose ``scalar_count`` is the exact number of values carried."""
    return Message(Variant(variant), origin, destination, tuple(arrays), payload_size(arrays))


@dataclass(frozen=True)
class LedgerEntry:
    round: int
    direction: str
    variant: str
    origin: int
    destination: int
    scalars: int


class CommLedger:
    """Append-only log of messages, summarised by round, direction and variant."""

    def __init__(self):
        self._entries: list[LedgerEntry] = []
        self.sent: dict[int, int] = defaultdict(int)
        self.received: dict[int, int] = defaultdict(int)

    @property
    def entries(self) -> tuple[LedgerEntry, ...]:
        return tuple(self._entries)

    def record(self, message: Message, round: int) -> "CommLedger":
        actual = payload_size(message.payload)
        if message.scalar_count != actual:
            raise LedgerError(
                f"{message.variant.value} declares {message.scalar_count} scalars, carries {actual}")
        self._entries.append(LedgerEntry(round, message.direction, message.variant.value,
                                         message.origin, message.destination, actual))
        self.sent[message.origin] += actual
        self.received[message.destination] += actual
        return self

    def total(self, round: int | None = None, direction: str | None = None,
              variant: str | Variant | None = None) -> int:
        if isinstance(variant, Variant):
            variant = variant.value
        return sum(e.scalars for e in self._entries
                   if (round is None or e.round == round)
                   and (direction is None or e.direction == direction)
                   and (variant is None or e.variant == variant))

    def breakdown(self, round: int | None = None) -> dict[tuple[str, str], int]:
        """``{(direction, variant): scalars}`` for one round, or all rounds."""
        out: dict[tuple[str, str], int] = defaultdict(int)
        for e in self._entries:
            if round is None or e.round == round:
                out[(e.direction, e.variant)] += e.scalars
        return dict(out)

    def rounds(self) -> list[int]:
        return sorted({e.round for e in self._entries})

    def rows(self) -> list[tuple[int, str, str, int]]:
        """Aggregated ``(round, direction, variant, scalars)`` rows in sorted order."""
        agg: dict[tuple[int, str, str], int] = defaultdict(int)
        for e in self._entries:
            agg[(e.round, e.direction, e.variant)] += e.scalars
        return [(r, d, v, n) for (r, d, v), n in sorted(agg.items())]

    def to_csv(self, path) -> None:
        with Path(path).open("w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["round", "direction", "variant", "scalars"])
            w.writerows(self.rows())

    def summary(self) -> dict:
        by_dir = defaultdict(int)
        by_var = defaultdict(int)
        for e in self._entries:
            by_dir[e.direction] += e.scalars
            by_var[e.variant] += e.scalars
        return {
            "total_scalars": sum(by_dir.values()),
            "by_direction": dict(sorted(by_dir.items())),
            "by_variant": dict(sorted(by_var.items())),
            "rounds": len(self.rounds()),
            "messages": len(self._entries),
        }

    def to_json(self, path) -> None:
        Path(path).write_text(json.dumps(self.summary(), indent=2), encoding="utf-8")


def record(ledger: CommLedger, message: Message, round: int = 0) -> CommLedger:
    return ledger.record(message, round)


# ---------------------------------------------------------------------------
# Participants
# ---------------------------------------------------------------------------


class BatchIterator:
    """Shuffled minibatches over a fixed index list.

    A batch is always ``min(B, Q)`` indices; when fewer than that remain in the
    current pass the list is reshuffled and a new pass starts.
    """

    def __init__(self, indices: Sequence[int], batch_size: int, rng: np.random.Generator):
        if batch_size < 1:
            raise ConfigError("batch size must be positive")
        self.indices = np.asarray(indices, dtype=np.int64)
        if self.indices.size == 0:
            raise ConfigError("batch iterator needs at least one index")
        self.batch_size = min(batch_size, self.indices.size)
        self.rng = rng
        self._order = self.rng.permutation(self.indices)
        self.position = 0

    def __len__(self):
        return self.indices.size

    def next(self) -> np.ndarray:
        if self.position + self.batch_size > self._order.size:
            self._order = self.rng.permutation(self.indices)
            self.position = 0
        out = self._order[self.position:self.position + self.batch_size]
        self.position += self.batch_size
        return out


@dataclass
class InstitutionState:
    """One data-holding site.

    ``stack`` is the institutional sub-network for split strategies and the
    full local model otherwise.  ``server_part`` is filled by
    :func:`final_weight_transfer`.
    """

    id: int
    stack: LayerStack
    opt: OptimState
    indices: np.ndarray
    batches: BatchIterator
    server_part: LayerStack | None = None

    @property
    def n_samples(self) -> int:
        return int(len(self.indices))


@dataclass
class ServerState:
    """Server sub-network (split strategies) or the global model.

    For the serial strategies (CWT) ``stack`` holds the model as last handed
    off, which is what gets evaluated.
    """

    stack: LayerStack | None
    opt: OptimState | None
    rng: np.random.Generator
    momentum: list[np.ndarray] | None = None
    shared_pool: list[int] = field(default_factory=list)


@dataclass(frozen=True)
class RoundPlan:
    ids: tuple[int, ...]
    round: int = 0


def sample_institutions(K: int, St: int, rng: np.random.Generator, round: int = 0) -> RoundPlan:
    """Uniform draw of ``St`` distinct institutions, returned in ascending order."""
    if not 1 <= St <= K:
        raise ConfigError(f"cannot sample St={St} of K={K} institutions")
    ids = np.sort(rng.choice(K, size=St, replace=False))
    return RoundPlan(tuple(int(i) for i in ids), round)


def final_weight_transfer(server: ServerState, institutions: Sequence[InstitutionState],
                          ledger: CommLedger | None = None, round: int = 0):
    """Ship the server sub-network to every institution through the weight blob.

    Afterwards each institution holds its own institutional weights plus an
    identical copy of the server weights.
    """
    blob = serialize_weights(server.stack)
    tensors = deserialize_weights(blob)
    for inst in institutions:
        if ledger is not None:
            ledger.record(make_message(Variant.FULL_WEIGHTS, SERVER, inst.id, *tensors), round)
        part = server.stack.copy()
        part.load_state(deserialize_weights(blob))
        inst.server_part = part
    return institutions


def composite(inst: InstitutionState) -> LayerStack:
    if inst.server_part is None:
        raise ConfigError(f"institution {inst.id} has not received the server weights")
    return join(inst.stack, inst.server_part)


# ---------------------------------------------------------------------------
# Analytic traffic
# ---------------------------------------------------------------------------

SPLIT_KINDS = ("splitnn", "splitavg", "splitavg_v2")
AGGREGATION_KINDS = ("fedavg", "fedavgm", "fedavg_sd")
GRADIENT_KINDS = ("fedsgd", "fedsgd_gn")
KINDS = ("centralized", "fedavg", "fedsgd", "fedavgm", "fedavg_sd", "fedsgd_gn",
         "cwt", "splitnn", "splitavg", "splitavg_v2")


def cut_map_size(model: LayerStack, cut: int) -> int:
    """Scalars per sample at the cut boundary."""
    return int(np.prod(model.shapes()[cut]))


def analytic_floats(strategy: str, model: LayerStack | None = None, B: int = 32, St: int = 4,
                    cut: int | None = None, *, param_count: int | None = None,
                    cutmap_size: int | None = None, label_size: int = 1,
                    out_width: int | None = None) -> int:
    """Uplink scalars of one communication step.

    For the weight and gradient strategies this is one institution's upload
    (the model size), for the split strategies one server iteration summed
    over the ``St`` participants, and for CWT one hand-off.
    ``param_count`` and ``cutmap_size`` override the values read from
    ``model``, so published architectures can be plugged in directly.
    """
    if strategy not in KINDS:
        raise ConfigError(f"unknown strategy {strategy!r}")
    if param_count is None and model is not None:
        param_count = model.n_state
    if strategy in SPLIT_KINDS and cutmap_size is None:
        if model is None or cut is None:
            raise ConfigError("split strategies need a model and cut, or cutmap_size")
        cutmap_size = cut_map_size(model, cut)
    if out_width is None and model is not None and model.task is not None:
        out_width = model.task.out_width
    if strategy == "centralized":
        return 0
    if strategy in AGGREGATION_KINDS or strategy in GRADIENT_KINDS or strategy == "cwt":
        return param_count
    if strategy == "splitnn":
        return B * (cutmap_size + label_size)
    if strategy == "splitavg":
        return St * B * (cutmap_size + label_size)
    return St * (B * cutmap_size + B * out_width + 1)  # splitavg_v2


def sync_steps(sizes: Sequence[int], B: int) -> int:
    """Server steps in one synchronous epoch: ``ceil(max Q_k / B)``."""
    return max(1, math.ceil(max(sizes) / B))


def analytic_round_traffic(strategy: str, model: LayerStack, *, B: int, K: int, plan: Sequence[int],
                           sizes: Sequence[int], cut: int | None = None,
                           final: bool = False, label_size: int = 1) -> dict[tuple[str, str], int]:
    """Expected ``{(direction, variant): scalars}`` for one epoch of ``strategy``.

    ``sizes`` are the per-institution training set sizes (local plus shared
    data for FedAvg+SD); ``plan`` the participating ids.  ``model`` is the
    full model as trained (GroupNorm variant for FedSGD+GN).
    """
    out: dict[tuple[str, str], int] = defaultdict(int)
    P = model.n_state
    St = len(plan)
    batch = {k: min(B, s) for k, s in enumerate(sizes)}
    fw, fg = Variant.FULL_WEIGHTS.value, Variant.FULL_GRADIENTS.value
    if strategy in AGGREGATION_KINDS:
        out[("down", fw)] = St * P
        out[("up", fw)] = St * P
    elif strategy in GRADIENT_KINDS:
        steps = sync_steps([sizes[k] for k in plan], B)
        out[("down", fw)] = steps * St * P
        out[("up", fg)] = steps * St * P
    elif strategy == "cwt":
        out[("peer", fw)] = K * P
    elif strategy in SPLIT_KINDS:
        cm = cut_map_size(model, cut)
        if strategy == "splitnn":
            Q = sum(sizes)
            iters = max(1, Q // (B * K))
            n = sum(iters * batch[k] for k in range(K))
            out[("up", Variant.FEATURE_MAPS.value)] = n * (cm + label_size)
            out[("down", Variant.CUT_GRADIENTS.value)] = n * cm
            fi = sum(t.size for layer in model.layers[:cut]
                     for t in layer.params() + layer.buffers())
            out[("peer", fw)] = K * fi
        else:
            steps = sync_steps([sizes[k] for k in plan], B)
            n = steps * sum(batch[k] for k in plan)
            out[("down", Variant.CUT_GRADIENTS.value)] = n * cm
            if strategy == "splitavg":
                out[("up", Variant.FEATURE_MAPS.value)] = n * (cm + label_size)
            else:
                w = model.task.out_width
                out[("up", Variant.FEATURE_MAPS.value)] = n * cm
                out[("down", Variant.PREDICTION_CHUNK.value)] = n * w
                out[("up", Variant.CHUNK_GRADIENTS.value)] = n * w
                out[("up", Variant.LOSS_SCALAR.value)] = steps * St
            if final:
                fs = sum(t.size for layer in model.layers[cut:]
                         for t in layer.params() + layer.buffers())
                out[("down", fw)] = K * fs
    elif strategy != "centralized":
        raise ConfigError(f"unknown strategy {strategy!r}")
    return {k: v for k, v in out.items() if v}
