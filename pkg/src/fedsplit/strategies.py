"""Training procedures: centralized baseline, seven comparison methods, SplitAVG and SplitAVG-v2.

Each ``run_*`` function advances a :class:`FederationState` by one round or
epoch and returns it.  All gradients are taken of a SUM-reduced loss and
divided by the number of samples that produced them before any optimizer
step, so step sizes do not depend on how a batch was assembled.
"""

from __future__ import annotations

import logging
import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from . import nn
from .errors import ConfigError
from .federation import (
    KINDS, SERVER, SPLIT_KINDS,
    BatchIterator, CommLedger, InstitutionState, RoundPlan, ServerState, Variant,
    composite, final_weight_transfer, make_message, sample_institutions, sync_steps,
)
from .metrics import Metrics, score
from .partition import Dataset, Partition
from .seeding import stream

log = logging.getLogger(__name__)


@dataclass
class StrategyConfig:
    kind: str
    cut: int | None = None
    lr: float = 0.001
    momentum: float = 0.9
    batch_size: int = 32
    server_momentum: float = 0.9
    shared_fraction: float = 0.05
    gn_groups: int | None = None
    epochs: int = 1
    St: int | None = None
    patience: int | None = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigError(f"unknown strategy {self.kind!r}; choose from {', '.join(KINDS)}")
        if self.kind in SPLIT_KINDS and self.cut is None:
            raise ConfigError(f"strategy {self.kind} needs a cut layer")
        if self.kind not in SPLIT_KINDS:
            self.cut = None
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if not 0.0 <= self.shared_fraction <= 1.0:
            raise ConfigError("shared_fraction must lie in [0, 1]")
        if not 0.0 <= self.server_momentum < 1.0:
            raise ConfigError("server_momentum must lie in [0, 1)")
        if self.epochs < 0:
            raise ConfigError("epochs must be >= 0")

    @property
    def is_split(self) -> bool:
        return self.kind in SPLIT_KINDS


@dataclass
class FederationState:
    config: StrategyConfig
    data: Dataset
    partition: Partition
    server: ServerState
    institutions: list[InstitutionState]
    ledger: CommLedger
    model: nn.LayerStack  # the full model as built at setup (architecture reference)
    round: int = 0
    loss_curve: list[float] = field(default_factory=list)
    finished: bool = False

    @property
    def K(self) -> int:
        return len(self.institutions)

    @property
    def St(self) -> int:
        return self.config.St or self.K

    @property
    def loss_kind(self) -> str:
        return self.model.task.loss_kind


def _stratified_pool(data: Dataset, indices: list[int], fraction: float, rng) -> list[int]:
    """``round(fraction * Q)`` indices, allocated across labels by largest remainder."""
    idx = np.asarray(indices, dtype=np.int64)
    total = int(round(fraction * idx.size))
    if total == 0:
        return []
    keys = data.labels[idx] if data.task.kind == "classification" else np.zeros(idx.size, int)
    groups = {k: idx[keys == k] for k in np.unique(keys)}
    exact = {k: total * g.size / idx.size for k, g in groups.items()}
    alloc = {k: int(math.floor(v)) for k, v in exact.items()}
    for k in sorted(groups, key=lambda k: (alloc[k] - exact[k], k))[: total - sum(alloc.values())]:
        alloc[k] += 1
    pool = [rng.choice(groups[k], size=alloc[k], replace=False) for k in sorted(groups)]
    return sorted(int(i) for i in np.concatenate(pool))


def setup(model: nn.LayerStack, data: Dataset, partition: Partition, config: StrategyConfig,
          seed: int = 0) -> FederationState:
    """Build server and institution state for ``config.kind``.

    ``model`` is copied, never mutated.  Institutions of the split strategies
    all start from the same institutional weights.
    """
    cfg = config
    model = model.copy()
    if cfg.kind == "fedsgd_gn":
        model = nn.with_group_norm(model, cfg.gn_groups)
    elif any(isinstance(layer, nn.GroupNorm) for layer in model.layers) and cfg.gn_groups:
        raise ConfigError("gn_groups only applies to fedsgd_gn")
    ledger = CommLedger()
    K = partition.K
    if cfg.St is not None and not 1 <= cfg.St <= K:
        raise ConfigError(f"St={cfg.St} must lie in 1..{K}")

    def opt_for(stack):
        return nn.OptimState.for_params(stack.params(), cfg.lr, cfg.momentum)

    def inst(k, stack, indices):
        idx = np.asarray(indices, dtype=np.int64)
        batches = BatchIterator(idx, cfg.batch_size, stream(seed, "batching", k))
        return InstitutionState(k, stack, opt_for(stack), idx, batches)

    sampling = stream(seed, "sampling")
    if cfg.kind == "centralized":
        server = ServerState(None, None, sampling)
        institutions = [inst(0, model.copy(), partition.all_indices())]
    elif cfg.is_split:
        sub = nn.split(model.copy(), cfg.cut)
        server = ServerState(sub.server, opt_for(sub.server), sampling)
        institutions = [inst(k, sub.institutional.copy(), a)
                        for k, a in enumerate(partition.assignments)]
    else:
        global_model = model.copy()
        server = ServerState(global_model, opt_for(global_model), sampling)
        if cfg.kind == "fedavgm":
            server.momentum = [np.zeros_like(t) for t in global_model.state_tensors()]
        local = [list(a) for a in partition.assignments]
        if cfg.kind == "fedavg_sd":
            server.shared_pool = _stratified_pool(
                data, partition.all_indices(), cfg.shared_fraction, stream(seed, "shared"))
            if not server.shared_pool:
                warnings.warn("shared pool is empty; FedAvg+SD degenerates to FedAvg", stacklevel=2)
            for k, a in enumerate(local):
                own = set(a)
                local[k] = a + [i for i in server.shared_pool if i not in own]
                if server.shared_pool:
                    pool = np.asarray(server.shared_pool)
                    ledger.record(make_message(Variant.SHARED_DATA, SERVER, k,
                                               data.features[pool], data.labels[pool]), 0)
        institutions = [inst(k, model.copy(), a) for k, a in enumerate(local)]

    return FederationState(cfg, data, partition, server, institutions, ledger, model)


# ---------------------------------------------------------------------------
# Helpers
# ---------------------------------------------------------------------------


def _batch(state, inst):
    idx = inst.batches.next()
    return state.data.features[idx], state.data.labels[idx]


def _local_step(state, inst) -> tuple[float, int]:
    x, y = _batch(state, inst)
    value = nn.train_step(inst.stack, inst.opt, x, y, state.loss_kind)
    return value, len(y)


def _plan(state) -> RoundPlan:
    return sample_institutions(state.K, state.St, state.server.rng, state.round)


def _record(state, variant, origin, dest, *arrays):
    state.ledger.record(make_message(variant, origin, dest, *arrays), state.round)


def _weighted_sum(tensor_lists, weights):
    out = [w_t * weights[0] for w_t in tensor_lists[0]]
    for tensors, w in zip(tensor_lists[1:], weights[1:]):
        for acc, t in zip(out, tensors):
            acc += w * t
    return out


def weighted_average(tensor_lists, sizes):
    """Sample-count weighted mean of parallel tensor lists."""
    q = sum(sizes)
    return _weighted_sum(tensor_lists, [s / q for s in sizes])


def _finish_epoch(state, total, count):
    state.loss_curve.append(total / max(count, 1))
    return state


# ---------------------------------------------------------------------------
# Centralized
# ---------------------------------------------------------------------------


def run_centralized_epoch(state: FederationState) -> FederationState:
    """``floor(Q / B)`` minibatch steps on the pooled training data."""
    state.round += 1
    inst = state.institutions[0]
    steps = max(1, inst.n_samples // state.config.batch_size)
    total = count = 0
    for _ in range(steps):
        v, n = _local_step(state, inst)
        total, count = total + v, count + n
    return _finish_epoch(state, total, count)


# ---------------------------------------------------------------------------
# Aggregation-based
# ---------------------------------------------------------------------------


def _fedavg_average(state, plan):
    """Local training from the global weights, then sample-weighted averaging."""
    glob = state.server.stack
    B = state.config.batch_size
    g_state = glob.state_tensors()
    results, sizes = [], []
    total = count = 0
    for k in plan.ids:
        inst = state.institutions[k]
        _record(state, Variant.FULL_WEIGHTS, SERVER, k, *g_state)
        inst.stack.load_state(g_state)
        for _ in range(max(1, inst.n_samples // B)):
            v, n = _local_step(state, inst)
            total, count = total + v, count + n
        local = inst.stack.state_tensors()
        _record(state, Variant.FULL_WEIGHTS, k, SERVER, *local)
        results.append([t.copy() for t in local])
        sizes.append(inst.n_samples)
    return weighted_average(results, sizes), total, count


def run_fedavg_round(state: FederationState, plan: RoundPlan | None = None) -> FederationState:
    state.round += 1
    plan = plan or _plan(state)
    avg, total, count = _fedavg_average(state, plan)
    state.server.stack.load_state(avg)
    return _finish_epoch(state, total, count)


def run_fedavgm_round(state: FederationState, plan: RoundPlan | None = None) -> FederationState:
    """FedAvg followed by server momentum on the round's weight delta.

    With ``delta = prev - avg`` and ``v' = beta * v + delta`` the new weights
    ``prev - v'`` are computed as ``avg - beta * v``, which is the same value
    and reproduces FedAvg bit for bit when ``beta * v`` is zero.
    """
    state.round += 1
    plan = plan or _plan(state)
    prev = [t.copy() for t in state.server.stack.state_tensors()]
    avg, total, count = _fedavg_average(state, plan)
    new = server_momentum_update(prev, avg, state.server.momentum, state.config.server_momentum)
    state.server.stack.load_state(new)
    return _finish_epoch(state, total, count)


def server_momentum_update(prev, avg, velocity, beta):
    """New global weights; ``velocity`` is updated in place."""
    new = []
    for p, a, v in zip(prev, avg, velocity):
        new.append(a - beta * v)
        v *= beta
        v += p - a
    return new


def run_fedavg_sd_round(state: FederationState, plan: RoundPlan | None = None) -> FederationState:
    """FedAvg where each institution also trains on the globally shared pool."""
    return run_fedavg_round(state, plan)


def fedsgd_iteration(state: FederationState, plan: RoundPlan) -> tuple[float, int]:
    """One synchronous gradient step; returns (SUM loss, samples)."""
    glob = state.server.stack
    g_state = glob.state_tensors()
    n_params = len(glob.params())
    grads, bufs, sizes = [], [], []
    total = 0.0
    for k in plan.ids:
        inst = state.institutions[k]
        _record(state, Variant.FULL_WEIGHTS, SERVER, k, *g_state)
        inst.stack.load_state(g_state)
        x, y = _batch(state, inst)
        out, tape = nn.forward(inst.stack, x, train=True)
        value, g = nn.loss(state.loss_kind, out, y)
        _, wg = nn.backward(inst.stack, tape, g / len(y))
        b = [t.copy() for t in inst.stack.buffers()]
        _record(state, Variant.FULL_GRADIENTS, k, SERVER, *wg, *b)
        grads.append(wg)
        bufs.append(b)
        sizes.append(len(y))
        total += value
    n = sum(sizes)
    weights = [s / n for s in sizes]
    nn.sgd_step(glob.params(), _weighted_sum(grads, weights), state.server.opt)
    if bufs[0]:
        for dst, src in zip(glob.buffers(), _weighted_sum(bufs, weights)):
            dst[...] = src
    assert len(glob.params()) == n_params
    return total, n


def run_fedsgd_iteration(state: FederationState, plan: RoundPlan | None = None) -> FederationState:
    fedsgd_iteration(state, plan or _plan(state))
    return state


def run_fedsgd_epoch(state: FederationState, plan: RoundPlan | None = None) -> FederationState:
    """``ceil(max Q_k / B)`` FedSGD iterations with one institution sample."""
    state.round += 1
    plan = plan or _plan(state)
    steps = sync_steps([state.institutions[k].n_samples for k in plan.ids], state.config.batch_size)
    total = count = 0
    for _ in range(steps):
        v, n = fedsgd_iteration(state, plan)
        total, count = total + v, count + n
    return _finish_epoch(state, total, count)


def run_fedsgd_gn(state: FederationState, plan: RoundPlan | None = None) -> FederationState:
    """FedSGD on the GroupNorm variant of the model (converted at setup)."""
    if any(isinstance(layer, nn.BatchNorm) for layer in state.server.stack.layers):
        raise ConfigError("FedSGD+GN state still contains BatchNorm layers")
    return run_fedsgd_epoch(state, plan)


# ---------------------------------------------------------------------------
# Serial (transfer-based)
# ---------------------------------------------------------------------------


def _serial_steps(state):
    Q = sum(i.n_samples for i in state.institutions)
    return max(1, Q // (state.config.batch_size * state.K))


def run_cwt_epoch(state: FederationState) -> FederationState:
    """Institutions train in ascending order, handing the full model on."""
    state.round += 1
    steps = _serial_steps(state)
    current = state.server.stack.state_tensors()
    total = count = 0
    for inst in state.institutions:
        inst.stack.load_state(current)
        for _ in range(steps):
            v, n = _local_step(state, inst)
            total, count = total + v, count + n
        current = [t.copy() for t in inst.stack.state_tensors()]
        _record(state, Variant.FULL_WEIGHTS, inst.id, (inst.id + 1) % state.K, *current)
    state.server.stack.load_state(current)
    return _finish_epoch(state, total, count)


def _split_iteration(state, inst):
    """SplitNN iteration for one institution: cut-layer exchange with the server."""
    fs = state.server.stack
    x, y = _batch(state, inst)
    feats, tape_i = nn.forward(inst.stack, x, train=True)
    _record(state, Variant.FEATURE_MAPS, inst.id, SERVER, feats, y)
    out, tape_s = nn.forward(fs, feats, train=True)
    value, g = nn.loss(state.loss_kind, out, y)
    d_cut, gs = nn.backward(fs, tape_s, g / len(y))
    nn.sgd_step(fs.params(), gs, state.server.opt)
    _record(state, Variant.CUT_GRADIENTS, SERVER, inst.id, d_cut)
    _, gi = nn.backward(inst.stack, tape_i, d_cut)
    nn.sgd_step(inst.stack.params(), gi, inst.opt)
    return value, len(y)


def run_splitnn_epoch(state: FederationState) -> FederationState:
    """Serial split training; the institutional weights travel between sites."""
    state.round += 1
    steps = _serial_steps(state)
    current = state.institutions[0].stack.state_tensors()
    current = [t.copy() for t in current]
    total = count = 0
    for inst in state.institutions:
        inst.stack.load_state(current)
        for _ in range(steps):
            v, n = _split_iteration(state, inst)
            total, count = total + v, count + n
        current = [t.copy() for t in inst.stack.state_tensors()]
        _record(state, Variant.FULL_WEIGHTS, inst.id, (inst.id + 1) % state.K, *current)
    for inst in state.institutions:
        inst.stack.load_state(current)
    return _finish_epoch(state, total, count)


# ---------------------------------------------------------------------------
# SplitAVG
# ---------------------------------------------------------------------------


def splitavg_step(state: FederationState, plan: RoundPlan, labels_stay_local: bool = False):
    """One server step on concatenated cut-layer features.

    Returns ``(loss, samples, server_weight_grads)``.  With
    ``labels_stay_local`` the v2 protocol is used: prediction chunks go back
    to their owners, which return their loss and chunk gradient.
    """
    if not plan.ids:
        raise ConfigError("empty round plan")
    fs = state.server.stack
    feats, labels, tapes = [], [], []
    for k in plan.ids:
        inst = state.institutions[k]
        x, y = _batch(state, inst)
        f, tape = nn.forward(inst.stack, x, train=True)
        if labels_stay_local:
            _record(state, Variant.FEATURE_MAPS, k, SERVER, f)
        else:
            _record(state, Variant.FEATURE_MAPS, k, SERVER, f, y)
        feats.append(f)
        labels.append(y)
        tapes.append(tape)
    sizes = [len(y) for y in labels]
    n = sum(sizes)
    X = nn.concat_batch(feats)
    out, tape_s = nn.forward(fs, X, train=True)

    if labels_stay_local:
        chunk_grads, chunk_values = [], []
        for k, chunk, y in zip(plan.ids, nn.split_batch(out, sizes), labels):
            _record(state, Variant.PREDICTION_CHUNK, SERVER, k, chunk)
            v, g = nn.loss(state.loss_kind, chunk, y)  # computed at institution k
            _record(state, Variant.LOSS_SCALAR, k, SERVER, np.array([v]))
            _record(state, Variant.CHUNK_GRADIENTS, k, SERVER, g)
            chunk_values.append(v)
            chunk_grads.append(g)
        value = math.fsum(chunk_values)
        grad = nn.concat_batch(chunk_grads)
    else:
        value, grad = nn.loss(state.loss_kind, out, nn.concat_batch(labels))

    d_cut, gs = nn.backward(fs, tape_s, grad / n)
    for k, tape, d in zip(plan.ids, tapes, nn.split_batch(d_cut, sizes)):
        inst = state.institutions[k]
        _record(state, Variant.CUT_GRADIENTS, SERVER, k, d)
        _, gi = nn.backward(inst.stack, tape, d)
        nn.sgd_step(inst.stack.params(), gi, inst.opt)
    nn.sgd_step(fs.params(), gs, state.server.opt)
    return value, n, gs


def _splitavg_epoch(state, plan, v2):
    state.round += 1
    plan = plan or _plan(state)
    steps = sync_steps([state.institutions[k].n_samples for k in plan.ids], state.config.batch_size)
    total = count = 0
    for _ in range(steps):
        v, n, _ = splitavg_step(state, plan, labels_stay_local=v2)
        total, count = total + v, count + n
    return _finish_epoch(state, total, count)


def run_splitavg_round(state: FederationState, plan: RoundPlan | None = None) -> FederationState:
    """One epoch of ``ceil(max Q_k / B)`` concatenated server steps."""
    return _splitavg_epoch(state, plan, v2=False)


def run_splitavg_v2_round(state: FederationState, plan: RoundPlan | None = None) -> FederationState:
    """As :func:`run_splitavg_round`, but labels never leave the institutions."""
    return _splitavg_epoch(state, plan, v2=True)


# ---------------------------------------------------------------------------
# Driver and evaluation
# ---------------------------------------------------------------------------

EPOCH_FUNCTIONS = {
    "centralized": run_centralized_epoch,
    "fedavg": run_fedavg_round,
    "fedavgm": run_fedavgm_round,
    "fedavg_sd": run_fedavg_sd_round,
    "fedsgd": run_fedsgd_epoch,
    "fedsgd_gn": run_fedsgd_gn,
    "cwt": run_cwt_epoch,
    "splitnn": run_splitnn_epoch,
    "splitavg": run_splitavg_round,
    "splitavg_v2": run_splitavg_v2_round,
}


def run_epoch(state: FederationState) -> FederationState:
    return EPOCH_FUNCTIONS[state.config.kind](state)


def finish(state: FederationState) -> FederationState:
    """Complete the institution models of the split strategies (idempotent)."""
    if state.config.is_split and not state.finished:
        final_weight_transfer(state.server, state.institutions, state.ledger, state.round)
    state.finished = True
    return state


def train(state: FederationState, epochs: int | None = None,
          validation: Dataset | None = None) -> FederationState:
    """Run the configured number of epochs, then the final weight transfer.

    With ``config.patience`` and a validation set, training stops once the
    validation metric has not improved for ``patience`` epochs.
    """
    epochs = state.config.epochs if epochs is None else epochs
    patience = state.config.patience
    best, stale = None, 0
    for _ in range(epochs):
        run_epoch(state)
        log.debug("%s epoch %d loss %.6f", state.config.kind, state.round, state.loss_curve[-1])
        if patience and validation is not None:
            m = evaluate(state, validation)
            better = m.value if m.task == "classification" else -m.value
            if best is None or better > best:
                best, stale = better, 0
            else:
                stale += 1
                if stale >= patience:
                    log.info("early stop after epoch %d", state.round)
                    break
    return finish(state)


def composite_models(state: FederationState) -> list[nn.LayerStack]:
    """Complete models to evaluate: one per institution for split strategies."""
    if state.config.kind == "centralized":
        return [state.institutions[0].stack]
    if state.config.is_split:
        if state.finished:
            return [composite(inst) for inst in state.institutions]
        return [nn.join(inst.stack, state.server.stack) for inst in state.institutions]
    return [state.server.stack]


def predict(model: nn.LayerStack, features: np.ndarray, batch_size: int = 1024) -> np.ndarray:
    """Eval-mode outputs; running statistics are left untouched."""
    outs = [nn.forward(model, features[i:i + batch_size], train=False)[0]
            for i in range(0, len(features), batch_size)]
    return np.concatenate(outs, axis=0)


def evaluate(state_or_model, test: Dataset) -> Metrics:
    """Accuracy (classification) or MAE (regression), per model and averaged."""
    if isinstance(state_or_model, FederationState):
        models = composite_models(state_or_model)
        curve = list(state_or_model.loss_curve)
        comm = state_or_model.ledger.summary()
    else:
        models, curve, comm = [state_or_model], [], {}
    task = models[0].task
    if task is None or task.kind != test.task.kind:
        raise ConfigError("model task does not match the test set")
    per = [score(task.kind, predict(m, test.features), test.labels) for m in models]
    return Metrics(task.kind, per, curve, comm)
