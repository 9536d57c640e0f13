"""Self-checks behind ``fedsplit verify``.

Each check returns a :class:`Check`; :func:`run_all` collects them so the CLI
can print a pass/fail matrix and exit non-zero on any failure.
"""

from __future__ import annotations

import time
import warnings
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import federation as F
from . import nn
from . import partition as P
from . import strategies as S
from .seeding import stream

GRAD_TOL = 1e-4
LINEAR_TOL = 1e-6
COLLAPSE_TOL = 1e-10
CHUNK_TOL = 1e-12


@dataclass
class Check:
    name: str
    passed: bool
    detail: str
    seconds: float = 0.0


def grad_check_models(seed: int) -> dict:
    """Small stacks covering every layer type, with matching inputs."""
    rng = np.random.default_rng(seed)
    three = nn.classification(3)
    return {
        "mlp": (nn.mlp(4, [6], three, rng), rng.normal(size=(5, 4))),
        "mlp_bn": (nn.mlp(4, [6, 5], three, rng, batchnorm=True), rng.normal(size=(6, 4))),
        "cnn_bn": (nn.small_cnn((2, 5, 5), [3], three, rng), rng.normal(size=(3, 2, 5, 5))),
        "cnn_gn": (nn.small_cnn((2, 4, 4), [4], three, rng, norm="group"), rng.normal(size=(2, 2, 4, 4))),
        "conv_stride": (nn.LayerStack([nn.Conv2D(1, 2, 3, 2, 1, rng), nn.Flatten(), nn.Dense(8, 3, rng)],
                                      three, (1, 4, 4)), rng.normal(size=(2, 1, 4, 4))),
    }


def check_gradients(seeds: int = 20) -> Check:
    worst, worst_lin, where = 0.0, 0.0, ""
    for seed in range(seeds):
        for name, (stack, x) in grad_check_models(seed).items():
            labels = np.random.default_rng(seed + 100).integers(0, 3, size=x.shape[0])
            err = nn.grad_check(stack, x, labels, "ce", rng=np.random.default_rng(seed))
            if err > worst:
                worst, where = err, f"{name}/seed {seed}"
        rng = np.random.default_rng(seed)
        lin = nn.LayerStack([nn.Dense(3, 1, rng)], nn.REGRESSION, (3,))
        worst_lin = max(worst_lin, nn.grad_check(lin, rng.normal(size=(6, 3)),
                                                 10.0 * rng.normal(size=(6, 1)), "l1"))
    ok = worst <= GRAD_TOL and worst_lin <= LINEAR_TOL
    return Check("gradients", ok, f"max rel err {worst:.2e} ({where or 'n/a'}), linear {worst_lin:.2e}, "
                                  f"{seeds} seeds")


def check_chunked_loss(trials: int = 100, seed: int = 0) -> Check:
    rng = np.random.default_rng(seed)
    worst = 0.0
    for t in range(trials):
        kind = "ce" if t % 2 == 0 else "l1"
        n = int(rng.integers(2, 64))
        width = int(rng.integers(2, 6)) if kind == "ce" else 1
        pred = rng.normal(size=(n, width)) * 3
        labels = rng.integers(0, width, size=n) if kind == "ce" else rng.normal(size=(n, 1))
        full, _ = nn.loss(kind, pred, labels)
        cuts = np.sort(rng.choice(np.arange(1, n), size=int(rng.integers(0, min(5, n - 1) + 1)), replace=False))
        sizes = np.diff(np.concatenate([[0], cuts, [n]])).tolist()
        chunks = list(zip(nn.split_batch(pred, sizes), nn.split_batch(labels, sizes)))
        total, _, _ = nn.loss_chunked(kind, chunks)
        worst = max(worst, abs(total - full))
    return Check("chunked-loss", worst <= CHUNK_TOL, f"max |sum chunks - full| {worst:.1e} over {trials} trials")


def _blobs(n=320, seed=0):
    return P.synth_classification(n, 2, 8, seed=seed)


def _model(seed=0):
    return nn.mlp(8, [16, 16], nn.classification(2), np.random.default_rng(seed), batchnorm=True)


def _run(model, data, part, epochs, seed, **kw):
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        state = S.setup(model, data, part, S.StrategyConfig(**kw), seed=seed)
    for _ in range(epochs):
        S.run_epoch(state)
    return S.finish(state)


def _rel(a, b):
    return max(float(np.max(np.abs(x - y))) / max(float(np.max(np.abs(y))), 1e-300) for x, y in zip(a, b))


def check_collapse(seed: int = 3) -> Check:
    data = _blobs()
    part = P.Partition([list(range(len(data)))])
    ref = S.composite_models(_run(_model(), data, part, 10, seed, kind="centralized"))[0].state_tensors()
    worst, detail = 0.0, []
    for kind in ("fedavg", "fedsgd", "cwt", "splitnn", "splitavg", "splitavg_v2"):
        cut = 3 if kind in F.SPLIT_KINDS else None
        st = _run(_model(), data, part, 10, seed, kind=kind, cut=cut)
        err = _rel(S.composite_models(st)[0].state_tensors(), ref)
        worst = max(worst, err)
        detail.append(f"{kind} {err:.0e}")
    return Check("single-institution", worst <= COLLAPSE_TOL, "; ".join(detail))


def check_v1_v2(seed: int = 5) -> Check:
    data = _blobs()
    configs = [(2, 1, 0.0), (4, 3, 0.6), (4, 6, 1.0)]
    bad = []
    for K, cut, skew in configs:
        part = P.make_label_skew_partition(data, P.SkewSpec(K, skew, seed=seed))
        a = _run(_model(), data, part, 3, seed, kind="splitavg", cut=cut)
        b = _run(_model(), data, part, 3, seed, kind="splitavg_v2", cut=cut)
        same = all(nn.serialize_weights(F.composite(x)) == nn.serialize_weights(F.composite(y))
                   for x, y in zip(a.institutions, b.institutions))
        cm = F.cut_map_size(_model(), cut)
        fm = b.ledger.total(direction="up", variant=F.Variant.FEATURE_MAPS)
        samples = a.ledger.total(direction="up", variant=F.Variant.FEATURE_MAPS) // (cm + 1)
        if not same or fm != samples * cm:
            bad.append(f"K={K} cut={cut}")
    return Check("v1-v2-bitwise", not bad,
                 f"{len(configs)} configs bitwise equal, no labels uplinked" if not bad else "differs: " + ", ".join(bad))


def check_ledger(epochs: int = 5, seed: int = 1) -> Check:
    data = P.synth_classification(350, 2, 8, seed=2)
    part = P.make_quantity_skew_partition(data, [120, 90, 80, 60], seed=0)
    bad = []
    for kind in S.KINDS:
        cut = 2 if kind in F.SPLIT_KINDS else None
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            state = S.setup(_model(), data, part, S.StrategyConfig(kind, cut=cut, St=3), seed=seed)
        sizes = [i.n_samples for i in state.institutions]
        replay = stream(seed, "sampling")  # same draws the server makes
        for _ in range(epochs):
            S.run_epoch(state)
            if kind in ("cwt", "splitnn", "centralized"):
                ids = list(range(state.K))
            else:
                ids = list(F.sample_institutions(state.K, 3, replay).ids)
            want = F.analytic_round_traffic(kind, state.model, B=32, K=state.K, plan=ids, sizes=sizes, cut=cut)
            got = {k: v for k, v in state.ledger.breakdown(state.round).items() if v}
            if got != want:
                bad.append(f"{kind}@{state.round}")
                break
    return Check("ledger-vs-analytic", not bad,
                 f"{len(S.KINDS)} strategies x {epochs} epochs exact" if not bad else "mismatch: " + ", ".join(bad))


CHECKS: dict[str, Callable[[], Check]] = {
    "gradients": check_gradients,
    "chunked-loss": check_chunked_loss,
    "single-institution": check_collapse,
    "v1-v2-bitwise": check_v1_v2,
    "ledger-vs-analytic": check_ledger,
}


def run_all(names=None) -> list[Check]:
    out = []
    for name in names or CHECKS:
        t0 = time.perf_counter()
        try:
            res = CHECKS[name]()
        except Exception as e:  # a crashing check is a failing check
            res = Check(name, False, f"{type(e).__name__}: {e}")
        res.seconds = time.perf_counter() - t0
        out.append(res)
    return out


def format_matrix(results: list[Check]) -> str:
    width = max(len(r.name) for r in results)
    lines = [f"{'check':<{width}}  result  time    detail"]
    for r in results:
        lines.append(f"{r.name:<{width}}  {'PASS' if r.passed else 'FAIL':<6}  {r.seconds:5.1f}s  {r.detail}")
    return "\n".join(lines)
