import copy
import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fedsplit import federation as F
from fedsplit import nn
from fedsplit import partition as P
from fedsplit import strategies as S
from fedsplit.errors import ConfigError
from fedsplit.seeding import stream

B = 32


@pytest.fixture(scope="module")
def blobs():
    return P.synth_classification(320, 2, 8, seed=0)


def bn_mlp(seed=0):
    return nn.mlp(8, [16, 16], nn.classification(2), np.random.default_rng(seed), batchnorm=True)


def plain_mlp(seed=0):
    return nn.mlp(8, [12], nn.classification(2), np.random.default_rng(seed))


def max_rel(a, b):
    return max(float(np.max(np.abs(x - y))) / max(float(np.max(np.abs(y))), 1e-300)
               for x, y in zip(a, b))


def run(model, data, part, epochs, seed=3, **kw):
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        state = S.setup(model, data, part, S.StrategyConfig(**kw), seed=seed)
    for _ in range(epochs):
        S.run_epoch(state)
    return S.finish(state)


def weights(state):
    return S.composite_models(state)[0].state_tensors()


# -- config -------------------------------------------------------------------


def test_config_rejects_unknown_kind():
    with pytest.raises(ConfigError, match="unknown strategy"):
        S.StrategyConfig("fedprox")


def test_config_split_needs_cut():
    with pytest.raises(ConfigError):
        S.StrategyConfig("splitavg")


def test_config_bad_values():
    for kw in [dict(batch_size=0), dict(shared_fraction=1.5), dict(server_momentum=1.0)]:
        with pytest.raises(ConfigError):
            S.StrategyConfig("fedavg", **kw)


def test_setup_rejects_st_above_k(blobs):
    part = P.make_iid_partition(blobs, 2, seed=0)
    with pytest.raises(ConfigError):
        S.setup(plain_mlp(), blobs, part, S.StrategyConfig("fedavg", St=3))


# -- centralized --------------------------------------------------------------


def test_centralized_step_is_composed_nn_step(blobs):
    part = P.Partition([list(range(len(blobs)))])
    model = bn_mlp()
    state = S.setup(model, blobs, part, S.StrategyConfig("centralized"), seed=1)
    it = F.BatchIterator(np.arange(len(blobs)), B, stream(1, "batching", 0))
    ref = model.copy()
    opt = nn.OptimState.for_params(ref.params())
    for _ in range(len(blobs) // B):
        idx = it.next()
        nn.train_step(ref, opt, blobs.features[idx], blobs.labels[idx])
    S.run_centralized_epoch(state)
    assert all(np.array_equal(a, b) for a, b in zip(weights(state), ref.state_tensors()))


def test_centralized_zero_lr_is_noop(blobs):
    part = P.Partition([list(range(len(blobs)))])
    model = plain_mlp()
    state = run(model, blobs, part, 2, kind="centralized", lr=0.0)
    assert all(np.array_equal(a, b) for a, b in zip(weights(state), model.state_tensors()))


def test_centralized_loss_decreases():
    d = P.synth_classification(640, 2, 8, seed=5)
    part = P.Partition([list(range(len(d)))])
    state = run(plain_mlp(), d, part, 0, kind="centralized", lr=0.05, batch_size=32)
    losses = []
    inst = state.institutions[0]
    for _ in range(200):
        v, n = S._local_step(state, inst)
        losses.append(v / n)
    smooth = np.convolve(losses, np.ones(5) / 5, mode="valid")
    assert smooth[-1] < 0.5 * smooth[0]
    assert np.mean(smooth[-20:]) < np.mean(smooth[:20])


# -- single-institution collapse ----------------------------------------------


@pytest.fixture(scope="module")
def centralized_refs(blobs):
    part = P.Partition([list(range(len(blobs)))])
    bn = run(bn_mlp(), blobs, part, 10, kind="centralized")
    gn = run(nn.with_group_norm(bn_mlp()), blobs, part, 10, kind="centralized")
    return part, weights(bn), weights(gn)


@pytest.mark.parametrize("kind", ["fedavg", "fedsgd", "cwt", "splitnn", "splitavg", "splitavg_v2",
                                  "fedavgm", "fedavg_sd", "fedsgd_gn"])
def test_single_institution_collapse(blobs, centralized_refs, kind):
    part, ref_bn, ref_gn = centralized_refs
    kw = dict(kind=kind, cut=3 if kind in F.SPLIT_KINDS else None,
              server_momentum=0.0, shared_fraction=0.0)
    state = run(bn_mlp(), blobs, part, 10, **kw)  # 100 steps
    ref = ref_gn if kind == "fedsgd_gn" else ref_bn
    assert max_rel(weights(state), ref) <= 1e-10


@pytest.mark.parametrize("cut", range(0, 8))
def test_splitavg_single_institution_any_cut(blobs, centralized_refs, cut):
    part, ref, _ = centralized_refs
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", nn.LastLayerCutWarning)
        state = run(bn_mlp(), blobs, part, 10, kind="splitavg", cut=cut)
    assert max_rel(weights(state), ref) <= 1e-10


# -- union batch --------------------------------------------------------------


@pytest.mark.parametrize("norm", [True, False])
def test_splitavg_cut_zero_is_union_batch_training(blobs, norm):
    part = P.make_label_skew_partition(blobs, P.SkewSpec(4, 0.5, seed=1))
    model = bn_mlp() if norm else plain_mlp()
    state = S.setup(model, blobs, part, S.StrategyConfig("splitavg", cut=0), seed=4)
    iters = [F.BatchIterator(np.asarray(a), B, stream(4, "batching", k))
             for k, a in enumerate(part.assignments)]
    ref = model.copy()
    opt = nn.OptimState.for_params(ref.params())
    plan = F.RoundPlan((0, 1, 2, 3))
    for _ in range(50):
        idx = np.concatenate([it.next() for it in iters])
        nn.train_step(ref, opt, blobs.features[idx], blobs.labels[idx])
        S.splitavg_step(state, plan)
        assert max_rel(state.server.stack.state_tensors(), ref.state_tensors()) <= 1e-10


@pytest.mark.parametrize("cut", [1, 3, 5])
def test_server_gradient_equals_concatenated_batch_gradient(blobs, cut):
    part = P.make_label_skew_partition(blobs, P.SkewSpec(4, 1.0, seed=1))
    state = S.setup(bn_mlp(), blobs, part, S.StrategyConfig("splitavg", cut=cut), seed=2)
    plan = F.RoundPlan((0, 1, 2, 3))
    for _ in range(3):
        before = copy.deepcopy(state)
        _, _, gs = S.splitavg_step(state, plan)
        feats, labels = [], []
        for k in plan.ids:
            inst = before.institutions[k]
            idx = inst.batches.next()
            feats.append(nn.forward(inst.stack, blobs.features[idx])[0])
            labels.append(blobs.labels[idx])
        out, tape = nn.forward(before.server.stack, np.concatenate(feats))
        y = np.concatenate(labels)
        _, g = nn.loss("ce", out, y)
        _, expected = nn.backward(before.server.stack, tape, g / len(y))
        assert all(np.array_equal(a, b) for a, b in zip(gs, expected))


# -- v1 / v2 ------------------------------------------------------------------


@pytest.mark.parametrize("K,cut,skew", [(2, 1, 0.0), (4, 3, 0.6), (3, 6, 0.5), (4, 0, 1.0)])
def test_v2_bitwise_equals_v1(blobs, K, cut, skew):
    part = P.make_label_skew_partition(blobs, P.SkewSpec(K, skew, seed=K))
    a = run(bn_mlp(), blobs, part, 3, kind="splitavg", cut=cut)
    b = run(bn_mlp(), blobs, part, 3, kind="splitavg_v2", cut=cut)
    for ia, ib in zip(a.institutions, b.institutions):
        assert nn.serialize_weights(F.composite(ia)) == nn.serialize_weights(F.composite(ib))
    # reported losses are sums of chunk sums in v2, so only round-off may differ
    np.testing.assert_allclose(a.loss_curve, b.loss_curve, rtol=0, atol=1e-12)
    # v2 feature messages carry activations only: the difference is one scalar per label
    fm_a = a.ledger.total(direction="up", variant=F.Variant.FEATURE_MAPS)
    fm_b = b.ledger.total(direction="up", variant=F.Variant.FEATURE_MAPS)
    cm = F.cut_map_size(bn_mlp(), cut)
    samples = fm_a // (cm + 1)
    assert fm_b == samples * cm and fm_a - fm_b == samples


def test_v2_chunk_losses_sum_to_full_loss(blobs):
    part = P.make_label_skew_partition(blobs, P.SkewSpec(4, 0.5, seed=0))
    a = S.setup(bn_mlp(), blobs, part, S.StrategyConfig("splitavg", cut=2), seed=0)
    b = S.setup(bn_mlp(), blobs, part, S.StrategyConfig("splitavg_v2", cut=2), seed=0)
    plan = F.RoundPlan((0, 1, 2, 3))
    for _ in range(20):
        la, _, _ = S.splitavg_step(a, plan)
        lb, _, _ = S.splitavg_step(b, plan, labels_stay_local=True)
        assert abs(la - lb) <= 1e-12


# -- ledger vs analytic -------------------------------------------------------


@pytest.mark.parametrize("kind", S.KINDS)
def test_ledger_matches_analytic_every_epoch(kind):
    d = P.synth_classification(350, 2, 8, seed=2)
    part = P.make_quantity_skew_partition(d, [120, 90, 80, 60], seed=0)
    cut = 2 if kind in F.SPLIT_KINDS else None
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        state = S.setup(bn_mlp(), d, part, S.StrategyConfig(kind, cut=cut, St=3), seed=1)
    arch = state.model
    replay = stream(1, "sampling")
    for epoch in range(5):
        S.run_epoch(state)
        if kind in ("cwt", "splitnn", "centralized"):
            ids = range(state.K)
        else:
            ids = F.sample_institutions(state.K, 3, replay).ids
        expected = F.analytic_round_traffic(kind, arch, B=B, K=state.K, plan=list(ids),
                                            sizes=[i.n_samples for i in state.institutions], cut=cut)
        got = {k: v for k, v in state.ledger.breakdown(state.round).items() if v}
        assert got == expected
    if kind in F.SPLIT_KINDS:
        S.finish(state)
        fs = sum(t.size for layer in arch.layers[cut:] for t in layer.params() + layer.buffers())
        assert state.ledger.breakdown(state.round)[("down", "FullWeights")] == state.K * fs
    up = state.ledger.total(direction="up")
    assert up == state.ledger.received[F.SERVER]


def test_splitavg_per_iteration_uplink_matches_formula(blobs):
    part = P.make_iid_partition(blobs, 4, seed=0)
    state = S.setup(bn_mlp(), blobs, part, S.StrategyConfig("splitavg", cut=3), seed=0)
    state.round = 1
    S.splitavg_step(state, F.RoundPlan((0, 1, 2, 3)))
    expected = F.analytic_floats("splitavg", state.model, B=B, St=4, cut=3)
    assert state.ledger.total(direction="up") == expected == 4 * B * (16 + 1)
    assert state.ledger.total(direction="down") == 4 * B * 16


def test_v2_ledger_has_no_labels(blobs):
    part = P.make_iid_partition(blobs, 4, seed=0)
    state = run(bn_mlp(), blobs, part, 1, kind="splitavg_v2", cut=3)
    n = state.ledger.total(direction="up", variant=F.Variant.FEATURE_MAPS)
    steps = F.sync_steps(part.sizes, B)
    assert steps == 3
    assert n == steps * 4 * B * 16  # activations only
    assert state.ledger.total(variant=F.Variant.LOSS_SCALAR) == steps * 4


# -- aggregation --------------------------------------------------------------


def test_weighted_average_arithmetic():
    out = S.weighted_average([[np.array([0.2])], [np.array([0.4])]], [50, 50])
    assert out[0][0] == pytest.approx(0.3, abs=1e-15)
    out = S.weighted_average([[np.array([1.0])], [np.array([4.0])]], [1, 2])
    assert out[0][0] == pytest.approx(3.0, abs=1e-15)


def test_fedavg_round_matches_manual_oracle(blobs):
    part = P.make_quantity_skew_partition(blobs, [200, 100], seed=0)
    model = bn_mlp()
    state = run(model, blobs, part, 1, kind="fedavg", seed=6)
    results = []
    for k, a in enumerate(part.assignments):
        local = model.copy()
        opt = nn.OptimState.for_params(local.params())
        it = F.BatchIterator(np.asarray(a), B, stream(6, "batching", k))
        for _ in range(len(a) // B):
            idx = it.next()
            nn.train_step(local, opt, blobs.features[idx], blobs.labels[idx])
        results.append(local.state_tensors())
    expected = [np.average([r[i] for r in results], axis=0, weights=[200, 100])
                for i in range(len(results[0]))]
    assert max_rel(weights(state), expected) <= 1e-12


def _identical_data(d, K):
    data = P.Dataset(np.concatenate([d.features] * K), np.concatenate([d.labels] * K), d.task)
    n = len(d)
    return data, P.Partition([list(range(k * n, (k + 1) * n)) for k in range(K)])


def _sync_iterators(state, seed=0):
    for inst in state.institutions:
        inst.batches = F.BatchIterator(inst.indices, B, stream(seed, "same"))


def test_fedavg_identical_institutions_equal_local_training(blobs):
    data, part = _identical_data(blobs, 3)
    state = S.setup(bn_mlp(), data, part, S.StrategyConfig("fedavg"), seed=0)
    _sync_iterators(state)
    single = S.setup(bn_mlp(), blobs, P.Partition([list(range(len(blobs)))]),
                     S.StrategyConfig("centralized"), seed=0)
    _sync_iterators(single)
    S.run_epoch(state)
    S.run_epoch(single)
    assert max_rel(weights(state), weights(single)) <= 1e-12


def test_fedsgd_identical_batches_equal_centralized_step(blobs):
    data, part = _identical_data(blobs, 4)
    state = S.setup(bn_mlp(), data, part, S.StrategyConfig("fedsgd"), seed=0)
    _sync_iterators(state)
    ref = bn_mlp()
    opt = nn.OptimState.for_params(ref.params())
    it = F.BatchIterator(np.arange(len(blobs)), B, stream(0, "same"))
    for _ in range(5):
        idx = it.next()
        nn.train_step(ref, opt, blobs.features[idx], blobs.labels[idx])
        S.run_fedsgd_iteration(state, F.RoundPlan((0, 1, 2, 3)))
    assert max_rel(weights(state), ref.state_tensors()) <= 1e-12


def test_fedsgd_gradient_is_pooled_gradient(blobs):
    part = P.make_quantity_skew_partition(blobs, [150, 100, 40], seed=0)
    model = plain_mlp()
    state = S.setup(model, blobs, part, S.StrategyConfig("fedsgd", lr=1.0, momentum=0.0,
                                                         batch_size=48), seed=2)
    before = [t.copy() for t in state.server.stack.params()]
    iters = copy.deepcopy([i.batches for i in state.institutions])
    S.run_fedsgd_iteration(state, F.RoundPlan((0, 1, 2)))
    idx = np.concatenate([it.next() for it in iters])
    out, tape = nn.forward(model, blobs.features[idx])
    _, g = nn.loss("ce", out, blobs.labels[idx])
    _, pooled = nn.backward(model, tape, g / len(idx))
    step = [b - a for a, b in zip(state.server.stack.params(), before)]
    for s_, p_ in zip(step, pooled):
        np.testing.assert_allclose(s_, p_, rtol=0, atol=1e-12)


def test_fedavgm_beta_zero_equals_fedavg(blobs):
    part = P.make_label_skew_partition(blobs, P.SkewSpec(4, 0.7, seed=0))
    a = run(bn_mlp(), blobs, part, 3, kind="fedavg")
    b = run(bn_mlp(), blobs, part, 3, kind="fedavgm", server_momentum=0.0)
    assert all(np.array_equal(x, y) for x, y in zip(weights(a), weights(b)))


def test_fedavgm_first_round_equals_fedavg(blobs):
    part = P.make_label_skew_partition(blobs, P.SkewSpec(4, 0.7, seed=0))
    a = run(bn_mlp(), blobs, part, 1, kind="fedavg")
    b = run(bn_mlp(), blobs, part, 1, kind="fedavgm", server_momentum=0.9)
    assert all(np.array_equal(x, y) for x, y in zip(weights(a), weights(b)))
    c = run(bn_mlp(), blobs, part, 2, kind="fedavg")
    d = run(bn_mlp(), blobs, part, 2, kind="fedavgm", server_momentum=0.9)
    assert not all(np.array_equal(x, y) for x, y in zip(weights(c), weights(d)))


def test_server_momentum_constant_delta_recurrence():
    w0 = [np.array([1.0, -2.0])]
    delta = np.array([0.1, 0.3])
    v = [np.zeros(2)]
    w1 = S.server_momentum_update(w0, [w0[0] - delta], v, 0.9)
    np.testing.assert_allclose(w0[0] - w1[0], delta, atol=1e-15)
    w2 = S.server_momentum_update(w1, [w1[0] - delta], v, 0.9)
    np.testing.assert_allclose(w1[0] - w2[0], 1.9 * delta, atol=1e-15)


@settings(max_examples=50, deadline=None)
@given(st.floats(0.0, 0.99), st.lists(st.floats(-1, 1), min_size=3, max_size=3))
def test_server_momentum_matches_textbook_form(beta, deltas):
    w = [np.array([0.5])]
    v_ref, w_ref = np.zeros(1), np.array([0.5])
    v = [np.zeros(1)]
    for dlt in deltas:
        w = S.server_momentum_update(w, [w[0] - dlt], v, beta)
        v_ref = beta * v_ref + dlt
        w_ref = w_ref - v_ref
        np.testing.assert_allclose(w[0], w_ref, atol=1e-12)


def test_fedavg_sd_zero_fraction_equals_fedavg(blobs):
    part = P.make_label_skew_partition(blobs, P.SkewSpec(4, 0.7, seed=0))
    a = run(bn_mlp(), blobs, part, 3, kind="fedavg")
    with pytest.warns(UserWarning, match="shared pool is empty"):
        st_ = S.setup(bn_mlp(), blobs, part, S.StrategyConfig("fedavg_sd", shared_fraction=0.0), seed=3)
    for _ in range(3):
        S.run_epoch(st_)
    assert all(np.array_equal(x, y) for x, y in zip(weights(a), weights(st_)))
    assert st_.ledger.total() == a.ledger.total()


def test_fedavg_sd_pool_size_and_stratification():
    d = P.synth_classification(1000, 2, 8, seed=1)
    part = P.make_label_skew_partition(d, P.SkewSpec(4, 1.0, seed=0))
    state = S.setup(bn_mlp(), d, part, S.StrategyConfig("fedavg_sd"), seed=0)
    pool = state.server.shared_pool
    assert len(pool) == round(0.05 * 1000) == 50
    assert set(pool) <= set(part.all_indices())
    frac = np.mean(d.labels[pool] == 0)
    assert abs(frac - np.mean(d.labels == 0)) <= 0.02
    for inst, a in zip(state.institutions, part.assignments):
        assert set(inst.indices) == set(a) | set(pool)
    assert state.ledger.total(round=0, variant=F.Variant.SHARED_DATA) == 4 * 50 * (8 + 1)


def test_fedavg_sd_full_pool_gives_identical_data(blobs):
    part = P.make_iid_partition(blobs, 4, seed=0)
    state = S.setup(bn_mlp(), blobs, part, S.StrategyConfig("fedavg_sd", shared_fraction=1.0), seed=0)
    for inst in state.institutions:
        assert sorted(inst.indices.tolist()) == list(range(len(blobs)))


def test_fedsgd_gn_model_has_no_batchnorm(blobs):
    part = P.make_iid_partition(blobs, 4, seed=0)
    state = S.setup(bn_mlp(), blobs, part, S.StrategyConfig("fedsgd_gn", gn_groups=4), seed=0)
    kinds = {type(layer).__name__ for layer in state.server.stack.layers}
    assert "GroupNorm" in kinds and "BatchNorm" not in kinds
    with pytest.raises(ConfigError, match="try"):
        S.setup(bn_mlp(), blobs, part, S.StrategyConfig("fedsgd_gn", gn_groups=5), seed=0)


# -- serial -------------------------------------------------------------------


def test_cwt_hands_off_k_times(blobs):
    part = P.make_iid_partition(blobs, 4, seed=0)
    state = run(bn_mlp(), blobs, part, 2, kind="cwt")
    for r in (1, 2):
        hand = [e for e in state.ledger.entries if e.round == r]
        assert len(hand) == 4 and all(e.direction == "peer" for e in hand)
        assert [(e.origin, e.destination) for e in hand] == [(0, 1), (1, 2), (2, 3), (3, 0)]


def test_splitnn_hands_off_k_times_and_shares_fi(blobs):
    part = P.make_iid_partition(blobs, 4, seed=0)
    state = run(bn_mlp(), blobs, part, 2, kind="splitnn", cut=3)
    peers = [e for e in state.ledger.entries if e.direction == "peer"]
    assert len(peers) == 8
    blobs_ = {nn.serialize_weights(i.stack) for i in state.institutions}
    assert len(blobs_) == 1


def test_splitavg_fi_weights_drift_apart(blobs):
    part = P.make_label_skew_partition(blobs, P.SkewSpec(4, 1.0, seed=0))
    state = run(bn_mlp(), blobs, part, 2, kind="splitavg", cut=3)
    fi = {nn.serialize_weights(i.stack) for i in state.institutions}
    assert len(fi) == 4
    fs = {nn.serialize_weights(i.server_part) for i in state.institutions}
    assert len(fs) == 1


def test_empty_plan_rejected(blobs):
    part = P.make_iid_partition(blobs, 2, seed=0)
    state = S.setup(bn_mlp(), blobs, part, S.StrategyConfig("splitavg", cut=2), seed=0)
    with pytest.raises(ConfigError):
        S.splitavg_step(state, F.RoundPlan(()))


# -- training driver and evaluation -------------------------------------------


def test_train_is_deterministic(blobs):
    part = P.make_label_skew_partition(blobs, P.SkewSpec(4, 0.5, seed=0))
    runs = []
    for _ in range(2):
        state = S.setup(bn_mlp(), blobs, part, S.StrategyConfig("splitavg", cut=3, epochs=2), seed=9)
        S.train(state)
        runs.append(state)
    assert runs[0].loss_curve == runs[1].loss_curve
    assert weights(runs[0])[0].tobytes() == weights(runs[1])[0].tobytes()
    assert S.train(runs[0], epochs=0).ledger.total() == runs[1].ledger.total()


def test_early_stopping(blobs):
    part = P.make_iid_partition(blobs, 2, seed=0)
    # no learning and no running statistics: the metric never improves after epoch 1
    state = S.setup(plain_mlp(), blobs, part,
                    S.StrategyConfig("fedavg", lr=0.0, epochs=50, patience=3), seed=0)
    S.train(state, validation=blobs)
    assert state.round == 4


def test_evaluate_perfect_and_constant():
    d = P.synth_classification(200, 2, 8, seed=0)
    const = nn.LayerStack([nn.Dense(8, 2)], nn.classification(2), (8,))
    const.params()[0][...] = 0
    const.params()[1][...] = [1.0, 0.0]
    m = S.evaluate(const, d)
    assert abs(m.accuracy - np.mean(d.labels == 0)) < 1e-12
    assert 0.4 <= m.accuracy <= 0.6
    r = P.synth_regression(50, dims=2, seed=0)
    ident = nn.LayerStack([nn.Dense(2, 1)], nn.REGRESSION, (2,))
    with pytest.raises(ConfigError):
        S.evaluate(ident, d)
    assert S.evaluate(ident, r).mae >= 0


def test_evaluate_leaves_running_stats(blobs):
    part = P.make_iid_partition(blobs, 2, seed=0)
    state = run(bn_mlp(), blobs, part, 1, kind="fedavg")
    before = [t.copy() for t in state.server.stack.buffers()]
    S.evaluate(state, blobs)
    assert all(np.array_equal(a, b) for a, b in zip(before, state.server.stack.buffers()))


def test_split_evaluation_is_per_institution(blobs):
    part = P.make_iid_partition(blobs, 4, seed=0)
    state = run(bn_mlp(), blobs, part, 2, kind="splitavg", cut=3)
    m = S.evaluate(state, blobs)
    assert len(m.per_institution) == 4
    assert abs(np.mean(m.per_institution) - m.value) <= 1e-12


def test_fedsgd_gn_learns_on_iid(blobs):
    # group norm on dense features must not normalize single scalars to zero
    part = P.make_iid_partition(blobs, 4, seed=0)
    state = run(bn_mlp(), blobs, part, 20, kind="fedsgd_gn", lr=0.01)
    assert S.evaluate(state, blobs).value >= 0.9
