import csv
import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fedsplit import federation as F
from fedsplit import nn
from fedsplit.errors import ConfigError, LedgerError


def resnet34_param_count(classes):
    """Count conv/BN/fc parameters of a torchvision-style ResNet34 by hand."""
    conv = lambda cin, cout, k: cin * cout * k * k  # noqa: E731
    bn = lambda c: 2 * c  # noqa: E731
    total = conv(3, 64, 7) + bn(64)
    cin = 64
    for cout, blocks in [(64, 3), (128, 4), (256, 6), (512, 3)]:
        for b in range(blocks):
            total += conv(cin, cout, 3) + bn(cout) + conv(cout, cout, 3) + bn(cout)
            if b == 0 and cin != cout:
                total += conv(cin, cout, 1) + bn(cout)
            cin = cout
    return total + 512 * classes + classes


# -- messages and ledger ------------------------------------------------------


def test_feature_maps_count_includes_labels():
    x = np.zeros((32, 8, 14, 14))
    y = np.zeros(32)
    msg = F.make_message(F.Variant.FEATURE_MAPS, 0, F.SERVER, x, y)
    assert msg.scalar_count == 32 * 8 * 14 * 14 + 32 == 50_208
    assert msg.direction == "up"


def test_empty_weights_message_is_zero():
    msg = F.make_message(F.Variant.FULL_WEIGHTS, F.SERVER, 2)
    assert msg.scalar_count == 0 and msg.direction == "down"


def test_inconsistent_count_rejected():
    msg = F.Message(F.Variant.CUT_GRADIENTS, F.SERVER, 0, (np.zeros(3),), 4)
    with pytest.raises(LedgerError):
        F.CommLedger().record(msg, 1)


def test_two_records_sum():
    led = F.CommLedger()
    F.record(led, F.make_message(F.Variant.FEATURE_MAPS, 0, F.SERVER, np.zeros(5)), 1)
    F.record(led, F.make_message(F.Variant.FEATURE_MAPS, 1, F.SERVER, np.zeros(7)), 1)
    F.record(led, F.make_message(F.Variant.CUT_GRADIENTS, F.SERVER, 1, np.zeros(2)), 2)
    assert led.total() == 14
    assert led.total(round=1) == 12
    assert led.total(direction="down") == 2
    assert led.breakdown(1) == {("up", "FeatureMaps"): 12}
    assert led.rows() == [(1, "up", "FeatureMaps", 12), (2, "down", "CutGradients", 2)]


@settings(max_examples=60, deadline=None)
@given(st.lists(st.tuples(st.integers(0, 3), st.booleans(), st.integers(0, 20), st.integers(1, 4)),
                min_size=1, max_size=30))
def test_ledger_totals_monotone_and_conserved(msgs):
    led = F.CommLedger()
    running = 0
    for k, up, n, rnd in msgs:
        origin, dest = (k, F.SERVER) if up else (F.SERVER, k)
        led.record(F.make_message(F.Variant.FEATURE_MAPS, origin, dest, np.zeros(n)), rnd)
        assert led.total() >= running
        running = led.total()
    assert running == sum(m[2] for m in msgs)
    assert sum(led.sent.values()) == sum(led.received.values()) == running
    ups = sum(n for k, up, n, _ in msgs if up)
    assert led.received[F.SERVER] == led.total(direction="up") == ups
    assert sum(n for _, _, n in [(r, d, n) for r, d, _, n in led.rows()]) == running


def test_ledger_exports(tmp_path):
    led = F.CommLedger()
    led.record(F.make_message(F.Variant.LOSS_SCALAR, 0, F.SERVER, np.zeros(1)), 1)
    led.to_csv(tmp_path / "ledger.csv")
    led.to_json(tmp_path / "ledger.json")
    rows = list(csv.reader((tmp_path / "ledger.csv").open()))
    assert rows == [["round", "direction", "variant", "scalars"], ["1", "up", "LossScalar", "1"]]
    assert json.loads((tmp_path / "ledger.json").read_text())["total_scalars"] == 1


# -- sampling -----------------------------------------------------------------


def test_sample_all_four():
    assert F.sample_institutions(4, 4, np.random.default_rng(0)).ids == (0, 1, 2, 3)


def test_sample_four_of_ten():
    plan = F.sample_institutions(10, 4, np.random.default_rng(0), round=3)
    assert len(set(plan.ids)) == 4 and all(0 <= i < 10 for i in plan.ids)
    assert list(plan.ids) == sorted(plan.ids) and plan.round == 3


def test_sample_single():
    assert F.sample_institutions(1, 1, np.random.default_rng(0)).ids == (0,)


def test_sample_too_many():
    with pytest.raises(ConfigError):
        F.sample_institutions(3, 4, np.random.default_rng(0))


def test_sampling_replays_and_is_roughly_uniform():
    a = [F.sample_institutions(10, 4, np.random.default_rng(7)).ids for _ in range(3)]
    assert a[0] == a[1] == a[2]
    rng = np.random.default_rng(1)
    counts = np.zeros(10)
    for _ in range(5000):
        counts[list(F.sample_institutions(10, 4, rng).ids)] += 1
    assert np.allclose(counts / 5000, 0.4, atol=0.03)


# -- batches ------------------------------------------------------------------


def test_batch_iterator_covers_pass_then_reshuffles():
    it = F.BatchIterator(np.arange(10), 3, np.random.default_rng(0))
    first = np.concatenate([it.next() for _ in range(3)])
    assert len(set(first.tolist())) == 9
    assert len(it.next()) == 3 and it.position == 3


def test_batch_iterator_small_set():
    it = F.BatchIterator([4, 5], 32, np.random.default_rng(0))
    assert sorted(it.next().tolist()) == [4, 5]


# -- analytic accounting ------------------------------------------------------


def test_resnet34_count():
    assert resnet34_param_count(2) == 21_285_698
    assert f"{resnet34_param_count(2):.2e}" == "2.13e+07"


def test_fedsgd_formula_reproduces_published_figure():
    assert F.analytic_floats("fedsgd", param_count=21_300_000, St=4) == 2.13e7


def test_splitavg_formula_published_setting():
    # first-conv output of a 224x224 image: 64 x 112 x 112 scalars per sample
    v = F.analytic_floats("splitavg", B=1, St=1, cutmap_size=64 * 112 * 112)
    assert v == 802_817
    assert 1 / 1.1 <= v / 8.03e5 <= 1.1


def test_desk_cnn_hand_count():
    model = nn.small_cnn((1, 8, 8), [4, 8], nn.classification(3), np.random.default_rng(0))
    cut = 1
    (c, h, w) = model.shapes()[cut]
    assert (c, h, w) == (4, 8, 8)
    assert F.analytic_floats("splitavg", model, B=32, St=4, cut=cut) == 4 * 32 * (4 * 8 * 8 + 1)
    assert F.analytic_floats("splitavg_v2", model, B=32, St=4, cut=cut) == 4 * (32 * 256 + 32 * 3 + 1)
    hand = sum(t.size for layer in model.layers for t in layer.params() + layer.buffers())
    assert F.analytic_floats("fedavg", model) == hand == model.n_state


def test_sync_steps():
    assert F.sync_steps([100, 64, 7], 32) == 4
    assert F.sync_steps([3], 32) == 1


# -- final transfer -----------------------------------------------------------


def _split_institutions(K, cut=2):
    rng = np.random.default_rng(0)
    model = nn.mlp(4, [6], nn.classification(2), rng, batchnorm=True)
    sub = nn.split(model, cut)
    server = F.ServerState(sub.server, None, rng)
    insts = []
    for k in range(K):
        fi = sub.institutional.copy()
        for t in fi.params():
            t += 0.01 * k
        insts.append(F.InstitutionState(k, fi, None, np.arange(3),
                                        F.BatchIterator(np.arange(3), 2, rng)))
    return model, sub, server, insts


def test_final_transfer_four():
    model, sub, server, insts = _split_institutions(4)
    led = F.CommLedger()
    F.final_weight_transfer(server, insts, led, round=5)
    blobs = {nn.serialize_weights(i.server_part) for i in insts}
    assert len(blobs) == 1
    assert blobs.pop() == nn.serialize_weights(server.stack)
    fs_size = sum(t.size for t in sub.server.state_tensors())
    assert led.breakdown(5) == {("down", "FullWeights"): 4 * fs_size}
    assert len(led.entries) == 4
    # institutions keep their own FI
    assert not np.array_equal(insts[0].stack.params()[0], insts[1].stack.params()[0])
    # the server copy is independent of later server updates
    server.stack.params()[0][...] += 1
    assert not np.array_equal(insts[0].server_part.params()[0], server.stack.params()[0])


def test_final_transfer_single_composite():
    model, sub, server, insts = _split_institutions(1)
    F.final_weight_transfer(server, insts)
    comp = F.composite(insts[0])
    x = np.random.default_rng(1).normal(size=(5, 4))
    assert np.array_equal(nn.forward(comp, x, train=False)[0], nn.forward(model, x, train=False)[0])


def test_composite_before_transfer():
    _, _, _, insts = _split_institutions(1)
    with pytest.raises(ConfigError):
        F.composite(insts[0])
