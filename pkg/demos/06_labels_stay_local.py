"""The label-private variant: same weights, no labels on the wire.

The server sends prediction chunks down and each institution returns its
loss and the gradient of that loss, so labels never leave the institution.
"""

import numpy as np

from fedsplit import nn
from fedsplit import partition as P
from fedsplit import strategies as S

data = P.synth_classification(600, 2, 8, seed=0)
part = P.make_label_skew_partition(data, P.SkewSpec(3, 0.5, seed=0))
model = nn.mlp(8, [16], nn.classification(2), np.random.default_rng(0), batchnorm=True)

states = {}
for kind in ("splitavg", "splitavg_v2"):
    state = S.setup(model, data, part, S.StrategyConfig(kind, cut=2, lr=0.01), seed=0)
    S.train(state, epochs=5)
    states[kind] = state
    print(f"{kind}: messages {state.ledger.summary()['by_variant']}")

v1, v2 = (S.composite_models(states[k]) for k in ("splitavg", "splitavg_v2"))
same = all(np.array_equal(a, b) for m1, m2 in zip(v1, v2)
           for a, b in zip(m1.state_tensors(), m2.state_tensors()))
print("weights bitwise equal:", same)
print("largest loss-curve gap:", max(abs(a - b) for a, b in zip(states["splitavg"].loss_curve,
                                                              states["splitavg_v2"].loss_curve)))
