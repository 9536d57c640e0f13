"""Count the scalars each strategy puts on the wire and compare with the closed form."""

import numpy as np

from fedsplit import federation as F
from fedsplit import nn
from fedsplit import partition as P
from fedsplit import strategies as S

data = P.synth_classification(400, 2, 8, seed=0)
part = P.make_iid_partition(data, 4, seed=0)
model = nn.mlp(8, [32], nn.classification(2), np.random.default_rng(0), batchnorm=True)
print("model size:", model.n_state, "state scalars; cut-1 map width:", F.cut_map_size(model, 1))

for kind in ("fedavg", "fedsgd", "cwt", "splitnn", "splitavg", "splitavg_v2"):
    cut = 1 if kind.startswith("split") else None
    state = S.setup(model, data, part, S.StrategyConfig(kind, cut=cut, St=3), seed=0)
    S.train(state, epochs=2)
    s = state.ledger.summary()
    print(f"\n{kind}: {s['total_scalars']:,} scalars in {s['messages']} messages")
    for variant, n in s["by_variant"].items():
        print(f"  {variant:<14}{n:>12,}")

# closed forms for published architectures
print(f"\nFedSGD upload, 21.3M-parameter model: {F.analytic_floats('fedsgd', param_count=21_300_000):.3g}")
conv1 = 64 * 112 * 112
print(f"SplitAVG, one 64x112x112 feature map plus label: "
      f"{F.analytic_floats('splitavg', B=1, St=1, cutmap_size=conv1):,}")
