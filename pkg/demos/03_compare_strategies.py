"""Train every strategy on an IID split and on a skewed split of the same data.

Prints test accuracy and the drop caused by the skew.  Takes a minute or two.
"""

import time

import numpy as np

from fedsplit import nn
from fedsplit import partition as P
from fedsplit import strategies as S

SEED = 0
full = P.synth_classification(2400, 2, 8, seed=100)
train, test = P.train_test_split(full, 1 / 3, seed=SEED)
model = nn.mlp(8, [32], nn.classification(2), np.random.default_rng(SEED), batchnorm=True)

quotas = P.feasible_quotas(train, 4)
iid = P.make_label_skew_partition(train, P.SkewSpec(4, 0.0, quotas=quotas, seed=SEED))
skew = P.make_label_skew_partition(train, P.calibrate_skew(train, 4, 0.7, seed=SEED, quotas=quotas))
print(f"KS: iid {P.mean_pairwise_ks(train, iid):.2f}, skewed {P.mean_pairwise_ks(train, skew):.2f}\n")

print(f"{'strategy':<14}{'iid':>8}{'skewed':>8}{'drop pp':>9}{'secs':>7}")
for kind in ("centralized", "fedavg", "fedavgm", "fedavg_sd", "fedsgd", "fedsgd_gn",
             "cwt", "splitnn", "splitavg", "splitavg_v2"):
    t0 = time.perf_counter()
    acc = []
    for part in (iid, skew):
        cut = 1 if kind.startswith("split") else None
        state = S.setup(model, train, part, S.StrategyConfig(kind, cut=cut, epochs=20), seed=SEED)
        S.train(state)
        acc.append(S.evaluate(state, test).value)
    print(f"{kind:<14}{acc[0]:>8.3f}{acc[1]:>8.3f}{100 * (acc[0] - acc[1]):>9.2f}"
          f"{time.perf_counter() - t0:>7.1f}")
