"""Build a small network, check its gradients, split it and train it.

Run with ``python3 demos/01_layers_and_gradients.py``.
"""

import warnings

import numpy as np

from fedsplit import nn
from fedsplit import partition as P

rng = np.random.default_rng(0)
model = nn.mlp(8, [16, 16], nn.classification(2), rng, batchnorm=True)
print("layers:", [type(l).__name__ for l in model.layers])
print("learnable scalars:", sum(p.size for p in model.params()))

# backprop against central differences on a random batch
x = rng.normal(size=(12, 8))
y = rng.integers(0, 2, size=12)
print(f"max relative gradient error: {nn.grad_check(model, x, y, model.task.loss_kind):.2e}")

# splitting at any boundary leaves the composite function unchanged
out, _ = nn.forward(model, x, train=False)
for cut in range(len(model.layers) + 1):
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", nn.LastLayerCutWarning)  # cut 7 leaves the server empty
        parts = nn.split(model, cut)
    joined = nn.join(parts.institutional, parts.server)
    same = np.array_equal(nn.forward(joined, x, train=False)[0], out)
    print(f"cut {cut}: {len(parts.institutional.layers)} + {len(parts.server.layers)} layers, same output: {same}")

# a few epochs of plain SGD with momentum
data = P.synth_classification(600, 2, 8, seed=1)
opt = nn.OptimState(lr=0.01, momentum=0.9)
for epoch in range(5):
    order = rng.permutation(len(data))
    # train_step returns the loss summed over the batch
    total = sum(nn.train_step(model, opt, data.features[b], data.labels[b])
                for b in np.array_split(order, len(order) // 32))
    print(f"epoch {epoch}: loss per sample {total / len(data):.4f}")
