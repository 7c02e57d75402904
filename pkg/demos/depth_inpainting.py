"""Depth completion from 10% of the pixels with the observed values enforced
exactly on the output layer.

Uses the packaged inpainting config with a reduced budget so it finishes in
a few minutes. ``deepca demo-inpaint`` runs the full sweep. Run::

    python demos/depth_inpainting.py
"""

import numpy as np

from deepca import learning as L
from deepca import synth
from deepca.config import load_config
from deepca.model import model_from_config

cfg = load_config(command="demo-inpaint")
train = L.Dataset(*synth.depth_dataset(48, 28, 28, seed=0))
test = L.Dataset(*synth.depth_dataset(32, 28, 28, seed=100))
tc = {k: v for k, v in cfg["train"].items()}
tc["epochs"] = 3

for T in (1, 5):
    model = model_from_config({**cfg["model"], "T": T}, seed=0)
    res = L.train(model, train, L.TrainConfig(**{**tc, "T": T}), test=test)
    ev = res.metrics[-1]
    print(f"T={T}: test MAE {ev['mae']:.4f}  max violation of observed pixels {ev['max_violation']:.1e}")

# the observed pixels come back exactly, whatever the rest of the network does
pred, _, _ = L.forward(res.model, test.subset(np.arange(4)), 5, None, "output")
m = test.mask[:4]
print("observed pixels reproduced:", bool(np.all(pred[m] == test.observed[:4][m])))
