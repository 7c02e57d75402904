"""Train an unrolled network by backpropagation, save it, reload it and run
it with a different number of iterations.

Run::

    python demos/learn_and_checkpoint.py
"""

import tempfile
from pathlib import Path

import numpy as np

from deepca import learning as L
from deepca import synth
from deepca.model import Model, dense_layer, init_dense_weight
from deepca.prox import PenaltySpec

rng = np.random.default_rng(0)
D = synth.dictionary_gen(16, 32, coherence=0.5, seed=0)
X = synth.sparse_code_gen(32, 0.2, seed=1, n=128) @ D.T
data = L.Dataset(X, None)

model = Model([
    dense_layer(init_dense_weight(16, 32, rng), PenaltySpec.nonneg_l1(np.full(32, 0.2), learnable=True)),
])
for T in (1, 5):
    cfg = L.TrainConfig(epochs=20, batch_size=16, lr=0.01, T=T, readout="reconstruction")
    res = L.train(model, data, cfg)
    last = res.metrics[-1]
    print(f"T={T}: reconstruction loss {last['loss']:.4f}, code density {last['avg_sparsity_layer1']:.3f}")

with tempfile.TemporaryDirectory() as tmp:
    path = Path(tmp) / "model.dcac"
    L.save_checkpoint(path, res.model, res.optimizer.velocity, res.epoch, res.rng.bit_generator.state,
                      cfg.to_dict(), res.metrics)
    ck = L.load_checkpoint(path)
    for T in (1, 5, 20):
        ev = L.evaluate(ck.model, data, T, readout="reconstruction")
        print(f"reloaded, evaluated with T={T:2d}: loss {ev['loss']:.4f}")
