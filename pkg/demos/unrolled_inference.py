"""Unrolled ADMM inference: one iteration is a feed-forward network, more
iterations drive the constraint residual to zero.

The activation step reuses the feed-forward nonlinearity, so with several
layers the fixed point solves the problem whose inner l1 weights are scaled
by ``1 + rho`` (and the top one by ``rho``). Both gaps are printed below.

Run::

    python demos/unrolled_inference.py
"""

import numpy as np

from deepca import admm, oracle
from deepca.model import Model, dense_layer, init_dense_weight, objective
from deepca.prox import PenaltySpec

rng = np.random.default_rng(0)
model = Model([
    dense_layer(init_dense_weight(8, 16, rng), PenaltySpec.nonneg_l1(np.full(16, 0.1))),
    dense_layer(init_dense_weight(16, 24, rng), PenaltySpec.nonneg_l1(np.full(24, 0.05))),
])
x = rng.standard_normal(8)

ff = oracle.feedforward_eval(model, x)
one = admm.infer(model, x, 1)
print("T=1 equals the feed-forward pass:", all(np.array_equal(a, b) for a, b in zip(one.z, ff)))

ref = oracle.proximal_gradient_solve(model, x, steps=50000, tol=1e-13)
scaled = Model([
    dense_layer(model.layers[0].weight, PenaltySpec.nonneg_l1(np.full(16, 0.1 * (1 + model.rho)))),
    dense_layer(model.layers[1].weight, PenaltySpec.nonneg_l1(np.full(24, 0.05 * model.rho))),
])
ref_scaled = oracle.proximal_gradient_solve(scaled, x, steps=50000, tol=1e-13)
print(f"reference objective {ref.objective:.6f}")
for T in (1, 2, 5, 20, 100, 500):
    st = admm.infer(model, x, T)
    gap = objective(model, x, st.z) - ref.objective
    dist = max(np.abs(z - w).max() for z, w in zip(st.z, ref_scaled.ws))
    r_primal = max(r[0] for r in admm.residuals(model, st))
    print(f"T={T:4d}  objective gap {gap:10.3e}  distance to rescaled optimum {dist:9.2e}"
          f"  primal residual {r_primal:9.2e}")
