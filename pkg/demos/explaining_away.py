"""Feed-forward thresholding versus optimized codes on a coherent dictionary.

A feed-forward ReLU layer scores every atom independently, so two nearly
parallel atoms both fire for the same image. Solving the sparse coding
problem lets one of them explain the signal away. Run::

    python demos/explaining_away.py
"""

import numpy as np

from deepca import oracle, synth

D = synth.dictionary_gen(16, 32, coherence=0.7, seed=0)
codes = synth.sparse_code_gen(32, 0.1, seed=1, n=200)
images = codes @ D.T

stats = oracle.explaining_away_stats(D, images, b=0.1)
ff, opt = stats["ff_sparsity"], stats["opt_sparsity"]
print(f"mean nonzeros  feed-forward {ff.mean():6.2f}   optimized {opt.mean():6.2f}")
print(f"mean error     feed-forward {stats['ff_error'].mean():6.3f}   optimized {stats['opt_error'].mean():6.3f}")
print(f"optimized code sparser on {np.mean(opt < ff):.0%} of images")

# the effect disappears for an orthonormal dictionary
Q = synth.dictionary_gen(16, 16, seed=2)
orth = oracle.explaining_away_stats(Q, synth.sparse_code_gen(16, 0.2, seed=3, n=50) @ Q.T, b=0.1)
print("orthonormal dictionary, max code difference:",
      float(np.abs(orth["ff_codes"] - orth["opt_codes"]).max()))
