"""
Pruned weights cost nothing in the circuit
==========================================

Every nonzero weight becomes one running-sum row; zeros get no row at all.
Here a small MLP is pruned to half its weights, both circuits are built, and
a cheating prover tries its luck against each.
"""

import numpy as np

from zkslim import zoo
from zkslim.circuit import synthesize_circuit
from zkslim.harness import Bench, random_tamper, shared_labels, weight_labels
from zkslim.model import calibrate, quantize, quantize_input
from zkslim.pruner import apply_plan, magnitude_prune

fm = zoo.mlp([8, 16, 16, 4], seed=0)
X = quantize_input(zoo.gaussian_inputs(32, 8, seed=1), 12)

# quantize at 2^12, drop the smallest half of the weights, then size the lookups
q = calibrate(apply_plan(quantize(fm, 12), magnitude_prune(fm, 0.5)), X)

sparse = synthesize_circuit(q)
dense = synthesize_circuit(q, eliminate_zeros=False)
print("nonzero weights      ", sum(q.nnz()))
print("sparse multiply rows ", sparse.multiply_rows)
print("dense multiply rows  ", dense.multiply_rows)
print("rows by kind (sparse)", sparse.row_counts())

# %%
# Both circuits accept the honest witness for the same input ...
a, b = Bench(sparse, X[0]), Bench(dense, X[0])
print("honest:", a.honest(), b.honest())

# ... and both throw out the same tampers.
rng = np.random.default_rng(2)
labels, weights = shared_labels(sparse, dense), weight_labels(sparse)
for _ in range(8):
    t = random_tamper(rng, labels, weights)
    print(f"{str(t):40s} sparse {a.attack(t, seed=0)!s:28s} dense {b.attack(t, seed=0)}")
