"""
How often does a sampling verifier miss a bad row?
==================================================

In sampled mode the proof opens s rows chosen by hashing the commitments.
One corrupted row among n slips through with probability (1 - 1/n)^s.
"""

import math

from zkslim import zoo
from zkslim.circuit import MUL, assign_witness, synthesize_circuit
from zkslim.harness import tamper_witness
from zkslim.model import calibrate, quantize, quantize_input
from zkslim.transcript import keygen, prove, verify

fm = zoo.mlp([4, 5, 3], seed=7)
X = quantize_input(zoo.gaussian_inputs(10, 4), 8)
c = synthesize_circuit(calibrate(quantize(fm, 8), X))
pk, vk = keygen(c)
honest = assign_witness(c, X[0])

# corrupt one running sum in the middle of a dot product
label = next(l for l in sorted(c.labels(), key=repr)
             if l[0] == "psum" and c.kinds[c.cell(l)[1] + 1] == MUL)
bad = tamper_witness(c, honest, label, 1)

n, trials = c.rows, 2000
for s in (8, 32, 96):
    hits = sum(bool(verify(vk, X[0], honest.output, prove(pk, X[0], bad, "sampled", s, seed=t, check=False),
                           "sampled", s)) for t in range(trials))
    p = (1 - 1 / n) ** s
    print(f"s={s:3d}: accepted {hits / trials:.3f}, predicted {p:.3f} "
          f"(+/- {3 * math.sqrt(p * (1 - p) / trials):.3f})")
