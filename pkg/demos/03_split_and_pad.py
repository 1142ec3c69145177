"""
Splitting a circuit, and hiding how sparse it is
================================================

A deep model can be proven in parts. Each part commits to the vector it
hands over, and the verifier checks that neighbouring commitments agree.
Padding with dummy rows hides the sparsity level from anyone holding the vk.
"""

from zkslim import zoo
from zkslim.circuit import assign_chain, pad_dummy, pad_witness, split_circuit, synthesize_circuit
from zkslim.model import calibrate, quantize, quantize_input
from zkslim.pruner import apply_plan, magnitude_prune
from zkslim.transcript import keygen, prove, verify, verify_chain

fm = zoo.mlp([8] * 7, seed=5)
X = quantize_input(zoo.gaussian_inputs(16, 8, seed=6), 10)
q = calibrate(quantize(fm, 10), X)

for M in (1, 2, 3):
    plan, parts = split_circuit(q, None, M)
    ws = assign_chain(parts, X[0])
    keys = [keygen(c) for c in parts]
    proofs = [prove(pk, X[0] if i == 0 else None, w) for i, ((pk, _), w) in enumerate(zip(keys, ws))]
    v = verify_chain([vk for _, vk in keys], proofs, X[0], ws[-1].output)
    print(f"M={M}: part rows {[p.rows for p in parts]}, verdict {v}")

# %%
# Two sparsity levels, same public shape once padded to the dense row count
dense_rows = synthesize_circuit(q, eliminate_zeros=False).rows
for ratio in (0.3, 0.6):
    pq = calibrate(apply_plan(quantize(fm, 10), magnitude_prune(fm, ratio)), X)
    c = synthesize_circuit(pq, [(-(2**14), 2**14)] * 5)
    padded = pad_dummy(c, dense_rows)
    pk, vk = keygen(padded)
    w = pad_witness(assign_chain([c], X[0])[0], padded.rows)
    ok = verify(vk, X[0], w.output, prove(pk, X[0], w))
    print(f"R={ratio}: unpadded rows {c.rows}, padded rows {vk.rows}, k={vk.k}, "
          f"vk bytes {len(vk.to_bytes())}, {ok}")
