"""
Shrinking lookup tables with teleportation
==========================================

A few hidden neurons with inflated incoming weights stretch every activation
table. Rescaling each neuron by tau (and its outgoing weights by 1/tau)
leaves a ReLU net's function alone while squeezing those ranges.
"""

import numpy as np

from zkslim import zoo
from zkslim.circuit import build_lookup_tables
from zkslim.model import calibrate, forward, quantize, quantize_input, run_quantized
from zkslim.ranges import activation_range_stats
from zkslim.teleport import TeleportConfig, optimize_cob, teleport_apply, teleport_float

fm = zoo.outlier_mlp([8, 16, 16, 4], seed=3, factor=8)
calib = zoo.gaussian_inputs(64, 8, seed=4)

cob = optimize_cob(fm, calib, TeleportConfig(max_iter=150))
hist = cob.history
print(f"objective {hist[0]['loss']:.2f} -> {min(h['loss'] for h in hist):.2f}")
print("tau:", np.round(cob.tau, 2))

# the float function does not move
gap = np.abs(forward(fm, calib) - forward(teleport_float(fm, cob), calib)).max()
print(f"max output change {gap:.1e}")

# %%
# In integer units, the per-sample activation range and the table sizes
s = 12
Xq = quantize_input(calib, s)
q = quantize(fm, s)
moved = teleport_apply(q, cob)
_, _, before = run_quantized(q, Xq, mode="free")
_, _, after = run_quantized(moved, Xq, mode="free")
rr = activation_range_stats(before, after)
print(f"mean range {rr.before.mean:.2f} -> {rr.after.mean:.2f} ({rr.reduction_pct:.1f}% smaller)")


def entries(model):
    tables, _ = build_lookup_tables(calibrate(model, Xq))
    return sum(t.entries for t in tables)


print("lookup entries", entries(q), "->", entries(moved))
