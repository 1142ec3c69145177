"""Tamper harness: play a cheating prover against the verifier.

Tampers are addressed by semantic cell labels (e.g. ``("psum", layer, i, j)``)
so the same wire can be hit in a sparse and a dense circuit of one model.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .circuit import MUL, CircuitTable, Witness, assign_witness
from .field import P, lift
from .model import copy_model
from .transcript import Proof, keygen, prove, verify

ADVICE_LABELS = ("in", "carry", "psum", "quotient", "remainder", "acc", "act_in", "act_out",
                 "act_copy", "add_a", "add_b", "add_out", "pass_in", "pass_out", "bias_out")
CATEGORIES = ("advice", "post_commit", "fixed", "output")


@dataclass(frozen=True)
class Tamper:
    category: str
    label: tuple = ()
    delta: int = 1

    def __str__(self):
        return f"{self.category}:{'/'.join(map(str, self.label))}{self.delta:+d}"


def shift(value: int, delta: int) -> int:
    return (int(value) + delta) % P


def tamper_witness(circuit: CircuitTable, witness: Witness, label, delta: int) -> Witness:
    col, row = circuit.cell(label)
    out = witness.copy()
    out.advice[col, row] = np.uint64(shift(out.advice[col, row], delta))
    return out


def tamper_fixed(circuit: CircuitTable, label, delta: int) -> CircuitTable:
    """Change the weight (``F0``) of the running-sum row behind ``("psum", l, i, j)``."""
    _, row = circuit.cell(("psum",) + tuple(label[1:]))
    fixed = circuit.fixed.copy()
    fixed[4, row] = np.uint64(shift(fixed[4, row], delta))
    return replace(circuit, fixed=fixed, _labels=circuit._labels)


def shared_labels(*circuits: CircuitTable, names=ADVICE_LABELS) -> list[tuple]:
    """Advice labels present in every circuit, in a stable order."""
    common = set(circuits[0].labels())
    for c in circuits[1:]:
        common &= set(c.labels())
    return sorted((l for l in common if l[0] in names), key=repr)


def weight_labels(circuit: CircuitTable) -> list[tuple]:
    return sorted((l for l in circuit.labels() if l[0] == "psum"), key=repr)


def random_tamper(rng: np.random.Generator, labels: list[tuple], weights: list[tuple],
                  probs=(0.7, 0.1, 0.1, 0.1)) -> Tamper:
    cat = CATEGORIES[rng.choice(len(CATEGORIES), p=probs)]
    mag = int(rng.integers(1, 2**16))
    delta = mag if rng.random() < 0.5 else -mag
    if cat in ("advice", "post_commit"):
        return Tamper(cat, labels[rng.integers(len(labels))], delta)
    if cat == "fixed":
        return Tamper(cat, weights[rng.integers(len(weights))], delta)
    return Tamper(cat, (int(rng.integers(1 << 30)),), delta)


class Bench:
    """A circuit with its keys and an honest witness for one input."""

    def __init__(self, circuit: CircuitTable, x, witness: Witness | None = None):
        self.circuit = circuit
        self.pk, self.vk = keygen(circuit)
        self.x = np.asarray(x, dtype=np.int64)
        self.witness = witness if witness is not None else assign_witness(circuit, self.x)
        self.y = self.witness.output

    def honest(self, mode="audit", samples=0):
        pf = prove(self.pk, self.x, self.witness, mode, samples)
        return verify(self.vk, self.x, self.y, pf, mode, samples or None)

    def attack(self, t: Tamper, seed: int | None = None):
        """Run one tamper; returns the verifier's verdict."""
        c = self.circuit
        if t.category == "advice":
            w = tamper_witness(c, self.witness, t.label, t.delta)
            pf = prove(self.pk, self.x, w, check=False, seed=seed)
            return verify(self.vk, self.x, self.y, pf)
        if t.category == "post_commit":
            pf = prove(self.pk, self.x, self.witness, seed=seed)
            col, row = c.cell(t.label)
            pf.advice[col, row] = np.uint64(shift(pf.advice[col, row], t.delta))
            return verify(self.vk, self.x, self.y, pf)
        if t.category == "fixed":
            bad_pk, _ = keygen(tamper_fixed(c, t.label, t.delta))
            w = assign_witness(bad_pk.circuit, self.x, _model_with_fixed(bad_pk.circuit, c))
            pf = prove(bad_pk, self.x, w, check=False, seed=seed)
            return verify(self.vk, self.x, self.y, pf)
        if t.category == "output":
            pf = prove(self.pk, self.x, self.witness, seed=seed)
            j = t.label[0] % len(self.y)
            y = self.y.copy()
            y[j] += t.delta
            return verify(self.vk, self.x, y, pf)
        raise ValueError(t.category)


def _model_with_fixed(bad: CircuitTable, good: CircuitTable):
    """The model implied by a circuit whose weight cells were altered (the cheater's model)."""
    model = copy_model(good.model)
    for r in np.flatnonzero(bad.kinds == MUL).tolist():
        if bad.fixed[4, r] != good.fixed[4, r]:
            li, i, j = bad.meta[r].tolist()
            model.layers[li].weight[i, j] = lift(int(bad.fixed[4, r]))
    return model


def tamper_proof_bytes(proof: Proof, offset: int) -> Proof | None:
    """Flip one byte of a serialized proof; ``None`` if it no longer parses."""
    raw = bytearray(proof.to_bytes())
    raw[offset % len(raw)] ^= 0x01
    try:
        return Proof.from_bytes(bytes(raw))
    except Exception:
        return None

