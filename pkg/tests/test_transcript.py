import numpy as np
import pytest

from zkslim import zoo
from zkslim.circuit import assign_chain, assign_witness, pad_dummy, pad_witness, split_circuit, synthesize_circuit
from zkslim.field import P
from zkslim.harness import tamper_witness
from zkslim.model import calibrate, quantize, quantize_input
from zkslim.pruner import apply_plan, magnitude_prune
from zkslim.transcript import (
    Proof,
    ProveError,
    VerificationKey,
    boundary_limbs,
    challenge_rows,
    keygen,
    prove,
    verify,
    verify_chain,
)


@pytest.fixture
def setup(small_q):
    q, X = small_q
    c = synthesize_circuit(q)
    pk, vk = keygen(c)
    w = assign_witness(c, X[0])
    return c, pk, vk, X[0], w


def test_keygen_is_deterministic_and_binds_fixed_cells(setup):
    c, pk, vk, _, _ = setup
    assert keygen(c)[1].to_bytes() == vk.to_bytes()
    assert VerificationKey.from_bytes(vk.to_bytes()) == vk
    fixed = c.fixed.copy()
    fixed[4, 0] = (int(fixed[4, 0]) + 1) % P
    from dataclasses import replace
    other = keygen(replace(c, fixed=fixed, _labels=c._labels))[1]
    assert other.fixed_roots[4] != vk.fixed_roots[4]
    assert other.fixed_roots[:4] == vk.fixed_roots[:4]


def test_padded_vk_differs(setup):
    c, _, vk, _, _ = setup
    pvk = keygen(pad_dummy(c, c.rows + 10))[1]
    assert pvk.rows == c.rows + 10 and pvk.digest() != vk.digest()
    assert len(pvk.to_bytes()) == len(vk.to_bytes())


def test_honest_accept_both_modes(setup):
    c, pk, vk, x, w = setup
    assert verify(vk, x, w.output, prove(pk, x, w))
    pf = prove(pk, x, w, "sampled", 8)
    assert verify(vk, x, w.output, pf, "sampled", 8)
    assert not verify(vk, x, w.output, pf, "audit")
    assert verify(vk, x, w.output, pf, "sampled", 9).reason == "mode mismatch"


def test_prover_refuses_bad_witness(setup):
    c, pk, vk, x, w = setup
    label = ("psum", 0, 1, 2)
    bad = tamper_witness(c, w, label, 1)
    with pytest.raises(ProveError) as e:
        prove(pk, x, bad)
    assert e.value.row == c.cell(label)[1]
    with pytest.raises(ProveError):
        prove(pk, x + 1, w)


def test_seeded_proofs_are_reproducible(setup):
    _, pk, _, x, w = setup
    a, b = prove(pk, x, w, seed=5), prove(pk, x, w, seed=5)
    assert a.to_bytes() == b.to_bytes()
    c, d = prove(pk, x, w), prove(pk, x, w)
    assert c.advice_roots != d.advice_roots  # fresh blinding


def test_tamper_reasons(setup):
    c, pk, vk, x, w = setup
    # pre-commit: consistent commitments, broken gate
    pf = prove(pk, x, tamper_witness(c, w, ("psum", 0, 1, 2), 3), check=False)
    v = verify(vk, x, w.output, pf)
    assert v.reason == "gate" and v.row == c.cell(("psum", 0, 1, 2))[1]
    # post-commit edit of the opened column
    pf = prove(pk, x, w)
    pf.advice[2, 3] = (int(pf.advice[2, 3]) + 1) % P
    assert verify(vk, x, w.output, pf).reason == "commitment mismatch"
    # forged activation output: gates hold, the lookup does not
    forged = tamper_witness(c, tamper_witness(c, w, ("act_out", 1, 0), 7), ("act_copy", 1, 0), 7)
    pf = prove(pk, x, forged, check=False)
    v = verify(vk, x, w.output, pf)
    assert v.reason == "lookup miss" and v.row == c.cell(("act_out", 1, 0))[1]
    # wrong claimed output
    y = w.output.copy()
    y[0] += 1
    assert verify(vk, x, y, prove(pk, x, w)).reason == "instance mismatch"
    assert verify(vk, x + 1, w.output, prove(pk, x, w)).reason == "instance mismatch"


def test_foreign_shape_is_rejected(setup, small_q):
    c, pk, vk, x, w = setup
    pf = prove(pk, x, w)
    q2 = apply_plan(small_q[0], magnitude_prune(zoo.mlp([4, 6, 3], seed=3), 0.5))
    c2 = synthesize_circuit(q2)
    pk2, vk2 = keygen(c2)
    assert verify(vk2, x, w.output, pf).reason == "shape mismatch"


def test_serialization_roundtrip(setup):
    c, pk, vk, x, w = setup
    for mode, s in (("audit", 0), ("sampled", 6)):
        pf = prove(pk, x, w, mode, s, seed=1)
        back = Proof.from_bytes(pf.to_bytes())
        assert back.to_bytes() == pf.to_bytes()
        assert verify(vk, x, w.output, back, mode, s or None)
    with pytest.raises(ValueError):
        Proof.from_bytes(pf.to_bytes() + b"\0")


def test_sampled_opens_challenge_and_boundary_rows(setup):
    c, pk, vk, x, w = setup
    pf = prove(pk, x, w, "sampled", 5, seed=2)
    rows = {op.row for op in pf.openings}
    assert set(challenge_rows(vk, pf.instance, pf.advice_roots, 5)) <= rows
    pf.openings.pop()
    assert verify(vk, x, w.output, pf, "sampled", 5).reason == "malformed"


def test_sampled_catches_bad_row_when_it_is_opened(setup):
    c, pk, vk, x, w = setup
    bad = tamper_witness(c, w, ("psum", 0, 1, 2), 1)
    bad_row = c.cell(("psum", 0, 1, 2))[1]
    caught = missed = 0
    for seed in range(40):
        pf = prove(pk, x, bad, "sampled", 4, seed=seed, check=False)
        v = verify(vk, x, w.output, pf, "sampled", 4)
        hit = bad_row in challenge_rows(vk, pf.instance, pf.advice_roots, 4)
        assert bool(v) != hit
        caught += hit
        missed += not hit
    assert caught and missed


def six_layer(seed=0):
    fm = zoo.mlp([8] * 7, seed=seed)
    X = quantize_input(zoo.gaussian_inputs(10, 8, seed=seed), 8)
    return calibrate(quantize(fm, 8), X), X


def chain_proofs(parts, x, ws=None):
    ws = ws or assign_chain(parts, x)
    keys = [keygen(c) for c in parts]
    proofs = [prove(pk, x if i == 0 else None, w, seed=i) for i, ((pk, _), w) in enumerate(zip(keys, ws))]
    return [vk for _, vk in keys], proofs, ws


def test_chain_single_part_matches_verify(small_q):
    q, X = small_q
    _, parts = split_circuit(q, None, 1)
    vks, proofs, ws = chain_proofs(parts, X[1])
    assert verify_chain(vks, proofs, X[1], ws[-1].output)
    assert bool(verify(vks[0], X[1], ws[-1].output, proofs[0])) is True


def test_chain_three_parts():
    q, X = six_layer()
    mono = synthesize_circuit(q)
    _, parts = split_circuit(q, None, 3)
    vks, proofs, ws = chain_proofs(parts, X[0])
    y = assign_witness(mono, X[0]).output
    np.testing.assert_array_equal(ws[-1].output, y)
    assert verify_chain(vks, proofs, X[0], y)
    assert boundary_limbs(proofs[0], "in") is None and boundary_limbs(proofs[0], "out") == boundary_limbs(proofs[1], "in")

    # a prover who runs part 2 on a perturbed intermediate vector
    mid = ws[0].output.copy()
    mid[2] += 5
    forged = list(ws)
    forged[1] = assign_witness(parts[1], mid)
    forged[2] = assign_witness(parts[2], forged[1].output)
    vks, proofs, _ = chain_proofs(parts, X[0], forged)
    v = verify_chain(vks, proofs, X[0], forged[2].output)
    assert (v.reason, v.part) == ("chain", 2)
    assert str(v) == "reject(chain @ part 2)"

    # editing the boundary cells only breaks the in-circuit commitment binding
    w1 = ws[1].copy()
    col, row = parts[1].boundary_in[2]
    w1.advice[col, row] = (int(w1.advice[col, row]) + 5) % P
    proofs[1] = prove(keygen(parts[1])[0], None, w1, check=False)
    v = verify_chain(vks, proofs, X[0], forged[2].output)
    assert not v and v.part == 2


def test_vk_privacy():
    fa = zoo.mlp([6, 8, 4], seed=1)
    fb = zoo.mlp([6, 8, 4], seed=2)
    X = quantize_input(zoo.gaussian_inputs(20, 6), 12)
    circuits, qs = [], []
    for fm in (fa, fb):
        q = calibrate(quantize(fm, 12), X)
        # identical sparsity pattern, different values
        q = apply_plan(q, magnitude_prune(fa, 0.5))
        qs.append(q)
        circuits.append(synthesize_circuit(q, [(-(2**15), 2**15)]))
    (pka, vka), (pkb, vkb) = keygen(circuits[0]), keygen(circuits[1])
    assert len(vka.to_bytes()) == len(vkb.to_bytes()) and vka.rows == vkb.rows
    assert vka.fixed_roots[4] != vkb.fixed_roots[4]
    for pk, vk, q in ((pka, vka, qs[0]), (pkb, vkb, qs[1])):
        x = X[0]
        w = assign_witness(pk.circuit, x)
        public = {abs(int(v)) for v in np.concatenate([x, w.output])} | {2**15, 2**12}
        # small integers double as row indices and counts; a zero low byte is a shifted small integer
        floor = max(pk.circuit.rows, 255)
        secret = [int(v) for i in q.linear_indices() for v in q.layers[i].weight.ravel()
                  if abs(int(v)) > floor and abs(int(v)) not in public and int(v) & 0xFF]
        assert len(secret) > 10
        blob = vk.to_bytes() + prove(pk, x, w).header_bytes() + prove(pk, x, w, "sampled", 0).header_bytes()
        for v in secret:
            for enc in (int(v % P).to_bytes(8, "little"), int(v).to_bytes(8, "little", signed=True),
                        int(v).to_bytes(4, "little", signed=True)):
                assert enc not in blob
