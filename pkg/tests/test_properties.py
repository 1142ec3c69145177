import numpy as np
from hypothesis import given, settings
from hypothesis import strategies as st

from zkslim.circuit import assign_witness, first_violation, synthesize_circuit
from zkslim.field import P, embed, embed_array, lift, lift_array
from zkslim.merkle import MerkleTree, commit_column, leaf, verify_path
from zkslim.model import Linear, QuantizedModel, infer

signed = st.integers(min_value=-(P // 2), max_value=P // 2)


@given(signed)
def test_embed_lift_roundtrip(v):
    assert lift(embed(v)) == v
    assert 0 <= embed(v) < P


@given(st.lists(st.integers(-(2**40), 2**40), max_size=20))
def test_array_roundtrip(vs):
    np.testing.assert_array_equal(lift_array(embed_array(vs)), np.array(vs, dtype=np.int64))


@given(st.lists(st.integers(0, P - 1), min_size=1, max_size=33), st.data())
def test_merkle_paths(values, data):
    tree = MerkleTree([leaf(v) for v in values])
    i = data.draw(st.integers(0, len(values) - 1))
    assert verify_path(tree.root, i, leaf(values[i]), tree.path(i))
    assert not verify_path(tree.root, i, leaf((values[i] + 1) % P), tree.path(i))


@given(st.lists(st.integers(0, P - 1), min_size=1, max_size=16))
def test_blinding_changes_root(values):
    col = np.array(values, dtype=np.uint64)
    assert commit_column(col, b"\0" * 32).root != commit_column(col, b"\1" * 32).root


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 4), st.integers(1, 5), st.data())
def test_single_layer_circuit_matches_inference(d_out, d_in, data):
    ints = st.integers(-300, 300)
    W = np.array(data.draw(st.lists(st.lists(st.sampled_from([0, 0, 1, -7, 42, -255]) | ints,
                                                 min_size=d_in, max_size=d_in),
                                        min_size=d_out, max_size=d_out)))
    b = np.array(data.draw(st.lists(ints, min_size=d_out, max_size=d_out)))
    x = np.array(data.draw(st.lists(ints, min_size=d_in, max_size=d_in)))
    q = QuantizedModel([Linear(W, b)], d_in, scale=4)
    c = synthesize_circuit(q)
    w = assign_witness(c, x)
    assert first_violation(c, w) is None
    np.testing.assert_array_equal(w.output, infer(q, x)[0])
    assert c.multiply_rows == int(np.count_nonzero(W))
