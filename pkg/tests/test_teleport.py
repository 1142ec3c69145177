from concurrent.futures import ThreadPoolExecutor

import numpy as np
import pytest

from zkslim import zoo
from zkslim.model import Activation, FloatModel, Linear, ResidualAdd, forward, lower_conv2d, quantize
from zkslim.pruner import apply_plan, magnitude_prune
from zkslim.teleport import (
    FIXED,
    CoBAssignment,
    Objective,
    TeleportConfig,
    TeleportError,
    assign_cob_groups,
    cge_gradient,
    optimize_cob,
    range_term,
    teleport_apply,
    teleport_float,
)


def test_plain_mlp_has_one_group_per_hidden_neuron():
    cob = assign_cob_groups(zoo.mlp([4, 8, 2]))
    assert cob.n_groups == 8
    np.testing.assert_array_equal(cob.in_groups[0], FIXED)
    np.testing.assert_array_equal(cob.out_groups[1], FIXED)
    np.testing.assert_array_equal(cob.out_groups[0], np.arange(8))


def test_residual_merges_site_groups():
    rng = np.random.default_rng(0)
    layers = [Linear(rng.normal(size=(5, 3)), np.zeros(5)), Activation("relu"),
              Linear(rng.normal(size=(5, 5)), np.zeros(5)), Activation("relu"),
              ResidualAdd(1), Linear(rng.normal(size=(2, 5)), np.zeros(2))]
    cob = assign_cob_groups(FloatModel(layers, 3))
    assert cob.n_groups == 5
    np.testing.assert_array_equal(cob.out_groups[0], cob.out_groups[1])


def test_residual_from_input_pins_everything():
    rng = np.random.default_rng(0)
    layers = [Linear(rng.normal(size=(3, 3)), np.zeros(3)), Activation("relu"), ResidualAdd(-1),
              Linear(rng.normal(size=(2, 3)), np.zeros(2))]
    assert assign_cob_groups(FloatModel(layers, 3)).n_groups == 0


def test_conv_channels_share_groups():
    conv = lower_conv2d(np.random.default_rng(1).normal(size=(4, 1, 3, 3)), np.zeros(4), 5, 5)
    head = Linear(np.ones((2, conv.out_dim)), np.zeros(2))
    cob = assign_cob_groups(FloatModel([conv, Activation("relu"), head], 25))
    assert cob.n_groups == 4
    assert len(np.unique(cob.out_groups[0])) == 4


def test_unit_tau_is_identity():
    fm = zoo.mlp([4, 6, 3], seed=2)
    moved = teleport_float(fm, assign_cob_groups(fm))
    for a, b in zip(fm.layers, moved.layers):
        if isinstance(a, Linear):
            np.testing.assert_array_equal(a.weight, b.weight)


def test_single_weight_ratio():
    fm = FloatModel([Linear(np.array([[3.0]]), np.zeros(1)), Activation("relu"),
                     Linear(np.array([[3.0]]), np.zeros(1))], 1)
    moved = teleport_float(fm, assign_cob_groups(fm).with_tau([2.0]))
    assert moved.layers[0].weight[0, 0] == 1.5  # into the scaled neuron: divided
    assert moved.layers[2].weight[0, 0] == 6.0  # out of it: multiplied


def test_relu_function_preserved():
    fm = zoo.mlp([5, 7, 7, 2], seed=4)
    cob = assign_cob_groups(fm)
    cob = cob.with_tau(np.random.default_rng(5).uniform(0.2, 5.0, cob.n_groups))
    X = zoo.gaussian_inputs(100, 5, seed=6)
    np.testing.assert_allclose(forward(teleport_float(fm, cob), X), forward(fm, X), rtol=1e-9, atol=1e-12)


def test_hidden_tau_two_on_two_layer_net():
    fm = zoo.mlp([3, 4, 2], seed=9)
    cob = assign_cob_groups(fm).with_tau(np.full(4, 2.0))
    X = zoo.gaussian_inputs(100, 3)
    np.testing.assert_allclose(forward(teleport_float(fm, cob), X), forward(fm, X), rtol=1e-12)


def test_range_term_examples():
    assert range_term([np.full((3, 4), 2.5)]) == 0.0
    assert range_term([np.array([[4096.0, 20480.0]])], [np.array([1.0, 5.0])]) == 0.0
    assert range_term([np.array([[-3.0, 1.0, 9.0]])]) == 12.0


def test_reconstruction_zero_at_unit_tau():
    fm = zoo.mlp([4, 6, 2], seed=1, activation="gelu")
    obj = Objective(fm, assign_cob_groups(fm), zoo.gaussian_inputs(10, 4), lam=1.0)
    assert obj.terms(np.ones(6))[2] == 0.0


def test_cge_quadratic_example():
    g, base = cge_gradient(lambda t: float((t[0] - 2) ** 2), np.array([3.0]), 0.01)
    assert base == 1.0
    assert g[0] == pytest.approx(2.01, abs=1e-9)


def test_cge_constant_and_affine():
    g, _ = cge_gradient(lambda t: 7.0, np.ones(3), 0.1)
    np.testing.assert_array_equal(g, 0)
    for mu in (1e-3, 0.5, 4.0):
        g, _ = cge_gradient(lambda t: 3.0 * t[0], np.array([1.7]), mu)
        assert g[0] == pytest.approx(3.0, abs=1e-12)
    with pytest.raises(TeleportError):
        cge_gradient(lambda t: 0.0, np.ones(1), 0.0)


def test_cge_parallel_map_matches_serial():
    fn = lambda t: float(np.sum(np.arange(1, 6) * t**2))
    tau = np.linspace(0.5, 2.0, 5)
    with ThreadPoolExecutor(4) as pool:
        par, _ = cge_gradient(fn, tau, 1e-3, pool.map)
    ser, _ = cge_gradient(fn, tau, 1e-3)
    np.testing.assert_array_equal(par, ser)


def test_zero_activations_keep_unit_tau():
    fm = FloatModel([Linear(np.zeros((3, 2)), np.zeros(3)), Activation("relu"),
                     Linear(np.ones((1, 3)), np.zeros(1))], 2)
    cob = optimize_cob(fm, zoo.gaussian_inputs(10, 2), TeleportConfig(max_iter=20))
    np.testing.assert_array_equal(cob.tau, 1.0)
    assert len(cob.history) == 1


def test_single_neuron_span_never_grows():
    a, b = 1.0, 5.0
    fm = FloatModel([Linear(np.array([[1.0]]), np.zeros(1)), Activation("relu"),
                     Linear(np.array([[1.0]]), np.zeros(1))], 1)
    calib = np.array([[a], [b]])
    cob = optimize_cob(fm, calib, TeleportConfig(max_iter=30))
    obj = Objective(fm, cob, calib)
    assert obj(cob.tau) <= b - a
    assert obj(cob.tau) < b - a  # scaling the lone neuron up shrinks its span


def test_objective_never_worse_than_start():
    for seed in range(10):
        fm = zoo.outlier_mlp([4, 6, 6, 2], seed=seed)
        calib = zoo.gaussian_inputs(30, 4, seed=seed)
        cob = optimize_cob(fm, calib, TeleportConfig(max_iter=15))
        obj = Objective(fm, cob, calib)
        assert obj(cob.tau) <= obj(np.ones(cob.n_groups))
        assert np.all(cob.tau >= 1e-4)


def test_teleport_apply_keeps_zeros_and_json_roundtrip(tmp_path):
    fm = zoo.mlp([4, 6, 2], seed=3)
    q = apply_plan(quantize(fm, 12), magnitude_prune(fm, 0.5))
    cob = optimize_cob(q, zoo.gaussian_inputs(20, 4), TeleportConfig(max_iter=10))
    moved = teleport_apply(q, cob)
    for a, b in zip(q.layers, moved.layers):
        if isinstance(a, Linear):
            assert np.all(b.weight[a.weight == 0] == 0)
    cob.save(tmp_path / "cob.json")
    back = CoBAssignment.load(tmp_path / "cob.json")
    np.testing.assert_array_equal(back.tau, cob.tau)
    for x, y in zip(back.out_groups, cob.out_groups):
        np.testing.assert_array_equal(x, y)


def test_tau_floor_enforced():
    fm = zoo.mlp([2, 3, 1])
    with pytest.raises(TeleportError):
        teleport_float(fm, assign_cob_groups(fm).with_tau([1.0, 0.0, 1.0]))
    with pytest.raises(TeleportError):
        TeleportConfig(lr=0)
