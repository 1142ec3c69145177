import numpy as np

from zkslim import zoo
from zkslim.model import Linear, forward


def test_outlier_mlp_preserves_relu_function():
    X = zoo.gaussian_inputs(20, 5, seed=1)
    plain = zoo.mlp([5, 8, 8, 2], seed=4)
    inflated = zoo.outlier_mlp([5, 8, 8, 2], seed=4)
    np.testing.assert_allclose(forward(plain, X), forward(inflated, X), rtol=1e-12, atol=1e-12)
    assert np.abs(inflated.layers[0].weight).max() > np.abs(plain.layers[0].weight).max()


def test_blobs_are_seeded():
    a, la = zoo.blobs(50, 3, 2, seed=9)
    b, lb = zoo.blobs(50, 3, 2, seed=9)
    np.testing.assert_array_equal(a, b)
    np.testing.assert_array_equal(la, lb)


def test_gelu_trainer_gradient_and_fit():
    X, y = zoo.blobs(200, 4, 3, seed=2, spread=1.5)
    init = zoo.mlp([4, 6, 3], seed=0, activation="gelu", bias_scale=0.0)
    # one full-batch Adam step moves every weight against the numerical gradient sign
    one = zoo.train_gelu_classifier(X, y, hidden=(6,), seed=0, epochs=1, lr=1e-4, batch=len(X))
    lin = [l for l in init.layers if isinstance(l, Linear)]
    h = 1e-6
    for li, layer in enumerate(lin):
        for idx in [(0, 0), (1, 2), (2, 1)]:
            layer.weight[idx] += h
            up = zoo.cross_entropy(init, X, y)
            layer.weight[idx] -= 2 * h
            down = zoo.cross_entropy(init, X, y)
            layer.weight[idx] += h
            g = (up - down) / (2 * h)
            step = [l for l in one.layers if isinstance(l, Linear)][li].weight[idx] - layer.weight[idx]
            if abs(g) > 1e-6:
                assert np.sign(step) == -np.sign(g)
    model = zoo.train_gelu_classifier(X, y, hidden=(8,), seed=0, epochs=60)
    assert zoo.cross_entropy(model, X, y) < zoo.cross_entropy(init, X, y) / 4
    assert np.mean(forward(model, X).argmax(1) == y) > 0.9
