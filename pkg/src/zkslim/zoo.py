"""Seeded toy models and datasets for demos and tests."""

from __future__ import annotations

import numpy as np

from scipy.special import log_softmax, softmax
from scipy.stats import norm

from .model import Activation, FloatModel, Linear, ResidualAdd, forward, gelu


def _he(rng, d_out, d_in):
    return rng.normal(0.0, np.sqrt(2.0 / d_in), size=(d_out, d_in))


def mlp(widths, seed: int = 0, activation: str = "relu", bias_scale: float = 0.1) -> FloatModel:
    """Plain MLP with He-initialised weights; no activation after the last layer."""
    rng = np.random.default_rng(seed)
    layers = []
    for i, (d_in, d_out) in enumerate(zip(widths[:-1], widths[1:])):
        layers.append(Linear(_he(rng, d_out, d_in), rng.normal(0.0, bias_scale, size=d_out)))
        if i < len(widths) - 2:
            layers.append(Activation(activation))
    return FloatModel(layers, widths[0])


def outlier_mlp(widths, seed: int = 0, activation: str = "relu", factor: float = 8.0,
                fraction: float = 0.25) -> FloatModel:
    """An MLP where a few hidden neurons have inflated incoming weights.

    The function stays a plain MLP; the outlier neurons just dominate the
    activation range, which is what teleportation can rebalance.
    """
    model = mlp(widths, seed, activation)
    rng = np.random.default_rng(seed + 10_000)
    linears = [l for l in model.layers if isinstance(l, Linear)]
    for layer, nxt in zip(linears[:-1], linears[1:]):
        n_out = max(1, int(round(fraction * layer.out_dim)))
        picks = rng.choice(layer.out_dim, size=n_out, replace=False)
        layer.weight[picks] *= factor
        layer.bias[picks] *= factor
        nxt.weight[:, picks] /= factor
    return model


def residual_mlp(width: int = 6, depth: int = 2, d_in: int = 4, d_out: int = 3, seed: int = 0) -> FloatModel:
    rng = np.random.default_rng(seed)
    layers = [Linear(_he(rng, width, d_in), rng.normal(0, 0.1, width)), Activation("relu")]
    for _ in range(depth):
        start = len(layers) - 1
        layers += [Linear(_he(rng, width, width) * 0.5, rng.normal(0, 0.1, width)), Activation("relu"),
                   ResidualAdd(start)]
    layers.append(Linear(_he(rng, d_out, width), rng.normal(0, 0.1, d_out)))
    return FloatModel(layers, d_in)


def gaussian_inputs(n: int, dim: int, seed: int = 0, scale: float = 1.0) -> np.ndarray:
    return np.random.default_rng(seed).normal(0.0, scale, size=(n, dim))


def blobs(n: int = 600, dim: int = 8, classes: int = 3, seed: int = 0, spread: float = 1.0):
    """Well separated Gaussian clusters: returns ``(X, labels)``."""
    rng = np.random.default_rng(seed)
    centers = rng.normal(0.0, 3.0, size=(classes, dim))
    labels = rng.integers(0, classes, size=n)
    X = centers[labels] + rng.normal(0.0, spread, size=(n, dim))
    return X, labels


def train_classifier(X, labels, hidden=(16, 16), seed: int = 0, max_iter: int = 400) -> FloatModel:
    """Fit a ReLU MLP with scikit-learn and convert it to a :class:`FloatModel`."""
    from sklearn.neural_network import MLPClassifier

    clf = MLPClassifier(hidden_layer_sizes=hidden, activation="relu", random_state=seed,
                        max_iter=max_iter, alpha=1e-4)
    clf.fit(X, labels)
    layers = []
    n = len(clf.coefs_)
    for i, (W, b) in enumerate(zip(clf.coefs_, clf.intercepts_)):
        layers.append(Linear(np.asarray(W, dtype=np.float64).T.copy(), np.asarray(b, dtype=np.float64).copy()))
        if i < n - 1:
            layers.append(Activation("relu"))
    model = FloatModel(layers, X.shape[1])
    if model.output_dim == 1:
        # binary problems: expand the single logit into two scores
        last = model.layers[-1]
        model.layers[-1] = Linear(np.vstack([-last.weight, last.weight]), np.concatenate([-last.bias, last.bias]))
    return model


def train_gelu_classifier(X, labels, hidden=(16, 16), seed: int = 0, epochs: int = 300,
                          lr: float = 0.01, batch: int = 64) -> FloatModel:
    """Minibatch Adam on softmax cross-entropy for a GELU MLP (scikit-learn has no GELU)."""
    X = np.asarray(X, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    classes = int(labels.max()) + 1
    model = mlp([X.shape[1], *hidden, classes], seed=seed, activation="gelu", bias_scale=0.0)
    params = [l for l in model.layers if isinstance(l, Linear)]
    slots = [[np.zeros_like(a) for a in (l.weight, l.bias)] for l in params]
    moments = [[np.zeros_like(a) for a in (l.weight, l.bias)] for l in params]
    rng = np.random.default_rng(seed)
    onehot = np.eye(classes)[labels]
    b1, b2, step = 0.9, 0.999, 0
    for _ in range(epochs):
        order = rng.permutation(len(X))
        for lo in range(0, len(X), batch):
            idx = order[lo:lo + batch]
            h, zs, hs = X[idx], [], []
            for li, layer in enumerate(params):
                hs.append(h)
                z = h @ layer.weight.T + layer.bias
                zs.append(z)
                h = gelu(z) if li < len(params) - 1 else z
            grad = (softmax(h, axis=1) - onehot[idx]) / len(idx)
            step += 1
            for li in range(len(params) - 1, -1, -1):
                layer = params[li]
                gw, gb = grad.T @ hs[li], grad.sum(axis=0)
                if li:
                    z = zs[li - 1]
                    grad = (grad @ layer.weight) * (norm.cdf(z) + z * norm.pdf(z))
                for k, (arr, g) in enumerate(((layer.weight, gw), (layer.bias, gb))):
                    slots[li][k] = b1 * slots[li][k] + (1 - b1) * g
                    moments[li][k] = b2 * moments[li][k] + (1 - b2) * g * g
                    m_hat = slots[li][k] / (1 - b1 ** step)
                    v_hat = moments[li][k] / (1 - b2 ** step)
                    arr -= lr * m_hat / (np.sqrt(v_hat) + 1e-8)
    return model


def cross_entropy(model: FloatModel, X, labels) -> float:
    return float(-np.mean(log_softmax(forward(model, X), axis=1)[np.arange(len(X)), labels]))
