"""Change-of-basis (CoB) teleportation to shrink activation input ranges.

Every hidden neuron ``j`` gets a positive scalar ``tau_j``. Teleporting divides
the neuron's incoming weights and bias by ``tau_j`` and multiplies its outgoing
weights by ``tau_j``::

    W'[j, k] = W[j, k] * tau_in[k] / tau_out[j],     b'[j] = b[j] / tau_out[j]

so the teleported pre-activation is ``z_j / tau_j``. For positively
scale-invariant activations (ReLU) the network function is unchanged; for
GELU it changes slightly, which the reconstruction term of the objective
penalises.

Grouping rules: model inputs and outputs are pinned to ``tau = 1``; both
operands of a residual add share groups elementwise; every output position of
a lowered convolution channel shares its channel's group.
"""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .model import (
    Activation,
    FloatModel,
    Linear,
    ModelError,
    QuantizedModel,
    ResidualAdd,
    copy_model,
    dequantize,
    forward,
    quantize,
)

log = logging.getLogger(__name__)

FIXED = -1


class TeleportError(ValueError):
    pass


@dataclass
class TeleportConfig:
    lr: float = 0.05
    mu: float = 1e-3
    max_iter: int = 200
    lam: float | None = None  # None: 0 for ReLU-only nets, 1 otherwise
    eps: float = 1e-4
    delta: float = 1e-6

    def __post_init__(self):
        if self.lr <= 0 or self.mu <= 0 or self.eps <= 0:
            raise TeleportError("lr, mu and eps must be positive")
        if self.lam is not None and self.lam < 0:
            raise TeleportError("lam must be non-negative")


@dataclass
class CoBAssignment:
    """Groups of output neurons per Linear (``-1`` = pinned) and one tau per free group."""

    out_groups: list[np.ndarray]
    in_groups: list[np.ndarray]
    tau: np.ndarray
    eps: float = 1e-4
    history: list[dict] = field(default_factory=list, repr=False)

    @property
    def n_groups(self) -> int:
        return len(self.tau)

    def with_tau(self, tau) -> "CoBAssignment":
        return CoBAssignment(self.out_groups, self.in_groups, np.asarray(tau, dtype=np.float64), self.eps)

    def _expand(self, groups: np.ndarray) -> np.ndarray:
        full = np.ones(len(groups))
        free = groups != FIXED
        full[free] = self.tau[groups[free]]
        return full

    def layer_tau(self, li: int) -> tuple[np.ndarray, np.ndarray]:
        """(tau of the inputs, tau of the outputs) of the ``li``-th Linear."""
        return self._expand(self.in_groups[li]), self._expand(self.out_groups[li])

    def validate(self) -> None:
        if self.tau.size and not np.all(self.tau >= self.eps):
            raise TeleportError(f"tau below floor {self.eps}: min {self.tau.min()}")

    def to_json(self) -> dict:
        return {
            "tau": {str(g): float(t) for g, t in enumerate(self.tau)},
            "out_groups": [g.tolist() for g in self.out_groups],
            "in_groups": [g.tolist() for g in self.in_groups],
            "eps": self.eps,
        }

    @classmethod
    def from_json(cls, data: dict) -> "CoBAssignment":
        tau = np.array([data["tau"][str(g)] for g in range(len(data["tau"]))], dtype=np.float64)
        return cls([np.array(g, dtype=np.int64) for g in data["out_groups"]],
                   [np.array(g, dtype=np.int64) for g in data["in_groups"]], tau, data.get("eps", 1e-4))

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), indent=1, sort_keys=True))

    @classmethod
    def load(cls, path) -> "CoBAssignment":
        return cls.from_json(json.loads(Path(path).read_text()))


class _UnionFind:
    def __init__(self):
        self.parent = [0]  # node 0 is the pinned node

    def new(self) -> int:
        self.parent.append(len(self.parent))
        return len(self.parent) - 1

    def find(self, a: int) -> int:
        while self.parent[a] != a:
            self.parent[a] = self.parent[self.parent[a]]
            a = self.parent[a]
        return a

    def union(self, a: int, b: int) -> None:
        ra, rb = self.find(a), self.find(b)
        if ra == rb:
            return
        # the pinned node always stays a root
        if rb == 0:
            ra, rb = rb, ra
        self.parent[rb] = ra


def assign_cob_groups(model) -> CoBAssignment:
    uf = _UnionFind()
    cur = np.zeros(model.input_dim, dtype=np.int64)
    inputs = cur
    vectors = []
    lin_in, lin_out = [], []
    for idx, layer in enumerate(model.layers):
        if isinstance(layer, Linear):
            lin_in.append(cur)
            if layer.conv is not None:
                per_channel = np.array([uf.new() for _ in range(layer.conv.out_channels)])
                cur = per_channel[layer.conv.channel_of_output]
            else:
                cur = np.array([uf.new() for _ in range(layer.out_dim)], dtype=np.int64)
            lin_out.append(cur)
        elif isinstance(layer, ResidualAdd):
            other = inputs if layer.source < 0 else vectors[layer.source]
            if len(other) != len(cur):
                raise TeleportError(f"layer {idx}: residual across widths {len(other)} and {len(cur)}")
            for a, b in zip(cur.tolist(), other.tolist()):
                uf.union(a, b)
        elif not isinstance(layer, Activation):
            raise ModelError(f"layer {idx}: unsupported layer")
        vectors.append(cur)
    for node in cur.tolist():
        uf.union(0, node)

    ids: dict[int, int] = {}

    def canon(arr: np.ndarray) -> np.ndarray:
        out = np.empty(len(arr), dtype=np.int64)
        for i, node in enumerate(arr.tolist()):
            root = uf.find(node)
            if root == 0:
                out[i] = FIXED
            else:
                out[i] = ids.setdefault(root, len(ids))
        return out

    out_groups = [canon(g) for g in lin_out]
    in_groups = [canon(g) for g in lin_in]
    return CoBAssignment(out_groups, in_groups, np.ones(len(ids)))


def teleport_float(model: FloatModel, cob: CoBAssignment) -> FloatModel:
    cob.validate()
    out = copy_model(model)
    li = 0
    for layer in out.layers:
        if isinstance(layer, Linear):
            t_in, t_out = cob.layer_tau(li)
            layer.weight = layer.weight * t_in[None, :] / t_out[:, None]
            layer.bias = layer.bias / t_out
            li += 1
    return out


def teleport_apply(model: QuantizedModel, cob: CoBAssignment) -> QuantizedModel:
    """Teleport in float, then re-quantize at the model's scale. Zeros stay zero."""
    fmodel = teleport_float(dequantize(model), cob)
    q = quantize(fmodel, model.scale)
    for new, old in zip(q.layers, model.layers):
        if isinstance(old, Linear):
            new.weight[old.weight == 0] = 0
    q.sparse = model.sparse
    return q


def range_term(sites: Sequence[np.ndarray], taus: Sequence[np.ndarray] | None = None) -> float:
    """``sum_i (max_j z_ij / tau_ij - min_j z_ij / tau_ij)`` with max/min over the whole batch."""
    total = 0.0
    for i, z in enumerate(sites):
        z = np.asarray(z, dtype=np.float64)
        if taus is not None:
            z = z / np.asarray(taus[i], dtype=np.float64)
        if z.size:
            total += float(z.max() - z.min())
    return total


class Objective:
    """Callable ``tau -> loss`` over free groups; keeps the untouched model's outputs cached."""

    def __init__(self, model, cob: CoBAssignment, calib, lam: float = 0.0):
        self.base = dequantize(model) if isinstance(model, QuantizedModel) else model
        self.cob = cob
        self.calib = np.atleast_2d(np.asarray(calib, dtype=np.float64))
        if len(self.calib) == 0:
            raise TeleportError("empty calibration set")
        self.lam = lam
        self.reference = forward(self.base, self.calib)

    def terms(self, tau) -> tuple[float, float, float]:
        moved = teleport_float(self.base, self.cob.with_tau(tau))
        y, pre = forward(moved, self.calib, record=True)
        rng = range_term(pre)
        rec = 0.0
        if self.lam:
            rec = float(np.mean(np.sum((self.reference - y) ** 2, axis=1)))
        return rng + self.lam * rec, rng, rec

    def __call__(self, tau) -> float:
        return self.terms(tau)[0]


def default_lambda(model) -> float:
    kinds = {l.kind for l in model.layers if isinstance(l, Activation)}
    return 0.0 if kinds <= {"relu"} else 1.0


def objective(model, cob: CoBAssignment, calib, lam: float = 0.0) -> float:
    return Objective(model, cob, calib, lam)(cob.tau)


def cge_gradient(fn: Callable[[np.ndarray], float], tau, mu: float,
                 map_fn: Callable = map, base: float | None = None) -> tuple[np.ndarray, float]:
    """Forward-difference coordinate gradient estimate. Returns ``(g, fn(tau))``.

    Coordinate evaluations are independent; pass a parallel ``map_fn`` to fan out.
    """
    if mu <= 0:
        raise TeleportError("mu must be positive")
    tau = np.asarray(tau, dtype=np.float64)
    if base is None:
        base = fn(tau)

    def probe(j):
        t = tau.copy()
        t[j] += mu
        return fn(t)

    shifted = np.fromiter(map_fn(probe, range(tau.size)), dtype=np.float64, count=tau.size)
    return (shifted - base) / mu, float(base)


def optimize_cob(model, calib, config: TeleportConfig | None = None,
                 map_fn: Callable = map, cob: CoBAssignment | None = None) -> CoBAssignment:
    """Projected zero-order descent on the free CoB scalars.

    Returns the best visited iterate, so the loss never exceeds the loss at
    ``tau = 1``. ``history`` records one row per iteration.
    """
    config = config or TeleportConfig()
    cob = cob or assign_cob_groups(model)
    lam = default_lambda(model) if config.lam is None else config.lam
    fn = Objective(model, cob, calib, lam)
    tau = np.ones(cob.n_groups)
    history = []
    best_loss, best_tau = None, tau.copy()
    for it in range(config.max_iter + 1):
        loss, rng, rec = fn.terms(tau)
        if not np.isfinite(loss):
            raise TeleportError(f"non-finite objective at iteration {it}")
        history.append({"iteration": it, "loss": loss, "range": rng, "reconstruction": rec})
        if best_loss is None or loss < best_loss:
            best_loss, best_tau = loss, tau.copy()
        if it == config.max_iter or cob.n_groups == 0:
            break
        g, _ = cge_gradient(fn, tau, config.mu, map_fn, base=loss)
        if not np.all(np.isfinite(g)):
            raise TeleportError(f"non-finite gradient at iteration {it}")
        if np.linalg.norm(g) < config.delta:
            break
        tau = np.maximum(tau - config.lr * g, config.eps)
    result = CoBAssignment(cob.out_groups, cob.in_groups, best_tau, config.eps, history)
    log.info("teleport: loss %.6g -> %.6g over %d iterations", history[0]["loss"], best_loss, len(history))
    return result


def write_history(history: list[dict], path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["iteration", "loss", "range", "reconstruction"])
        for row in history:
            writer.writerow([row["iteration"], repr(float(row["loss"])),
                             repr(float(row["range"])), repr(float(row["reconstruction"]))])
