"""Unstructured sparsity plans: magnitude, distortion-DP allocation, and second-order pruning.

A plan holds one keep-mask per Linear layer (1 = keep). Budgets count the
prunable entries of each layer: every weight of a dense Linear, and the
im2col window positions of a lowered convolution.
"""

from __future__ import annotations

import itertools
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np

from . import tensorio
from .model import (
    Activation,
    FloatModel,
    Linear,
    QuantizedModel,
    act_float,
    copy_model,
    dequantize,
    forward,
    round_half_away,
)

log = logging.getLogger(__name__)


class PlanError(ValueError):
    pass


class InfeasibleBudget(PlanError):
    pass


class SingularCurvature(PlanError):
    pass


@dataclass
class SparsityPlan:
    masks: list[np.ndarray]
    ratio: float
    method: str = "magnitude"
    deltas: list[np.ndarray] | None = None
    layer_ratios: list[float] = field(default_factory=list)
    grid_choice: list[float] | None = None

    def kept(self, model) -> int:
        return sum(int(m[_prunable(model, i)].sum()) for i, m in enumerate(self.masks))

    def to_json(self) -> dict:
        return {
            "ratio": self.ratio,
            "method": self.method,
            "layer_ratios": [round(float(r), 12) for r in self.layer_ratios],
            "grid_choice": self.grid_choice,
            "masks": [f"mask{i}" for i in range(len(self.masks))],
            "deltas": None if self.deltas is None else [f"delta{i}" for i in range(len(self.deltas))],
        }

    def save(self, directory) -> None:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        for i, m in enumerate(self.masks):
            tensorio.save(directory / f"mask{i}.tstn", m.astype(np.float64))
        for i, d in enumerate(self.deltas or []):
            tensorio.save(directory / f"delta{i}.tstn", d)
        (directory / "plan.json").write_text(json.dumps(self.to_json(), indent=1, sort_keys=True))

    @classmethod
    def load(cls, directory) -> "SparsityPlan":
        directory = Path(directory)
        meta = json.loads((directory / "plan.json").read_text())
        masks = [tensorio.load(directory / f"{n}.tstn") != 0 for n in meta["masks"]]
        deltas = None
        if meta.get("deltas"):
            deltas = [tensorio.load(directory / f"{n}.tstn") for n in meta["deltas"]]
        return cls(masks, meta["ratio"], meta["method"], deltas, meta["layer_ratios"], meta.get("grid_choice"))


def _linears(model) -> list[Linear]:
    return [l for l in model.layers if isinstance(l, Linear)]


def _prunable(model, i: int) -> np.ndarray:
    return _linears(model)[i].prunable()


def _check_ratio(R: float) -> None:
    if not 0.0 <= R < 1.0:
        raise PlanError(f"sparsity ratio {R} outside [0, 1)")


def _layer_ratios(model, masks) -> list[float]:
    out = []
    for lin, m in zip(_linears(model), masks):
        sup = lin.prunable()
        total = int(sup.sum())
        out.append(0.0 if total == 0 else 1.0 - m[sup].sum() / total)
    return out


def prune_count(r: float, n: int) -> int:
    return int(np.floor(r * n + 1e-9))


# ---------------------------------------------------------------------------
# magnitude


def _magnitude_order(weights: np.ndarray, support: np.ndarray) -> np.ndarray:
    """Flat indices of prunable entries, smallest |w| first, ties by flat index."""
    flat = np.flatnonzero(support.ravel())
    mags = np.abs(weights.ravel()[flat])
    return flat[np.lexsort((flat, mags))]


def layer_magnitude_mask(weights: np.ndarray, support: np.ndarray, count: int) -> np.ndarray:
    mask = np.ones(weights.shape, dtype=bool)
    order = _magnitude_order(weights, support)
    mask.ravel()[order[:count]] = False
    return mask


def magnitude_prune(model, R: float) -> SparsityPlan:
    """Globally mask the ``floor(R*N)`` smallest-magnitude weights.

    Ties are broken by (layer index, flat index) ascending.
    """
    _check_ratio(R)
    lins = _linears(model)
    mags, layer_ids, flat_ids = [], [], []
    for li, lin in enumerate(lins):
        flat = np.flatnonzero(lin.prunable().ravel())
        mags.append(np.abs(np.asarray(lin.weight, dtype=np.float64).ravel()[flat]))
        layer_ids.append(np.full(flat.size, li))
        flat_ids.append(flat)
    mags = np.concatenate(mags)
    layer_ids = np.concatenate(layer_ids)
    flat_ids = np.concatenate(flat_ids)
    n_prune = prune_count(R, mags.size)
    order = np.lexsort((flat_ids, layer_ids, mags))[:n_prune]
    masks = [np.ones(lin.weight.shape, dtype=bool) for lin in lins]
    for li, fi in zip(layer_ids[order], flat_ids[order]):
        masks[li].ravel()[fi] = False
    return SparsityPlan(masks, R, "magnitude", None, _layer_ratios(model, masks))


# ---------------------------------------------------------------------------
# distortion curves + DP allocation


@dataclass
class DistortionCurve:
    ratios: list[float]
    distortion: list[float]
    size: int

    def __post_init__(self):
        if any(d < 0 for d in self.distortion):
            raise PlanError("distortion must be non-negative")


def layer_inputs(model: FloatModel, X) -> list[np.ndarray]:
    """Float inputs reaching each Linear on the unpruned model (frozen upstream)."""
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    inputs = []
    x = X
    outs = []
    for layer in model.layers:
        if isinstance(layer, Linear):
            inputs.append(x)
            x = x @ layer.weight.T + layer.bias
        elif isinstance(layer, Activation):
            x = act_float(layer.kind, x)
        else:
            x = x + (X if layer.source < 0 else outs[layer.source])
        outs.append(x)
    return inputs


def distortion_curves(model, calib, grid: Sequence[float] | Mapping[int, Sequence[float]],
                      map_fn: Callable = map) -> list[DistortionCurve]:
    """Layer-local output distortion ``mean ||W x - W~ x||^2`` per candidate ratio.

    ``map_fn`` may be a parallel map; each (layer, ratio) task is independent.
    """
    fmodel = dequantize(model) if isinstance(model, QuantizedModel) else model
    inputs = layer_inputs(fmodel, calib)
    lins = _linears(fmodel)
    tasks = []
    for li, lin in enumerate(lins):
        g = grid[li] if isinstance(grid, Mapping) else grid
        for r in g:
            tasks.append((li, float(r)))

    def work(task):
        li, r = task
        lin = lins[li]
        sup = lin.prunable()
        mask = layer_magnitude_mask(lin.weight, sup, prune_count(r, int(sup.sum())))
        diff = inputs[li] @ (lin.weight * ~mask).T
        return float(np.mean(np.sum(diff**2, axis=1)))

    values = list(map_fn(work, tasks))
    curves = []
    pos = 0
    for li, lin in enumerate(lins):
        g = list(grid[li] if isinstance(grid, Mapping) else grid)
        curves.append(DistortionCurve([float(r) for r in g], values[pos:pos + len(g)],
                                      int(lin.prunable().sum())))
        pos += len(g)
    return curves


def allocate(curves: Sequence[DistortionCurve], R: float) -> tuple[list[float], float]:
    """Pick one grid ratio per layer minimising summed distortion, pruning >= floor(R*N).

    Dynamic programme over the number of pruned weights (per-weight budget axis).
    Among optimal allocations the one pruning the fewest weights wins.
    """
    _check_ratio(R)
    total = sum(c.size for c in curves)
    target = prune_count(R, total)
    # state: pruned count -> (distortion, choice indices)
    states: dict[int, tuple[float, tuple[int, ...]]] = {0: (0.0, ())}
    for c in curves:
        nxt: dict[int, tuple[float, tuple[int, ...]]] = {}
        for pruned, (dist, choice) in states.items():
            for gi, (r, d) in enumerate(zip(c.ratios, c.distortion)):
                key = pruned + prune_count(r, c.size)
                cand = (dist + d, choice + (gi,))
                best = nxt.get(key)
                if best is None or cand < best:
                    nxt[key] = cand
        states = nxt
    feasible = [(dist, pruned, choice) for pruned, (dist, choice) in states.items() if pruned >= target]
    if not feasible:
        raise InfeasibleBudget(f"grid cannot prune {target} of {total} weights")
    dist, _, choice = min(feasible)
    return [curves[li].ratios[gi] for li, gi in enumerate(choice)], dist


def allocate_exhaustive(curves: Sequence[DistortionCurve], R: float) -> tuple[list[float], float]:
    """Brute-force reference for :func:`allocate`."""
    total = sum(c.size for c in curves)
    target = prune_count(R, total)
    best = None
    for combo in itertools.product(*[range(len(c.ratios)) for c in curves]):
        pruned = sum(prune_count(c.ratios[g], c.size) for c, g in zip(curves, combo))
        if pruned < target:
            continue
        dist = 0.0
        for c, g in zip(curves, combo):
            dist += c.distortion[g]
        cand = (dist, pruned, combo)
        if best is None or cand < best:
            best = cand
    if best is None:
        raise InfeasibleBudget("no feasible allocation")
    return [c.ratios[g] for c, g in zip(curves, best[2])], best[0]


def rd_allocate(model, calib, grid: Sequence[float], R: float, map_fn: Callable = map) -> SparsityPlan:
    """Per-layer ratios from distortion curves, realised by per-layer magnitude order.

    The DP may overshoot the budget by grid granularity; the excess is handed
    back one weight at a time (round-robin from the most-pruned layer), so the
    achieved global ratio is exactly ``floor(R*N)/N``.
    """
    _check_ratio(R)
    grid = sorted(set(float(g) for g in grid))
    if 0.0 not in grid or any(g > 1 for g in grid):
        raise PlanError("grid must contain 0 and values <= 1")
    if len(np.atleast_2d(calib)) == 0:
        raise PlanError("empty calibration set")
    curves = distortion_curves(model, calib, grid, map_fn)
    choice, _ = allocate(curves, R)
    counts = [prune_count(r, c.size) for r, c in zip(choice, curves)]
    excess = sum(counts) - prune_count(R, sum(c.size for c in curves))
    while excess > 0:
        li = max(range(len(counts)), key=lambda i: (counts[i] / max(curves[i].size, 1), -i))
        counts[li] -= 1
        excess -= 1
    lins = _linears(model)
    masks = [layer_magnitude_mask(l.weight, l.prunable(), n) for l, n in zip(lins, counts)]
    return SparsityPlan(masks, R, "rd", None, _layer_ratios(model, masks), list(choice))


# ---------------------------------------------------------------------------
# second-order (correlation-aware) pruning


def cap_scores(w: np.ndarray, hinv_diag: np.ndarray) -> np.ndarray:
    """Importance ``w_i^2 / (2 [H^-1]_ii)``."""
    return np.asarray(w, dtype=np.float64) ** 2 / (2.0 * np.asarray(hinv_diag, dtype=np.float64))


def obs_update(w: np.ndarray, hinv: np.ndarray, i: int) -> np.ndarray:
    """Compensation ``dw = -(w_i / [H^-1]_ii) H^-1 e_i`` for removing weight ``i``."""
    return -(w[i] / hinv[i, i]) * hinv[:, i]


def _downdate(hinv: np.ndarray, i: int) -> np.ndarray:
    col = hinv[:, i].copy()
    out = hinv - np.outer(col, col) / col[i]
    out[i, :] = 0.0
    out[:, i] = 0.0
    return out


def layer_curvature(inputs: np.ndarray, kind: str = "diagonal", damping: float = 1e-4) -> np.ndarray:
    """Gauss-Newton curvature of the layer-local squared error, shared by every row.

    ``full`` keeps the input-correlation block, ``diagonal`` keeps only its diagonal.
    Damping adds ``damping * mean(diag)`` to the diagonal.
    """
    X = np.asarray(inputs, dtype=np.float64)
    H = 2.0 * X.T @ X / max(len(X), 1)
    if kind == "diagonal":
        H = np.diag(np.diag(H))
    elif kind != "full":
        raise PlanError(f"unknown curvature kind {kind!r}")
    lam = damping * float(np.mean(np.diag(H))) if H.size else 0.0
    return H + lam * np.eye(len(H))


def cap_layer(weight: np.ndarray, support: np.ndarray, hinv: np.ndarray, count: int,
              batch_frac: float = 0.01) -> tuple[np.ndarray, np.ndarray]:
    """Iteratively prune ``count`` entries of one layer; returns (keep mask, delta).

    Each row is a block sharing the same initial inverse curvature. Batches of
    ``batch_frac`` of the layer's prunable weights are removed between score
    refreshes; inside a batch removals are applied one by one with exact
    compensation and inverse downdates.
    """
    W = np.asarray(weight, dtype=np.float64).copy()
    W0 = W.copy()
    alive = support.copy()
    rows_hinv = []
    for r in range(W.shape[0]):
        h = hinv.copy()
        # structural zeros (e.g. outside a conv patch) must not receive compensation
        for c in np.flatnonzero(~support[r]):
            if h[c, c] > 0:
                h = _downdate(h, c)
        rows_hinv.append(h)
    batch = max(1, int(np.ceil(batch_frac * support.sum())))
    removed = 0
    while removed < count:
        diag = np.array([np.diag(h) for h in rows_hinv])
        with np.errstate(divide="ignore", invalid="ignore"):
            scores = np.where(alive, cap_scores(W, diag), np.inf)
        flat = np.flatnonzero(alive.ravel())
        s = scores.ravel()[flat]
        take = flat[np.lexsort((flat, s))][: min(batch, count - removed)]
        for f in take:
            r, c = divmod(int(f), W.shape[1])
            h = rows_hinv[r]
            if not h[c, c] > 0:
                raise SingularCurvature(f"non-positive [H^-1]_ii at row {r}, col {c}")
            W[r] += obs_update(W[r], h, c)
            W[r, c] = 0.0
            rows_hinv[r] = _downdate(h, c)
            alive[r, c] = False
        removed += len(take)
    mask = ~(support & ~alive)
    delta = np.where(mask, W - W0, 0.0)
    return mask, delta


def cap_prune(model, calib, R: float, curvature: str = "diagonal", damping: float = 1e-4,
              batch_frac: float = 0.01, hessians: Sequence[np.ndarray] | None = None) -> SparsityPlan:
    """Second-order pruning at ratio ``R`` in every layer.

    The default damped diagonal curvature ranks by ``w^2 H_ii`` and removes
    without compensation; ``curvature="full"`` also adjusts the survivors.

    ``hessians`` overrides the estimated per-layer curvature (one ``d_in x d_in``
    matrix per Linear).
    """
    _check_ratio(R)
    fmodel = dequantize(model) if isinstance(model, QuantizedModel) else model
    lins = _linears(fmodel)
    if hessians is None:
        inputs = layer_inputs(fmodel, calib)
        hessians = [layer_curvature(x, curvature, damping) for x in inputs]
    masks, deltas = [], []
    for lin, H in zip(lins, hessians):
        try:
            hinv = np.linalg.inv(H)
        except np.linalg.LinAlgError as exc:
            raise SingularCurvature(str(exc)) from exc
        if not np.all(np.isfinite(hinv)) or np.any(np.diag(hinv) <= 0):
            raise SingularCurvature("curvature not positive definite after damping")
        sup = lin.prunable()
        mask, delta = cap_layer(lin.weight, sup, hinv, prune_count(R, int(sup.sum())), batch_frac)
        masks.append(mask)
        deltas.append(delta)
    return SparsityPlan(masks, R, "cap", deltas, _layer_ratios(model, masks))


# ---------------------------------------------------------------------------


def apply_plan(model: QuantizedModel, plan: SparsityPlan) -> QuantizedModel:
    """Zero masked weights; add any compensation to survivors and re-quantize them."""
    out = copy_model(model)
    lins = _linears(out)
    if len(plan.masks) != len(lins):
        raise PlanError(f"plan has {len(plan.masks)} masks for {len(lins)} layers")
    s = out.scale
    for i, (lin, mask) in enumerate(zip(lins, plan.masks)):
        if mask.shape != lin.weight.shape:
            raise PlanError(f"mask {i} shape {mask.shape} != weight {lin.weight.shape}")
        w = lin.weight
        if plan.deltas is not None:
            w = round_half_away(w + plan.deltas[i] * 2.0**s).astype(np.int64)
        lin.weight = np.where(mask, w, 0).astype(np.int64)
    out.sparse = True
    return out


def output_distortion(model_a: FloatModel, model_b: FloatModel, X) -> float:
    return float(np.mean(np.sum((forward(model_a, X) - forward(model_b, X)) ** 2, axis=1)))
