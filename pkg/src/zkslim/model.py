"""Small feed-forward networks in float and fixed-point form.

A model is an ordered list of layers operating on a single running vector:

* :class:`Linear` -- ``y = W x + b``. Conv2D layers are lowered to a Linear at
  load time (im2col) and keep a :class:`ConvInfo` describing the lowering.
* :class:`Activation` -- elementwise ReLU or GELU.
* :class:`ResidualAdd` -- adds the output of an earlier layer (``source``;
  ``-1`` means the model input) to the running vector.

Quantized models hold integer weights at scale ``2**s`` and biases at
``2**(2s)``. A Linear accumulates at ``2**(2s)`` and rescales by floor
division, so every intermediate vector lives at ``2**s``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
from scipy.special import erf

from . import tensorio
from .field import P

DEFAULT_SCALE = 12
MAGNITUDE_BOUND = 2**40
ACTIVATIONS = ("relu", "gelu")


class ModelError(ValueError):
    pass


class ShapeError(ModelError):
    pass


class TopologyError(ModelError):
    pass


class UnsupportedLayer(ModelError):
    pass


class QuantizationOverflow(ModelError):
    pass


class RangeViolation(ModelError):
    """A pre-activation fell outside its site's declared lookup domain."""


@dataclass(frozen=True)
class ConvInfo:
    in_channels: int
    height: int
    width: int
    out_channels: int
    kernel: int
    stride: int
    padding: int
    # rows = output neurons (c, oh, ow); cols = (ci, kh, kw); entries are flat
    # input indices or -1 where the window hits padding
    index_map: np.ndarray = field(repr=False, compare=False)

    @property
    def out_height(self) -> int:
        return (self.height + 2 * self.padding - self.kernel) // self.stride + 1

    @property
    def out_width(self) -> int:
        return (self.width + 2 * self.padding - self.kernel) // self.stride + 1

    @property
    def channel_of_output(self) -> np.ndarray:
        per = self.out_height * self.out_width
        return np.repeat(np.arange(self.out_channels), per)


@dataclass
class Linear:
    weight: np.ndarray
    bias: np.ndarray
    support: np.ndarray | None = None
    conv: ConvInfo | None = None

    @property
    def in_dim(self) -> int:
        return self.weight.shape[1]

    @property
    def out_dim(self) -> int:
        return self.weight.shape[0]

    def prunable(self) -> np.ndarray:
        """Boolean mask of entries that are real parameters (not im2col structural zeros)."""
        if self.support is None:
            return np.ones(self.weight.shape, dtype=bool)
        return self.support


@dataclass
class Activation:
    kind: str
    # quantized models only: declared lookup domain [lo, hi] at scale 2**s
    domain: tuple[int, int] | None = None


@dataclass
class ResidualAdd:
    source: int


Layer = Linear | Activation | ResidualAdd


@dataclass
class FloatModel:
    layers: list
    input_dim: int

    def __post_init__(self):
        validate(self)

    @property
    def output_dim(self) -> int:
        return layer_widths(self)[-1]

    def linear_indices(self) -> list[int]:
        return [i for i, l in enumerate(self.layers) if isinstance(l, Linear)]

    def activation_indices(self) -> list[int]:
        return [i for i, l in enumerate(self.layers) if isinstance(l, Activation)]


@dataclass
class QuantizedModel(FloatModel):
    scale: int = DEFAULT_SCALE
    prime: int = P
    sparse: bool = False

    def nnz(self) -> list[int]:
        return [int(np.count_nonzero(self.layers[i].weight)) for i in self.linear_indices()]


def layer_widths(model) -> list[int]:
    widths = []
    width = model.input_dim
    for layer in model.layers:
        if isinstance(layer, Linear):
            width = layer.out_dim
        widths.append(width)
    return widths


def validate(model) -> None:
    width = model.input_dim
    widths = []
    for idx, layer in enumerate(model.layers):
        if isinstance(layer, Linear):
            if layer.weight.ndim != 2 or layer.in_dim != width:
                raise ShapeError(
                    f"layer {idx}: weight {layer.weight.shape} does not accept width {width}"
                )
            if layer.bias.shape != (layer.out_dim,):
                raise ShapeError(f"layer {idx}: bias shape {layer.bias.shape}")
            if layer.support is not None and layer.support.shape != layer.weight.shape:
                raise ShapeError(f"layer {idx}: support mask shape")
            width = layer.out_dim
        elif isinstance(layer, Activation):
            if layer.kind not in ACTIVATIONS:
                raise UnsupportedLayer(f"layer {idx}: activation {layer.kind!r}")
        elif isinstance(layer, ResidualAdd):
            if not -1 <= layer.source < idx:
                raise TopologyError(
                    f"layer {idx}: residual source {layer.source} does not precede it"
                )
            src_width = model.input_dim if layer.source < 0 else widths[layer.source]
            if src_width != width:
                raise ShapeError(
                    f"layer {idx}: residual width {src_width} != running width {width}"
                )
        else:
            raise UnsupportedLayer(f"layer {idx}: {type(layer).__name__}")
        widths.append(width)
    if not model.layers:
        raise ModelError("model has no layers")


# ---------------------------------------------------------------------------
# loading


def lower_conv2d(weight: np.ndarray, bias: np.ndarray, height: int, width: int,
                 stride: int = 1, padding: int = 0) -> Linear:
    """Lower a Conv2D (cross-correlation) to an equivalent Linear via im2col."""
    c_out, c_in, k, k2 = weight.shape
    if k != k2:
        raise ShapeError("only square kernels are supported")
    oh = (height + 2 * padding - k) // stride + 1
    ow = (width + 2 * padding - k) // stride + 1
    if oh <= 0 or ow <= 0:
        raise ShapeError("kernel larger than padded input")
    n_out = c_out * oh * ow
    cols = np.full((oh * ow, c_in * k * k), -1, dtype=np.int64)
    for y in range(oh):
        for x in range(ow):
            for ci in range(c_in):
                for ky in range(k):
                    for kx in range(k):
                        iy = y * stride + ky - padding
                        ix = x * stride + kx - padding
                        if 0 <= iy < height and 0 <= ix < width:
                            cols[y * ow + x, (ci * k + ky) * k + kx] = (ci * height + iy) * width + ix
    index_map = np.tile(cols, (c_out, 1))
    dense = np.zeros((n_out, c_in * height * width), dtype=weight.dtype)
    support = np.zeros(dense.shape, dtype=bool)
    flat_w = weight.reshape(c_out, -1)
    for row in range(n_out):
        c = row // (oh * ow)
        valid = index_map[row] >= 0
        dense[row, index_map[row][valid]] = flat_w[c][valid]
        support[row, index_map[row][valid]] = True
    info = ConvInfo(c_in, height, width, c_out, k, stride, padding, index_map)
    return Linear(dense, np.repeat(np.asarray(bias, dtype=weight.dtype), oh * ow), support, info)


def load_model(manifest: Mapping, blobs: Mapping[str, np.ndarray]) -> FloatModel | QuantizedModel:
    """Build a validated model from a manifest dict and named tensors."""

    def blob(name, shape):
        if name not in blobs:
            raise ShapeError(f"missing blob {name!r}")
        arr = np.asarray(blobs[name], dtype=np.float64)
        if arr.size != int(np.prod(shape)):
            raise ShapeError(f"blob {name!r} has {arr.size} values, expected shape {tuple(shape)}")
        return arr.reshape(shape)

    quantized = bool(manifest.get("quantized", False))
    width = int(manifest["input_dim"])
    layers = []
    for idx, spec in enumerate(manifest["layers"]):
        kind = spec.get("kind")
        if kind == "linear":
            d_in, d_out = int(spec["in"]), int(spec["out"])
            w = blob(spec["weight"], (d_out, d_in))
            b = blob(spec["bias"], (d_out,)) if spec.get("bias") else np.zeros(d_out)
            support = None
            if spec.get("support"):
                support = blob(spec["support"], (d_out, d_in)) != 0
            layers.append(Linear(w, b, support))
            width = d_out
        elif kind == "conv2d":
            c_in, h, w_ = int(spec["in_channels"]), int(spec["height"]), int(spec["width"])
            c_out, k = int(spec["out_channels"]), int(spec["kernel"])
            if c_in * h * w_ != width:
                raise ShapeError(f"layer {idx}: conv input {c_in}x{h}x{w_} != width {width}")
            wt = blob(spec["weight"], (c_out, c_in, k, k))
            b = blob(spec["bias"], (c_out,)) if spec.get("bias") else np.zeros(c_out)
            lin = lower_conv2d(wt, b, h, w_, int(spec.get("stride", 1)), int(spec.get("padding", 0)))
            layers.append(lin)
            width = lin.out_dim
        elif kind in ACTIVATIONS:
            dom = spec.get("domain")
            layers.append(Activation(kind, tuple(int(v) for v in dom) if dom else None))
        elif kind == "residual":
            layers.append(ResidualAdd(int(spec["source"])))
        else:
            raise UnsupportedLayer(f"layer {idx}: unsupported kind {kind!r}")
    if quantized:
        for layer in layers:
            if isinstance(layer, Linear):
                layer.weight = _as_int(layer.weight)
                layer.bias = _as_int(layer.bias)
        return QuantizedModel(layers, int(manifest["input_dim"]),
                              scale=int(manifest["scale"]), sparse=bool(manifest.get("sparse", False)))
    return FloatModel(layers, int(manifest["input_dim"]))


def _as_int(a: np.ndarray) -> np.ndarray:
    r = np.rint(a)
    if not np.array_equal(r, a):
        raise ShapeError("quantized blob holds non-integer values")
    return r.astype(np.int64)


def dump_model(model) -> tuple[dict, dict[str, np.ndarray]]:
    """Inverse of :func:`load_model`. Conv layers are written in lowered form."""
    manifest: dict = {"format": "zkslim-model/1", "input_dim": model.input_dim, "layers": []}
    blobs: dict[str, np.ndarray] = {}
    if isinstance(model, QuantizedModel):
        manifest.update(quantized=True, scale=model.scale, sparse=model.sparse)
    for idx, layer in enumerate(model.layers):
        if isinstance(layer, Linear):
            entry = {"kind": "linear", "in": layer.in_dim, "out": layer.out_dim,
                     "weight": f"w{idx}", "bias": f"b{idx}"}
            blobs[f"w{idx}"] = np.asarray(layer.weight, dtype=np.float64)
            blobs[f"b{idx}"] = np.asarray(layer.bias, dtype=np.float64)
            if layer.support is not None:
                entry["support"] = f"s{idx}"
                blobs[f"s{idx}"] = layer.support.astype(np.float64)
            manifest["layers"].append(entry)
        elif isinstance(layer, Activation):
            entry = {"kind": layer.kind}
            if layer.domain is not None:
                entry["domain"] = list(layer.domain)
            manifest["layers"].append(entry)
        else:
            manifest["layers"].append({"kind": "residual", "source": layer.source})
    return manifest, blobs


def read_model(path) -> FloatModel | QuantizedModel:
    """Read a manifest JSON; blob names resolve to ``<name>.tstn`` next to it."""
    path = Path(path)
    manifest = json.loads(path.read_text())
    names = set()
    for spec in manifest["layers"]:
        for key in ("weight", "bias", "support"):
            if spec.get(key):
                names.add(spec[key])
    blobs = {n: tensorio.load(path.parent / f"{n}.tstn") for n in sorted(names)}
    return load_model(manifest, blobs)


def write_model(model, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    manifest, blobs = dump_model(model)
    for name, arr in blobs.items():
        tensorio.save(path.parent / f"{name}.tstn", arr)
    path.write_text(json.dumps(manifest, indent=1, sort_keys=True))


# ---------------------------------------------------------------------------
# quantization


def round_half_away(x):
    x = np.asarray(x, dtype=np.float64)
    return np.sign(x) * np.floor(np.abs(x) + 0.5)


def quantize(model: FloatModel, s: int = DEFAULT_SCALE) -> QuantizedModel:
    if not 4 <= s <= 20:
        raise ModelError(f"scale exponent {s} outside [4, 20]")
    layers = []
    for idx, layer in enumerate(model.layers):
        if isinstance(layer, Linear):
            w = round_half_away(layer.weight * 2.0**s)
            b = round_half_away(layer.bias * 2.0 ** (2 * s))
            peak = max(np.abs(w).max(initial=0), np.abs(b).max(initial=0))
            if peak >= MAGNITUDE_BOUND:
                raise QuantizationOverflow(f"layer {idx}: magnitude {peak:.3g} >= 2^40")
            layers.append(Linear(w.astype(np.int64), b.astype(np.int64),
                                 None if layer.support is None else layer.support.copy(), layer.conv))
        elif isinstance(layer, Activation):
            layers.append(Activation(layer.kind))
        else:
            layers.append(ResidualAdd(layer.source))
    return QuantizedModel(layers, model.input_dim, scale=s)


def dequantize(model: QuantizedModel) -> FloatModel:
    s = model.scale
    layers = []
    for layer in model.layers:
        if isinstance(layer, Linear):
            layers.append(Linear(layer.weight / 2.0**s, layer.bias / 2.0 ** (2 * s),
                                 None if layer.support is None else layer.support.copy(), layer.conv))
        elif isinstance(layer, Activation):
            layers.append(Activation(layer.kind))
        else:
            layers.append(ResidualAdd(layer.source))
    return FloatModel(layers, model.input_dim)


def quantize_input(x, s: int = DEFAULT_SCALE) -> np.ndarray:
    return round_half_away(np.asarray(x, dtype=np.float64) * 2.0**s).astype(np.int64)


# ---------------------------------------------------------------------------
# activations


def gelu(x):
    x = np.asarray(x, dtype=np.float64)
    return 0.5 * x * (1.0 + erf(x / np.sqrt(2.0)))


def act_float(kind: str, x):
    if kind == "relu":
        return np.maximum(x, 0.0)
    if kind == "gelu":
        return gelu(x)
    raise UnsupportedLayer(kind)


def act_int(kind: str, x, s: int) -> np.ndarray:
    """Fixed-point activation ``round(f(x / 2^s) * 2^s)``; identical to the lookup table map."""
    x = np.asarray(x, dtype=np.int64)
    if kind == "relu":
        return np.maximum(x, 0)
    return round_half_away(act_float(kind, x / 2.0**s) * 2.0**s).astype(np.int64)


# ---------------------------------------------------------------------------
# inference


@dataclass
class ActivationTrace:
    """Pre-activation values per activation site; each entry is ``(samples, width)``."""

    sites: list[np.ndarray]
    output: np.ndarray
    scale: int | None = None
    clamps: int = 0

    @property
    def n_samples(self) -> int:
        return self.output.shape[0]

    def merge(self, other: "ActivationTrace") -> "ActivationTrace":
        if len(self.sites) != len(other.sites):
            raise ModelError("cannot merge traces with different site counts")
        return ActivationTrace(
            [np.concatenate([a, b]) for a, b in zip(self.sites, other.sites)],
            np.concatenate([self.output, other.output]),
            self.scale,
            self.clamps + other.clamps,
        )


@dataclass
class LinearRecord:
    """Integer intermediates of one Linear: inputs, accumulator, quotient, remainder."""

    inputs: np.ndarray
    acc: np.ndarray
    quotient: np.ndarray
    remainder: np.ndarray


def run_quantized(model: QuantizedModel, X, mode: str = "strict"):
    """Batch integer inference. Returns (outputs per layer, linear records, trace)."""
    if mode not in ("strict", "clamp", "free"):
        raise ValueError(f"unknown range mode {mode!r}")
    X = np.atleast_2d(np.asarray(X, dtype=np.int64))
    if X.shape[1] != model.input_dim:
        raise ShapeError(f"input width {X.shape[1]} != {model.input_dim}")
    s = model.scale
    x = X
    outs: list[np.ndarray] = []
    records: dict[int, LinearRecord] = {}
    sites = []
    clamps = 0
    for idx, layer in enumerate(model.layers):
        if isinstance(layer, Linear):
            acc = x @ layer.weight.T + layer.bias
            if np.abs(acc).max(initial=0) >= 2**62:
                raise QuantizationOverflow(f"layer {idx}: accumulator overflow")
            q = acc >> s
            records[idx] = LinearRecord(x, acc, q, acc - (q << s))
            x = q
        elif isinstance(layer, Activation):
            sites.append(x)
            if layer.domain is not None and mode != "free":
                lo, hi = layer.domain
                bad = (x < lo) | (x > hi)
                if bad.any():
                    if mode == "strict":
                        raise RangeViolation(
                            f"layer {idx}: pre-activation outside [{lo}, {hi}] "
                            f"(saw [{x.min()}, {x.max()}])"
                        )
                    clamps += int(bad.sum())
                    x = np.clip(x, lo, hi)
            x = act_int(layer.kind, x, s)
        else:
            x = x + (X if layer.source < 0 else outs[layer.source])
        outs.append(x)
    return outs, records, ActivationTrace(sites, x, s, clamps)


def infer(model: QuantizedModel, x, mode: str = "strict"):
    """Integer inference on one input (or a batch). Returns ``(output, trace)``."""
    x = np.asarray(x, dtype=np.int64)
    outs, _, trace = run_quantized(model, x, mode)
    y = outs[-1]
    return (y[0] if x.ndim == 1 else y), trace


def forward(model: FloatModel, X, record: bool = False):
    """Float inference; with ``record`` also returns per-site pre-activations."""
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    x = X
    outs = []
    pre = []
    for layer in model.layers:
        if isinstance(layer, Linear):
            x = x @ layer.weight.T + layer.bias
        elif isinstance(layer, Activation):
            pre.append(x)
            x = act_float(layer.kind, x)
        else:
            x = x + (X if layer.source < 0 else outs[layer.source])
        outs.append(x)
    return (x, pre) if record else x


def calibrate(model: QuantizedModel, X, margin: int = 0) -> QuantizedModel:
    """Declare each activation site's lookup domain as the observed [min, max] (+ margin)."""
    _, _, trace = run_quantized(model, X, mode="free")
    out = copy_model(model)
    for layer, z in zip((l for l in out.layers if isinstance(l, Activation)), trace.sites):
        layer.domain = (int(z.min()) - margin, int(z.max()) + margin)
    return out


def with_domains(model: QuantizedModel, domains: Sequence[tuple[int, int] | None]) -> QuantizedModel:
    out = copy_model(model)
    acts = [l for l in out.layers if isinstance(l, Activation)]
    if len(acts) != len(domains):
        raise ModelError(f"{len(domains)} domains for {len(acts)} activation sites")
    for layer, dom in zip(acts, domains):
        layer.domain = None if dom is None else (int(dom[0]), int(dom[1]))
    return out


def copy_model(model):
    layers = []
    for layer in model.layers:
        if isinstance(layer, Linear):
            layers.append(Linear(layer.weight.copy(), layer.bias.copy(),
                                 None if layer.support is None else layer.support.copy(), layer.conv))
        else:
            layers.append(replace(layer))
    if isinstance(model, QuantizedModel):
        return QuantizedModel(layers, model.input_dim, scale=model.scale,
                              prime=model.prime, sparse=model.sparse)
    return FloatModel(layers, model.input_dim)


def accuracy(scores: np.ndarray, labels) -> float:
    return float(np.mean(np.argmax(scores, axis=1) == np.asarray(labels)))
