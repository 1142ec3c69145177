"""PLONKish table synthesis for quantized models.

Every row carries one instance of the gate family ::

    q_mul  * (F0*A0 + A1 - A2) = 0
    q_bias * (A1 - F1)         = 0
    q_zero * A0                = 0

plus an optional lookup (``q_lookup`` = table index + 1). A Linear neuron is a
chain of running-sum rows, one per nonzero weight (``F0 = w``, ``A0 = input``,
``A1 -> A2`` the partial sum), its first ``A1`` pinned to the bias through
``F1``. A rescale row then splits the accumulator as ``acc = 2^s * q + r`` with
``r`` range-checked by lookup. Activation rows look ``(A0, A1)`` up in a
per-site table; residual rows use ``F0 = 1`` to add two wires.

Copy links connect cells ``(column, row)``; column ``3`` denotes the instance
column (row = instance index).
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field, replace
from functools import lru_cache
from hashlib import sha256
from typing import Callable, Sequence

import numpy as np

from .field import P, embed, lift
from .merkle import boundary_commitment, digest_limbs
from .model import (
    Activation,
    Linear,
    ModelError,
    QuantizedModel,
    ResidualAdd,
    act_int,
    layer_widths,
    run_quantized,
)

MUL, BIAS, RESCALE, ACT, ADD, PASS, DUMMY = range(7)
KIND_NAMES = ("mul", "bias", "rescale", "act", "add", "pass", "dummy")

FIXED_COLUMNS = ("q_mul", "q_bias", "q_zero", "q_lookup", "F0", "F1")
QM, QB, QZ, QL, F0, F1 = range(6)
ADVICE_COLUMNS = ("A0", "A1", "A2")
A0, A1, A2, INST = range(4)

FORMAT_VERSION = 1
DEFAULT_MAX_K = 26
_TABLE_KINDS = ("range", "relu", "gelu")


class CircuitError(ModelError):
    pass


class CapacityError(CircuitError):
    pass


class SplitError(CircuitError):
    pass


# ---------------------------------------------------------------------------
# lookup tables


@lru_cache(maxsize=64)
def _table_outputs(kind: str, lo: int, hi: int, scale: int) -> np.ndarray:
    xs = np.arange(lo, hi + 1, dtype=np.int64)
    if kind == "range":
        return xs
    return act_int(kind, xs, scale)


@dataclass(frozen=True)
class LookupTable:
    """A public map over the integer domain ``[lo, hi]``; regenerated from its spec."""

    kind: str
    lo: int
    hi: int
    scale: int

    def __post_init__(self):
        if self.kind not in _TABLE_KINDS:
            raise CircuitError(f"unknown table kind {self.kind!r}")
        if self.hi < self.lo:
            raise CircuitError(f"empty table domain [{self.lo}, {self.hi}]")

    @property
    def name(self) -> str:
        return f"{'rescale' if self.kind == 'range' else self.kind}[{self.lo},{self.hi}]"

    @property
    def entries(self) -> int:
        return self.hi - self.lo + 1

    @property
    def width(self) -> int:
        # range checks constrain one cell (A1); activations constrain (A0, A1)
        return 1 if self.kind == "range" else 2

    def outputs(self) -> np.ndarray:
        return _table_outputs(self.kind, self.lo, self.hi, self.scale)

    def pairs(self) -> list[tuple[int, int]]:
        return list(zip(range(self.lo, self.hi + 1), self.outputs().tolist()))

    def contains(self, a0: int, a1: int) -> bool:
        """Membership of the looked-up cells (field elements)."""
        if self.kind == "range":
            v = lift(a1)
            return self.lo <= v <= self.hi
        x = lift(a0)
        if not self.lo <= x <= self.hi:
            return False
        return embed(int(self.outputs()[x - self.lo])) == a1

    def digest(self) -> bytes:
        return sha256(self.outputs().astype("<i8").tobytes()).digest()


def rescale_table(scale: int) -> LookupTable:
    return LookupTable("range", 0, 2**scale - 1, scale)


def _site_domains(model: QuantizedModel, ranges) -> list[tuple[int, int]]:
    acts = [l for l in model.layers if isinstance(l, Activation)]
    if ranges is None:
        ranges = [l.domain for l in acts]
    elif hasattr(ranges, "domains"):
        ranges = ranges.domains(model.scale)
    ranges = list(ranges)
    if len(ranges) != len(acts):
        raise CircuitError(f"{len(ranges)} ranges for {len(acts)} activation sites")
    out = []
    for i, dom in enumerate(ranges):
        if dom is None:
            raise CircuitError(f"activation site {i} has no calibrated range")
        out.append((int(dom[0]), int(dom[1])))
    return out


def build_lookup_tables(model: QuantizedModel, ranges=None,
                        max_k: int = DEFAULT_MAX_K) -> tuple[list[LookupTable], list[int]]:
    """Distinct tables plus, per activation site, the index of its table.

    The rescale range table (if the model has any Linear) is always index 0.
    """
    domains = _site_domains(model, ranges)
    tables: list[LookupTable] = []
    index: dict[LookupTable, int] = {}

    def add(t: LookupTable) -> int:
        if t.entries > 2**max_k:
            raise CapacityError(f"table {t.name} has {t.entries} entries > 2^{max_k}")
        if t not in index:
            index[t] = len(tables)
            tables.append(t)
        return index[t]

    if any(isinstance(l, Linear) for l in model.layers):
        add(rescale_table(model.scale))
    acts = [l for l in model.layers if isinstance(l, Activation)]
    site_tables = [add(LookupTable(a.kind, lo, hi, model.scale)) for a, (lo, hi) in zip(acts, domains)]
    return tables, site_tables


# ---------------------------------------------------------------------------
# table container


@dataclass(frozen=True)
class InstanceLayout:
    n_x: int
    n_y: int
    in_index: int | None = None
    out_index: int | None = None

    @property
    def size(self) -> int:
        return self.n_x + self.n_y + 8 * (self.in_index is not None) + 8 * (self.out_index is not None)

    @property
    def y_offset(self) -> int:
        return self.n_x

    @property
    def in_offset(self) -> int:
        return self.n_x + self.n_y

    @property
    def out_offset(self) -> int:
        return self.in_offset + 8 * (self.in_index is not None)


@dataclass
class Witness:
    advice: np.ndarray  # (3, n) uint64
    instance: np.ndarray  # uint64
    output: np.ndarray = field(default=None, repr=False)  # integer model output

    def copy(self) -> "Witness":
        return Witness(self.advice.copy(), self.instance.copy(), self.output)


@dataclass
class Violation:
    reason: str
    row: int | None = None
    detail: str = ""

    def __str__(self):
        at = f" @ row {self.row}" if self.row is not None else ""
        return f"{self.reason}{at}" + (f" ({self.detail})" if self.detail else "")


@dataclass
class CircuitTable:
    scale: int
    fixed: np.ndarray  # (6, n) uint64
    kinds: np.ndarray  # (n,) uint8
    meta: np.ndarray  # (n, 3) int64: layer, neuron/position, input index
    copies: np.ndarray  # (m, 4) int64: col_a, row_a, col_b, row_b
    tables: list[LookupTable]
    layout: InstanceLayout
    boundary_in: np.ndarray  # (w, 2) cells bound to the input commitment
    boundary_out: np.ndarray
    eliminate_zeros: bool = True
    model: QuantizedModel | None = field(default=None, repr=False, compare=False)
    _labels: dict | None = field(default=None, repr=False, compare=False)

    # -- accounting ---------------------------------------------------------

    @property
    def rows(self) -> int:
        return int(self.kinds.shape[0])

    @property
    def lookup_entries(self) -> int:
        return sum(t.entries for t in self.tables)

    @property
    def k(self) -> int:
        return ceil_log2(self.rows + self.lookup_entries)

    @property
    def multiply_rows(self) -> int:
        return int(np.count_nonzero(self.kinds == MUL))

    def row_counts(self) -> dict[str, int]:
        counts = np.bincount(self.kinds, minlength=len(KIND_NAMES))
        return {name: int(c) for name, c in zip(KIND_NAMES, counts)}

    def cost(self) -> dict:
        return {
            "rows": self.rows,
            "lookup_entries": self.lookup_entries,
            "k": self.k,
            "multiply_rows": self.multiply_rows,
            "row_kinds": self.row_counts(),
            "tables": [{"name": t.name, "entries": t.entries} for t in self.tables],
        }

    @property
    def n_instance(self) -> int:
        return self.layout.size

    # -- semantic cell labels (used to aim tampers at the same wire in two circuits)

    def labels(self) -> dict:
        if self._labels is None:
            names = {
                MUL: ("in", "carry", "psum"),
                BIAS: ("bias_zero", "bias_in", "bias_out"),
                RESCALE: ("quotient", "remainder", "acc"),
                ACT: ("act_in", "act_out", "act_copy"),
                ADD: ("add_a", "add_b", "add_out"),
                PASS: ("pass_zero", "pass_in", "pass_out"),
            }
            out = {}
            for row, (kind, m) in enumerate(zip(self.kinds.tolist(), self.meta.tolist())):
                if kind == DUMMY:
                    continue
                key = tuple(m) if kind == MUL else tuple(m[:2])
                for col, nm in enumerate(names[kind]):
                    out[(nm,) + key] = (col, row)
            self._labels = out
        return self._labels

    def cell(self, label) -> tuple[int, int]:
        return self.labels()[tuple(label)]

    # -- serialization ------------------------------------------------------

    def shape_bytes(self) -> bytes:
        """Public structure: everything the verifier needs except fixed values."""
        parts = [
            b"ZKSH",
            struct.pack("<BIQ", FORMAT_VERSION, self.scale, self.rows),
            _pack_array(self.copies),
            struct.pack("<I", len(self.tables)),
        ]
        for t in self.tables:
            parts.append(struct.pack("<Bqq", _TABLE_KINDS.index(t.kind), t.lo, t.hi))
        lay = self.layout
        parts.append(struct.pack("<qqqq", lay.n_x, lay.n_y, _opt(lay.in_index), _opt(lay.out_index)))
        parts.append(_pack_array(self.boundary_in))
        parts.append(_pack_array(self.boundary_out))
        return b"".join(parts)

    def to_bytes(self) -> bytes:
        return b"".join([
            b"ZKCT",
            struct.pack("<BBQ", FORMAT_VERSION, int(self.eliminate_zeros), self.rows),
            np.ascontiguousarray(self.fixed, dtype="<u8").tobytes(),
            self.kinds.astype(np.uint8).tobytes(),
            np.ascontiguousarray(self.meta, dtype="<i8").tobytes(),
            self.shape_bytes(),
        ])

    @classmethod
    def from_bytes(cls, data: bytes, model: QuantizedModel | None = None) -> "CircuitTable":
        if data[:4] != b"ZKCT":
            raise CircuitError("not a circuit table")
        version, elim, n = struct.unpack_from("<BBQ", data, 4)
        if version != FORMAT_VERSION:
            raise CircuitError(f"unsupported circuit format version {version}")
        body = data[4 + struct.calcsize("<BBQ"):]
        off = 0
        fixed = np.frombuffer(body, dtype="<u8", count=6 * n, offset=off).reshape(6, n).astype(np.uint64)
        off += 48 * n
        kinds = np.frombuffer(body, dtype=np.uint8, count=n, offset=off).copy()
        off += n
        meta = np.frombuffer(body, dtype="<i8", count=3 * n, offset=off).reshape(n, 3).astype(np.int64)
        off += 24 * n
        shape = parse_shape(body[off:])
        return cls(shape["scale"], fixed, kinds, meta, shape["copies"], shape["tables"], shape["layout"],
                   shape["boundary_in"], shape["boundary_out"], bool(elim), model)

    def digest(self) -> str:
        return sha256(self.to_bytes()).hexdigest()


def _opt(v):
    return -1 if v is None else int(v)


def _pack_array(a: np.ndarray) -> bytes:
    a = np.ascontiguousarray(a, dtype="<i8")
    return struct.pack("<Q", a.shape[0]) + a.tobytes()


def _unpack_array(data: bytes, off: int, cols: int) -> tuple[np.ndarray, int]:
    (m,) = struct.unpack_from("<Q", data, off)
    off += 8
    arr = np.frombuffer(data, dtype="<i8", count=m * cols, offset=off).reshape(m, cols).astype(np.int64)
    return arr, off + 8 * m * cols


def parse_shape(data: bytes) -> dict:
    if data[:4] != b"ZKSH":
        raise CircuitError("malformed circuit shape")
    version, scale, rows = struct.unpack_from("<BIQ", data, 4)
    if version != FORMAT_VERSION:
        raise CircuitError(f"unsupported shape version {version}")
    off = 4 + struct.calcsize("<BIQ")
    copies, off = _unpack_array(data, off, 4)
    (nt,) = struct.unpack_from("<I", data, off)
    off += 4
    tables = []
    for _ in range(nt):
        kc, lo, hi = struct.unpack_from("<Bqq", data, off)
        off += struct.calcsize("<Bqq")
        tables.append(LookupTable(_TABLE_KINDS[kc], lo, hi, scale))
    n_x, n_y, ii, oi = struct.unpack_from("<qqqq", data, off)
    off += 32
    b_in, off = _unpack_array(data, off, 2)
    b_out, off = _unpack_array(data, off, 2)
    if off != len(data):
        raise CircuitError("trailing bytes in circuit shape")
    layout = InstanceLayout(n_x, n_y, None if ii < 0 else ii, None if oi < 0 else oi)
    return {"scale": scale, "rows": rows, "copies": copies, "tables": tables, "layout": layout,
            "boundary_in": b_in, "boundary_out": b_out}


def ceil_log2(n: int) -> int:
    return max(int(n) - 1, 0).bit_length()


# ---------------------------------------------------------------------------
# synthesis


class _Builder:
    def __init__(self, scale: int):
        self.scale = scale
        self.fixed: list[list[int]] = [[] for _ in FIXED_COLUMNS]
        self.kinds: list[int] = []
        self.meta: list[tuple[int, int, int]] = []
        self.copies: list[tuple[int, int, int, int]] = []

    def row(self, kind, meta, qm=0, qb=0, qz=0, ql=0, f0=0, f1=0) -> int:
        for col, v in zip(self.fixed, (qm, qb, qz, ql, embed(f0), embed(f1))):
            col.append(v)
        self.kinds.append(kind)
        self.meta.append(meta)
        return len(self.kinds) - 1

    def link(self, a: tuple[int, int], b: tuple[int, int]) -> None:
        self.copies.append((a[0], a[1], b[0], b[1]))


def synthesize_linear(builder: _Builder, layer_index: int, weights, bias: int, neuron: int,
                      input_cells: Sequence[tuple[int, int]], eliminate_zeros: bool = True) -> tuple[int, int]:
    """Emit the running-sum rows of one neuron; returns the cell holding the accumulator."""
    weights = [int(w) for w in weights]
    support = [j for j, w in enumerate(weights) if w != 0 or not eliminate_zeros]
    if not support:
        r = builder.row(BIAS, (layer_index, neuron, -1), qm=1, qb=1, qz=1, f1=bias)
        return (A2, r)
    prev = None
    for j in support:
        first = prev is None
        r = builder.row(MUL, (layer_index, neuron, j), qm=1, qb=int(first), f0=weights[j],
                        f1=bias if first else 0)
        builder.link((A0, r), input_cells[j])
        if not first:
            builder.link((A1, r), (A2, prev))
        prev = r
    return (A2, prev)


def synthesize_circuit(model: QuantizedModel, ranges=None, eliminate_zeros: bool = True,
                       input_public: bool = True, output_public: bool = True,
                       in_index: int | None = None, out_index: int | None = None,
                       max_k: int = DEFAULT_MAX_K) -> CircuitTable:
    """Synthesize the full table for ``model``.

    ``ranges`` gives one integer ``(lo, hi)`` per activation site (defaults to
    the model's declared domains). Non-public ends of the circuit are bound to
    boundary commitments instead (used by :func:`split_circuit`).
    """
    if not isinstance(model, QuantizedModel):
        raise CircuitError("circuit synthesis needs a quantized model")
    if not model.layers:
        raise CircuitError("empty model")
    tables, site_tables = build_lookup_tables(model, ranges, max_k)
    s = model.scale
    b = _Builder(s)
    boundary_in: list[tuple[int, int]] = []
    if input_public:
        cur = [(INST, j) for j in range(model.input_dim)]
    else:
        cur = []
        for j in range(model.input_dim):
            r = b.row(PASS, (-1, j, -1), qm=1, qz=1)
            boundary_in.append((A1, r))
            cur.append((A2, r))
    inputs = cur
    vectors = []
    site = 0
    for li, layer in enumerate(model.layers):
        if isinstance(layer, Linear):
            W = layer.weight
            nxt = []
            for i in range(layer.out_dim):
                acc = synthesize_linear(b, li, W[i], int(layer.bias[i]), i, cur, eliminate_zeros)
                r = b.row(RESCALE, (li, i, -1), qm=1, ql=1, f0=2**s)  # rescale table is index 0
                b.link((A2, r), acc)
                nxt.append((A0, r))
            cur = nxt
        elif isinstance(layer, Activation):
            tid = site_tables[site] + 1
            nxt = []
            for j, c in enumerate(cur):
                r = b.row(ACT, (li, j, -1), qm=1, ql=tid)
                b.link((A0, r), c)
                nxt.append((A2, r))
            cur = nxt
            site += 1
        elif isinstance(layer, ResidualAdd):
            src = inputs if layer.source < 0 else vectors[layer.source]
            nxt = []
            for j, (c, o) in enumerate(zip(cur, src)):
                r = b.row(ADD, (li, j, -1), qm=1, f0=1)
                b.link((A0, r), c)
                b.link((A1, r), o)
                nxt.append((A2, r))
            cur = nxt
        else:
            raise CircuitError(f"layer {li}: unsupported layer")
        vectors.append(cur)

    n_x = model.input_dim if input_public else 0
    n_y = len(cur) if output_public else 0
    layout = InstanceLayout(n_x, n_y, None if input_public else in_index,
                            None if output_public else out_index)
    if not input_public and in_index is None or not output_public and out_index is None:
        raise CircuitError("chained circuit ends need a boundary index")
    boundary_out = []
    if output_public:
        for j, c in enumerate(cur):
            b.link(c, (INST, layout.y_offset + j))
    else:
        boundary_out = cur

    fixed = np.array(b.fixed, dtype=np.uint64).reshape(len(FIXED_COLUMNS), -1)
    return CircuitTable(
        scale=s,
        fixed=fixed,
        kinds=np.array(b.kinds, dtype=np.uint8),
        meta=np.array(b.meta, dtype=np.int64).reshape(-1, 3),
        copies=np.array(b.copies, dtype=np.int64).reshape(-1, 4),
        tables=tables,
        layout=layout,
        boundary_in=np.array(boundary_in, dtype=np.int64).reshape(-1, 2),
        boundary_out=np.array(boundary_out, dtype=np.int64).reshape(-1, 2),
        eliminate_zeros=eliminate_zeros,
        model=model,
    )


def count_rows(model: QuantizedModel, eliminate_zeros: bool = True, chained_input: bool = False) -> dict:
    """Closed-form row counts per kind, without synthesizing."""
    counts = dict.fromkeys(KIND_NAMES, 0)
    width = model.input_dim
    if chained_input:
        counts["pass"] = width
    for layer in model.layers:
        if isinstance(layer, Linear):
            if eliminate_zeros:
                nnz = np.count_nonzero(layer.weight, axis=1)
            else:
                nnz = np.full(layer.out_dim, layer.in_dim)
            counts["mul"] += int(nnz.sum())
            counts["bias"] += int(np.count_nonzero(nnz == 0))
            counts["rescale"] += layer.out_dim
            width = layer.out_dim
        elif isinstance(layer, Activation):
            counts["act"] += width
        else:
            counts["add"] += width
    counts["total"] = sum(counts.values())
    return counts


# ---------------------------------------------------------------------------
# witness generation and checking


def _boundary_limbs(values, index: int) -> list[int]:
    return digest_limbs(boundary_commitment([embed(int(v)) for v in values], index))


def assign_witness(circuit: CircuitTable, x, model: QuantizedModel | None = None) -> Witness:
    """Honest advice assignment for integer input ``x`` (the part's input vector)."""
    model = model or circuit.model
    if model is None:
        raise CircuitError("witness generation needs the circuit's model")
    x = np.asarray(x, dtype=np.int64).ravel()
    outs, records, _ = run_quantized(model, x[None, :], mode="free")

    def layer_input(li: int) -> list[int]:
        return (x if li == 0 else outs[li - 1][0]).tolist()

    n = circuit.rows
    cols = [[0] * n for _ in range(3)]
    qb = circuit.fixed[QB].tolist()
    cache: dict[int, list[int]] = {}
    partial = 0
    for r, (kind, (li, i, j)) in enumerate(zip(circuit.kinds.tolist(), circuit.meta.tolist())):
        if kind == MUL:
            layer = model.layers[li]
            if li not in cache:
                cache[li] = layer_input(li)
            if qb[r]:
                partial = int(layer.bias[i])
            a0 = cache[li][j]
            new = partial + int(layer.weight[i, j]) * a0
            cols[0][r], cols[1][r], cols[2][r] = a0, partial, new
            partial = new
        elif kind == BIAS:
            bias = int(model.layers[li].bias[i])
            cols[1][r] = cols[2][r] = bias
        elif kind == RESCALE:
            rec = records[li]
            cols[0][r] = int(rec.quotient[0, i])
            cols[1][r] = int(rec.remainder[0, i])
            cols[2][r] = int(rec.acc[0, i])
        elif kind == ACT:
            if li not in cache:
                cache[li] = layer_input(li)
            cols[0][r] = cache[li][i]
            cols[1][r] = cols[2][r] = int(outs[li][0, i])
        elif kind == ADD:
            layer = model.layers[li]
            src = x if layer.source < 0 else outs[layer.source][0]
            if li not in cache:
                cache[li] = layer_input(li)
            cols[0][r] = cache[li][i]
            cols[1][r] = int(src[i])
            cols[2][r] = int(outs[li][0, i])
        elif kind == PASS:
            cols[1][r] = cols[2][r] = int(x[i])
    advice = np.array([[v % P for v in col] for col in cols], dtype=np.uint64).reshape(3, n)

    y = outs[-1][0]
    lay = circuit.layout
    inst: list[int] = []
    if lay.n_x:
        inst += [embed(int(v)) for v in x]
    if lay.n_y:
        inst += [embed(int(v)) for v in y]
    if lay.in_index is not None:
        inst += _boundary_limbs(x, lay.in_index)
    if lay.out_index is not None:
        inst += _boundary_limbs(y, lay.out_index)
    return Witness(advice, np.array(inst, dtype=np.uint64), y.copy())


def gate_ok(f: Sequence[int], a: Sequence[int]) -> bool:
    if f[QM] and (f[F0] * a[0] + a[1] - a[2]) % P:
        return False
    if f[QB] and (a[1] - f[F1]) % P:
        return False
    if f[QZ] and a[0] % P:
        return False
    return True


def lookup_ok(tables: Sequence[LookupTable], f: Sequence[int], a: Sequence[int]) -> bool:
    t = f[QL]
    if not t:
        return True
    if t > len(tables):
        return False
    return tables[t - 1].contains(a[0], a[1])


def cell_value(advice_cols, instance, col: int, row: int):
    if col == INST:
        return int(instance[row]) if 0 <= row < len(instance) else None
    return advice_cols[col][row]


def boundary_ok(cells: np.ndarray, advice_cols, instance, offset: int, index: int) -> bool:
    values = [advice_cols[c][r] for c, r in cells.tolist()]
    limbs = digest_limbs(boundary_commitment(values, index))
    return [int(v) for v in instance[offset:offset + 8]] == limbs


def first_violation(circuit: CircuitTable, witness: Witness) -> Violation | None:
    """Scan every constraint; returns the first failure (the honest prover's refusal check)."""
    if witness.advice.shape != (3, circuit.rows):
        return Violation("malformed", detail="advice shape")
    if len(witness.instance) != circuit.n_instance:
        return Violation("instance mismatch", detail="instance length")
    fixed = [c.tolist() for c in circuit.fixed]
    adv = [c.tolist() for c in witness.advice]
    for r in range(circuit.rows):
        f = [col[r] for col in fixed]
        a = (adv[0][r], adv[1][r], adv[2][r])
        if not gate_ok(f, a):
            return Violation("gate", r)
        if not lookup_ok(circuit.tables, f, a):
            return Violation("lookup miss", r)
    v = copy_violation(circuit.copies, adv, witness.instance)
    if v:
        return v
    return binding_violation(circuit.layout, circuit.boundary_in, circuit.boundary_out, adv, witness.instance)


def copy_violation(copies: np.ndarray, adv, instance) -> Violation | None:
    for ca, ra, cb, rb in copies.tolist():
        va = cell_value(adv, instance, ca, ra)
        vb = cell_value(adv, instance, cb, rb)
        if va is None or vb is None or va != vb:
            return Violation("copy link", ra if ca != INST else rb, f"({ca},{ra})~({cb},{rb})")
    return None


def binding_violation(layout: InstanceLayout, boundary_in, boundary_out, adv, instance) -> Violation | None:
    if layout.in_index is not None and not boundary_ok(boundary_in, adv, instance,
                                                       layout.in_offset, layout.in_index):
        return Violation("boundary binding", detail="input commitment")
    if layout.out_index is not None and not boundary_ok(boundary_out, adv, instance,
                                                        layout.out_offset, layout.out_index):
        return Violation("boundary binding", detail="output commitment")
    return None


# ---------------------------------------------------------------------------
# padding


def pad_dummy(circuit: CircuitTable, target_rows: int) -> CircuitTable:
    """Append always-satisfiable rows (every advice cell constrained to zero)."""
    n = circuit.rows
    if target_rows < n:
        raise CircuitError(f"pad target {target_rows} below current rows {n}")
    extra = target_rows - n
    if extra == 0:
        return circuit
    pad = np.zeros((len(FIXED_COLUMNS), extra), dtype=np.uint64)
    pad[QM] = pad[QB] = pad[QZ] = 1
    return replace(
        circuit,
        fixed=np.concatenate([circuit.fixed, pad], axis=1),
        kinds=np.concatenate([circuit.kinds, np.full(extra, DUMMY, dtype=np.uint8)]),
        meta=np.concatenate([circuit.meta, np.full((extra, 3), -1, dtype=np.int64)]),
        _labels=None,
    )


def pad_witness(witness: Witness, rows: int) -> Witness:
    n = witness.advice.shape[1]
    if rows < n:
        raise CircuitError("cannot shrink a witness")
    adv = np.zeros((3, rows), dtype=np.uint64)
    adv[:, :n] = witness.advice
    return Witness(adv, witness.instance.copy(), witness.output)


# ---------------------------------------------------------------------------
# splitting


@dataclass
class PartSpec:
    start: int  # first model layer (inclusive)
    stop: int  # last model layer (exclusive)
    rows: int
    k: int
    in_index: int | None
    out_index: int | None

    def to_dict(self) -> dict:
        return {"layers": [self.start, self.stop], "rows": self.rows, "k": self.k,
                "input_commitment": self.in_index, "output_commitment": self.out_index}


@dataclass
class SplitPlan:
    parts: list[PartSpec]
    total_rows: int
    max_layer_rows: int

    @property
    def M(self) -> int:
        return len(self.parts)

    @property
    def max_part_rows(self) -> int:
        return max(p.rows for p in self.parts)

    def to_dict(self) -> dict:
        return {"M": self.M, "total_rows": self.total_rows, "max_layer_rows": self.max_layer_rows,
                "max_part_rows": self.max_part_rows, "parts": [p.to_dict() for p in self.parts]}


def cut_points(model: QuantizedModel) -> list[int]:
    """Layer indices where a part may start: before a Linear, not inside a residual span."""
    cuts = []
    for c, layer in enumerate(model.layers):
        if c == 0 or not isinstance(layer, Linear):
            continue
        spans = any(isinstance(l, ResidualAdd) and idx >= c and l.source < c - 1
                    for idx, l in enumerate(model.layers))
        if not spans:
            cuts.append(c)
    return cuts


def slice_model(model: QuantizedModel, start: int, stop: int) -> QuantizedModel:
    widths = layer_widths(model)
    in_dim = model.input_dim if start == 0 else widths[start - 1]
    layers = []
    for layer in model.layers[start:stop]:
        if isinstance(layer, ResidualAdd):
            layer = ResidualAdd(layer.source - start)
        layers.append(layer)
    return QuantizedModel(layers, in_dim, scale=model.scale, prime=model.prime, sparse=model.sparse)


def _layer_rows(model: QuantizedModel, eliminate_zeros: bool) -> list[int]:
    rows = []
    width = model.input_dim
    for layer in model.layers:
        if isinstance(layer, Linear):
            nnz = np.count_nonzero(layer.weight, axis=1) if eliminate_zeros else np.full(layer.out_dim, layer.in_dim)
            rows.append(int(nnz.sum() + np.count_nonzero(nnz == 0) + layer.out_dim))
            width = layer.out_dim
        else:
            rows.append(width)
    return rows


def balanced_partition(costs: Sequence[int], M: int, overhead: Sequence[int] | None = None) -> list[int]:
    """Start indices of ``M`` consecutive groups minimizing the largest group cost.

    ``overhead[u]`` is added to any group starting at unit ``u > 0``.
    """
    U = len(costs)
    if not 1 <= M <= U:
        raise SplitError(f"cannot split {U} units into {M} parts")
    overhead = overhead or [0] * U
    prefix = np.concatenate([[0], np.cumsum(costs)]).tolist()

    def group(a, b):
        return prefix[b] - prefix[a] + (overhead[a] if a > 0 else 0)

    INF = float("inf")
    best = [[INF] * (U + 1) for _ in range(M + 1)]
    arg = [[0] * (U + 1) for _ in range(M + 1)]
    best[0][0] = 0
    for m in range(1, M + 1):
        for u in range(m, U + 1):
            for a in range(m - 1, u):
                v = max(best[m - 1][a], group(a, u))
                if v < best[m][u]:
                    best[m][u], arg[m][u] = v, a
    starts = []
    u = U
    for m in range(M, 0, -1):
        a = arg[m][u]
        starts.append(a)
        u = a
    return starts[::-1]


def split_circuit(model: QuantizedModel, ranges=None, M: int = 1, eliminate_zeros: bool = True,
                  map_fn: Callable = map, max_k: int = DEFAULT_MAX_K) -> tuple[SplitPlan, list[CircuitTable]]:
    """Partition consecutive layers into ``M`` parts with balanced row counts and chain them."""
    n_layers = len(model.layers)
    if M < 1 or M > n_layers:
        raise SplitError(f"M={M} outside [1, {n_layers}]")
    domains = _site_domains(model, ranges)
    starts_allowed = [0] + cut_points(model)
    if M > len(starts_allowed):
        raise SplitError(f"only {len(starts_allowed)} admissible parts for M={M}")
    layer_rows = _layer_rows(model, eliminate_zeros)
    widths = layer_widths(model)
    bounds = starts_allowed + [n_layers]
    unit_costs = [sum(layer_rows[a:b]) for a, b in zip(bounds, bounds[1:])]
    overhead = [0] + [widths[a - 1] for a in starts_allowed[1:]]
    chosen = balanced_partition(unit_costs, M, overhead)
    spans = [(starts_allowed[u], bounds[v]) for u, v in zip(chosen, chosen[1:] + [len(unit_costs)])]

    site_of_layer = {}
    for li in model.activation_indices():
        site_of_layer[li] = len(site_of_layer)

    def build(p):
        a, b = spans[p]
        sub = slice_model(model, a, b)
        sub_ranges = [domains[site_of_layer[li]] for li in range(a, b) if li in site_of_layer]
        return synthesize_circuit(sub, sub_ranges, eliminate_zeros,
                                  input_public=p == 0, output_public=p == M - 1,
                                  in_index=None if p == 0 else p, out_index=None if p == M - 1 else p + 1,
                                  max_k=max_k)

    circuits = list(map_fn(build, range(M)))
    parts = [PartSpec(a, b, c.rows, c.k, c.layout.in_index, c.layout.out_index)
             for (a, b), c in zip(spans, circuits)]
    plan = SplitPlan(parts, sum(c.rows for c in circuits), max(layer_rows))
    return plan, circuits


def assign_chain(circuits: Sequence[CircuitTable], x) -> list[Witness]:
    """Honest witnesses for consecutive parts; part ``i+1`` consumes part ``i``'s output."""
    out = []
    cur = np.asarray(x, dtype=np.int64)
    for c in circuits:
        w = assign_witness(c, cur)
        out.append(w)
        cur = w.output
    return out
