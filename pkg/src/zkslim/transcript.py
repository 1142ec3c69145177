"""Hash-commitment proof transcripts for circuit tables.

This is a desk-scale stand-in for a SNARK, not one. Each column is committed
by a SHA-256 Merkle root (advice columns carry a blinding leaf). Two proof
modes exist:

* ``audit`` -- the proof opens every advice and fixed column, and the verifier
  re-checks every gate, copy link, lookup and boundary binding;
* ``sampled`` -- the proof opens only ``s`` challenge rows (derived by hashing
  the vk, the instance and the advice roots) plus the boundary rows. A single
  bad row among ``n`` survives with probability ``(1 - 1/n)^s``.

Neither mode hides the witness from the verifier.
"""

from __future__ import annotations

import secrets
import struct
from dataclasses import dataclass, field
from hashlib import sha256
from typing import Sequence

import numpy as np

from . import merkle
from .circuit import (
    INST,
    CircuitTable,
    Violation,
    Witness,
    binding_violation,
    copy_violation,
    first_violation,
    gate_ok,
    lookup_ok,
    parse_shape,
)
from .field import embed

VERSION = 1
N_FIXED = 6
N_ADVICE = 3
MODES = ("audit", "sampled")


class ProveError(ValueError):
    def __init__(self, violation: Violation):
        super().__init__(f"witness does not satisfy the circuit: {violation}")
        self.violation = violation

    @property
    def row(self):
        return self.violation.row


class FormatError(ValueError):
    pass


@dataclass(frozen=True)
class VerificationKey:
    k: int
    rows: int
    n_instance: int
    fixed_roots: tuple[bytes, ...]
    shape_digest: bytes

    def to_bytes(self) -> bytes:
        # fixed size: equally shaped circuits give equally long keys
        return (b"ZKVK" + struct.pack("<BIQQ", VERSION, self.k, self.rows, self.n_instance)
                + b"".join(self.fixed_roots) + self.shape_digest)

    @classmethod
    def from_bytes(cls, data: bytes) -> "VerificationKey":
        head = 4 + struct.calcsize("<BIQQ")
        if data[:4] != b"ZKVK" or len(data) != head + 32 * (N_FIXED + 1):
            raise FormatError("malformed verification key")
        version, k, rows, n_inst = struct.unpack_from("<BIQQ", data, 4)
        if version != VERSION:
            raise FormatError(f"unsupported vk version {version}")
        roots = tuple(data[head + 32 * i: head + 32 * (i + 1)] for i in range(N_FIXED))
        return cls(k, rows, n_inst, roots, data[head + 32 * N_FIXED:])

    def digest(self) -> bytes:
        return sha256(self.to_bytes()).digest()

    def hex(self) -> str:
        return self.digest().hex()


@dataclass
class ProvingKey:
    circuit: CircuitTable
    vk: VerificationKey
    shape: bytes = field(repr=False)
    fixed_trees: list = field(repr=False)


def keygen(circuit: CircuitTable) -> tuple[ProvingKey, VerificationKey]:
    trees = [merkle.commit_column(col) for col in circuit.fixed]
    shape = circuit.shape_bytes()
    vk = VerificationKey(circuit.k, circuit.rows, circuit.n_instance,
                         tuple(t.root for t in trees), sha256(shape).digest())
    return ProvingKey(circuit, vk, shape, trees), vk


@dataclass
class RowOpening:
    row: int
    fixed: list[int]
    advice: list[int]
    fixed_paths: list[list[bytes]] = field(repr=False)
    advice_paths: list[list[bytes]] = field(repr=False)


@dataclass
class Proof:
    mode: str
    samples: int
    instance: np.ndarray
    advice_roots: list[bytes]
    shape: bytes = field(repr=False)
    fixed: np.ndarray | None = field(default=None, repr=False)
    advice: np.ndarray | None = field(default=None, repr=False)
    blindings: list[bytes] | None = field(default=None, repr=False)
    openings: list[RowOpening] = field(default_factory=list, repr=False)

    def header_bytes(self) -> bytes:
        """Commitments, statement and public shape; the part that is never opened data."""
        inst = np.ascontiguousarray(self.instance, dtype="<u8")
        return b"".join([
            b"ZKPF", struct.pack("<BBI", VERSION, MODES.index(self.mode), self.samples),
            _lp(inst.tobytes()), b"".join(self.advice_roots), _lp(self.shape),
        ])

    def to_bytes(self) -> bytes:
        parts = [self.header_bytes()]
        if self.mode == "audit":
            parts.append(_lp(np.ascontiguousarray(self.fixed, dtype="<u8").tobytes()))
            parts.append(_lp(np.ascontiguousarray(self.advice, dtype="<u8").tobytes()))
            parts.append(b"".join(self.blindings))
        else:
            parts.append(struct.pack("<I", len(self.openings)))
            for op in self.openings:
                parts.append(struct.pack("<Q", op.row))
                parts.append(struct.pack(f"<{N_FIXED + N_ADVICE}Q", *op.fixed, *op.advice))
                for path in op.fixed_paths + op.advice_paths:
                    parts.append(struct.pack("<B", len(path)) + b"".join(path))
        return b"".join(parts)

    @classmethod
    def from_bytes(cls, data: bytes) -> "Proof":
        r = _Reader(data)
        if r.take(4) != b"ZKPF":
            raise FormatError("not a proof")
        version, mode, samples = r.unpack("<BBI")
        if version != VERSION or mode >= len(MODES):
            raise FormatError(f"unsupported proof version {version} / mode {mode}")
        instance = np.frombuffer(r.lp(), dtype="<u8").astype(np.uint64)
        roots = [r.take(32) for _ in range(N_ADVICE)]
        shape = r.lp()
        proof = cls(MODES[mode], samples, instance, roots, shape)
        if proof.mode == "audit":
            proof.fixed = np.frombuffer(r.lp(), dtype="<u8").astype(np.uint64).reshape(N_FIXED, -1)
            proof.advice = np.frombuffer(r.lp(), dtype="<u8").astype(np.uint64).reshape(N_ADVICE, -1)
            proof.blindings = [r.take(32) for _ in range(N_ADVICE)]
        else:
            (count,) = r.unpack("<I")
            for _ in range(count):
                (row,) = r.unpack("<Q")
                vals = list(r.unpack(f"<{N_FIXED + N_ADVICE}Q"))
                paths = []
                for _ in range(N_FIXED + N_ADVICE):
                    (depth,) = r.unpack("<B")
                    paths.append([r.take(32) for _ in range(depth)])
                proof.openings.append(RowOpening(row, vals[:N_FIXED], vals[N_FIXED:],
                                                 paths[:N_FIXED], paths[N_FIXED:]))
        if not r.done():
            raise FormatError("trailing bytes in proof")
        return proof

    def digest(self) -> str:
        return sha256(self.to_bytes()).hexdigest()


def _lp(b: bytes) -> bytes:
    return struct.pack("<Q", len(b)) + b


class _Reader:
    def __init__(self, data: bytes):
        self.data, self.off = data, 0

    def take(self, n: int) -> bytes:
        if self.off + n > len(self.data):
            raise FormatError("truncated data")
        out = self.data[self.off:self.off + n]
        self.off += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def lp(self) -> bytes:
        (n,) = self.unpack("<Q")
        return self.take(n)

    def done(self) -> bool:
        return self.off == len(self.data)


def challenge_rows(vk: VerificationKey, instance, advice_roots: Sequence[bytes], samples: int) -> list[int]:
    """Fiat-Shamir style row sample (with replacement)."""
    seed = sha256(b"zkslim-challenge" + vk.digest()
                  + np.ascontiguousarray(instance, dtype="<u8").tobytes()
                  + b"".join(advice_roots)).digest()
    out = []
    for t in range(samples):
        h = sha256(seed + t.to_bytes(4, "little")).digest()
        out.append(int.from_bytes(h[:8], "little") % vk.rows)
    return out


def _boundary_rows(b_in: np.ndarray, b_out: np.ndarray) -> set[int]:
    return {int(r) for r in b_in[:, 1]} | {int(r) for r in b_out[:, 1]}


def prove(pk: ProvingKey, X, witness: Witness, mode: str = "audit", samples: int = 0,
          seed: int | None = None, check: bool = True) -> Proof:
    """Commit to the witness and assemble a proof.

    An honest prover (``check=True``) refuses witnesses that violate any
    constraint. ``check=False`` commits whatever it is given; the tamper tests
    use it to play a cheating prover.
    """
    if mode not in MODES:
        raise ValueError(f"unknown proof mode {mode!r}")
    circuit = pk.circuit
    if check:
        v = first_violation(circuit, witness)
        if v is None and X is not None and circuit.layout.n_x:
            expect = [embed(int(x)) for x in np.ravel(X)]
            if [int(v) for v in witness.instance[:circuit.layout.n_x]] != expect:
                v = Violation("instance mismatch", detail="X differs from witness input")
        if v is not None:
            raise ProveError(v)
    rng = np.random.default_rng(seed) if seed is not None else None
    blindings = [rng.bytes(32) if rng is not None else secrets.token_bytes(32) for _ in range(N_ADVICE)]
    trees = [merkle.commit_column(col, b) for col, b in zip(witness.advice, blindings)]
    roots = [t.root for t in trees]
    instance = np.asarray(witness.instance, dtype=np.uint64).copy()
    proof = Proof(mode, samples if mode == "sampled" else 0, instance, roots, pk.shape)
    if mode == "audit":
        proof.fixed = circuit.fixed.copy()
        proof.advice = np.asarray(witness.advice, dtype=np.uint64).copy()
        proof.blindings = blindings
        return proof
    rows = set(challenge_rows(pk.vk, instance, roots, samples))
    rows |= _boundary_rows(circuit.boundary_in, circuit.boundary_out)
    for r in sorted(rows):
        proof.openings.append(RowOpening(
            r,
            [int(circuit.fixed[c, r]) for c in range(N_FIXED)],
            [int(witness.advice[c, r]) for c in range(N_ADVICE)],
            [t.path(r) for t in pk.fixed_trees],
            [t.path(r) for t in trees],
        ))
    return proof


@dataclass
class Verdict:
    accepted: bool
    reason: str = ""
    row: int | None = None
    part: int | None = None
    detail: str = ""

    def __bool__(self) -> bool:
        return self.accepted

    def __str__(self) -> str:
        if self.accepted:
            return "accept"
        where = []
        if self.part is not None:
            where.append(f"part {self.part}")
        if self.row is not None:
            where.append(f"row {self.row}")
        at = f" @ {', '.join(where)}" if where else ""
        return f"reject({self.reason}{at})"


ACCEPT = Verdict(True)


def _reject(reason: str, row: int | None = None, detail: str = "") -> Verdict:
    return Verdict(False, reason, row, None, detail)


def _from_violation(v: Violation) -> Verdict:
    return _reject(v.reason, v.row, v.detail)


def verify(vk: VerificationKey, X, y, proof: Proof, mode: str = "audit",
           samples: int | None = None) -> Verdict:
    """Check ``proof`` against ``vk`` and the public statement ``(X, y)``.

    ``X`` / ``y`` may be ``None`` for the chained ends of a split part.
    """
    if proof.mode != mode:
        return _reject("mode mismatch", detail=f"proof is {proof.mode}")
    if mode == "sampled" and samples is not None and proof.samples != samples:
        return _reject("mode mismatch", detail=f"proof opens {proof.samples} samples")
    if sha256(proof.shape).digest() != vk.shape_digest:
        return _reject("shape mismatch")
    try:
        shape = parse_shape(proof.shape)
    except Exception as exc:  # malformed shape bytes
        return _reject("malformed", detail=str(exc))
    layout = shape["layout"]
    n = vk.rows
    if shape["rows"] != n or layout.size != vk.n_instance or len(proof.instance) != vk.n_instance:
        return _reject("malformed", detail="shape does not match vk")
    inst = [int(v) for v in proof.instance]
    for values, off, count, what in ((X, 0, layout.n_x, "X"), (y, layout.y_offset, layout.n_y, "y")):
        if count:
            if values is None:
                return _reject("instance mismatch", detail=f"{what} required")
            expect = [embed(int(v)) for v in np.ravel(values)]
            if expect != inst[off:off + count]:
                return _reject("instance mismatch", detail=what)
    if mode == "audit":
        return _verify_audit(vk, proof, shape, inst)
    return _verify_sampled(vk, proof, shape, inst)


def _verify_audit(vk, proof, shape, inst) -> Verdict:
    n = vk.rows
    if (proof.fixed is None or proof.advice is None or proof.blindings is None
            or proof.fixed.shape != (N_FIXED, n) or proof.advice.shape != (N_ADVICE, n)):
        return _reject("malformed", detail="audit payload")
    for c in range(N_FIXED):
        if merkle.commit_column(proof.fixed[c]).root != vk.fixed_roots[c]:
            return _reject("commitment mismatch", detail=f"fixed column {c}")
    for c in range(N_ADVICE):
        if merkle.commit_column(proof.advice[c], proof.blindings[c]).root != proof.advice_roots[c]:
            return _reject("commitment mismatch", detail=f"advice column {c}")
    fixed = [col.tolist() for col in proof.fixed]
    adv = [col.tolist() for col in proof.advice]
    tables = shape["tables"]
    for r in range(n):
        f = [col[r] for col in fixed]
        a = (adv[0][r], adv[1][r], adv[2][r])
        if not gate_ok(f, a):
            return _reject("gate", r)
        if not lookup_ok(tables, f, a):
            return _reject("lookup miss", r)
    v = copy_violation(shape["copies"], adv, inst)
    if v is None:
        v = binding_violation(shape["layout"], shape["boundary_in"], shape["boundary_out"], adv, inst)
    return _from_violation(v) if v else ACCEPT


def _verify_sampled(vk, proof, shape, inst) -> Verdict:
    n = vk.rows
    required = set(challenge_rows(vk, proof.instance, proof.advice_roots, proof.samples))
    required |= _boundary_rows(shape["boundary_in"], shape["boundary_out"])
    opened = {op.row: op for op in proof.openings}
    if len(opened) != len(proof.openings) or set(opened) != required:
        return _reject("malformed", detail="opened rows differ from the challenge")
    adv: list[dict] = [{}, {}, {}]
    tables = shape["tables"]
    for r in sorted(opened):
        op = opened[r]
        if not 0 <= r < n or len(op.fixed) != N_FIXED or len(op.advice) != N_ADVICE:
            return _reject("malformed", r)
        for c in range(N_FIXED):
            if not merkle.verify_path(vk.fixed_roots[c], r, merkle.leaf(op.fixed[c]), op.fixed_paths[c]):
                return _reject("commitment mismatch", r, f"fixed column {c}")
        for c in range(N_ADVICE):
            if not merkle.verify_path(proof.advice_roots[c], r, merkle.leaf(op.advice[c]), op.advice_paths[c]):
                return _reject("commitment mismatch", r, f"advice column {c}")
        if not gate_ok(op.fixed, op.advice):
            return _reject("gate", r)
        if not lookup_ok(tables, op.fixed, op.advice):
            return _reject("lookup miss", r)
        for c in range(N_ADVICE):
            adv[c][r] = op.advice[c]
    for ca, ra, cb, rb in shape["copies"].tolist():
        known_a = ca == INST or ra in opened
        known_b = cb == INST or rb in opened
        if known_a and known_b:
            va = inst[ra] if ca == INST else adv[ca][ra]
            vb = inst[rb] if cb == INST else adv[cb][rb]
            if va != vb:
                return _reject("copy link", ra if ca != INST else rb)
    v = binding_violation(shape["layout"], shape["boundary_in"], shape["boundary_out"], adv, inst)
    return _from_violation(v) if v else ACCEPT


def boundary_limbs(proof: Proof, which: str) -> list[int] | None:
    layout = parse_shape(proof.shape)["layout"]
    if which == "in":
        if layout.in_index is None:
            return None
        off = layout.in_offset
    else:
        if layout.out_index is None:
            return None
        off = layout.out_offset
    return [int(v) for v in proof.instance[off:off + 8]]


def verify_chain(vks: Sequence[VerificationKey], proofs: Sequence[Proof], X, y,
                 mode: str = "audit", samples: int | None = None) -> Verdict:
    """Verify consecutive parts and check each part's input commitment against its predecessor's output.

    Parts are numbered from 1 in verdicts.
    """
    M = len(proofs)
    if M == 0 or len(vks) != M:
        return _reject("malformed", detail="need one vk per proof")
    for i, (vk, pf) in enumerate(zip(vks, proofs)):
        v = verify(vk, X if i == 0 else None, y if i == M - 1 else None, pf, mode, samples)
        if not v:
            v.part = i + 1
            return v
    for i in range(1, M):
        prev, cur = boundary_limbs(proofs[i - 1], "out"), boundary_limbs(proofs[i], "in")
        if prev is None or cur is None or prev != cur:
            return Verdict(False, "chain", None, i + 1)
    return ACCEPT
