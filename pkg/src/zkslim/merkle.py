"""SHA-256 Merkle trees over field-element columns."""

from __future__ import annotations

from hashlib import sha256

import numpy as np

EMPTY = sha256(b"\x02").digest()


def leaf(value: int) -> bytes:
    return sha256(b"\x00" + int(value).to_bytes(8, "little")).digest()


def _node(a: bytes, b: bytes) -> bytes:
    return sha256(b"\x01" + a + b).digest()


class MerkleTree:
    def __init__(self, leaves: list[bytes]):
        size = 1
        while size < max(len(leaves), 1):
            size *= 2
        self.n_leaves = len(leaves)
        self.size = size
        tree = [b""] * size + list(leaves) + [EMPTY] * (size - len(leaves))
        for i in range(size - 1, 0, -1):
            tree[i] = _node(tree[2 * i], tree[2 * i + 1])
        self.tree = tree

    @property
    def root(self) -> bytes:
        return self.tree[1]

    def path(self, index: int) -> list[bytes]:
        pos = index + self.size
        out = []
        while pos > 1:
            out.append(self.tree[pos ^ 1])
            pos //= 2
        return out


def verify_path(root: bytes, index: int, leaf_hash: bytes, path: list[bytes]) -> bool:
    h = leaf_hash
    for sib in path:
        h = _node(sib, h) if index & 1 else _node(h, sib)
        index >>= 1
    return h == root


def column_leaves(values: np.ndarray) -> list[bytes]:
    raw = np.ascontiguousarray(values, dtype="<u8").tobytes()
    return [sha256(b"\x00" + raw[i:i + 8]).digest() for i in range(0, len(raw), 8)]


def commit_column(values: np.ndarray, blinding: bytes | None = None) -> MerkleTree:
    """Commit a column; a blinding leaf (advice columns) is appended after the cells."""
    leaves = column_leaves(values)
    if blinding is not None:
        leaves.append(sha256(b"\x03" + blinding).digest())
    return MerkleTree(leaves)


def blinding_leaf(blinding: bytes) -> bytes:
    return sha256(b"\x03" + blinding).digest()


def boundary_commitment(values, index: int) -> bytes:
    """Deterministic commitment to a boundary vector shared by adjacent circuit parts."""
    rand = sha256(b"zkslim-boundary" + int(index).to_bytes(4, "little")).digest()
    return commit_column(np.asarray(values, dtype=np.uint64), rand).root


def digest_limbs(digest: bytes) -> list[int]:
    """Split a 32-byte digest into eight u32 limbs (each a valid field element)."""
    return [int.from_bytes(digest[i:i + 4], "little") for i in range(0, 32, 4)]
