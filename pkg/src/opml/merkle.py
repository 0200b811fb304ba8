"""Fixed-depth sparse Merkle tree over the VM's 32-bit address space.

The tree has exactly 27 levels above the leaf hashes; each leaf is a 32-byte
memory word group, so the leaves cover addresses 0 .. 2**32 - 1. Absent
leaves read as all zeros, and all-zero subtrees collapse to memoized digests,
so a tree touching a few pages stays small.

Updates are persistent: `update_leaf` rebuilds the 27-node path and shares
everything else, so any snapshot can be kept and hashed in O(1) while a
successor version evolves. That is what makes per-step state roots cheap.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

from .hashing import HashScheme, TREE_DEPTH, ZERO_LEAF, active_scheme

NUM_LEAVES = 1 << TREE_DEPTH


class RangeError(ValueError):
    """Leaf index outside the fixed address space."""


class AlignmentError(ValueError):
    """Index or address not aligned to the requested subtree granularity."""


class _Node:
    """Internal node; children are _Node, bytes (a leaf value) or None (zero)."""

    __slots__ = ("digest", "left", "right")

    def __init__(self, digest: bytes, left, right):
        self.digest = digest
        self.left = left
        self.right = right


def _child_digest(child, level: int, scheme: HashScheme) -> bytes:
    if child is None:
        return scheme.zero_hashes[level]
    if level == 0:
        return scheme.leaf_hash(child)
    return child.digest


class MemTree:
    """Persistent sparse Merkle tree with a fixed depth of 27 levels."""

    __slots__ = ("scheme", "_root")

    def __init__(self, scheme: HashScheme | None = None, _root=None):
        self.scheme = scheme or active_scheme()
        self._root = _root

    def root(self) -> bytes:
        return _child_digest(self._root, TREE_DEPTH, self.scheme)

    def get_leaf(self, index: int) -> bytes:
        if not 0 <= index < NUM_LEAVES:
            raise RangeError(f"leaf index {index} out of range")
        node = self._root
        for level in range(TREE_DEPTH - 1, -1, -1):
            if node is None:
                return ZERO_LEAF
            node = node.right if (index >> level) & 1 else node.left
        return ZERO_LEAF if node is None else node

    def update_leaf(self, index: int, leaf: bytes) -> "MemTree":
        """Return a new tree with `leaf` written at `index`; self is unchanged."""
        if not 0 <= index < NUM_LEAVES:
            raise RangeError(f"leaf index {index} out of range")
        if len(leaf) != 32:
            raise ValueError(f"leaf must be 32 bytes, got {len(leaf)}")
        new_root = self._set(self._root, TREE_DEPTH, index, leaf)
        return MemTree(self.scheme, new_root)

    def _set(self, node, level: int, index: int, leaf: bytes):
        if level == 0:
            return None if leaf == ZERO_LEAF else leaf
        left = node.left if node is not None else None
        right = node.right if node is not None else None
        if (index >> (level - 1)) & 1:
            right = self._set(right, level - 1, index, leaf)
        else:
            left = self._set(left, level - 1, index, leaf)
        if left is None and right is None:
            return None
        digest = self.scheme.node_hash(
            _child_digest(left, level - 1, self.scheme),
            _child_digest(right, level - 1, self.scheme),
        )
        return _Node(digest, left, right)

    def prove(self, index: int, subtree_level: int = 0) -> "MerkleProof":
        """Membership proof for the subtree of 2**subtree_level leaves at `index`."""
        self._check_aligned(index, subtree_level)
        siblings: list[bytes] = []
        node = self._root
        # Walk down from the top, recording the sibling at each branch.
        for level in range(TREE_DEPTH - 1, subtree_level - 1, -1):
            left = node.left if node is not None else None
            right = node.right if node is not None else None
            if (index >> level) & 1:
                siblings.append(_child_digest(left, level, self.scheme))
                node = right
            else:
                siblings.append(_child_digest(right, level, self.scheme))
                node = left
        siblings.reverse()
        return MerkleProof(leaf_index=index, subtree_level=subtree_level, siblings=siblings)

    def subtree_root(self, region_base: int, region_level: int) -> bytes:
        """Digest of the internal node covering 32 * 2**region_level bytes at region_base."""
        if region_base % 32 != 0:
            raise AlignmentError(f"region base {region_base:#x} not leaf aligned")
        index = region_base // 32
        self._check_aligned(index, region_level)
        node = self._root
        for level in range(TREE_DEPTH - 1, region_level - 1, -1):
            if node is None:
                break
            node = node.right if (index >> level) & 1 else node.left
        return _child_digest(node, region_level, self.scheme)

    @staticmethod
    def _check_aligned(index: int, subtree_level: int) -> None:
        if not 0 <= subtree_level <= TREE_DEPTH:
            raise RangeError(f"subtree level {subtree_level} out of range")
        if not 0 <= index < NUM_LEAVES:
            raise RangeError(f"leaf index {index} out of range")
        if index & ((1 << subtree_level) - 1):
            raise AlignmentError(
                f"index {index} not aligned to subtree level {subtree_level}"
            )

    def leaves(self) -> dict[int, bytes]:
        """All explicitly stored (nonzero) leaves; mainly for inspection."""
        out: dict[int, bytes] = {}
        stack = [(self._root, TREE_DEPTH, 0)]
        while stack:
            node, level, index = stack.pop()
            if node is None:
                continue
            if level == 0:
                out[index] = node
                continue
            stack.append((node.left, level - 1, index))
            stack.append((node.right, level - 1, index | (1 << (level - 1))))
        return out


@dataclass(frozen=True)
class MerkleProof:
    leaf_index: int
    subtree_level: int
    siblings: list[bytes]

    def to_bytes(self) -> bytes:
        """u32le leaf_index, u8 subtree_level, u8 sibling_count, siblings."""
        head = struct.pack("<IBB", self.leaf_index, self.subtree_level, len(self.siblings))
        return head + b"".join(self.siblings)

    @classmethod
    def from_bytes(cls, data: bytes, offset: int = 0) -> tuple["MerkleProof", int]:
        if len(data) - offset < 6:
            raise ValueError("truncated proof header")
        index, level, count = struct.unpack_from("<IBB", data, offset)
        offset += 6
        if len(data) - offset < 32 * count:
            raise ValueError("truncated proof siblings")
        siblings = [bytes(data[offset + 32 * i : offset + 32 * (i + 1)]) for i in range(count)]
        return cls(index, level, siblings), offset + 32 * count


def verify(root: bytes, claimed: bytes, proof: MerkleProof, scheme: HashScheme | None = None) -> bool:
    """Check that `claimed` is the subtree digest at the proof's position.

    Pure function of its arguments: the proof carries every sibling, so no
    tree or zero-hash table is consulted.
    """
    scheme = scheme or active_scheme()
    if len(proof.siblings) != TREE_DEPTH - proof.subtree_level:
        return False
    if not 0 <= proof.leaf_index < NUM_LEAVES:
        return False
    if proof.leaf_index & ((1 << proof.subtree_level) - 1):
        return False
    acc = claimed
    index = proof.leaf_index >> proof.subtree_level
    for sibling in proof.siblings:
        if len(sibling) != 32:
            return False
        if index & 1:
            acc = scheme.node_hash(sibling, acc)
        else:
            acc = scheme.node_hash(acc, sibling)
        index >>= 1
    return acc == root


def recompute_root(new_leaf_digest: bytes, proof: MerkleProof, scheme: HashScheme | None = None) -> bytes:
    """Root that results from replacing the proven position with a new digest."""
    scheme = scheme or active_scheme()
    acc = new_leaf_digest
    index = proof.leaf_index >> proof.subtree_level
    for sibling in proof.siblings:
        if index & 1:
            acc = scheme.node_hash(sibling, acc)
        else:
            acc = scheme.node_hash(acc, sibling)
        index >>= 1
    return acc


def region_root(data: bytes, region_level: int, scheme: HashScheme | None = None) -> bytes:
    """Digest of a 2**region_level-leaf region holding `data` left-aligned, zero padded.

    Equivalent to writing `data` from the region base into an empty tree and
    asking for that region's subtree root, but computed directly.
    """
    scheme = scheme or active_scheme()
    if len(data) > 32 << region_level:
        raise RangeError(f"{len(data)} bytes exceed region of level {region_level}")
    if not data:
        return scheme.zero_hashes[region_level]
    padded = data + b"\x00" * (-len(data) % 32)
    level_digests = [
        scheme.leaf_hash(padded[i : i + 32]) for i in range(0, len(padded), 32)
    ]
    for level in range(region_level):
        if len(level_digests) == 1 and level_digests[0] == scheme.zero_hashes[level]:
            level_digests = [scheme.zero_hashes[level + 1]]
            continue
        if len(level_digests) % 2:
            level_digests.append(scheme.zero_hashes[level])
        level_digests = [
            scheme.node_hash(level_digests[i], level_digests[i + 1])
            for i in range(0, len(level_digests), 2)
        ]
    return level_digests[0]


def root_from_regions(
    regions: list[tuple[int, int, bytes]], scheme: HashScheme | None = None
) -> bytes:
    """Full-tree root given (leaf_index, level, digest) subtree anchors, rest zero.

    The anchors must be disjoint and aligned. This is the reconstruction the
    arbitration side runs when it rebuilds an initial VM memory root from the
    public program/model digests plus the disputed operand field.
    """
    scheme = scheme or active_scheme()
    pending: dict[tuple[int, int], bytes] = {}
    for leaf_index, level, digest in regions:
        MemTree._check_aligned(leaf_index, level)
        key = (level, leaf_index >> level)
        if key in pending:
            raise ValueError(f"duplicate region anchor at level {level}")
        pending[key] = digest
    for level in range(TREE_DEPTH):
        indices = sorted(idx for (lvl, idx) in pending if lvl == level)
        for idx in indices:
            key = (level, idx)
            if key not in pending:
                continue  # already merged with its pair
            digest = pending.pop(key)
            partner = pending.pop((level, idx ^ 1), None)
            if partner is None:
                partner = scheme.zero_hashes[level]
            parent_key = (level + 1, idx >> 1)
            if parent_key in pending:
                raise ValueError("overlapping region anchors")
            left, right = (digest, partner) if idx % 2 == 0 else (partner, digest)
            pending[parent_key] = scheme.node_hash(left, right)
    [(_, root)] = pending.items() or [((TREE_DEPTH, 0), scheme.zero_hashes[TREE_DEPTH])]
    return root
