"""Tree commitments: completeness, soundness sampling, zero-subtree algebra.

The zero-hash chain and two-leaf roots are recomputed here with hashlib
directly (independent of the module under test) before being compared.
"""

import hashlib
import random

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from opml import merkle
from opml.hashing import TREE_DEPTH, ZERO_LEAF, get_scheme

SCHEME = get_scheme("sha256")


def h(data: bytes) -> bytes:
    return hashlib.sha256(data).digest()


def oracle_zero_chain() -> list[bytes]:
    """Independent recomputation: Z0 = H(0x00 || 32 zero bytes), Zk+1 = H(Zk || Zk)."""
    chain = [h(b"\x00" + b"\x00" * 32)]
    for _ in range(TREE_DEPTH):
        chain.append(h(chain[-1] + chain[-1]))
    return chain


def oracle_single_leaf_root(index: int, leaf: bytes) -> bytes:
    """Root of a tree holding exactly one leaf, folded by hand."""
    chain = oracle_zero_chain()
    acc = h(b"\x00" + leaf)
    for level in range(TREE_DEPTH):
        if (index >> level) & 1:
            acc = h(chain[level] + acc)
        else:
            acc = h(acc + chain[level])
    return acc


def rand_leaf(rng: random.Random) -> bytes:
    return rng.randbytes(32)


def test_empty_root_matches_zero_chain():
    assert merkle.MemTree(SCHEME).root() == oracle_zero_chain()[TREE_DEPTH]
    assert SCHEME.zero_hashes[TREE_DEPTH] == oracle_zero_chain()[TREE_DEPTH]


def test_single_leaf_roots_match_oracle():
    rng = random.Random(1)
    for index in [0, 1, 7, 2**20, merkle.NUM_LEAVES - 1]:
        leaf = rand_leaf(rng)
        tree = merkle.MemTree(SCHEME).update_leaf(index, leaf)
        assert tree.root() == oracle_single_leaf_root(index, leaf)


def test_two_single_leaf_writes_differ():
    rng = random.Random(2)
    a = merkle.MemTree(SCHEME).update_leaf(5, rand_leaf(rng))
    b = merkle.MemTree(SCHEME).update_leaf(5, rand_leaf(rng))
    assert a.root() != b.root()
    # and both match the hand-folded values
    assert a.root() == oracle_single_leaf_root(5, a.get_leaf(5))
    assert b.root() == oracle_single_leaf_root(5, b.get_leaf(5))


@given(st.lists(st.tuples(st.integers(0, 1000), st.binary(min_size=32, max_size=32)), max_size=20))
@settings(max_examples=50, deadline=None)
def test_root_independent_of_insertion_order(writes):
    tree_fwd = merkle.MemTree(SCHEME)
    for idx, leaf in writes:
        tree_fwd = tree_fwd.update_leaf(idx, leaf)
    tree_rev = merkle.MemTree(SCHEME)
    final = {}
    for idx, leaf in writes:
        final[idx] = leaf
    for idx, leaf in sorted(final.items(), reverse=True):
        tree_rev = tree_rev.update_leaf(idx, leaf)
    # forward insertion keeps stale values overwritten; rebuild to compare
    tree_fwd2 = merkle.MemTree(SCHEME)
    for idx, leaf in final.items():
        tree_fwd2 = tree_fwd2.update_leaf(idx, leaf)
    assert tree_fwd2.root() == tree_rev.root()
    assert tree_fwd.root() == tree_fwd2.root()


def test_update_is_persistent():
    rng = random.Random(3)
    base = merkle.MemTree(SCHEME).update_leaf(9, rand_leaf(rng))
    root_before = base.root()
    changed = base.update_leaf(9, rand_leaf(rng))
    assert base.root() == root_before
    assert changed.root() != root_before


def test_write_back_restores_root():
    rng = random.Random(4)
    leaf = rand_leaf(rng)
    t0 = merkle.MemTree(SCHEME).update_leaf(42, leaf)
    r0 = t0.root()
    t1 = t0.update_leaf(42, rand_leaf(rng))
    t2 = t1.update_leaf(42, leaf)
    assert t2.root() == r0


def test_write_zero_to_absent_leaf_keeps_root():
    t = merkle.MemTree(SCHEME).update_leaf(3, b"\x01" * 32)
    r = t.root()
    assert t.update_leaf(100, ZERO_LEAF).root() == r


def test_out_of_range_index_rejected():
    with pytest.raises(merkle.RangeError):
        merkle.MemTree(SCHEME).update_leaf(merkle.NUM_LEAVES, b"\x01" * 32)


def test_prove_verify_roundtrip_and_size():
    rng = random.Random(5)
    tree = merkle.MemTree(SCHEME)
    for _ in range(30):
        tree = tree.update_leaf(rng.randrange(0, 5000), rand_leaf(rng))
    for _ in range(20):
        idx = rng.randrange(0, 5000)
        proof = tree.prove(idx)
        assert len(proof.siblings) == TREE_DEPTH
        assert len(proof.to_bytes()) == 6 + TREE_DEPTH * 32
        claimed = SCHEME.leaf_hash(tree.get_leaf(idx))
        assert merkle.verify(tree.root(), claimed, proof, SCHEME)


def test_single_bit_mutations_fail_verification():
    rng = random.Random(6)
    tree = merkle.MemTree(SCHEME)
    for _ in range(10):
        tree = tree.update_leaf(rng.randrange(0, 4096), rand_leaf(rng))
    idx = 1337
    tree = tree.update_leaf(idx, rand_leaf(rng))
    root = tree.root()
    proof = tree.prove(idx)
    claimed = SCHEME.leaf_hash(tree.get_leaf(idx))
    assert merkle.verify(root, claimed, proof, SCHEME)
    for _ in range(1000):
        what = rng.randrange(3)
        if what == 0:
            mutated = bytearray(claimed)
            mutated[rng.randrange(32)] ^= 1 << rng.randrange(8)
            assert not merkle.verify(root, bytes(mutated), proof, SCHEME)
        elif what == 1:
            sibs = [bytearray(s) for s in proof.siblings]
            sibs[rng.randrange(len(sibs))][rng.randrange(32)] ^= 1 << rng.randrange(8)
            bad = merkle.MerkleProof(proof.leaf_index, proof.subtree_level, [bytes(s) for s in sibs])
            assert not merkle.verify(root, claimed, bad, SCHEME)
        else:
            bad_index = proof.leaf_index ^ (1 << rng.randrange(TREE_DEPTH))
            bad = merkle.MerkleProof(bad_index, proof.subtree_level, proof.siblings)
            assert not merkle.verify(root, claimed, bad, SCHEME)


def test_whole_tree_proof_degenerates_to_equality():
    tree = merkle.MemTree(SCHEME).update_leaf(0, b"\x07" * 32)
    proof = tree.prove(0, TREE_DEPTH)
    assert proof.siblings == []
    assert merkle.verify(tree.root(), tree.root(), proof, SCHEME)
    assert not merkle.verify(tree.root(), b"\x00" * 32, proof, SCHEME)


def test_subtree_roots():
    rng = random.Random(7)
    tree = merkle.MemTree(SCHEME)
    assert tree.subtree_root(0, 5) == SCHEME.zero_hashes[5]
    leaf = rand_leaf(rng)
    tree = tree.update_leaf(0, leaf)
    assert tree.subtree_root(0, 0) == SCHEME.leaf_hash(leaf)
    assert tree.subtree_root(0, TREE_DEPTH) == tree.root()
    # region root changes iff the region content changes
    region_before = tree.subtree_root(64 * 32, 4)
    tree2 = tree.update_leaf(64, rand_leaf(rng))
    assert tree2.subtree_root(64 * 32, 4) != region_before
    assert tree2.subtree_root(0, 0) == SCHEME.leaf_hash(leaf)


def test_subtree_alignment_errors():
    tree = merkle.MemTree(SCHEME)
    with pytest.raises(merkle.AlignmentError):
        tree.subtree_root(33, 0)
    with pytest.raises(merkle.AlignmentError):
        tree.subtree_root(32, 3)
    with pytest.raises(merkle.AlignmentError):
        tree.prove(1, 1)


def test_subtree_proof_roundtrip():
    rng = random.Random(8)
    tree = merkle.MemTree(SCHEME)
    for i in range(16):
        tree = tree.update_leaf(512 + i, rand_leaf(rng))
    sub = tree.subtree_root(512 * 32, 4)
    proof = tree.prove(512, 4)
    assert len(proof.siblings) == TREE_DEPTH - 4
    assert merkle.verify(tree.root(), sub, proof, SCHEME)


def test_region_root_matches_tree_subtree():
    rng = random.Random(9)
    data = rng.randbytes(100)
    level = 4
    tree = merkle.MemTree(SCHEME)
    base = 1024 * 32  # leaf 1024, aligned to 2**4
    for i in range(0, len(data), 32):
        chunk = data[i : i + 32]
        chunk += b"\x00" * (32 - len(chunk))
        tree = tree.update_leaf((base + i) // 32, chunk)
    assert merkle.region_root(data, level, SCHEME) == tree.subtree_root(base, level)
    assert merkle.region_root(b"", level, SCHEME) == SCHEME.zero_hashes[level]


def test_root_from_regions_reconstructs():
    rng = random.Random(10)
    tree = merkle.MemTree(SCHEME)
    data_a = rng.randbytes(70)
    data_b = rng.randbytes(40)
    for i in range(0, len(data_a), 32):
        chunk = (data_a[i : i + 32] + b"\x00" * 32)[:32]
        tree = tree.update_leaf(i // 32, chunk)
    base_b = 256
    for i in range(0, len(data_b), 32):
        chunk = (data_b[i : i + 32] + b"\x00" * 32)[:32]
        tree = tree.update_leaf(base_b + i // 32, chunk)
    rebuilt = merkle.root_from_regions(
        [
            (0, 3, tree.subtree_root(0, 3)),
            (base_b, 3, tree.subtree_root(base_b * 32, 3)),
        ],
        SCHEME,
    )
    assert rebuilt == tree.root()
    assert merkle.root_from_regions([], SCHEME) == merkle.MemTree(SCHEME).root()


def test_proof_serialization_roundtrip():
    rng = random.Random(11)
    tree = merkle.MemTree(SCHEME).update_leaf(77, rand_leaf(rng))
    proof = tree.prove(77)
    blob = proof.to_bytes()
    back, off = merkle.MerkleProof.from_bytes(blob)
    assert off == len(blob)
    assert back == proof
