"""256-bit binary descriptors, hierarchical vocabulary trees and bag-of-words.

Descriptors are opaque 32-byte numpy arrays (dtype uint8) compared by Hamming
distance. Cluster centers over binary data use a per-bit majority vote, which
minimizes the total Hamming distance to the members.
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass

import numpy as np

DESCRIPTOR_BYTES = 32
DESCRIPTOR_BITS = 8 * DESCRIPTOR_BYTES

_POPCOUNT = np.array([bin(i).count("1") for i in range(256)], dtype=np.uint8)

_MAGIC = b"BOWVOC\x00\x01"
_VERSION = 1


def as_descriptor(data) -> np.ndarray:
    d = np.asarray(data, dtype=np.uint8).reshape(DESCRIPTOR_BYTES)
    return d


def descriptor_to_hex(d) -> str:
    return bytes(as_descriptor(d)).hex()


def descriptor_from_hex(s: str) -> np.ndarray:
    raw = bytes.fromhex(s.strip())
    if len(raw) != DESCRIPTOR_BYTES:
        raise ValueError(f"descriptor hex must encode {DESCRIPTOR_BYTES} bytes")
    return np.frombuffer(raw, dtype=np.uint8).copy()


def random_descriptors(rng, n) -> np.ndarray:
    return rng.integers(0, 256, size=(n, DESCRIPTOR_BYTES), dtype=np.uint8)


def flip_bits(d, n_bits, rng) -> np.ndarray:
    """Copy of ``d`` with ``n_bits`` distinct random bits flipped."""
    out = as_descriptor(d).copy()
    if n_bits <= 0:
        return out
    bits = rng.choice(DESCRIPTOR_BITS, size=min(n_bits, DESCRIPTOR_BITS), replace=False)
    for b in bits:
        out[b >> 3] ^= np.uint8(1 << (b & 7))
    return out


def hamming(a, b) -> int:
    return int(_POPCOUNT[as_descriptor(a) ^ as_descriptor(b)].sum())


def hamming_to_many(d, descs) -> np.ndarray:
    """Distances from one descriptor to a stack (n, 32) -> (n,)."""
    descs = np.asarray(descs, dtype=np.uint8)
    return _POPCOUNT[descs ^ as_descriptor(d)].sum(axis=-1, dtype=np.int32)

def hamming_matrix(a, b) -> np.ndarray:
    """All pairwise distances: (n, 32) x (m, 32) -> (n, m)."""
    a = np.asarray(a, dtype=np.uint8)
    b = np.asarray(b, dtype=np.uint8)
    return _POPCOUNT[a[:, None, :] ^ b[None, :, :]].sum(axis=-1, dtype=np.int32)


def majority_descriptor(descs) -> np.ndarray:
    """Per-bit majority vote over (n, 32) descriptors; ties set the bit."""
    descs = np.atleast_2d(np.asarray(descs, dtype=np.uint8))
    bits = np.unpackbits(descs, axis=1)
    votes = bits.sum(axis=0, dtype=np.int64)
    out = (2 * votes >= len(descs)).astype(np.uint8)
    return np.packbits(out)


@dataclass(frozen=True)
class NodePath:
    """Root-to-leaf node ids of a quantized descriptor plus its word id."""

    word_id: int
    node_ids: tuple

    def node_at_level(self, level: int) -> int:
        return self.node_ids[min(level, len(self.node_ids) - 1)]


class VocabularyTree:
    """Hierarchical k-way quantizer over binary descriptors with tf-idf weights."""

    def __init__(self, k, depth, centers, children, word_ids, idf):
        self.k = int(k)
        self.depth = int(depth)
        self.centers = np.asarray(centers, dtype=np.uint8)
        self.children = [np.asarray(c, dtype=np.int64) for c in children]
        self.word_ids = np.asarray(word_ids, dtype=np.int64)
        self.idf = np.asarray(idf, dtype=np.float64)
        self._hash = None

    @property
    def n_nodes(self):
        return len(self.centers)

    @property
    def n_words(self):
        return len(self.idf)

    def quantize(self, d) -> NodePath:
        """Greedy nearest-child descent; ties break toward the lower child index."""
        d = as_descriptor(d)
        node = 0
        path = [0]
        while len(self.children[node]) > 0:
            kids = self.children[node]
            dist = hamming_to_many(d, self.centers[kids])
            node = int(kids[int(np.argmin(dist))])
            path.append(node)
        return NodePath(int(self.word_ids[node]), tuple(path))

    def quantize_batch(self, descs):
        """Vectorized descent for (n, 32) descriptors.

        Returns (word_ids (n,), paths (n, depth + 1)); rows of ``paths`` that
        reach a leaf early repeat the leaf id at the deeper levels.
        """
        descs = np.atleast_2d(np.asarray(descs, dtype=np.uint8))
        n = len(descs)
        paths = np.zeros((n, self.depth + 1), dtype=np.int64)
        current = np.zeros(n, dtype=np.int64)
        for level in range(1, self.depth + 1):
            nxt = current.copy()
            for node in np.unique(current):
                kids = self.children[node]
                if len(kids) == 0:
                    continue
                rows = np.nonzero(current == node)[0]
                dist = hamming_matrix(descs[rows], self.centers[kids])
                nxt[rows] = kids[np.argmin(dist, axis=1)]
            paths[:, level] = nxt
            current = nxt
        return self.word_ids[current], paths

    # -- serialization ------------------------------------------------------

    def to_bytes(self) -> bytes:
        parts = [_MAGIC, struct.pack("<II", _VERSION, 0)]
        parts.append(struct.pack("<IIII", self.k, self.depth, self.n_nodes, self.n_words))
        for i in range(self.n_nodes):
            parts.append(self.centers[i].tobytes())
            kids = self.children[i]
            parts.append(struct.pack("<iI", int(self.word_ids[i]), len(kids)))
            parts.append(np.asarray(kids, dtype="<u4").tobytes())
        parts.append(self.idf.astype("<f8").tobytes())
        return b"".join(parts)

    @classmethod
    def from_bytes(cls, blob: bytes) -> "VocabularyTree":
        if blob[:8] != _MAGIC:
            raise ValueError("not a vocabulary file")
        version, _ = struct.unpack_from("<II", blob, 8)
        if version != _VERSION:
            raise ValueError(f"unsupported vocabulary version {version}")
        k, depth, n_nodes, n_words = struct.unpack_from("<IIII", blob, 16)
        off = 32
        centers = np.empty((n_nodes, DESCRIPTOR_BYTES), dtype=np.uint8)
        children = []
        word_ids = np.empty(n_nodes, dtype=np.int64)
        for i in range(n_nodes):
            centers[i] = np.frombuffer(blob, np.uint8, DESCRIPTOR_BYTES, off)
            off += DESCRIPTOR_BYTES
            wid, n_kids = struct.unpack_from("<iI", blob, off)
            off += 8
            kids = np.frombuffer(blob, "<u4", n_kids, off).astype(np.int64)
            off += 4 * n_kids
            word_ids[i] = wid
            children.append(kids)
        idf = np.frombuffer(blob, "<f8", n_words, off).copy()
        return cls(k, depth, centers, children, word_ids, idf)

    def sha256(self) -> str:
        if self._hash is None:
            self._hash = hashlib.sha256(self.to_bytes()).hexdigest()
        return self._hash


def save_vocabulary(tree: VocabularyTree, path):
    with open(path, "wb") as f:
        f.write(tree.to_bytes())


def load_vocabulary(path) -> VocabularyTree:
    with open(path, "rb") as f:
        return VocabularyTree.from_bytes(f.read())


# ---------------------------------------------------------------------------
# Construction
# ---------------------------------------------------------------------------


def _seed_centers(descs, k, rng):
    """k-means++ style seeding on squared Hamming distances."""
    first = int(rng.integers(len(descs)))
    centers = [descs[first]]
    best = hamming_to_many(descs[first], descs).astype(np.float64)
    while len(centers) < k:
        w = best * best
        total = w.sum()
        if total <= 0:
            break
        idx = int(rng.choice(len(descs), p=w / total))
        centers.append(descs[idx])
        best = np.minimum(best, hamming_to_many(descs[idx], descs))
    return np.array(centers, dtype=np.uint8)


def _kmajority(descs, k, rng, max_iters=50):
    """Cluster binary descriptors; returns (centers, assignment).

    Assignment ties break toward the lowest center index; empty clusters are
    dropped, so fewer than k centers may come back. On return the assignment
    is always the exact nearest-center argmin, and at a Lloyd fixed point the
    centers are exact majorities of their final members.
    """
    centers = _seed_centers(descs, k, rng)
    assign = np.argmin(hamming_matrix(descs, centers), axis=1)
    for _ in range(max_iters):
        occupied = np.unique(assign)
        remap = -np.ones(len(centers), dtype=np.int64)
        remap[occupied] = np.arange(len(occupied))
        centers = np.array(
            [majority_descriptor(descs[assign == c]) for c in occupied], dtype=np.uint8
        )
        prev = remap[assign]
        assign = np.argmin(hamming_matrix(descs, centers), axis=1)
        if np.array_equal(assign, prev) or len(centers) < 2:
            break
    return centers, assign


def build_vocabulary(images, k, depth, seed) -> VocabularyTree:
    """Hierarchically cluster training descriptors into a word tree.

    ``images`` is a sequence of (n_i, 32) descriptor arrays, one per training
    image; per-image word occupancy drives the idf weights (natural log).
    Deterministic for a fixed seed.
    """
    if k < 2 or depth < 1:
        raise ValueError("need k >= 2 and depth >= 1")
    images = [np.atleast_2d(np.asarray(im, dtype=np.uint8)) for im in images]
    training = np.vstack(images) if images else np.empty((0, DESCRIPTOR_BYTES), np.uint8)
    if len(training) < k:
        raise ValueError("fewer training descriptors than branches")
    rng = np.random.default_rng(seed)

    centers = [majority_descriptor(training)]
    children = [None]
    word_ids = [-1]

    def split(node, member_idx, level):
        descs = training[member_idx]
        distinct = len(np.unique(descs, axis=0))
        if level >= depth or len(member_idx) < k or distinct < 2:
            children[node] = np.empty(0, dtype=np.int64)
            centers[node] = majority_descriptor(descs)
            return
        c, assign = _kmajority(descs, min(k, distinct), rng)
        if len(c) < 2:
            children[node] = np.empty(0, dtype=np.int64)
            centers[node] = majority_descriptor(descs)
            return
        kid_ids = []
        for ci in range(len(c)):
            kid = len(centers)
            centers.append(c[ci])
            children.append(None)
            word_ids.append(-1)
            kid_ids.append(kid)
            split(kid, member_idx[assign == ci], level + 1)
        children[node] = np.array(kid_ids, dtype=np.int64)

    split(0, np.arange(len(training)), 0)

    # leaves become words in node-id (preorder) sequence
    n_words = 0
    for i, kids in enumerate(children):
        if len(kids) == 0:
            word_ids[i] = n_words
            n_words += 1

    tree = VocabularyTree(
        k, depth, np.array(centers), children, np.array(word_ids), np.zeros(n_words)
    )

    counts = np.zeros(n_words, dtype=np.int64)
    for im in images:
        words, _ = tree.quantize_batch(im)
        counts[np.unique(words)] += 1
    with np.errstate(divide="ignore"):
        idf = np.where(counts > 0, np.log(len(images) / np.maximum(counts, 1)), 0.0)
    tree.idf = idf
    return tree


def to_bow(tree: VocabularyTree, descs) -> dict:
    """tf-idf weighted, L1-normalized bag of words; zero-idf words are dropped."""
    descs = np.asarray(descs, dtype=np.uint8)
    if descs.size == 0:
        return {}
    words, _ = tree.quantize_batch(descs)
    uniq, counts = np.unique(words, return_counts=True)
    weights = counts * tree.idf[uniq]
    keep = weights > 0
    uniq, weights = uniq[keep], weights[keep]
    total = weights.sum()
    if total <= 0:
        return {}
    return {int(w): float(v / total) for w, v in zip(uniq, weights)}
