"""Hierarchical binary-word vocabulary, bag-of-words scoring, keyframe index.

The vocabulary is a k-ary tree of 256-bit centroids trained by recursive
k-medians (per-bit majority vote). Descriptors transform into sparse tf-idf
bag-of-words vectors by descending the tree; L1-normalized vectors compare
with ``score``. A KeyFrameDatabase keeps an inverted word -> keyframes index
for relocalization queries.
"""
from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass, field

import numpy as np

from .features import hamming_matrix

VOCAB_MAGIC = b"VLKV"
VOCAB_VERSION = 1

BowVector = dict[int, float]
FeatureVector = dict[int, list[int]]


class InsufficientData(ValueError):
    pass


class EmptyVocabulary(ValueError):
    pass


class NotNormalized(ValueError):
    pass


class VocabularyFormatError(ValueError):
    pass


@dataclass
class Vocabulary:
    """Tree nodes stored flat in breadth-first order (node 0 = root)."""

    k: int
    L: int
    parents: np.ndarray  # (N,) int64, -1 for the root
    descriptors: np.ndarray  # (N, 32) uint8; root row is all zeros and unused
    is_leaf: np.ndarray  # (N,) bool
    idf: np.ndarray  # (N,) float64; 0 for internal nodes
    fingerprint: bytes  # 32-byte training hash
    children: list[list[int]] = field(default=None, repr=False)
    levels: np.ndarray = field(default=None, repr=False)
    word_of_node: np.ndarray = field(default=None, repr=False)

    def __post_init__(self):
        n = len(self.parents)
        self.children = [[] for _ in range(n)]
        self.levels = np.zeros(n, dtype=np.int64)
        for i in range(1, n):
            p = int(self.parents[i])
            self.children[p].append(i)
            self.levels[i] = self.levels[p] + 1
        # dense word ids over leaves, in breadth-first node order
        self.word_of_node = np.full(n, -1, dtype=np.int64)
        self.word_of_node[self.is_leaf] = np.arange(int(self.is_leaf.sum()))

    @property
    def word_count(self) -> int:
        return int(self.is_leaf.sum())


def _majority_centroid(bits: np.ndarray) -> np.ndarray:
    """Per-bit majority over unpacked descriptor bits; ties go to 0."""
    return (bits.sum(axis=0) * 2 > len(bits)).astype(np.uint8)


def _kmedians(descs: np.ndarray, k: int, rng: np.random.Generator):
    """Cluster rows of ``descs`` into at most k groups.

    Returns (centroids (m, 32) uint8, assignment (n,) int). Deterministic
    given the generator state: seeded init, Hamming assignment with ties to
    the lowest centroid index, majority-vote updates, <= 10 iterations.
    """
    uniq = np.unique(descs, axis=0)
    m = min(k, len(uniq))
    centers = uniq[rng.choice(len(uniq), size=m, replace=False)]
    bits = np.unpackbits(descs, axis=1)
    assign = None
    for _ in range(10):
        dist = hamming_matrix(descs, centers)
        new_assign = np.argmin(dist, axis=1)  # argmin takes the lowest index
        if assign is not None and np.array_equal(new_assign, assign):
            break
        assign = new_assign
        for c in range(m):
            members = bits[assign == c]
            if len(members):
                centers[c] = np.packbits(_majority_centroid(members))
    return centers, assign


def train(descriptors: np.ndarray, k: int, L: int, seed: int) -> Vocabulary:
    """Build a vocabulary by recursive k-medians clustering."""
    descs = np.asarray(descriptors, dtype=np.uint8).reshape(-1, 32)
    if k < 2 or L < 1:
        raise ValueError("need k >= 2 and L >= 1")
    if len(descs) < k:
        raise InsufficientData(f"{len(descs)} descriptors for k={k}")
    rng = np.random.default_rng(seed)

    parents = [-1]
    node_desc = [np.zeros(32, np.uint8)]
    is_leaf = [False]
    hits = [0]  # training descriptors reaching each node (for leaf idf)
    queue = [(0, np.arange(len(descs)), 0)]  # (node, member rows, level)
    while queue:
        node, members, level = queue.pop(0)
        hits[node] = len(members)
        distinct = len(np.unique(descs[members], axis=0))
        if level == L or distinct < 2:
            is_leaf[node] = True
            continue
        centers, assign = _kmedians(descs[members], k, rng)
        groups = [members[assign == c] for c in range(len(centers))]
        nonempty = [(centers[c], g) for c, g in enumerate(groups) if len(g)]
        if len(nonempty) < 2:
            is_leaf[node] = True
            continue
        for center, group in nonempty:
            child = len(parents)
            parents.append(node)
            node_desc.append(center.copy())
            is_leaf.append(False)
            hits.append(0)
            queue.append((child, group, level + 1))

    n_total = len(descs)
    idf = np.zeros(len(parents))
    for i, leaf in enumerate(is_leaf):
        if leaf and hits[i] > 0:
            idf[i] = max(np.log(n_total / hits[i]), 0.0)

    h = hashlib.sha256()
    h.update(struct.pack("<iiq", k, L, seed))
    h.update(descs.tobytes())
    return Vocabulary(
        k=k,
        L=L,
        parents=np.array(parents, dtype=np.int64),
        descriptors=np.stack(node_desc).astype(np.uint8),
        is_leaf=np.array(is_leaf, dtype=bool),
        idf=idf,
        fingerprint=h.digest(),
    )


def _descend(vocab: Vocabulary, desc: np.ndarray, node_level: int) -> tuple[int, int]:
    """Walk one descriptor down the tree.

    Returns (leaf node id, ancestor node id at ``node_level``). Ties in the
    child comparison go to the lowest child index.
    """
    node = 0
    ancestor = 0
    d = desc.reshape(1, 32)
    while not vocab.is_leaf[node]:
        kids = vocab.children[node]
        dists = hamming_matrix(d, vocab.descriptors[kids])[0]
        node = kids[int(np.argmin(dists))]
        if vocab.levels[node] == node_level:
            ancestor = node
    if vocab.levels[node] < node_level:
        ancestor = node  # truncated branch: the leaf stands in for the level
    return node, ancestor


def transform(
    descriptors: np.ndarray, vocab: Vocabulary, node_level: int | None = None
) -> tuple[BowVector, FeatureVector]:
    """Map descriptors to a normalized BowVector and a FeatureVector.

    ``node_level`` defaults to L - 2 (clamped to >= 0), the level whose
    nodes group features for guided matching.
    """
    if vocab is None or len(vocab.parents) == 0:
        raise EmptyVocabulary("vocabulary has no nodes")
    if node_level is None:
        node_level = max(vocab.L - 2, 0)
    descs = np.asarray(descriptors, dtype=np.uint8).reshape(-1, 32)
    bow: BowVector = {}
    features: FeatureVector = {}
    for i, desc in enumerate(descs):
        leaf, ancestor = _descend(vocab, desc, node_level)
        word = int(vocab.word_of_node[leaf])
        w = float(vocab.idf[leaf])
        if w > 0:
            bow[word] = bow.get(word, 0.0) + w
        features.setdefault(ancestor, []).append(i)
    total = sum(bow.values())
    if total > 0:
        bow = {w: v / total for w, v in bow.items()}
    return bow, features


def score(a: BowVector, b: BowVector) -> float:
    """Similarity in [0, 1]: 1 - 0.5 * L1 distance of normalized vectors."""
    for v in (a, b):
        if v and abs(sum(v.values()) - 1.0) > 1e-9:
            raise NotNormalized("bow vector is not L1-normalized")
    words = set(a) | set(b)
    l1 = sum(abs(a.get(w, 0.0) - b.get(w, 0.0)) for w in words)
    return max(0.0, min(1.0, 1.0 - 0.5 * l1))


class KeyFrameDatabase:
    """Inverted index word -> keyframe ids, for relocalization retrieval."""

    def __init__(self):
        self.index: dict[int, set[int]] = {}
        self.bows: dict[int, BowVector] = {}

    def insert(self, kf_id: int, bow: BowVector) -> None:
        self.erase(kf_id)
        self.bows[kf_id] = dict(bow)
        for word in bow:
            self.index.setdefault(word, set()).add(kf_id)

    def erase(self, kf_id: int) -> None:
        bow = self.bows.pop(kf_id, None)
        if bow is None:
            return
        for word in bow:
            entry = self.index.get(word)
            if entry is not None:
                entry.discard(kf_id)
                if not entry:
                    del self.index[word]

    def query(
        self,
        bow: BowVector,
        exclude: set[int] = frozenset(),
        min_common_words: float = 0.8,
    ) -> list[int]:
        """Candidate keyframes ranked by descending bag-of-words score.

        Only candidates sharing at least ``min_common_words`` times the best
        candidate's shared-word count (and at least one word) are kept.
        """
        shared: dict[int, int] = {}
        for word in bow:
            for kf_id in self.index.get(word, ()):
                if kf_id not in exclude:
                    shared[kf_id] = shared.get(kf_id, 0) + 1
        if not shared:
            return []
        min_shared = max(1, min_common_words * max(shared.values()))
        ranked = [
            (score(bow, self.bows[kf_id]), kf_id)
            for kf_id, n in shared.items()
            if n >= min_shared
        ]
        ranked.sort(key=lambda sk: (-sk[0], sk[1]))
        return [kf_id for _, kf_id in ranked]


def save_vocabulary(vocab: Vocabulary, path) -> None:
    """Write the tree: magic, version, k, L, node count, breadth-first nodes
    (parent u32, 32 descriptor bytes, leaf flag u8, idf f64), fingerprint."""
    parts = [VOCAB_MAGIC, struct.pack("<HIII", VOCAB_VERSION, vocab.k, vocab.L,
                                      len(vocab.parents))]
    for i in range(len(vocab.parents)):
        parent = 0xFFFFFFFF if vocab.parents[i] < 0 else int(vocab.parents[i])
        parts.append(struct.pack("<I", parent))
        parts.append(vocab.descriptors[i].tobytes())
        parts.append(struct.pack("<Bd", int(vocab.is_leaf[i]), float(vocab.idf[i])))
    parts.append(vocab.fingerprint)
    with open(path, "wb") as f:
        f.write(b"".join(parts))


def load_vocabulary(path) -> Vocabulary:
    with open(path, "rb") as f:
        blob = f.read()
    if blob[:4] != VOCAB_MAGIC:
        raise VocabularyFormatError("bad magic; not a vocabulary file")
    version, k, L, count = struct.unpack_from("<HIII", blob, 4)
    if version != VOCAB_VERSION:
        raise VocabularyFormatError(f"unsupported vocabulary version {version}")
    off = 4 + 14
    node_size = 4 + 32 + 1 + 8
    if len(blob) != off + count * node_size + 32:
        raise VocabularyFormatError("truncated or oversized vocabulary file")
    parents = np.empty(count, dtype=np.int64)
    descriptors = np.empty((count, 32), dtype=np.uint8)
    is_leaf = np.empty(count, dtype=bool)
    idf = np.empty(count, dtype=np.float64)
    for i in range(count):
        (p,) = struct.unpack_from("<I", blob, off)
        parents[i] = -1 if p == 0xFFFFFFFF else p
        descriptors[i] = np.frombuffer(blob, dtype=np.uint8, count=32, offset=off + 4)
        flag, w = struct.unpack_from("<Bd", blob, off + 36)
        is_leaf[i] = bool(flag)
        idf[i] = w
        off += node_size
    return Vocabulary(
        k=k, L=L, parents=parents, descriptors=descriptors,
        is_leaf=is_leaf, idf=idf, fingerprint=blob[off:off + 32],
    )
