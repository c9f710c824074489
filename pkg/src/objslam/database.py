"""Object model store with inverted and direct indices and KL-divergence
candidate scoring.

An object model is a 3D point cloud (object frame, meters) where each point
carries one or more binary descriptors. Descriptors of a point that quantize
to the same visual word are collapsed into a per-bit majority representative,
and the surviving representatives define the model's bag-of-words signature.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import DuplicateModelId, EmptyDatabase, UnknownMetric
from .geometry import format_float
from .vocab import (
    DESCRIPTOR_BYTES,
    VocabularyTree,
    descriptor_from_hex,
    descriptor_to_hex,
    hamming_matrix,
    majority_descriptor,
    to_bow,
)

DEFAULT_EPSILON = 1e-6
DEFAULT_MATCH_DISTANCE = 50
DEFAULT_DIRECT_LEVEL = 1

_DB_MAGIC = b"OBJDB\x00\x01\x00"


@dataclass
class ObjectModel:
    """Point cloud with word-averaged descriptors and a bag-of-words signature."""

    model_id: int
    points: np.ndarray  # (P, 3) object frame, meters
    descriptors: np.ndarray  # (D, 32) representatives
    desc_point: np.ndarray  # (D,) owning point index
    desc_word: np.ndarray  # (D,) visual word
    desc_paths: np.ndarray  # (D, depth + 1) tree node ids, root first
    bow: dict
    centroid: np.ndarray = field(init=False)
    radius: float = field(init=False)

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64).reshape(-1, 3)
        self.centroid = self.points.mean(axis=0)
        self.radius = float(np.linalg.norm(self.points - self.centroid, axis=1).max())

    @property
    def n_points(self):
        return len(self.points)


def build_object_model(model_id, points, point_descriptors, tree: VocabularyTree) -> ObjectModel:
    """Assemble a model from raw per-point descriptor sets.

    ``point_descriptors[i]`` is the list of descriptors observed for point i;
    every point needs at least one.
    """
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    if len(point_descriptors) != len(points):
        raise ValueError("one descriptor set per point required")
    if any(len(ds) == 0 for ds in point_descriptors):
        raise ValueError("every model point needs at least one descriptor")

    flat = []
    owners = []
    for i, ds in enumerate(point_descriptors):
        for d in ds:
            flat.append(np.asarray(d, dtype=np.uint8))
            owners.append(i)
    flat = np.array(flat, dtype=np.uint8)
    owners = np.array(owners, dtype=np.int64)
    words, paths = tree.quantize_batch(flat)

    reps, rep_owner = [], []
    order = np.lexsort((words, owners))
    start = 0
    while start < len(order):
        end = start
        key = (owners[order[start]], words[order[start]])
        while end < len(order) and (owners[order[end]], words[order[end]]) == key:
            end += 1
        group = order[start:end]
        rep = majority_descriptor(flat[group]) if len(group) > 1 else flat[group[0]]
        reps.append(rep)
        rep_owner.append(key[0])
        start = end
    reps = np.array(reps, dtype=np.uint8)
    # word and node path are re-derived from the representative itself so the
    # index filters stay consistent with what queries will see
    rep_words, rep_paths = tree.quantize_batch(reps)

    bow = to_bow(tree, reps)
    return ObjectModel(
        model_id=int(model_id),
        points=points,
        descriptors=reps,
        desc_point=np.array(rep_owner, dtype=np.int64),
        desc_word=rep_words.astype(np.int64),
        desc_paths=rep_paths.astype(np.int64),
        bow=bow,
    )


# ---------------------------------------------------------------------------
# Scores
# ---------------------------------------------------------------------------


def kl_score(v: dict, w: dict, epsilon=DEFAULT_EPSILON) -> float:
    """Shared-word Kullback-Leibler score; lower means more similar.

    Equals the full KL divergence of v against w (zeros of w replaced by
    epsilon) minus a term that depends on v only, so rankings agree while the
    computation touches only the common words.
    """
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")
    log_eps = math.log(epsilon)
    score = 0.0
    for word, vi in v.items():
        wi = w.get(word)
        if wi is not None:
            score += vi * (log_eps - math.log(wi))
    return score


def full_kl(v: dict, w: dict, epsilon=DEFAULT_EPSILON) -> float:
    """Dense KL(v, w) with zero entries of w substituted by epsilon."""
    total = 0.0
    for word, vi in v.items():
        wi = w.get(word, 0.0)
        total += vi * math.log(vi / (wi if wi > 0 else epsilon))
    return total


def alt_score(v: dict, w: dict, metric: str) -> float:
    """Alternative dissimilarities for retrieval comparisons (lower = closer)."""
    words = set(v) | set(w)
    if metric == "bhattacharyya":
        return 1.0 - sum(math.sqrt(v.get(i, 0.0) * w.get(i, 0.0)) for i in words)
    if metric == "chi2":
        total = 0.0
        for i in words:
            a, b = v.get(i, 0.0), w.get(i, 0.0)
            if a + b > 0:
                total += (a - b) ** 2 / (a + b)
        return total
    if metric == "l1":
        return sum(abs(v.get(i, 0.0) - w.get(i, 0.0)) for i in words)
    if metric == "l2":
        return math.sqrt(sum((v.get(i, 0.0) - w.get(i, 0.0)) ** 2 for i in words))
    raise UnknownMetric(metric)


@dataclass(frozen=True)
class Candidate:
    model_id: int
    score: float
    region_id: int = -1


@dataclass(frozen=True)
class Correspondence:
    """A putative 2D-3D match produced by the direct index."""

    feature_index: int
    pixel: np.ndarray  # (2,)
    point_index: int
    distance: int


class ObjectDatabase:
    """Models indexed by an inverted (word -> models) and a direct
    (model -> tree node -> descriptors) index."""

    def __init__(self, tree: VocabularyTree, direct_level=DEFAULT_DIRECT_LEVEL,
                 epsilon=DEFAULT_EPSILON):
        self.tree = tree
        self.direct_level = int(direct_level)
        self.epsilon = float(epsilon)
        self.models: dict[int, ObjectModel] = {}
        self.inverted: dict[int, list] = {}
        self.direct: dict[int, dict] = {}

    def __len__(self):
        return len(self.models)

    def add_model(self, model: ObjectModel) -> int:
        if model.model_id in self.models:
            raise DuplicateModelId(str(model.model_id))
        self.models[model.model_id] = model
        for word, weight in model.bow.items():
            self.inverted.setdefault(word, []).append((model.model_id, weight))
        # postings sorted by model id make scoring independent of insert order
        for word in model.bow:
            self.inverted[word].sort(key=lambda mw: mw[0])
        level = min(self.direct_level, model.desc_paths.shape[1] - 1)
        nodes = model.desc_paths[:, level]
        self.direct[model.model_id] = {
            int(node): np.nonzero(nodes == node)[0] for node in np.unique(nodes)
        }
        return model.model_id

    def query(self, bow: dict, top_n=10) -> list:
        """Models ranked by ascending KL score; ties break on lower model id.
        Models sharing no word with the query are excluded."""
        if not self.models:
            raise EmptyDatabase("no models stored")
        if top_n < 1:
            raise ValueError("top_n must be >= 1")
        log_eps = math.log(self.epsilon)
        scores: dict[int, float] = {}
        for word, vi in bow.items():
            for model_id, wi in self.inverted.get(word, ()):
                scores[model_id] = scores.get(model_id, 0.0) + vi * (log_eps - math.log(wi))
        ranked = sorted(scores.items(), key=lambda kv: (kv[1], kv[0]))
        return [Candidate(mid, s) for mid, s in ranked[:top_n]]

    def correspondences(self, pixels, descriptors, paths, model_id,
                        max_distance=DEFAULT_MATCH_DISTANCE, feature_indices=None):
        """Mutual-nearest 2D-3D matches restricted to shared direct-index nodes.

        At most one correspondence per query feature and per model point;
        matches at Hamming distance >= max_distance are rejected.
        """
        model = self.models[model_id]
        pixels = np.asarray(pixels, dtype=np.float64).reshape(-1, 2)
        descriptors = np.asarray(descriptors, dtype=np.uint8).reshape(-1, DESCRIPTOR_BYTES)
        paths = np.asarray(paths)
        if feature_indices is None:
            feature_indices = np.arange(len(pixels))
        level = min(self.direct_level, paths.shape[1] - 1)
        feat_nodes = paths[:, level]

        best_for_point: dict[int, tuple] = {}
        direct = self.direct[model_id]
        for node in np.unique(feat_nodes):
            desc_rows = direct.get(int(node))
            if desc_rows is None:
                continue
            rows = np.nonzero(feat_nodes == node)[0]
            dist = hamming_matrix(descriptors[rows], model.descriptors[desc_rows])
            pts = model.desc_point[desc_rows]
            # collapse descriptor columns onto model points (min distance)
            uniq_pts, inv = np.unique(pts, return_inverse=True)
            point_dist = np.full((len(rows), len(uniq_pts)), 10_000, dtype=np.int32)
            np.minimum.at(point_dist, (slice(None), inv), dist)
            feat_best = np.argmin(point_dist, axis=1)
            point_best = np.argmin(point_dist, axis=0)
            for fi, pj in enumerate(feat_best):
                d = int(point_dist[fi, pj])
                if d >= max_distance:
                    continue
                if point_best[pj] != fi:
                    continue  # not mutual
                point = int(uniq_pts[pj])
                cand = (d, int(feature_indices[rows[fi]]), rows[fi], point)
                prev = best_for_point.get(point)
                if prev is None or cand[:2] < prev[:2]:
                    best_for_point[point] = cand
        out = [
            Correspondence(entry[1], pixels[entry[2]].copy(), point, entry[0])
            for point, entry in sorted(best_for_point.items())
        ]
        out.sort(key=lambda c: (c.feature_index, c.point_index))
        return out

    def audit(self):
        """Check index invariants; raises AssertionError on violation."""
        for word, postings in self.inverted.items():
            for model_id, weight in postings:
                assert self.models[model_id].bow.get(word) == weight
        for model in self.models.values():
            for word, weight in model.bow.items():
                assert (model.model_id, weight) in self.inverted[word]
            level = min(self.direct_level, model.desc_paths.shape[1] - 1)
            direct = self.direct[model.model_id]
            covered = np.concatenate(list(direct.values()))
            assert sorted(covered) == list(range(len(model.descriptors)))
            for node, rows in direct.items():
                assert np.all(model.desc_paths[rows, level] == node)


# ---------------------------------------------------------------------------
# File formats
# ---------------------------------------------------------------------------


def write_model_file(path, model_id, points, point_descriptors):
    """Line-based model file: 'model <id> <n>' then per point
    'x y z n_desc' followed by hex descriptor lines."""
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    lines = [f"model {model_id} {len(points)}"]
    for p, descs in zip(points, point_descriptors):
        lines.append(
            " ".join(format_float(v) for v in p) + f" {len(descs)}"
        )
        for d in descs:
            lines.append(descriptor_to_hex(d))
    with open(path, "w") as f:
        f.write("\n".join(lines) + "\n")


def read_model_file(path):
    """Returns (model_id, points (n, 3), per-point descriptor lists)."""
    with open(path) as f:
        tokens = [ln.strip() for ln in f if ln.strip() and not ln.startswith("#")]
    head = tokens[0].split()
    if head[0] != "model":
        raise ValueError(f"{path}: expected 'model <id> <n_points>' header")
    model_id, n_points = int(head[1]), int(head[2])
    points = np.zeros((n_points, 3))
    descs = []
    i = 1
    for p in range(n_points):
        vals = tokens[i].split()
        points[p] = [float(v) for v in vals[:3]]
        n_desc = int(vals[3])
        i += 1
        descs.append([descriptor_from_hex(tokens[i + j]) for j in range(n_desc)])
        i += n_desc
    return model_id, points, descs


def save_database(db: ObjectDatabase, path):
    """Binary container; embeds the vocabulary (and its hash, to catch
    mixed-up vocabulary/database pairs) plus the model table."""
    parts = [_DB_MAGIC]
    parts.append(bytes.fromhex(db.tree.sha256()))
    vocab_blob = db.tree.to_bytes()
    parts.append(struct.pack("<Q", len(vocab_blob)))
    parts.append(vocab_blob)
    parts.append(struct.pack("<IdI", db.direct_level, db.epsilon, len(db.models)))
    for model_id in sorted(db.models):
        m = db.models[model_id]
        depth_cols = m.desc_paths.shape[1]
        parts.append(struct.pack("<iII", m.model_id, m.n_points, len(m.descriptors)))
        parts.append(struct.pack("<I", depth_cols))
        parts.append(m.points.astype("<f8").tobytes())
        parts.append(m.descriptors.tobytes())
        parts.append(m.desc_point.astype("<i8").tobytes())
        parts.append(m.desc_word.astype("<i8").tobytes())
        parts.append(m.desc_paths.astype("<i8").tobytes())
        parts.append(struct.pack("<I", len(m.bow)))
        for word in sorted(m.bow):
            parts.append(struct.pack("<Id", word, m.bow[word]))
    with open(path, "wb") as f:
        f.write(b"".join(parts))


def load_database(path, tree: VocabularyTree | None = None) -> ObjectDatabase:
    """Load a database; with ``tree`` given its hash must match the embedded
    one, otherwise the embedded vocabulary is reconstructed and used."""
    with open(path, "rb") as f:
        blob = f.read()
    if blob[:8] != _DB_MAGIC:
        raise ValueError("not an object database file")
    stored_hash = blob[8:40].hex()
    (vocab_len,) = struct.unpack_from("<Q", blob, 40)
    off = 48
    vocab_blob = blob[off:off + vocab_len]
    off += vocab_len
    if tree is None:
        tree = VocabularyTree.from_bytes(vocab_blob)
    elif stored_hash != tree.sha256():
        raise ValueError("database was built against a different vocabulary")
    direct_level, epsilon, n_models = struct.unpack_from("<IdI", blob, off)
    off += 16
    db = ObjectDatabase(tree, direct_level=direct_level, epsilon=epsilon)
    for _ in range(n_models):
        model_id, n_points, n_desc = struct.unpack_from("<iII", blob, off)
        off += 12
        (depth_cols,) = struct.unpack_from("<I", blob, off)
        off += 4
        points = np.frombuffer(blob, "<f8", n_points * 3, off).reshape(n_points, 3).copy()
        off += n_points * 24
        descs = np.frombuffer(blob, np.uint8, n_desc * DESCRIPTOR_BYTES, off)
        descs = descs.reshape(n_desc, DESCRIPTOR_BYTES).copy()
        off += n_desc * DESCRIPTOR_BYTES
        desc_point = np.frombuffer(blob, "<i8", n_desc, off).copy()
        off += n_desc * 8
        desc_word = np.frombuffer(blob, "<i8", n_desc, off).copy()
        off += n_desc * 8
        desc_paths = np.frombuffer(blob, "<i8", n_desc * depth_cols, off)
        desc_paths = desc_paths.reshape(n_desc, depth_cols).copy()
        off += n_desc * depth_cols * 8
        (n_bow,) = struct.unpack_from("<I", blob, off)
        off += 4
        bow = {}
        for _ in range(n_bow):
            word, weight = struct.unpack_from("<Id", blob, off)
            off += 12
            bow[word] = weight
        db.add_model(
            ObjectModel(model_id, points, descs, desc_point, desc_word, desc_paths, bow)
        )
    return db
