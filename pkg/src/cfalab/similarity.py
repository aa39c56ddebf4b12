"""Entity-category similarity and agglomerative clustering of categories."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Dict, List, Sequence, Tuple

import numpy as np

from .data import DatasetStats

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class SimilarityWeights:
    w_pattern: float = 1.0 / 3.0
    w_context: float = 1.0 / 3.0
    w_semantic: float = 1.0 / 3.0

    def __post_init__(self):
        w = (self.w_pattern, self.w_context, self.w_semantic)
        if min(w) < 0 or abs(sum(w) - 1.0) > 1e-9:
            raise ValueError(f"similarity weights must be nonnegative and sum to 1, got {w}")

    def as_tuple(self) -> Tuple[float, float, float]:
        return (self.w_pattern, self.w_context, self.w_semantic)


@dataclass(frozen=True)
class SimilarityMatrix:
    values: np.ndarray
    kind: str   # pattern | context | semantic-distance | combined

    @property
    def n(self) -> int:
        return self.values.shape[0]


@dataclass(frozen=True)
class ClusterAssignment:
    k: int
    assignment: np.ndarray          # class index -> cluster id
    merges: Tuple[Tuple[int, int, float], ...] = ()

    def members(self) -> List[List[int]]:
        out: List[List[int]] = [[] for _ in range(self.k)]
        for c, g in enumerate(self.assignment):
            out[g].append(c)
        return out

    def cluster_of(self, c: int) -> List[int]:
        g = self.assignment[c]
        return [int(i) for i in np.flatnonzero(self.assignment == g)]


def _jaccard(a: frozenset, b: frozenset) -> float:
    inter = len(a & b)
    denom = len(a) + len(b) - inter
    return inter / denom if denom else 0.0


def pattern_similarity(stats: DatasetStats, c_i: int, c_j: int) -> float:
    """Shared (pred, obj) patterns as subject plus shared (sub, pred) patterns as object.

    Each term is a Jaccard index over distinct pattern types; 0/0 counts as 0.
    """
    return (_jaccard(stats.subj_patterns[c_i], stats.subj_patterns[c_j])
            + _jaccard(stats.obj_patterns[c_i], stats.obj_patterns[c_j]))


def context_similarity(stats: DatasetStats, c_i: int, c_j: int) -> float:
    return _jaccard(stats.cooccur[c_i], stats.cooccur[c_j])


def semantic_similarity(embeddings: np.ndarray, c_i: int, c_j: int) -> float:
    """Euclidean distance between class embeddings (a distance, despite the name)."""
    n = len(embeddings)
    for c in (c_i, c_j):
        if not 0 <= c < n:
            raise KeyError(f"no embedding for entity class {c}")
    return float(np.linalg.norm(np.asarray(embeddings[c_i], float) - np.asarray(embeddings[c_j], float)))


def _pairwise(fn, n: int) -> np.ndarray:
    out = np.zeros((n, n))
    for i in range(n):
        for j in range(i, n):
            out[i, j] = out[j, i] = fn(i, j)
    return out


def pattern_matrix(stats: DatasetStats) -> SimilarityMatrix:
    n = len(stats.subj_patterns)
    return SimilarityMatrix(_pairwise(lambda i, j: pattern_similarity(stats, i, j), n), "pattern")


def context_matrix(stats: DatasetStats) -> SimilarityMatrix:
    n = len(stats.cooccur)
    return SimilarityMatrix(_pairwise(lambda i, j: context_similarity(stats, i, j), n), "context")


def semantic_matrix(embeddings: np.ndarray) -> SimilarityMatrix:
    n = len(embeddings)
    return SimilarityMatrix(_pairwise(lambda i, j: semantic_similarity(embeddings, i, j), n),
                            "semantic-distance")


def normalize_offdiag(values: np.ndarray, name: str = "") -> np.ndarray:
    """Min-max normalize off-diagonal entries to [0, 1]; diagonal set to 1."""
    n = values.shape[0]
    out = np.zeros_like(values, dtype=float)
    if n > 1:
        mask = ~np.eye(n, dtype=bool)
        lo, hi = values[mask].min(), values[mask].max()
        if hi > lo:
            out[mask] = (values[mask] - lo) / (hi - lo)
        else:
            log.warning("constant %s similarity matrix; component normalized to zeros", name)
    np.fill_diagonal(out, 1.0)
    return out


def combined_similarity(stats: DatasetStats, embeddings: np.ndarray,
                        weights: SimilarityWeights = SimilarityWeights()) -> SimilarityMatrix:
    p_hat = normalize_offdiag(pattern_matrix(stats).values, "pattern")
    c_hat = normalize_offdiag(context_matrix(stats).values, "context")
    d_hat = normalize_offdiag(semantic_matrix(embeddings).values, "semantic")
    s_hat = 1.0 - d_hat
    np.fill_diagonal(s_hat, 1.0)
    w_p, w_c, w_s = weights.as_tuple()
    combined = w_p * p_hat + w_c * c_hat + w_s * s_hat
    combined = (combined + combined.T) / 2.0
    np.fill_diagonal(combined, 1.0)
    return SimilarityMatrix(combined, "combined")


def cluster_entities(sim: SimilarityMatrix, k: int) -> ClusterAssignment:
    """Average-linkage agglomerative clustering on 1 - similarity, stopped at k clusters.

    Ties in linkage distance go to the pair with the smallest
    (min member of A, min member of B).
    """
    n = sim.n
    if not 1 <= k <= n:
        raise ValueError(f"cluster count k={k} must be in [1, {n}]")
    dist = 1.0 - np.asarray(sim.values, dtype=float)
    clusters: Dict[int, List[int]] = {i: [i] for i in range(n)}
    # summed pairwise distance between live clusters, keyed by cluster id
    link = dist.copy()
    merges = []
    while len(clusters) > k:
        best = None
        ids = sorted(clusters, key=lambda c: min(clusters[c]))
        for a_pos, a in enumerate(ids):
            for b in ids[a_pos + 1:]:
                d = link[a, b] / (len(clusters[a]) * len(clusters[b]))
                key = (d, min(clusters[a]), min(clusters[b]))
                if best is None or key < best[0]:
                    best = (key, a, b)
        (d, _, _), a, b = best
        merges.append((min(clusters[a]), min(clusters[b]), float(d)))
        link[a, :] += link[b, :]
        link[:, a] += link[:, b]
        clusters[a] = sorted(clusters[a] + clusters.pop(b))
    assignment = np.empty(n, dtype=np.int64)
    for gid, members in enumerate(sorted(clusters.values(), key=min)):
        assignment[members] = gid
    return ClusterAssignment(k, assignment, tuple(merges))


def clusters_to_json(assign: ClusterAssignment, class_names: Sequence[str],
                     weights: SimilarityWeights) -> dict:
    return {
        "k": assign.k,
        "weights": {"pattern": weights.w_pattern, "context": weights.w_context,
                    "semantic": weights.w_semantic},
        "assignment": {class_names[c]: int(g) for c, g in enumerate(assign.assignment)},
        "members": [[class_names[c] for c in m] for m in assign.members()],
        "merge_order": [[class_names[a], class_names[b], d] for a, b, d in assign.merges],
    }


def clusters_from_json(raw: dict, class_names: Sequence[str]) -> ClusterAssignment:
    assignment = np.array([raw["assignment"][c] for c in class_names], dtype=np.int64)
    return ClusterAssignment(int(raw["k"]), assignment)
