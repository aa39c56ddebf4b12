"""Repeat-factor sampling and compositional feature augmentation.

Two operators act on a training scene:

* intrinsic replacement swaps the subject or object feature of a tail
  triplet for a bank feature of a class from the same cluster;
* extrinsic mixup blends a bank tail triplet into a foreground (head) or
  background pair of the scene, mixing the predicate target as well.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .bank import FeatureBank, query_by_pair, query_by_triplet
from .data import DatasetStats, Scene, pair_spatial_vectors
from .similarity import ClusterAssignment


@dataclass(frozen=True)
class SamplerConfig:
    lam: float = 0.01            # repeat-factor threshold
    gamma: float = 0.5           # foreground context scaling
    bg_prob: float = 0.2         # background context keep-rate
    repeat_factor: str = "auto"  # on | off | auto (on iff any augmentation enabled)
    seed: int = 0

    def __post_init__(self):
        if self.lam <= 0:
            raise ValueError("lambda must be > 0")
        if not 0.0 <= self.gamma <= 1.0 or not 0.0 <= self.bg_prob <= 1.0:
            raise ValueError("gamma and bg_prob must lie in [0, 1]")
        if self.repeat_factor not in ("on", "off", "auto"):
            raise ValueError("repeat_factor must be on, off or auto")


@dataclass(frozen=True)
class AugmentConfig:
    sigma: float = 0.7
    theta: float = 0.5
    intrinsic_enabled: bool = False
    extrinsic_fg_enabled: bool = False
    extrinsic_bg_enabled: bool = False
    intrinsic_rate: float = 0.5   # chance each tail relation of a visit is used as a query

    def __post_init__(self):
        if not 0.0 <= self.theta <= 1.0:
            raise ValueError("theta must lie in [0, 1]")
        if not -1.0 <= self.sigma <= 1.0:
            raise ValueError("sigma must lie in [-1, 1]")

    @property
    def any_enabled(self) -> bool:
        return self.intrinsic_enabled or self.extrinsic_fg_enabled or self.extrinsic_bg_enabled


def uses_repeat_factor(sampler: SamplerConfig, augment: AugmentConfig) -> bool:
    if sampler.repeat_factor == "auto":
        return augment.any_enabled
    return sampler.repeat_factor == "on"


@dataclass
class AugmentedSample:
    scene_ref: str
    pair: Tuple[int, int]
    v_s: np.ndarray
    v_o: np.ndarray
    u: np.ndarray
    entity_targets: Tuple[int, int]
    predicate_target: np.ndarray
    contrastive_pairs: List[Tuple[np.ndarray, np.ndarray]] = field(default_factory=list)
    provenance: Tuple[str, ...] = ()
    chosen: Dict[str, int] = field(default_factory=dict)


class AugmentTrace:
    """Counts operator firings/misses and optionally keeps one record per firing."""

    def __init__(self, keep_records: bool = False):
        self.keep_records = keep_records
        self.records: List[dict] = []
        self.fired: Dict[str, int] = {}
        self.missed: Dict[str, int] = {}

    def fire(self, op: str, scene: str, pair, chosen: dict, theta=None):
        self.fired[op] = self.fired.get(op, 0) + 1
        if self.keep_records:
            rec = {"scene": scene, "pair": [int(pair[0]), int(pair[1])], "operator": op}
            rec.update({k: int(v) for k, v in chosen.items()})
            if theta is not None:
                rec["theta"] = theta
            self.records.append(rec)

    def miss(self, op: str):
        self.missed[op] = self.missed.get(op, 0) + 1


# --------------------------------------------------------------------------- sampling

def repeat_factor(f_r: float, lam: float) -> Tuple[float, float]:
    """Return (eta, eta_r) with eta_r = sqrt(lam / f_r) and eta = max(1, eta_r)."""
    if f_r <= 0:
        raise ValueError(f"predicate frequency must be > 0, got {f_r}")
    if lam <= 0:
        raise ValueError("lambda must be > 0")
    eta_r = math.sqrt(lam / f_r)
    return max(1.0, eta_r), eta_r


def scene_repeat_factor(scene: Scene, stats: DatasetStats, lam: float) -> float:
    eta = 1.0
    for p in set(int(p) for p in scene.predicates):
        eta = max(eta, repeat_factor(float(stats.f_r[p]), lam)[0])
    return eta


def build_epoch(scenes: Sequence[Scene], stats: DatasetStats, cfg: SamplerConfig,
                rng: np.random.Generator) -> List[str]:
    """Scene ids for one epoch: floor(eta) copies plus one more with prob frac(eta), shuffled."""
    ids: List[str] = []
    for s in scenes:
        eta = scene_repeat_factor(s, stats, cfg.lam)
        whole = math.floor(eta)
        copies = whole + int(rng.random() < eta - whole)
        ids.extend([s.image_id] * copies)
    order = rng.permutation(len(ids))
    return [ids[i] for i in order]


def fg_context_probability(eta: float, eta_r: float, gamma: float) -> float:
    return (eta - eta_r) / eta * gamma


def predicate_fg_probabilities(stats: DatasetStats, lam: float, gamma: float) -> np.ndarray:
    """Per-predicate foreground context probability; 0 for unseen predicates and index 0."""
    probs = np.zeros(len(stats.f_r))
    for p in range(1, len(stats.f_r)):
        if stats.f_r[p] > 0:
            eta, eta_r = repeat_factor(float(stats.f_r[p]), lam)
            probs[p] = fg_context_probability(eta, eta_r, gamma)
    return probs


def select_context_triplets(scene: Scene, fg_probs: np.ndarray, bank: FeatureBank,
                            rng: np.random.Generator, bg_prob: float,
                            fg_enabled: bool = True, bg_enabled: bool = True,
                            ) -> List[Tuple[Tuple[int, int], str]]:
    """Pick foreground (annotated) and background (unannotated) context pairs.

    Foreground pairs are kept with their predicate's probability; background
    pairs only qualify when their class pair occurs in the bank.
    """
    out: List[Tuple[Tuple[int, int], str]] = []
    if fg_enabled:
        for (s, o), p in zip(scene.rel_pairs, scene.predicates):
            if rng.random() < fg_probs[p]:
                out.append(((int(s), int(o)), "fg"))
    if bg_enabled and len(bank):
        annotated = set(map(tuple, scene.rel_pairs.tolist()))
        lab = scene.labels
        for s in range(scene.n_entities):
            for o in range(scene.n_entities):
                if s == o or (s, o) in annotated:
                    continue
                if (int(lab[s]), int(lab[o])) in bank.by_pair and rng.random() < bg_prob:
                    out.append(((s, o), "bg"))
    return out


# --------------------------------------------------------------------------- operators

def mix_weights(theta: float) -> Tuple[float, float]:
    """Weights (w, w') with w + w' = 1 exactly and mix_weights(1 - theta) = (w', w).

    1 - x is exact for x in [0.5, 1], so the larger weight is derived from the
    smaller one rather than the other way round.
    """
    if theta >= 0.5:
        return theta, 1.0 - theta
    w_prime = 1.0 - theta
    return 1.0 - w_prime, w_prime


def mix_features(v: np.ndarray, v_prime: np.ndarray, theta: float) -> np.ndarray:
    v, v_prime = np.asarray(v), np.asarray(v_prime)
    if v.shape != v_prime.shape:
        raise ValueError(f"cannot mix vectors of shape {v.shape} and {v_prime.shape}")
    # exact endpoints keep theta=1 (or 0) bit-identical to the source vector
    if theta == 1.0:
        return v.astype(np.float64, copy=True)
    if theta == 0.0:
        return v_prime.astype(np.float64, copy=True)
    w, w_prime = mix_weights(theta)
    return w * v.astype(np.float64) + w_prime * v_prime.astype(np.float64)


def one_hot(index: int, n: int) -> np.ndarray:
    out = np.zeros(n)
    out[index] = 1.0
    return out


def mix_targets(r: int, r_prime: int, theta: float, n: int) -> np.ndarray:
    if theta == 1.0:
        return one_hot(r, n)
    w, w_prime = mix_weights(theta)
    return w * one_hot(r, n) + w_prime * one_hot(r_prime, n)


def intrinsic_augment(scene_id: str, pair: Tuple[int, int], predicate: int,
                      labels: np.ndarray, features: np.ndarray, boxes: np.ndarray,
                      union: np.ndarray, bank: FeatureBank, clusters: ClusterAssignment,
                      cfg: AugmentConfig, rng: np.random.Generator, n_predicates: int,
                      trace: Optional[AugmentTrace] = None) -> Optional[AugmentedSample]:
    """Replace the subject or object feature of a tail triplet with a same-cluster bank feature."""
    s, o = pair
    role = int(rng.integers(2))
    node = (s, o)[role]
    original = int(labels[node])
    alternatives = [c for c in clusters.cluster_of(original) if c != original]
    if not alternatives:
        if trace is not None:
            trace.miss("intrinsic")
        return None
    new_cls = alternatives[int(rng.integers(len(alternatives)))]
    key = (new_cls, predicate, int(labels[o])) if role == 0 else (int(labels[s]), predicate, new_cls)
    p_query = pair_spatial_vectors(boxes, [pair])[0]
    cands = query_by_triplet(bank, key, p_query, cfg.sigma)
    if not cands:
        if trace is not None:
            trace.miss("intrinsic")
        return None
    entry = cands[int(rng.integers(len(cands)))]
    v_s, v_o = features[s].astype(np.float64), features[o].astype(np.float64)
    targets = [int(labels[s]), int(labels[o])]
    if role == 0:
        v_s = bank.v_s[entry].astype(np.float64)
    else:
        v_o = bank.v_o[entry].astype(np.float64)
    targets[role] = new_cls
    chosen = {"role": role, "class": new_cls, "entry": entry}
    if trace is not None:
        trace.fire("intrinsic", scene_id, pair, chosen)
    return AugmentedSample(scene_id, pair, v_s, v_o, np.asarray(union, dtype=np.float64),
                           (targets[0], targets[1]), one_hot(predicate, n_predicates),
                           [], ("intrinsic",), chosen)


def extrinsic_augment(scene_id: str, pair: Tuple[int, int], kind: str, predicate: int,
                      class_pair: Tuple[int, int], v_s: np.ndarray, v_o: np.ndarray,
                      u: np.ndarray, p_ctx: np.ndarray, bank: FeatureBank,
                      cfg: AugmentConfig, rng: np.random.Generator, n_predicates: int,
                      trace: Optional[AugmentTrace] = None) -> Optional[AugmentedSample]:
    """Mix a bank tail triplet with the same class pair into a context pair.

    Background contexts carry the no-relation label (0) into the target mix.
    """
    op = "extrinsic_" + kind
    cands = query_by_pair(bank, class_pair, p_ctx, cfg.sigma)
    if not cands:
        if trace is not None:
            trace.miss(op)
        return None
    entry = cands[int(rng.integers(len(cands)))]
    theta = cfg.theta
    r = predicate if kind == "fg" else 0
    vs_new = mix_features(v_s, bank.v_s[entry], theta)
    vo_new = mix_features(v_o, bank.v_o[entry], theta)
    u_new = mix_features(u, bank.u[entry], theta)
    target = mix_targets(r, int(bank.predicate[entry]), theta, n_predicates)
    chosen = {"entry": entry, "query_predicate": int(bank.predicate[entry])}
    if trace is not None:
        trace.fire(op, scene_id, pair, chosen, theta)
    return AugmentedSample(
        scene_id, pair, vs_new, vo_new, u_new, class_pair, target,
        [(np.asarray(v_s, dtype=np.float64), vs_new), (np.asarray(v_o, dtype=np.float64), vo_new)],
        (op,), chosen)
