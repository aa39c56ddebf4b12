"""Deterministic synthetic long-tailed scene graphs.

A linear-Gaussian world: entity classes belong to latent families sharing a
prototype direction; predicates follow a Zipf law, each admitting a few
(subject family, object family) pairs and a preferred subject->object
direction. Rare predicates admit fewer family pairs.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import List, Tuple

import numpy as np

from .data import NO_RELATION, Scene, Vocabulary, make_scene


@dataclass(frozen=True)
class SynthConfig:
    n_entity_classes: int = 24
    n_predicates: int = 30
    zipf_exponent: float = 1.5
    scenes: int = 2000
    entities_per_scene: Tuple[int, int] = (4, 9)
    relations_per_scene: Tuple[int, int] = (2, 5)
    D: int = 16
    D_w: int = 8
    noise_sigma: float = 0.3
    seed: int = 0
    n_families: int = 6
    effect_scale: float = 1.0
    max_family_pairs: int = 12          # compatible family pairs of the rank-1 predicate
    compat_decay: float = 0.8           # n_pairs(rank) ~ max_family_pairs * rank^-decay
    angle_noise_deg: float = 20.0
    split_fractions: Tuple[float, float, float] = (0.7, 0.1, 0.2)   # train / val / test
    image_size: float = 256.0

    def __post_init__(self):
        for name in ("n_entity_classes", "n_predicates", "scenes", "D", "D_w", "n_families"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.zipf_exponent <= 0:
            raise ValueError("zipf_exponent must be > 0")
        lo, hi = self.relations_per_scene
        if lo < 1 or hi < lo:
            raise ValueError("relations_per_scene must be a range with min >= 1")
        lo, hi = self.entities_per_scene
        if lo < 2 or hi < lo:
            raise ValueError("entities_per_scene must be a range with min >= 2")
        if self.n_families > self.n_entity_classes:
            raise ValueError("more families than entity classes")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be >= 0")


@dataclass
class WorldModel:
    family_of: np.ndarray         # (C,) family id per class
    prototypes: np.ndarray        # (C, D)
    embeddings: np.ndarray        # (C, D_w)
    effects: np.ndarray           # (P+1, D), row 0 unused
    spatial_angle: np.ndarray     # (P+1,) preferred offset direction, radians
    compat: List[List[Tuple[int, int]]] = field(default_factory=list)   # per predicate
    zipf_probs: np.ndarray = None  # (P+1,), entry 0 is 0


def _unit(rng, n, d):
    v = rng.normal(size=(n, d))
    return v / np.linalg.norm(v, axis=1, keepdims=True)


def generate_world(cfg: SynthConfig) -> WorldModel:
    rng = np.random.default_rng([cfg.seed, 1])
    c, f = cfg.n_entity_classes, cfg.n_families
    family_of = np.arange(c) % f
    fam_dir = _unit(rng, f, cfg.D)
    prototypes = fam_dir[family_of] + 0.6 * _unit(rng, c, cfg.D)
    fam_emb = _unit(rng, f, cfg.D_w)
    embeddings = fam_emb[family_of] + 0.5 * _unit(rng, c, cfg.D_w)
    p = cfg.n_predicates
    effects = np.zeros((p + 1, cfg.D))
    effects[1:] = cfg.effect_scale * _unit(rng, p, cfg.D)
    angles = np.zeros(p + 1)
    angles[1:] = rng.uniform(0, 2 * np.pi, size=p)
    all_pairs = [(a, b) for a in range(f) for b in range(f)]
    compat = [[]]
    for rank in range(1, p + 1):
        n_pairs = max(1, int(round(cfg.max_family_pairs * rank ** -cfg.compat_decay)))
        n_pairs = min(n_pairs, len(all_pairs))
        pick = rng.choice(len(all_pairs), size=n_pairs, replace=False)
        compat.append([all_pairs[i] for i in sorted(pick)])
    zipf = np.zeros(p + 1)
    zipf[1:] = np.arange(1, p + 1, dtype=float) ** -cfg.zipf_exponent
    zipf /= zipf.sum()
    return WorldModel(family_of, prototypes, embeddings, effects, angles, compat, zipf)


def make_vocabulary(cfg: SynthConfig) -> Vocabulary:
    ents = tuple(f"ent{c:02d}" for c in range(cfg.n_entity_classes))
    preds = (NO_RELATION,) + tuple(f"pred{r:02d}" for r in range(1, cfg.n_predicates + 1))
    return Vocabulary(ents, preds)


def _box_at(cx, cy, rng, size):
    hw, hh = rng.uniform(6, 14, size=2)
    x1, y1 = max(cx - hw, 0.0), max(cy - hh, 0.0)
    x2, y2 = min(cx + hw, size), min(cy + hh, size)
    return [x1, y1, x2, y2]


def _generate_scene(world: WorldModel, cfg: SynthConfig, index: int, split: str) -> Scene:
    rng = np.random.default_rng([cfg.seed, 2, index])
    size = cfg.image_size
    classes = np.arange(cfg.n_entity_classes)
    members = [classes[world.family_of == fam] for fam in range(cfg.n_families)]
    n_rel = int(rng.integers(cfg.relations_per_scene[0], cfg.relations_per_scene[1] + 1))
    n_ent_target = int(rng.integers(cfg.entities_per_scene[0], cfg.entities_per_scene[1] + 1))
    labels: List[int] = []
    boxes: List[List[float]] = []
    rels: List[Tuple[int, int, int]] = []
    preds = rng.choice(len(world.zipf_probs), size=n_rel, p=world.zipf_probs)
    angle_sd = math.radians(cfg.angle_noise_deg)
    for r in preds:
        fam_s, fam_o = world.compat[r][int(rng.integers(len(world.compat[r])))]
        reuse = [i for i in range(len(labels)) if world.family_of[labels[i]] == fam_s]
        if reuse and (rng.random() < 0.5 or len(labels) + 2 > cfg.entities_per_scene[1]):
            s = reuse[int(rng.integers(len(reuse)))]
        else:
            if len(labels) + 2 > cfg.entities_per_scene[1]:
                continue
            s = len(labels)
            labels.append(int(rng.choice(members[fam_s])))
            boxes.append(_box_at(rng.uniform(0.25 * size, 0.75 * size),
                                 rng.uniform(0.25 * size, 0.75 * size), rng, size))
        if len(labels) + 1 > cfg.entities_per_scene[1]:
            continue
        sx, sy = (boxes[s][0] + boxes[s][2]) / 2, (boxes[s][1] + boxes[s][3]) / 2
        ang = world.spatial_angle[r] + rng.normal(0, angle_sd)
        dist = rng.uniform(20, 50)
        ox = float(np.clip(sx + dist * math.cos(ang), 14, size - 14))
        oy = float(np.clip(sy + dist * math.sin(ang), 14, size - 14))
        o = len(labels)
        labels.append(int(rng.choice(members[fam_o])))
        boxes.append(_box_at(ox, oy, rng, size))
        rels.append((s, o, int(r)))
    while len(labels) < n_ent_target:
        labels.append(int(rng.integers(cfg.n_entity_classes)))
        boxes.append(_box_at(rng.uniform(14, size - 14), rng.uniform(14, size - 14), rng, size))

    lab = np.array(labels)
    sigma = cfg.noise_sigma
    feats = world.prototypes[lab] + sigma * rng.normal(size=(len(lab), cfg.D))
    if rels:
        pairs = np.array([(s, o) for s, o, _ in rels])
        pr = np.array([r for _, _, r in rels])
        union = (0.5 * (world.prototypes[lab[pairs[:, 0]]] + world.prototypes[lab[pairs[:, 1]]])
                 + world.effects[pr] + sigma * rng.normal(size=(len(pr), cfg.D)))
    else:
        pairs, pr, union = np.zeros((0, 2), int), np.zeros(0, int), np.zeros((0, cfg.D))
    return make_scene(f"synth{index:06d}", size, size, lab, boxes, pairs, pr,
                      feats.astype(np.float32), union.astype(np.float32), split,
                      cfg.n_entity_classes, cfg.n_predicates + 1)


def generate_dataset(world: WorldModel, cfg: SynthConfig):
    """Return (Vocabulary, scenes, embeddings)."""
    for r in range(1, cfg.n_predicates + 1):
        if not world.compat[r]:
            raise ValueError(f"predicate {r} has no compatible family pair")
    n_train = int(round(cfg.split_fractions[0] * cfg.scenes))
    n_val = int(round(cfg.split_fractions[1] * cfg.scenes))
    scenes = []
    for i in range(cfg.scenes):
        split = "train" if i < n_train else ("val" if i < n_train + n_val else "test")
        scenes.append(_generate_scene(world, cfg, i, split))
    return make_vocabulary(cfg), scenes, world.embeddings.astype(np.float32)


def config_dict(cfg: SynthConfig) -> dict:
    return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(cfg).items()}
