"""Scene-graph dataset model, on-disk format, statistics and box geometry.

A dataset directory holds::

    vocab.json       entity / predicate names ("no-relation" at predicate 0)
    scenes.jsonl     one scene per line
    features.bin     float32 LE: per scene, entity vectors then union vectors
    features.json    manifest for features.bin (D, per-scene counts/offsets)
    embeddings.bin   float32 LE per-entity-class semantic vectors (optional)
    embeddings.json  manifest for embeddings.bin
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Dict, FrozenSet, List, Optional, Sequence, Tuple

import numpy as np

NO_RELATION = "__no_relation__"
FEATURES_VERSION = 1


class DatasetError(ValueError):
    """A dataset file violates the declared format or a type invariant."""


@dataclass(frozen=True)
class Vocabulary:
    entity_classes: Tuple[str, ...]
    predicate_classes: Tuple[str, ...]
    head_set: FrozenSet[int] = frozenset()
    body_set: FrozenSet[int] = frozenset()
    tail_set: FrozenSet[int] = frozenset()

    def __post_init__(self):
        if len(set(self.entity_classes)) != len(self.entity_classes):
            raise DatasetError("entity class names must be unique")
        if len(set(self.predicate_classes)) != len(self.predicate_classes):
            raise DatasetError("predicate names must be unique")
        if not self.predicate_classes:
            raise DatasetError("predicate list must contain the no-relation class")
        groups = (self.head_set, self.body_set, self.tail_set)
        if any(groups):
            if any(0 in g for g in groups):
                raise DatasetError("no-relation (0) cannot belong to head/body/tail")
            union = self.head_set | self.body_set | self.tail_set
            if sum(len(g) for g in groups) != len(union):
                raise DatasetError("head/body/tail sets overlap")
            if union != frozenset(range(1, self.n_predicates)):
                raise DatasetError("head/body/tail sets must partition 1..P")

    @property
    def n_entities(self) -> int:
        return len(self.entity_classes)

    @property
    def n_predicates(self) -> int:
        """Number of predicate classes including no-relation."""
        return len(self.predicate_classes)

    def with_groups(self, head, body, tail) -> "Vocabulary":
        return replace(self, head_set=frozenset(head), body_set=frozenset(body),
                       tail_set=frozenset(tail))


@dataclass(frozen=True)
class BBox:
    x1: float
    y1: float
    x2: float
    y2: float

    def __post_init__(self):
        if not (self.x1 < self.x2 and self.y1 < self.y2):
            raise DatasetError(f"BBox invariant violated (x1<x2, y1<y2): {self.as_tuple()}")

    def as_tuple(self) -> Tuple[float, float, float, float]:
        return (self.x1, self.y1, self.x2, self.y2)

    @property
    def center(self) -> Tuple[float, float]:
        return ((self.x1 + self.x2) / 2.0, (self.y1 + self.y2) / 2.0)


@dataclass(frozen=True)
class Entity:
    class_id: int
    bbox: BBox
    feature: Optional[np.ndarray] = None


@dataclass(frozen=True)
class Relation:
    sub_idx: int
    obj_idx: int
    predicate_id: int
    union_feature: Optional[np.ndarray] = None


@dataclass(frozen=True, eq=False)
class Scene:
    """One annotated image, stored column-wise.

    ``features`` is (n, D) and ``union_features`` is (m, D); both are None for
    stats-only datasets.
    """

    image_id: str
    width: float
    height: float
    labels: np.ndarray
    boxes: np.ndarray
    rel_pairs: np.ndarray
    predicates: np.ndarray
    features: Optional[np.ndarray] = None
    union_features: Optional[np.ndarray] = None
    split: str = "train"

    @property
    def n_entities(self) -> int:
        return len(self.labels)

    @property
    def n_relations(self) -> int:
        return len(self.predicates)

    @property
    def entities(self) -> List[Entity]:
        return [
            Entity(int(self.labels[i]), BBox(*map(float, self.boxes[i])),
                   None if self.features is None else self.features[i])
            for i in range(self.n_entities)
        ]

    @property
    def relations(self) -> List[Relation]:
        return [
            Relation(int(s), int(o), int(p),
                     None if self.union_features is None else self.union_features[k])
            for k, ((s, o), p) in enumerate(zip(self.rel_pairs, self.predicates))
        ]

    @property
    def has_features(self) -> bool:
        return self.features is not None and self.union_features is not None

    def equals(self, other: "Scene") -> bool:
        same = (self.image_id == other.image_id and self.width == other.width
                and self.height == other.height and self.split == other.split)
        arrays = ("labels", "boxes", "rel_pairs", "predicates", "features", "union_features")
        for name in arrays:
            a, b = getattr(self, name), getattr(other, name)
            if (a is None) != (b is None):
                return False
            if a is not None and not np.array_equal(a, b):
                return False
        return same


def make_scene(image_id, width, height, labels, boxes, rel_pairs, predicates,
               features=None, union_features=None, split="train",
               n_entity_classes=None, n_predicates=None) -> Scene:
    """Build a Scene from python/numpy data and check all invariants."""
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    rel_pairs = np.asarray(rel_pairs, dtype=np.int64).reshape(-1, 2)
    predicates = np.asarray(predicates, dtype=np.int64).reshape(-1)
    n = len(labels)
    if len(boxes) != n:
        raise DatasetError(f"{image_id}: {len(boxes)} boxes for {n} entities")
    if len(rel_pairs) != len(predicates):
        raise DatasetError(f"{image_id}: relation pairs and predicates differ in length")
    for b in boxes:
        BBox(*map(float, b))
        if b[0] < 0 or b[1] < 0 or b[2] > width or b[3] > height:
            raise DatasetError(f"{image_id}: box {b.tolist()} outside image {width}x{height}")
    if n_entity_classes is not None and n and (labels.min() < 0 or labels.max() >= n_entity_classes):
        raise DatasetError(f"{image_id}: entity class out of range")
    seen = set()
    for (s, o), p in zip(rel_pairs, predicates):
        if not (0 <= s < n and 0 <= o < n):
            raise DatasetError(f"{image_id}: relation index out of range ({s}, {o})")
        if s == o:
            raise DatasetError(f"{image_id}: relation with sub_idx == obj_idx ({s})")
        if p < 1 or (n_predicates is not None and p >= n_predicates):
            raise DatasetError(f"{image_id}: predicate id {p} invalid")
        if (s, o) in seen:
            raise DatasetError(f"{image_id}: duplicate annotated pair ({s}, {o})")
        seen.add((int(s), int(o)))
    if features is not None:
        features = np.asarray(features, dtype=np.float32).reshape(n, -1)
    if union_features is not None:
        union_features = np.asarray(union_features, dtype=np.float32)
        if len(predicates):
            union_features = union_features.reshape(len(predicates), -1)
        else:
            dim = features.shape[1] if features is not None else 0
            union_features = union_features.reshape(0, dim)
        if features is not None and union_features.shape[1] != features.shape[1] and len(predicates):
            raise DatasetError(f"{image_id}: union feature dim differs from entity dim")
    return Scene(str(image_id), float(width), float(height), labels, boxes, rel_pairs,
                 predicates, features, union_features, split)


# --------------------------------------------------------------------------- geometry

def union_box(b_i: BBox, b_j: BBox) -> BBox:
    return BBox(min(b_i.x1, b_j.x1), min(b_i.y1, b_j.y1),
                max(b_i.x2, b_j.x2), max(b_i.y2, b_j.y2))


def spatial_vector(b_sub: BBox, b_obj: BBox) -> np.ndarray:
    """Offset from the subject box center to the object box center."""
    (sx, sy), (ox, oy) = b_sub.center, b_obj.center
    return np.array([ox - sx, oy - sy])


def pair_spatial_vectors(boxes: np.ndarray, pairs: np.ndarray) -> np.ndarray:
    """Vectorized ``spatial_vector`` for (m, 2) index pairs into (n, 4) boxes."""
    centers = np.stack([(boxes[:, 0] + boxes[:, 2]) / 2.0, (boxes[:, 1] + boxes[:, 3]) / 2.0], 1)
    pairs = np.asarray(pairs, dtype=np.int64).reshape(-1, 2)
    return centers[pairs[:, 1]] - centers[pairs[:, 0]]


# --------------------------------------------------------------------------- statistics

@dataclass(frozen=True)
class DatasetStats:
    counts: np.ndarray                      # (P,), index 0 unused
    f_r: np.ndarray                         # counts / total
    subj_patterns: Tuple[FrozenSet[Tuple[int, int]], ...]   # S(c): (pred, obj class)
    obj_patterns: Tuple[FrozenSet[Tuple[int, int]], ...]    # O(c): (sub class, pred)
    cooccur: Tuple[FrozenSet[int], ...]     # C(c), excludes c

    @property
    def n_relations(self) -> int:
        return int(self.counts.sum())

    def to_json(self, vocab: Vocabulary) -> dict:
        return {
            "n_relations": self.n_relations,
            "predicates": [
                {"id": p, "name": vocab.predicate_classes[p], "count": int(self.counts[p]),
                 "f_r": float(self.f_r[p])}
                for p in range(1, len(self.counts))
            ],
            "entities": [
                {"id": c, "name": vocab.entity_classes[c],
                 "d_out": len(self.subj_patterns[c]), "d_in": len(self.obj_patterns[c]),
                 "d_co": len(self.cooccur[c])}
                for c in range(len(self.cooccur))
            ],
        }


def compute_stats(scenes: Sequence[Scene], vocab: Vocabulary) -> DatasetStats:
    n_cls, n_pred = vocab.n_entities, vocab.n_predicates
    counts = np.zeros(n_pred, dtype=np.int64)
    subj: List[set] = [set() for _ in range(n_cls)]
    obj: List[set] = [set() for _ in range(n_cls)]
    co: List[set] = [set() for _ in range(n_cls)]
    for scene in scenes:
        lab = scene.labels
        for (s, o), p in zip(scene.rel_pairs, scene.predicates):
            cs, co_ = int(lab[s]), int(lab[o])
            counts[p] += 1
            subj[cs].add((int(p), co_))
            obj[co_].add((cs, int(p)))
        present = set(int(c) for c in lab)
        for c in present:
            co[c] |= present - {c}
    total = counts.sum()
    if total == 0:
        raise DatasetError("compute_stats needs at least one annotated relation")
    return DatasetStats(
        counts=counts,
        f_r=counts / total,
        subj_patterns=tuple(frozenset(s) for s in subj),
        obj_patterns=tuple(frozenset(s) for s in obj),
        cooccur=tuple(frozenset(s) for s in co),
    )


def split_head_body_tail(stats: DatasetStats, tail_quantile: float = 0.5,
                         head_quantile: float = 0.9):
    """Partition annotated predicates by cumulative frequency mass.

    Predicates are ranked by count (descending, ties by ascending index). A
    predicate whose preceding cumulative mass is below ``tail_quantile`` is
    head, below ``head_quantile`` body, otherwise tail.
    """
    if not (0.0 < tail_quantile < head_quantile < 1.0):
        raise ValueError("need 0 < tail_quantile < head_quantile < 1")
    ids = [p for p in range(1, len(stats.counts)) if stats.counts[p] > 0]
    ids.sort(key=lambda p: (-stats.counts[p], p))
    total = float(sum(stats.counts[p] for p in ids))
    head, body, tail = set(), set(), set()
    before = 0.0
    for p in ids:
        frac = before / total
        if frac < tail_quantile:
            head.add(p)
        elif frac < head_quantile:
            body.add(p)
        else:
            tail.add(p)
        before += stats.counts[p]
    return head, body, tail


def assign_groups(vocab: Vocabulary, stats: DatasetStats, tail_quantile=0.5,
                  head_quantile=0.9) -> Vocabulary:
    """Vocabulary with head/body/tail sets; predicates absent from stats go to tail."""
    head, body, tail = split_head_body_tail(stats, tail_quantile, head_quantile)
    tail |= set(range(1, vocab.n_predicates)) - head - body - tail
    return vocab.with_groups(head, body, tail)


# --------------------------------------------------------------------------- I/O

def _read_json(path: Path):
    try:
        return json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise DatasetError(f"{path}: invalid JSON ({exc})") from exc


def load_vocab(path) -> Vocabulary:
    path = Path(path)
    raw = _read_json(path / "vocab.json")
    preds = list(raw["predicate_classes"])
    if preds[0] != NO_RELATION:
        raise DatasetError(f"{path / 'vocab.json'}: predicate 0 must be {NO_RELATION!r}")
    return Vocabulary(
        tuple(raw["entity_classes"]), tuple(preds),
        frozenset(raw.get("head_set", ())), frozenset(raw.get("body_set", ())),
        frozenset(raw.get("tail_set", ())),
    )


def load_dataset(path, require_features: bool = False) -> Tuple[Vocabulary, List[Scene]]:
    """Read a dataset directory. Features are attached when features.bin exists."""
    path = Path(path)
    vocab = load_vocab(path)
    ent_idx = {n: i for i, n in enumerate(vocab.entity_classes)}
    pred_idx = {n: i for i, n in enumerate(vocab.predicate_classes)}
    scenes_file = path / "scenes.jsonl"
    records = []
    with open(scenes_file) as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            where = f"{scenes_file}:{lineno}"
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DatasetError(f"{where}: invalid JSON ({exc})") from exc
            records.append((where, rec))

    feats = None
    manifest_file = path / "features.json"
    if manifest_file.exists():
        manifest = _read_json(manifest_file)
        if manifest.get("version") != FEATURES_VERSION:
            raise DatasetError(f"{manifest_file}: unsupported version {manifest.get('version')}")
        dim = int(manifest["D"])
        flat = np.fromfile(path / "features.bin", dtype="<f4")
        entries = manifest["scenes"]
        if len(entries) != len(records):
            raise DatasetError(f"{manifest_file}: {len(entries)} entries for {len(records)} scenes")
        feats = (dim, flat, entries)
    elif require_features:
        raise DatasetError(f"{path}: features.json missing")

    scenes = []
    for k, (where, rec) in enumerate(records):
        try:
            labels = [_lookup(ent_idx, e["class"], "class") for e in rec["entities"]]
            boxes = [e["bbox"] for e in rec["entities"]]
            for b in boxes:
                if len(b) != 4:
                    raise DatasetError("bbox must have 4 numbers")
                try:
                    BBox(*map(float, b))
                except DatasetError as exc:
                    raise DatasetError(f"field 'bbox': {exc}") from None
            pairs = [(r["sub"], r["obj"]) for r in rec["relations"]]
            preds = [_lookup(pred_idx, r["predicate"], "predicate") for r in rec["relations"]]
            f = u = None
            if feats is not None:
                dim, flat, entries = feats
                ent = entries[k]
                if ent["image_id"] != rec["image_id"]:
                    raise DatasetError("features.json order does not match scenes.jsonl")
                n, m = len(labels), len(preds)
                if ent["n_entities"] != n or ent["n_relations"] != m:
                    raise DatasetError("feature counts do not match annotation")
                off = int(ent["offset"])
                block = flat[off: off + (n + m) * dim]
                if block.size != (n + m) * dim:
                    raise DatasetError("features.bin truncated")
                block = block.reshape(n + m, dim)
                f, u = block[:n].copy(), block[n:].copy()
            scene = make_scene(rec["image_id"], rec["width"], rec["height"], labels, boxes,
                               pairs, preds, f, u, rec.get("split", "train"),
                               vocab.n_entities, vocab.n_predicates)
        except KeyError as exc:
            raise DatasetError(f"{where}: missing field {exc}") from None
        except DatasetError as exc:
            raise DatasetError(f"{where}: {exc}") from None
        scenes.append(scene)
    return vocab, scenes


def _lookup(table: Dict[str, int], key, what: str) -> int:
    if isinstance(key, int):
        if not 0 <= key < len(table):
            raise DatasetError(f"field {what!r}: index {key} out of range")
        return key
    if key not in table:
        raise DatasetError(f"field {what!r}: unknown name {key!r}")
    return table[key]


def save_dataset(path, vocab: Vocabulary, scenes: Sequence[Scene],
                 embeddings: Optional[np.ndarray] = None) -> None:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    vocab_json = {"entity_classes": list(vocab.entity_classes),
                  "predicate_classes": list(vocab.predicate_classes)}
    for name in ("head_set", "body_set", "tail_set"):
        if getattr(vocab, name):
            vocab_json[name] = sorted(getattr(vocab, name))
    (path / "vocab.json").write_text(json.dumps(vocab_json, indent=1) + "\n")

    with open(path / "scenes.jsonl", "w") as fh:
        for s in scenes:
            rec = {
                "image_id": s.image_id, "width": s.width, "height": s.height, "split": s.split,
                "entities": [{"class": vocab.entity_classes[c], "bbox": [float(x) for x in b]}
                             for c, b in zip(s.labels, s.boxes)],
                "relations": [{"sub": int(a), "obj": int(b), "predicate": vocab.predicate_classes[p]}
                              for (a, b), p in zip(s.rel_pairs, s.predicates)],
            }
            fh.write(json.dumps(rec) + "\n")

    if scenes and all(s.has_features for s in scenes):
        dims = {s.features.shape[1] for s in scenes if s.n_entities}
        if len(dims) > 1:
            raise DatasetError(f"feature dimension differs across scenes: {sorted(dims)}")
        dim = dims.pop() if dims else 0
        entries, offset = [], 0
        with open(path / "features.bin", "wb") as fh:
            for s in scenes:
                block = np.concatenate([s.features.reshape(-1, dim),
                                        s.union_features.reshape(-1, dim)]).astype("<f4")
                fh.write(block.tobytes())
                entries.append({"image_id": s.image_id, "n_entities": s.n_entities,
                                "n_relations": s.n_relations, "offset": offset})
                offset += block.size
        manifest = {"version": FEATURES_VERSION, "D": dim, "dtype": "float32-le",
                    "n_scenes": len(scenes), "n_floats": offset, "scenes": entries}
        (path / "features.json").write_text(json.dumps(manifest) + "\n")
    if embeddings is not None:
        save_embeddings(path, vocab, embeddings)


def save_embeddings(path, vocab: Vocabulary, embeddings: np.ndarray) -> None:
    path = Path(path)
    emb = np.asarray(embeddings, dtype="<f4")
    if emb.shape[0] != vocab.n_entities:
        raise DatasetError("one embedding row per entity class required")
    emb.tofile(path / "embeddings.bin")
    (path / "embeddings.json").write_text(json.dumps(
        {"version": 1, "D_w": int(emb.shape[1]), "classes": list(vocab.entity_classes)}) + "\n")


def load_embeddings(path, vocab: Vocabulary) -> np.ndarray:
    path = Path(path)
    meta = _read_json(path / "embeddings.json")
    dim = int(meta["D_w"])
    emb = np.fromfile(path / "embeddings.bin", dtype="<f4")
    names = list(meta["classes"])
    if emb.size != dim * len(names):
        raise DatasetError(f"{path / 'embeddings.bin'}: size does not match manifest")
    emb = emb.reshape(len(names), dim)
    row = {n: i for i, n in enumerate(names)}
    missing = [c for c in vocab.entity_classes if c not in row]
    if missing:
        raise DatasetError(f"missing embedding for class {missing[0]!r}")
    return emb[[row[c] for c in vocab.entity_classes]].copy()


def split_scenes(scenes: Sequence[Scene], split: str) -> List[Scene]:
    return [s for s in scenes if s.split == split]
