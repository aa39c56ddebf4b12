"""Feature bank of tail-predicate triplets with triplet and pair indices."""

from __future__ import annotations

import json
import struct
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Sequence, Tuple

import numpy as np

from .data import DatasetError, Scene, Vocabulary, pair_spatial_vectors

BANK_MAGIC = b"CFAB"
BANK_VERSION = 1
_HEADER = struct.Struct("<4sIII")    # magic, version, D, count


@dataclass(frozen=True)
class BankEntry:
    sub_class: int
    obj_class: int
    predicate_id: int
    v_s: np.ndarray
    v_o: np.ndarray
    u: np.ndarray
    p_vec: np.ndarray
    image_id: str


@dataclass(eq=False)
class FeatureBank:
    """Column-wise store; entry ``i`` is row ``i`` of every array."""

    dim: int
    tail_set: frozenset
    sub_class: np.ndarray
    obj_class: np.ndarray
    predicate: np.ndarray
    v_s: np.ndarray          # (n, D) float32
    v_o: np.ndarray
    u: np.ndarray
    p_vec: np.ndarray        # (n, 2) float32
    image_ids: List[str]
    by_triplet: Dict[Tuple[int, int, int], np.ndarray] = field(init=False)
    by_pair: Dict[Tuple[int, int], np.ndarray] = field(init=False)

    def __post_init__(self):
        trip, pair = defaultdict(list), defaultdict(list)
        for i, (s, p, o) in enumerate(zip(self.sub_class, self.predicate, self.obj_class)):
            trip[(int(s), int(p), int(o))].append(i)
            pair[(int(s), int(o))].append(i)
        self.by_triplet = {k: np.array(v, dtype=np.int64) for k, v in trip.items()}
        self.by_pair = {k: np.array(v, dtype=np.int64) for k, v in pair.items()}

    def __len__(self) -> int:
        return len(self.predicate)

    def entry(self, i: int) -> BankEntry:
        return BankEntry(int(self.sub_class[i]), int(self.obj_class[i]), int(self.predicate[i]),
                         self.v_s[i], self.v_o[i], self.u[i], self.p_vec[i], self.image_ids[i])

    def equals(self, other: "FeatureBank") -> bool:
        arrays = ("sub_class", "obj_class", "predicate", "v_s", "v_o", "u", "p_vec")
        return (self.dim == other.dim and self.tail_set == other.tail_set
                and self.image_ids == other.image_ids
                and all(np.array_equal(getattr(self, a), getattr(other, a)) for a in arrays))


def _empty(dim: int, tail_set) -> FeatureBank:
    z = np.zeros((0, dim), dtype=np.float32)
    i = np.zeros(0, dtype=np.int64)
    return FeatureBank(dim, frozenset(tail_set), i, i.copy(), i.copy(), z, z.copy(), z.copy(),
                       np.zeros((0, 2), dtype=np.float32), [])


def build_bank(scenes: Sequence[Scene], vocab: Vocabulary, tail_set=None) -> FeatureBank:
    """One entry per annotated relation whose predicate is in the tail set."""
    tail_set = frozenset(vocab.tail_set if tail_set is None else tail_set)
    missing = [s.image_id for s in scenes if not s.has_features]
    if missing:
        raise DatasetError(f"scenes without feature vectors: {missing[:10]}"
                           + (" ..." if len(missing) > 10 else ""))
    dims = {s.features.shape[1] for s in scenes}
    if len(dims) > 1:
        raise DatasetError(f"feature dimension differs across scenes: {sorted(dims)}")
    dim = dims.pop() if dims else 0
    cols = defaultdict(list)
    ids: List[str] = []
    tail_arr = np.array(sorted(tail_set), dtype=np.int64)
    for s in scenes:
        keep = np.flatnonzero(np.isin(s.predicates, tail_arr))
        if not len(keep):
            continue
        pairs = s.rel_pairs[keep]
        cols["sub"].append(s.labels[pairs[:, 0]])
        cols["obj"].append(s.labels[pairs[:, 1]])
        cols["pred"].append(s.predicates[keep])
        cols["vs"].append(s.features[pairs[:, 0]])
        cols["vo"].append(s.features[pairs[:, 1]])
        cols["u"].append(s.union_features[keep])
        cols["p"].append(pair_spatial_vectors(s.boxes, pairs))
        ids.extend([s.image_id] * len(keep))
    if not ids:
        return _empty(dim, tail_set)
    cat = {k: np.concatenate(v) for k, v in cols.items()}
    f32 = lambda a: np.ascontiguousarray(a, dtype=np.float32)
    return FeatureBank(dim, tail_set, cat["sub"].astype(np.int64), cat["obj"].astype(np.int64),
                       cat["pred"].astype(np.int64), f32(cat["vs"]), f32(cat["vo"]), f32(cat["u"]),
                       f32(cat["p"]), ids)


def _spatial_filter(bank: FeatureBank, ids: np.ndarray, p_query, sigma: float) -> List[int]:
    if not -1.0 <= sigma <= 1.0:
        raise ValueError("sigma must lie in [-1, 1]")
    if ids is None or not len(ids):
        return []
    q = np.asarray(p_query, dtype=np.float64)
    qn = np.linalg.norm(q)
    if qn == 0:
        return []
    p = bank.p_vec[ids].astype(np.float64)
    pn = np.linalg.norm(p, axis=1)
    with np.errstate(invalid="ignore", divide="ignore"):
        cos = (p @ q) / (pn * qn)
    # sigma = -1 admits every nonzero direction, including the exact opposite
    ok = (pn > 0) & ((cos > sigma) | (sigma == -1.0))
    return [int(i) for i in ids[ok]]


def query_by_triplet(bank: FeatureBank, key: Tuple[int, int, int], p_query, sigma: float) -> List[int]:
    """Entries with exactly (sub_class, predicate, obj_class) == key passing the spatial test."""
    return _spatial_filter(bank, bank.by_triplet.get(tuple(int(k) for k in key)), p_query, sigma)


def query_by_pair(bank: FeatureBank, pair: Tuple[int, int], p_query, sigma: float) -> List[int]:
    return _spatial_filter(bank, bank.by_pair.get(tuple(int(k) for k in pair)), p_query, sigma)


def _record_dtype(d: int) -> np.dtype:
    return np.dtype([("sub", "<i4"), ("obj", "<i4"), ("pred", "<i4"), ("image", "<i4"),
                     ("v_s", "<f4", (d,)), ("v_o", "<f4", (d,)), ("u", "<f4", (d,)),
                     ("p_vec", "<f4", (2,))])


def save_bank(bank: FeatureBank, path) -> None:
    """Write ``bank.bin`` and ``bank.json`` into directory ``path``."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    n, d = len(bank), bank.dim
    rec = np.zeros(n, dtype=_record_dtype(d))
    rec["sub"], rec["obj"], rec["pred"] = bank.sub_class, bank.obj_class, bank.predicate
    rec["image"] = np.arange(n)
    rec["v_s"], rec["v_o"], rec["u"], rec["p_vec"] = bank.v_s, bank.v_o, bank.u, bank.p_vec
    (path / "bank.bin").write_bytes(_HEADER.pack(BANK_MAGIC, BANK_VERSION, d, n) + rec.tobytes())
    counts = {"%d,%d,%d" % k: len(v) for k, v in sorted(bank.by_triplet.items())}
    manifest = {"version": BANK_VERSION, "D": d, "n_entries": n,
                "tail_set": sorted(int(t) for t in bank.tail_set),
                "image_ids": bank.image_ids, "triplet_counts": counts}
    (path / "bank.json").write_text(json.dumps(manifest) + "\n")


def load_bank(path, expected_dim: int = None) -> FeatureBank:
    path = Path(path)
    meta = json.loads((path / "bank.json").read_text())
    raw = (path / "bank.bin").read_bytes()
    if len(raw) < _HEADER.size:
        raise DatasetError(f"{path / 'bank.bin'}: truncated header")
    magic, version, d, n = _HEADER.unpack_from(raw)
    if magic != BANK_MAGIC:
        raise DatasetError(f"{path / 'bank.bin'}: bad magic")
    if version != BANK_VERSION or meta.get("version") != BANK_VERSION:
        raise DatasetError(f"{path}: bank version {version} unsupported")
    if d != meta["D"] or n != meta["n_entries"]:
        raise DatasetError(f"{path}: header disagrees with bank.json")
    if expected_dim is not None and d != expected_dim:
        raise DatasetError(f"{path}: bank dimension {d} != expected {expected_dim}")
    dt = _record_dtype(d)
    if len(raw) - _HEADER.size != n * dt.itemsize:
        raise DatasetError(f"{path / 'bank.bin'}: size does not match header")
    if n == 0:
        return _empty(d, meta["tail_set"])
    rec = np.frombuffer(raw, dtype=dt, offset=_HEADER.size)
    f32 = lambda name: np.ascontiguousarray(rec[name], dtype=np.float32)
    return FeatureBank(d, frozenset(meta["tail_set"]), rec["sub"].astype(np.int64),
                       rec["obj"].astype(np.int64), rec["pred"].astype(np.int64),
                       f32("v_s"), f32("v_o"), f32("u"), f32("p_vec"), list(meta["image_ids"]))
