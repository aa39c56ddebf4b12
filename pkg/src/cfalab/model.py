"""Small two-stage relation classifier with analytic gradients.

Entity stage:   f_i = relu(W_obj [v_i, box_i] + b_obj),  class scores = W_cls f_i
Relation stage: g   = mean_j f_j over the scene
                f~_i = relu(W_rel [v_i, f_i, w_i, g] + b_rel)
                scores_ij = W_pred (relu(W_pair [f~_i, f~_j]) * (W_u u_ij))
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Dict, Iterator, List, Optional, Sequence, Tuple

import numpy as np

CKPT_MAGIC = b"CFAM"
CKPT_VERSION = 1

PARAM_NAMES = ("W_obj", "b_obj", "W_cls", "W_rel", "b_rel", "W_pair", "W_u", "W_pred")


class NonFiniteError(FloatingPointError):
    pass


@dataclass
class ModelParams:
    W_obj: np.ndarray    # (H, D+4)
    b_obj: np.ndarray    # (H,)
    W_cls: np.ndarray    # (O, H)
    W_rel: np.ndarray    # (2H, D+H+D_w+H)
    b_rel: np.ndarray    # (2H,)
    W_pair: np.ndarray   # (H, 4H)
    W_u: np.ndarray      # (H, D)
    W_pred: np.ndarray   # (P, H)

    @property
    def dims(self) -> Dict[str, int]:
        h, d4 = self.W_obj.shape
        d = d4 - 4
        return {"D": d, "H": h, "D_w": self.W_rel.shape[1] - d - 2 * h,
                "O": self.W_cls.shape[0], "P": self.W_pred.shape[0]}

    def items(self) -> Iterator[Tuple[str, np.ndarray]]:
        for name in PARAM_NAMES:
            yield name, getattr(self, name)

    def copy(self) -> "ModelParams":
        return ModelParams(**{k: v.copy() for k, v in self.items()})

    def check(self) -> None:
        d = self.dims
        expect = {"W_obj": (d["H"], d["D"] + 4), "b_obj": (d["H"],), "W_cls": (d["O"], d["H"]),
                  "W_rel": (2 * d["H"], d["D"] + 2 * d["H"] + d["D_w"]), "b_rel": (2 * d["H"],),
                  "W_pair": (d["H"], 4 * d["H"]), "W_u": (d["H"], d["D"]),
                  "W_pred": (d["P"], d["H"])}
        for name, arr in self.items():
            if arr.shape != expect[name]:
                raise ValueError(f"{name}: shape {arr.shape} != {expect[name]}")
            if not np.all(np.isfinite(arr)):
                raise NonFiniteError(f"{name}: non-finite entries")


def init_params(D: int, H: int, D_w: int, n_classes: int, n_predicates: int,
                rng: np.random.Generator) -> ModelParams:
    def w(out, fan_in, gain=2.0):
        return rng.normal(0.0, np.sqrt(gain / fan_in), size=(out, fan_in))

    return ModelParams(
        W_obj=w(H, D + 4), b_obj=np.full(H, 0.01),
        W_cls=w(n_classes, H, 1.0),
        W_rel=w(2 * H, D + 2 * H + D_w), b_rel=np.full(2 * H, 0.01),
        W_pair=w(H, 4 * H), W_u=w(H, D, 1.0), W_pred=w(n_predicates, H, 1.0),
    )


def zeros_like(params: ModelParams) -> ModelParams:
    return ModelParams(**{k: np.zeros_like(v) for k, v in params.items()})


# --------------------------------------------------------------------------- batches

@dataclass
class Batch:
    """Entities of several scenes stacked row-wise; pairs index into the stack."""

    x: np.ndarray            # (N, D) entity features
    boxes: np.ndarray        # (N, 4) normalized boxes
    emb: np.ndarray          # (N, D_w) class embedding per entity
    scene: np.ndarray        # (N,) scene index within batch
    labels: np.ndarray       # (N,) entity targets
    pairs: np.ndarray        # (R, 2)
    union: np.ndarray        # (R, D)
    targets: np.ndarray      # (R, P) predicate target distributions
    cl_orig: np.ndarray      # (M, D+4) entity-encoder inputs before mixup
    cl_mixed: np.ndarray     # (M, D+4) ... after mixup

    @property
    def n_scenes(self) -> int:
        return int(self.scene.max()) + 1 if len(self.scene) else 0


def _scene_mean_matrix(scene: np.ndarray, n_scenes: int) -> np.ndarray:
    a = np.zeros((n_scenes, len(scene)))
    a[scene, np.arange(len(scene))] = 1.0
    a /= np.maximum(a.sum(1, keepdims=True), 1.0)
    return a


def relu(x):
    return np.maximum(x, 0.0)


def log_softmax(scores: np.ndarray) -> np.ndarray:
    scores = np.asarray(scores, dtype=np.float64)
    shifted = scores - scores.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def softmax(scores: np.ndarray) -> np.ndarray:
    return np.exp(log_softmax(scores))


def forward_entity(params: ModelParams, v: np.ndarray, box: np.ndarray):
    """Entity representation f and class scores for rows of features and normalized boxes."""
    x = np.concatenate([np.atleast_2d(v), np.atleast_2d(box)], axis=1)
    f = relu(x @ params.W_obj.T + params.b_obj)
    return f, f @ params.W_cls.T


def forward(params: ModelParams, batch: Batch, cache: bool = False):
    """Return (predicate scores, entity class scores[, cache])."""
    x = np.concatenate([batch.x, batch.boxes], axis=1)
    a1 = x @ params.W_obj.T + params.b_obj
    f = relu(a1)
    cls_scores = f @ params.W_cls.T
    avg = _scene_mean_matrix(batch.scene, batch.n_scenes)
    ctx = (avg @ f)[batch.scene]
    y = np.concatenate([batch.x, f, batch.emb, ctx], axis=1)
    a2 = y @ params.W_rel.T + params.b_rel
    ft = relu(a2)
    c = np.concatenate([ft[batch.pairs[:, 0]], ft[batch.pairs[:, 1]]], axis=1)
    a3 = c @ params.W_pair.T
    h = relu(a3)
    q = batch.union @ params.W_u.T
    m = h * q
    scores = m @ params.W_pred.T
    if not cache:
        return scores, cls_scores
    return scores, cls_scores, dict(x=x, a1=a1, f=f, avg=avg, y=y, a2=a2, c=c, a3=a3, h=h, q=q, m=m)


def forward_relation(params: ModelParams, v: np.ndarray, boxes: np.ndarray, emb: np.ndarray,
                     pairs, union: np.ndarray) -> np.ndarray:
    """Predicate scores for pairs of a single scene."""
    v = np.asarray(v, dtype=np.float64)
    pairs = np.asarray(pairs, dtype=np.int64).reshape(-1, 2)
    n = len(v)
    if pairs.size and (pairs.min() < 0 or pairs.max() >= n or np.any(pairs[:, 0] == pairs[:, 1])):
        raise IndexError(f"invalid pair indices for a scene with {n} entities")
    batch = Batch(v, np.asarray(boxes, float), np.asarray(emb, float), np.zeros(n, np.int64),
                  np.zeros(n, np.int64), pairs, np.asarray(union, float).reshape(len(pairs), -1),
                  np.zeros((len(pairs), params.W_pred.shape[0])), np.zeros((0, v.shape[1] + 4)),
                  np.zeros((0, v.shape[1] + 4)))
    return forward(params, batch)[0]


# --------------------------------------------------------------------------- losses

def soft_xe_loss(scores: np.ndarray, target: np.ndarray) -> float:
    """-sum_c target_c log softmax(scores)_c for one score row."""
    return float(-(np.asarray(target, float) * log_softmax(scores)).sum())


def xe_loss(scores: np.ndarray, label: int) -> float:
    return float(-log_softmax(scores)[label])


def _cosine_matrix(z: np.ndarray):
    norms = np.linalg.norm(z, axis=1)
    if np.any(norms == 0):
        raise ValueError("contrastive loss: zero-norm vector, cosine undefined")
    n = z / norms[:, None]
    return n, norms, n @ n.T


def _positive_index(m2: int) -> np.ndarray:
    # rows 0..M-1 are originals, M..2M-1 their mixed counterparts
    half = m2 // 2
    return np.concatenate([np.arange(half, m2), np.arange(half)])


def contrastive_loss(pairs: Sequence[Tuple[np.ndarray, np.ndarray]], tau: float) -> float:
    """Mean NT-Xent over all 2M vectors; every other vector is a negative."""
    z = np.array([a for a, _ in pairs] + [b for _, b in pairs], dtype=np.float64)
    return _contrastive(z, tau)[0]


def _contrastive(z: np.ndarray, tau: float, grad: bool = False):
    if tau <= 0:
        raise ValueError("tau must be > 0")
    m2 = len(z)
    if m2 < 2:
        raise ValueError("contrastive loss needs at least one pair")
    n, norms, sim = _cosine_matrix(z)
    logits = sim / tau
    np.fill_diagonal(logits, -np.inf)
    logp = log_softmax(logits)
    pos = _positive_index(m2)
    loss = float(-logp[np.arange(m2), pos].mean())
    if not grad:
        return loss, None
    p = np.exp(logp)
    p[np.arange(m2), pos] -= 1.0
    d_sim = p / (tau * m2)
    dn = (d_sim + d_sim.T) @ n
    dz = (dn - n * (n * dn).sum(1, keepdims=True)) / norms[:, None]
    return loss, dz


def total_loss(l_rel: float, l_obj: float, l_cl: float, beta: float) -> float:
    return l_rel + l_obj + beta * l_cl


# --------------------------------------------------------------------------- backward

@dataclass
class LossTerms:
    rel: float
    obj: float
    cl: float
    total: float


def loss_and_grads(params: ModelParams, batch: Batch, beta: float = 0.1, tau: float = 0.5,
                   obj_loss: bool = False, need_grads: bool = True):
    """Mean relation XE + mean entity XE (optional) + beta * contrastive, and its gradients."""
    scores, cls_scores, k = forward(params, batch, cache=True)
    n_rel = max(len(batch.pairs), 1)
    logp = log_softmax(scores)
    l_rel = float(-(batch.targets * logp).sum() / n_rel)
    n_ent = max(len(batch.labels), 1)
    l_obj = 0.0
    if obj_loss and len(batch.labels):
        lp_cls = log_softmax(cls_scores)
        l_obj = float(-lp_cls[np.arange(len(batch.labels)), batch.labels].sum() / n_ent)
    l_cl, dz = 0.0, None
    use_cl = beta > 0 and len(batch.cl_orig) > 0
    if use_cl:
        xc = np.concatenate([batch.cl_orig, batch.cl_mixed])
        ac = xc @ params.W_obj.T + params.b_obj
        z = relu(ac)
        # pairs with a dead (all-zero) representation have no defined cosine
        half = len(batch.cl_orig)
        alive = (np.abs(z[:half]).sum(1) > 0) & (np.abs(z[half:]).sum(1) > 0)
        keep = np.concatenate([alive, alive])
        use_cl = bool(alive.any())
        if use_cl:
            xc, ac = xc[keep], ac[keep]
            l_cl, dz = _contrastive(z[keep], tau, grad=need_grads)
    terms = LossTerms(l_rel, l_obj, l_cl, total_loss(l_rel, l_obj, l_cl, beta))
    if not need_grads:
        return terms, None

    g = zeros_like(params)
    d_scores = (np.exp(logp) * batch.targets.sum(1, keepdims=True) - batch.targets) / n_rel
    g.W_pred = d_scores.T @ k["m"]
    dm = d_scores @ params.W_pred
    dh, dq = dm * k["q"], dm * k["h"]
    g.W_u = dq.T @ batch.union
    da3 = dh * (k["a3"] > 0)
    g.W_pair = da3.T @ k["c"]
    dc = da3 @ params.W_pair
    two_h = params.W_rel.shape[0]
    dft = np.zeros((len(batch.x), two_h))
    np.add.at(dft, batch.pairs[:, 0], dc[:, :two_h])
    np.add.at(dft, batch.pairs[:, 1], dc[:, two_h:])
    da2 = dft * (k["a2"] > 0)
    g.W_rel = da2.T @ k["y"]
    g.b_rel = da2.sum(0)
    dy = da2 @ params.W_rel
    d, h = batch.x.shape[1], params.W_obj.shape[0]
    d_emb = batch.emb.shape[1]
    df = dy[:, d:d + h].copy()
    d_ctx = dy[:, d + h + d_emb:]
    avg = k["avg"]
    df += avg.T @ _segment_sum(d_ctx, batch.scene, avg.shape[0])
    if obj_loss and len(batch.labels):
        d_cls = np.exp(lp_cls)
        d_cls[np.arange(len(batch.labels)), batch.labels] -= 1.0
        d_cls /= n_ent
        g.W_cls = d_cls.T @ k["f"]
        df += d_cls @ params.W_cls
    da1 = df * (k["a1"] > 0)
    g.W_obj = da1.T @ k["x"]
    g.b_obj = da1.sum(0)
    if use_cl:
        dac = beta * dz * (ac > 0)
        g.W_obj += dac.T @ xc
        g.b_obj += dac.sum(0)
    for name, arr in g.items():
        if not np.all(np.isfinite(arr)):
            raise NonFiniteError(f"non-finite gradient for {name}")
    return terms, g


def _segment_sum(values: np.ndarray, seg: np.ndarray, n: int) -> np.ndarray:
    out = np.zeros((n, values.shape[1]))
    np.add.at(out, seg, values)
    return out


def sgd_step(params: ModelParams, grads: ModelParams, lr: float) -> ModelParams:
    return ModelParams(**{k: v - lr * getattr(grads, k) for k, v in params.items()})


# --------------------------------------------------------------------------- checkpoint

def save_checkpoint(params: ModelParams, path, meta: Optional[dict] = None) -> None:
    """Versioned binary: header, JSON meta, then per tensor (ndim, shape, float32 data)."""
    meta_bytes = json.dumps(meta or {}, sort_keys=True).encode()
    out = bytearray(struct.pack("<4sII", CKPT_MAGIC, CKPT_VERSION, len(meta_bytes)))
    out += meta_bytes
    out += struct.pack("<I", len(PARAM_NAMES))
    for name, arr in params.items():
        nb = name.encode()
        out += struct.pack("<I", len(nb)) + nb
        out += struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape)
        out += np.ascontiguousarray(arr, dtype="<f4").tobytes()
    Path(path).write_bytes(bytes(out))


def load_checkpoint(path) -> Tuple[ModelParams, dict]:
    raw = Path(path).read_bytes()
    magic, version, n_meta = struct.unpack_from("<4sII", raw)
    if magic != CKPT_MAGIC:
        raise ValueError(f"{path}: not a checkpoint")
    if version != CKPT_VERSION:
        raise ValueError(f"{path}: checkpoint version {version} unsupported")
    pos = 12
    meta = json.loads(raw[pos:pos + n_meta])
    pos += n_meta
    (count,) = struct.unpack_from("<I", raw, pos)
    pos += 4
    tensors = {}
    for _ in range(count):
        (ln,) = struct.unpack_from("<I", raw, pos)
        name = raw[pos + 4:pos + 4 + ln].decode()
        pos += 4 + ln
        (ndim,) = struct.unpack_from("<I", raw, pos)
        shape = struct.unpack_from(f"<{ndim}I", raw, pos + 4)
        pos += 4 + 4 * ndim
        size = int(np.prod(shape))
        tensors[name] = np.frombuffer(raw, dtype="<f4", count=size, offset=pos).reshape(shape).astype(np.float64)
        pos += 4 * size
    params = ModelParams(**tensors)
    params.check()
    return params, meta
