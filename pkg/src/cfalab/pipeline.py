"""Training and evaluation of the relation classifier with optional CFA."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .augment import (AugmentConfig, AugmentTrace, SamplerConfig, build_epoch, extrinsic_augment,
                      intrinsic_augment, one_hot, predicate_fg_probabilities,
                      select_context_triplets, uses_repeat_factor)
from .bank import FeatureBank, build_bank
from .data import (DatasetStats, Scene, Vocabulary, assign_groups, compute_stats,
                   pair_spatial_vectors, split_scenes)
from .metrics import ImageGT, ImagePrediction, MetricReport, evaluate, mean_metric
from .model import (Batch, ModelParams, NonFiniteError, forward, forward_entity, init_params,
                    loss_and_grads, sgd_step, softmax)
from .similarity import (ClusterAssignment, SimilarityWeights, cluster_entities,
                         combined_similarity)

log = logging.getLogger(__name__)

REGIMES = ("predcls", "sgcls")


class TrainingDiverged(FloatingPointError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 0.1
    epochs: int = 30
    batch_size: int = 8
    tau: float = 0.5
    beta: float = 0.1
    hidden: int = 32
    neg_ratio: float = 2.0      # sampled background pairs per annotated relation
    regime: str = "predcls"
    seed: int = 0
    val_k: int = 20

    def __post_init__(self):
        if self.tau <= 0:
            raise ValueError("tau must be > 0")
        if self.beta < 0:
            raise ValueError("beta must be >= 0")
        if self.regime not in REGIMES:
            raise ValueError(f"regime must be one of {REGIMES}")


def default_union(v_s: np.ndarray, v_o: np.ndarray) -> np.ndarray:
    """Union feature for pairs without an annotated union vector."""
    return 0.5 * (np.asarray(v_s, dtype=np.float64) + np.asarray(v_o, dtype=np.float64))


def normalized_boxes(scene: Scene) -> np.ndarray:
    return scene.boxes / np.array([scene.width, scene.height, scene.width, scene.height])


@dataclass
class Context:
    """Everything built from the training split before training starts."""

    vocab: Vocabulary
    train: List[Scene]
    val: List[Scene]
    test: List[Scene]
    stats: DatasetStats
    embeddings: np.ndarray
    bank: FeatureBank
    clusters: ClusterAssignment


def prepare(vocab: Vocabulary, scenes: Sequence[Scene], embeddings: np.ndarray, k: int,
            weights: SimilarityWeights = SimilarityWeights(), tail_quantile: float = 0.5,
            head_quantile: float = 0.9) -> Context:
    train = split_scenes(scenes, "train")
    stats = compute_stats(train, vocab)
    vocab = assign_groups(vocab, stats, tail_quantile, head_quantile)
    clusters = cluster_entities(combined_similarity(stats, embeddings, weights), k)
    bank = build_bank(train, vocab)
    return Context(vocab, train, split_scenes(scenes, "val"), split_scenes(scenes, "test"),
                   stats, np.asarray(embeddings, dtype=np.float64), bank, clusters)


# --------------------------------------------------------------------------- instances

@dataclass
class Instance:
    features: np.ndarray       # (n, D)
    boxes: np.ndarray          # (n, 4) normalized
    labels: np.ndarray
    pairs: np.ndarray          # (r, 2)
    union: np.ndarray          # (r, D)
    targets: np.ndarray        # (r, P)
    cl_orig: List[np.ndarray] = field(default_factory=list)
    cl_mixed: List[np.ndarray] = field(default_factory=list)


def build_instance(scene: Scene, ctx: Context, sampler: SamplerConfig, augment: AugmentConfig,
                   fg_probs: np.ndarray, neg_ratio: float, rng_aug: np.random.Generator,
                   rng_neg: np.random.Generator, trace: Optional[AugmentTrace] = None) -> Instance:
    n_pred = ctx.vocab.n_predicates
    feats = scene.features.astype(np.float64)
    labels = scene.labels.copy()
    pairs = [tuple(map(int, p)) for p in scene.rel_pairs]
    union: Dict[Tuple[int, int], np.ndarray] = {
        p: u.astype(np.float64) for p, u in zip(pairs, scene.union_features)}
    targets: Dict[Tuple[int, int], np.ndarray] = {
        p: one_hot(int(r), n_pred) for p, r in zip(pairs, scene.predicates)}
    nbox = normalized_boxes(scene)

    # background pairs; drawn from their own stream so augmentation never shifts them
    annotated = set(pairs)
    free = [(s, o) for s in range(scene.n_entities) for o in range(scene.n_entities)
            if s != o and (s, o) not in annotated]
    n_neg = min(len(free), int(math.ceil(neg_ratio * len(pairs))))
    negatives = [free[i] for i in sorted(rng_neg.choice(len(free), size=n_neg, replace=False))] \
        if n_neg else []
    for p in negatives:
        targets[p] = one_hot(0, n_pred)
    order = pairs + negatives

    cl_orig, cl_mixed = [], []
    if augment.intrinsic_enabled:
        tail = ctx.vocab.tail_set
        for (s, o), r in zip(pairs, scene.predicates):
            if int(r) not in tail or rng_aug.random() >= augment.intrinsic_rate:
                continue
            smp = intrinsic_augment(scene.image_id, (s, o), int(r), labels, feats, scene.boxes,
                                    union[(s, o)], ctx.bank, ctx.clusters, augment, rng_aug,
                                    n_pred, trace)
            if smp is not None:
                feats[s], feats[o] = smp.v_s, smp.v_o
                labels[s], labels[o] = smp.entity_targets

    if augment.extrinsic_fg_enabled or augment.extrinsic_bg_enabled:
        contexts = select_context_triplets(scene, fg_probs, ctx.bank, rng_aug, sampler.bg_prob,
                                           augment.extrinsic_fg_enabled,
                                           augment.extrinsic_bg_enabled)
        rel_of = {p: int(r) for p, r in zip(pairs, scene.predicates)}
        for (s, o), kind in contexts:
            u = union[(s, o)] if kind == "fg" else union.get((s, o), default_union(feats[s], feats[o]))
            p_ctx = pair_spatial_vectors(scene.boxes, [(s, o)])[0]
            smp = extrinsic_augment(scene.image_id, (s, o), kind, rel_of.get((s, o), 0),
                                    (int(labels[s]), int(labels[o])), feats[s], feats[o], u, p_ctx,
                                    ctx.bank, augment, rng_aug, n_pred, trace)
            if smp is None:
                continue
            for (orig, mixed), node in zip(smp.contrastive_pairs, (s, o)):
                cl_orig.append(np.concatenate([orig, nbox[node]]))
                cl_mixed.append(np.concatenate([mixed, nbox[node]]))
            feats[s], feats[o] = smp.v_s, smp.v_o
            union[(s, o)] = smp.u
            targets[(s, o)] = smp.predicate_target
            if (s, o) not in order:
                order.append((s, o))

    dim = feats.shape[1]
    u_rows = [union[p] if p in union else default_union(feats[p[0]], feats[p[1]]) for p in order]
    return Instance(
        feats, nbox, labels, np.array(order, dtype=np.int64).reshape(-1, 2),
        np.array(u_rows).reshape(-1, dim), np.array([targets[p] for p in order]).reshape(-1, n_pred),
        cl_orig, cl_mixed)


def collate(instances: Sequence[Instance], embeddings: np.ndarray) -> Batch:
    offs = np.cumsum([0] + [len(i.labels) for i in instances])
    dim = instances[0].features.shape[1]
    cl_o = [x for i in instances for x in i.cl_orig]
    cl_m = [x for i in instances for x in i.cl_mixed]
    labels = np.concatenate([i.labels for i in instances])
    return Batch(
        x=np.concatenate([i.features for i in instances]),
        boxes=np.concatenate([i.boxes for i in instances]),
        emb=embeddings[labels],
        scene=np.repeat(np.arange(len(instances)), [len(i.labels) for i in instances]),
        labels=labels,
        pairs=np.concatenate([i.pairs + o for i, o in zip(instances, offs)]),
        union=np.concatenate([i.union for i in instances]),
        targets=np.concatenate([i.targets for i in instances]),
        cl_orig=np.array(cl_o).reshape(-1, dim + 4),
        cl_mixed=np.array(cl_m).reshape(-1, dim + 4),
    )


# --------------------------------------------------------------------------- training

@dataclass
class TrainResult:
    params: ModelParams
    log: List[dict]
    trace: AugmentTrace


def train(ctx: Context, sampler: SamplerConfig, augment: AugmentConfig, cfg: TrainConfig,
          keep_trace: bool = False, validate: bool = True) -> TrainResult:
    if not ctx.train:
        raise ValueError("no training scenes")
    seed = cfg.seed
    d = ctx.train[0].features.shape[1]
    params = init_params(d, cfg.hidden, ctx.embeddings.shape[1], ctx.vocab.n_entities,
                         ctx.vocab.n_predicates, np.random.default_rng([seed, 0]))
    fg_probs = predicate_fg_probabilities(ctx.stats, sampler.lam, sampler.gamma)
    by_id = {s.image_id: s for s in ctx.train}
    rfs = uses_repeat_factor(sampler, augment)
    trace = AugmentTrace(keep_trace)
    history = []
    for epoch in range(cfg.epochs):
        rng_epoch = np.random.default_rng([seed, 1, epoch])
        if rfs:
            order = build_epoch(ctx.train, ctx.stats, sampler, rng_epoch)
        else:
            order = [ctx.train[i].image_id for i in rng_epoch.permutation(len(ctx.train))]
        sums = np.zeros(3)
        steps = 0
        for start in range(0, len(order), cfg.batch_size):
            insts = [
                build_instance(by_id[sid], ctx, sampler, augment, fg_probs, cfg.neg_ratio,
                               np.random.default_rng([seed, 2, epoch, pos]),
                               np.random.default_rng([seed, 3, epoch, pos]), trace)
                for pos, sid in enumerate(order[start:start + cfg.batch_size], start)
            ]
            batch = collate(insts, ctx.embeddings)
            try:
                terms, grads = loss_and_grads(params, batch, cfg.beta, cfg.tau,
                                              obj_loss=cfg.regime == "sgcls")
            except NonFiniteError as exc:
                raise TrainingDiverged(f"epoch {epoch} step {steps}: {exc}") from exc
            if not math.isfinite(terms.total):
                raise TrainingDiverged(f"epoch {epoch} step {steps}: loss {terms.total} "
                                       f"(rel={terms.rel}, obj={terms.obj}, cl={terms.cl})")
            params = sgd_step(params, grads, cfg.lr)
            sums += (terms.rel, terms.obj, terms.cl)
            steps += 1
        row = {"epoch": epoch + 1, "L_rel": sums[0] / steps, "L_obj": sums[1] / steps,
               "L_cl": sums[2] / steps}
        if validate and ctx.val:
            rep = evaluate_scenes(params, ctx.val, ctx, cfg.regime, ks=(cfg.val_k,))
            row[f"val_mR@{cfg.val_k}"] = rep.mean_recall[cfg.val_k]
            row[f"val_R@{cfg.val_k}"] = rep.recall[cfg.val_k]
        history.append(row)
        log.info("epoch %d %s", epoch + 1, row)
    return TrainResult(params, history, trace)


# --------------------------------------------------------------------------- prediction

def predict(params: ModelParams, scenes: Sequence[Scene], embeddings: np.ndarray,
            regime: str = "predcls", graph_constraint: bool = True,
            chunk: int = 64) -> List[ImagePrediction]:
    if regime not in REGIMES:
        raise ValueError(f"regime must be one of {REGIMES}")
    out: List[ImagePrediction] = []
    embeddings = np.asarray(embeddings, dtype=np.float64)
    for start in range(0, len(scenes), chunk):
        group = scenes[start:start + chunk]
        xs, bxs, labs, confs, pairs, unions, seg = [], [], [], [], [], [], []
        off = 0
        for k, s in enumerate(group):
            v = s.features.astype(np.float64)
            nb = normalized_boxes(s)
            if regime == "predcls":
                lab, conf = s.labels.copy(), np.ones(s.n_entities)
            else:
                _, cls_scores = forward_entity(params, v, nb)
                prob = softmax(cls_scores)
                lab, conf = prob.argmax(1), prob.max(1)
            ann = {tuple(map(int, p)): u for p, u in zip(s.rel_pairs, s.union_features)}
            n = s.n_entities
            pp = [(a, b) for a in range(n) for b in range(n) if a != b]
            unions.extend(ann[p].astype(np.float64) if p in ann else default_union(v[p[0]], v[p[1]])
                          for p in pp)
            pairs.append(np.array(pp, dtype=np.int64).reshape(-1, 2) + off)
            xs.append(v), bxs.append(nb), labs.append(lab), confs.append(conf)
            seg.append(np.full(n, k))
            off += n
        lab_all = np.concatenate(labs)
        dim = xs[0].shape[1]
        batch = Batch(np.concatenate(xs), np.concatenate(bxs), embeddings[lab_all],
                      np.concatenate(seg), lab_all, np.concatenate(pairs),
                      np.array(unions).reshape(-1, dim),
                      np.zeros((0, params.W_pred.shape[0])),
                      np.zeros((0, dim + 4)), np.zeros((0, dim + 4)))
        probs = softmax(forward(params, batch)[0])
        conf_all = np.concatenate(confs)
        row = 0
        ent_off = 0
        for k, s in enumerate(group):
            n = s.n_entities
            m = n * (n - 1)
            pr = probs[row:row + m]
            pp = batch.pairs[row:row + m] - ent_off
            pair_conf = conf_all[ent_off + pp[:, 0]] * conf_all[ent_off + pp[:, 1]]
            if graph_constraint:
                best = pr[:, 1:].argmax(1) + 1
                trip = np.column_stack([pp, best])
                score = pr[np.arange(m), best] * pair_conf
            else:
                n_p = pr.shape[1] - 1
                trip = np.column_stack([np.repeat(pp, n_p, axis=0),
                                        np.tile(np.arange(1, n_p + 1), m)])
                score = (pr[:, 1:] * pair_conf[:, None]).reshape(-1)
            out.append(ImagePrediction(trip, score, labs[k]))
            row += m
            ent_off += n
    return out


def ground_truth(scenes: Sequence[Scene]) -> List[ImageGT]:
    return [ImageGT(np.column_stack([s.rel_pairs, s.predicates]) if s.n_relations
                    else np.zeros((0, 3), np.int64), s.labels) for s in scenes]


def evaluate_scenes(params: ModelParams, scenes: Sequence[Scene], ctx: Context,
                    regime: str = "predcls", ks=(20, 50, 100),
                    graph_constraint: bool = True) -> MetricReport:
    preds = predict(params, scenes, ctx.embeddings, regime, graph_constraint)
    groups = {"head": ctx.vocab.head_set, "body": ctx.vocab.body_set, "tail": ctx.vocab.tail_set}
    return evaluate(preds, ground_truth(scenes), ks, groups)
