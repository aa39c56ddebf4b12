import numpy as np
import pytest

from cfalab.data import NO_RELATION, Vocabulary, make_scene


def box_at(cx, cy, half=1.0):
    return [cx - half, cy - half, cx + half, cy + half]


def toy_vocab(n_ent=4, n_pred=3):
    return Vocabulary(tuple(f"c{i}" for i in range(n_ent)),
                      (NO_RELATION,) + tuple(f"p{i}" for i in range(1, n_pred + 1)))


def random_micro_dataset(rng, n_scenes=None, n_classes=None, n_pred=None, dim=3):
    """Random small dataset with features: <= 10 scenes, <= 8 classes."""
    n_scenes = n_scenes or int(rng.integers(1, 11))
    n_classes = n_classes or int(rng.integers(2, 9))
    n_pred = n_pred or int(rng.integers(1, 6))
    vocab = toy_vocab(n_classes, n_pred)
    scenes = []
    for k in range(n_scenes):
        n = int(rng.integers(2, 6))
        labels = rng.integers(0, n_classes, n)
        centers = rng.uniform(2, 18, size=(n, 2))
        boxes = [box_at(x, y, 1.0) for x, y in centers]
        all_pairs = [(s, o) for s in range(n) for o in range(n) if s != o]
        m = int(rng.integers(0 if k else 1, min(len(all_pairs), 4) + 1))
        pick = rng.choice(len(all_pairs), size=m, replace=False)
        pairs = [all_pairs[i] for i in pick]
        preds = rng.integers(1, n_pred + 1, m)
        scenes.append(make_scene(f"img{k}", 20, 20, labels, boxes, pairs, preds,
                                 rng.normal(size=(n, dim)), rng.normal(size=(m, dim)),
                                 n_entity_classes=n_classes, n_predicates=n_pred + 1))
    return vocab, scenes


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def random_tiny_batch(rng, D=3, H=4, D_w=2, O=4, P=4, soft=True, n_cl=2):
    """One or two scenes of 2-4 entities with soft targets and contrastive pairs."""
    from cfalab.model import Batch

    sizes = rng.integers(2, 5, size=int(rng.integers(1, 3)))
    n = int(sizes.sum())
    scene = np.repeat(np.arange(len(sizes)), sizes)
    offs = np.concatenate([[0], np.cumsum(sizes)[:-1]])
    pairs = []
    for off, k in zip(offs, sizes):
        cand = [(off + a, off + b) for a in range(k) for b in range(k) if a != b]
        pick = rng.choice(len(cand), size=min(len(cand), 3), replace=False)
        pairs += [cand[i] for i in pick]
    r = len(pairs)
    targets = np.zeros((r, P))
    for i in range(r):
        a, b = rng.choice(P, size=2, replace=False)
        theta = rng.uniform(0.2, 0.8) if soft else 1.0
        targets[i, a] += theta
        targets[i, b] += 1.0 - theta
    lo, hi = np.sort(rng.uniform(0, 1, size=(n, 2, 2)), axis=1).transpose(1, 0, 2)
    boxes = np.concatenate([lo, hi], axis=1)
    return Batch(x=rng.normal(size=(n, D)), boxes=boxes, emb=rng.normal(size=(n, D_w)),
                 scene=scene, labels=rng.integers(0, O, n), pairs=np.array(pairs),
                 union=rng.normal(size=(r, D)), targets=targets,
                 cl_orig=rng.normal(size=(n_cl, D + 4)), cl_mixed=rng.normal(size=(n_cl, D + 4)))


def finite_difference_errors(params, batch, beta, tau, obj_loss, h=1e-4):
    """Per-tensor relative error ||g - g_fd|| / max(||g|| + ||g_fd||, 1e-12)."""
    from cfalab.model import loss_and_grads

    _, grads = loss_and_grads(params, batch, beta, tau, obj_loss)
    errors = {}
    for name, arr in params.items():
        fd = np.zeros_like(arr)
        for idx in np.ndindex(arr.shape):
            old = arr[idx]
            arr[idx] = old + h
            up = loss_and_grads(params, batch, beta, tau, obj_loss, need_grads=False)[0].total
            arr[idx] = old - h
            dn = loss_and_grads(params, batch, beta, tau, obj_loss, need_grads=False)[0].total
            arr[idx] = old
            fd[idx] = (up - dn) / (2 * h)
        g = getattr(grads, name)
        errors[name] = np.linalg.norm(g - fd) / max(np.linalg.norm(g) + np.linalg.norm(fd), 1e-12)
    return errors
