import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from cfalab.model import (NonFiniteError, contrastive_loss, forward, forward_entity,
                          forward_relation, init_params, load_checkpoint, loss_and_grads,
                          save_checkpoint, sgd_step, soft_xe_loss, total_loss, xe_loss,
                          zeros_like)

from conftest import finite_difference_errors, random_tiny_batch


def params(seed=0, D=3, H=4, D_w=2, O=4, P=4):
    return init_params(D, H, D_w, O, P, np.random.default_rng(seed))


# ----------------------------------------------------------------- forward

def test_zero_weights_entity():
    p = zeros_like(params())
    p.b_obj[:] = [0.5, -0.5, 0.0, 2.0]
    f, scores = forward_entity(p, np.ones(3), np.zeros(4))
    assert f.tolist() == [[0.5, 0.0, 0.0, 2.0]]
    assert scores.tolist() == [[0.0] * 4]


def naive_matvec(W, x):
    return [sum(W[i][j] * x[j] for j in range(len(x))) for i in range(len(W))]


def test_identity_entity_encoder():
    p = params(D=2, H=6, O=3)
    p.W_obj = np.eye(6)
    p.b_obj = np.zeros(6)
    v, box = np.array([1.0, -2.0]), np.array([0.1, 0.2, 0.3, 0.4])
    f, scores = forward_entity(p, v, box)
    assert f[0].tolist() == [1.0, 0.0, 0.1, 0.2, 0.3, 0.4]
    assert np.allclose(scores[0], naive_matvec(p.W_cls.tolist(), f[0].tolist()), atol=1e-14)
    assert scores.shape == (1, 3)


def naive_relation(p, v, boxes, emb, pairs, union):
    """Loop-only reference of the relation stage for one scene."""
    relu = lambda xs: [max(0.0, x) for x in xs]
    n = len(v)
    f = [relu([a + b for a, b in zip(naive_matvec(p.W_obj.tolist(), list(v[i]) + list(boxes[i])),
                                     p.b_obj)]) for i in range(n)]
    g = [sum(f[i][k] for i in range(n)) / n for k in range(len(f[0]))]
    ft = [relu([a + b for a, b in zip(naive_matvec(p.W_rel.tolist(),
                                                   list(v[i]) + f[i] + list(emb[i]) + g), p.b_rel)])
          for i in range(n)]
    out = []
    for (s, o), u in zip(pairs, union):
        h = relu(naive_matvec(p.W_pair.tolist(), ft[s] + ft[o]))
        q = naive_matvec(p.W_u.tolist(), list(u))
        out.append(naive_matvec(p.W_pred.tolist(), [a * b for a, b in zip(h, q)]))
    return np.array(out)


def test_relation_matches_loop_oracle():
    rng = np.random.default_rng(3)
    p = params(3)
    v, emb = rng.normal(size=(2, 3)), rng.normal(size=(2, 2))
    boxes = np.array([[0.1, 0.1, 0.4, 0.4], [0.5, 0.2, 0.9, 0.8]])
    pairs, union = [(0, 1), (1, 0)], rng.normal(size=(2, 3))
    got = forward_relation(p, v, boxes, emb, pairs, union)
    assert np.allclose(got, naive_relation(p, v, boxes, emb, pairs, union), atol=1e-12)


def test_zero_union_annihilates_scores():
    rng = np.random.default_rng(4)
    p = params(4)
    got = forward_relation(p, rng.normal(size=(2, 3)), rng.uniform(size=(2, 4)),
                           rng.normal(size=(2, 2)), [(0, 1)], np.zeros((1, 3)))
    assert np.array_equal(got, np.zeros((1, 4)))


def test_context_pathway_is_live():
    rng = np.random.default_rng(5)
    p = params(5)
    v, boxes, emb = rng.normal(size=(3, 3)), rng.uniform(size=(3, 4)), rng.normal(size=(3, 2))
    u = rng.normal(size=(1, 3))
    base = forward_relation(p, v, boxes, emb, [(0, 1)], u)
    v2 = v.copy()
    v2[2] += 3.0
    assert not np.allclose(base, forward_relation(p, v2, boxes, emb, [(0, 1)], u))


def test_invalid_pairs_rejected():
    p = params()
    with pytest.raises(IndexError):
        forward_relation(p, np.zeros((2, 3)), np.zeros((2, 4)), np.zeros((2, 2)), [(0, 2)],
                         np.zeros((1, 3)))


# ----------------------------------------------------------------- losses

def test_uniform_scores_give_log_c():
    for c in (2, 5, 17):
        t = np.random.default_rng(c).dirichlet(np.ones(c))
        assert soft_xe_loss(np.zeros(c), t) == pytest.approx(math.log(c), abs=1e-12)


@given(st.floats(0, 1), st.integers(0, 5), st.integers(0, 5),
       st.lists(st.floats(-30, 30), min_size=6, max_size=6))
def test_soft_xe_linearity(theta, a, b, scores):
    s = np.array(scores)
    t = np.zeros(6)
    t[a] += theta
    t[b] += 1 - theta
    assert abs(soft_xe_loss(s, t) - (theta * xe_loss(s, a) + (1 - theta) * xe_loss(s, b))) <= 1e-12


def test_soft_xe_direct_summation():
    rng = np.random.default_rng(6)
    for _ in range(50):
        s, t = rng.normal(scale=3, size=7), rng.dirichlet(np.ones(7))
        z = sum(math.exp(x) for x in s)
        naive = -sum(ti * (si - math.log(z)) for si, ti in zip(s, t))
        assert soft_xe_loss(s, t) == pytest.approx(naive, abs=1e-12)


def test_contrastive_single_pair_is_zero():
    assert contrastive_loss([(np.array([1.0, 2.0]), np.array([-3.0, 0.5]))], 0.5) == 0.0


def test_contrastive_orthogonal_pairs():
    e1, e2 = np.array([1.0, 0.0]), np.array([0.0, 1.0])
    expect = -math.log(math.e / (math.e + 2.0))
    assert contrastive_loss([(e1, e1), (e2, e2)], 1.0) == pytest.approx(expect, abs=1e-12)


def test_contrastive_scale_invariance_and_errors():
    rng = np.random.default_rng(7)
    pairs = [(rng.normal(size=4), rng.normal(size=4)) for _ in range(3)]
    scaled = [(a * 3.7, b * 0.2) for a, b in pairs]
    assert contrastive_loss(pairs, 0.5) == pytest.approx(contrastive_loss(scaled, 0.5), abs=1e-12)
    with pytest.raises(ValueError):
        contrastive_loss([(np.zeros(4), np.ones(4))], 0.5)
    with pytest.raises(ValueError):
        contrastive_loss(pairs, 0.0)


def test_contrastive_decreases_as_positive_aligns():
    rng = np.random.default_rng(8)
    a, other = rng.normal(size=3), [(rng.normal(size=3), rng.normal(size=3)) for _ in range(2)]
    b0 = rng.normal(size=3)
    losses = [contrastive_loss([(a, (1 - t) * b0 + t * a)] + other, 0.5)
              for t in np.linspace(0, 0.95, 8)]
    assert all(x > y for x, y in zip(losses, losses[1:]))


def test_total_loss_examples():
    assert total_loss(1.0, 2.0, 3.0, 0.0) == 3.0
    assert total_loss(0.0, 0.0, 0.0, 0.1) == 0.0
    assert total_loss(1.0, 2.0, 3.0, 0.1) == pytest.approx(3.3, abs=1e-12)


# ----------------------------------------------------------------- gradients

@pytest.mark.parametrize("seed", range(5))
def test_gradients_match_finite_differences(seed):
    rng = np.random.default_rng(seed)
    p = params(seed)
    batch = random_tiny_batch(rng)
    errs = finite_difference_errors(p, batch, beta=0.3, tau=0.5, obj_loss=bool(seed % 2))
    assert max(errs.values()) < 1e-4, errs


def test_soft_target_gradient_is_weighted_sum():
    rng = np.random.default_rng(9)
    p = params(9)
    batch = random_tiny_batch(rng, n_cl=0)
    theta = 0.3
    a, b = batch.targets.copy(), batch.targets.copy()
    a[:] = np.eye(4)[0]
    b[:] = np.eye(4)[2]
    grads = []
    for t in (a, b, theta * a + (1 - theta) * b):
        batch.targets = t
        grads.append(loss_and_grads(p, batch, beta=0.0)[1])
    for name, _ in p.items():
        mix = theta * getattr(grads[0], name) + (1 - theta) * getattr(grads[1], name)
        assert np.allclose(getattr(grads[2], name), mix, atol=1e-12)


def test_degenerate_identity_mixing_is_finite():
    rng = np.random.default_rng(10)
    p = params(10)
    batch = random_tiny_batch(rng)
    batch.cl_mixed = batch.cl_orig.copy()
    terms, g = loss_and_grads(p, batch, beta=0.5)
    assert math.isfinite(terms.total)
    assert all(np.all(np.isfinite(v)) for _, v in g.items())


def test_zero_learning_rate_keeps_params():
    p = params(11)
    _, g = loss_and_grads(p, random_tiny_batch(np.random.default_rng(11)))
    q = sgd_step(p, g, 0.0)
    assert all(np.array_equal(a, getattr(q, k)) for k, a in p.items())


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_non_finite_gradient_names_parameter():
    p = params(12)
    p.W_pred[0, 0] = np.inf
    with pytest.raises(NonFiniteError, match="W_"):
        loss_and_grads(p, random_tiny_batch(np.random.default_rng(12)))


def test_checkpoint_round_trip(tmp_path):
    p = params(13)
    p32 = type(p)(**{k: v.astype(np.float32).astype(np.float64) for k, v in p.items()})
    save_checkpoint(p32, tmp_path / "m.bin", {"seed": 13})
    back, meta = load_checkpoint(tmp_path / "m.bin")
    assert meta == {"seed": 13}
    assert all(np.array_equal(a, getattr(back, k)) for k, a in p32.items())
    save_checkpoint(back, tmp_path / "m2.bin", {"seed": 13})
    assert (tmp_path / "m.bin").read_bytes() == (tmp_path / "m2.bin").read_bytes()
