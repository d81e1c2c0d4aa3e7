import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.stats import ortho_group

from prnface import losses
from prnface.data import DatasetError
from prnface.losses import LossWeights
from prnface.numerics import nn
from prnface.numerics.gradcheck import grad_check
from prnface.numerics.nn import ParamStore
from prnface.numerics.tensor import Tensor


def terms(a, p, n, m=1.0):
    return losses.triplet_ratio_terms(np.asarray(a, float), np.asarray(p, float), np.asarray(n, float), m).data


def test_hinge_boundary_is_zero():
    assert terms([[0.0, 0.0]], [[0.0, 0.0]], [[2.0, 0.0]], m=2.0)[0] == 0.0


def test_collapsed_triplet_is_one():
    assert terms([[1.0, 2.0]], [[1.0, 2.0]], [[1.0, 2.0]])[0] == 1.0


def test_equal_distances_give_half():
    v = terms([[0.0, 0.0]], [[1.0, 0.0]], [[0.0, 1.0]])[0]
    assert abs(v - 0.5) <= 1e-12


def test_terms_lie_in_unit_interval():
    rng = np.random.default_rng(0)
    a, p, n = (rng.normal(scale=rng.uniform(0.01, 10), size=(10_000, 8)) for _ in range(3))
    t = terms(a, p, n, m=rng.uniform(0.1, 3))
    assert t.shape == (10_000,)
    assert t.min() >= 0 and t.max() <= 1


def test_hinge_invariant_to_rigid_motion():
    rng = np.random.default_rng(1)
    a, p, n = (rng.normal(size=(50, 6)) for _ in range(3))
    q = ortho_group.rvs(6, random_state=2)
    shift = rng.normal(size=6)
    moved = [x @ q.T + shift for x in (a, p, n)]
    np.testing.assert_allclose(terms(*moved), terms(a, p, n), atol=1e-12)


def test_triplet_loss_is_sum_of_terms():
    rng = np.random.default_rng(3)
    a, p, n = (rng.normal(size=(7, 4)) for _ in range(3))
    assert losses.triplet_ratio_loss(a, p, n).item() == pytest.approx(terms(a, p, n).sum(), abs=1e-12)


def test_margin_must_be_positive():
    with pytest.raises(ValueError):
        losses.triplet_ratio_terms(np.zeros((1, 2)), np.zeros((1, 2)), np.ones((1, 2)), margin=0.0)


def test_pairwise_hand_cases():
    assert losses.pairwise_loss(np.array([[1.0, 0.0]]), np.array([[0.0, 0.0]])).item() == 1.0
    assert losses.pairwise_loss(np.array([[3.0, -2.0]]), np.array([[3.0, -2.0]])).item() == 0.0


def test_pairwise_matches_reference():
    rng = np.random.default_rng(4)
    a, p = rng.normal(size=(5, 9)), rng.normal(size=(5, 9))
    ref = sum(sum((x - y) ** 2 for x, y in zip(r, s)) for r, s in zip(a.tolist(), p.tolist()))
    assert abs(losses.pairwise_loss(a, p).item() - ref) < 1e-10


@settings(max_examples=200, deadline=None)
@given(st.lists(st.integers(-4000, 4000).map(lambda k: k / 8), min_size=1, max_size=6), st.data())
def test_pairwise_zero_iff_equal(a, data):
    # values on a 1/8 grid keep squared differences exactly representable
    b = data.draw(st.lists(st.integers(-4000, 4000).map(lambda k: k / 8), min_size=len(a), max_size=len(a)))
    v = losses.pairwise_loss(np.array([a]), np.array([b])).item()
    assert v >= 0
    assert (v == 0) == (a == b)


def test_width_mismatch_rejected():
    with pytest.raises(ValueError):
        losses.pairwise_loss(np.zeros((2, 3)), np.zeros((2, 4)))


def test_default_weights():
    w = LossWeights()
    assert (w.triplet, w.pairwise, w.identity, w.margin) == (1.0, 0.5, 1.0, 1.0)


def test_identity_only_weights_give_cross_entropy():
    rng = np.random.default_rng(5)
    a, p, n = (Tensor(rng.normal(size=(4, 3))) for _ in range(3))
    logits = Tensor(rng.normal(size=(4, 5)))
    labels = [0, 4, 2, 2]
    out = losses.total_loss(a, p, n, logits, labels, LossWeights(0.0, 0.0, 1.0))
    assert out.total.item() == nn.softmax_cross_entropy(logits, labels).item()


def test_total_is_weighted_term_means():
    rng = np.random.default_rng(6)
    a, p, n = (rng.normal(size=(6, 3)) for _ in range(3))
    logits = rng.normal(size=(6, 4))
    labels = rng.integers(0, 4, size=6)
    w = LossWeights(0.7, 0.3, 1.9, margin=1.5)
    out = losses.total_loss(Tensor(a), Tensor(p), Tensor(n), Tensor(logits), labels, w)
    lt = np.mean(np.maximum(0, 1 - np.linalg.norm(a - n, axis=1) / (np.linalg.norm(a - p, axis=1) + 1.5)))
    lp = np.mean(((a - p) ** 2).sum(axis=1))
    z = logits - logits.max(axis=1, keepdims=True)
    lid = np.mean(np.log(np.exp(z).sum(axis=1)) - z[np.arange(6), labels])
    assert out.as_dict() == pytest.approx({"L_t": lt, "L_p": lp, "L_id": lid, "total": 0.7 * lt + 0.3 * lp + 1.9 * lid}, abs=1e-12)


def test_total_loss_gradient():
    rng = np.random.default_rng(7)
    store = ParamStore(np.float64)
    for k in ("a", "p", "n"):
        store.add(k, rng.normal(size=(4, 3)))
    store.add("z", rng.normal(size=(4, 5)))
    rep = grad_check(lambda: losses.total_loss(store["a"], store["p"], store["n"], store["z"], [1, 0, 3, 3]).total, store)
    assert rep.max_rel_error < 1e-6


def test_normalized_embeddings_option():
    rng = np.random.default_rng(8)
    a, p, n = (rng.normal(size=(3, 4)) * 10 for _ in range(3))
    w = LossWeights(normalize=True)
    out = losses.total_loss(Tensor(a), Tensor(p), Tensor(n), None, None, w)
    unit = [x / np.linalg.norm(x, axis=1, keepdims=True) for x in (a, p, n)]
    ref = losses.total_loss(Tensor(unit[0]), Tensor(unit[1]), Tensor(unit[2]), None, None)
    assert out.total.item() == pytest.approx(ref.total.item(), abs=1e-12)


# -- triplet sampling --------------------------------------------------------------------


def test_forced_triplet_structure():
    labels = [0, 0, 1, 1]
    for t in losses.sample_triplets(labels, 20, seed=1):
        assert {t.anchor, t.positive} in ({0, 1}, {2, 3})
        assert labels[t.negative] != labels[t.anchor]


def test_sampled_triplets_satisfy_identity_constraints():
    labels = np.random.default_rng(9).integers(0, 6, size=60)
    trips = losses.sample_triplets(labels, 200, seed=3)
    assert len(trips) == 200
    for t in trips:
        assert labels[t.anchor] == labels[t.positive] != labels[t.negative]
        assert t.anchor != t.positive


def test_sampling_is_seeded():
    labels = np.repeat(np.arange(5), 4)
    assert losses.sample_triplets(labels, 30, seed=4) == losses.sample_triplets(labels, 30, seed=4)


def test_semi_hard_negatives_are_within_margin_when_available():
    rng = np.random.default_rng(10)
    labels = np.repeat(np.arange(8), 5)
    emb = rng.normal(size=(40, 4))
    for t in losses.sample_triplets(labels, 100, "semi-hard", seed=5, embeddings=emb, margin=0.5):
        d_p = np.linalg.norm(emb[t.anchor] - emb[t.positive])
        cands = [j for j in range(40) if labels[j] != labels[t.anchor] and np.linalg.norm(emb[t.anchor] - emb[j]) < d_p + 0.5]
        if cands:
            assert t.negative in cands


@pytest.mark.parametrize("labels", [[0, 0, 0], [0, 1, 2]])
def test_impossible_sampling_constraints(labels):
    with pytest.raises(DatasetError):
        losses.sample_triplets(labels, 1)


def test_semi_hard_needs_embeddings():
    with pytest.raises(ValueError):
        losses.sample_triplets([0, 0, 1, 1], 1, "semi-hard")
