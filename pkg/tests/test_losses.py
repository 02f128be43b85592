"""Loss values against naive direct-summation oracles, plus the
centroid/importance contracts."""

import math

import numpy as np
import pytest

from mvprod.autodiff import Tensor
from mvprod.losses import (
    LossWeights,
    build_centroids,
    combined_loss,
    cross_instance_loss,
    cross_modal_loss,
    importance,
    importance_matrix,
    info_nce,
    intra_modal_loss,
)

# ---------------------------------------------------------------------------
# oracles: plain python/numpy, exponent sums written out directly
# ---------------------------------------------------------------------------


def _cos(a, b):
    return float(np.dot(a, b) / (np.linalg.norm(a) * np.linalg.norm(b)))


def _nce_oracle(anchor, positive, negatives, weights, tau):
    top = math.exp(_cos(anchor, positive) / tau)
    bottom = top + sum(w * math.exp(_cos(anchor, n) / tau) for w, n in zip(weights, negatives))
    return -math.log(top / bottom)


def _cross_modal_oracle(mv_v, mv_t, pr_v, pr_t, tau):
    b = len(mv_v)
    total = 0.0
    for i in range(b):
        negs_t = [mv_t[j] for j in range(b) if j != i]
        negs_zt = [pr_t[j] for j in range(b) if j != i]
        total += _nce_oracle(mv_v[i], mv_t[i], negs_t, [1.0] * (b - 1), tau)
        total += _nce_oracle(pr_v[i], pr_t[i], negs_zt, [1.0] * (b - 1), tau)
    return total / b


def _intra_modal_oracle(mv_v, mv_t, pr_v, pr_t, tau):
    b = len(mv_v)
    total = 0.0
    for i in range(b):
        negs_v = [pr_v[j] for j in range(b) if j != i]
        negs_t = [pr_t[j] for j in range(b) if j != i]
        total += _nce_oracle(mv_v[i], pr_v[i], negs_v, [1.0] * (b - 1), tau)
        total += _nce_oracle(mv_t[i], pr_t[i], negs_t, [1.0] * (b - 1), tau)
    return total / b


def _cross_instance_oracle(mq, pq, mk, pk, neg_m, neg_p, e_p, e_m, tau):
    b = len(mq)
    total = 0.0
    for i in range(b):
        total += _nce_oracle(mk[i], pq[i], list(neg_p), list(e_p[i]), tau)
        total += _nce_oracle(pk[i], mq[i], list(neg_m), list(e_m[i]), tau)
    return total / b


def _rand_batch(rng, b, d):
    return [rng.standard_normal((b, d)) for _ in range(4)]


# ---------------------------------------------------------------------------
# info_nce
# ---------------------------------------------------------------------------


def test_info_nce_equal_logits_ln2():
    a = np.array([1.0, 0.0])
    loss = info_nce(Tensor(a), Tensor(a), [Tensor(a)], [1.0], temperature=0.5)
    assert math.isclose(loss.item(), math.log(2.0), rel_tol=1e-12)


def test_info_nce_zero_weights_zero_loss():
    rng = np.random.default_rng(0)
    a, p = Tensor(rng.standard_normal(4)), Tensor(rng.standard_normal(4))
    negs = [Tensor(rng.standard_normal(4)) for _ in range(3)]
    assert info_nce(a, p, negs, [0.0, 0.0, 0.0], temperature=0.07).item() == 0.0


def test_info_nce_matches_direct_sum_oracle():
    rng = np.random.default_rng(1)
    for _ in range(20):
        a = rng.standard_normal(8)
        p = rng.standard_normal(8)
        negs = [rng.standard_normal(8) for _ in range(5)]
        w = list(rng.uniform(0.0, 1.0, 5))
        got = info_nce(Tensor(a), Tensor(p), [Tensor(n) for n in negs], w, 0.07).item()
        assert abs(got - _nce_oracle(a, p, negs, w, 0.07)) < 1e-10


def test_info_nce_rejects_negative_weight_and_zero_norm():
    a = Tensor([1.0, 0.0])
    with pytest.raises(ValueError):
        info_nce(a, a, [a], [-0.5], 0.07)
    with pytest.raises(ValueError):
        info_nce(Tensor([0.0, 0.0]), a, [a], [1.0], 0.07)


def test_info_nce_nonnegative_and_vanishes_for_perfect_positive():
    # positive cosine 1, negatives orthogonal, sharp temperature
    a = np.array([1.0, 0.0])
    n = np.array([0.0, 1.0])
    loss = info_nce(Tensor(a), Tensor(2.5 * a), [Tensor(n)], [1.0], 0.07).item()
    assert 0.0 <= loss < 1e-5


def test_info_nce_monotone_in_negative_cosine_and_weight():
    rng = np.random.default_rng(2)
    a = np.array([1.0, 0.0, 0.0])
    p = rng.standard_normal(3)
    base_neg = np.array([0.6, 0.8, 0.0])

    def value(neg, w):
        return info_nce(Tensor(a), Tensor(p), [Tensor(neg)], [w], 0.07).item()

    # nudging the negative toward the anchor raises the loss
    closer = np.array([0.6 + 1e-3, 0.8, 0.0])
    assert value(closer / np.linalg.norm(closer), 1.0) >= value(base_neg, 1.0)
    assert value(base_neg, 1.0 + 1e-3) >= value(base_neg, 1.0)


def test_losses_invariant_to_embedding_scale():
    rng = np.random.default_rng(3)
    mats = _rand_batch(rng, 4, 8)
    tau = 0.07
    base = cross_modal_loss(*[Tensor(m) for m in mats], tau).item()
    scaled = [m.copy() for m in mats]
    scaled[0][2] *= 7.3  # scale one embedding
    got = cross_modal_loss(*[Tensor(m) for m in scaled], tau).item()
    assert abs(base - got) < 1e-10


# ---------------------------------------------------------------------------
# batched losses vs oracles
# ---------------------------------------------------------------------------


def test_cross_modal_identical_vectors_two_ln2():
    v = np.tile([1.0, 2.0, 3.0], (2, 1))
    got = cross_modal_loss(Tensor(v), Tensor(v), Tensor(v), Tensor(v), 0.07).item()
    assert math.isclose(got, 2.0 * math.log(2.0), rel_tol=1e-12)


def test_cross_modal_aligned_positives_orthogonal_negatives():
    mv_v = np.array([[1.0, 0.0], [0.0, 1.0]])
    got = cross_modal_loss(Tensor(mv_v), Tensor(mv_v), Tensor(mv_v), Tensor(mv_v), 0.07).item()
    per_term = -math.log(math.exp(1 / 0.07) / (math.exp(1 / 0.07) + 1.0))
    assert math.isclose(got, 2.0 * per_term, rel_tol=1e-6)
    assert got < 2e-6


def test_cross_modal_matches_oracle_random_batch():
    rng = np.random.default_rng(3)
    mats = _rand_batch(rng, 4, 8)
    got = cross_modal_loss(*[Tensor(m) for m in mats], 0.07).item()
    assert abs(got - _cross_modal_oracle(*mats, 0.07)) < 1e-10


def test_cross_modal_needs_two():
    one = Tensor(np.ones((1, 4)))
    with pytest.raises(ValueError):
        cross_modal_loss(one, one, one, one, 0.07)


def test_intra_modal_orthogonal_instances_analytic():
    b = 3
    eye = np.eye(b)
    got = intra_modal_loss(Tensor(eye), Tensor(eye), Tensor(eye), Tensor(eye), 1.0).item()
    per_term = -math.log(math.e / (math.e + (b - 1) * 1.0))
    assert math.isclose(got, 2.0 * per_term, rel_tol=1e-12)


def test_intra_modal_identical_everything_two_ln2():
    v = np.tile([0.5, -1.0], (2, 1))
    got = intra_modal_loss(Tensor(v), Tensor(v), Tensor(v), Tensor(v), 0.07).item()
    assert math.isclose(got, 2.0 * math.log(2.0), rel_tol=1e-12)


def test_intra_modal_matches_oracle_random_batch():
    rng = np.random.default_rng(4)
    mats = _rand_batch(rng, 4, 8)
    got = intra_modal_loss(*[Tensor(m) for m in mats], 0.07).item()
    assert abs(got - _intra_modal_oracle(*mats, 0.07)) < 1e-10


def test_cross_instance_zero_importance_zero_loss():
    rng = np.random.default_rng(5)
    b, k, d = 3, 4, 6
    args = [Tensor(rng.standard_normal((b, d))) for _ in range(4)]
    negs = [Tensor(rng.standard_normal((k, d))) for _ in range(2)]
    zero = np.zeros((b, k))
    got = cross_instance_loss(*args, *negs, zero, zero, 0.07).item()
    assert got == 0.0


def test_cross_instance_equal_logits_unit_weight():
    v = np.array([[3.0, 4.0]])
    vv = np.tile(v, (2, 1))
    got = cross_instance_loss(
        Tensor(vv), Tensor(vv), Tensor(vv), Tensor(vv),
        Tensor(v), Tensor(v),
        np.ones((2, 1)), np.ones((2, 1)), 0.07,
    ).item()
    assert math.isclose(got, 2.0 * math.log(2.0), rel_tol=1e-12)


def test_cross_instance_matches_oracle_random_batch():
    rng = np.random.default_rng(6)
    b, k, d = 4, 4, 8
    mq, pq, mk, pk = (rng.standard_normal((b, d)) for _ in range(4))
    neg_m, neg_p = (rng.standard_normal((k, d)) for _ in range(2))
    e_p, e_m = rng.uniform(0, 1, (b, k)), rng.uniform(0, 1, (b, k))
    got = cross_instance_loss(
        Tensor(mq), Tensor(pq), Tensor(mk), Tensor(pk),
        Tensor(neg_m), Tensor(neg_p), e_p, e_m, 0.07,
    ).item()
    assert abs(got - _cross_instance_oracle(mq, pq, mk, pk, neg_m, neg_p, e_p, e_m, 0.07)) < 1e-10


def test_cross_instance_gradients_reach_query_side_only():
    rng = np.random.default_rng(7)
    b, k, d = 2, 3, 4
    mq = Tensor(rng.standard_normal((b, d)), requires_grad=True)
    pq = Tensor(rng.standard_normal((b, d)), requires_grad=True)
    mk = Tensor(rng.standard_normal((b, d)), requires_grad=True)
    pk = Tensor(rng.standard_normal((b, d)), requires_grad=True)
    loss = cross_instance_loss(
        mq, pq, mk.detach(), pk.detach(),
        Tensor(rng.standard_normal((k, d))), Tensor(rng.standard_normal((k, d))),
        np.ones((b, k)), np.ones((b, k)), 0.07,
    )
    loss.backward()
    assert mq.grad is not None and pq.grad is not None
    assert mk.grad is None and pk.grad is None


def test_cross_instance_importance_shape_checked():
    rng = np.random.default_rng(8)
    b, k, d = 2, 3, 4
    args = [Tensor(rng.standard_normal((b, d))) for _ in range(4)]
    negs = [Tensor(rng.standard_normal((k, d))) for _ in range(2)]
    with pytest.raises(Exception):
        cross_instance_loss(*args, *negs, np.ones((b, k + 1)), np.ones((b, k)), 0.07)


def test_combined_loss_weight_selection():
    one = Tensor(np.asarray(1.0))
    w = LossWeights(cross_modal=0.0, intra_modal=0.0, cross_instance=1.0)
    assert combined_loss(one, one, one, w).item() == 1.0
    w_default = LossWeights()
    assert (w_default.cross_modal, w_default.intra_modal, w_default.cross_instance) == (0.1, 0.1, 0.8)
    assert math.isclose(combined_loss(one, one, one, w_default).item(), 1.0, rel_tol=1e-12)


def test_loss_weights_validation():
    with pytest.raises(ValueError):
        LossWeights(cross_modal=1.5).validate()
    with pytest.raises(ValueError):
        LossWeights(temperature=0.0).validate()
    with pytest.raises(ValueError):
        LossWeights(importance_strength=-0.1).validate()


# ---------------------------------------------------------------------------
# centroids and importance
# ---------------------------------------------------------------------------


def test_centroid_of_single_instance_is_itself():
    vec = np.array([[0.5, 1.5]])
    table = build_centroids(vec, [(0, 0)])
    assert np.array_equal(table.level1[0], vec[0])
    assert np.array_equal(table.level2[0], vec[0])
    assert table.counts2[0] == 1


def test_centroid_arithmetic_mean_two_members():
    vecs = np.array([[1.0, 0.0], [0.0, 1.0]])
    table = build_centroids(vecs, [(0, 3), (0, 3)])
    assert np.allclose(table.level2[3], [0.5, 0.5])


def test_centroid_permutation_invariance():
    rng = np.random.default_rng(9)
    vecs = rng.standard_normal((10, 4))
    paths = [(int(i % 2), int(i % 3)) for i in range(10)]
    t1 = build_centroids(vecs, paths)
    perm = rng.permutation(10)
    t2 = build_centroids(vecs[perm], [paths[i] for i in perm])
    for c in t1.level2:
        assert np.allclose(t1.level2[c], t2.level2[c])
    assert t1.counts2 == t2.counts2


def test_importance_identical_paths():
    vecs = np.array([[0.0, 0.0], [3.0, 4.0]])
    table = build_centroids(vecs, [(0, 0), (1, 1)])
    e = importance((0, 0), (0, 0), table, strength=0.1)
    assert e == 1.0 - 0.1 * math.exp(0.0) - 0.1 * math.exp(0.0)
    assert math.isclose(e, 0.8, rel_tol=1e-15)


def test_importance_maximally_distant():
    vecs = np.array([[0.0, 0.0], [3.0, 4.0]])
    table = build_centroids(vecs, [(0, 0), (1, 1)])
    e = importance((0, 0), (1, 1), table, strength=0.1)
    assert abs(e - (1.0 - 0.2 * math.e)) < 1e-12


def test_importance_clamped_to_zero_for_large_strength():
    vecs = np.array([[0.0, 0.0], [3.0, 4.0]])
    table = build_centroids(vecs, [(0, 0), (1, 1)])
    assert importance((0, 0), (1, 1), table, strength=0.5) == 0.0  # raw ~ -1.718


def test_importance_symmetric_and_path_only():
    rng = np.random.default_rng(10)
    vecs = rng.standard_normal((12, 5))
    paths = [(int(i % 2), int(i % 4)) for i in range(12)]
    table = build_centroids(vecs, paths)
    for pa in {(0, 0), (1, 1), (0, 2)}:
        for pb in {(1, 3), (0, 0), (1, 1)}:
            assert importance(pa, pb, table, 0.1) == importance(pb, pa, table, 0.1)


def test_importance_unknown_category():
    table = build_centroids(np.ones((1, 2)), [(0, 0)])
    with pytest.raises(ValueError):
        importance((0, 0), (0, 9), table, 0.1)


def test_importance_matrix_entries_in_unit_interval():
    rng = np.random.default_rng(11)
    vecs = rng.standard_normal((20, 6))
    paths = [(int(i % 3), int(i % 6)) for i in range(20)]
    table = build_centroids(vecs, paths)
    mat = importance_matrix(paths[:5], paths[5:11], table, strength=0.4)
    assert mat.shape == (5, 6)
    assert np.all(mat >= 0.0) and np.all(mat <= 1.0)
