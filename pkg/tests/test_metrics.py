import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from nang.errors import InvalidArgumentError, ShapeError
from nang.metrics import mmd_rbf, ndcg_at_k, rank_dims, ranking_scores, recall_at_k


def brute_topk(scores, k):
    # plain python ordering: higher score first, lower index on ties
    return sorted(range(len(scores)), key=lambda i: (-scores[i], i))[:k]


def brute_recall(scores, truth, k):
    rel = {i for i, t in enumerate(truth) if t}
    return len(rel & set(brute_topk(scores, k))) / len(rel)


def brute_ndcg(scores, truth, k):
    rel = {i for i, t in enumerate(truth) if t}
    dcg = 0.0
    for pos, i in enumerate(brute_topk(scores, k), start=1):
        if i in rel:
            dcg += 1 / math.log2(pos + 1)
    idcg = 0.0
    for pos in range(1, min(k, len(rel)) + 1):
        idcg += 1 / math.log2(pos + 1)
    return dcg / idcg


def random_instance(r, f=8, max_nnz=4, max_k=6, ties=False):
    nnz = int(r.integers(1, max_nnz + 1))
    truth = np.zeros(f)
    truth[r.choice(f, nnz, replace=False)] = 1
    scores = r.integers(0, 3, f).astype(float) if ties else r.random(f)
    return scores, truth, int(r.integers(1, max_k + 1))


def test_recall_hand_cases():
    assert recall_at_k([0.1, 0.9, 0.2, 0.8], [0, 1, 0, 1], 2) == 1.0
    assert recall_at_k([0.0, 0.5, 0.4, 0.3, 0.2], [1, 0, 0, 0, 0], 2) == 0.0


def test_recall_random_case_matches_set_intersection():
    r = np.random.default_rng(11)
    scores = r.random(8)
    truth = np.zeros(8)
    truth[[1, 4, 6]] = 1
    top4 = set(np.argsort(-scores)[:4])
    assert recall_at_k(scores, truth, 4) == len(top4 & {1, 4, 6}) / 3


def test_ndcg_hand_cases():
    assert ndcg_at_k([0.9, 0.1], [1, 0], 1) == 1.0
    assert ndcg_at_k([0.9, 0.5, 0.1], [0, 1, 0], 2) == pytest.approx(1 / math.log2(3), abs=1e-12)
    assert ndcg_at_k([0.9, 0.5, 0.1], [0, 1, 0], 2) == pytest.approx(0.6309, abs=1e-4)


def test_empty_truth_is_skipped():
    assert recall_at_k([0.3, 0.2], [0, 0], 1) is None
    assert ndcg_at_k([0.3, 0.2], [0, 0], 1) is None
    recall, ndcg = ranking_scores(np.array([[0.3, 0.2], [0.1, 0.9]]), np.array([[0, 0], [0, 1]]), 1)
    assert list(recall) == [1.0] and list(ndcg) == [1.0]


def test_metric_argument_errors():
    with pytest.raises(InvalidArgumentError):
        recall_at_k([0.1, 0.2], [1, 0], 3)
    with pytest.raises(ShapeError):
        ndcg_at_k([0.1, 0.2], [1, 0, 0], 1)


def test_ties_go_to_lower_index():
    np.testing.assert_array_equal(rank_dims([0.5, 0.7, 0.5, 0.7], 3), [1, 3, 0])


def test_thousand_random_instances_match_brute_force():
    r = np.random.default_rng(2024)
    for trial in range(1000):
        scores, truth, k = random_instance(r, ties=trial % 2 == 1)
        assert recall_at_k(scores, truth, k) == brute_recall(scores, truth, k)
        assert ndcg_at_k(scores, truth, k) == pytest.approx(brute_ndcg(scores, truth, k), abs=1e-12)


def test_vectorized_scores_match_scalar_versions():
    r = np.random.default_rng(5)
    scores = r.random((40, 8))
    truth = (r.random((40, 8)) < 0.3).astype(float)
    recall, ndcg = ranking_scores(scores, truth, 4)
    kept = [i for i in range(40) if truth[i].any()]
    np.testing.assert_allclose(recall, [recall_at_k(scores[i], truth[i], 4) for i in kept], rtol=0, atol=1e-15)
    np.testing.assert_allclose(ndcg, [ndcg_at_k(scores[i], truth[i], 4) for i in kept], rtol=0, atol=1e-15)


@settings(max_examples=80, deadline=None)
@given(seed=st.integers(0, 2**31 - 1), k=st.integers(1, 8))
def test_rank_metrics_invariant_under_monotone_transform(seed, k):
    r = np.random.default_rng(seed)
    scores, truth, _ = random_instance(r)
    transformed = np.exp(3 * scores) + 7
    assert recall_at_k(scores, truth, k) == recall_at_k(transformed, truth, k)
    assert ndcg_at_k(scores, truth, k) == ndcg_at_k(transformed, truth, k)


@settings(max_examples=80, deadline=None)
@given(seed=st.integers(0, 2**31 - 1))
def test_recall_non_decreasing_in_k_and_perfect_ndcg(seed):
    r = np.random.default_rng(seed)
    scores, truth, _ = random_instance(r)
    values = [recall_at_k(scores, truth, k) for k in range(1, 9)]
    assert all(a <= b for a, b in zip(values, values[1:]))
    # put every relevant dim on top
    perfect = truth + 0.01 * r.random(8)
    for k in range(1, 9):
        assert ndcg_at_k(perfect, truth, k) == 1.0
        assert 0.0 <= ndcg_at_k(scores, truth, k) <= 1.0


# --- mmd -----------------------------------------------------------------------


def test_mmd_identical_samples_is_zero():
    z = np.random.default_rng(0).standard_normal((50, 3))
    assert mmd_rbf(z, z) == 0.0


def test_mmd_same_distribution_small():
    r = np.random.default_rng(1)
    assert mmd_rbf(r.standard_normal((500, 2)), r.standard_normal((500, 2))) < 0.1


def test_mmd_separated_distributions_large():
    r = np.random.default_rng(2)
    assert mmd_rbf(r.standard_normal((500, 2)), 10 + r.standard_normal((500, 2))) > 0.5


def test_mmd_degenerate_bandwidth_fallback():
    z = np.ones((4, 2))
    assert mmd_rbf(z, z) == 0.0


def test_mmd_matches_explicit_kernel_sum():
    r = np.random.default_rng(3)
    z, p = r.standard_normal((6, 2)), r.standard_normal((5, 2)) + 0.5
    pooled = np.vstack([z, p])
    dists = [np.linalg.norm(pooled[i] - pooled[j]) for i in range(11) for j in range(i + 1, 11)]
    bw = np.median(dists)

    def k(a, b):
        return math.exp(-np.sum((a - b) ** 2) / (2 * bw * bw))

    kzz = sum(k(a, b) for a in z for b in z) / 36
    kpp = sum(k(a, b) for a in p for b in p) / 25
    kzp = sum(k(a, b) for a in z for b in p) / 30
    assert mmd_rbf(z, p) == pytest.approx(math.sqrt(kzz + kpp - 2 * kzp), rel=1e-10)


def test_mmd_errors():
    with pytest.raises(ShapeError):
        mmd_rbf(np.zeros((3, 2)), np.zeros((3, 3)))
    with pytest.raises(InvalidArgumentError):
        mmd_rbf(np.zeros((1, 2)), np.zeros((3, 2)))


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 2**31 - 1), n=st.integers(2, 20), m=st.integers(2, 20))
def test_mmd_symmetric_and_non_negative(seed, n, m):
    r = np.random.default_rng(seed)
    z, p = r.standard_normal((n, 3)), r.standard_normal((m, 3))
    a, b = mmd_rbf(z, p), mmd_rbf(p, z)
    assert a >= 0 and a == pytest.approx(b, abs=1e-12)
    assert mmd_rbf(z, z) == pytest.approx(0.0, abs=1e-7)
