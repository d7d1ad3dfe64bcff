"""Top-k ranking metrics over attribute dimensions and the MMD-to-prior distance."""

from __future__ import annotations

import numpy as np
from scipy.spatial.distance import cdist, pdist

from .errors import InvalidArgumentError, ShapeError


def rank_dims(scores, k):
    """Indices of the ``k`` highest scores; ties go to the lower index."""
    scores = np.asarray(scores, dtype=np.float64)
    return np.argsort(-scores, kind="stable")[:k]


def _check(scores, truth, k):
    scores = np.asarray(scores, dtype=np.float64)
    truth = np.asarray(truth)
    if scores.shape != truth.shape or scores.ndim != 1:
        raise ShapeError("scores and truth must be vectors of equal length")
    if not 1 <= k <= len(scores):
        raise InvalidArgumentError(f"k must lie in 1..{len(scores)}, got {k}")
    return scores, truth != 0


def recall_at_k(scores, truth, k):
    """Share of the true non-zero dims found in the top ``k``.

    Returns None when ``truth`` has no non-zero entry; such nodes are left
    out of averages.
    """
    scores, relevant = _check(scores, truth, k)
    n_rel = int(relevant.sum())
    if n_rel == 0:
        return None
    return float(relevant[rank_dims(scores, k)].sum()) / n_rel


def _discounts(k):
    return 1.0 / np.log2(np.arange(2, k + 2))


def ndcg_at_k(scores, truth, k):
    """Binary-relevance NDCG@k; None when ``truth`` is all zero."""
    scores, relevant = _check(scores, truth, k)
    n_rel = int(relevant.sum())
    if n_rel == 0:
        return None
    disc = _discounts(k)
    dcg = float(np.sum(disc * relevant[rank_dims(scores, k)]))
    # same reduction as dcg so a perfect ranking gives exactly 1
    idcg = float(np.sum(disc * (np.arange(k) < n_rel)))
    return dcg / idcg


def ranking_scores(scores, truth, k):
    """Per-row Recall@k and NDCG@k for score/truth matrices.

    Rows whose truth is all zero are dropped. Returns ``(recall, ndcg)``
    arrays with one entry per kept row.
    """
    scores = np.asarray(scores, dtype=np.float64)
    relevant = np.asarray(truth) != 0
    if scores.shape != relevant.shape or scores.ndim != 2:
        raise ShapeError("scores and truth must be matrices of equal shape")
    if not 1 <= k <= scores.shape[1]:
        raise InvalidArgumentError(f"k must lie in 1..{scores.shape[1]}, got {k}")
    n_rel = relevant.sum(axis=1)
    keep = n_rel > 0
    scores, relevant, n_rel = scores[keep], relevant[keep], n_rel[keep]
    top = np.argsort(-scores, axis=1, kind="stable")[:, :k]
    hits = np.take_along_axis(relevant, top, axis=1)
    disc = _discounts(k)
    recall = hits.sum(axis=1) / n_rel
    ideal = (disc * (np.arange(k)[None, :] < n_rel[:, None])).sum(axis=1)
    ndcg = (hits * disc).sum(axis=1) / ideal
    return recall, ndcg


def mean_recall_at_k(scores, truth, k):
    recall, _ = ranking_scores(scores, truth, k)
    return float(recall.mean()) if len(recall) else 0.0


def mmd_rbf(z, p):
    """Biased RBF-kernel MMD between two samples, returned as sqrt(max(MMD^2, 0)).

    The bandwidth is the median pairwise distance of the pooled sample, or
    1.0 when every pooled point coincides.
    """
    z = np.asarray(z, dtype=np.float64)
    p = np.asarray(p, dtype=np.float64)
    if z.ndim != 2 or p.ndim != 2 or z.shape[1] != p.shape[1]:
        raise ShapeError("samples must be matrices with equal column count")
    if len(z) < 2 or len(p) < 2:
        raise InvalidArgumentError("each sample needs at least two rows")
    pooled = np.concatenate([z, p])
    bandwidth = float(np.median(pdist(pooled)))
    if not bandwidth > 0:
        bandwidth = 1.0
    scale = 2.0 * bandwidth * bandwidth

    def kernel_mean(a, b):
        return float(np.mean(np.exp(-cdist(a, b, "sqeuclidean") / scale)))

    mmd2 = kernel_mean(z, z) + kernel_mean(p, p) - 2.0 * kernel_mean(z, p)
    return float(np.sqrt(max(mmd2, 0.0)))
