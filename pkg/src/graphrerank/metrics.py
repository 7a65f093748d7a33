"""Ranking and classification metrics."""
import numpy as np
from scipy.stats import rankdata


def recall_at_k(ranked, relevant, k):
    """Fraction of ``relevant`` found in the first ``k`` entries of ``ranked``.

    Returns ``None`` when ``relevant`` is empty so the caller can skip the user.
    """
    relevant = set(relevant)
    if not relevant:
        return None
    hits = len(relevant.intersection(list(ranked)[:k]))
    return hits / len(relevant)


def ndcg_at_k(ranked, relevant, k):
    """Binary-relevance NDCG@k with a ``1/log2(rank + 1)`` discount, ranks from 1."""
    relevant = set(relevant)
    if not relevant:
        return None
    top = list(ranked)[:k]
    dcg = sum(1.0 / np.log2(r + 2) for r, item in enumerate(top) if item in relevant)
    idcg = sum(1.0 / np.log2(r + 2) for r in range(min(k, len(relevant))))
    return dcg / idcg


def auc(scores, labels):
    """Probability that a random positive outscores a random negative; ties count one half."""
    scores = np.asarray(scores, dtype=np.float64).ravel()
    labels = np.asarray(labels).ravel()
    if scores.shape != labels.shape:
        raise ValueError("scores and labels differ in length")
    pos = labels == 1
    n_pos = int(pos.sum())
    n_neg = len(labels) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValueError("AUC needs both positive and negative labels")
    ranks = rankdata(scores)
    return float((ranks[pos].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))
