"""Non-parametric graph-convolution re-ranking at test time.

For a query (user i, item j) the re-ranker takes the top-``n_k`` similar
users of i and items of j, scores every (user, item) combination with a
trained ranker, and returns a weighted mean of those scores. A pair's raw
weight is the product of its user and item similarities. Weights are divided
by their maximum; the most similar pair's weight (1 after normalization) is
then replaced by the sum of ``1 - w`` over all other pairs, which raises its
share of the final score.

Queries whose candidate grid holds a single pair, or only zero weights, fall
back to the ranker's own score for (i, j).
"""
import json
import logging
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from ._validation import check_interactions, check_pairs, make_pairs
from .model import score_batch
from .similarity import SimilarityIndex, SimilarityRow

_log = logging.getLogger(__name__)

CONTEXT_POLICIES = ("query", "zero")


@dataclass
class PairSet:
    """Candidate users and items for one query; the pairs are their full grid."""

    query: tuple
    users: SimilarityRow
    items: SimilarityRow

    @property
    def shape(self):
        return len(self.users), len(self.items)

    @property
    def pairs(self):
        uu, vv = np.meshgrid(self.users.neighbors, self.items.neighbors, indexing="ij")
        return np.stack([uu, vv], axis=-1)


@dataclass
class WeightMatrix:
    raw: np.ndarray
    normalized: np.ndarray
    weights: np.ndarray
    argmax: tuple
    modified_value: float

    @property
    def raw_max_pair_proportion(self):
        """Share of the most similar pair before its weight is modified."""
        return 1.0 / float(np.sum(self.normalized))

    @property
    def max_pair_proportion(self):
        return self.modified_value / float(np.sum(self.weights))


def _with_self_fallback(row, owner):
    if len(row):
        return row
    return SimilarityRow(owner, np.array([owner], dtype=np.int64), np.array([1.0]))


def retrieve(i, j, user_index, item_index, n_k, exclude_self=False):
    """Top-``n_k`` candidate users of ``i`` and items of ``j``.

    A cold side (no candidates) is replaced by the query node itself with
    similarity 1. Returns ``None`` when both sides are cold.
    """
    users = user_index.row(i, n_k, exclude_self)
    items = item_index.row(j, n_k, exclude_self)
    if not len(users) and not len(items):
        return None
    return PairSet((int(i), int(j)), _with_self_fallback(users, i), _with_self_fallback(items, j))


def build_weights(user_scores, item_scores):
    """Aggregation weights for the candidate grid, or ``None`` to signal fallback.

    The argmax tie-break is the first grid position in row-major (user rank,
    item rank) order, so exactly one entry is modified.
    """
    raw = np.outer(np.asarray(user_scores, dtype=np.float64), np.asarray(item_scores, dtype=np.float64))
    if raw.size < 2:
        return None
    top = float(raw.max())
    if top <= 0:
        return None
    normalized = raw / top
    flat = int(np.argmax(raw))
    pos = np.unravel_index(flat, raw.shape)
    modified = float(np.sum(1.0 - normalized))
    weights = normalized.copy()
    weights[pos] = modified
    return WeightMatrix(raw, normalized, weights, (int(pos[0]), int(pos[1])), modified)


def modified_max_weight(normalized):
    """Replacement weight for the top pair given the max-normalized grid."""
    normalized = np.asarray(normalized, dtype=np.float64).ravel()
    top = int(np.argmax(normalized))
    return float(np.sum(np.delete(1.0 - normalized, top)))


def _pair_context(context, n, policy):
    context = np.asarray(context, dtype=np.float64).ravel()
    if policy == "query":
        return np.tile(context, (n, 1))
    if policy == "zero":
        return np.zeros((n, context.size))
    raise ValueError(f"context_policy must be one of {CONTEXT_POLICIES}")


def aggregate(model, pairs, weights, context=(), context_policy="query"):
    """Weighted mean of the ranker's scores over the candidate grid.

    Falls back to the ranker's score for the query pair when ``weights`` is
    ``None`` or sums to zero.
    """
    i, j = pairs.query
    if weights is None or np.sum(weights.weights) <= 0:
        return float(score_batch(model, make_pairs([i], [j], np.atleast_2d(context)))[0])
    grid = pairs.pairs.reshape(-1, 2)
    X = make_pairs(grid[:, 0], grid[:, 1], _pair_context(context, len(grid), context_policy))
    scores = score_batch(model, X).reshape(weights.weights.shape)
    # offsets from the top pair's score keep constant grids exact
    anchor = scores[weights.argmax]
    return float(anchor + np.sum(weights.weights * (scores - anchor)) / np.sum(weights.weights))


def rerank_one(model, i, j, context, user_index, item_index, n_k, context_policy="query",
               exclude_self=False, explain=False):
    """Unbatched reference composition of retrieve, build_weights and aggregate."""
    pairs = retrieve(i, j, user_index, item_index, n_k, exclude_self)
    weights = None
    if pairs is not None:
        weights = build_weights(pairs.users.scores, pairs.items.scores)
    else:
        pairs = PairSet((int(i), int(j)), SimilarityRow(i, np.array([i]), np.array([1.0])),
                        SimilarityRow(j, np.array([j]), np.array([1.0])))
    score = aggregate(model, pairs, weights, context, context_policy)
    if not explain:
        return score
    grid = pairs.pairs.reshape(-1, 2)
    X = make_pairs(grid[:, 0], grid[:, 1], _pair_context(context, len(grid), context_policy))
    record = {
        "user": int(i), "item": int(j),
        "candidate_users": pairs.users.neighbors.tolist(),
        "user_scores": pairs.users.scores.tolist(),
        "candidate_items": pairs.items.neighbors.tolist(),
        "item_scores": pairs.items.scores.tolist(),
        "pair_scores": score_batch(model, X).reshape(pairs.shape).tolist(),
        "fallback": weights is None,
        "score": score,
    }
    if weights is not None:
        record.update(raw_weights=weights.raw.tolist(), normalized_weights=weights.normalized.tolist(),
                      modified_weights=weights.weights.tolist(), argmax=list(weights.argmax),
                      max_pair_proportion=weights.max_pair_proportion,
                      raw_max_pair_proportion=weights.raw_max_pair_proportion)
    return score, record


class ScoreCache:
    """Memo of ranker scores keyed by (user, item, context) for one evaluation pass.

    Relies on the ranker scoring each row independently of the batch it
    arrives in, so cached and fresh values are identical.
    """

    def __init__(self):
        self._keys = np.empty(0, dtype=np.int64)
        self._values = np.empty(0)
        self._contexts = {}
        self._lock = threading.Lock()

    def __len__(self):
        return self._keys.size

    def context_ids(self, rows):
        with self._lock:
            return np.array([self._contexts.setdefault(r.tobytes(), len(self._contexts)) for r in rows],
                            dtype=np.int64)

    def lookup(self, keys):
        with self._lock:
            pos = np.searchsorted(self._keys, keys)
            hit = pos < self._keys.size
            hit[hit] = self._keys[pos[hit]] == keys[hit]
            values = np.full(keys.size, np.nan)
            values[hit] = self._values[pos[hit]]
        return values, hit

    def insert(self, keys, values):
        """Add sorted, unique ``keys`` not yet present."""
        with self._lock:
            pos = np.searchsorted(self._keys, keys)
            fresh = (pos >= self._keys.size) | (self._keys[np.minimum(pos, self._keys.size - 1)] != keys) \
                if self._keys.size else np.ones(keys.size, bool)
            self._keys = np.insert(self._keys, pos[fresh], keys[fresh])
            self._values = np.insert(self._values, pos[fresh], values[fresh])


def _candidates(index, owners, n_k, exclude_self):
    """Vectorized truncated candidate rows: (neighbors, scores, mask) of shape (Q, n_k)."""
    nbrs = index.neighbors_[owners].astype(np.int64)
    scores = index.scores_[owners]
    valid = np.arange(nbrs.shape[1])[None, :] < index.counts_[owners][:, None]
    if exclude_self:
        valid &= nbrs != owners[:, None]
        order = np.argsort(~valid, axis=1, kind="stable")
        nbrs = np.take_along_axis(nbrs, order, axis=1)
        scores = np.take_along_axis(scores, order, axis=1)
        valid = np.take_along_axis(valid, order, axis=1)
    nbrs, scores, valid = nbrs[:, :n_k].copy(), scores[:, :n_k].copy(), valid[:, :n_k].copy()
    cold = ~valid.any(axis=1)
    return nbrs, np.where(valid, scores, 0.0), valid, cold


def _substitute_cold(nbrs, scores, valid, cold, owners):
    nbrs[cold, 0] = owners[cold]
    scores[cold, 0] = 1.0
    valid[cold, 0] = True


def rerank_scores(model, X, user_index, item_index, n_k, context_policy="query", exclude_self=False,
                  base_scores=None, cache=None):
    """Re-ranked scores for a batch of queries ``X = [user, item, ctx...]``.

    Semantically equal to :func:`rerank_one` per row; all candidate pairs of
    the batch are de-duplicated and scored in one call to the ranker.

    Returns
    -------
    scores : ndarray of shape (n_queries,)
    info : dict
        ``pair_counts`` (ranker evaluations requested per query, ``n_u * n_i``),
        ``fallback`` mask, ``max_pair_proportion`` (NaN on fallback) and
        ``model_rows`` (distinct pairs actually scored).

    A :class:`ScoreCache` shares pair scores across calls.
    """
    if context_policy not in CONTEXT_POLICIES:
        raise ValueError(f"context_policy must be one of {CONTEXT_POLICIES}")
    if n_k < 1:
        raise ValueError("n_k must be >= 1")
    users, items, ctx = check_pairs(X)
    Xq = make_pairs(users, items, ctx)
    q = len(users)
    base = score_batch(model, Xq) if base_scores is None else np.asarray(base_scores, dtype=np.float64)

    un, us, uv, ucold = _candidates(user_index, users, n_k, exclude_self)
    vn, vs, vv, vcold = _candidates(item_index, items, n_k, exclude_self)
    both_cold = ucold & vcold
    _substitute_cold(un, us, uv, ucold, users)
    _substitute_cold(vn, vs, vv, vcold, items)

    valid = uv[:, :, None] & vv[:, None, :]
    raw = np.where(valid, us[:, :, None] * vs[:, None, :], -1.0)
    flat_raw = raw.reshape(q, -1)
    top_pos = np.argmax(flat_raw, axis=1)
    top = flat_raw[np.arange(q), top_pos]
    n_pairs = valid.reshape(q, -1).sum(axis=1)
    fallback = both_cold | (n_pairs < 2) | (top <= 0)

    safe_top = np.where(fallback, 1.0, top)
    norm = np.where(valid, raw / safe_top[:, None, None], 0.0).reshape(q, -1)
    modified = np.where(valid.reshape(q, -1), 1.0 - norm, 0.0).sum(axis=1)
    weights = norm.copy()
    weights[np.arange(q), top_pos] = modified

    scores = base.copy()
    proportion = np.full(q, np.nan)
    active = np.flatnonzero(~fallback)
    model_rows = 0
    if active.size:
        qa, a, b = np.nonzero(valid[active])
        qa = active[qa]
        pu, pv = un[qa, a], vn[qa, b]
        if context_policy == "query" and ctx.shape[1]:
            ctx_rows, local = np.unique(ctx, axis=0, return_inverse=True)
            local = local.ravel()[qa]
        else:
            ctx_rows, local = np.zeros((1, ctx.shape[1])), np.zeros(len(qa), dtype=np.int64)
        # cache-wide ids; injective over the rows of this batch
        ctx_ids = np.arange(len(ctx_rows)) if cache is None else cache.context_ids(ctx_rows)
        n_u, n_v = user_index.n_rows, item_index.n_rows
        packed, first, inverse = np.unique((ctx_ids[local] * n_u + pu) * n_v + pv,
                                           return_index=True, return_inverse=True)
        if cache is None:
            pair_scores, hit = np.full(packed.size, np.nan), np.zeros(packed.size, bool)
        else:
            pair_scores, hit = cache.lookup(packed)
        miss = np.flatnonzero(~hit)
        if miss.size:
            src = first[miss]
            pair_scores[miss] = score_batch(model, make_pairs(pu[src], pv[src], ctx_rows[local[src]]))
            if cache is not None:
                cache.insert(packed[miss], pair_scores[miss])
        model_rows = int(miss.size)
        grid = np.zeros(raw.shape)
        grid[qa, a, b] = pair_scores[inverse.ravel()]
        w = weights[active].reshape(-1, raw.shape[1], raw.shape[2])
        g = grid[active].reshape(len(active), -1)
        anchor = g[np.arange(len(active)), top_pos[active]]
        num = np.sum(w * (g - anchor[:, None]).reshape(w.shape), axis=(1, 2))
        den = np.sum(w, axis=(1, 2))
        scores[active] = anchor + num / den
        proportion[active] = modified[active] / den

    pair_counts = np.where(both_cold, 1, uv.sum(axis=1) * vv.sum(axis=1))
    info = {"pair_counts": pair_counts, "fallback": fallback, "max_pair_proportion": proportion,
            "model_rows": model_rows}
    return scores, info


class GraphConvReranker(BaseEstimator):
    """Test-time re-ranking wrapper around any fitted ranker.

    Parameters
    ----------
    estimator : object
        Fitted ranker exposing ``score_batch(X)`` or ``predict_proba(X)``.
    n_k : int
        Candidates per side; each query costs up to ``n_k ** 2`` ranker evaluations.
    n_max : int
        Candidates stored per row when ``fit`` builds the similarity indices.
    context_policy : {"query", "zero"}
        Context given to the constructed pairs: the query's own, or zeros.
    exclude_self : bool
        Drop the query user/item from its own candidate list.
    batch_size : int
        Queries re-ranked per ranker call.
    n_jobs : int
        Threads over query batches; results do not depend on it.
    cache : bool
        Memoize pair scores across batches until :meth:`clear_cache`.
    """

    def __init__(self, estimator, n_k=2, n_max=10, context_policy="query", exclude_self=False,
                 batch_size=4096, n_jobs=1, cache=True):
        self.estimator = estimator
        self.n_k = n_k
        self.n_max = n_max
        self.context_policy = context_policy
        self.exclude_self = exclude_self
        self.batch_size = batch_size
        self.n_jobs = n_jobs
        self.cache = cache

    def fit(self, M, y=None):
        """Build the user and item similarity indices from the training interactions."""
        M = check_interactions(M)
        n_max = max(self.n_max, self.n_k + int(self.exclude_self))
        self.user_index_ = SimilarityIndex("user", n_max, self.n_jobs).fit(M)
        self.item_index_ = SimilarityIndex("item", n_max, self.n_jobs).fit(M)
        self._reset_counters()
        return self

    @classmethod
    def from_indices(cls, estimator, user_index, item_index, **params):
        reranker = cls(estimator, **params)
        reranker.user_index_ = user_index
        reranker.item_index_ = item_index
        reranker._reset_counters()
        return reranker

    def clear_cache(self):
        self.cache_ = ScoreCache() if self.cache else None

    def _reset_counters(self):
        self.clear_cache()
        self.n_pair_evaluations_ = 0
        self.n_model_rows_ = 0
        self.n_fallbacks_ = 0
        self.n_queries_ = 0

    def _check_capacity(self):
        need = self.n_k + int(self.exclude_self)
        for index in (self.user_index_, self.item_index_):
            if index.n_max < need:
                _log.warning("index n_max=%d is below n_k=%d; candidate lists are truncated",
                             index.n_max, self.n_k)

    def rerank(self, X, base_scores=None):
        """Re-ranked scores and per-query diagnostics (see :func:`rerank_scores`)."""
        check_is_fitted(self, "user_index_")
        self._check_capacity()
        X = np.asarray(X, dtype=np.float64)
        starts = list(range(0, len(X), self.batch_size))

        def work(lo):
            sl = slice(lo, lo + self.batch_size)
            base = None if base_scores is None else np.asarray(base_scores)[sl]
            return rerank_scores(self.estimator, X[sl], self.user_index_, self.item_index_, self.n_k,
                                 self.context_policy, self.exclude_self, base, self.cache_)

        if self.n_jobs and self.n_jobs > 1 and len(starts) > 1:
            with ThreadPoolExecutor(self.n_jobs) as pool:
                parts = list(pool.map(work, starts))
        else:
            parts = [work(lo) for lo in starts]
        if not parts:
            return np.empty(0), {"pair_counts": np.empty(0, dtype=np.int64), "fallback": np.empty(0, bool),
                                 "max_pair_proportion": np.empty(0), "model_rows": 0}
        scores = np.concatenate([p[0] for p in parts])
        info = {key: np.concatenate([p[1][key] for p in parts])
                for key in ("pair_counts", "fallback", "max_pair_proportion")}
        info["model_rows"] = sum(p[1]["model_rows"] for p in parts)
        self.n_pair_evaluations_ += int(info["pair_counts"].sum())
        self.n_model_rows_ += info["model_rows"]
        self.n_fallbacks_ += int(info["fallback"].sum())
        self.n_queries_ += len(scores)
        return scores, info

    def score_batch(self, X):
        return self.rerank(X)[0]

    def predict_proba(self, X):
        p = self.score_batch(X)
        return np.column_stack([1.0 - p, p])

    def explain(self, X):
        """Per-query debug records: candidates, all weight stages, pair scores, final score."""
        check_is_fitted(self, "user_index_")
        users, items, ctx = check_pairs(X)
        return [rerank_one(self.estimator, int(u), int(v), c, self.user_index_, self.item_index_, self.n_k,
                           self.context_policy, self.exclude_self, explain=True)[1]
                for u, v, c in zip(users, items, ctx)]


def write_debug_dump(path, records):
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for rec in records:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
