"""Degree-normalized co-occurrence similarity and top-n candidate indices.

Rows of the user-user (``M M^T``) or item-item (``M^T M``) co-occurrence
matrix are produced one at a time from the sparse interaction matrix, so
no dense square matrix is ever materialized.
"""
from concurrent.futures import ThreadPoolExecutor
from typing import NamedTuple

import numpy as np
import scipy.sparse as sps
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from ._io import BinaryReader, BinaryWriter
from ._validation import check_interactions

INDEX_MAGIC = b"GRSI"
INDEX_VERSION = 1
SIDES = ("user", "item")
_CHUNK = 256


class SimilarityRow(NamedTuple):
    owner: int
    neighbors: np.ndarray
    scores: np.ndarray

    def __len__(self):
        return len(self.neighbors)


def _orient(M, side):
    """(primary, secondary) CSR pair such that row k of primary @ secondary is the co-occurrence row."""
    if side not in SIDES:
        raise ValueError(f"side must be one of {SIDES}, got {side!r}")
    M = sps.csr_matrix(M)
    MT = sps.csr_matrix(M.T)
    return (M, MT) if side == "user" else (MT, M)


def _row_counts(primary, secondary, k):
    partners = primary.indices[primary.indptr[k]:primary.indptr[k + 1]]
    if partners.size == 0:
        return np.empty(0, dtype=np.int64), np.empty(0, dtype=np.float64)
    spans = [secondary.indices[secondary.indptr[p]:secondary.indptr[p + 1]] for p in partners]
    acc = np.bincount(np.concatenate(spans), minlength=secondary.shape[1])
    nbrs = np.flatnonzero(acc)
    return nbrs, acc[nbrs].astype(np.float64)


def cooccurrence_row(M, side, k):
    """Row ``k`` of the unnormalized co-occurrence matrix as ``(indices, counts)``.

    The diagonal entry (the node's own degree in ``M``) is included.
    """
    primary, secondary = _orient(M, side)
    if not 0 <= k < primary.shape[0]:
        raise IndexError(f"{side} index {k} out of range")
    return _row_counts(primary, secondary, k)


def cooccurrence_degrees(M, side):
    """Row sums of the co-occurrence matrix: sum over partners of the partner's degree."""
    primary, secondary = _orient(M, side)
    partner_degree = np.diff(secondary.indptr).astype(np.float64)
    return primary @ partner_degree


def normalize_row(owner, neighbors, counts, degrees):
    """Scale co-occurrence counts by ``1/sqrt(deg(owner) * deg(neighbor))``.

    A zero-degree owner yields an empty row.
    """
    if degrees[owner] <= 0:
        return SimilarityRow(owner, np.empty(0, dtype=np.int64), np.empty(0, dtype=np.float64))
    scores = counts / np.sqrt(degrees[owner] * degrees[neighbors])
    return SimilarityRow(owner, np.asarray(neighbors, dtype=np.int64), scores)


def topk_candidates(row, n_k):
    """Highest ``n_k`` entries of ``row``; ties go to the lower neighbor index."""
    if n_k < 1:
        raise ValueError("n_k must be >= 1")
    order = np.lexsort((row.neighbors, -row.scores))[:n_k]
    return SimilarityRow(row.owner, row.neighbors[order], row.scores[order])


class SimilarityIndex(BaseEstimator):
    """Top-``n_max`` similar users (or items) for every user (or item).

    Parameters
    ----------
    side : {"user", "item"}
        Which co-occurrence matrix to index.
    n_max : int
        Number of candidates kept per row; queries may use any ``n_k <= n_max``.
    n_jobs : int
        Worker threads. The fitted index does not depend on this value.

    Attributes
    ----------
    neighbors_ : ndarray of shape (n_rows, n_max)
        Candidate indices, best first, padded with -1.
    scores_ : ndarray of shape (n_rows, n_max)
        Normalized similarity scores aligned with ``neighbors_``, padded with 0.
    counts_ : ndarray of shape (n_rows,)
        Number of valid candidates per row.
    degrees_ : ndarray of shape (n_rows,)
        Co-occurrence row sums used for normalization (absent on loaded indices).
    """

    def __init__(self, side="user", n_max=10, n_jobs=1):
        self.side = side
        self.n_max = n_max
        self.n_jobs = n_jobs

    def fit(self, M, y=None):
        M = check_interactions(M)
        if self.n_max < 1:
            raise ValueError("n_max must be >= 1")
        primary, secondary = _orient(M, self.side)
        degrees = cooccurrence_degrees(M, self.side)
        n_rows = primary.shape[0]
        neighbors = np.full((n_rows, self.n_max), -1, dtype=np.int32)
        scores = np.zeros((n_rows, self.n_max), dtype=np.float64)
        counts = np.zeros(n_rows, dtype=np.int32)

        def work(start):
            for k in range(start, min(start + _CHUNK, n_rows)):
                nbrs, cnt = _row_counts(primary, secondary, k)
                row = topk_candidates(normalize_row(k, nbrs, cnt, degrees), self.n_max)
                n = len(row)
                neighbors[k, :n] = row.neighbors
                scores[k, :n] = row.scores
                counts[k] = n

        starts = range(0, n_rows, _CHUNK)
        if self.n_jobs and self.n_jobs > 1:
            with ThreadPoolExecutor(self.n_jobs) as pool:
                list(pool.map(work, starts))
        else:
            for s in starts:
                work(s)
        self.neighbors_, self.scores_, self.counts_, self.degrees_ = neighbors, scores, counts, degrees
        return self

    @property
    def n_rows(self):
        check_is_fitted(self, "neighbors_")
        return self.neighbors_.shape[0]

    def row(self, k, n_k=None, exclude_self=False):
        """Candidate row for ``k`` truncated to ``n_k`` entries."""
        check_is_fitted(self, "neighbors_")
        n = self.counts_[k]
        nbrs, scores = self.neighbors_[k, :n].astype(np.int64), self.scores_[k, :n]
        if exclude_self:
            keep = nbrs != k
            nbrs, scores = nbrs[keep], scores[keep]
        if n_k is not None:
            nbrs, scores = nbrs[:n_k], scores[:n_k]
        return SimilarityRow(int(k), nbrs, scores)

    def save(self, path):
        check_is_fitted(self, "neighbors_")
        with open(path, "wb") as fh:
            w = BinaryWriter(fh, INDEX_MAGIC, INDEX_VERSION)
            w.u8(SIDES.index(self.side))
            w.u64(self.n_rows)
            w.u32(self.n_max)
            for k in range(self.n_rows):
                n = int(self.counts_[k])
                w.u32(n)
                w.array(self.neighbors_[k, :n], "<i4")
                w.array(self.scores_[k, :n], "<f4")

    @classmethod
    def load(cls, path):
        with open(path, "rb") as fh:
            r = BinaryReader(fh, INDEX_MAGIC, {INDEX_VERSION})
            side = SIDES[r.u8()]
            n_rows, n_max = r.u64(), r.u32()
            index = cls(side=side, n_max=n_max)
            index.neighbors_ = np.full((n_rows, n_max), -1, dtype=np.int32)
            index.scores_ = np.zeros((n_rows, n_max), dtype=np.float64)
            index.counts_ = np.zeros(n_rows, dtype=np.int32)
            for k in range(n_rows):
                n = r.u32()
                index.neighbors_[k, :n] = r.array(n, "<i4")
                index.scores_[k, :n] = r.array(n, "<f4")
                index.counts_[k] = n
            r.expect_eof()
        index.degrees_ = None
        return index


def build_index(M, side, n_max, n_jobs=1):
    return SimilarityIndex(side=side, n_max=n_max, n_jobs=n_jobs).fit(M)
