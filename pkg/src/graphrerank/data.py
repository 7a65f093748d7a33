"""Interaction ingestion, binarization, splitting and the sparse interaction matrix."""
import csv
import logging
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import pandas as pd
import scipy.sparse as sps

from ._io import BinaryReader, BinaryWriter
from .exceptions import DataError, DataWarning

_log = logging.getLogger(__name__)

REQUIRED_COLUMNS = ("user_id", "item_id", "rating", "timestamp")
MATRIX_MAGIC = b"GRIM"
MATRIX_VERSION = 1


@dataclass
class Vocab:
    """Bijective raw-id to dense-index maps for users and items."""

    user_ids: list
    item_ids: list
    _user_index: dict = field(init=False, repr=False)
    _item_index: dict = field(init=False, repr=False)

    def __post_init__(self):
        self._user_index = {u: k for k, u in enumerate(self.user_ids)}
        self._item_index = {i: k for k, i in enumerate(self.item_ids)}
        if len(self._user_index) != len(self.user_ids) or len(self._item_index) != len(self.item_ids):
            raise DataError("vocabulary ids must be unique")

    @property
    def n_users(self):
        return len(self.user_ids)

    @property
    def n_items(self):
        return len(self.item_ids)

    def user_index(self, raw):
        return self._user_index[raw]

    def item_index(self, raw):
        return self._item_index[raw]


@dataclass
class LabeledPairs:
    """Columnar batch of labeled (user, item, context) pairs."""

    users: np.ndarray
    items: np.ndarray
    labels: np.ndarray
    context: np.ndarray = None

    def __post_init__(self):
        self.users = np.asarray(self.users, dtype=np.int64)
        self.items = np.asarray(self.items, dtype=np.int64)
        self.labels = np.asarray(self.labels, dtype=np.int8)
        n = len(self.users)
        if self.context is None:
            self.context = np.zeros((n, 0))
        context = np.asarray(self.context, dtype=np.float64)
        width = context.shape[1] if context.ndim == 2 else (0 if n == 0 else -1)
        self.context = context.reshape(n, width)
        if not (len(self.items) == len(self.labels) == n):
            raise DataError("pair columns have mismatched lengths")
        if np.any((self.labels != 0) & (self.labels != 1)):
            raise DataError("labels must be 0 or 1")

    def __len__(self):
        return len(self.users)

    @property
    def n_context(self):
        return self.context.shape[1]

    @property
    def X(self):
        """Feature array ``[user, item, ctx_0, ...]`` consumed by the estimators."""
        return np.column_stack([self.users, self.items, self.context]).astype(np.float64)

    def take(self, idx):
        idx = np.asarray(idx)
        return LabeledPairs(self.users[idx], self.items[idx], self.labels[idx], self.context[idx])

    def positives(self):
        return self.take(np.flatnonzero(self.labels == 1))

    def keys(self, n_items):
        return self.users * np.int64(n_items) + self.items

    @classmethod
    def concat(cls, parts):
        parts = list(parts)
        return cls(
            np.concatenate([p.users for p in parts]),
            np.concatenate([p.items for p in parts]),
            np.concatenate([p.labels for p in parts]),
            np.concatenate([p.context for p in parts]),
        )


def _sniff_delimiter(path):
    with open(path, encoding="utf-8") as fh:
        header = fh.readline()
    if not header.strip():
        raise DataError(f"{path}: missing header row")
    return "\t" if "\t" in header else ","


def _numeric_column(frame, column, what):
    values = pd.to_numeric(frame[column], errors="coerce")
    bad = values.isna() | ~np.isfinite(values.to_numpy(dtype=np.float64, na_value=np.nan))
    if bad.any():
        row = int(np.flatnonzero(bad.to_numpy())[0])
        # header is line 1
        raise DataError(f"line {row + 2}: non-numeric or non-finite {what} {frame[column].iloc[row]!r}")
    return values.to_numpy(dtype=np.float64)


def load_interactions(path, schema=None):
    """Read a delimited interaction log.

    Parameters
    ----------
    path : path-like
        Comma- or tab-delimited UTF-8 text with a header row holding
        ``user_id,item_id,rating,timestamp`` and optional ``ctx_*`` columns.
    schema : dict, optional
        Maps the canonical column names above to the names used in the file.

    Returns
    -------
    records : pandas.DataFrame
        One row per (user, item) with columns ``user_raw_id``, ``item_raw_id``,
        ``user``, ``item``, ``rating``, ``timestamp`` and ``ctx_0..``.
        Duplicate pairs keep the record with the latest timestamp.
    vocab : Vocab
    """
    path = Path(path)
    if not path.exists():
        raise DataError(f"{path}: no such file")
    if path.stat().st_size == 0:
        raise DataError(f"{path}: empty file")
    schema = dict(schema or {})
    sep = _sniff_delimiter(path)
    try:
        frame = pd.read_csv(path, sep=sep, dtype=str, keep_default_na=False,
                            encoding="utf-8", quoting=csv.QUOTE_MINIMAL)
    except pd.errors.ParserError as exc:
        raise DataError(f"{path}: malformed row ({exc})") from exc
    frame.columns = [c.strip() for c in frame.columns]

    cols = {name: schema.get(name, name) for name in REQUIRED_COLUMNS}
    missing = [c for c in cols.values() if c not in frame.columns]
    if missing:
        raise DataError(f"{path}: missing columns {missing}")
    ctx_cols = sorted((c for c in frame.columns if c.startswith("ctx_")),
                      key=lambda c: int(c[4:]) if c[4:].isdigit() else c)
    ctx_cols = schema.get("context", ctx_cols)
    if len(frame) == 0:
        raise DataError(f"{path}: no data rows")

    users_raw = frame[cols["user_id"]].str.strip()
    items_raw = frame[cols["item_id"]].str.strip()
    empty = (users_raw == "") | (items_raw == "")
    if empty.any():
        row = int(np.flatnonzero(empty.to_numpy())[0])
        raise DataError(f"line {row + 2}: empty user or item id")
    rating = _numeric_column(frame, cols["rating"], "rating")
    timestamp = _numeric_column(frame, cols["timestamp"], "timestamp")
    negative = timestamp < 0
    if negative.any():
        raise DataError(f"line {int(np.flatnonzero(negative)[0]) + 2}: negative timestamp")
    ctx = np.column_stack([_numeric_column(frame, c, c) for c in ctx_cols]) if ctx_cols else np.zeros((len(frame), 0))

    vocab = Vocab(list(pd.unique(users_raw)), list(pd.unique(items_raw)))
    records = pd.DataFrame({
        "user_raw_id": users_raw.to_numpy(),
        "item_raw_id": items_raw.to_numpy(),
        "user": users_raw.map(vocab._user_index).to_numpy(dtype=np.int64),
        "item": items_raw.map(vocab._item_index).to_numpy(dtype=np.int64),
        "rating": rating,
        "timestamp": timestamp.astype(np.int64),
    })
    for k in range(ctx.shape[1]):
        records[f"ctx_{k}"] = ctx[:, k]

    # stable sort keeps file order among equal timestamps, so the later line wins
    records["_line"] = np.arange(len(records))
    records = records.sort_values(["user", "item", "timestamp", "_line"], kind="stable")
    dup = records.duplicated(["user", "item"], keep="last")
    if dup.any():
        warnings.warn(f"{path}: {int(dup.sum())} duplicate (user, item) rows collapsed to the latest",
                      DataWarning, stacklevel=2)
        records = records[~dup]
    records = records.sort_values("_line", kind="stable").drop(columns="_line").reset_index(drop=True)
    _log.info("loaded %d interactions (%d users, %d items)", len(records), vocab.n_users, vocab.n_items)
    return records, vocab


def context_columns(records):
    return [c for c in records.columns if c.startswith("ctx_")]


def dataset_stats(records, vocab):
    n = len(records)
    return {
        "users": vocab.n_users,
        "items": vocab.n_items,
        "interactions": n,
        "sparsity": 1.0 - n / (vocab.n_users * vocab.n_items),
    }


def binarize(records, threshold=4.0):
    """Label a pair positive iff its rating is at least ``threshold``."""
    ctx = records[context_columns(records)].to_numpy(dtype=np.float64)
    labels = (records["rating"].to_numpy(dtype=np.float64) >= threshold).astype(np.int8)
    return LabeledPairs(records["user"].to_numpy(), records["item"].to_numpy(), labels, ctx)


def split(pairs, ratios=(0.8, 0.1, 0.1), seed=0):
    """Uniform random partition of ``pairs`` into train/val/test."""
    ratios = tuple(float(r) for r in ratios)
    if len(ratios) != 3 or abs(sum(ratios) - 1.0) > 1e-9 or min(ratios) < 0:
        raise ValueError(f"split ratios must be three non-negative values summing to 1, got {ratios}")
    n = len(pairs)
    if n == 0:
        raise DataError("cannot split an empty pair set")
    perm = np.random.default_rng(seed).permutation(n)
    n_train = int(round(ratios[0] * n))
    n_val = min(int(round(ratios[1] * n)), n - n_train)
    return (pairs.take(perm[:n_train]),
            pairs.take(perm[n_train:n_train + n_val]),
            pairs.take(perm[n_train + n_val:]))


def build_matrix(train, n_users, n_items):
    """Binary CSR interaction matrix from the positive pairs of ``train``."""
    pos = train.labels == 1
    users, items = train.users[pos], train.items[pos]
    if len(users) and (users.min() < 0 or users.max() >= n_users or items.min() < 0 or items.max() >= n_items):
        raise DataError("pair index out of range for the interaction matrix")
    M = sps.csr_matrix((np.ones(len(users), dtype=np.int32), (users, items)), shape=(n_users, n_items))
    M.sum_duplicates()
    M.data[:] = 1
    M.sort_indices()
    return M


def matrix_keys(M):
    """Sorted ``user * n_items + item`` keys of the nonzeros of ``M``."""
    rows = np.repeat(np.arange(M.shape[0], dtype=np.int64), np.diff(M.indptr))
    return rows * np.int64(M.shape[1]) + M.indices.astype(np.int64)


def sample_negatives(positives, M, ratio=1, seed=0):
    """Uniformly sample ``ratio`` non-interacted items per positive pair.

    Negatives inherit the context of the positive they were drawn for. Users
    whose row of ``M`` is full are skipped with a :class:`DataWarning`.
    """
    if ratio < 1:
        raise ValueError("ratio must be >= 1")
    n_users, n_items = M.shape
    degree = np.diff(M.indptr)
    full = degree[positives.users] >= n_items
    if full.any():
        warnings.warn(f"{int(np.unique(positives.users[full]).size)} users interact with every item; skipped",
                      DataWarning, stacklevel=2)
    keep = np.flatnonzero(~full)
    users = np.repeat(positives.users[keep], ratio)
    context = np.repeat(positives.context[keep], ratio, axis=0)
    known = matrix_keys(M)
    rng = np.random.default_rng(seed)
    items = rng.integers(0, n_items, size=len(users))
    todo = np.arange(len(users))
    while todo.size:
        keys = users[todo] * np.int64(n_items) + items[todo]
        pos = np.searchsorted(known, keys)
        hit = (pos < known.size) & (known[np.minimum(pos, known.size - 1)] == keys) if known.size else np.zeros(todo.size, bool)
        todo = todo[hit]
        items[todo] = rng.integers(0, n_items, size=todo.size)
    return LabeledPairs(users, items, np.zeros(len(users), dtype=np.int8), context)


def save_matrix(path, M):
    M = sps.csr_matrix(M)
    M.sort_indices()
    with open(path, "wb") as fh:
        w = BinaryWriter(fh, MATRIX_MAGIC, MATRIX_VERSION)
        w.u64(M.shape[0])
        w.u64(M.shape[1])
        w.u64(M.nnz)
        w.array(M.indptr, "<i8")
        w.array(M.indices, "<i4")


def load_matrix(path):
    with open(path, "rb") as fh:
        r = BinaryReader(fh, MATRIX_MAGIC, {MATRIX_VERSION})
        n_users, n_items, nnz = r.u64(), r.u64(), r.u64()
        indptr = r.array(n_users + 1, "<i8")
        indices = r.array(nnz, "<i4")
        r.expect_eof()
    return sps.csr_matrix((np.ones(nnz, dtype=np.int32), indices.astype(np.int32), indptr), shape=(n_users, n_items))


def write_pairs(path, pairs):
    """Write a split manifest: one ``user<TAB>item<TAB>label[<TAB>ctx...]`` line per pair."""
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        ctx_header = "".join(f"\tctx_{k}" for k in range(pairs.n_context))
        fh.write(f"user\titem\tlabel{ctx_header}\n")
        for k in range(len(pairs)):
            ctx = "".join(f"\t{v!r}" for v in pairs.context[k].tolist())
            fh.write(f"{pairs.users[k]}\t{pairs.items[k]}\t{pairs.labels[k]}{ctx}\n")


def read_pairs(path):
    frame = pd.read_csv(path, sep="\t")
    ctx = frame[[c for c in frame.columns if c.startswith("ctx_")]].to_numpy(dtype=np.float64)
    return LabeledPairs(frame["user"].to_numpy(), frame["item"].to_numpy(), frame["label"].to_numpy(), ctx)
