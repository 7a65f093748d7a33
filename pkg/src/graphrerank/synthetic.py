"""Planted two-block interaction data for desk-scale experiments."""
import numpy as np
import pandas as pd

from .data import Vocab


def make_two_block(n_users=500, n_items=300, p_within=0.3, p_across=0.01, p_negative=0.3,
                   n_context=0, seed=0):
    """Users and items split into two halves; interactions concentrate within a half.

    Every (user, item) pair is a positive interaction (rating 5) with
    probability ``p_within`` when both sit in the same block and ``p_across``
    otherwise. Cross-block pairs that are not positive are observed as an
    explicit dislike (rating 1) with probability ``p_negative``, which gives
    the labeled data both classes.

    Returns ``(records, vocab)`` in the layout produced by
    :func:`graphrerank.data.load_interactions`, with dense ids equal to the
    generation order.
    """
    rng = np.random.default_rng(seed)
    ublock = (np.arange(n_users) >= n_users // 2).astype(int)
    iblock = (np.arange(n_items) >= n_items // 2).astype(int)
    same = ublock[:, None] == iblock[None, :]
    draw = rng.random((n_users, n_items))
    positive = draw < np.where(same, p_within, p_across)
    negative = ~same & ~positive & (rng.random((n_users, n_items)) < p_negative)
    users, items = np.nonzero(positive | negative)
    rating = np.where(positive[users, items], 5.0, 1.0)
    records = pd.DataFrame({
        "user_raw_id": [f"u{u}" for u in users],
        "item_raw_id": [f"i{i}" for i in items],
        "user": users.astype(np.int64),
        "item": items.astype(np.int64),
        "rating": rating,
        "timestamp": rng.integers(0, 10**9, size=len(users)),
    })
    for k in range(n_context):
        records[f"ctx_{k}"] = rng.normal(size=len(users))
    vocab = Vocab([f"u{u}" for u in range(n_users)], [f"i{i}" for i in range(n_items)])
    return records, vocab


def write_interactions(path, records):
    """Write ``records`` in the delimited input format read by ``load_interactions``."""
    ctx = [c for c in records.columns if c.startswith("ctx_")]
    out = records[["user_raw_id", "item_raw_id", "rating", "timestamp"] + ctx].rename(
        columns={"user_raw_id": "user_id", "item_raw_id": "item_id"})
    out.to_csv(path, index=False, lineterminator="\n")
