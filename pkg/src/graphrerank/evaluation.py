"""Full-ranking evaluation, re-ranking comparison and timing harness."""
import json
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np
from sklearn.base import clone

from ._validation import check_interactions, make_pairs
from .metrics import auc, ndcg_at_k, recall_at_k
from .model import score_batch
from .rerank import GraphConvReranker
from .similarity import SimilarityIndex

_USER_CHUNK = 32


@dataclass
class TopList:
    user: int
    items: np.ndarray
    scores: np.ndarray


@dataclass
class EvalReport:
    mode: str
    n_k: int
    metrics: dict
    auc: float
    timings: dict
    seed: int = 0
    n_users: int = 0
    fallbacks: int = 0
    pair_evaluations: int = 0
    config: dict = field(default_factory=dict)

    def to_dict(self):
        return asdict(self)

    def csv_row(self):
        row = {"seed": self.seed, "mode": self.mode, "n_k": self.n_k}
        row.update(self.metrics)
        row["auc"] = self.auc
        return row


def user_contexts(pairs, n_users):
    """Per-user ranking context: mean context of the user's pairs (zeros if none)."""
    ctx = np.zeros((n_users, pairs.n_context))
    if pairs.n_context:
        counts = np.bincount(pairs.users, minlength=n_users)
        np.add.at(ctx, pairs.users, pairs.context)
        ctx /= np.maximum(counts, 1)[:, None]
    return ctx


def rank_users(model, users, train_matrix, mode="base", reranker=None, cutoff=20, contexts=None,
               shortlist=None, n_jobs=1):
    """Rank every non-training item for each user.

    Parameters
    ----------
    model : fitted ranker
    users : array-like of int
    train_matrix : sparse matrix (n_users, n_items)
        Items with a training interaction are excluded from a user's list.
    mode : {"base", "rerank"}
    reranker : GraphConvReranker, required for ``mode="rerank"``
    cutoff : int
        Length of each returned list.
    contexts : ndarray of shape (n_users, d^c), optional
        Context attached to every (user, item) query of a user.
    shortlist : int, optional
        Re-rank only the top ``shortlist`` items by base score.
    n_jobs : int
        Threads over user chunks; output does not depend on it.

    Returns
    -------
    toplists : list of TopList, in the order of ``users``
    timings : dict with ``base_inference`` and ``rerank_inference`` seconds
    info : dict with ``pair_evaluations``, ``fallbacks`` and ``max_pair_proportion``
    """
    if mode not in ("base", "rerank"):
        raise ValueError(f"unknown mode {mode!r}")
    if mode == "rerank" and reranker is None:
        raise ValueError("rerank mode needs a reranker")
    if shortlist is not None and shortlist < cutoff:
        raise ValueError("shortlist must be at least the cutoff")
    M = check_interactions(train_matrix)
    users = np.asarray(users, dtype=np.int64)
    n_items = M.shape[1]
    all_items = np.arange(n_items)

    def work(chunk):
        cand, owners = [], []
        for u in chunk:
            seen = M.indices[M.indptr[u]:M.indptr[u + 1]]
            items = np.setdiff1d(all_items, seen, assume_unique=True)
            cand.append(items)
            owners.append(np.full(items.size, u))
        items = np.concatenate(cand)
        owner = np.concatenate(owners)
        ctx = contexts[owner] if contexts is not None else None
        X = make_pairs(owner, items, ctx)
        t0 = time.perf_counter()
        scores = score_batch(model, X)
        t_base = time.perf_counter() - t0
        t_rerank = 0.0
        info = {"pair_evaluations": 0, "fallbacks": 0, "max_pair_proportion": np.empty(0)}
        if mode == "rerank":
            sel = np.arange(len(X))
            if shortlist is not None:
                sel = np.concatenate([np.flatnonzero(owner == u)[_order(items[owner == u], scores[owner == u])[:shortlist]]
                                      for u in chunk])
            t0 = time.perf_counter()
            new, rinfo = reranker.rerank(X[sel], base_scores=scores[sel])
            t_rerank = time.perf_counter() - t0
            if shortlist is not None:
                keep = np.zeros(len(X), bool)
                keep[sel] = True
                X, items, owner = X[keep], items[keep], owner[keep]
                order_back = np.argsort(sel)
                scores = new[order_back]
            else:
                scores = new
            info = {"pair_evaluations": int(rinfo["pair_counts"].sum()), "fallbacks": int(rinfo["fallback"].sum()),
                    "max_pair_proportion": rinfo["max_pair_proportion"][~rinfo["fallback"]]}
        lists = []
        for u in chunk:
            mask = owner == u
            it, sc = items[mask], scores[mask]
            top = _order(it, sc)[:cutoff]
            lists.append(TopList(int(u), it[top], sc[top]))
        return lists, t_base, t_rerank, info

    chunks = [users[lo:lo + _USER_CHUNK] for lo in range(0, len(users), _USER_CHUNK)]
    if n_jobs and n_jobs > 1 and len(chunks) > 1:
        with ThreadPoolExecutor(n_jobs) as pool:
            parts = list(pool.map(work, chunks))
    else:
        parts = [work(c) for c in chunks]
    toplists = [t for p in parts for t in p[0]]
    timings = {"base_inference": math.fsum(p[1] for p in parts),
               "rerank_inference": math.fsum(p[2] for p in parts)}
    info = {"pair_evaluations": sum(p[3]["pair_evaluations"] for p in parts),
            "fallbacks": sum(p[3]["fallbacks"] for p in parts),
            "max_pair_proportion": np.concatenate([p[3]["max_pair_proportion"] for p in parts]) if parts else np.empty(0)}
    return toplists, timings, info


def _order(items, scores):
    """Descending score, ties by ascending item index."""
    return np.lexsort((items, -scores))


def ranking_metrics(toplists, relevant, ks=(10, 20)):
    """Mean Recall@K and NDCG@K over users with at least one relevant item."""
    sums = {f"{name}@{k}": [] for k in ks for name in ("recall", "ndcg")}
    for tl in toplists:
        rel = relevant.get(tl.user)
        if not rel:
            continue
        for k in ks:
            sums[f"recall@{k}"].append(recall_at_k(tl.items, rel, k))
            sums[f"ndcg@{k}"].append(ndcg_at_k(tl.items, rel, k))
    return {key: (math.fsum(v) / len(v) if v else float("nan")) for key, v in sums.items()}


def relevant_items(test_pairs):
    rel = {}
    pos = test_pairs.positives()
    for u, i in zip(pos.users.tolist(), pos.items.tolist()):
        rel.setdefault(u, set()).add(i)
    return rel


def evaluate(model, test_pairs, train_matrix, reranker=None, ks=(10, 20), seed=0, shortlist=None,
             n_jobs=1, config=None):
    """Evaluate base (``reranker=None``) or re-ranked full ranking on the test split.

    Ranking metrics use test positives as relevance; AUC is computed on the
    labeled test pairs when both labels occur.
    """
    M = check_interactions(train_matrix)
    rel = relevant_items(test_pairs)
    users = np.array(sorted(rel), dtype=np.int64)
    contexts = user_contexts(test_pairs, M.shape[0]) if test_pairs.n_context else None
    mode = "base" if reranker is None else "rerank"
    cutoff = max(ks)
    toplists, timings, info = rank_users(model, users, M, mode, reranker, cutoff, contexts, shortlist, n_jobs)
    metrics = ranking_metrics(toplists, rel, ks)

    test_auc = float("nan")
    if len(np.unique(test_pairs.labels)) == 2:
        X = test_pairs.X
        base = score_batch(model, X)
        s = base if reranker is None else reranker.rerank(X, base_scores=base)[0]
        test_auc = auc(s, test_pairs.labels)
    report = EvalReport(mode, 0 if reranker is None else reranker.n_k, metrics, test_auc, timings, seed,
                        len(users), info["fallbacks"], info["pair_evaluations"], dict(config or {}))
    report.max_pair_proportion = info["max_pair_proportion"]
    return report


def relative_change(ours, original):
    """Per-metric ``(ours - original) / original``."""
    return {k: ((ours[k] - original[k]) / original[k] if original[k] else float("nan")) for k in original}


def proportion_histogram(proportions, bins=20):
    """Histogram of max-pair contribution proportions on ``[0, 1]``."""
    counts, edges = np.histogram(np.asarray(proportions, dtype=np.float64), bins=bins, range=(0.0, 1.0))
    return {"edges": edges.tolist(), "counts": counts.tolist()}


def bench(model, train_pairs, val_pairs, test_pairs, train_matrix, nk_grid=(1, 2, 5, 10), epochs=2,
          n_max=None, graph_layers=2, n_jobs=1):
    """Timing table comparing encoders, index build, and base vs re-ranked inference.

    Returns a list of rows ``{stage, mode, n_k, seconds, invocations}``.
    ``model`` is an unfitted or fitted ranker used as the hyper-parameter template
    for the encoder comparison and, when fitted, for inference timings.
    """
    M = check_interactions(train_matrix)
    rows = []
    X, y = train_pairs.X, train_pairs.labels
    eval_set = (val_pairs.X, val_pairs.labels) if len(np.unique(val_pairs.labels)) == 2 else None
    fitted = {}
    for encoder in ("table", "graph"):
        est = clone(model).set_params(encoder=encoder, graph_layers=graph_layers, max_epochs=epochs,
                                      patience=epochs + 1)
        est.fit(X, y, eval_set=eval_set, interactions=M)
        per_epoch = math.fsum(r["wall_seconds"] for r in est.training_log_) / len(est.training_log_)
        rows.append({"stage": "train_epoch", "mode": encoder, "n_k": 0, "seconds": per_epoch,
                     "invocations": len(X)})
        fitted[encoder] = est
    scorer = model if hasattr(model, "params_") else fitted["table"]

    n_max = n_max or max(nk_grid)
    t0 = time.perf_counter()
    uidx = SimilarityIndex("user", n_max, n_jobs).fit(M)
    iidx = SimilarityIndex("item", n_max, n_jobs).fit(M)
    rows.append({"stage": "index_build", "mode": "both", "n_k": n_max, "seconds": time.perf_counter() - t0,
                 "invocations": 0})

    rel = relevant_items(test_pairs)
    users = np.array(sorted(rel), dtype=np.int64)
    contexts = user_contexts(test_pairs, M.shape[0]) if test_pairs.n_context else None
    _, timings, _ = rank_users(scorer, users, M, "base", cutoff=20, contexts=contexts, n_jobs=n_jobs)
    n_scored = int(M.shape[1] * len(users) - sum(M.getnnz(axis=1)[users]))
    rows.append({"stage": "inference", "mode": "base", "n_k": 0, "seconds": timings["base_inference"],
                 "invocations": n_scored})
    for n_k in nk_grid:
        rr = GraphConvReranker.from_indices(scorer, uidx, iidx, n_k=n_k, n_jobs=n_jobs)
        _, timings, info = rank_users(scorer, users, M, "rerank", rr, cutoff=20, contexts=contexts,
                                      n_jobs=n_jobs)
        rows.append({"stage": "inference", "mode": "rerank", "n_k": n_k,
                     "seconds": timings["base_inference"] + timings["rerank_inference"],
                     "invocations": info["pair_evaluations"]})
    return rows


def write_rows_csv(path, rows, columns=None):
    columns = columns or list(rows[0])
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(",".join(columns) + "\n")
        for row in rows:
            fh.write(",".join(_fmt(row.get(c)) for c in columns) + "\n")


def _fmt(v):
    if isinstance(v, float):
        return repr(v)
    return "" if v is None else str(v)


def rerank_overhead(rows, train_seconds=None):
    """Per-``n_k`` re-ranking share of total pipeline time, in percent.

    The pipeline is training, index build, base inference and the extra
    inference time of re-ranking. ``train_seconds`` defaults to the bench's
    table-encoder epochs.
    """
    by = {(r["stage"], r["mode"], r["n_k"]): r["seconds"] for r in rows}
    base = by.get(("inference", "base", 0))
    index = next((r["seconds"] for r in rows if r["stage"] == "index_build"), 0.0)
    if base is None:
        return {}
    if train_seconds is None:
        train_seconds = next((r["seconds"] for r in rows if r["stage"] == "train_epoch" and r["mode"] == "table"), 0.0)
    out = {}
    for (stage, mode, n_k), seconds in by.items():
        if stage == "inference" and mode == "rerank":
            extra = max(seconds - base, 0.0)
            out[n_k] = 100.0 * extra / (train_seconds + index + base + extra)
    return out


def write_report_json(path, reports, include_timings=True):
    """JSON list of reports with max-pair histograms; timings optional (wall-clock is not reproducible)."""
    payload = []
    for r in reports:
        d = r.to_dict()
        if not include_timings:
            d.pop("timings")
        d["max_pair_histogram"] = proportion_histogram(getattr(r, "max_pair_proportion", []))
        payload.append(d)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True, default=_json_default)
        fh.write("\n")


def _json_default(o):
    if isinstance(o, np.generic):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(type(o))
