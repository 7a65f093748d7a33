import copy
import json

import numpy as np
import pytest

from graphrerank import evaluation
from graphrerank.data import LabeledPairs
from graphrerank.model import DCNRanker
from graphrerank.rerank import GraphConvReranker, rerank_one


@pytest.fixture
def zero_model(fitted_small):
    model = copy.deepcopy(fitted_small)
    model.params_ = {k: np.zeros_like(v) for k, v in model.params_.items()}
    return model


def test_zero_model_ranks_by_item_index(zero_model, planted_small):
    _, _, _, M = planted_small
    lists, _, _ = evaluation.rank_users(zero_model, [0, 5], M, cutoff=10,
                                        contexts=np.zeros((M.shape[0], 2)))
    for tl in lists:
        seen = set(M.indices[M.indptr[tl.user]:M.indptr[tl.user + 1]].tolist())
        assert tl.items.tolist() == [i for i in range(M.shape[1]) if i not in seen][:10]
        assert np.all(tl.scores == 0.5)


def test_nk_one_rerank_equals_base(fitted_small, planted_small):
    _, _, test, M = planted_small
    ctx = evaluation.user_contexts(test, M.shape[0])
    users = np.arange(M.shape[0])
    base, _, _ = evaluation.rank_users(fitted_small, users, M, contexts=ctx)
    reranker = GraphConvReranker(fitted_small, n_k=1).fit(M)
    rr, _, info = evaluation.rank_users(fitted_small, users, M, "rerank", reranker, contexts=ctx)
    for a, b in zip(base, rr):
        assert a.items.tobytes() == b.items.tobytes() and a.scores.tobytes() == b.scores.tobytes()
    assert info["pair_evaluations"] == info["fallbacks"]


def test_rerank_toplists_match_reference_pipeline(fitted_small, planted_small):
    _, _, test, M = planted_small
    ctx = evaluation.user_contexts(test, M.shape[0])
    users = np.arange(30)
    reranker = GraphConvReranker(fitted_small, n_k=2).fit(M)
    lists, _, _ = evaluation.rank_users(fitted_small, users, M, "rerank", reranker, cutoff=20, contexts=ctx)
    for tl in lists:
        u = tl.user
        seen = set(M.indices[M.indptr[u]:M.indptr[u + 1]].tolist())
        scored = [(rerank_one(fitted_small, u, i, ctx[u], reranker.user_index_, reranker.item_index_, 2), i)
                  for i in range(M.shape[1]) if i not in seen]
        ref = sorted(scored, key=lambda t: (-t[0], t[1]))[:20]
        assert tl.items.tolist() == [i for _, i in ref]
        np.testing.assert_allclose(tl.scores, [s for s, _ in ref], rtol=0, atol=1e-12)


def test_rank_users_deterministic_across_threads(fitted_small, planted_small):
    _, _, test, M = planted_small
    ctx = evaluation.user_contexts(test, M.shape[0])
    users = np.arange(M.shape[0])
    reranker = GraphConvReranker(fitted_small, n_k=2).fit(M)
    a, _, _ = evaluation.rank_users(fitted_small, users, M, "rerank", reranker, contexts=ctx, n_jobs=1)
    reranker.clear_cache()
    b, _, _ = evaluation.rank_users(fitted_small, users, M, "rerank", reranker, contexts=ctx, n_jobs=3)
    assert [t.items.tobytes() + t.scores.tobytes() for t in a] == [t.items.tobytes() + t.scores.tobytes() for t in b]


def test_shortlist_only_reorders_top_items(fitted_small, planted_small):
    _, _, test, M = planted_small
    ctx = evaluation.user_contexts(test, M.shape[0])
    reranker = GraphConvReranker(fitted_small, n_k=2).fit(M)
    base, _, _ = evaluation.rank_users(fitted_small, [0, 1], M, cutoff=5, contexts=ctx)
    short, _, _ = evaluation.rank_users(fitted_small, [0, 1], M, "rerank", reranker, cutoff=5, contexts=ctx,
                                        shortlist=5)
    for a, b in zip(base, short):
        assert sorted(a.items.tolist()) == sorted(b.items.tolist())
    with pytest.raises(ValueError):
        evaluation.rank_users(fitted_small, [0], M, "rerank", reranker, cutoff=5, shortlist=3)


def test_rank_users_argument_checks(fitted_small, planted_small):
    M = planted_small[3]
    with pytest.raises(ValueError):
        evaluation.rank_users(fitted_small, [0], M, mode="other")
    with pytest.raises(ValueError):
        evaluation.rank_users(fitted_small, [0], M, mode="rerank")


def test_user_contexts_mean():
    pairs = LabeledPairs([0, 0, 2], [0, 1, 0], [1, 0, 1], [[1.0], [3.0], [5.0]])
    np.testing.assert_array_equal(evaluation.user_contexts(pairs, 3), [[2.0], [0.0], [5.0]])


def test_ranking_metrics_skip_users_without_relevance():
    lists = [evaluation.TopList(0, np.array([1, 2]), np.zeros(2)), evaluation.TopList(1, np.array([3]), np.zeros(1))]
    out = evaluation.ranking_metrics(lists, {0: {2}}, ks=(1, 2))
    assert out["recall@1"] == 0.0 and out["recall@2"] == 1.0
    assert out["ndcg@2"] == pytest.approx(1 / np.log2(3))


def test_evaluate_report(fitted_small, planted_small, tmp_path):
    _, _, test, M = planted_small
    base = evaluation.evaluate(fitted_small, test, M, ks=(5, 10))
    reranker = GraphConvReranker(fitted_small, n_k=2).fit(M)
    rr = evaluation.evaluate(fitted_small, test, M, reranker=reranker, ks=(5, 10), seed=4)
    assert base.mode == "base" and rr.mode == "rerank" and rr.n_k == 2 and rr.seed == 4
    assert set(base.metrics) == {"recall@5", "ndcg@5", "recall@10", "ndcg@10"}
    assert all(0.0 <= v <= 1.0 for v in rr.metrics.values())
    assert 0.0 <= base.auc <= 1.0
    assert rr.pair_evaluations > 0
    assert rr.csv_row()["mode"] == "rerank"
    path = tmp_path / "report.json"
    evaluation.write_report_json(path, [base, rr], include_timings=False)
    payload = json.loads(path.read_text())
    assert "timings" not in payload[0] and sum(payload[1]["max_pair_histogram"]["counts"]) > 0


def test_relative_change():
    out = evaluation.relative_change({"a": 0.22, "b": 0.1}, {"a": 0.2, "b": 0.0})
    assert out["a"] == pytest.approx(0.1) and np.isnan(out["b"])


def test_proportion_histogram():
    hist = evaluation.proportion_histogram([0.05, 0.5, 1.0], bins=2)
    assert hist["counts"] == [1, 2] and hist["edges"] == [0.0, 0.5, 1.0]


def test_rerank_overhead_definition():
    rows = [{"stage": "train_epoch", "mode": "table", "n_k": 0, "seconds": 6.0},
            {"stage": "index_build", "mode": "both", "n_k": 10, "seconds": 1.0},
            {"stage": "inference", "mode": "base", "n_k": 0, "seconds": 2.0},
            {"stage": "inference", "mode": "rerank", "n_k": 2, "seconds": 3.0}]
    assert evaluation.rerank_overhead(rows) == {2: pytest.approx(10.0)}
    assert evaluation.rerank_overhead(rows, train_seconds=16.0) == {2: pytest.approx(5.0)}


def test_bench_rows(planted_small):
    train, val, test, M = planted_small
    template = DCNRanker(embedding_dim=4, context_dim=2, deep_layers=(4,), batch_size=256, random_state=0)
    rows = evaluation.bench(template, train, val, test, M, nk_grid=(1, 2, 4), epochs=1)
    stages = [(r["stage"], r["mode"], r["n_k"]) for r in rows]
    assert stages[:2] == [("train_epoch", "table", 0), ("train_epoch", "graph", 0)]
    calls = {r["n_k"]: r["invocations"] for r in rows if r["mode"] == "rerank"}
    assert calls[1] <= calls[2] <= calls[4]


def test_write_rows_csv(tmp_path):
    path = tmp_path / "t.csv"
    evaluation.write_rows_csv(path, [{"a": 1, "b": 0.1}, {"a": 2, "b": None}])
    assert path.read_text() == "a,b\n1,0.1\n2,\n"
