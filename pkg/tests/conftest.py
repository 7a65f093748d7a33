import numpy as np
import pytest
import scipy.sparse as sps

from graphrerank import data, synthetic

ACCEPTANCE = {}


def record_criterion(number, name, passed, detail=""):
    ACCEPTANCE[number] = (name, bool(passed), detail)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE):
        name, passed, detail = ACCEPTANCE[number]
        terminalreporter.write_line(f"[{'PASS' if passed else 'FAIL'}] {number}. {name}: {detail}")


def random_binary(rng, n_rows, n_cols, density):
    dense = rng.random((n_rows, n_cols)) < density
    return sps.csr_matrix(dense.astype(np.int32))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def small_matrix():
    """M = [[1,1,0],[1,0,1]]."""
    return sps.csr_matrix(np.array([[1, 1, 0], [1, 0, 1]], dtype=np.int32))


@pytest.fixture(scope="session")
def planted_small():
    """Small planted dataset split into train/val/test with its training matrix."""
    records, vocab = synthetic.make_two_block(n_users=60, n_items=40, p_within=0.3, p_across=0.02,
                                              n_context=2, seed=3)
    pairs = data.binarize(records, 4.0)
    train, val, test = data.split(pairs, seed=3)
    M = data.build_matrix(train, vocab.n_users, vocab.n_items)
    return train, val, test, M


@pytest.fixture(scope="session")
def fitted_small(planted_small):
    from graphrerank.model import DCNRanker
    train, val, _, M = planted_small
    model = DCNRanker(embedding_dim=8, context_dim=4, deep_layers=(16, 8), batch_size=64, max_epochs=8,
                      patience=8, learning_rate=3e-2, random_state=0)
    return model.fit(train.X, train.labels, eval_set=(val.X, val.labels), interactions=M)
