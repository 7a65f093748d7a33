"""Linear (LightGCN-style) propagation over the user-item bipartite graph.

Nodes are numbered users first, then items: item ``j`` is node ``n_users + j``.
"""
import numpy as np
import scipy.sparse as sps
from sklearn.base import clone

from ._validation import check_interactions


def default_readout(layers):
    return np.full(layers + 1, 1.0 / (layers + 1))


def check_readout(layers, readout):
    if layers < 0:
        raise ValueError("layers must be >= 0")
    if readout is None:
        return default_readout(layers)
    readout = np.asarray(readout, dtype=np.float64).ravel()
    if readout.shape != (layers + 1,) or not np.all(np.isfinite(readout)):
        raise ValueError(f"readout needs {layers + 1} finite coefficients")
    return readout


def normalized_adjacency(M):
    """Symmetric-normalized bipartite adjacency; edge (i, j) weighs 1/sqrt(|N_i| |N_j|)."""
    M = check_interactions(M).astype(np.float64)
    n_users, n_items = M.shape
    A = sps.bmat([[None, M], [M.T, None]], format="csr",
                 dtype=np.float64) if M.nnz else sps.csr_matrix((n_users + n_items,) * 2)
    deg = np.diff(A.indptr).astype(np.float64)
    inv_sqrt = np.zeros_like(deg)
    np.divide(1.0, np.sqrt(deg), out=inv_sqrt, where=deg > 0)
    D = sps.diags(inv_sqrt)
    adj = sps.csr_matrix(D @ A @ D)
    adj.sort_indices()
    return adj


def propagate(M, base, layers=2, readout=None, adjacency=None):
    """Graph embeddings ``sum_l a_l z^(l)`` with ``z^(0) = base`` and ``z^(l) = adj @ z^(l-1)``.

    Parameters
    ----------
    M : sparse matrix of shape (n_users, n_items)
    base : ndarray of shape (n_users + n_items, d)
        Table embeddings, users first.
    layers : int
    readout : array-like of length ``layers + 1``, optional
        Defaults to uniform ``1 / (layers + 1)``.
    adjacency : sparse matrix, optional
        Precomputed :func:`normalized_adjacency` of ``M``.
    """
    coef = check_readout(layers, readout)
    adj = normalized_adjacency(M) if adjacency is None else adjacency
    base = np.asarray(base, dtype=np.float64)
    if base.shape[0] != adj.shape[0]:
        raise ValueError(f"base table has {base.shape[0]} rows, graph has {adj.shape[0]} nodes")
    z = base
    out = coef[0] * base
    for a in coef[1:]:
        z = adj @ z
        out = out + a * z
    return out


def propagation_rows(adjacency, nodes, layers, readout=None):
    """Rows ``nodes`` of the propagation operator ``sum_l a_l adj^l`` as a sparse matrix.

    Only the ``layers``-hop neighborhood of ``nodes`` is touched, so the
    embeddings of ``nodes`` are ``rows @ base`` and their gradient w.r.t. the
    base table is ``rows.T @ grad``.
    """
    coef = check_readout(layers, readout)
    nodes = np.asarray(nodes, dtype=np.int64)
    n = adjacency.shape[0]
    R = sps.csr_matrix((np.ones(nodes.size), (np.arange(nodes.size), nodes)), shape=(nodes.size, n))
    out = coef[0] * R
    for a in coef[1:]:
        R = R @ adjacency
        out = out + a * R
    return sps.csr_matrix(out)


def graph_encode_mode(model, M, layers=2, readout=None):
    """Unfitted copy of a table-mode ranker configured to use the graph encoder on ``M``.

    ``M`` must be passed again to ``fit`` via ``interactions=``; it is only
    checked here for shape consistency with any previously fitted model.
    """
    if getattr(model, "encoder", "table") != "table":
        raise ValueError("model is already in graph mode")
    check_interactions(M)
    return clone(model).set_params(encoder="graph", graph_layers=layers,
                                   readout=None if readout is None else tuple(readout))
