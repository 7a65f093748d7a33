"""Input validation helpers shared by the estimators."""
import numpy as np
import scipy.sparse as sps
from sklearn.utils import check_array


def check_interactions(M):
    """Return ``M`` as a sorted binary ``int32`` CSR matrix."""
    if not sps.issparse(M):
        M = check_array(M, ensure_2d=True, ensure_min_samples=0, ensure_min_features=0)
    M = sps.csr_matrix(M, dtype=np.int32)
    M.sum_duplicates()
    M.eliminate_zeros()
    if M.nnz and (M.data != 1).any():
        raise ValueError("interaction matrix must be binary")
    M.sort_indices()
    return M


def check_pairs(X, n_users=None, n_items=None, n_context=None):
    """Split a pair feature array ``[user, item, ctx...]`` into its columns.

    Ids must be integer valued and, when the bounds are given, in range.
    """
    X = check_array(X, dtype=np.float64, ensure_min_samples=0)
    if X.shape[1] < 2:
        raise ValueError(f"pair arrays need at least user and item columns, got shape {X.shape}")
    users, items, ctx = X[:, 0], X[:, 1], X[:, 2:]
    if n_context is not None and ctx.shape[1] != n_context:
        raise ValueError(f"expected {n_context} context columns, got {ctx.shape[1]}")
    for name, ids, bound in (("user", users, n_users), ("item", items, n_items)):
        if np.any(ids != np.floor(ids)):
            raise ValueError(f"{name} ids must be integers")
        if ids.size and (ids.min() < 0 or (bound is not None and ids.max() >= bound)):
            raise IndexError(f"{name} id out of range [0, {bound})")
    return users.astype(np.int64), items.astype(np.int64), ctx


def make_pairs(users, items, context=None):
    users = np.asarray(users, dtype=np.float64).ravel()
    items = np.asarray(items, dtype=np.float64).ravel()
    if context is None:
        context = np.zeros((len(users), 0))
    context = np.asarray(context, dtype=np.float64).reshape(len(users), -1)
    return np.column_stack([users, items, context])
