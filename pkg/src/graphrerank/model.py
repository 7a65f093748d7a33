"""Deep & Cross network CTR ranker with an analytic backward pass.

The forward path is: ID lookup (table or graph encoder) and affine context
encoding, concatenated into ``z0``; a cross network and a ReLU deep network
both read ``z0``; their outputs are concatenated and mapped to a single
logit. Training minimizes clamped binary cross-entropy plus an L2 penalty on
the cross-layer weights using AdamW.
"""
import copy
import logging
import time
from dataclasses import dataclass

import numpy as np
from scipy.special import expit
from sklearn.base import BaseEstimator, ClassifierMixin, clone
from sklearn.model_selection import ParameterGrid
from sklearn.utils.validation import check_is_fitted

from . import graphenc
from ._io import BinaryReader, BinaryWriter
from ._random import derive_seed, rng_for
from ._validation import check_interactions, check_pairs
from .data import LabeledPairs, build_matrix, sample_negatives
from .exceptions import NumericalError
from .metrics import auc

_log = logging.getLogger(__name__)

EPS = 1e-7
CHECKPOINT_MAGIC = b"GRCK"
CHECKPOINT_VERSION = 1
_SCORE_CHUNK = 65536
# small GEMMs take a different BLAS path; padding keeps per-row results batch-invariant
_SCORE_PAD = 256


@dataclass
class Architecture:
    """Static shape information needed to run the network on raw parameters."""

    n_users: int
    n_items: int
    variant: str = "vector"
    l2_reg: float = 0.0
    encoder: str = "table"
    adjacency: object = None
    graph_layers: int = 0
    readout: object = None

    @property
    def n_nodes(self):
        return self.n_users + self.n_items


# -- forward pieces ---------------------------------------------------------

def encode_input(params, users, items, context, n_users, table=None):
    """``z0 = [f(user) || f(item) || h(context)]``.

    ``table`` overrides ``params["embedding"]`` as the lookup source, which is
    how the graph encoder's propagated embeddings are injected.
    """
    E = params["embedding"] if table is None else table
    n_items = E.shape[0] - n_users
    users = np.asarray(users, dtype=np.int64)
    items = np.asarray(items, dtype=np.int64)
    if users.size and (users.min() < 0 or users.max() >= n_users):
        raise IndexError("user index out of range")
    if items.size and (items.min() < 0 or items.max() >= n_items):
        raise IndexError("item index out of range")
    parts = [E[users], E[n_users + items]]
    if "context_weight" in params:
        parts.append(np.asarray(context, dtype=np.float64) @ params["context_weight"] + params["context_bias"])
    return np.concatenate(parts, axis=1)


def cross_forward(z0, weights, biases, variant="vector"):
    """Run the cross layers on a batch ``z0`` of shape (B, D).

    ``vector``: ``z_{l+1} = z0 * (z_l . w_l) + b_l + z_l``.
    ``matrix``: ``z_{l+1} = z0 * (z_l W_l^T + b_l) + z_l``.

    Returns the output and the list of layer inputs kept for the backward pass.
    """
    z0 = np.atleast_2d(z0)
    z = z0
    inputs = []
    for w, b in zip(weights, biases):
        inputs.append(z)
        if variant == "vector":
            z = z0 * (z @ w)[:, None] + b + z
        else:
            z = z0 * (z @ w.T + b) + z
    return z, inputs


def deep_forward(h0, weights, biases):
    """ReLU MLP; returns the output and the pre-activations of every layer."""
    h = np.atleast_2d(h0)
    pre = []
    for W, b in zip(weights, biases):
        a = h @ W.T + b
        pre.append(a)
        h = np.maximum(a, 0.0)
    return h, pre


def _deep_params(params):
    n = sum(1 for k in params if k.startswith("deep_weight_"))
    return [params[f"deep_weight_{k}"] for k in range(n)], [params[f"deep_bias_{k}"] for k in range(n)]


def _cross_params(params):
    return list(params["cross_weight"]), list(params["cross_bias"])


def forward(params, z0, variant="vector"):
    ws, bs = _cross_params(params)
    zc, cross_inputs = cross_forward(z0, ws, bs, variant)
    wd, bd = _deep_params(params)
    hd, pre = deep_forward(z0, wd, bd)
    joint = np.concatenate([zc, hd], axis=1)
    logit = joint @ params["logits_weight"]
    return expit(logit), (z0, cross_inputs, zc, pre, hd, joint)


def predict(params, z0, variant="vector"):
    """Interaction probability ``sigmoid([cross_out || deep_out] . w_logits)``."""
    return forward(params, z0, variant)[0]


def bce_loss(predictions, labels, l2_reg=0.0, cross_weights=()):
    """Mean clamped binary cross-entropy plus ``l2_reg * sum ||w_l||^2``."""
    y = np.asarray(labels, dtype=np.float64)
    if np.any((y != 0) & (y != 1)):
        raise ValueError("labels must be 0 or 1")
    p = np.clip(np.asarray(predictions, dtype=np.float64), EPS, 1 - EPS)
    loss = -np.mean(y * np.log(p) + (1 - y) * np.log(1 - p))
    return loss + l2_reg * sum(float(np.sum(np.square(w))) for w in cross_weights)


# -- backward ---------------------------------------------------------------

def _lookup_table(params, arch, users, items):
    """Embedding rows for the batch plus what the backward pass needs to scatter into E."""
    E = params["embedding"]
    if arch.encoder == "table" or arch.graph_layers == 0:
        return E, None
    nodes, inverse = np.unique(np.concatenate([users, arch.n_users + items]), return_inverse=True)
    rows = graphenc.propagation_rows(arch.adjacency, nodes, arch.graph_layers, arch.readout)
    local = np.zeros_like(E)
    local[nodes] = rows @ E
    return local, (nodes, rows)


def loss_and_gradients(params, arch, users, items, context, labels):
    """Batch loss and exact gradients for every parameter tensor."""
    users = np.asarray(users, dtype=np.int64)
    items = np.asarray(items, dtype=np.int64)
    y = np.asarray(labels, dtype=np.float64)
    table, graph = _lookup_table(params, arch, users, items)
    z0 = encode_input(params, users, items, context, arch.n_users, table=table)
    p, (z0, cross_inputs, zc, pre, hd, joint) = forward(params, z0, arch.variant)
    cross_w = params["cross_weight"]
    loss = bce_loss(p, y, arch.l2_reg, list(cross_w))

    n = len(y)
    inside = (p > EPS) & (p < 1 - EPS)
    dlogit = np.where(inside, p - y, 0.0) / n
    grads = {"logits_weight": joint.T @ dlogit}
    dzc = np.outer(dlogit, params["logits_weight"][:zc.shape[1]])
    dhd = np.outer(dlogit, params["logits_weight"][zc.shape[1]:])

    # deep network
    wd, _ = _deep_params(params)
    dz0 = np.zeros_like(z0)
    dh = dhd
    for k in reversed(range(len(wd))):
        da = dh * (pre[k] > 0)
        h_in = z0 if k == 0 else np.maximum(pre[k - 1], 0.0)
        grads[f"deep_weight_{k}"] = da.T @ h_in
        grads[f"deep_bias_{k}"] = da.sum(axis=0)
        dh = da @ wd[k]
    dz0 += dh

    # cross network
    dW = np.zeros_like(cross_w)
    dB = np.zeros_like(params["cross_bias"])
    g = dzc
    for k in reversed(range(len(cross_inputs))):
        z_in = cross_inputs[k]
        w = cross_w[k]
        dB[k] = g.sum(axis=0)
        if arch.variant == "vector":
            s = z_in @ w
            ds = np.sum(g * z0, axis=1)
            dz0 += g * s[:, None]
            dW[k] = z_in.T @ ds
            g = g + ds[:, None] * w[None, :]
        else:
            u = z_in @ w.T + params["cross_bias"][k]
            du = g * z0
            dz0 += g * u
            dW[k] = du.T @ z_in
            dB[k] = du.sum(axis=0)
            g = g + du @ w
    dz0 += g
    grads["cross_weight"] = dW + 2.0 * arch.l2_reg * cross_w
    grads["cross_bias"] = dB

    # encoders
    d = params["embedding"].shape[1]
    if "context_weight" in params:
        dctx = dz0[:, 2 * d:]
        grads["context_weight"] = np.asarray(context, dtype=np.float64).T @ dctx
        grads["context_bias"] = dctx.sum(axis=0)
    dtable = np.zeros_like(params["embedding"])
    np.add.at(dtable, users, dz0[:, :d])
    np.add.at(dtable, arch.n_users + items, dz0[:, d:2 * d])
    if graph is not None:
        nodes, rows = graph
        dtable = np.asarray(rows.T @ dtable[nodes])
    grads["embedding"] = dtable
    return loss, grads


def init_params(rng, n_nodes, n_context, embedding_dim=64, context_dim=16, cross_layers=2,
                cross_variant="vector", deep_layers=(128, 64)):
    """Embeddings ~ U(+-1/sqrt(d)); weights ~ U(+-1/sqrt(fan_in)); biases 0."""
    d = embedding_dim
    dprime = context_dim if n_context > 0 else 0
    width = 2 * d + dprime
    params = {"embedding": rng.uniform(-1, 1, size=(n_nodes, d)) / np.sqrt(d)}
    if n_context > 0:
        params["context_weight"] = rng.uniform(-1, 1, size=(n_context, dprime)) / np.sqrt(n_context)
        params["context_bias"] = np.zeros(dprime)
    shape = (cross_layers, width) if cross_variant == "vector" else (cross_layers, width, width)
    params["cross_weight"] = rng.uniform(-1, 1, size=shape) / np.sqrt(width)
    params["cross_bias"] = np.zeros((cross_layers, width))
    fan_in = width
    for k, out in enumerate(deep_layers):
        params[f"deep_weight_{k}"] = rng.uniform(-1, 1, size=(out, fan_in)) / np.sqrt(fan_in)
        params[f"deep_bias_{k}"] = np.zeros(out)
        fan_in = out
    joint = width + (deep_layers[-1] if deep_layers else width)
    params["logits_weight"] = rng.uniform(-1, 1, size=joint) / np.sqrt(joint)
    return params


class AdamW:
    """Adam with decoupled weight decay, applied in place to a dict of arrays."""

    def __init__(self, lr=1e-3, weight_decay=1e-5, betas=(0.9, 0.999), eps=1e-8):
        self.lr, self.weight_decay, self.betas, self.eps = lr, weight_decay, betas, eps
        self.t = 0
        self.m = {}
        self.v = {}

    def step(self, params, grads):
        self.t += 1
        b1, b2 = self.betas
        c1, c2 = 1 - b1 ** self.t, 1 - b2 ** self.t
        for name, g in grads.items():
            p = params[name]
            if name not in self.m:
                self.m[name] = np.zeros_like(p)
                self.v[name] = np.zeros_like(p)
            m, v = self.m[name], self.v[name]
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * np.square(g)
            p *= 1 - self.lr * self.weight_decay
            p -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


# -- estimator --------------------------------------------------------------

class DCNRanker(ClassifierMixin, BaseEstimator):
    """Deep & Cross network click-through-rate ranker.

    ``X`` arrays hold one pair per row: ``[user, item, ctx_0, ..., ctx_{d^c-1}]``
    with integer-valued dense ids.

    Parameters
    ----------
    embedding_dim : int
        ID embedding width ``d``.
    context_dim : int
        Encoded context width ``d'``; unused when pairs carry no context.
    cross_layers : int
    cross_variant : {"vector", "matrix"}
        Rank-one vector cross layers, or full weight matrices (DCN-V2 style).
    deep_layers : tuple of int
        Hidden widths of the ReLU network.
    learning_rate, weight_decay : float
        AdamW settings; moment decays are (0.9, 0.999) and epsilon 1e-8.
    l2_reg : float
        Penalty on the squared norm of the cross-layer weights.
    batch_size, max_epochs, patience : int
        Early stopping tracks validation AUC when ``eval_set`` is given.
    negative_ratio : int
        Uniformly sampled non-interacted items per training positive,
        redrawn every epoch. 0 disables sampling.
    encoder : {"table", "graph"}
        ``graph`` propagates embeddings over the interaction graph.
    graph_layers : int
    readout : tuple of float, optional
        Per-layer readout coefficients; uniform when omitted.
    random_state : int
    """

    def __init__(self, embedding_dim=64, context_dim=16, cross_layers=2, cross_variant="vector",
                 deep_layers=(128, 64), learning_rate=1e-3, weight_decay=1e-5, l2_reg=0.0,
                 batch_size=2048, max_epochs=20, patience=5, negative_ratio=1, encoder="table",
                 graph_layers=2, readout=None, random_state=0):
        self.embedding_dim = embedding_dim
        self.context_dim = context_dim
        self.cross_layers = cross_layers
        self.cross_variant = cross_variant
        self.deep_layers = deep_layers
        self.learning_rate = learning_rate
        self.weight_decay = weight_decay
        self.l2_reg = l2_reg
        self.batch_size = batch_size
        self.max_epochs = max_epochs
        self.patience = patience
        self.negative_ratio = negative_ratio
        self.encoder = encoder
        self.graph_layers = graph_layers
        self.readout = readout
        self.random_state = random_state

    def _architecture(self, n_users, n_items, interactions):
        if self.encoder not in ("table", "graph"):
            raise ValueError(f"unknown encoder {self.encoder!r}")
        if self.cross_variant not in ("vector", "matrix"):
            raise ValueError(f"unknown cross_variant {self.cross_variant!r}")
        arch = Architecture(n_users, n_items, self.cross_variant, self.l2_reg, self.encoder)
        if self.encoder == "graph":
            if interactions is None:
                raise ValueError("the graph encoder needs interactions=")
            arch.adjacency = graphenc.normalized_adjacency(interactions)
            arch.graph_layers = self.graph_layers
            arch.readout = graphenc.check_readout(self.graph_layers, self.readout)
        return arch

    def fit(self, X, y, eval_set=None, interactions=None, n_users=None, n_items=None):
        """Train with AdamW and keep the epoch with the best validation AUC.

        Parameters
        ----------
        X : array-like of shape (n_pairs, 2 + d^c)
        y : array-like of shape (n_pairs,)
            Binary labels.
        eval_set : tuple (X_val, y_val), optional
        interactions : sparse matrix of shape (n_users, n_items), optional
            Training interaction matrix. Used for negative sampling and by the
            graph encoder; built from the positives of ``X`` when omitted.
        n_users, n_items : int, optional
            Id space sizes when ``interactions`` is not given.
        """
        users, items, ctx = check_pairs(X)
        y = np.asarray(y, dtype=np.int8).ravel()
        if interactions is not None:
            interactions = check_interactions(interactions)
            n_users, n_items = interactions.shape
        n_users = int(n_users if n_users is not None else users.max() + 1)
        n_items = int(n_items if n_items is not None else items.max() + 1)
        check_pairs(X, n_users, n_items)
        train = LabeledPairs(users, items, y, ctx)
        if interactions is None:
            interactions = build_matrix(train, n_users, n_items)
        arch = self._architecture(n_users, n_items, interactions)
        self.n_users_, self.n_items_, self.n_context_ = n_users, n_items, ctx.shape[1]
        self.classes_ = np.array([0, 1])

        params = init_params(rng_for(self.random_state, "init"), n_users + n_items, ctx.shape[1],
                             self.embedding_dim, self.context_dim, self.cross_layers,
                             self.cross_variant, tuple(self.deep_layers))
        opt = AdamW(self.learning_rate, self.weight_decay)
        positives = train.positives()
        neg_seed = derive_seed(self.random_state, "negatives")

        log = []
        best = (-np.inf, 0, copy.deepcopy(params))
        stale = 0
        for epoch in range(1, self.max_epochs + 1):
            start = time.perf_counter()
            data = train
            if self.negative_ratio > 0 and len(positives):
                data = LabeledPairs.concat([train, sample_negatives(positives, interactions,
                                                                    self.negative_ratio, neg_seed + epoch)])
            order = rng_for(self.random_state, "shuffle", epoch).permutation(len(data))
            total = 0.0
            for lo in range(0, len(order), self.batch_size):
                idx = order[lo:lo + self.batch_size]
                loss, grads = loss_and_gradients(params, arch, data.users[idx], data.items[idx],
                                                 data.context[idx], data.labels[idx])
                if not np.isfinite(loss) or not all(np.all(np.isfinite(g)) for g in grads.values()):
                    raise NumericalError(f"non-finite loss or gradient at epoch {epoch}, batch {lo // self.batch_size}")
                opt.step(params, grads)
                total += loss * len(idx)
            train_loss = total / max(len(order), 1)
            if not np.isfinite(train_loss):
                raise NumericalError(f"training diverged at epoch {epoch}")
            self.params_ = params
            self._refresh_inference_table(arch)
            val_auc = float("nan")
            if eval_set is not None:
                Xv, yv = eval_set
                val_auc = auc(self.score_batch(Xv), yv)
            log.append({"epoch": epoch, "train_loss": float(train_loss), "val_auc": val_auc,
                        "wall_seconds": time.perf_counter() - start})
            _log.info("epoch %d loss %.5f val_auc %.4f", epoch, train_loss, val_auc)
            score = val_auc if eval_set is not None else epoch
            if score > best[0]:
                best = (score, epoch, copy.deepcopy(params))
                stale = 0
            else:
                stale += 1
                if eval_set is not None and stale >= self.patience:
                    break
        self.params_ = best[2]
        self.best_epoch_ = best[1]
        self.best_val_auc_ = float(best[0]) if eval_set is not None else float("nan")
        self.training_log_ = log
        self._refresh_inference_table(arch)
        return self

    def _refresh_inference_table(self, arch):
        if arch.encoder == "graph":
            self.inference_table_ = graphenc.propagate(None, self.params_["embedding"], arch.graph_layers,
                                                       arch.readout, adjacency=arch.adjacency)
        else:
            self.inference_table_ = None

    def score_batch(self, X):
        """Interaction probabilities for the pairs in ``X``, order preserved."""
        check_is_fitted(self, "params_")
        users, items, ctx = check_pairs(X, self.n_users_, self.n_items_, self.n_context_)
        out = np.empty(len(users))
        for lo in range(0, len(users), _SCORE_CHUNK):
            sl = slice(lo, lo + _SCORE_CHUNK)
            n = len(users[sl])
            padded = -(-n // _SCORE_PAD) * _SCORE_PAD
            take = np.minimum(np.arange(padded), n - 1)
            z0 = encode_input(self.params_, users[sl][take], items[sl][take], ctx[sl][take], self.n_users_,
                              table=self.inference_table_)
            out[sl] = predict(self.params_, z0, self.cross_variant)[:n]
        return out

    def predict_proba(self, X):
        p = self.score_batch(X)
        return np.column_stack([1.0 - p, p])

    def predict(self, X):
        return (self.score_batch(X) >= 0.5).astype(np.int64)

    # -- persistence --------------------------------------------------------

    def save(self, path, metadata=None):
        """Write a versioned checkpoint: config echo, float64 tensors, metadata."""
        check_is_fitted(self, "params_")
        config = {k: (list(v) if isinstance(v, tuple) else v) for k, v in self.get_params().items()}
        config.update(n_users=self.n_users_, n_items=self.n_items_, n_context=self.n_context_)
        meta = {"best_epoch": self.best_epoch_, "best_val_auc": _json_float(self.best_val_auc_)}
        meta.update(metadata or {})
        tensors = dict(self.params_)
        if self.inference_table_ is not None:
            tensors["graph_embedding"] = self.inference_table_
        with open(path, "wb") as fh:
            w = BinaryWriter(fh, CHECKPOINT_MAGIC, CHECKPOINT_VERSION)
            w.json(config)
            w.json(meta)
            w.u32(len(tensors))
            for name in sorted(tensors):
                arr = np.asarray(tensors[name], dtype=np.float64)
                w.text(name)
                w.u32(arr.ndim)
                for s in arr.shape:
                    w.u64(s)
                w.array(arr, "<f8")

    @classmethod
    def load(cls, path):
        with open(path, "rb") as fh:
            r = BinaryReader(fh, CHECKPOINT_MAGIC, {CHECKPOINT_VERSION})
            config = r.json()
            meta = r.json()
            tensors = {}
            for _ in range(r.u32()):
                name = r.text()
                shape = tuple(r.u64() for _ in range(r.u32()))
                tensors[name] = r.array(int(np.prod(shape, dtype=np.int64)), "<f8").reshape(shape)
            r.expect_eof()
        n_users, n_items, n_context = config.pop("n_users"), config.pop("n_items"), config.pop("n_context")
        for key in ("deep_layers", "readout"):
            if config.get(key) is not None:
                config[key] = tuple(config[key])
        model = cls(**config)
        model.n_users_, model.n_items_, model.n_context_ = n_users, n_items, n_context
        model.classes_ = np.array([0, 1])
        model.inference_table_ = tensors.pop("graph_embedding", None)
        model.params_ = tensors
        model.best_epoch_ = meta.get("best_epoch")
        best = meta.get("best_val_auc")
        model.best_val_auc_ = float("nan") if best is None else best
        model.metadata_ = meta
        model.training_log_ = []
        return model


def fit_grid(estimator, grid, X, y, eval_set, **fit_params):
    """Fit one clone per point of ``grid`` and keep the best validation AUC.

    ``grid`` maps parameter names to candidate lists. Ties keep the earliest
    point in :class:`~sklearn.model_selection.ParameterGrid` order.

    Returns ``(best_model, best_params, results)`` where ``results`` lists
    ``(params, best_val_auc)`` for every point.
    """
    if eval_set is None:
        raise ValueError("grid selection needs an eval_set")
    best, best_params, results = None, None, []
    for point in ParameterGrid(grid):
        model = clone(estimator).set_params(**point).fit(X, y, eval_set=eval_set, **fit_params)
        results.append((point, model.best_val_auc_))
        if best is None or model.best_val_auc_ > best.best_val_auc_:
            best, best_params = model, point
    return best, best_params, results


def _json_float(x):
    return None if x is None or not np.isfinite(x) else float(x)


def score_batch(model, X):
    """Scoring contract used by the re-ranker: 1-D probabilities for ``X``."""
    if hasattr(model, "score_batch"):
        return np.asarray(model.score_batch(X), dtype=np.float64)
    return np.asarray(model.predict_proba(X), dtype=np.float64)[:, 1]


def write_training_log(path, log):
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("epoch,train_loss,val_auc,wall_seconds\n")
        for row in log:
            fh.write(f"{row['epoch']},{row['train_loss']!r},{row['val_auc']!r},{row['wall_seconds']:.6f}\n")
