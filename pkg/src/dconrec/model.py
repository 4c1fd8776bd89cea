"""Embedding recommenders (MF, LightGCN-style propagation) trained with BPR."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
import scipy.sparse as sp

from dconrec.data import InteractionSet

logger = logging.getLogger(__name__)

ARCHITECTURES = ("mf", "lightgcn")


class ConfigurationError(ValueError):
    pass


class DivergenceError(RuntimeError):
    pass


class NegativeSamplingError(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    embedding_dim: int = 64
    learning_rate: float = 0.01
    optimizer: str = "adam"
    adam_betas: tuple[float, float] = (0.9, 0.999)
    l2_reg: float = 1e-4
    batch_size: int = 1024
    max_epochs: int = 200
    early_stop_patience: int = 20
    negatives_per_positive: int = 1
    seed: int = 0
    architecture: str = "mf"
    n_layers: int = 2
    init_std: float = 0.1
    eval_k: int = 10

    def __post_init__(self):
        if self.embedding_dim <= 0:
            raise ConfigurationError("embedding_dim must be positive")
        if self.learning_rate <= 0:
            raise ConfigurationError("learning_rate must be positive")
        if self.optimizer not in ("sgd", "adam"):
            raise ConfigurationError(f"unknown optimizer {self.optimizer!r}")
        if self.l2_reg < 0:
            raise ConfigurationError("l2_reg must be nonnegative")
        if self.batch_size <= 0 or self.negatives_per_positive <= 0:
            raise ConfigurationError("batch_size and negatives_per_positive must be positive")
        if self.max_epochs < 0 or self.early_stop_patience <= 0:
            raise ConfigurationError("bad epoch settings")
        if self.early_stop_patience > self.max_epochs > 0:
            # a patience longer than the run simply never fires
            object.__setattr__(self, "early_stop_patience", self.max_epochs)
        if self.architecture not in ARCHITECTURES:
            raise ConfigurationError(f"unknown architecture {self.architecture!r}")
        if self.n_layers < 0:
            raise ConfigurationError("n_layers must be nonnegative")
        object.__setattr__(self, "adam_betas", tuple(float(b) for b in self.adam_betas))


def normalized_adjacency(train: InteractionSet) -> sp.csr_matrix:
    """Symmetric-normalized bipartite adjacency over users then items.

    Entry (u, n_users + i) is ``1 / sqrt(deg(u) * deg(i))`` for each pair.
    """
    n_u, n_i = train.n_users, train.n_items
    du = train.user_degrees().astype(float)
    di = train.item_degrees().astype(float)
    w = 1.0 / np.sqrt(du[train.users] * di[train.items])
    rows = np.concatenate([train.users, n_u + train.items])
    cols = np.concatenate([n_u + train.items, train.users])
    return sp.csr_matrix((np.concatenate([w, w]), (rows, cols)), shape=(n_u + n_i, n_u + n_i))


@dataclass
class EmbeddingModel:
    """User/item factor matrices, optionally smoothed over a graph at scoring time."""

    user_factors: np.ndarray
    item_factors: np.ndarray
    architecture: str = "mf"
    n_layers: int = 0
    adjacency: sp.csr_matrix | None = field(default=None, repr=False)
    # pairs the adjacency was built from, kept for checkpoints
    graph: InteractionSet | None = field(default=None, repr=False)

    @property
    def n_users(self) -> int:
        return self.user_factors.shape[0]

    @property
    def n_items(self) -> int:
        return self.item_factors.shape[0]

    @property
    def dim(self) -> int:
        return self.user_factors.shape[1]

    def copy(self) -> "EmbeddingModel":
        return replace(self, user_factors=self.user_factors.copy(), item_factors=self.item_factors.copy())

    def _propagate(self, stacked: np.ndarray) -> np.ndarray:
        out = stacked.copy()
        layer = stacked
        for _ in range(self.n_layers):
            layer = self.adjacency @ layer
            out += layer
        return out / (self.n_layers + 1)

    def embeddings(self) -> tuple[np.ndarray, np.ndarray]:
        """Final user and item representations used for scoring."""
        if self.architecture == "mf" or self.n_layers == 0:
            return self.user_factors, self.item_factors
        out = self._propagate(np.vstack([self.user_factors, self.item_factors]))
        return out[: self.n_users], out[self.n_users :]

    def backpropagate(self, grad_users: np.ndarray, grad_items: np.ndarray):
        """Map gradients w.r.t. final embeddings back to the factor matrices."""
        if self.architecture == "mf" or self.n_layers == 0:
            return grad_users, grad_items
        # propagation is linear and the normalized adjacency is symmetric
        out = self._propagate(np.vstack([grad_users, grad_items]))
        return out[: self.n_users], out[self.n_users :]

    def scores(self, users) -> np.ndarray:
        """Score matrix of shape (len(users), n_items)."""
        user_emb, item_emb = self.embeddings()
        return user_emb[np.asarray(users)] @ item_emb.T


def init_model(
    n_users: int,
    n_items: int,
    config: TrainConfig,
    train_for_adjacency: InteractionSet | None = None,
    rng: np.random.Generator | None = None,
) -> EmbeddingModel:
    """Factors drawn i.i.d. from N(0, init_std**2), seeded by ``config.seed`` unless ``rng`` is given."""
    if n_users <= 0 or n_items <= 0:
        raise ConfigurationError("model needs at least one user and one item")
    if rng is None:
        rng = np.random.default_rng(config.seed)
    d = config.embedding_dim
    user_factors = rng.normal(0.0, config.init_std, size=(n_users, d))
    item_factors = rng.normal(0.0, config.init_std, size=(n_items, d))
    if config.architecture == "mf":
        return EmbeddingModel(user_factors, item_factors, "mf", 0)
    if train_for_adjacency is None:
        raise ConfigurationError("lightgcn needs a training set to build its adjacency")
    return EmbeddingModel(
        user_factors,
        item_factors,
        "lightgcn",
        config.n_layers,
        normalized_adjacency(train_for_adjacency),
        train_for_adjacency,
    )


def reinit_factors(model: EmbeddingModel, rng: np.random.Generator, std: float = 0.1) -> EmbeddingModel:
    """Fresh factors with the same architecture and graph."""
    return replace(
        model,
        user_factors=rng.normal(0.0, std, size=model.user_factors.shape),
        item_factors=rng.normal(0.0, std, size=model.item_factors.shape),
    )


def score(model: EmbeddingModel, u: int, i: int) -> float:
    if not (0 <= u < model.n_users and 0 <= i < model.n_items):
        raise IndexError(f"pair ({u}, {i}) out of range")
    user_emb, item_emb = model.embeddings()
    return float(user_emb[u] @ item_emb[i])


def _as_triples(triples) -> np.ndarray:
    arr = np.asarray(triples, dtype=np.int64).reshape(-1, 3)
    if arr.shape[0] == 0:
        raise ValueError("need at least one (user, positive, negative) triple")
    return arr


def bpr_loss(model: EmbeddingModel, triples, l2_reg: float = 0.0) -> float:
    """Mean -ln sigmoid(score(u, pos) - score(u, neg)) plus an L2 penalty.

    The penalty is ``l2_reg`` times the mean over triples of the summed
    squared norms of the three involved (unpropagated) factor rows.
    """
    t = _as_triples(triples)
    user_emb, item_emb = model.embeddings()
    u, i, j = t[:, 0], t[:, 1], t[:, 2]
    gap = np.einsum("nd,nd->n", user_emb[u], item_emb[i] - item_emb[j])
    loss = np.logaddexp(0.0, -gap).mean()
    if l2_reg:
        uf, itf = model.user_factors, model.item_factors
        sq = (uf[u] ** 2).sum(1) + (itf[i] ** 2).sum(1) + (itf[j] ** 2).sum(1)
        loss += l2_reg * sq.mean()
    return float(loss)


def bpr_gradients(model: EmbeddingModel, triples, l2_reg: float = 0.0, weights=None):
    """Loss and gradients of :func:`bpr_loss` w.r.t. the factor matrices.

    With ``weights`` the per-triple terms are weighted by ``weights`` instead
    of averaged (the loss becomes ``sum(w * term)``).
    Returns ``(loss, grad_user_factors, grad_item_factors)``.
    """
    t = _as_triples(triples)
    n = t.shape[0]
    w = np.full(n, 1.0 / n) if weights is None else np.asarray(weights, dtype=float)
    user_emb, item_emb = model.embeddings()
    u, i, j = t[:, 0], t[:, 1], t[:, 2]
    eu, diff = user_emb[u], item_emb[i] - item_emb[j]
    gap = np.einsum("nd,nd->n", eu, diff)
    loss = float(w @ np.logaddexp(0.0, -gap))
    # d/dgap of -ln sigmoid(gap) = -sigmoid(-gap)
    coef = -w * np.exp(-np.logaddexp(0.0, gap))
    g_user = np.zeros_like(user_emb)
    g_item = np.zeros_like(item_emb)
    np.add.at(g_user, u, coef[:, None] * diff)
    np.add.at(g_item, i, coef[:, None] * eu)
    np.add.at(g_item, j, -coef[:, None] * eu)
    g_user, g_item = model.backpropagate(g_user, g_item)
    if l2_reg:
        uf, itf = model.user_factors, model.item_factors
        loss += float(l2_reg * (w @ ((uf[u] ** 2).sum(1) + (itf[i] ** 2).sum(1) + (itf[j] ** 2).sum(1))))
        rw = 2.0 * l2_reg * w[:, None]
        np.add.at(g_user, u, rw * uf[u])
        np.add.at(g_item, i, rw * itf[i])
        np.add.at(g_item, j, rw * itf[j])
    return loss, g_user, g_item


def gradient_step(model: EmbeddingModel, batch, learning_rate: float, l2_reg: float = 0.0) -> EmbeddingModel:
    """One full-batch gradient-descent step on :func:`bpr_loss`; returns a new model."""
    _, g_user, g_item = bpr_gradients(model, batch, l2_reg)
    if not (np.isfinite(g_user).all() and np.isfinite(g_item).all()):
        raise DivergenceError("nonfinite BPR gradient")
    out = model.copy()
    if learning_rate:
        out.user_factors -= learning_rate * g_user
        out.item_factors -= learning_rate * g_item
    return out


def sample_negatives(
    exclusion: InteractionSet, u: int, k: int, rng: np.random.Generator
) -> np.ndarray:
    """``k`` items drawn uniformly (with replacement) among those ``u`` never interacted with."""
    seen = exclusion.items_of(u)
    if seen.size >= exclusion.n_items:
        raise NegativeSamplingError(f"user {u} has interacted with every item")
    out = np.empty(k, dtype=np.int64)
    filled = 0
    while filled < k:
        draw = rng.integers(0, exclusion.n_items, size=k - filled)
        draw = draw[~np.isin(draw, seen)]
        out[filled : filled + draw.size] = draw
        filled += draw.size
    return out


def sample_negatives_for(exclusion: InteractionSet, users, rng: np.random.Generator) -> np.ndarray:
    """One rejection-sampled negative per entry of ``users`` (vectorized)."""
    users = np.asarray(users, dtype=np.int64)
    if users.size and (exclusion.user_degrees()[users] >= exclusion.n_items).any():
        raise NegativeSamplingError("a user has interacted with every item")
    neg = rng.integers(0, exclusion.n_items, size=users.size)
    bad = exclusion.contains_many(users, neg)
    while bad.any():
        idx = np.flatnonzero(bad)
        neg[idx] = rng.integers(0, exclusion.n_items, size=idx.size)
        bad[idx] = exclusion.contains_many(users[idx], neg[idx])
    return neg


def make_triples(
    positives: InteractionSet, exclusion: InteractionSet, rng: np.random.Generator, per_positive: int = 1
) -> np.ndarray:
    users = np.repeat(positives.users, per_positive)
    items = np.repeat(positives.items, per_positive)
    return np.stack([users, items, sample_negatives_for(exclusion, users, rng)], axis=1)


class _Adam:
    def __init__(self, shapes, lr, betas):
        self.lr, (self.b1, self.b2) = lr, betas
        self.m = [np.zeros(s) for s in shapes]
        self.v = [np.zeros(s) for s in shapes]
        self.t = 0

    def step(self, params, grads):
        self.t += 1
        c1 = 1 - self.b1**self.t
        c2 = 1 - self.b2**self.t
        for p, g, m, v in zip(params, grads, self.m, self.v):
            m *= self.b1
            m += (1 - self.b1) * g
            v *= self.b2
            v += (1 - self.b2) * g * g
            p -= self.lr * (m / c1) / (np.sqrt(v / c2) + 1e-8)


def train(
    model: EmbeddingModel,
    train: InteractionSet,
    val: InteractionSet | None,
    config: TrainConfig,
) -> EmbeddingModel:
    """Minibatch BPR training with early stopping on validation Recall@``eval_k``.

    Returns a new model holding the parameters of the best validation epoch
    (the last epoch when ``val`` is empty).
    """
    from dconrec.metrics import recall_at_k

    if len(train) == 0:
        raise ValueError("cannot train on an empty interaction set")
    model = model.copy()
    best = model.copy()
    if config.max_epochs == 0:
        return best
    rng = np.random.default_rng([config.seed, 1])
    params = [model.user_factors, model.item_factors]
    adam = _Adam([p.shape for p in params], config.learning_rate, config.adam_betas)
    use_val = val is not None and len(val) > 0
    best_recall, stale = -1.0, 0
    for epoch in range(config.max_epochs):
        triples = make_triples(train, train, rng, config.negatives_per_positive)
        triples = triples[rng.permutation(len(triples))]
        for start in range(0, len(triples), config.batch_size):
            batch = triples[start : start + config.batch_size]
            loss, g_user, g_item = bpr_gradients(model, batch, config.l2_reg)
            if not np.isfinite(loss):
                raise DivergenceError(f"nonfinite training loss at epoch {epoch}")
            if config.optimizer == "adam":
                adam.step(params, [g_user, g_item])
            else:
                model.user_factors -= config.learning_rate * g_user
                model.item_factors -= config.learning_rate * g_item
        if not use_val:
            continue
        recall = recall_at_k(model, train, val, config.eval_k)
        if recall > best_recall:
            best_recall, stale, best = recall, 0, model.copy()
        else:
            stale += 1
            if stale >= config.early_stop_patience:
                logger.debug("early stop at epoch %d (best recall %.4f)", epoch, best_recall)
                break
    return best if use_val else model.copy()


def save_model(model: EmbeddingModel, path) -> None:
    """Write an ``.npz`` checkpoint; float64 arrays round-trip bit-exactly.

    Keys: ``header`` = [n_users, n_items, d, n_layers], ``architecture``,
    ``user_factors``, ``item_factors`` and, for lightgcn, ``graph_pairs``.
    """
    arrays = {
        "header": np.array([model.n_users, model.n_items, model.dim, model.n_layers], dtype=np.int64),
        "architecture": np.array(model.architecture),
        "user_factors": model.user_factors,
        "item_factors": model.item_factors,
    }
    if model.graph is not None:
        arrays["graph_pairs"] = model.graph.pairs()
    with Path(path).open("wb") as fh:
        np.savez(fh, **arrays)


def load_model(path) -> EmbeddingModel:
    with np.load(path) as z:
        n_users, n_items, _, n_layers = (int(x) for x in z["header"])
        arch = str(z["architecture"])
        model = EmbeddingModel(z["user_factors"].copy(), z["item_factors"].copy(), arch, n_layers)
        if arch == "lightgcn":
            pairs = z["graph_pairs"]
            graph = InteractionSet.from_pairs(pairs[:, 0], pairs[:, 1], n_users, n_items)
            model.graph, model.adjacency = graph, normalized_adjacency(graph)
    return model
