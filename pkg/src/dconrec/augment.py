"""Pre-augmentation: mine unexposed top-K items with a proxy model and build the data pool."""

from __future__ import annotations

from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from dconrec.data import InteractionSet
from dconrec.model import EmbeddingModel, TrainConfig, init_model, train as train_model


@dataclass(frozen=True)
class PseudoDataset:
    pairs: InteractionSet
    per_user_k: int
    provenance: str = ""


@dataclass(frozen=True)
class DataPool:
    """Original training pairs plus pseudo pairs.

    ``is_pseudo`` runs parallel to ``pool.users``/``pool.items``.
    """

    pool: InteractionSet
    is_pseudo: np.ndarray
    r_ps: float = 0.0

    def __len__(self) -> int:
        return len(self.pool)

    @property
    def n_original(self) -> int:
        return int((~self.is_pseudo).sum())

    @property
    def n_pseudo(self) -> int:
        return int(self.is_pseudo.sum())

    def originals(self) -> InteractionSet:
        return self.pool.subset(~self.is_pseudo)

    def pseudo(self) -> InteractionSet:
        return self.pool.subset(self.is_pseudo)

    @classmethod
    def from_parts(cls, train: InteractionSet, pseudo: InteractionSet | None = None, r_ps: float = 0.0):
        if pseudo is None or len(pseudo) == 0:
            return cls(train, np.zeros(len(train), dtype=bool), r_ps)
        if train.contains_many(pseudo.users, pseudo.items).any():
            raise ValueError("pseudo pairs overlap the training set")
        pool = train.union(pseudo)
        return cls(pool, np.isin(pool.keys, pseudo.keys), r_ps)


def train_proxy(
    train: InteractionSet,
    val: InteractionSet | None,
    architecture: str = "mf",
    config: TrainConfig | None = None,
) -> EmbeddingModel:
    config = replace(config or TrainConfig(), architecture=architecture)
    model = init_model(train.n_users, train.n_items, config, train if architecture == "lightgcn" else None)
    return train_model(model, train, val, config)


def _ranked_unexposed(scores: np.ndarray, seen: np.ndarray) -> np.ndarray:
    scores = np.asarray(scores, dtype=float).copy()
    scores[seen] = -np.inf
    order = np.argsort(-scores, kind="stable")
    return order[: scores.size - np.unique(seen).size]


def topk_unexposed(proxy, train: InteractionSet, u: int, k: int) -> list[int]:
    """The ``k`` best-scored items ``u`` has not interacted with; ties go to the lower id."""
    if k < 0:
        raise ValueError("k must be nonnegative")
    if not 0 <= u < train.n_users:
        raise IndexError(f"user {u} out of range")
    if k == 0:
        return []
    ranked = _ranked_unexposed(proxy.scores([u])[0], train.items_of(u))
    return ranked[:k].tolist()


def mine_pseudo(
    proxy,
    train: InteractionSet,
    r_ps: float = 0.0,
    fixed_k: int | None = None,
    chunk: int = 1024,
) -> PseudoDataset:
    """Per-user pseudo items: ``round(r_ps * degree)`` each, or ``fixed_k`` for every user."""
    if r_ps < 0:
        raise ValueError("r_ps must be nonnegative")
    deg = train.user_degrees()
    if fixed_k is not None:
        budget = np.where(deg > 0, fixed_k, 0)
    else:
        budget = np.floor(r_ps * deg + 0.5).astype(np.int64)
    users_out, items_out = [], []
    active = np.flatnonzero(budget > 0)
    for start in range(0, active.size, chunk):
        block = active[start : start + chunk]
        scores = proxy.scores(block)
        for row, u in enumerate(block):
            top = _ranked_unexposed(scores[row], train.items_of(u))[: budget[u]]
            users_out.append(np.full(top.size, u))
            items_out.append(top)
    if users_out:
        users, items = np.concatenate(users_out), np.concatenate(items_out)
    else:
        users = items = np.zeros(0, dtype=np.int64)
    pairs = InteractionSet.from_pairs(users, items, train.n_users, train.n_items)
    arch = getattr(proxy, "architecture", "custom")
    return PseudoDataset(pairs, int(budget.max()) if budget.size else 0, f"proxy={arch}")


def build_data_pool(
    train: InteractionSet,
    proxy,
    r_ps: float,
    seed: int = 0,
    fixed_k: int | None = None,
) -> DataPool:
    """D ∪ D_ps with per-user pseudo budgets proportional to training degree.

    Mining is deterministic given the proxy; ``seed`` is recorded only.
    """
    pseudo = mine_pseudo(proxy, train, r_ps, fixed_k)
    return DataPool.from_parts(train, pseudo.pairs, r_ps)


def save_pool(pool: DataPool, path) -> None:
    """``user<TAB>item<TAB>{orig|pseudo}`` rows."""
    with Path(path).open("w") as fh:
        for u, i, p in zip(pool.pool.users.tolist(), pool.pool.items.tolist(), pool.is_pseudo.tolist()):
            fh.write(f"{u}\t{i}\t{'pseudo' if p else 'orig'}\n")


def load_pool(path, n_users: int, n_items: int, r_ps: float = 0.0) -> DataPool:
    users, items, flags = [], [], []
    with Path(path).open() as fh:
        for line in fh:
            if not line.strip() or line.startswith("#"):
                continue
            u, i, tag = line.split("\t")[:3]
            users.append(int(u))
            items.append(int(i))
            flags.append(tag.strip() == "pseudo")
    flags = np.asarray(flags, dtype=bool)
    users, items = np.asarray(users, dtype=np.int64), np.asarray(items, dtype=np.int64)
    train = InteractionSet.from_pairs(users[~flags], items[~flags], n_users, n_items)
    pseudo = InteractionSet.from_pairs(users[flags], items[flags], n_users, n_items)
    return DataPool.from_parts(train, pseudo, r_ps)
