"""Planted block-structured interaction data for tests and benchmarks."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from dconrec.augment import DataPool
from dconrec.data import InteractionSet


@dataclass(frozen=True)
class PlantedData:
    data: InteractionSet
    user_block: np.ndarray
    item_block: np.ndarray

    def in_block(self, users, items) -> np.ndarray:
        return self.user_block[np.asarray(users)] == self.item_block[np.asarray(items)]


def planted_blocks(
    n_users: int = 200,
    n_items: int = 100,
    n_interactions: int = 4000,
    n_blocks: int = 2,
    noise: float = 0.0,
    popularity: float = 1.0,
    locality: float = 0.0,
    seed: int = 0,
) -> PlantedData:
    """Users and items split into contiguous blocks; users mostly interact inside their block.

    Within a block, item ``k`` (by rank) is drawn with weight ``(k + 1) ** -popularity``.
    A fraction ``noise`` of each user's pairs goes to uniformly drawn
    out-of-block items. Degrees are Poisson around ``n_interactions / n_users``.

    With ``locality > 0`` users and the items of their block also sit on a
    ring, and an item's weight is further multiplied by
    ``exp(locality * cos(2 * pi * distance))``, giving each user a personal
    neighbourhood inside the block.
    """
    rng = np.random.default_rng(seed)
    user_block = np.arange(n_users) * n_blocks // n_users
    item_block = np.arange(n_items) * n_blocks // n_items
    mean_deg = n_interactions / n_users
    degrees = np.clip(rng.poisson(mean_deg, size=n_users), 3, None)
    block_weights = {}
    for b in range(n_blocks):
        size = int((item_block == b).sum())
        w = (np.arange(size) + 1.0) ** -popularity
        # popularity ranks are a random permutation of each block's items
        block_weights[b] = w[rng.permutation(size)]
    user_pos = rng.random(n_users)
    users, items = [], []
    for u in range(n_users):
        own = np.flatnonzero(item_block == user_block[u])
        other = np.flatnonzero(item_block != user_block[u])
        n_noise = rng.binomial(degrees[u], noise) if other.size else 0
        n_own = min(degrees[u] - n_noise, own.size)
        weights = block_weights[user_block[u]]
        if locality:
            item_pos = np.arange(own.size) / own.size
            weights = weights * np.exp(locality * np.cos(2 * np.pi * (item_pos - user_pos[u])))
        picked = rng.choice(own, size=n_own, replace=False, p=weights / weights.sum())
        picked_noise = rng.choice(other, size=min(n_noise, other.size), replace=False)
        users.append(np.full(n_own + picked_noise.size, u))
        items.append(np.concatenate([picked, picked_noise]))
    data = InteractionSet.from_pairs(np.concatenate(users), np.concatenate(items), n_users, n_items)
    return PlantedData(data, user_block, item_block)


def inject_adversarial(
    pool: DataPool,
    planted: PlantedData,
    fraction: float,
    seed: int = 0,
) -> tuple[DataPool, np.ndarray]:
    """Swap ``fraction`` of the pseudo pairs for wrong-block items the user never saw.

    Returns the new pool and a boolean array (pool order) marking adversarial pairs.
    """
    rng = np.random.default_rng(seed)
    originals = pool.originals()
    pseudo = pool.pseudo()
    n_bad = int(round(fraction * len(pseudo)))
    swap = np.zeros(len(pseudo), dtype=bool)
    swap[rng.choice(len(pseudo), size=n_bad, replace=False)] = True
    users, items = pseudo.users.copy(), pseudo.items.copy()
    taken = set(zip(users[~swap].tolist(), items[~swap].tolist()))
    for idx in np.flatnonzero(swap):
        u = users[idx]
        candidates = np.flatnonzero(planted.item_block != planted.user_block[u])
        candidates = candidates[~np.isin(candidates, originals.items_of(u))]
        candidates = np.array([i for i in candidates.tolist() if (u, i) not in taken], dtype=np.int64)
        if candidates.size == 0:
            continue
        items[idx] = rng.choice(candidates)
        taken.add((u, int(items[idx])))
    bad_pairs = InteractionSet.from_pairs(users[swap], items[swap], pool.pool.n_users, pool.pool.n_items)
    new_pseudo = InteractionSet.from_pairs(users, items, pool.pool.n_users, pool.pool.n_items)
    new_pool = DataPool.from_parts(originals, new_pseudo, pool.r_ps)
    adversarial = np.isin(new_pool.pool.keys, bad_pairs.keys) & new_pool.is_pseudo
    return new_pool, adversarial


# Settings of the planted benchmark used by the end-to-end checks. The
# estimator runs with warm-started inner models and a leave-one-out
# baseline over 8 draws; see README for why the plain defaults are too noisy
# at this scale.
BENCHMARK_TRAIN = dict(embedding_dim=16, learning_rate=0.01, max_epochs=200, early_stop_patience=20, batch_size=256)
BENCHMARK_CONDENSE = dict(
    warm_start=True,
    baseline_subtraction=True,
    baseline_kind="leave-one-out",
    mask_samples=8,
    inner_lr=10.0,
    outer_lr=100.0,
)


@dataclass(frozen=True)
class Benchmark:
    planted: PlantedData
    split: object
    pool: DataPool
    adversarial: np.ndarray
    train_config: object


def planted_benchmark(
    seed: int = 0,
    r_ps: float = 0.25,
    adversarial: float = 0.2,
    noise: float = 0.1,
    locality: float = 3.0,
) -> Benchmark:
    """Planted data, an 80/10/10 split, an MF proxy and a pool with adversarial pseudo pairs."""
    from dataclasses import replace

    from dconrec.augment import build_data_pool, train_proxy
    from dconrec.data import split_dataset
    from dconrec.model import TrainConfig

    config = TrainConfig(seed=seed, **BENCHMARK_TRAIN)
    planted = planted_blocks(noise=noise, locality=locality, seed=seed)
    split = split_dataset(planted.data, seed=seed)
    proxy = train_proxy(split.train, split.validation, config=replace(config))
    pool = build_data_pool(split.train, proxy, r_ps, seed=seed)
    pool, bad = inject_adversarial(pool, planted, adversarial, seed)
    return Benchmark(planted, split, pool, bad, config)
