"""Selection and condensation baselines: Random, Majority, SVP-CF and one-step gradient matching."""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, replace

import numpy as np

from dconrec.augment import DataPool
from dconrec.condense import (
    ConvergenceMonitor,
    finalize_dataset,
    init_probabilities,
    CondenseConfig,
)
from dconrec.data import InteractionSet
from dconrec.model import (
    ConfigurationError,
    DivergenceError,
    EmbeddingModel,
    TrainConfig,
    bpr_gradients,
    init_model,
    reinit_factors,
    sample_negatives_for,
    train as train_model,
)
from dconrec.projection import project_feasible

METHODS = ("random", "majority", "svp_cf", "gradmatch")
DISTANCES = ("cosine-per-matrix", "euclidean")


@dataclass(frozen=True)
class BaselineConfig:
    method: str = "random"
    ratio_r: float = 0.25
    seed: int = 0
    svp_direction: str = "hardest"
    gm_distance: str = "cosine-per-matrix"
    gm_outer_epochs: int = 400
    gm_lr: float = 0.1
    gm_batch_size: int = 4096
    gm_use_pool: bool = False
    finalize_mode: str = "topk"

    def __post_init__(self):
        if self.method not in METHODS:
            raise ConfigurationError(f"unknown baseline {self.method!r}")
        if not 0 < self.ratio_r <= 1:
            raise ConfigurationError("ratio_r must lie in (0, 1]")
        if self.svp_direction not in ("hardest", "easiest"):
            raise ConfigurationError(f"unknown SVP direction {self.svp_direction!r}")
        if self.gm_distance not in DISTANCES:
            raise ConfigurationError(f"unknown distance {self.gm_distance!r}")


def _budget(train: InteractionSet, r: float) -> int:
    if not 0 < r <= 1:
        raise ValueError("ratio must lie in (0, 1]")
    return int(math.floor(r * len(train) + 1e-9))


def random_select(train: InteractionSet, r: float, seed: int = 0) -> InteractionSet:
    """Uniform sample without replacement of floor(r |D|) pairs."""
    if r == 1:
        return train
    rng = np.random.default_rng(seed)
    idx = rng.choice(len(train), size=_budget(train, r), replace=False)
    return train.subset(np.sort(idx))


def majority_select(train: InteractionSet, r: float) -> InteractionSet:
    """Fill the budget with whole users in ascending degree order.

    The user at the boundary contributes its lowest item ids.
    """
    if r == 1:
        return train
    budget = _budget(train, r)
    deg = train.user_degrees()
    order = np.argsort(deg, kind="stable")
    picked = []
    left = budget
    for u in order:
        if left <= 0:
            break
        lo = train.indptr[u]
        take = min(int(deg[u]), left)
        picked.append(np.arange(lo, lo + take))
        left -= take
    idx = np.concatenate(picked) if picked else np.zeros(0, dtype=np.int64)
    return train.subset(np.sort(idx))


def pair_losses(model, train: InteractionSet, negatives: np.ndarray) -> np.ndarray:
    """Per-pair BPR loss -ln sigmoid(score(u, i) - score(u, neg))."""
    user_emb, item_emb = model.embeddings()
    gap = np.einsum("nd,nd->n", user_emb[train.users], item_emb[train.items] - item_emb[negatives])
    return np.logaddexp(0.0, -gap)


def select_by_loss(train: InteractionSet, losses: np.ndarray, r: float, direction: str = "hardest") -> InteractionSet:
    """Keep floor(r |D|) pairs with the highest (hardest) or lowest (easiest) loss."""
    if r == 1:
        return train
    key = -losses if direction == "hardest" else losses
    keep = np.argsort(key, kind="stable")[: _budget(train, r)]
    return train.subset(np.sort(keep))


def svp_cf_select(
    train: InteractionSet,
    val: InteractionSet | None,
    r: float,
    proxy_config: TrainConfig | None = None,
    direction: str = "hardest",
    proxy: EmbeddingModel | None = None,
) -> InteractionSet:
    """Rank pairs by an MF proxy's BPR loss against one fixed negative each."""
    if r == 1:
        return train
    config = replace(proxy_config or TrainConfig(), architecture="mf")
    if proxy is None:
        proxy = train_model(init_model(train.n_users, train.n_items, config), train, val, config)
    negatives = sample_negatives_for(train, train.users, np.random.default_rng([config.seed, 3]))
    return select_by_loss(train, pair_losses(proxy, train, negatives), r, direction)


def matching_distance(syn, real, kind: str = "cosine-per-matrix") -> float:
    """Distance between two (user-gradient, item-gradient) pairs.

    ``cosine-per-matrix`` sums ``1 - cos`` over the two matrices; an all-zero
    matrix counts as orthogonal. ``euclidean`` is the squared Frobenius gap.
    """
    total = 0.0
    for a, b in zip(syn, real):
        if kind == "euclidean":
            total += float(((a - b) ** 2).sum())
        else:
            na, nb = np.linalg.norm(a), np.linalg.norm(b)
            total += 1.0 - (float((a * b).sum()) / (na * nb) if na and nb else 0.0)
    return total


def _distance_grad(syn, real, kind):
    """d distance / d syn for each matrix."""
    out = []
    for a, b in zip(syn, real):
        if kind == "euclidean":
            out.append(2.0 * (a - b))
            continue
        na, nb = np.linalg.norm(a), np.linalg.norm(b)
        if not (na and nb):
            out.append(np.zeros_like(a))
            continue
        cos = float((a * b).sum()) / (na * nb)
        out.append(-(b / (na * nb) - cos * a / na**2))
    return out


def _pair_terms(model: EmbeddingModel, triples: np.ndarray):
    """Per-pair pieces of the BPR gradient w.r.t. final embeddings."""
    user_emb, item_emb = model.embeddings()
    u, i, j = triples[:, 0], triples[:, 1], triples[:, 2]
    eu, diff = user_emb[u], item_emb[i] - item_emb[j]
    gap = np.einsum("nd,nd->n", eu, diff)
    coef = -np.exp(-np.logaddexp(0.0, gap))
    return coef, eu, diff


def matching_objective(
    probs: np.ndarray,
    model0: EmbeddingModel,
    pool_triples: np.ndarray,
    real_triples: np.ndarray,
    budget: float,
    kind: str = "cosine-per-matrix",
) -> tuple[float, np.ndarray]:
    """Matching distance and its gradient in the probabilities.

    The synthetic gradient is the probability-weighted BPR gradient over the
    pool pairs normalized by the budget, so its derivative in each probability
    is the inner product of the distance gradient with that pair's gradient.
    """
    _, gu_real, gi_real = bpr_gradients(model0, real_triples)
    _, gu_syn, gi_syn = bpr_gradients(model0, pool_triples, weights=probs / budget)
    dist = matching_distance((gu_syn, gi_syn), (gu_real, gi_real), kind)
    if not np.isfinite(dist):
        raise DivergenceError("nonfinite matching distance")
    a_user, a_item = _distance_grad((gu_syn, gi_syn), (gu_real, gi_real), kind)
    # factor gradients are P^T applied to embedding gradients; move A the same way
    a_user, a_item = model0.backpropagate(a_user, a_item)
    coef, eu, diff = _pair_terms(model0, pool_triples)
    u, i, j = pool_triples[:, 0], pool_triples[:, 1], pool_triples[:, 2]
    per_pair = coef * (
        np.einsum("nd,nd->n", a_user[u], diff) + np.einsum("nd,nd->n", a_item[i] - a_item[j], eu)
    )
    return dist, per_pair / budget


def gradmatch_step(
    probs: np.ndarray,
    model0: EmbeddingModel,
    pool_triples: np.ndarray,
    real_triples: np.ndarray,
    budget: float,
    lr: float,
    kind: str = "cosine-per-matrix",
) -> tuple[np.ndarray, float]:
    """One projected descent step on the matching distance; returns (probs, distance)."""
    dist, grad = matching_objective(probs, model0, pool_triples, real_triples, budget, kind)
    return project_feasible(probs - lr * grad, budget), dist


def gradmatch_condense(
    pool: DataPool,
    train: InteractionSet,
    r: float,
    backbone_config: TrainConfig,
    config: BaselineConfig,
    return_mask: bool = False,
):
    """One-step gradient matching over the same mask parameterization as LPGE.

    Condenses from ``train`` alone unless ``config.gm_use_pool``.
    Returns the finalized set, or ``(set, mask, monitor)`` with ``return_mask``.
    """
    if not 0 < r <= 1:
        raise ValueError("ratio must lie in (0, 1]")
    source = pool if config.gm_use_pool else DataPool.from_parts(train)
    rng = np.random.default_rng([config.seed, 4])
    mask = init_probabilities(source, CondenseConfig(ratio_r=r))
    graph = source.pool if backbone_config.architecture == "lightgcn" else None
    model = init_model(train.n_users, train.n_items, backbone_config, graph, rng=rng)
    monitor = ConvergenceMonitor()
    pool_pairs = source.pool
    for t in range(config.gm_outer_epochs):
        tick = time.perf_counter()
        if t > 0:
            model = reinit_factors(model, rng, backbone_config.init_std)
        monitor.inner_seconds += time.perf_counter() - tick
        tick = time.perf_counter()
        negs = sample_negatives_for(pool_pairs, pool_pairs.users, rng)
        pool_triples = np.stack([pool_pairs.users, pool_pairs.items, negs], axis=1)
        if config.gm_batch_size >= len(train):
            idx = np.arange(len(train))
        else:
            idx = rng.choice(len(train), size=config.gm_batch_size, replace=False)
        real = np.stack(
            [train.users[idx], train.items[idx], sample_negatives_for(train, train.users[idx], rng)], axis=1
        )
        new_probs, dist = gradmatch_step(
            mask.probs, model, pool_triples, real, mask.budget, config.gm_lr, config.gm_distance
        )
        g_sq = float(np.sum(((mask.probs - new_probs) / config.gm_lr) ** 2)) if config.gm_lr else 0.0
        mask = mask.with_probs(new_probs)
        monitor.record(dist, g_sq, new_probs.sum(), config.gm_lr)
        monitor.op_seconds += time.perf_counter() - tick
    out = finalize_dataset(mask, config.finalize_mode, np.random.default_rng([config.seed, 5]))
    return (out, mask, monitor) if return_mask else out


def run_baseline(
    method: str,
    train: InteractionSet,
    val: InteractionSet | None,
    pool: DataPool | None,
    backbone_config: TrainConfig,
    config: BaselineConfig,
    proxy: EmbeddingModel | None = None,
) -> InteractionSet:
    """Dispatch by method name; all methods return a subset-sized interaction set."""
    r = config.ratio_r
    if method == "random":
        return random_select(train, r, config.seed)
    if method == "majority":
        return majority_select(train, r)
    if method == "svp_cf":
        return svp_cf_select(train, val, r, replace(backbone_config, seed=config.seed), config.svp_direction, proxy)
    if method == "gradmatch":
        return gradmatch_condense(pool or DataPool.from_parts(train), train, r, backbone_config, config)
    raise ConfigurationError(f"unknown baseline {method!r}")
