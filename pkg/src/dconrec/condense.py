"""Condensation by lightweight policy-gradient estimation over a Bernoulli selection mask.

Each data pair of the pool carries a selection probability. An outer
iteration samples a binary mask, takes one gradient step of a recommender
on the selected pairs, measures the stepped model's BPR loss on the
original training data, and moves the probabilities along
``loss * grad log p(mask | probs)`` before projecting back onto the
feasible set ``{0 <= s <= 1, sum(s) <= r |D|}``.
"""

from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from dconrec.augment import DataPool
from dconrec.data import InteractionSet
from dconrec.model import (
    ConfigurationError,
    DivergenceError,
    EmbeddingModel,
    TrainConfig,
    bpr_loss,
    gradient_step,
    init_model,
    reinit_factors,
    sample_negatives_for,
)
from dconrec.projection import project_feasible

logger = logging.getLogger(__name__)

INIT_SCHEMES = ("uniform-budget", "origin-weighted")
# running-mean: average of past outer losses; leave-one-out: mean loss of the
# other draws of the same iteration (needs mask_samples >= 2)
BASELINE_KINDS = ("running-mean", "leave-one-out")


class EmptySelectionError(ValueError):
    pass


@dataclass(frozen=True)
class CondenseConfig:
    ratio_r: float = 0.25
    outer_epochs: int = 400
    outer_lr: float = 0.1
    lr_decay_factor: float = 10.0
    lr_decay_every: int = 100
    lr_floor: float = 1e-4
    inner_lr: float = 1.0
    val_batch_size: int = 4096
    prob_clamp: float = 1e-4
    init_scheme: str = "uniform-budget"
    baseline_subtraction: bool = False
    baseline_kind: str = "running-mean"
    warm_start: bool = False
    mask_samples: int = 1
    seed: int = 0

    def __post_init__(self):
        if not 0 < self.ratio_r <= 1:
            raise ConfigurationError("ratio_r must lie in (0, 1]")
        if not 0 < self.prob_clamp < 0.5:
            raise ConfigurationError("prob_clamp must lie in (0, 0.5)")
        if self.outer_lr < 0 or self.lr_floor > self.outer_lr > 0:
            raise ConfigurationError("need 0 <= lr_floor <= outer_lr")
        if self.inner_lr < 0 or self.val_batch_size <= 0 or self.mask_samples <= 0:
            raise ConfigurationError("bad inner/outer batch settings")
        if self.baseline_kind not in BASELINE_KINDS:
            raise ConfigurationError(f"unknown baseline {self.baseline_kind!r}")
        if self.baseline_subtraction and self.baseline_kind == "leave-one-out" and self.mask_samples < 2:
            raise ConfigurationError("leave-one-out baseline needs mask_samples >= 2")
        if self.init_scheme not in INIT_SCHEMES:
            raise ConfigurationError(f"unknown init scheme {self.init_scheme!r}")


@dataclass
class ProbabilityMask:
    """Selection probabilities over the pool pairs, in pool order."""

    users: np.ndarray
    items: np.ndarray
    probs: np.ndarray
    budget: float
    n_users: int
    n_items: int

    def __len__(self) -> int:
        return self.probs.size

    def with_probs(self, probs: np.ndarray) -> "ProbabilityMask":
        return replace(self, probs=probs)

    def is_feasible(self, slack: float = 1e-9) -> bool:
        p = self.probs
        return bool((p >= 0).all() and (p <= 1).all() and p.sum() <= self.budget + slack)


@dataclass
class SampledMask:
    """Binary draw from a :class:`ProbabilityMask`, sharing its support."""

    users: np.ndarray
    items: np.ndarray
    bits: np.ndarray
    budget: float

    @property
    def count(self) -> int:
        return int(self.bits.sum())


@dataclass
class ConvergenceMonitor:
    """Per-iteration (outer loss, ||G_hat||^2, sum of probabilities, step size) records."""

    outer_loss: list = field(default_factory=list)
    grad_mapping_sq: list = field(default_factory=list)
    sum_s: list = field(default_factory=list)
    eta: list = field(default_factory=list)
    # wall-clock split: data updates vs. inner model work
    op_seconds: float = 0.0
    inner_seconds: float = 0.0

    def __len__(self) -> int:
        return len(self.outer_loss)

    def record(self, loss: float, grad_sq: float, sum_s: float, eta: float) -> None:
        self.outer_loss.append(float(loss))
        self.grad_mapping_sq.append(float(grad_sq))
        self.sum_s.append(float(sum_s))
        self.eta.append(float(eta))

    def running_average(self) -> np.ndarray:
        g = np.asarray(self.grad_mapping_sq)
        return np.cumsum(g) / np.arange(1, g.size + 1)

    def half_means(self) -> tuple[float, float]:
        """Mean ||G_hat||^2 over the first and the second half of the records."""
        g = np.asarray(self.grad_mapping_sq)
        half = g.size // 2
        return float(g[:half].mean()), float(g[half:].mean())

    def write_csv(self, path) -> None:
        with Path(path).open("w") as fh:
            fh.write("iter,outer_loss,grad_mapping_sq,sum_s,eta\n")
            for t, row in enumerate(zip(self.outer_loss, self.grad_mapping_sq, self.sum_s, self.eta)):
                fh.write(f"{t}," + ",".join(f"{x:.17g}" for x in row) + "\n")


def learning_rate_at(config: CondenseConfig, t: int) -> float:
    """Step size decayed by ``lr_decay_factor`` every ``lr_decay_every`` iterations, floored."""
    decayed = config.outer_lr / config.lr_decay_factor ** (t // config.lr_decay_every)
    return max(config.lr_floor, decayed) if config.outer_lr > 0 else 0.0


def init_probabilities(pool: DataPool, config: CondenseConfig, n_original: int | None = None) -> ProbabilityMask:
    """Initial probabilities with budget ``ratio_r * |D|``.

    ``|D|`` is the pool's original pair count unless ``n_original`` is given.
    """
    budget = config.ratio_r * (pool.n_original if n_original is None else n_original)
    n = len(pool)
    if budget > n:
        raise ConfigurationError(f"budget {budget:g} exceeds pool size {n}")
    if config.init_scheme == "uniform-budget":
        probs = np.full(n, budget / n)
    else:
        weights = np.where(pool.is_pseudo, 1.0, 2.0)
        probs = weights * budget / weights.sum()
    eps = config.prob_clamp
    probs = np.clip(probs, eps, 1 - eps)
    if probs.sum() > budget:
        probs = project_feasible(probs, budget)
    p = pool.pool
    return ProbabilityMask(p.users, p.items, probs, float(budget), p.n_users, p.n_items)


def sample_mask(mask: ProbabilityMask, rng: np.random.Generator) -> SampledMask:
    bits = rng.random(mask.probs.size) < mask.probs
    return SampledMask(mask.users, mask.items, bits, mask.budget)


def _selected_triples(mask: SampledMask, pool: DataPool, rng, negatives=None) -> np.ndarray:
    idx = np.flatnonzero(mask.bits)
    if idx.size == 0:
        raise EmptySelectionError("sampled mask selects no pairs")
    users, items = mask.users[idx], mask.items[idx]
    negs = sample_negatives_for(pool.pool, users, rng) if negatives is None else negatives[idx]
    return np.stack([users, items, negs], axis=1)


def masked_inner_loss(model: EmbeddingModel, mask: SampledMask, pool: DataPool, rng: np.random.Generator) -> float:
    """BPR loss summed over selected pairs and divided by the budget (not the selected count)."""
    triples = _selected_triples(mask, pool, rng)
    return bpr_loss(model, triples) * len(triples) / mask.budget


def inner_one_step(
    model0: EmbeddingModel,
    mask: SampledMask,
    pool: DataPool,
    inner_lr: float,
    rng: np.random.Generator,
    l2_reg: float = 0.0,
    negatives: np.ndarray | None = None,
) -> EmbeddingModel:
    """One gradient-descent step on :func:`masked_inner_loss`; ``model0`` is left untouched.

    ``negatives`` optionally fixes one negative item per support entry
    instead of sampling fresh ones for the selected pairs.
    """
    triples = _selected_triples(mask, pool, rng, negatives)
    # bpr_loss averages over the batch; rescale to the budget normalization
    return gradient_step(model0, triples, inner_lr * len(triples) / mask.budget, l2_reg)


def outer_batch(train: InteractionSet, val_batch_size: int, rng: np.random.Generator) -> np.ndarray:
    """Triples for a uniform batch of training pairs (all pairs if the batch covers the set)."""
    if len(train) == 0:
        raise ValueError("outer loss needs training pairs")
    if val_batch_size >= len(train):
        idx = np.arange(len(train))
    else:
        idx = rng.choice(len(train), size=val_batch_size, replace=False)
    users, items = train.users[idx], train.items[idx]
    return np.stack([users, items, sample_negatives_for(train, users, rng)], axis=1)


def outer_loss(model1: EmbeddingModel, train: InteractionSet, val_batch_size: int, rng: np.random.Generator) -> float:
    """BPR loss on a uniform batch of training pairs, or on all of them if the batch covers the set."""
    return bpr_loss(model1, outer_batch(train, val_batch_size, rng))


def log_prob_grad(mask: ProbabilityMask, sample: SampledMask, eps: float = 1e-4) -> np.ndarray:
    """Gradient of ln p(sample | probs) w.r.t. the probabilities: m/s - (1-m)/(1-s)."""
    s = np.clip(mask.probs, eps, 1 - eps)
    m = sample.bits
    return np.where(m, 1.0 / s, -1.0 / (1.0 - s))


def lpge_step(
    mask: ProbabilityMask,
    model0: EmbeddingModel,
    pool: DataPool,
    train: InteractionSet,
    config: CondenseConfig,
    rng: np.random.Generator,
    monitor: ConvergenceMonitor,
) -> ProbabilityMask:
    """One outer iteration; appends a record to ``monitor`` and returns the updated mask."""
    return _lpge_iteration(mask, model0, pool, train, config, rng, monitor)[0]


def _lpge_iteration(mask, model0, pool, train, config, rng, monitor):
    t = len(monitor)
    eta = learning_rate_at(config, t)
    losses, scores = [], []
    model1 = model0
    # draws of one iteration share the outer batch so their losses are comparable
    batch = outer_batch(train, config.val_batch_size, rng)
    negatives = sample_negatives_for(pool.pool, mask.users, rng) if config.mask_samples > 1 else None
    for _ in range(config.mask_samples):
        tick = time.perf_counter()
        sample = sample_mask(mask, rng)
        inner_time = 0.0
        if sample.count == 0:
            # an empty draw trains nothing; score it with the untouched model
            model1 = model0
        else:
            t_inner = time.perf_counter()
            try:
                model1 = inner_one_step(model0, sample, pool, config.inner_lr, rng, negatives=negatives)
            except DivergenceError as exc:
                raise DivergenceError(f"{exc} at outer iteration {t}") from exc
            inner_time = time.perf_counter() - t_inner
        losses.append(bpr_loss(model1, batch))
        scores.append(log_prob_grad(mask, sample, config.prob_clamp))
        monitor.inner_seconds += inner_time
        monitor.op_seconds += time.perf_counter() - tick - inner_time

    tick = time.perf_counter()
    weights = np.asarray(losses)
    if config.baseline_subtraction and config.baseline_kind == "leave-one-out":
        k = weights.size
        weights = weights - (weights.sum() - weights) / (k - 1)
    elif config.baseline_subtraction:
        history = monitor.outer_loss
        baseline = float(np.mean(history)) if history else float(weights.mean())
        weights = weights - baseline
    grad = sum(w * g for w, g in zip(weights, scores)) / len(scores)
    new_probs = project_feasible(mask.probs - eta * grad, mask.budget)
    loss = float(np.mean(losses))
    if not (np.isfinite(loss) and np.isfinite(new_probs).all()):
        raise DivergenceError(f"nonfinite values at outer iteration {t}")
    grad_map_sq = float(np.sum(((mask.probs - new_probs) / eta) ** 2)) if eta else 0.0
    monitor.record(loss, grad_map_sq, new_probs.sum(), eta)
    monitor.op_seconds += time.perf_counter() - tick
    return mask.with_probs(new_probs), model1


def _backbone_template(pool: DataPool, backbone_config: TrainConfig, rng) -> EmbeddingModel:
    graph = pool.pool if backbone_config.architecture == "lightgcn" else None
    return init_model(pool.pool.n_users, pool.pool.n_items, backbone_config, graph, rng=rng)


def condense(
    pool: DataPool,
    train: InteractionSet,
    val: InteractionSet | None,
    backbone_config: TrainConfig,
    config: CondenseConfig,
    callback=None,
) -> tuple[ProbabilityMask, ConvergenceMonitor]:
    """Run ``outer_epochs`` LPGE iterations from the initial probabilities.

    Every iteration starts the inner step from freshly drawn factors unless
    ``config.warm_start`` carries the stepped model forward. ``val`` is not
    consulted: outer losses are measured on batches of ``train``.
    """
    if len(pool) == 0 or len(train) == 0:
        raise ValueError("condensation needs a nonempty pool and training set")
    rng = np.random.default_rng([config.seed, 2])
    mask = init_probabilities(pool, config)
    monitor = ConvergenceMonitor()
    model = _backbone_template(pool, backbone_config, rng)
    for t in range(config.outer_epochs):
        if t > 0 and not config.warm_start:
            tick = time.perf_counter()
            model = reinit_factors(model, rng, backbone_config.init_std)
            monitor.inner_seconds += time.perf_counter() - tick
        mask, stepped = _lpge_iteration(mask, model, pool, train, config, rng, monitor)
        if config.warm_start:
            model = stepped
        if callback is not None:
            callback(t, mask, monitor)
    return mask, monitor


def finalize_dataset(mask: ProbabilityMask, mode: str = "topk", rng: np.random.Generator | None = None) -> InteractionSet:
    """Integerize the mask into a condensed interaction set of at most ceil(budget) pairs.

    ``topk`` keeps the floor(budget) most probable pairs (ties by pool order,
    which is ascending (user, item)). ``bernoulli`` samples every pair and,
    if the draw overshoots ceil(budget), keeps the most probable selected pairs.
    """
    probs = mask.probs
    if mode == "topk":
        n_keep = min(int(math.floor(mask.budget + 1e-9)), probs.size)
        order = np.argsort(-probs, kind="stable")
        keep = order[:n_keep]
        keep = keep[probs[keep] > 0]
    elif mode == "bernoulli":
        rng = rng if rng is not None else np.random.default_rng()
        keep = np.flatnonzero(rng.random(probs.size) < probs)
        cap = int(math.ceil(mask.budget - 1e-9))
        if keep.size > cap:
            keep = keep[np.argsort(-probs[keep], kind="stable")[:cap]]
    else:
        raise ValueError(f"unknown finalize mode {mode!r}")
    if keep.size == 0:
        logger.warning("condensed dataset is empty; all selection probabilities are ~0")
    return InteractionSet.from_pairs(mask.users[keep], mask.items[keep], mask.n_users, mask.n_items)


def save_mask(mask: ProbabilityMask, path) -> None:
    """``user<TAB>item<TAB>s`` rows over the full support."""
    with Path(path).open("w") as fh:
        fh.write(f"# budget={mask.budget!r}\tn_users={mask.n_users}\tn_items={mask.n_items}\n")
        for u, i, s in zip(mask.users.tolist(), mask.items.tolist(), mask.probs.tolist()):
            fh.write(f"{u}\t{i}\t{s:.17g}\n")


def load_mask(path) -> ProbabilityMask:
    with Path(path).open() as fh:
        header = dict(part.split("=") for part in fh.readline().lstrip("# ").strip().split("\t"))
    arr = np.loadtxt(path, delimiter="\t", comments="#", ndmin=2)
    return ProbabilityMask(
        arr[:, 0].astype(np.int64),
        arr[:, 1].astype(np.int64),
        arr[:, 2].copy(),
        float(header["budget"]),
        int(header["n_users"]),
        int(header["n_items"]),
    )
