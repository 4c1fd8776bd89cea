import math

import numpy as np
import pytest

from dconrec.augment import DataPool
from dconrec.baselines import (
    BaselineConfig,
    gradmatch_condense,
    gradmatch_step,
    majority_select,
    matching_distance,
    matching_objective,
    pair_losses,
    random_select,
    select_by_loss,
    svp_cf_select,
)
from dconrec.data import InteractionSet, split_dataset
from dconrec.model import ConfigurationError, EmbeddingModel, TrainConfig, init_model, sample_negatives_for
from dconrec.synthetic import planted_blocks

from conftest import pairs_set


@pytest.fixture(scope="module")
def data():
    planted = planted_blocks(n_users=50, n_items=30, n_interactions=700, seed=6)
    return split_dataset(planted.data, seed=6)


def test_config_validation():
    with pytest.raises(ConfigurationError):
        BaselineConfig(ratio_r=0.0)
    with pytest.raises(ConfigurationError):
        BaselineConfig(method="distill")
    with pytest.raises(ConfigurationError):
        BaselineConfig(gm_distance="manhattan")


@pytest.mark.parametrize("r", [0.1, 0.25, 0.5, 0.9])
def test_selectors_budget_and_subset(data, r):
    train = data.train
    budget = math.floor(r * len(train))
    for out in (random_select(train, r, 3), majority_select(train, r), svp_cf_select(
            train, None, r, TrainConfig(embedding_dim=4, max_epochs=3))):
        assert len(out) == budget
        assert pairs_set(out) <= pairs_set(train)


def test_selectors_identity_at_one(data):
    train = data.train
    assert random_select(train, 1.0) == train
    assert majority_select(train, 1.0) == train
    assert svp_cf_select(train, None, 1.0) == train


def test_random_count_and_determinism():
    train = InteractionSet.from_pairs(np.arange(284_086) % 7_375, np.arange(284_086) % 10_007, 7_375, 10_007)
    assert len(random_select(train, 0.25, 0)) == 71_021
    small = InteractionSet.from_pairs(np.arange(100) % 10, np.arange(100) // 10, 10, 10)
    assert random_select(small, 0.3, 5) == random_select(small, 0.3, 5)
    with pytest.raises(ValueError):
        random_select(small, 1.5)


def majority_oracle(train, budget):
    """Greedy fill in (degree, user id) order, boundary user truncated by item id."""
    deg = train.user_degrees()
    chosen = []
    for u in sorted(range(train.n_users), key=lambda v: (deg[v], v)):
        for i in sorted(train.items_of(u).tolist()):
            if len(chosen) < budget:
                chosen.append((u, i))
    return set(chosen)


def test_majority_examples():
    train = InteractionSet.from_pairs([0, 1, 1, 2, 2, 2, 2], [3, 0, 1, 0, 1, 2, 3], 3, 4)
    # |D| = 7; r = 3/7 and 4/7 give budgets of 3 and 4
    assert pairs_set(majority_select(train, 3 / 7)) == {(0, 3), (1, 0), (1, 1)}
    assert pairs_set(majority_select(train, 4 / 7)) == {(0, 3), (1, 0), (1, 1), (2, 0)}


@pytest.mark.parametrize("seed", range(5))
def test_majority_matches_oracle_and_prefix(seed):
    rng = np.random.default_rng(seed)
    train = InteractionSet.from_pairs(rng.integers(0, 15, 120), rng.integers(0, 20, 120), 15, 20)
    r = float(rng.uniform(0.05, 0.95))
    out = majority_select(train, r)
    assert pairs_set(out) == majority_oracle(train, math.floor(r * len(train)))
    deg, got = train.user_degrees(), out.user_degrees()
    active = [u for u in sorted(range(15), key=lambda v: (deg[v], v)) if deg[u]]
    touched = [u for u in active if got[u]]
    # users with any selected pair form a prefix; all but the last are complete
    assert touched == active[: len(touched)]
    assert all(got[u] == deg[u] for u in touched[:-1])


def test_select_by_loss_directions():
    train = InteractionSet.from_pairs(np.arange(10), np.zeros(10, int), 10, 1)
    losses = np.array([0.3, 0.9, 0.1, 0.5, 0.7, 0.2, 0.8, 0.4, 0.6, 0.0])
    hard = select_by_loss(train, losses, 0.3, "hardest")
    easy = select_by_loss(train, losses, 0.3, "easiest")
    # exhaustive sort oracle
    assert hard.users.tolist() == sorted(np.argsort(-losses)[:3].tolist())
    assert easy.users.tolist() == sorted(np.argsort(losses)[:3].tolist())
    assert select_by_loss(train, losses, 0.7, "easiest").users.tolist() == sorted(
        set(range(10)) - set(hard.users.tolist())
    )


def test_svp_frozen_proxy(data):
    train = data.train
    proxy = init_model(train.n_users, train.n_items, TrainConfig(embedding_dim=4, seed=2))
    cfg = TrainConfig(embedding_dim=4, seed=9)
    out = svp_cf_select(train, None, 0.3, cfg, "hardest", proxy=proxy)

    negs = sample_negatives_for(train, train.users, np.random.default_rng([9, 3]))
    user_emb, item_emb = proxy.embeddings()
    losses = [math.log1p(math.exp(-(user_emb[u] @ (item_emb[i] - item_emb[j]))))
              for u, i, j in zip(train.users, train.items, negs)]
    keep = sorted(range(len(train)), key=lambda k: (-losses[k], k))[: math.floor(0.3 * len(train))]
    assert pairs_set(out) == {(int(train.users[k]), int(train.items[k])) for k in keep}
    assert np.allclose(pair_losses(proxy, train, negs), losses)


# -- gradient matching ------------------------------------------------------------------

def test_cosine_extremes(rng):
    g = (rng.normal(size=(3, 2)), rng.normal(size=(4, 2)))
    assert matching_distance(g, g) == pytest.approx(0.0, abs=1e-12)
    assert matching_distance(g, tuple(-x for x in g)) == pytest.approx(4.0)
    assert matching_distance(g[:1], (-g[0],)) == pytest.approx(2.0)
    assert matching_distance(g, g, "euclidean") == 0.0


def test_self_match_distance_zero(rng):
    model = EmbeddingModel(rng.normal(size=(4, 3)), rng.normal(size=(5, 3)))
    triples = np.array([[0, 1, 2], [1, 0, 3], [3, 4, 1]])
    # s = 1 on exactly the real pairs, budget equal to their count
    dist, _ = matching_objective(np.ones(3), model, triples, triples, 3.0)
    assert dist == pytest.approx(0.0, abs=1e-12)
    dist, _ = matching_objective(np.ones(3), model, triples, triples, 3.0, "euclidean")
    assert dist == pytest.approx(0.0, abs=1e-24)


@pytest.mark.parametrize("arch", ["mf", "lightgcn"])
@pytest.mark.parametrize("kind", ["cosine-per-matrix", "euclidean"])
def test_matching_gradient_finite_differences(arch, kind):
    rng = np.random.default_rng(4)
    graph = InteractionSet.from_pairs(rng.integers(0, 6, 20), rng.integers(0, 7, 20), 6, 7)
    cfg = TrainConfig(embedding_dim=3, architecture=arch, init_std=1.0)
    model = init_model(6, 7, cfg, graph if arch == "lightgcn" else None, rng=rng)
    pool = np.stack([graph.users, graph.items, (graph.items + 1) % 7], 1)
    real = pool[rng.choice(len(pool), 8, replace=False)]
    probs = rng.uniform(0.1, 0.9, len(pool))
    _, grad = matching_objective(probs, model, pool, real, 5.0, kind)
    h = 1e-6
    fd = np.array([
        (matching_objective(probs + h * e, model, pool, real, 5.0, kind)[0]
         - matching_objective(probs - h * e, model, pool, real, 5.0, kind)[0]) / (2 * h)
        for e in np.eye(len(pool))
    ])
    assert np.linalg.norm(grad - fd) / np.linalg.norm(fd) < 1e-5


def test_gradmatch_zero_step(rng):
    model = EmbeddingModel(rng.normal(size=(4, 3)), rng.normal(size=(5, 3)))
    triples = np.array([[0, 1, 2], [1, 0, 3], [3, 4, 1]])
    probs = np.array([0.2, 0.5, 0.3])
    new, _ = gradmatch_step(probs, model, triples, triples[:2], 1.0, 0.0)
    assert np.array_equal(new, probs)


def test_gradmatch_condense_budget_and_feasibility(data):
    train = data.train
    cfg = BaselineConfig(method="gradmatch", gm_outer_epochs=25, gm_lr=50.0)
    out, mask, monitor = gradmatch_condense(DataPool.from_parts(train), train, 0.25,
                                            TrainConfig(embedding_dim=4), cfg, return_mask=True)
    assert len(out) == math.floor(0.25 * len(train))
    assert pairs_set(out) <= pairs_set(train)
    assert len(monitor) == 25 and max(monitor.sum_s) <= mask.budget + 1e-9
    assert mask.is_feasible()
    # same configuration, same result
    again = gradmatch_condense(DataPool.from_parts(train), train, 0.25, TrainConfig(embedding_dim=4), cfg)
    assert again == out


def test_gradmatch_from_pool_and_lightgcn(data):
    train = data.train
    extra = InteractionSet.from_pairs([0, 1], [29, 29], train.n_users, train.n_items).difference(train)
    pool = DataPool.from_parts(train, extra)
    cfg = BaselineConfig(method="gradmatch", gm_outer_epochs=3, gm_use_pool=True)
    out = gradmatch_condense(pool, train, 0.5, TrainConfig(embedding_dim=4, architecture="lightgcn"), cfg)
    assert pairs_set(out) <= pairs_set(pool.pool)
