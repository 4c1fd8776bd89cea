import numpy as np
import pytest

from dconrec.augment import (
    DataPool,
    build_data_pool,
    load_pool,
    mine_pseudo,
    save_pool,
    topk_unexposed,
    train_proxy,
)
from dconrec.data import InteractionSet, split_dataset
from dconrec.model import EmbeddingModel, TrainConfig
from dconrec.synthetic import inject_adversarial, planted_blocks

from conftest import pairs_set


class TableModel:
    def __init__(self, table):
        self.table = np.asarray(table, dtype=float)

    def scores(self, users):
        return self.table[np.asarray(users)]


def test_topk_direct_ranking():
    proxy = TableModel([[5.0, 0.9, 0.5, 0.1]])
    train = InteractionSet.from_pairs([0], [0], 1, 4)
    assert topk_unexposed(proxy, train, 0, 2) == [1, 2]
    assert topk_unexposed(proxy, train, 0, 0) == []
    assert topk_unexposed(proxy, train, 0, 10) == [1, 2, 3]


def test_topk_ties_by_item_id():
    proxy = TableModel([[1.0, 2.0, 2.0, 2.0]])
    train = InteractionSet.from_pairs([0], [2], 1, 4)
    assert topk_unexposed(proxy, train, 0, 2) == [1, 3]


@pytest.mark.parametrize("seed", range(5))
def test_topk_brute_force_and_monotone_invariance(seed):
    rng = np.random.default_rng(seed)
    table = np.round(rng.normal(size=(3, 20)), 1)
    train = InteractionSet.from_pairs(rng.integers(0, 3, 15), rng.integers(0, 20, 15), 3, 20)
    for u in range(3):
        for k in (0, 1, 5, 20):
            seen = set(train.items_of(u).tolist())
            want = sorted((i for i in range(20) if i not in seen), key=lambda i: (-table[u, i], i))[:k]
            assert topk_unexposed(TableModel(table), train, u, k) == want
            # strictly increasing transform of the scores
            assert topk_unexposed(TableModel(np.exp(3 * table) + 7), train, u, k) == want


def test_topk_bad_arguments():
    proxy = TableModel([[0.0, 1.0]])
    train = InteractionSet.from_pairs([0], [0], 1, 2)
    with pytest.raises(ValueError):
        topk_unexposed(proxy, train, 0, -1)
    with pytest.raises(IndexError):
        topk_unexposed(proxy, train, 3, 1)


@pytest.fixture(scope="module")
def proxy_setup():
    planted = planted_blocks(n_users=80, n_items=40, n_interactions=1600, seed=2)
    split = split_dataset(planted.data, seed=2)
    cfg = TrainConfig(embedding_dim=8, batch_size=256, max_epochs=40, seed=2)
    return planted, split, train_proxy(split.train, split.validation, config=cfg)


def test_proxy_learns_planted_blocks(proxy_setup):
    planted, split, proxy = proxy_setup
    assert proxy.architecture == "mf"
    scores = proxy.scores(np.arange(80))
    rng = np.random.default_rng(1)
    u = rng.integers(0, 80, 2000)
    inside = np.array([rng.choice(np.flatnonzero(planted.item_block == planted.user_block[x])) for x in u])
    outside = np.array([rng.choice(np.flatnonzero(planted.item_block != planted.user_block[x])) for x in u])
    assert (scores[u, inside] > scores[u, outside]).mean() >= 0.95


def test_lightgcn_proxy(proxy_setup):
    _, split, _ = proxy_setup
    cfg = TrainConfig(embedding_dim=4, max_epochs=2, batch_size=512)
    proxy = train_proxy(split.train, split.validation, "lightgcn", cfg)
    assert proxy.architecture == "lightgcn"
    assert np.isfinite(proxy.scores([0, 1])).all()


def test_zero_ratio_pool_is_train(proxy_setup):
    _, split, proxy = proxy_setup
    pool = build_data_pool(split.train, proxy, 0.0)
    assert pool.pool == split.train and pool.n_pseudo == 0


def test_per_user_budget_rounding():
    proxy = TableModel(np.tile(np.arange(10.0)[::-1], (2, 1)))
    train = InteractionSet.from_pairs([0, 0, 0, 0, 1], [0, 1, 2, 3, 5], 2, 10)
    pool = build_data_pool(train, proxy, 0.5)
    pseudo = pool.pseudo()
    assert pseudo.items_of(0).tolist() == [4, 5]
    # 0.5 * 1 rounds half up
    assert pseudo.items_of(1).tolist() == [0]
    fixed = mine_pseudo(proxy, train, fixed_k=3)
    assert fixed.per_user_k == 3 and len(fixed.pairs) == 6


@pytest.mark.parametrize("r_ps", [0.1, 0.3, 0.5, 0.7, 0.9])
def test_pool_ratio_and_disjointness(proxy_setup, r_ps):
    _, split, proxy = proxy_setup
    pool = build_data_pool(split.train, proxy, r_ps)
    pseudo, originals = pool.pseudo(), pool.originals()
    assert originals == split.train
    assert not (pairs_set(pseudo) & pairs_set(split.train))
    assert len(pool) == len(split.train) + len(pseudo)
    assert abs(len(pseudo) / len(split.train) - r_ps) <= 0.02
    deg = split.train.user_degrees()
    assert (pseudo.user_degrees() <= np.floor(r_ps * deg + 0.5)).all()


def test_pool_deterministic(proxy_setup):
    _, split, proxy = proxy_setup
    a = build_data_pool(split.train, proxy, 0.4, seed=1)
    b = build_data_pool(split.train, proxy, 0.4, seed=1)
    assert a.pool == b.pool and np.array_equal(a.is_pseudo, b.is_pseudo)


def test_pool_overlap_rejected():
    train = InteractionSet.from_pairs([0], [0], 1, 2)
    with pytest.raises(ValueError):
        DataPool.from_parts(train, train)


def test_pool_file_round_trip(tmp_path, proxy_setup):
    _, split, proxy = proxy_setup
    pool = build_data_pool(split.train, proxy, 0.3)
    save_pool(pool, tmp_path / "pool.tsv")
    first = (tmp_path / "pool.tsv").read_text().splitlines()[0].split("\t")
    assert first[2] in ("orig", "pseudo")
    back = load_pool(tmp_path / "pool.tsv", split.train.n_users, split.train.n_items, 0.3)
    assert back.pool == pool.pool and np.array_equal(back.is_pseudo, pool.is_pseudo)


def test_adversarial_injection(proxy_setup):
    planted, split, proxy = proxy_setup
    pool = build_data_pool(split.train, proxy, 0.5)
    bad_pool, bad = inject_adversarial(pool, planted, 0.2, seed=0)
    assert bad_pool.originals() == split.train
    assert bad.sum() == round(0.2 * pool.n_pseudo)
    assert not planted.in_block(bad_pool.pool.users[bad], bad_pool.pool.items[bad]).any()
    assert (bad <= bad_pool.is_pseudo).all()
