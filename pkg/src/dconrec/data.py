"""Interaction sets: loading, splitting, degree statistics and user groups."""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

logger = logging.getLogger(__name__)


class DataFormatError(ValueError):
    """Raised for unparseable or empty interaction files."""


@dataclass(frozen=True, eq=False)
class InteractionSet:
    """Deduplicated (user, item) pairs over contiguous id ranges.

    Pairs are stored sorted by (user, item). ``indptr`` is a CSR-style
    per-user index: the items of user ``u`` are
    ``items[indptr[u]:indptr[u + 1]]``.
    """

    n_users: int
    n_items: int
    users: np.ndarray
    items: np.ndarray
    indptr: np.ndarray = field(repr=False)
    user_ids: np.ndarray | None = field(default=None, repr=False)
    item_ids: np.ndarray | None = field(default=None, repr=False)

    @classmethod
    def from_pairs(
        cls,
        users,
        items,
        n_users: int | None = None,
        n_items: int | None = None,
        user_ids=None,
        item_ids=None,
    ) -> "InteractionSet":
        users = np.asarray(users, dtype=np.int64).ravel()
        items = np.asarray(items, dtype=np.int64).ravel()
        if users.shape != items.shape:
            raise ValueError("users and items must have the same length")
        if n_users is None:
            n_users = int(users.max()) + 1 if users.size else 0
        if n_items is None:
            n_items = int(items.max()) + 1 if items.size else 0
        if users.size:
            if users.min() < 0 or users.max() >= n_users:
                raise ValueError("user id out of bounds")
            if items.min() < 0 or items.max() >= n_items:
                raise ValueError("item id out of bounds")
        keys = np.unique(users * max(n_items, 1) + items)
        if n_items:
            users, items = keys // n_items, keys % n_items
        counts = np.bincount(users, minlength=n_users)
        indptr = np.zeros(n_users + 1, dtype=np.int64)
        np.cumsum(counts, out=indptr[1:])
        return cls(int(n_users), int(n_items), users, items, indptr, user_ids, item_ids)

    def __len__(self) -> int:
        return int(self.users.size)

    def __eq__(self, other) -> bool:
        if not isinstance(other, InteractionSet):
            return NotImplemented
        return (
            self.n_users == other.n_users
            and self.n_items == other.n_items
            and np.array_equal(self.users, other.users)
            and np.array_equal(self.items, other.items)
        )

    @property
    def keys(self) -> np.ndarray:
        """Sorted scalar encoding ``user * n_items + item`` of every pair."""
        return self.users * self.n_items + self.items

    def pairs(self) -> np.ndarray:
        return np.stack([self.users, self.items], axis=1)

    def items_of(self, user: int) -> np.ndarray:
        return self.items[self.indptr[user] : self.indptr[user + 1]]

    def contains(self, user: int, item: int) -> bool:
        row = self.items_of(user)
        pos = np.searchsorted(row, item)
        return bool(pos < row.size and row[pos] == item)

    def contains_many(self, users, items) -> np.ndarray:
        """Vectorized membership test for parallel arrays of ids."""
        query = np.asarray(users, dtype=np.int64) * self.n_items + np.asarray(items, dtype=np.int64)
        keys = self.keys
        if keys.size == 0:
            return np.zeros(query.shape, dtype=bool)
        pos = np.minimum(np.searchsorted(keys, query), keys.size - 1)
        return keys[pos] == query

    def user_degrees(self) -> np.ndarray:
        return np.diff(self.indptr)

    def item_degrees(self) -> np.ndarray:
        return np.bincount(self.items, minlength=self.n_items)

    def subset(self, mask_or_index) -> "InteractionSet":
        """Pairs selected by a boolean mask or index array, same id space."""
        return InteractionSet.from_pairs(
            self.users[mask_or_index],
            self.items[mask_or_index],
            self.n_users,
            self.n_items,
            self.user_ids,
            self.item_ids,
        )

    def union(self, other: "InteractionSet") -> "InteractionSet":
        _check_same_space(self, other)
        return InteractionSet.from_pairs(
            np.concatenate([self.users, other.users]),
            np.concatenate([self.items, other.items]),
            self.n_users,
            self.n_items,
            self.user_ids,
            self.item_ids,
        )

    def difference(self, other: "InteractionSet") -> "InteractionSet":
        _check_same_space(self, other)
        return self.subset(~np.isin(self.keys, other.keys))


def _check_same_space(a: InteractionSet, b: InteractionSet) -> None:
    if a.n_users != b.n_users or a.n_items != b.n_items:
        raise ValueError("interaction sets live in different id spaces")


def _delimiter(fmt: str) -> str:
    if fmt == "tsv":
        return "\t"
    if fmt == "csv":
        return ","
    raise ValueError(f"unknown format {fmt!r}")


def load_interactions(path, fmt: str = "tsv") -> InteractionSet:
    """Read ``user<sep>item[<sep>...]`` rows and remap ids to contiguous ranges.

    Ids are remapped in ascending order of their original integer value.
    Lines starting with ``#`` and blank lines are skipped.
    """
    path = Path(path)
    raw_users: list[int] = []
    raw_items: list[int] = []
    with path.open(newline="") as fh:
        reader = csv.reader(fh, delimiter=_delimiter(fmt))
        for row in reader:
            if not row or not "".join(row).strip() or row[0].lstrip().startswith("#"):
                continue
            if len(row) < 2:
                raise DataFormatError(f"{path}:{reader.line_num}: expected at least two columns")
            try:
                raw_users.append(int(row[0]))
                raw_items.append(int(row[1]))
            except ValueError:
                raise DataFormatError(
                    f"{path}:{reader.line_num}: non-integer id in {row[:2]!r}"
                ) from None
    if not raw_users:
        raise DataFormatError(f"{path}: no interactions")
    user_ids, users = np.unique(np.asarray(raw_users, dtype=np.int64), return_inverse=True)
    item_ids, items = np.unique(np.asarray(raw_items, dtype=np.int64), return_inverse=True)
    data = InteractionSet.from_pairs(
        users, items, user_ids.size, item_ids.size, user_ids=user_ids, item_ids=item_ids
    )
    n_dup = len(raw_users) - len(data)
    if n_dup:
        logger.info("dropped %d duplicate interactions from %s", n_dup, path)
    return data


def save_interactions(data: InteractionSet, path, fmt: str = "tsv", original_ids: bool = False) -> None:
    """Write one ``user<sep>item`` row per pair, internal ids unless ``original_ids``."""
    users, items = data.users, data.items
    if original_ids:
        if data.user_ids is None or data.item_ids is None:
            raise ValueError("interaction set carries no original id tables")
        users, items = data.user_ids[users], data.item_ids[items]
    sep = _delimiter(fmt)
    with Path(path).open("w") as fh:
        for u, i in zip(users.tolist(), items.tolist()):
            fh.write(f"{u}{sep}{i}\n")


def save_id_map(data: InteractionSet, path) -> None:
    """Write ``original_id<TAB>internal_id<TAB>{user|item}`` rows."""
    if data.user_ids is None or data.item_ids is None:
        raise ValueError("interaction set carries no original id tables")
    with Path(path).open("w") as fh:
        for internal, original in enumerate(data.user_ids.tolist()):
            fh.write(f"{original}\t{internal}\tuser\n")
        for internal, original in enumerate(data.item_ids.tolist()):
            fh.write(f"{original}\t{internal}\titem\n")


def read_pairs(path, n_users: int, n_items: int) -> InteractionSet:
    """Load a file already in internal ids, keeping a known id space."""
    arr = np.loadtxt(path, dtype=np.int64, delimiter="\t", comments="#", ndmin=2, usecols=(0, 1))
    if arr.size == 0:
        return InteractionSet.from_pairs([], [], n_users, n_items)
    return InteractionSet.from_pairs(arr[:, 0], arr[:, 1], n_users, n_items)


@dataclass(frozen=True)
class DatasetSplit:
    train: InteractionSet
    validation: InteractionSet
    test: InteractionSet


def _split_counts(n: int, fractions) -> tuple[int, int, int]:
    n_val = int(np.floor(fractions[1] * n + 0.5))
    n_test = int(np.floor(fractions[2] * n + 0.5))
    n_train = n - n_val - n_test
    return n_train, n_val, n_test


def split_dataset(
    data: InteractionSet,
    fractions=(0.8, 0.1, 0.1),
    seed: int = 0,
    mode: str = "per-user",
) -> DatasetSplit:
    """Random train/validation/test split.

    ``per-user`` splits each user's pairs separately; users with fewer than
    three interactions keep everything in train. ``global`` shuffles all
    pairs together.
    """
    fractions = tuple(float(f) for f in fractions)
    if len(fractions) != 3 or min(fractions) <= 0 or abs(sum(fractions) - 1.0) > 1e-9:
        raise ValueError(f"fractions must be three positive reals summing to 1, got {fractions}")
    rng = np.random.default_rng(seed)
    labels = np.zeros(len(data), dtype=np.int8)
    if mode == "global":
        perm = rng.permutation(len(data))
        n_train, n_val, _ = _split_counts(len(data), fractions)
        labels[perm[n_train : n_train + n_val]] = 1
        labels[perm[n_train + n_val :]] = 2
    elif mode == "per-user":
        for u in range(data.n_users):
            lo, hi = data.indptr[u], data.indptr[u + 1]
            deg = hi - lo
            if deg < 3:
                continue
            n_train, n_val, _ = _split_counts(deg, fractions)
            perm = lo + rng.permutation(deg)
            labels[perm[n_train : n_train + n_val]] = 1
            labels[perm[n_train + n_val :]] = 2
    else:
        raise ValueError(f"unknown split mode {mode!r}")
    return DatasetSplit(
        train=data.subset(labels == 0),
        validation=data.subset(labels == 1),
        test=data.subset(labels == 2),
    )


@dataclass(frozen=True)
class UserGroupPartition:
    head: frozenset
    torso: frozenset
    tail: frozenset
    thresholds: tuple[int, int]

    def groups(self) -> dict[str, frozenset]:
        return {"head": self.head, "torso": self.torso, "tail": self.tail}


def group_users(train: InteractionSet, lower: int = 10, upper: int = 100) -> UserGroupPartition:
    """Head: degree > upper; torso: lower < degree <= upper; tail: 1 <= degree <= lower."""
    if not 0 <= lower < upper:
        raise ValueError("need 0 <= lower < upper")
    deg = train.user_degrees()
    active = deg > 0
    head = np.flatnonzero(active & (deg > upper))
    torso = np.flatnonzero(active & (deg > lower) & (deg <= upper))
    tail = np.flatnonzero(active & (deg <= lower))
    return UserGroupPartition(
        frozenset(head.tolist()),
        frozenset(torso.tolist()),
        frozenset(tail.tolist()),
        (lower, upper),
    )
