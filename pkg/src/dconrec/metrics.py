"""Full-catalog top-K evaluation and embedding export."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from dconrec.data import DatasetSplit, InteractionSet, UserGroupPartition

_CHUNK = 1024


def _topk_hits(model, train: InteractionSet, test: InteractionSet, k: int):
    """Yield (users, hit matrix (n, k), n_relevant) for every user with test items."""
    users = np.flatnonzero(test.user_degrees() > 0)
    for start in range(0, users.size, _CHUNK):
        chunk = users[start : start + _CHUNK]
        scores = np.asarray(model.scores(chunk), dtype=float).copy()
        for row, u in enumerate(chunk):
            scores[row, train.items_of(u)] = -np.inf
        # stable sort on negated scores keeps ascending item id among ties
        top = np.argsort(-scores, axis=1, kind="stable")[:, :k]
        hits = np.zeros(top.shape, dtype=bool)
        for row, u in enumerate(chunk):
            hits[row] = np.isin(top[row], test.items_of(u))
        yield chunk, hits, test.user_degrees()[chunk]


def per_user_metrics(model, train: InteractionSet, test: InteractionSet, k: int):
    """Per-user (users, recall@k, ndcg@k) arrays over users with test items."""
    if k < 1:
        raise ValueError("k must be at least 1")
    discounts = np.array([1.0 / math.log2(p + 1) for p in range(1, k + 1)])
    all_users, recalls, ndcgs = [], [], []
    for users, hits, n_rel in _topk_hits(model, train, test, k):
        all_users.append(users)
        recalls.append(hits.sum(1) / n_rel)
        idcg = np.cumsum(discounts)[np.minimum(n_rel, k) - 1]
        # running sums keep the rank order of accumulation
        ndcgs.append(np.cumsum(hits * discounts, axis=1)[:, -1] / idcg)
    if not all_users:
        empty = np.zeros(0)
        return empty.astype(np.int64), empty, empty
    return np.concatenate(all_users), np.concatenate(recalls), np.concatenate(ndcgs)


def recall_at_k(model, train: InteractionSet, test: InteractionSet, k: int) -> float:
    """Mean over test users of |top-k among non-train items ∩ test items| / |test items|."""
    _, recall, _ = per_user_metrics(model, train, test, k)
    return float(recall.mean()) if recall.size else 0.0


def ndcg_at_k(model, train: InteractionSet, test: InteractionSet, k: int) -> float:
    """Binary-relevance NDCG@k averaged over test users."""
    _, _, ndcg = per_user_metrics(model, train, test, k)
    return float(ndcg.mean()) if ndcg.size else 0.0


@dataclass
class EvalReport:
    metrics: dict[str, float]
    groups: dict[str, dict[str, float]] = field(default_factory=dict)
    group_sizes: dict[str, int] = field(default_factory=dict)
    n_evaluated_users: int = 0

    def flat(self) -> dict[str, float]:
        """``metric@K`` and ``group.metric@K`` keys."""
        out = dict(self.metrics)
        for name, values in self.groups.items():
            out.update({f"{name}.{key}": v for key, v in values.items()})
        return out

    def write_json(self, path, metadata: dict | None = None) -> None:
        payload = dict(self.flat())
        payload["n_evaluated_users"] = self.n_evaluated_users
        payload["meta"] = metadata or {}
        Path(path).write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")


def evaluate(
    model,
    split: DatasetSplit,
    ks=(5, 10),
    groups: UserGroupPartition | None = None,
    on: str = "test",
) -> EvalReport:
    """Recall/NDCG at every K on the test (or validation) part of ``split``.

    Train items are excluded from ranking. Group values average over the
    group's evaluated users, so the overall value is the size-weighted mean
    of the group values.
    """
    ks = list(ks)
    if not ks:
        raise ValueError("need at least one cutoff")
    target = split.test if on == "test" else split.validation
    report = EvalReport(metrics={})
    masks = {}
    for k in ks:
        users, recall, ndcg = per_user_metrics(model, split.train, target, k)
        report.n_evaluated_users = int(users.size)
        for name, values in (("recall", recall), ("ndcg", ndcg)):
            report.metrics[f"{name}@{k}"] = float(values.mean()) if values.size else 0.0
        if groups is None:
            continue
        for gname, members in groups.groups().items():
            if gname not in masks:
                masks[gname] = np.isin(users, np.fromiter(members, dtype=np.int64, count=len(members)))
                report.group_sizes[gname] = int(masks[gname].sum())
            sel = masks[gname]
            if not sel.any():
                # an empty group has no metric values; its size of 0 is still reported
                continue
            values = report.groups.setdefault(gname, {})
            values[f"recall@{k}"] = float(recall[sel].mean())
            values[f"ndcg@{k}"] = float(ndcg[sel].mean())
    return report


def export_embeddings(model, path) -> None:
    """Write ``{user|item}<TAB>id<TAB>v_1 ... v_d`` rows after a ``# d=...`` header.

    Values use 17 significant digits so float64 factors round-trip exactly.
    """
    with Path(path).open("w") as fh:
        fh.write(f"# d={model.dim}\tn_users={model.n_users}\tn_items={model.n_items}\n")
        for kind, mat in (("user", model.user_factors), ("item", model.item_factors)):
            for idx, row in enumerate(mat):
                fh.write(kind + "\t" + str(idx) + "\t" + "\t".join(f"{x:.17g}" for x in row) + "\n")


def import_embeddings(path) -> tuple[np.ndarray, np.ndarray]:
    with Path(path).open() as fh:
        header = dict(part.split("=") for part in fh.readline().lstrip("# ").strip().split("\t"))
        d, n_users, n_items = int(header["d"]), int(header["n_users"]), int(header["n_items"])
        users, items = np.empty((n_users, d)), np.empty((n_items, d))
        for line in fh:
            kind, idx, *vals = line.rstrip("\n").split("\t")
            (users if kind == "user" else items)[int(idx)] = [float(v) for v in vals]
    return users, items
