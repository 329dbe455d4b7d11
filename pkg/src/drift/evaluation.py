"""MAP@K / NDCG@K over held-out positives, and block losses on a held-out stream."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from drift.blocks import split_blocks
from drift.dataset import Interaction, group_by_user
from drift.model import EmbeddingStore, top_k_from_scores
from drift.ranking_loss import block_loss


class EmptyReportError(ValueError):
    """No test user has a positive interaction to rank."""


def average_precision(ranked: Sequence[int], relevant: Iterable[int], k: int) -> float:
    if k < 1:
        raise ValueError("k must be >= 1")
    relevant = set(relevant)
    if not relevant:
        return 0.0
    hits, total = 0, 0.0
    for j, item in enumerate(ranked[:k], 1):
        if item in relevant:
            hits += 1
            total += hits / j
    return total / min(len(relevant), k)


def ndcg(ranked: Sequence[int], relevant: Iterable[int], k: int) -> float:
    if k < 1:
        raise ValueError("k must be >= 1")
    relevant = set(relevant)
    if not relevant:
        return 0.0
    dcg = sum(1.0 / math.log2(j + 1) for j, item in enumerate(ranked[:k], 1) if item in relevant)
    idcg = sum(1.0 / math.log2(j + 1) for j in range(1, min(len(relevant), k) + 1))
    return dcg / idcg


@dataclass
class EvalReport:
    map_at_k: float
    ndcg_at_k: float
    k: int
    per_user: dict[int, tuple[float, float]] = field(default_factory=dict)
    train_loss_curve: list[tuple[int, float]] = field(default_factory=list)

    def to_text(self) -> str:
        """Flat ``key=value`` lines."""
        lines = [f"k={self.k}", f"map_at_k={self.map_at_k!r}", f"ndcg_at_k={self.ndcg_at_k!r}",
                 f"users={len(self.per_user)}"]
        lines += [f"train_loss.{e}={v!r}" for e, v in self.train_loss_curve]
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "EvalReport":
        kv = dict(line.split("=", 1) for line in text.splitlines() if line)
        curve = sorted(
            (int(key.split(".", 1)[1]), float(v)) for key, v in kv.items() if key.startswith("train_loss.")
        )
        return cls(float(kv["map_at_k"]), float(kv["ndcg_at_k"]), int(kv["k"]), {}, curve)


def evaluate(
    store: EmbeddingStore,
    test: Sequence[Interaction],
    k: int = 10,
    exclude_train: bool = True,
    train: Sequence[Interaction] | None = None,
) -> EvalReport:
    """Rank every item per test user; relevant = that user's positive test items.

    With ``exclude_train`` the user's training items are removed from the ranking
    (``train`` must then be given).
    """
    if not test:
        raise ValueError("test stream is empty")
    if exclude_train and train is None:
        raise ValueError("exclude_train needs the training stream")
    relevant: dict[int, set[int]] = {}
    for it in test:
        if it.is_positive:
            relevant.setdefault(it.user_id, set()).add(it.item_id)
    if not relevant:
        raise EmptyReportError("no test user has a positive interaction")
    seen: dict[int, set[int]] = {}
    if exclude_train:
        for it in train:
            seen.setdefault(it.user_id, set()).add(it.item_id)

    users = sorted(relevant)
    with store._lock:
        scores = store.user_matrix[users] @ store.item_matrix.T
    per_user = {}
    for row, u in zip(scores, users):
        ranked = top_k_from_scores(row, k, seen.get(u, ()))
        per_user[u] = (average_precision(ranked, relevant[u], k), ndcg(ranked, relevant[u], k))
    aps = np.array([v[0] for v in per_user.values()])
    nds = np.array([v[1] for v in per_user.values()])
    return EvalReport(float(aps.mean()), float(nds.mean()), k, per_user)


def stream_blocks(stream: Sequence[Interaction], include_trailing: bool = True):
    """(user, negatives, positives) for each trainable block of each user's sequence."""
    for u, its in group_by_user(stream).items():
        completed, trailing = split_blocks([(it.item_id, it.is_positive) for it in its])
        if include_trailing:
            completed.append(trailing)
        for neg, pos in completed:
            if neg and pos:
                yield u, neg, pos


def mean_block_loss(store: EmbeddingStore, stream: Sequence[Interaction], reg_weight: float = 0.0) -> float:
    """Mean block loss of the centrally-built blocks of ``stream`` (NaN if none)."""
    with store._lock:
        U, I = store.user_matrix, store.item_matrix
        losses = [block_loss(U[u], I[pos], I[neg], reg_weight) for u, neg, pos in stream_blocks(stream)]
    return float(np.mean(losses)) if losses else float("nan")
