"""Per-(user, DO) interaction blocks: a run of negatives closed by a run of positives."""
from __future__ import annotations

from dataclasses import dataclass, field


@dataclass
class Block:
    user_id: int
    negatives: list[int] = field(default_factory=list)
    positives: list[int] = field(default_factory=list)
    negatives_closed: bool = False

    @property
    def trainable(self) -> bool:
        return bool(self.negatives) and bool(self.positives)


@dataclass
class BlockBuffer:
    """Active block per user plus completed blocks awaiting an update.

    ``threshold`` counts completed blocks across all users of the DO.
    """

    threshold: int = 2
    active: dict[int, Block] = field(default_factory=dict)
    saved: list[Block] = field(default_factory=list)

    def __post_init__(self):
        if self.threshold < 1:
            raise ValueError("threshold must be >= 1")

    def ingest(self, user_id: int, item_id: int, is_positive: bool) -> bool:
        """Apply one interaction; True when enough blocks are saved to request an update."""
        block = self.active.get(user_id)
        if block is None:
            block = self.active[user_id] = Block(user_id)
        if is_positive:
            block.positives.append(item_id)
            block.negatives_closed = True
        elif not block.positives:
            block.negatives.append(item_id)
        else:
            self.saved.append(block)
            self.active[user_id] = Block(user_id, negatives=[item_id])
        return len(self.saved) >= self.threshold

    def drain(self) -> list[Block]:
        out, self.saved = self.saved, []
        return out

    def reset(self) -> None:
        """Drop everything, incomplete blocks included (epoch boundary)."""
        self.active.clear()
        self.saved.clear()


def split_blocks(items: list[tuple[int, bool]]) -> tuple[list[tuple[list[int], list[int]]], tuple[list[int], list[int]]]:
    """Cut one user's sequence at every negative that follows a positive.

    Returns ``(completed, trailing)`` as (negatives, positives) pairs. Used for
    test-set losses, where the stream is already known in full.
    """
    completed: list[tuple[list[int], list[int]]] = []
    neg: list[int] = []
    pos: list[int] = []
    for item, positive in items:
        if positive:
            pos.append(item)
        elif pos:
            completed.append((neg, pos))
            neg, pos = [item], []
        else:
            neg.append(item)
    return completed, (neg, pos)
