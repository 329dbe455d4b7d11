"""Global embedding parameters held by the orchestration server."""
from __future__ import annotations

import struct
import threading
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

SNAPSHOT_MAGIC = b"DRIFTEMB"
SNAPSHOT_VERSION = 1
_HEADER = struct.Struct(">8sIQQQd")


@dataclass
class GradientBundle:
    """Per-target gradient vectors produced by one DO for one update.

    Rows of ``user_grads`` pair with ``user_ids`` (same for items). Targets may
    repeat; they are applied in order.
    """

    do_id: int
    user_ids: np.ndarray
    user_grads: np.ndarray
    item_ids: np.ndarray
    item_grads: np.ndarray

    @classmethod
    def empty(cls, do_id: int, dim: int) -> "GradientBundle":
        return cls(
            do_id,
            np.empty(0, dtype=np.int64),
            np.empty((0, dim)),
            np.empty(0, dtype=np.int64),
            np.empty((0, dim)),
        )

    @classmethod
    def from_pairs(
        cls,
        do_id: int,
        user_grads: Sequence[tuple[int, Sequence[float]]],
        item_grads: Sequence[tuple[int, Sequence[float]]],
        dim: int,
    ) -> "GradientBundle":
        def split(pairs):
            ids = np.array([p[0] for p in pairs], dtype=np.int64)
            vecs = np.array([p[1] for p in pairs], dtype=float).reshape(len(pairs), dim)
            return ids, vecs

        uid, ug = split(user_grads)
        iid, ig = split(item_grads)
        return cls(do_id, uid, ug, iid, ig)

    @classmethod
    def concat(cls, do_id: int, parts: Iterable["GradientBundle"], dim: int) -> "GradientBundle":
        parts = list(parts)
        if not parts:
            return cls.empty(do_id, dim)
        return cls(
            do_id,
            np.concatenate([p.user_ids for p in parts]),
            np.concatenate([p.user_grads for p in parts]).reshape(-1, dim),
            np.concatenate([p.item_ids for p in parts]),
            np.concatenate([p.item_grads for p in parts]).reshape(-1, dim),
        )

    def __len__(self) -> int:
        return len(self.user_ids) + len(self.item_ids)


@dataclass
class EmbeddingStore:
    user_matrix: np.ndarray
    item_matrix: np.ndarray
    learning_rate: float = 0.05
    version: int = 0
    _lock: threading.RLock = field(default_factory=threading.RLock, repr=False, compare=False)

    def __post_init__(self):
        if self.user_matrix.ndim != 2 or self.item_matrix.ndim != 2:
            raise ValueError("embedding matrices must be 2-d")
        if self.user_matrix.shape[1] != self.item_matrix.shape[1]:
            raise ValueError("user and item matrices disagree on dimension")
        if not 0.0 < self.learning_rate <= 1.0:
            raise ValueError(f"learning_rate must be in (0, 1], got {self.learning_rate}")

    @property
    def dim(self) -> int:
        return self.user_matrix.shape[1]

    @property
    def num_users(self) -> int:
        return self.user_matrix.shape[0]

    @property
    def num_items(self) -> int:
        return self.item_matrix.shape[0]

    def read_rows(self, user_ids, item_ids) -> tuple[np.ndarray, np.ndarray, int]:
        """Copy the requested rows out of one consistent snapshot.

        Returns ``(user_rows, item_rows, version)``.
        """
        user_ids = np.asarray(user_ids, dtype=np.int64)
        item_ids = np.asarray(item_ids, dtype=np.int64)
        _check_range(user_ids, self.num_users, "user")
        _check_range(item_ids, self.num_items, "item")
        with self._lock:
            return self.user_matrix[user_ids], self.item_matrix[item_ids], self.version

    def copy(self) -> "EmbeddingStore":
        with self._lock:
            return EmbeddingStore(
                self.user_matrix.copy(), self.item_matrix.copy(), self.learning_rate, self.version
            )

    def is_finite(self) -> bool:
        with self._lock:
            return bool(np.isfinite(self.user_matrix).all() and np.isfinite(self.item_matrix).all())


def _check_range(ids: np.ndarray, bound: int, what: str) -> None:
    if ids.size and (ids.min() < 0 or ids.max() >= bound):
        raise IndexError(f"{what} id out of range [0, {bound})")


def init_embeddings(
    num_users: int, num_items: int, dim: int, seed: int, learning_rate: float = 0.05
) -> EmbeddingStore:
    """Uniform init on [-1/sqrt(d), 1/sqrt(d)], users drawn before items."""
    if num_users < 1 or num_items < 1 or dim < 1:
        raise ValueError("num_users, num_items and dim must all be >= 1")
    bound = 1.0 / np.sqrt(dim)
    rng = np.random.default_rng(seed)
    users = rng.uniform(-bound, bound, size=(num_users, dim))
    items = rng.uniform(-bound, bound, size=(num_items, dim))
    return EmbeddingStore(users, items, learning_rate)


def score_items(store: EmbeddingStore, user_id: int) -> np.ndarray:
    if not 0 <= user_id < store.num_users:
        raise IndexError(f"user id {user_id} out of range [0, {store.num_users})")
    with store._lock:
        return store.item_matrix @ store.user_matrix[user_id]


def top_k_from_scores(scores: np.ndarray, k: int, exclude: Iterable[int] = ()) -> list[int]:
    """Highest scores first; equal scores resolved by ascending item index."""
    if k < 1:
        raise ValueError("k must be >= 1")
    scores = np.asarray(scores, dtype=float)
    eligible = np.ones(scores.shape[0], dtype=bool)
    excl = np.fromiter(exclude, dtype=np.int64)
    if excl.size:
        eligible[excl] = False
    idx = np.flatnonzero(eligible)
    # lexsort: last key is primary -> descending score, then ascending index
    order = np.lexsort((idx, -scores[idx]))
    return idx[order[:k]].tolist()


def recommend_top_k(
    store: EmbeddingStore, user_id: int, k: int, exclude: Iterable[int] = ()
) -> list[int]:
    return top_k_from_scores(score_items(store, user_id), k, exclude)


def apply_gradients(store: EmbeddingStore, bundle: GradientBundle) -> None:
    """Plain SGD step: each target row loses ``learning_rate * grad``, in bundle order."""
    d = store.dim
    if bundle.user_grads.shape != (len(bundle.user_ids), d) or bundle.item_grads.shape != (
        len(bundle.item_ids),
        d,
    ):
        raise ValueError(f"gradient shapes do not match store dimension {d}")
    _check_range(bundle.user_ids, store.num_users, "user")
    _check_range(bundle.item_ids, store.num_items, "item")
    lr = store.learning_rate
    with store._lock:
        # ufunc.at is unbuffered: repeated rows are updated one gradient at a time
        np.subtract.at(store.user_matrix, bundle.user_ids, lr * bundle.user_grads)
        np.subtract.at(store.item_matrix, bundle.item_ids, lr * bundle.item_grads)
        store.version += 1


def save_store(store: EmbeddingStore, path: str | Path) -> None:
    """Binary snapshot: header (magic, version, U, I, d, lr) then row-major float64 LE."""
    with store._lock:
        header = _HEADER.pack(
            SNAPSHOT_MAGIC, SNAPSHOT_VERSION, store.num_users, store.num_items, store.dim,
            store.learning_rate,
        )
        body = store.user_matrix.astype("<f8").tobytes() + store.item_matrix.astype("<f8").tobytes()
    Path(path).write_bytes(header + body)


def load_store(path: str | Path) -> EmbeddingStore:
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        raise ValueError("snapshot truncated")
    magic, version, n_users, n_items, dim, lr = _HEADER.unpack_from(raw)
    if magic != SNAPSHOT_MAGIC:
        raise ValueError("not an embedding snapshot (bad magic)")
    if version != SNAPSHOT_VERSION:
        raise ValueError(f"unsupported snapshot version {version}")
    expected = _HEADER.size + 8 * dim * (n_users + n_items)
    if len(raw) != expected:
        raise ValueError(f"snapshot size {len(raw)} != expected {expected}")
    flat = np.frombuffer(raw, dtype="<f8", offset=_HEADER.size).astype(float)
    users = flat[: n_users * dim].reshape(n_users, dim)
    items = flat[n_users * dim:].reshape(n_items, dim)
    return EmbeddingStore(users.copy(), items.copy(), lr)
