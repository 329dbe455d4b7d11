"""MovieLens ingestion, implicit labels and the per-user chronological split."""
from __future__ import annotations

import hashlib
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, NamedTuple, Sequence

import numpy as np

from drift.partition import ItemCatalog

log = logging.getLogger(__name__)

ML100K_GENRES = (
    "unknown", "Action", "Adventure", "Animation", "Children's", "Comedy", "Crime",
    "Documentary", "Drama", "Fantasy", "Film-Noir", "Horror", "Musical", "Mystery",
    "Romance", "Sci-Fi", "Thriller", "War", "Western",
)


class ParseError(ValueError):
    def __init__(self, path, line_no: int, msg: str):
        super().__init__(f"{path}:{line_no}: {msg}")
        self.line_no = line_no


class RawRating(NamedTuple):
    user_id: int
    item_id: int
    rating: int
    timestamp: int


class Interaction(NamedTuple):
    user_id: int
    item_id: int
    is_positive: bool
    timestamp: int


@dataclass
class IdMap:
    """Dense index <-> original id, dense order = sorted original ids."""

    originals: list[int]
    _dense: dict[int, int] = field(default_factory=dict, repr=False)

    def __post_init__(self):
        self._dense = {o: k for k, o in enumerate(self.originals)}
        if len(self._dense) != len(self.originals):
            raise ValueError("duplicate original ids")

    def __len__(self) -> int:
        return len(self.originals)

    def to_dense(self, original: int) -> int:
        return self._dense[original]

    def to_original(self, dense: int) -> int:
        return self.originals[dense]

    def to_json(self) -> str:
        return json.dumps(self.originals)

    @classmethod
    def from_json(cls, text: str) -> "IdMap":
        return cls(list(json.loads(text)))


@dataclass
class Dataset:
    ratings: list[RawRating]
    catalog: ItemCatalog
    user_map: IdMap
    item_map: IdMap

    @property
    def num_users(self) -> int:
        return len(self.user_map)

    @property
    def num_items(self) -> int:
        return len(self.item_map)

    def save_id_maps(self, directory: str | Path) -> None:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        (directory / "user_ids.json").write_text(self.user_map.to_json())
        (directory / "item_ids.json").write_text(self.item_map.to_json())


def to_implicit(rating: int) -> bool:
    """Ratings 1-2 are negative feedback, 3-5 positive."""
    if not 1 <= rating <= 5:
        raise ValueError(f"rating {rating} outside [1, 5]")
    return rating >= 3


def _split_line(line: str, delim: str | None) -> list[str]:
    return line.split(delim) if delim else line.split()


def _detect_delimiter(first_line: str) -> str | None:
    if "::" in first_line:
        return "::"
    if "\t" in first_line:
        return "\t"
    return None


def _parse_ratings(path: Path) -> np.ndarray:
    rows = []
    delim = None
    with open(path, encoding="latin-1") as fh:
        for line_no, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            if delim is None and not rows:
                delim = _detect_delimiter(line)
            fields = _split_line(line, delim)
            if len(fields) != 4:
                raise ParseError(path, line_no, f"expected 4 fields, got {len(fields)}")
            try:
                u, i, r, t = (int(float(f)) if k == 2 else int(f) for k, f in enumerate(fields))
            except ValueError as exc:
                raise ParseError(path, line_no, str(exc)) from None
            if not 1 <= r <= 5:
                raise ParseError(path, line_no, f"rating {r} outside [1, 5]")
            rows.append((u, i, r, t))
    if not rows:
        raise ParseError(path, 0, "no ratings found")
    return np.array(rows, dtype=np.int64)


def _parse_items(path: Path) -> dict[int, set[str]]:
    """u.item (pipe-separated, 19 trailing genre flags) or movies.dat (id::title::A|B)."""
    tags: dict[int, set[str]] = {}
    with open(path, encoding="latin-1") as fh:
        for line_no, line in enumerate(fh, 1):
            line = line.rstrip("\n\r")
            if not line.strip():
                continue
            if "::" in line:
                fields = line.split("::")
                if len(fields) < 3:
                    raise ParseError(path, line_no, "expected id::title::genres")
                genres = {g for g in fields[-1].split("|") if g}
            else:
                fields = line.split("|")
                if len(fields) < 5 + len(ML100K_GENRES):
                    raise ParseError(path, line_no, f"expected {len(ML100K_GENRES)} genre flags")
                flags = fields[-len(ML100K_GENRES):]
                if any(f not in ("0", "1") for f in flags):
                    raise ParseError(path, line_no, "genre flags must be 0/1")
                genres = {g for g, f in zip(ML100K_GENRES, flags) if f == "1"}
            try:
                tags[int(fields[0])] = genres
            except ValueError:
                raise ParseError(path, line_no, f"bad item id {fields[0]!r}") from None
    return tags


def file_digest(path: str | Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _load_ratings_cached(path: Path, cache_dir: Path | None) -> np.ndarray:
    if cache_dir is None:
        return _parse_ratings(path)
    cache = Path(cache_dir) / f"ratings-{file_digest(path)[:32]}.npy"
    if cache.exists():
        return np.load(cache)
    arr = _parse_ratings(path)
    cache.parent.mkdir(parents=True, exist_ok=True)
    np.save(cache, arr)
    return arr


def load_movielens(
    ratings_path: str | Path, items_path: str | Path | None = None, cache_dir: str | Path | None = None
) -> Dataset:
    """Parse ratings (tab / ``::`` / whitespace separated) and optional item genres.

    User and item ids are re-indexed densely in ascending order of original id.
    Items listed in the item file but never rated still get an index.
    """
    ratings_path = Path(ratings_path)
    arr = _load_ratings_cached(ratings_path, Path(cache_dir) if cache_dir else None)
    tags = None
    if items_path is not None:
        items_path = Path(items_path)
        if items_path.exists():
            tags = _parse_items(items_path)
        else:
            log.warning("item file %s not found; catalog has no genre tags", items_path)

    user_map = IdMap(sorted(set(arr[:, 0].tolist())))
    item_ids = set(arr[:, 1].tolist())
    if tags:
        item_ids |= tags.keys()
    item_map = IdMap(sorted(item_ids))

    ratings = [
        RawRating(user_map.to_dense(u), item_map.to_dense(i), r, t) for u, i, r, t in arr.tolist()
    ]
    return Dataset(ratings, make_catalog(item_map, tags), user_map, item_map)


def make_catalog(item_map: IdMap, tags: dict[int, set[str]] | None) -> ItemCatalog:
    """Dense catalog; when tags exist, features are the item-by-tag indicator matrix."""
    dense_ids = list(range(len(item_map)))
    if not tags:
        return ItemCatalog(dense_ids)
    genre_tags = {item_map.to_dense(o): set(g) for o, g in tags.items() if o in item_map._dense}
    names = sorted({g for gs in genre_tags.values() for g in gs})
    col = {g: c for c, g in enumerate(names)}
    feats = np.zeros((len(dense_ids), len(names)))
    for i, gs in genre_tags.items():
        for g in gs:
            feats[i, col[g]] = 1.0
    return ItemCatalog(dense_ids, feats, genre_tags)


def build_stream(ratings: Sequence[RawRating]) -> list[Interaction]:
    """Implicit interactions in timestamp order; equal timestamps keep file order."""
    order = sorted(range(len(ratings)), key=lambda k: ratings[k].timestamp)
    return [
        Interaction(ratings[k].user_id, ratings[k].item_id, to_implicit(ratings[k].rating), ratings[k].timestamp)
        for k in order
    ]


def chronological_split(
    stream: Sequence[Interaction], train_fraction: float = 0.8
) -> tuple[list[Interaction], list[Interaction]]:
    """Each user's first ceil(fraction * n_u) interactions train, the rest test.

    ``stream`` must already be in timestamp order; both outputs keep that order.
    """
    if not 0.0 < train_fraction < 1.0:
        raise ValueError("train_fraction must be in (0, 1)")
    counts: dict[int, int] = {}
    for it in stream:
        counts[it.user_id] = counts.get(it.user_id, 0) + 1
    quota = {}
    for u, n in counts.items():
        if n < 2:
            log.info("user %d has %d interaction(s); all kept for training", u, n)
            quota[u] = n
        else:
            # round() guards against 0.7 * 10 = 7.000000000000001
            quota[u] = math.ceil(round(train_fraction * n, 9))
    seen: dict[int, int] = {}
    train, test = [], []
    for it in stream:
        k = seen.get(it.user_id, 0)
        seen[it.user_id] = k + 1
        (train if k < quota[it.user_id] else test).append(it)
    return train, test


def synthetic_dataset(
    n_interactions: int,
    n_users: int = 50,
    n_items: int = 80,
    seed: int = 0,
    n_tags: int = 4,
    latent_dim: int = 4,
) -> Dataset:
    """Ratings drawn from a hidden low-rank preference model, with random genre tags."""
    rng = np.random.default_rng(seed)
    user_lat = rng.normal(size=(n_users, latent_dim))
    item_lat = rng.normal(size=(n_items, latent_dim))
    users = rng.integers(0, n_users, size=n_interactions)
    items = rng.integers(0, n_items, size=n_interactions)
    affinity = (user_lat[users] * item_lat[items]).sum(axis=1)
    positive = rng.random(n_interactions) < 1.0 / (1.0 + np.exp(-affinity))
    stars = np.where(positive, rng.integers(3, 6, size=n_interactions), rng.integers(1, 3, size=n_interactions))
    ratings = [
        RawRating(int(u), int(i), int(r), t) for t, (u, i, r) in enumerate(zip(users, items, stars))
    ]
    tag_names = [f"tag{t}" for t in range(n_tags)]
    tags = {}
    for i in range(n_items):
        k = int(rng.integers(1, min(3, n_tags) + 1))
        tags[i] = set(rng.choice(tag_names, size=k, replace=False).tolist())
    item_map = IdMap(list(range(n_items)))
    return Dataset(ratings, make_catalog(item_map, tags), IdMap(list(range(n_users))), item_map)


def group_by_user(stream: Iterable[Interaction]) -> dict[int, list[Interaction]]:
    out: dict[int, list[Interaction]] = {}
    for it in stream:
        out.setdefault(it.user_id, []).append(it)
    return out
