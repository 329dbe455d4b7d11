"""Item partitioning into one (possibly overlapping) item set per DO."""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np


class CoverageError(ValueError):
    pass


@dataclass
class ItemCatalog:
    item_ids: list[int]
    features: np.ndarray | None = None
    genre_tags: dict[int, set[str]] | None = None


def partition_by_tags(catalog: ItemCatalog) -> list[list[int]]:
    """One partition per distinct tag, tags in sorted order; multi-tag items go to several."""
    if catalog.genre_tags is None:
        raise ValueError("catalog has no genre tags")
    untagged = [i for i in catalog.item_ids if not catalog.genre_tags.get(i)]
    if untagged:
        raise CoverageError(f"{len(untagged)} items have no tag, e.g. {untagged[:5]}")
    by_tag: dict[str, list[int]] = {}
    for i in catalog.item_ids:
        for tag in catalog.genre_tags[i]:
            by_tag.setdefault(tag, []).append(i)
    return [sorted(by_tag[t]) for t in sorted(by_tag)]


def partition_hash(catalog: ItemCatalog, k: int) -> list[list[int]]:
    if k < 1:
        raise ValueError("k must be >= 1")
    parts: list[list[int]] = [[] for _ in range(k)]
    for i in catalog.item_ids:
        parts[i % k].append(i)
    return parts


def kmeans(
    x: np.ndarray, k: int, seed: int, max_iter: int = 100, tol: float = 1e-6
) -> tuple[np.ndarray, np.ndarray]:
    """Lloyd's algorithm from k distinct random points. Returns (labels, centroids).

    An emptied cluster is re-seeded with the point farthest from its centroid,
    taken from a cluster that keeps at least one other member.
    """
    x = np.asarray(x, dtype=float)
    n = len(x)
    if not 1 <= k <= n:
        raise ValueError(f"need 1 <= k <= {n}, got k={k}")
    rng = np.random.default_rng(seed)
    centroids = x[rng.choice(n, size=k, replace=False)].copy()
    for _ in range(max_iter):
        d2 = ((x[:, None, :] - centroids[None, :, :]) ** 2).sum(axis=-1)
        labels = d2.argmin(axis=1)
        own = d2[np.arange(n), labels]
        for c in range(k):
            counts = np.bincount(labels, minlength=k)
            if counts[c]:
                continue
            movable = np.flatnonzero(counts[labels] > 1)
            far = int(movable[own[movable].argmax()])
            labels[far] = c
            own[far] = 0.0
        new = np.stack([x[labels == c].mean(axis=0) for c in range(k)])
        shift = np.sqrt(((new - centroids) ** 2).sum(axis=1)).max()
        centroids = new
        if shift < tol:
            break
    return labels, centroids


def partition_kmeans(catalog: ItemCatalog, k: int, seed: int = 0) -> list[list[int]]:
    """Disjoint clusters of the catalog's feature rows (row j describes item_ids[j])."""
    if catalog.features is None:
        raise ValueError("catalog has no feature matrix")
    if k > len(catalog.item_ids):
        raise ValueError(f"k={k} exceeds the number of items ({len(catalog.item_ids)})")
    labels, _ = kmeans(catalog.features, k, seed)
    parts: list[list[int]] = [[] for _ in range(k)]
    for item, lab in zip(catalog.item_ids, labels):
        parts[int(lab)].append(item)
    return parts


def partition(catalog: ItemCatalog, strategy: str, seed: int = 0) -> list[list[int]]:
    """Dispatch on ``genre``, ``kmeans:K`` or ``hash:K``."""
    name, _, arg = strategy.partition(":")
    if name == "genre":
        return partition_by_tags(catalog)
    if name in ("kmeans", "hash"):
        if not arg:
            raise ValueError(f"{name} partitioning needs a count, e.g. {name}:4")
        k = int(arg)
        return partition_kmeans(catalog, k, seed) if name == "kmeans" else partition_hash(catalog, k)
    raise ValueError(f"unknown partition strategy {strategy!r}")


def write_manifest(partitions: Sequence[Sequence[int]], path: str | Path) -> None:
    Path(path).write_text("".join(",".join(str(i) for i in p) + "\n" for p in partitions))


def read_manifest(path: str | Path) -> list[list[int]]:
    lines = Path(path).read_text().splitlines()
    return [[int(tok) for tok in line.split(",") if tok.strip()] for line in lines if line.strip()]
