"""Provision MovieLens-100k as ``u.data`` / ``u.item``.

GroupLens downloads are not always reachable, so the files are rebuilt from the
copy of ml-100k that ships inside the ``recbole`` wheel (atomic ``.inter`` /
``.item`` files), fetched with ``pip download``.
"""
from __future__ import annotations

import argparse
import os
import subprocess
import sys
import tempfile
import zipfile
from pathlib import Path

from drift.dataset import ML100K_GENRES

RECBOLE_SPEC = "recbole==1.2.1"
_INTER = "recbole/dataset_example/ml-100k/ml-100k.inter"
_ITEM = "recbole/dataset_example/ml-100k/ml-100k.item"
DEFAULT_DIR = Path("data/ml-100k")


def convert_recbole(inter_text: str, item_text: str) -> tuple[str, str]:
    """Atomic-file text -> (u.data text, u.item text)."""
    data_lines = []
    for line in inter_text.splitlines()[1:]:
        if not line.strip():
            continue
        u, i, r, t = line.split("\t")
        data_lines.append(f"{u}\t{i}\t{int(float(r))}\t{int(float(t))}")
    known = set(ML100K_GENRES)
    item_lines = []
    for line in item_text.splitlines()[1:]:
        if not line.strip():
            continue
        item_id, title, year, genres = line.split("\t")
        tags = set(genres.split())
        if not tags <= known:
            raise ValueError(f"unexpected genre tokens {tags - known} for item {item_id}")
        flags = "|".join("1" if g in tags else "0" for g in ML100K_GENRES)
        item_lines.append(f"{item_id}|{title}|{year}|||{flags}")
    return "\n".join(data_lines) + "\n", "\n".join(item_lines) + "\n"


def _from_wheel(wheel: Path, dest: Path) -> None:
    with zipfile.ZipFile(wheel) as zf:
        inter = zf.read(_INTER).decode("latin-1")
        item = zf.read(_ITEM).decode("latin-1")
    data_text, item_text = convert_recbole(inter, item)
    dest.mkdir(parents=True, exist_ok=True)
    (dest / "u.data").write_text(data_text, encoding="latin-1")
    (dest / "u.item").write_text(item_text, encoding="latin-1")


def ensure_movielens_100k(dest: str | Path | None = None) -> tuple[Path, Path]:
    """Return paths to u.data and u.item, fetching them on first use.

    ``$DRIFT_ML100K`` may point at an existing directory holding both files.
    """
    env = os.environ.get("DRIFT_ML100K")
    if env and (Path(env) / "u.data").exists():
        return Path(env) / "u.data", Path(env) / "u.item"
    dest = Path(dest) if dest else DEFAULT_DIR
    if (dest / "u.data").exists() and (dest / "u.item").exists():
        return dest / "u.data", dest / "u.item"
    with tempfile.TemporaryDirectory() as tmp:
        subprocess.run(
            [sys.executable, "-m", "pip", "download", "--no-deps", "-q", "-d", tmp, RECBOLE_SPEC],
            check=True,
        )
        wheel = next(Path(tmp).glob("recbole-*.whl"))
        _from_wheel(wheel, dest)
    return dest / "u.data", dest / "u.item"


def main(argv: list[str] | None = None) -> int:
    ap = argparse.ArgumentParser(description="Fetch MovieLens-100k into u.data / u.item")
    ap.add_argument("dest", nargs="?", default=str(DEFAULT_DIR))
    args = ap.parse_args(argv)
    try:
        data, item = ensure_movielens_100k(args.dest)
    except (subprocess.CalledProcessError, StopIteration, KeyError, OSError) as exc:
        print(f"error: could not provision MovieLens-100k: {exc}", file=sys.stderr)
        return 1
    print(f"{data}\n{item}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
