"""``drift`` command line: train DRIFT or the baseline and write a results file."""
from __future__ import annotations

import argparse
import logging
import sys

from drift.harness import RunConfig, TrainingDivergedError, emit_results, run


def build_parser() -> argparse.ArgumentParser:
    d = RunConfig()
    ap = argparse.ArgumentParser(prog="drift", description=__doc__)
    ap.add_argument("--dataset", default=d.dataset, help="ratings file (u.data / ratings.dat) or synthetic:N")
    ap.add_argument("--items", default=d.items, help="item file with genres (u.item / movies.dat)")
    ap.add_argument("--mode", choices=("drift", "baseline"), default=d.mode)
    ap.add_argument("--dim", type=int, default=d.dim)
    ap.add_argument("--lr", type=float, default=d.learning_rate)
    ap.add_argument("--reg", type=float, default=d.reg_weight)
    ap.add_argument("--theta", type=int, default=d.theta)
    ap.add_argument("--epochs", type=int, default=d.epochs)
    ap.add_argument("--k-eval", type=int, default=d.k_eval)
    ap.add_argument("--partition", default=d.partition, help="genre | kmeans:K | hash:K")
    ap.add_argument("--schedule", default=d.schedule, help="det | threads:N")
    ap.add_argument("--seed", type=int, default=d.seed)
    ap.add_argument("--train-fraction", type=float, default=d.train_fraction)
    ap.add_argument("--out", default=None, help="results JSON path")
    ap.add_argument("-v", "--verbose", action="store_true")
    return ap


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        config = RunConfig(
            dataset=args.dataset, items=args.items, mode=args.mode, dim=args.dim, learning_rate=args.lr,
            reg_weight=args.reg, theta=args.theta, partition=args.partition, epochs=args.epochs,
            k_eval=args.k_eval, seed=args.seed, schedule=args.schedule, train_fraction=args.train_fraction,
            out=args.out,
        )
        result = run(config)
        if args.out:
            emit_results(result, config, args.out)
    except (OSError, ValueError, KeyError, TrainingDivergedError) as exc:
        print(f"drift: error: {exc}", file=sys.stderr)
        return 1
    for e in result.epochs:
        print(
            f"epoch {e.epoch}: train_loss={e.train_loss:.4f} test_loss={e.test_loss:.4f} "
            f"MAP@{config.k_eval}={e.map_at_k:.4f} NDCG@{config.k_eval}={e.ndcg_at_k:.4f} "
            f"blocks={e.blocks_trained} updates={e.updates}"
        )
    shares = result.timing.shares()
    print("time shares: " + ", ".join(f"{p}={100 * s:.1f}%" for p, s in shares.items()))
    return 0


if __name__ == "__main__":
    sys.exit(main())
