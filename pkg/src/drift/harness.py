"""End-to-end training runs: federated DRIFT or the centralized block baseline."""
from __future__ import annotations

import json
import logging
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from drift.blocks import BlockBuffer
from drift.dataset import Dataset, Interaction, build_stream, chronological_split, load_movielens, synthetic_dataset
from drift.evaluation import EvalReport, evaluate, mean_block_loss
from drift.federation import Federation, MessageLog, block_ids, gradients_for_blocks
from drift.model import EmbeddingStore, apply_gradients, init_embeddings
from drift.partition import partition
from drift.secure_channel import gen_key
from drift.timing import PhaseTimer, TimeBreakdown

log = logging.getLogger(__name__)

RESULTS_FORMAT = "drift-results/1"


class TrainingDivergedError(RuntimeError):
    pass


@dataclass
class RunConfig:
    dataset: str = "data/ml-100k/u.data"
    items: str | None = "data/ml-100k/u.item"
    mode: str = "drift"
    dim: int = 16
    learning_rate: float = 0.05
    reg_weight: float = 0.01
    theta: int = 2
    partition: str = "genre"
    epochs: int = 5
    k_eval: int = 10
    seed: int = 0
    schedule: str = "det"
    train_fraction: float = 0.8
    exclude_train: bool = True
    out: str | None = None

    def __post_init__(self):
        if not 0.0 < self.learning_rate <= 1.0:
            raise ValueError("learning rate must be in (0, 1]")
        if self.theta < 1:
            raise ValueError("theta must be >= 1")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.dim < 1 or self.k_eval < 1:
            raise ValueError("dim and k_eval must be >= 1")
        if self.reg_weight < 0:
            raise ValueError("reg_weight must be >= 0")
        if self.mode not in ("drift", "baseline"):
            raise ValueError(f"mode must be drift or baseline, not {self.mode!r}")


@dataclass
class PreparedData:
    dataset: Dataset
    train: list[Interaction]
    test: list[Interaction]


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    test_loss: float
    map_at_k: float
    ndcg_at_k: float
    blocks_trained: int
    updates: int


@dataclass
class RunResult:
    report: EvalReport
    timing: TimeBreakdown
    epochs: list[EpochRecord]
    store: EmbeddingStore
    wall_clock: float
    counters: dict[str, int] = field(default_factory=dict)
    log: MessageLog | None = None
    partitions: list[list[int]] | None = None
    # per epoch; chronological for the baseline, grouped by DO for DRIFT
    block_losses: list[list[float]] = field(default_factory=list)


def prepare_data(config: RunConfig) -> PreparedData:
    """Load ``config.dataset``: a ratings file, or ``synthetic:N`` for N generated ratings."""
    if config.dataset.startswith("synthetic"):
        _, _, n = config.dataset.partition(":")
        ds = synthetic_dataset(int(n or 1000), seed=config.seed)
    else:
        ds = load_movielens(config.dataset, config.items)
    train, test = chronological_split(build_stream(ds.ratings), config.train_fraction)
    return PreparedData(ds, train, test)


def phase_timer(schedule: str) -> PhaseTimer:
    """Wall clock when one thread does everything, per-thread CPU time otherwise."""
    return PhaseTimer(clock=time.thread_time if schedule.startswith("threads") else time.perf_counter)


def _evaluate_epoch(store, data: PreparedData, config: RunConfig, timer: PhaseTimer):
    with timer.span("evaluation"):
        report = evaluate(store, data.test, config.k_eval, config.exclude_train, data.train)
        test_loss = mean_block_loss(store, data.test, reg_weight=0.0)
    return report, test_loss


def _check_finite(store: EmbeddingStore, epoch: int) -> None:
    if not store.is_finite():
        raise TrainingDivergedError(
            f"non-finite embedding after epoch {epoch}; lower --lr or raise --reg"
        )


def run_drift(
    config: RunConfig,
    data: PreparedData | None = None,
    on_update: Callable[[EmbeddingStore], None] | None = None,
    record_messages: bool = False,
    inspect: Callable[[Federation], None] | None = None,
) -> RunResult:
    """Train through the federation; ``inspect`` sees it after the last epoch, before shutdown."""
    t0 = time.perf_counter()
    data = data or prepare_data(config)
    ds = data.dataset
    parts = partition(ds.catalog, config.partition, config.seed)
    keys = {k: gen_key(k, rng_seed=config.seed) for k in range(len(parts))}
    rng = np.random.default_rng(config.seed)
    nonce_starts = {k: int(rng.integers(0, 2**63)) << 32 for k in range(len(parts))}
    store = init_embeddings(ds.num_users, ds.num_items, config.dim, config.seed, config.learning_rate)
    timer = phase_timer(config.schedule)
    epochs: list[EpochRecord] = []
    all_losses: list[list[float]] = []
    report = None
    with Federation(
        store, parts, keys, config.theta, config.reg_weight, config.schedule, record_messages, timer,
        nonce_starts, on_update,
    ) as fed:
        updates_before = 0
        for epoch in range(1, config.epochs + 1):
            for it in data.train:
                fed.send(it.user_id, it.item_id, it.is_positive)
            fed.reset_epoch()
            losses = []
            for do in fed.dos:
                losses.extend(do.block_losses)
                do.block_losses.clear()
            all_losses.append(losses)
            _check_finite(store, epoch)
            report, test_loss = _evaluate_epoch(store, data, config, timer)
            epochs.append(
                EpochRecord(
                    epoch, float(np.mean(losses)) if losses else float("nan"), test_loss,
                    report.map_at_k, report.ndcg_at_k, len(losses), fed.cos.bundles_applied - updates_before,
                )
            )
            updates_before = fed.cos.bundles_applied
            log.info("drift epoch %d: %s", epoch, epochs[-1])
        counters = {
            "data_owners": len(fed.dos),
            "auth_failures": sum(do.auth_failures for do in fed.dos),
            "protocol_errors": sum(do.protocol_errors for do in fed.dos) + fed.cos.protocol_errors,
            "bundles_applied": fed.cos.bundles_applied,
            "messages_logged": len(fed.log.records) if fed.log else 0,
        }
        msg_log = fed.log
        if inspect is not None:
            inspect(fed)
    report.train_loss_curve = [(e.epoch, e.train_loss) for e in epochs]
    return RunResult(
        report, timer.breakdown(), epochs, store, time.perf_counter() - t0, counters, msg_log, parts, all_losses
    )


def run_baseline(
    config: RunConfig,
    data: PreparedData | None = None,
    on_update: Callable[[EmbeddingStore], None] | None = None,
) -> RunResult:
    """Same blocks, loss and update rule on the undivided stream; one update per block."""
    t0 = time.perf_counter()
    data = data or prepare_data(config)
    ds = data.dataset
    store = init_embeddings(ds.num_users, ds.num_items, config.dim, config.seed, config.learning_rate)
    timer = PhaseTimer()
    buffer = BlockBuffer(threshold=1)
    epochs: list[EpochRecord] = []
    all_losses: list[list[float]] = []
    updates = 0
    report = None
    for epoch in range(1, config.epochs + 1):
        losses: list[float] = []
        epoch_updates = 0
        for it in data.train:
            with timer.span("block_management"):
                ready = buffer.ingest(it.user_id, it.item_id, it.is_positive)
                if ready:
                    blocks = buffer.drain()
                    users, items = block_ids(blocks)
            if not ready:
                continue
            urows, irows, _ = store.read_rows(users, items)
            with timer.span("gradient_compute"):
                bundle, block_losses = gradients_for_blocks(
                    blocks, users, urows, items, irows, config.reg_weight, 0
                )
            losses.extend(block_losses)
            with timer.span("update_apply"):
                apply_gradients(store, bundle)
            epoch_updates += 1
            if on_update is not None:
                on_update(store)
        buffer.reset()
        all_losses.append(losses)
        updates += epoch_updates
        _check_finite(store, epoch)
        report, test_loss = _evaluate_epoch(store, data, config, timer)
        epochs.append(
            EpochRecord(
                epoch, float(np.mean(losses)) if losses else float("nan"), test_loss,
                report.map_at_k, report.ndcg_at_k, len(losses), epoch_updates,
            )
        )
        log.info("baseline epoch %d: %s", epoch, epochs[-1])
    report.train_loss_curve = [(e.epoch, e.train_loss) for e in epochs]
    return RunResult(
        report, timer.breakdown(), epochs, store, time.perf_counter() - t0, {"updates": updates},
        block_losses=all_losses,
    )


def run(config: RunConfig, data: PreparedData | None = None) -> RunResult:
    return run_drift(config, data) if config.mode == "drift" else run_baseline(config, data)


def results_document(result: RunResult, config: RunConfig) -> dict:
    """Everything but the ``timing`` block is a pure function of config and seed."""
    shares = result.timing.shares()
    return {
        "format": RESULTS_FORMAT,
        "config": asdict(config),
        "epochs": [asdict(e) for e in result.epochs],
        "final": {
            "k": result.report.k,
            "map_at_k": result.report.map_at_k,
            "ndcg_at_k": result.report.ndcg_at_k,
            "evaluated_users": len(result.report.per_user),
        },
        "counters": dict(result.counters),
        "timing": {
            "clock": "thread_cpu" if config.schedule.startswith("threads") and config.mode == "drift" else "wall",
            "wall_clock_s": result.wall_clock,
            "measured_total_s": result.timing.total,
            "phases": [
                {"phase": p, "seconds": s, "share": shares[p]} for p, s in result.timing.durations.items()
            ],
        },
    }


def emit_results(result: RunResult, config: RunConfig, path: str | Path) -> None:
    Path(path).write_text(json.dumps(results_document(result, config), indent=2) + "\n")


def load_results(path: str | Path) -> dict:
    doc = json.loads(Path(path).read_text())
    if doc.get("format") != RESULTS_FORMAT:
        raise ValueError(f"{path}: not a {RESULTS_FORMAT} file")
    return doc
