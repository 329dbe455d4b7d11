"""Users, Data Owners and the Central Orchestration Server over an in-process bus.

Every message is a framed byte string (see :mod:`drift.protocol`). The bus can
record each one in a :class:`MessageLog` so that visibility properties can be
checked after a run.
"""
from __future__ import annotations

import itertools
import logging
import queue
import threading
from collections import deque
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

from drift.blocks import Block, BlockBuffer
from drift.partition import CoverageError
from drift.model import EmbeddingStore, GradientBundle, apply_gradients
from drift.protocol import (
    KIND_GRADIENT_BUNDLE,
    KIND_INTERACTION,
    KIND_REPR_REPLY,
    KIND_REPR_REQUEST,
    STATUS_ERROR,
    STATUS_OK,
    ProtocolError,
    RepresentationReply,
    RepresentationRequest,
    decode_bundle,
    decode_reply,
    decode_request,
    encode_bundle,
    encode_interaction,
    encode_reply,
    encode_request,
    unframe,
)
from drift.ranking_loss import block_loss_and_gradients
from drift.secure_channel import AuthenticationError, DoKey, EncryptedInteraction, Opener, Sealer
from drift.timing import PhaseTimer

log = logging.getLogger(__name__)

COS = "cos"
USER = "user"


def do_address(do_id: int) -> str:
    return f"do:{do_id}"


class RoutingError(KeyError):
    pass


@dataclass
class RoutingTable:
    entries: dict[int, list[int]] = field(default_factory=dict)

    def lookup(self, item_id: int) -> list[int]:
        try:
            return self.entries[item_id]
        except KeyError:
            raise RoutingError(f"item {item_id} is not held by any DO") from None

    @property
    def num_dos(self) -> int:
        return len({k for ks in self.entries.values() for k in ks})


def build_routing_table(partitions: Sequence[Iterable[int]], num_items: int | None = None) -> RoutingTable:
    """item -> ascending list of the DOs whose partition contains it."""
    table: dict[int, list[int]] = {}
    for k, items in enumerate(partitions):
        items = list(items)
        if not items:
            raise ValueError(f"DO {k} has an empty partition")
        for item in items:
            dos = table.setdefault(int(item), [])
            if not dos or dos[-1] != k:
                dos.append(k)
    if num_items is not None:
        missing = sorted(set(range(num_items)) - table.keys())
        if missing:
            raise CoverageError(f"{len(missing)} items held by no DO, e.g. {missing[:5]}")
    return RoutingTable(dict(sorted(table.items())))


# --------------------------------------------------------------------------- bus


@dataclass(frozen=True)
class LogRecord:
    seq: int
    sender: str
    receiver: str
    kind: int
    payload: bytes


@dataclass(frozen=True)
class AuditEvent:
    actor: str
    event: str
    detail: tuple


class MessageLog:
    """Append-only record of bus traffic and notable actor events."""

    def __init__(self):
        self.records: list[LogRecord] = []
        self.events: list[AuditEvent] = []
        self._lock = threading.Lock()

    def append(self, sender: str, receiver: str, data: bytes) -> None:
        with self._lock:
            self.records.append(LogRecord(len(self.records), sender, receiver, data[0], data))

    def event(self, actor: str, event: str, *detail) -> None:
        with self._lock:
            self.events.append(AuditEvent(actor, event, detail))

    def inbound(self, receiver: str) -> list[LogRecord]:
        return [r for r in self.records if r.receiver == receiver]

    def events_of(self, event: str) -> list[AuditEvent]:
        return [e for e in self.events if e.event == event]


class Bus:
    """Routes frames to actor inboxes; per-sender FIFO, optional recording.

    Tracks outstanding messages so a scheduler can wait for quiescence.
    """

    def __init__(self, log_: MessageLog | None = None):
        self.log = log_
        self._deliver: Callable[[str, str, bytes], None] | None = None
        self._outstanding = 0
        self._cond = threading.Condition()

    def attach(self, deliver: Callable[[str, str, bytes], None]) -> None:
        self._deliver = deliver

    def send(self, sender: str, receiver: str, data: bytes) -> None:
        if self.log is not None:
            self.log.append(sender, receiver, data)
        with self._cond:
            self._outstanding += 1
        self._deliver(sender, receiver, data)

    def done(self) -> None:
        with self._cond:
            self._outstanding -= 1
            if self._outstanding == 0:
                self._cond.notify_all()

    def wait_idle(self, timeout: float | None = None) -> bool:
        with self._cond:
            return self._cond.wait_for(lambda: self._outstanding == 0, timeout)

    @property
    def outstanding(self) -> int:
        return self._outstanding


# --------------------------------------------------------------------- gradients


def gradients_for_blocks(
    blocks: Sequence[Block],
    user_ids: np.ndarray,
    user_rows: np.ndarray,
    item_ids: np.ndarray,
    item_rows: np.ndarray,
    reg_weight: float,
    do_id: int = -1,
) -> tuple[GradientBundle, list[float]]:
    """Gradients of every trainable block against one snapshot of rows.

    Blocks without negatives or without positives contribute nothing.
    """
    dim = user_rows.shape[1] if user_rows.ndim == 2 and user_rows.size else item_rows.shape[-1]
    upos = {int(u): k for k, u in enumerate(user_ids)}
    ipos = {int(i): k for k, i in enumerate(item_ids)}
    parts, losses = [], []
    for b in blocks:
        if not b.trainable:
            continue
        loss, part = block_loss_and_gradients(
            b.user_id,
            user_rows[upos[b.user_id]],
            b.positives,
            item_rows[[ipos[i] for i in b.positives]],
            b.negatives,
            item_rows[[ipos[i] for i in b.negatives]],
            reg_weight,
            do_id,
        )
        parts.append(part)
        losses.append(loss)
    return GradientBundle.concat(do_id, parts, dim), losses


def block_ids(blocks: Iterable[Block]) -> tuple[np.ndarray, np.ndarray]:
    users, items = set(), set()
    for b in blocks:
        users.add(b.user_id)
        items.update(b.negatives)
        items.update(b.positives)
    return np.array(sorted(users), dtype=np.int64), np.array(sorted(items), dtype=np.int64)


# ------------------------------------------------------------------------ actors


class UserClient:
    """The user population's side: encrypt and route each interaction to its DOs.

    Holds one encryption context per DO key so nonces never repeat under a key.
    """

    def __init__(
        self,
        table: RoutingTable,
        keys: dict[int, DoKey],
        bus: Bus,
        timer: PhaseTimer | None = None,
        nonce_starts: dict[int, int] | None = None,
    ):
        self.table = table
        self.bus = bus
        self.timer = timer or PhaseTimer(enabled=False)
        nonce_starts = nonce_starts or {}
        self.sealers = {k: Sealer(key, nonce_starts.get(k)) for k, key in keys.items()}

    def send(self, user_id: int, item_id: int, is_positive: bool) -> None:
        for k in self.table.lookup(item_id):
            with self.timer.span("encryption"):
                data = encode_interaction(self.sealers[k].seal(user_id, item_id, is_positive))
            self.bus.send(USER, do_address(k), data)


@dataclass
class _Pending:
    blocks: list[Block]
    user_ids: np.ndarray
    item_ids: np.ndarray


class DataOwner:
    def __init__(
        self,
        do_id: int,
        key: DoKey,
        items: Iterable[int],
        bus: Bus,
        threshold: int = 2,
        reg_weight: float = 0.01,
        timer: PhaseTimer | None = None,
    ):
        self.do_id = do_id
        self.address = do_address(do_id)
        self.items = frozenset(int(i) for i in items)
        self.bus = bus
        self.reg_weight = reg_weight
        self.timer = timer or PhaseTimer(enabled=False)
        self.buffer = BlockBuffer(threshold)
        self._opener = Opener(key)
        self._request_ids = itertools.count()
        self.pending: dict[int, _Pending] = {}
        self.block_losses: list[float] = []
        self.auth_failures = 0
        self.protocol_errors = 0
        self.requests_sent = 0

    def _event(self, event: str, *detail) -> None:
        if self.bus.log is not None:
            self.bus.log.event(self.address, event, *detail)

    def handle(self, sender: str, data: bytes) -> None:
        try:
            kind, payload = unframe(data)
        except ProtocolError as exc:
            self.protocol_errors += 1
            log.warning("%s: dropped malformed frame from %s: %s", self.address, sender, exc)
            self._event("protocol-error", str(exc))
            return
        if kind == KIND_INTERACTION:
            self.on_interaction(payload)
        elif kind == KIND_REPR_REPLY:
            with self.timer.span("representation_transfer"):
                try:
                    reply = decode_reply(payload)
                except ProtocolError as exc:
                    self.protocol_errors += 1
                    self._event("protocol-error", str(exc))
                    return
            self.on_reply(reply)
        else:
            self.protocol_errors += 1
            self._event("protocol-error", f"unexpected kind {kind}")

    def on_interaction(self, payload: bytes) -> None:
        with self.timer.span("decryption"):
            try:
                msg = EncryptedInteraction.from_bytes(payload)
                if msg.do_id != self.do_id:
                    raise AuthenticationError(f"frame addressed to DO {msg.do_id}")
                user_id, item_id = self._opener.open(msg)
            except AuthenticationError as exc:
                self.auth_failures += 1
                log.info("%s: dropped interaction: %s", self.address, exc)
                self._event("auth-failure", str(exc))
                return
        self._event("decrypted", user_id, item_id)
        with self.timer.span("block_management"):
            update_required = self.buffer.ingest(user_id, item_id, msg.is_positive)
        if update_required:
            self.request_update()

    def request_update(self) -> None:
        with self.timer.span("block_management"):
            blocks = self.buffer.drain()
            users, items = block_ids(blocks)
            rid = next(self._request_ids)
            self.pending[rid] = _Pending(blocks, users, items)
        with self.timer.span("representation_transfer"):
            data = encode_request(RepresentationRequest(self.do_id, rid, users, items))
        self.requests_sent += 1
        self.bus.send(self.address, COS, data)

    def on_reply(self, reply: RepresentationReply) -> None:
        pending = self.pending.pop(reply.request_id, None)
        if pending is None:
            self.protocol_errors += 1
            self._event("protocol-error", f"unsolicited reply {reply.request_id}")
            return
        if not reply.ok or not (
            np.array_equal(reply.user_ids, pending.user_ids) and np.array_equal(reply.item_ids, pending.item_ids)
        ):
            self.protocol_errors += 1
            log.warning("%s: update %d aborted, reply incomplete", self.address, reply.request_id)
            self._event("update-aborted", reply.request_id)
            return
        with self.timer.span("gradient_compute"):
            bundle, losses = gradients_for_blocks(
                pending.blocks,
                reply.user_ids,
                reply.user_rows,
                reply.item_ids,
                reply.item_rows,
                self.reg_weight,
                self.do_id,
            )
        self.block_losses.extend(losses)
        with self.timer.span("representation_transfer"):
            data = encode_bundle(bundle)
        self.bus.send(self.address, COS, data)

    def reset(self) -> None:
        self.buffer.reset()
        self.pending.clear()


class CentralServer:
    """Owns the store; serves row snapshots and applies bundles one at a time."""

    def __init__(
        self,
        store: EmbeddingStore,
        bus: Bus,
        timer: PhaseTimer | None = None,
        on_update: Callable[[EmbeddingStore], None] | None = None,
    ):
        self.store = store
        self.bus = bus
        self.timer = timer or PhaseTimer(enabled=False)
        self.on_update = on_update
        self.bundles_applied = 0
        self.protocol_errors = 0
        self._apply_lock = threading.Lock()

    def _event(self, event: str, *detail) -> None:
        if self.bus.log is not None:
            self.bus.log.event(COS, event, *detail)

    def handle(self, sender: str, data: bytes) -> None:
        try:
            kind, payload = unframe(data)
            if kind == KIND_REPR_REQUEST:
                self.on_request(sender, payload)
            elif kind == KIND_GRADIENT_BUNDLE:
                self.on_bundle(payload)
            else:
                raise ProtocolError(f"COS does not accept kind {kind}")
        except ProtocolError as exc:
            self.protocol_errors += 1
            log.warning("cos: dropped message from %s: %s", sender, exc)
            self._event("protocol-error", sender, str(exc))

    def on_request(self, sender: str, payload: bytes) -> None:
        with self.timer.span("representation_transfer"):
            req = decode_request(payload)
            self._event("repr-request", req.do_id, tuple(req.user_ids.tolist()), tuple(req.item_ids.tolist()))
            try:
                urows, irows, version = self.store.read_rows(req.user_ids, req.item_ids)
                status = STATUS_OK
            except IndexError:
                d = self.store.dim
                urows, irows, version, status = np.empty((0, d)), np.empty((0, d)), self.store.version, STATUS_ERROR
                self.protocol_errors += 1
                self._event("protocol-error", sender, "id out of range")
                req.user_ids, req.item_ids = req.user_ids[:0], req.item_ids[:0]
            data = encode_reply(
                RepresentationReply(
                    req.do_id, req.request_id, status, version, req.user_ids, req.item_ids, urows, irows
                )
            )
        self.bus.send(COS, sender, data)

    def on_bundle(self, payload: bytes) -> None:
        with self.timer.span("representation_transfer"):
            bundle = decode_bundle(payload)
        with self.timer.span("update_apply"):
            if bundle.user_grads.shape[1] != self.store.dim:
                raise ProtocolError("bundle dimension mismatch")
            if not (np.isfinite(bundle.user_grads).all() and np.isfinite(bundle.item_grads).all()):
                raise ProtocolError("non-finite gradient in bundle")
            with self._apply_lock:
                try:
                    apply_gradients(self.store, bundle)
                except (IndexError, ValueError) as exc:
                    raise ProtocolError(str(exc)) from exc
                self.bundles_applied += 1
                if self.on_update is not None:
                    self.on_update(self.store)


# -------------------------------------------------------------------- schedulers


class DeterministicScheduler:
    """Single thread, round-robin over actors, one message per actor per sweep."""

    def __init__(self, bus: Bus, actors: dict[str, object]):
        self.bus = bus
        self.actors = actors
        self.inboxes: dict[str, deque] = {addr: deque() for addr in actors}
        bus.attach(self._deliver)

    def _deliver(self, sender: str, receiver: str, data: bytes) -> None:
        self.inboxes[receiver].append((sender, data))

    def run_until_idle(self) -> None:
        while self.bus.outstanding:
            for addr, inbox in self.inboxes.items():
                if inbox:
                    sender, data = inbox.popleft()
                    try:
                        self.actors[addr].handle(sender, data)
                    finally:
                        self.bus.done()

    def close(self) -> None:
        pass


class ThreadedScheduler:
    """COS on its own thread; DOs spread over ``n_workers`` threads by id."""

    _STOP = object()

    def __init__(self, bus: Bus, actors: dict[str, object], n_workers: int = 4):
        if n_workers < 1:
            raise ValueError("need at least one worker thread")
        self.bus = bus
        self.actors = actors
        self.errors: list[BaseException] = []
        self.queues = [queue.SimpleQueue() for _ in range(n_workers + 1)]
        do_addrs = [a for a in actors if a != COS]
        self.owner = {COS: 0}
        for k, addr in enumerate(do_addrs):
            self.owner[addr] = 1 + k % n_workers
        self.threads = [
            threading.Thread(target=self._work, args=(q,), name=f"drift-worker-{n}", daemon=True)
            for n, q in enumerate(self.queues)
        ]
        bus.attach(self._deliver)
        for t in self.threads:
            t.start()

    def _deliver(self, sender: str, receiver: str, data: bytes) -> None:
        self.queues[self.owner[receiver]].put((receiver, sender, data))

    def _work(self, q: queue.SimpleQueue) -> None:
        while True:
            item = q.get()
            if item is self._STOP:
                return
            receiver, sender, data = item
            try:
                self.actors[receiver].handle(sender, data)
            except BaseException as exc:  # surfaced by run_until_idle
                self.errors.append(exc)
            finally:
                self.bus.done()

    def run_until_idle(self) -> None:
        self.bus.wait_idle()
        if self.errors:
            raise RuntimeError("actor failed in worker thread") from self.errors[0]

    def close(self) -> None:
        for q in self.queues:
            q.put(self._STOP)
        for t in self.threads:
            t.join()


# ---------------------------------------------------------------------- assembly


class Federation:
    """One COS, K DOs and the user client wired onto a bus."""

    def __init__(
        self,
        store: EmbeddingStore,
        partitions: Sequence[Sequence[int]],
        keys: dict[int, DoKey],
        threshold: int = 2,
        reg_weight: float = 0.01,
        schedule: str = "det",
        record: bool = False,
        timer: PhaseTimer | None = None,
        nonce_starts: dict[int, int] | None = None,
        on_update: Callable[[EmbeddingStore], None] | None = None,
    ):
        self.timer = timer or PhaseTimer(enabled=False)
        self.log = MessageLog() if record else None
        self.bus = Bus(self.log)
        self.partitions = [list(p) for p in partitions]
        self.table = build_routing_table(self.partitions, store.num_items)
        self.cos = CentralServer(store, self.bus, self.timer, on_update)
        self.dos = [
            DataOwner(k, keys[k], part, self.bus, threshold, reg_weight, self.timer)
            for k, part in enumerate(self.partitions)
        ]
        self.users = UserClient(self.table, keys, self.bus, self.timer, nonce_starts)
        actors: dict[str, object] = {do.address: do for do in self.dos}
        actors[COS] = self.cos
        self.actors = actors
        self.schedule = schedule
        self.scheduler = make_scheduler(schedule, self.bus, actors)

    @property
    def store(self) -> EmbeddingStore:
        return self.cos.store

    def send(self, user_id: int, item_id: int, is_positive: bool) -> None:
        self.users.send(user_id, item_id, is_positive)
        if isinstance(self.scheduler, DeterministicScheduler):
            self.scheduler.run_until_idle()

    def quiesce(self) -> None:
        self.scheduler.run_until_idle()

    def reset_epoch(self) -> None:
        self.quiesce()
        for do in self.dos:
            do.reset()

    def block_losses(self) -> list[float]:
        return [x for do in self.dos for x in do.block_losses]

    def close(self) -> None:
        self.scheduler.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def make_scheduler(schedule: str, bus: Bus, actors: dict[str, object]):
    if schedule in ("det", "deterministic"):
        return DeterministicScheduler(bus, actors)
    if schedule.startswith("threads"):
        _, _, n = schedule.partition(":")
        return ThreadedScheduler(bus, actors, int(n) if n else 4)
    raise ValueError(f"unknown schedule {schedule!r}; use 'det' or 'threads:N'")
