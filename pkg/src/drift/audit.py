"""Post-run checks over a recorded :class:`~drift.federation.MessageLog`.

Each ``check_*`` function returns a list of human-readable violations; an
empty list means the property held for every record.
"""
from __future__ import annotations

import copy
import struct
from typing import Iterable, Sequence

import numpy as np

from drift.federation import COS, DataOwner, Federation, MessageLog
from drift.protocol import (
    KIND_GRADIENT_BUNDLE,
    KIND_INTERACTION,
    KIND_NAMES,
    KIND_REPR_REQUEST,
    ProtocolError,
    decode_bundle,
    decode_request,
    frame,
    unframe,
)

_PAIR = struct.Struct(">II")


def check_cos_inbound(log: MessageLog) -> list[str]:
    """The COS only ever receives id sets and gradient sections.

    A representation request carries a set of user ids and a separate set of
    item ids; a bundle carries user-gradient rows and item-gradient rows in
    separate sections. Neither layout has a field pairing a user with an item,
    so a message "carries a plaintext pair" exactly when it fails to decode
    as one of these two kinds with no bytes left over.
    """
    bad = []
    for r in log.inbound(COS):
        try:
            kind, payload = unframe(r.payload)
            if kind == KIND_REPR_REQUEST:
                req = decode_request(payload)
                if len(np.unique(req.user_ids)) != len(req.user_ids) or len(np.unique(req.item_ids)) != len(req.item_ids):
                    bad.append(f"record {r.seq}: request ids are not sets")
            elif kind == KIND_GRADIENT_BUNDLE:
                decode_bundle(payload)
            else:
                bad.append(f"record {r.seq}: COS received {KIND_NAMES.get(kind, kind)}")
        except ProtocolError as exc:
            bad.append(f"record {r.seq}: undecodable COS-inbound frame ({exc})")
    bad += [f"COS event {e.event}" for e in log.events if e.actor == COS and e.event == "decrypted"]
    return bad


def check_interaction_ciphertexts(log: MessageLog) -> list[str]:
    """No interaction frame contains the plaintext encoding of a pair its DO decrypted."""
    pairs: dict[str, set[bytes]] = {}
    for e in log.events_of("decrypted"):
        pairs.setdefault(e.actor, set()).add(_PAIR.pack(*e.detail))
    bad = []
    for r in log.records:
        known = pairs.get(r.receiver)
        if r.kind != KIND_INTERACTION or not known:
            continue
        raw = r.payload
        if any(raw[k:k + _PAIR.size] in known for k in range(len(raw) - _PAIR.size + 1)):
            bad.append(f"record {r.seq}: plaintext pair visible on the wire")
    return bad


def check_do_isolation(log: MessageLog, partitions: Sequence[Iterable[int]]) -> list[str]:
    """Every successful decryption at DO k is for an item in partition k."""
    sets = [set(int(i) for i in p) for p in partitions]
    bad = []
    for e in log.events_of("decrypted"):
        k = int(e.actor.split(":", 1)[1])
        item = e.detail[1]
        if item not in sets[k]:
            bad.append(f"{e.actor} decrypted item {item} outside its partition")
    return bad


def tamper(data: bytes, rng: np.random.Generator) -> bytes:
    """Flip one random bit of an interaction frame's encrypted-interaction bytes."""
    kind, payload = unframe(data)
    if kind != KIND_INTERACTION:
        raise ValueError("can only tamper with interaction frames")
    raw = bytearray(payload)
    bit = int(rng.integers(len(raw) * 8))
    raw[bit // 8] ^= 1 << (bit % 8)
    return frame(kind, bytes(raw))


def _do_state(do: DataOwner):
    return (
        copy.deepcopy(do.buffer.active),
        copy.deepcopy(do.buffer.saved),
        sorted(do.pending),
        list(do.block_losses),
    )


def inject_tampered(fed: Federation, frames: Sequence[tuple[str, bytes]], seed: int = 0) -> dict[str, int]:
    """Deliver a bit-flipped copy of each ``(receiver, frame)`` and count the outcome.

    Returns ``{"injected", "auth_failures", "state_changes"}``; a state change
    is any difference in a DO's buffer, pending requests or block losses, or
    in the embedding store.
    """
    rng = np.random.default_rng(seed)
    fed.quiesce()
    before_dos = [_do_state(do) for do in fed.dos]
    before_fail = sum(do.auth_failures for do in fed.dos)
    store = fed.store.copy()
    for receiver, data in frames:
        fed.bus.send("attacker", receiver, tamper(data, rng))
    fed.quiesce()
    after_dos = [_do_state(do) for do in fed.dos]
    changed = sum(a != b for a, b in zip(before_dos, after_dos))
    if not (
        np.array_equal(store.user_matrix, fed.store.user_matrix)
        and np.array_equal(store.item_matrix, fed.store.item_matrix)
    ):
        changed += 1
    return {
        "injected": len(frames),
        "auth_failures": sum(do.auth_failures for do in fed.dos) - before_fail,
        "state_changes": changed,
    }


def sample_interaction_frames(log: MessageLog, n: int, seed: int = 0) -> list[tuple[str, bytes]]:
    recs = [r for r in log.records if r.kind == KIND_INTERACTION]
    rng = np.random.default_rng(seed)
    picks = rng.choice(len(recs), size=min(n, len(recs)), replace=False)
    return [(recs[k].receiver, recs[k].payload) for k in sorted(picks)]

