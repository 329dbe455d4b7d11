"""Binary encodings for everything that crosses the bus.

Frame: kind (u8) | payload length (u32 BE) | payload. Integers are big-endian,
floats are IEEE-754 binary64 big-endian. See PROTOCOL.md for the layouts.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from drift.model import GradientBundle
from drift.secure_channel import EncryptedInteraction

KIND_INTERACTION = 0x01
KIND_REPR_REQUEST = 0x02
KIND_REPR_REPLY = 0x03
KIND_GRADIENT_BUNDLE = 0x04
KIND_NAMES = {
    KIND_INTERACTION: "interaction",
    KIND_REPR_REQUEST: "repr-request",
    KIND_REPR_REPLY: "repr-reply",
    KIND_GRADIENT_BUNDLE: "gradient-bundle",
}

STATUS_OK = 0
STATUS_ERROR = 1

_FRAME = struct.Struct(">BI")
_REQ = struct.Struct(">IIII")  # do_id, request_id, n_users, n_items
_REPLY = struct.Struct(">IIBQIII")  # do_id, request_id, status, snapshot, dim, n_users, n_items
_BUNDLE = struct.Struct(">IIII")  # do_id, dim, n_user_grads, n_item_grads
_U32 = np.dtype(">u4")
_F64 = np.dtype(">f8")


class ProtocolError(Exception):
    pass


@dataclass
class RepresentationRequest:
    do_id: int
    request_id: int
    user_ids: np.ndarray
    item_ids: np.ndarray


@dataclass
class RepresentationReply:
    do_id: int
    request_id: int
    status: int
    snapshot: int
    user_ids: np.ndarray
    item_ids: np.ndarray
    user_rows: np.ndarray
    item_rows: np.ndarray

    @property
    def ok(self) -> bool:
        return self.status == STATUS_OK


def frame(kind: int, payload: bytes) -> bytes:
    return _FRAME.pack(kind, len(payload)) + payload


def unframe(raw: bytes) -> tuple[int, bytes]:
    if len(raw) < _FRAME.size:
        raise ProtocolError("frame shorter than header")
    kind, length = _FRAME.unpack_from(raw)
    payload = raw[_FRAME.size:]
    if len(payload) != length:
        raise ProtocolError(f"length prefix {length} != payload size {len(payload)}")
    if kind not in KIND_NAMES:
        raise ProtocolError(f"unknown message kind 0x{kind:02x}")
    return kind, payload


def _ids(a) -> bytes:
    return np.asarray(a, dtype=np.int64).astype(_U32).tobytes()


def _read(payload: bytes, offset: int, dtype: np.dtype, count: int) -> tuple[np.ndarray, int]:
    end = offset + dtype.itemsize * count
    if end > len(payload):
        raise ProtocolError("payload truncated")
    arr = np.frombuffer(payload, dtype=dtype, count=count, offset=offset)
    return arr.astype(np.int64 if dtype.kind == "u" else float), end


def encode_interaction(msg: EncryptedInteraction) -> bytes:
    return frame(KIND_INTERACTION, msg.to_bytes())


def encode_request(req: RepresentationRequest) -> bytes:
    body = _REQ.pack(req.do_id, req.request_id, len(req.user_ids), len(req.item_ids))
    return frame(KIND_REPR_REQUEST, body + _ids(req.user_ids) + _ids(req.item_ids))


def decode_request(payload: bytes) -> RepresentationRequest:
    if len(payload) < _REQ.size:
        raise ProtocolError("request header truncated")
    do_id, rid, nu, ni = _REQ.unpack_from(payload)
    users, off = _read(payload, _REQ.size, _U32, nu)
    items, off = _read(payload, off, _U32, ni)
    if off != len(payload):
        raise ProtocolError("trailing bytes in request")
    return RepresentationRequest(do_id, rid, users, items)


def encode_reply(rep: RepresentationReply) -> bytes:
    dim = rep.user_rows.shape[1] if rep.user_rows.ndim == 2 else 0
    if rep.item_rows.ndim == 2:
        dim = max(dim, rep.item_rows.shape[1])
    body = _REPLY.pack(
        rep.do_id, rep.request_id, rep.status, rep.snapshot, dim, len(rep.user_ids), len(rep.item_ids)
    )
    parts = [
        body,
        _ids(rep.user_ids),
        _ids(rep.item_ids),
        np.asarray(rep.user_rows, dtype=float).astype(_F64).tobytes(),
        np.asarray(rep.item_rows, dtype=float).astype(_F64).tobytes(),
    ]
    return frame(KIND_REPR_REPLY, b"".join(parts))


def decode_reply(payload: bytes) -> RepresentationReply:
    if len(payload) < _REPLY.size:
        raise ProtocolError("reply header truncated")
    do_id, rid, status, snap, dim, nu, ni = _REPLY.unpack_from(payload)
    users, off = _read(payload, _REPLY.size, _U32, nu)
    items, off = _read(payload, off, _U32, ni)
    urows, off = _read(payload, off, _F64, nu * dim)
    irows, off = _read(payload, off, _F64, ni * dim)
    if off != len(payload):
        raise ProtocolError("trailing bytes in reply")
    return RepresentationReply(
        do_id, rid, status, snap, users, items, urows.reshape(nu, dim), irows.reshape(ni, dim)
    )


def encode_bundle(bundle: GradientBundle) -> bytes:
    dim = bundle.user_grads.shape[1]
    body = _BUNDLE.pack(bundle.do_id, dim, len(bundle.user_ids), len(bundle.item_ids))
    parts = [
        body,
        _ids(bundle.user_ids),
        np.asarray(bundle.user_grads, dtype=float).astype(_F64).tobytes(),
        _ids(bundle.item_ids),
        np.asarray(bundle.item_grads, dtype=float).astype(_F64).tobytes(),
    ]
    return frame(KIND_GRADIENT_BUNDLE, b"".join(parts))


def decode_bundle(payload: bytes) -> GradientBundle:
    if len(payload) < _BUNDLE.size:
        raise ProtocolError("bundle header truncated")
    do_id, dim, nu, ni = _BUNDLE.unpack_from(payload)
    uids, off = _read(payload, _BUNDLE.size, _U32, nu)
    ugrads, off = _read(payload, off, _F64, nu * dim)
    iids, off = _read(payload, off, _U32, ni)
    igrads, off = _read(payload, off, _F64, ni * dim)
    if off != len(payload):
        raise ProtocolError("trailing bytes in bundle")
    return GradientBundle(do_id, uids, ugrads.reshape(nu, dim), iids, igrads.reshape(ni, dim))
