"""AES-256-GCM protection of the (user id, item id) part of an interaction.

Wire layout of an encrypted interaction (41 bytes)::

    do_id (u32 BE) | nonce (12 B) | ciphertext+tag (8 + 16 B) | is_positive (1 B)

Plaintext is ``user_id || item_id`` as two u32 BE. The do_id and is_positive
bytes are bound as associated data, so flipping any bit of the frame fails
authentication.
"""
from __future__ import annotations

import itertools
import random
import secrets
import struct
from dataclasses import dataclass
from typing import NamedTuple

from cryptography.exceptions import InvalidTag
from cryptography.hazmat.primitives.ciphers.aead import AESGCM

KEY_BYTES = 32
NONCE_BYTES = 12
TAG_BYTES = 16
PLAINTEXT = struct.Struct(">II")
_DO_ID = struct.Struct(">I")
WIRE_BYTES = 4 + NONCE_BYTES + PLAINTEXT.size + TAG_BYTES + 1
_NONCE_SPACE = 1 << (8 * NONCE_BYTES)


class AuthenticationError(Exception):
    """Frame failed to decrypt: wrong key, tampering, or malformed bytes."""


class NonceExhaustedError(RuntimeError):
    pass


@dataclass(frozen=True)
class DoKey:
    do_id: int
    key_bytes: bytes = b""

    def __post_init__(self):
        if len(self.key_bytes) != KEY_BYTES:
            raise ValueError(f"key must be {KEY_BYTES} bytes")

    def __repr__(self) -> str:
        return f"DoKey(do_id={self.do_id}, key_bytes=<redacted>)"


class EncryptedInteraction(NamedTuple):
    do_id: int
    nonce: bytes
    ciphertext: bytes
    is_positive: bool

    def to_bytes(self) -> bytes:
        return (
            _DO_ID.pack(self.do_id) + self.nonce + self.ciphertext + (b"\x01" if self.is_positive else b"\x00")
        )

    @classmethod
    def from_bytes(cls, raw: bytes) -> "EncryptedInteraction":
        if len(raw) < 4 + NONCE_BYTES + TAG_BYTES + 1:
            raise AuthenticationError("frame too short")
        (do_id,) = _DO_ID.unpack_from(raw)
        flag = raw[-1]
        if flag not in (0, 1):
            raise AuthenticationError("bad is_positive byte")
        return cls(do_id, bytes(raw[4:4 + NONCE_BYTES]), bytes(raw[4 + NONCE_BYTES:-1]), bool(flag))


def gen_key(do_id: int, rng_seed: int | None = None) -> DoKey:
    """Fresh 256-bit key; a seed makes it reproducible (tests and seeded runs only)."""
    if rng_seed is None:
        return DoKey(do_id, secrets.token_bytes(KEY_BYTES))
    return DoKey(do_id, random.Random(f"drift-key:{rng_seed}:{do_id}").randbytes(KEY_BYTES))


def _aad(do_id: int, is_positive: bool) -> bytes:
    return _DO_ID.pack(do_id) + (b"\x01" if is_positive else b"\x00")


class Sealer:
    """Encryption context for one key; owns that key's nonce counter.

    Nonces are a 96-bit big-endian counter starting at ``nonce_start`` (random
    when omitted) and wrapping mod 2**96; reaching the start again is fatal.
    """

    def __init__(self, key: DoKey, nonce_start: int | None = None):
        self.key = key
        self._aead = AESGCM(key.key_bytes)
        self._start = secrets.randbelow(_NONCE_SPACE) if nonce_start is None else nonce_start % _NONCE_SPACE
        self._issued = itertools.count()  # next() is atomic under the GIL
        self._aad = {flag: _aad(key.do_id, flag) for flag in (False, True)}

    def _take_nonce(self) -> bytes:
        used = next(self._issued)
        if used >= _NONCE_SPACE:
            raise NonceExhaustedError(f"nonce space exhausted for DO {self.key.do_id}")
        return ((self._start + used) % _NONCE_SPACE).to_bytes(NONCE_BYTES, "big")

    def seal(self, user_id: int, item_id: int, is_positive: bool) -> EncryptedInteraction:
        nonce = self._take_nonce()
        ct = self._aead.encrypt(nonce, PLAINTEXT.pack(user_id, item_id), self._aad[is_positive])
        return EncryptedInteraction(self.key.do_id, nonce, ct, is_positive)


class Opener:
    def __init__(self, key: DoKey):
        self.key = key
        self._aead = AESGCM(key.key_bytes)
        self._aad = {flag: _aad(key.do_id, flag) for flag in (False, True)}

    def open(self, msg: EncryptedInteraction) -> tuple[int, int]:
        aad = self._aad[msg.is_positive] if msg.do_id == self.key.do_id else _aad(msg.do_id, msg.is_positive)
        try:
            plain = self._aead.decrypt(msg.nonce, msg.ciphertext, aad)
        except InvalidTag as exc:
            raise AuthenticationError(f"authentication failed at DO {self.key.do_id}") from exc
        except ValueError as exc:  # e.g. wrong nonce length
            raise AuthenticationError(str(exc)) from exc
        if len(plain) != PLAINTEXT.size:
            raise AuthenticationError("unexpected plaintext length")
        return PLAINTEXT.unpack(plain)


def encrypt_interaction(
    key: DoKey | Sealer, user_id: int, item_id: int, is_positive: bool
) -> EncryptedInteraction:
    """One-shot helper; pass a :class:`Sealer` to reuse its nonce counter."""
    sealer = key if isinstance(key, Sealer) else Sealer(key)
    return sealer.seal(user_id, item_id, is_positive)


def decrypt_interaction(key: DoKey | Opener, msg: EncryptedInteraction) -> tuple[int, int]:
    opener = key if isinstance(key, Opener) else Opener(key)
    return opener.open(msg)
