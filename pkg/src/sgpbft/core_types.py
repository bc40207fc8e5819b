"""Message vocabulary shared by the PBFT and SG-PBFT engines.

Canonical encoding
------------------
Every field is written as a one-byte type tag followed by a 4-byte big-endian
length and the payload::

    N                       None
    I <len> <ascii digits>  int
    B <len> <raw>           bytes
    S <len> <utf-8>         str
    L <count> <items...>    tuple / list
    R <len> <o, t, c>       ClientRequest
    M <len> <fields, auth>  nested ProtocolMessage

A message's fields are encoded in declaration order. The bytes covered by an
authenticator are the encoding of every field except ``auth``; nested
messages (pre-prepare bodies, certificates) are encoded *with* their own
tags so the outer authenticator binds them too.
"""

from __future__ import annotations

import hashlib
import hmac
import struct
from dataclasses import dataclass, field
from enum import IntEnum
from functools import cached_property
from typing import Dict, Iterable, Optional, Tuple, Union

NodeId = int
Principal = Union[int, str]  # replica index or client identifier
View = int
SeqNum = int

DIGEST_SIZE = 32
TAG_SIZE = 32

_LEN = struct.Struct(">I")


def _frame(tag: bytes, payload: bytes) -> bytes:
    return tag + _LEN.pack(len(payload)) + payload


def encode_value(value) -> bytes:
    """Canonical, injective encoding of the value types used in messages."""
    if value is None:
        return b"N"
    if isinstance(value, bool):
        raise TypeError("booleans are not part of the message vocabulary")
    if isinstance(value, int):
        return _frame(b"I", str(value).encode("ascii"))
    if isinstance(value, (bytes, bytearray)):
        return _frame(b"B", bytes(value))
    if isinstance(value, str):
        return _frame(b"S", value.encode("utf-8"))
    if isinstance(value, ClientRequest):
        return _frame(b"R", value.encoded)
    if isinstance(value, ProtocolMessage):
        return _frame(b"M", value.encoded)
    if isinstance(value, (tuple, list)):
        return b"L" + _LEN.pack(len(value)) + b"".join(encode_value(v) for v in value)
    raise TypeError(f"cannot encode {type(value).__name__}")


@dataclass(frozen=True)
class ClientRequest:
    """``<REQUEST, o, t, c>``: operation bytes, logical timestamp, client id."""

    o: bytes
    t: int
    c: str

    @property
    def rid(self) -> Tuple[str, int]:
        return (self.c, self.t)

    @cached_property
    def encoded(self) -> bytes:
        return encode_value(self.o) + encode_value(self.t) + encode_value(self.c)


def digest_of(request: ClientRequest) -> bytes:
    return hashlib.sha256(request.encoded).digest()


class Kind(IntEnum):
    REQUEST = 1
    PRE_PREPARE = 2
    PREPARE = 3
    COMMIT = 4
    RESPONSE = 5
    RESULT_BROADCAST = 6
    REPLY = 7
    VIEW_CHANGE = 8


# message kinds counted by the closed-form communication formulas
PROTOCOL_KINDS = frozenset({Kind.PRE_PREPARE, Kind.PREPARE, Kind.COMMIT, Kind.RESPONSE})


@dataclass(frozen=True)
class ProtocolMessage:
    kind: Kind
    view: View
    seq: SeqNum
    digest: bytes
    sender: Principal
    request: Optional[ClientRequest] = None  # REQUEST only
    body: Optional["ProtocolMessage"] = None  # signed REQUEST carried by PRE-PREPARE / RESULT-BROADCAST
    result: Optional[bytes] = None
    cert: Tuple["ProtocolMessage", ...] = ()
    auth: bytes = field(default=b"", compare=True)

    @cached_property
    def signing_bytes(self) -> bytes:
        return b"".join(
            (
                encode_value(int(self.kind)),
                encode_value(self.view),
                encode_value(self.seq),
                encode_value(self.digest),
                encode_value(self.sender),
                encode_value(self.request),
                encode_value(self.body),
                encode_value(self.result),
                encode_value(self.cert),
            )
        )

    @cached_property
    def encoded(self) -> bytes:
        return self.signing_bytes + encode_value(self.auth)

    @property
    def slot(self) -> Tuple[View, SeqNum]:
        return (self.view, self.seq)


def sign(sender_key: bytes, message_bytes: bytes) -> bytes:
    return hmac.digest(sender_key, message_bytes, "sha256")


def verify(sender_key: Optional[bytes], message_bytes: bytes, tag: bytes) -> bool:
    """Check an authenticator. Never raises; a missing key simply fails."""
    try:
        if not sender_key or len(tag) != TAG_SIZE:
            return False
        return hmac.compare_digest(hmac.digest(sender_key, message_bytes, "sha256"), tag)
    except (TypeError, ValueError):
        return False


class KeyTable:
    """Per-principal authenticator keys for one scenario."""

    def __init__(self, keys: Dict[Principal, bytes]):
        self._keys = dict(keys)

    @classmethod
    def generate(cls, principals: Iterable[Principal], seed: int = 0) -> "KeyTable":
        keys = {}
        for p in principals:
            keys[p] = hashlib.sha256(b"sgpbft-key" + encode_value(seed) + encode_value(p)).digest()
        return cls(keys)

    def key(self, principal: Principal) -> Optional[bytes]:
        return self._keys.get(principal)

    def __contains__(self, principal: Principal) -> bool:
        return principal in self._keys

    def sign_message(self, kind: Kind, sender: Principal, view: View = 0, seq: SeqNum = 0,
                     digest: bytes = b"", **extra) -> ProtocolMessage:
        msg = ProtocolMessage(kind, view, seq, digest, sender, **extra)
        key = self._keys.get(sender)
        if key is None:
            raise KeyError(f"no key registered for {sender!r}")
        # auth is excluded from signing_bytes, so setting it after construction
        # leaves the cached encoding of the signed fields valid
        object.__setattr__(msg, "auth", sign(key, msg.signing_bytes))
        return msg

    def verify_message(self, msg: ProtocolMessage) -> bool:
        return verify(self._keys.get(msg.sender), msg.signing_bytes, msg.auth)


def request_message(keys: KeyTable, request: ClientRequest, attempt: int = 0) -> ProtocolMessage:
    """Signed REQUEST from ``request.c``; ``attempt`` distinguishes retransmissions."""
    return keys.sign_message(Kind.REQUEST, request.c, seq=attempt,
                             digest=digest_of(request), request=request)


def valid_request(keys: KeyTable, msg: Optional[ProtocolMessage]) -> bool:
    return (
        msg is not None
        and msg.kind == Kind.REQUEST
        and msg.request is not None
        and msg.sender == msg.request.c
        and msg.digest == digest_of(msg.request)
        and keys.verify_message(msg)
    )


def flip(result: bytes) -> bytes:
    """A result guaranteed to differ from ``result``."""
    if not result:
        return b"\xff"
    return bytes(b ^ 0xFF for b in result)
