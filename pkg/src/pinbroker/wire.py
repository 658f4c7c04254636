"""Canonical message encoding and transports for the five-message flow.

Bodies are canonical JSON: keys sorted, no insignificant whitespace, big
integers as minimal lowercase hex, fixed-width octet strings as full-width
lowercase hex, and the variant selected by a "type" field. Frames are a
4-octet big-endian length prefix followed by the UTF-8 body. Decoding is
strict: anything that does not re-encode to the identical bytes is rejected.
"""

from __future__ import annotations

import json
import queue
import re
import socket
import struct
from dataclasses import dataclass, field
from enum import Enum
from typing import List, Optional, Union

from .attest import PAYLOAD_LEN, AttestationMessage

FRAME_CAP = 64 * 1024
HEADER_LEN = 4
USER_ID_MAX_OCTETS = 64
DEFAULT_TIMEOUT = 30.0

_PARAMS_ID_RE = re.compile(r"[a-z0-9][a-z0-9_-]{0,31}")
_HEX_RE = re.compile(r"[0-9a-f]+")


class WireError(Exception):
    """Base class for wire-level failures."""


class MalformedMessage(WireError):
    """Body failed strict parsing; the session must abort."""


class TransportClosed(WireError):
    """Peer closed, or a read step timed out."""


class FrameTooLarge(WireError):
    """Declared frame length exceeds the 64 KiB cap."""


class AbortReason(str, Enum):
    PAKE_CONFIRM_FAILED = "pake_confirm_failed"
    AUTH_FAILED = "auth_failed"
    MEASUREMENT_MISMATCH = "measurement_mismatch"
    MALFORMED = "malformed"
    TIMEOUT = "timeout"


def validate_user_id(user_id: str) -> str:
    """1-64 UTF-8 octets, no ':' (keeps service tags unambiguous)."""
    if not isinstance(user_id, str) or not user_id:
        raise ValueError("user id must be a nonempty string")
    if ":" in user_id:
        raise ValueError("user id must not contain ':'")
    try:
        encoded = user_id.encode("utf-8")
    except UnicodeEncodeError as exc:
        raise ValueError("user id must be valid UTF-8") from exc
    if len(encoded) > USER_ID_MAX_OCTETS:
        raise ValueError("user id longer than 64 octets")
    return user_id


def _check_commit(value: int) -> int:
    # 0 and 1 are degenerate in every group; full membership is checked by
    # the receiving session, which knows the modulus.
    if not isinstance(value, int) or value < 2:
        raise ValueError("commit must be an integer >= 2")
    return value


def _check_confirm(tag: bytes) -> bytes:
    if len(tag) != 32:
        raise ValueError("confirmation tag must be 32 octets")
    return tag


@dataclass(frozen=True)
class M1:
    user_id: str
    commit: int
    params_id: str

    def __post_init__(self) -> None:
        validate_user_id(self.user_id)
        _check_commit(self.commit)
        if not _PARAMS_ID_RE.fullmatch(self.params_id):
            raise ValueError("bad params_id")


@dataclass(frozen=True)
class M2:
    commit: int

    def __post_init__(self) -> None:
        _check_commit(self.commit)


@dataclass(frozen=True)
class M3:
    confirm: bytes

    def __post_init__(self) -> None:
        _check_confirm(self.confirm)


@dataclass(frozen=True)
class M4:
    confirm: bytes

    def __post_init__(self) -> None:
        _check_confirm(self.confirm)


@dataclass(frozen=True)
class M5:
    attestation: AttestationMessage


@dataclass(frozen=True)
class Abort:
    reason: AbortReason


WireMessage = Union[M1, M2, M3, M4, M5, Abort]

_TYPE_OF = {M1: "m1", M2: "m2", M3: "m3", M4: "m4", M5: "m5", Abort: "abort"}


def message_type(msg: WireMessage) -> str:
    return _TYPE_OF[type(msg)]


def _int_hex(value: int) -> str:
    return format(value, "x")


def encode(msg: WireMessage) -> bytes:
    if isinstance(msg, M1):
        obj = {
            "type": "m1",
            "user_id": msg.user_id,
            "commit": _int_hex(msg.commit),
            "params_id": msg.params_id,
        }
    elif isinstance(msg, M2):
        obj = {"type": "m2", "commit": _int_hex(msg.commit)}
    elif isinstance(msg, M3):
        obj = {"type": "m3", "confirm": msg.confirm.hex()}
    elif isinstance(msg, M4):
        obj = {"type": "m4", "confirm": msg.confirm.hex()}
    elif isinstance(msg, M5):
        obj = {"type": "m5", "attestation": msg.attestation.payload().hex()}
    elif isinstance(msg, Abort):
        obj = {"type": "abort", "reason": msg.reason.value}
    else:
        raise TypeError(f"not a wire message: {type(msg)!r}")
    return json.dumps(obj, sort_keys=True, separators=(",", ":")).encode("utf-8")


def _parse_int_hex(s: str) -> int:
    if not isinstance(s, str) or not _HEX_RE.fullmatch(s):
        raise MalformedMessage("bad integer hex")
    if len(s) > 1 and s[0] == "0":
        raise MalformedMessage("non-minimal integer hex")
    return int(s, 16)


def _parse_octets(s: str, n: int) -> bytes:
    if not isinstance(s, str) or len(s) != 2 * n or not _HEX_RE.fullmatch(s):
        raise MalformedMessage(f"expected {2 * n} hex chars")
    return bytes.fromhex(s)


_FIELDS = {
    "m1": {"type", "user_id", "commit", "params_id"},
    "m2": {"type", "commit"},
    "m3": {"type", "confirm"},
    "m4": {"type", "confirm"},
    "m5": {"type", "attestation"},
    "abort": {"type", "reason"},
}


def decode(data: bytes) -> WireMessage:
    """Strict inverse of encode(); rejects anything non-canonical."""
    try:
        obj = json.loads(data.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise MalformedMessage(f"unparseable body: {exc}") from exc
    if not isinstance(obj, dict):
        raise MalformedMessage("body is not an object")
    mtype = obj.get("type")
    if mtype not in _FIELDS:
        raise MalformedMessage(f"unknown message type {mtype!r}")
    if set(obj) != _FIELDS[mtype]:
        raise MalformedMessage("unexpected field set")
    try:
        if mtype == "m1":
            msg: WireMessage = M1(
                user_id=obj["user_id"],
                commit=_parse_int_hex(obj["commit"]),
                params_id=obj["params_id"],
            )
        elif mtype == "m2":
            msg = M2(commit=_parse_int_hex(obj["commit"]))
        elif mtype == "m3":
            msg = M3(confirm=_parse_octets(obj["confirm"], 32))
        elif mtype == "m4":
            msg = M4(confirm=_parse_octets(obj["confirm"], 32))
        elif mtype == "m5":
            msg = M5(AttestationMessage.from_payload(_parse_octets(obj["attestation"], PAYLOAD_LEN)))
        else:
            msg = Abort(AbortReason(obj["reason"]))
    except MalformedMessage:
        raise
    except (ValueError, TypeError) as exc:
        raise MalformedMessage(str(exc)) from exc
    if encode(msg) != data:
        raise MalformedMessage("body is not in canonical form")
    return msg


class Direction(str, Enum):
    BROKER_TO_BANK = "broker_to_bank"
    BANK_TO_BROKER = "bank_to_broker"


@dataclass(frozen=True)
class TranscriptEntry:
    direction: Direction
    message: WireMessage
    encoded_length: int


@dataclass
class Transcript:
    """Append-only record of every message that crossed one transport."""

    entries: List[TranscriptEntry] = field(default_factory=list)

    def append(self, direction: Direction, message: WireMessage, encoded_length: int) -> None:
        self.entries.append(TranscriptEntry(direction, message, encoded_length))

    def message_types(self) -> List[str]:
        return [message_type(e.message) for e in self.entries]

    def total_body_bytes(self) -> int:
        return sum(e.encoded_length for e in self.entries)

    def to_jsonl(self) -> str:
        lines = []
        for e in self.entries:
            body = json.loads(encode(e.message).decode("utf-8"))
            lines.append(
                json.dumps(
                    {"dir": e.direction.value, "len": e.encoded_length, "msg": body},
                    sort_keys=True,
                    separators=(",", ":"),
                )
            )
        return "\n".join(lines) + ("\n" if lines else "")


class Transport:
    """Send/recv of wire messages; every message lands in the transcript.

    `side` fixes the direction labels: a "broker" transport records its
    sends as broker_to_bank, a "bank" transport the reverse.
    """

    def __init__(self, side: str, transcript: Optional[Transcript] = None) -> None:
        if side not in ("broker", "bank"):
            raise ValueError("side must be 'broker' or 'bank'")
        self.side = side
        self.transcript = transcript

    @property
    def _out_direction(self) -> Direction:
        return Direction.BROKER_TO_BANK if self.side == "broker" else Direction.BANK_TO_BROKER

    @property
    def _in_direction(self) -> Direction:
        return Direction.BANK_TO_BROKER if self.side == "broker" else Direction.BROKER_TO_BANK

    def send(self, msg: WireMessage) -> None:
        data = encode(msg)
        self._send_bytes(data)
        if self.transcript is not None:
            self.transcript.append(self._out_direction, msg, len(data))

    def recv(self) -> WireMessage:
        data = self._recv_bytes()
        msg = decode(data)
        if self.transcript is not None:
            self.transcript.append(self._in_direction, msg, len(data))
        return msg

    def close(self) -> None:
        raise NotImplementedError

    def _send_bytes(self, data: bytes) -> None:
        raise NotImplementedError

    def _recv_bytes(self) -> bytes:
        raise NotImplementedError


def send(transport: Transport, msg: WireMessage) -> None:
    transport.send(msg)


def recv(transport: Transport) -> WireMessage:
    return transport.recv()


_CLOSE = object()


class InProcTransport(Transport):
    """One end of an in-process channel (paired queues)."""

    def __init__(
        self,
        inbox: "queue.Queue",
        outbox: "queue.Queue",
        side: str,
        transcript: Optional[Transcript] = None,
        timeout: float = DEFAULT_TIMEOUT,
    ) -> None:
        super().__init__(side, transcript)
        self._inbox = inbox
        self._outbox = outbox
        self._timeout = timeout
        self._closed = False

    def _send_bytes(self, data: bytes) -> None:
        if self._closed:
            raise TransportClosed("transport closed")
        self._outbox.put(data)

    def _recv_bytes(self) -> bytes:
        if self._closed:
            raise TransportClosed("transport closed")
        try:
            item = self._inbox.get(timeout=self._timeout)
        except queue.Empty:
            raise TransportClosed("recv timed out")
        if item is _CLOSE:
            raise TransportClosed("peer closed")
        if len(item) > FRAME_CAP:
            raise FrameTooLarge(f"{len(item)} byte frame exceeds cap")
        return item

    def close(self) -> None:
        if not self._closed:
            self._closed = True
            self._outbox.put(_CLOSE)


def inproc_pair(
    broker_transcript: Optional[Transcript] = None,
    bank_transcript: Optional[Transcript] = None,
    timeout: float = DEFAULT_TIMEOUT,
):
    """Connected (broker_end, bank_end) in-process transports."""
    a: "queue.Queue" = queue.Queue()
    b: "queue.Queue" = queue.Queue()
    broker_end = InProcTransport(a, b, "broker", broker_transcript, timeout)
    bank_end = InProcTransport(b, a, "bank", bank_transcript, timeout)
    return broker_end, bank_end


class TcpTransport(Transport):
    """Length-prefixed framing over a connected socket."""

    def __init__(
        self,
        sock: socket.socket,
        side: str,
        transcript: Optional[Transcript] = None,
        timeout: float = DEFAULT_TIMEOUT,
    ) -> None:
        super().__init__(side, transcript)
        self._sock = sock
        self._sock.settimeout(timeout)

    def _send_bytes(self, data: bytes) -> None:
        try:
            self._sock.sendall(struct.pack(">I", len(data)) + data)
        except OSError as exc:
            raise TransportClosed(f"send failed: {exc}") from exc

    def _read_exact(self, n: int) -> bytes:
        buf = bytearray()
        while len(buf) < n:
            try:
                chunk = self._sock.recv(n - len(buf))
            except socket.timeout:
                raise TransportClosed("recv timed out")
            except OSError as exc:
                raise TransportClosed(f"recv failed: {exc}") from exc
            if not chunk:
                raise TransportClosed("peer closed")
            buf.extend(chunk)
        return bytes(buf)

    def _recv_bytes(self) -> bytes:
        (length,) = struct.unpack(">I", self._read_exact(HEADER_LEN))
        if length > FRAME_CAP:
            raise FrameTooLarge(f"declared length {length} exceeds cap")
        return self._read_exact(length)

    def close(self) -> None:
        try:
            self._sock.shutdown(socket.SHUT_RDWR)
        except OSError:
            pass
        self._sock.close()


def dial_tcp(
    host: str,
    port: int,
    transcript: Optional[Transcript] = None,
    timeout: float = DEFAULT_TIMEOUT,
) -> TcpTransport:
    sock = socket.create_connection((host, port), timeout=timeout)
    return TcpTransport(sock, "broker", transcript, timeout)
