"""Typed message transport between the three actors A, B and C.

Every cross-party byte in the package rides on a ProtocolMessage.  The
wire format is a length-framed little-endian envelope; payload layouts
are fixed per message kind.  A hub owns one FIFO channel per directed
actor pair, assigns globally monotone message ids at send time, and
records every frame into a transcript.  Transcripts are the audit
surface: boundary checks are declarative predicates evaluated over
them after a protocol run.

Two interchangeable backends exist: in-process queues (default) and
TCP sockets on localhost with one port per directed channel.  Both
move the same encoded frames, so transcripts are byte-identical for
the same seed.
"""

from __future__ import annotations

import json
import socket
import struct
import threading
import time
from collections import deque
from dataclasses import dataclass, field
from enum import IntEnum
from hashlib import sha256
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

ACTORS = ("A", "B", "C")
DEFAULT_TIMEOUT = 30.0


class ProtocolError(RuntimeError):
    """Message order, schema or boundary violation."""


class MessageKind(IntEnum):
    InferredBatch = 1
    GradTerm = 2
    CipherBlock = 3
    PartialSum = 4
    DeltaError = 5
    BlindedIds = 6
    MatrixBlock = 7
    Control = 8


@dataclass(frozen=True)
class ProtocolMessage:
    msg_id: int
    sender: str
    receiver: str
    kind: MessageKind
    payload: bytes
    batch_tag: int | None = None


def encode_message(msg: ProtocolMessage) -> bytes:
    """Frame: u32 length, u64 msg_id, sender, receiver, kind, flags, payload."""
    if msg.sender not in ACTORS or msg.receiver not in ACTORS:
        raise ProtocolError(f"unknown actor in {msg.sender!r}->{msg.receiver!r}")
    flags = 1 if msg.batch_tag is not None else 0
    head = struct.pack("<QBBBB", msg.msg_id, ord(msg.sender),
                       ord(msg.receiver), int(msg.kind), flags)
    if flags:
        head += struct.pack("<I", msg.batch_tag)
    body = head + msg.payload
    return struct.pack("<I", len(body)) + body


def decode_message(frame: bytes) -> ProtocolMessage:
    if len(frame) < 4:
        raise ProtocolError("frame too short")
    (length,) = struct.unpack_from("<I", frame, 0)
    if len(frame) != 4 + length or length < 12:
        raise ProtocolError("frame length mismatch")
    msg_id, sender, receiver, kind, flags = struct.unpack_from("<QBBBB",
                                                               frame, 4)
    offset = 16
    batch_tag = None
    if flags & 1:
        if length < 16:
            raise ProtocolError("frame too short for batch tag")
        (batch_tag,) = struct.unpack_from("<I", frame, offset)
        offset += 4
    try:
        kind = MessageKind(kind)
    except ValueError as exc:
        raise ProtocolError(f"unknown message kind {kind}") from exc
    sender, receiver = chr(sender), chr(receiver)
    if sender not in ACTORS or receiver not in ACTORS:
        raise ProtocolError("unknown actor byte in frame")
    return ProtocolMessage(msg_id, sender, receiver, kind, frame[offset:],
                           batch_tag)


# -- payload layouts ---------------------------------------------------------

def pack_matrix(arr) -> bytes:
    """u32 rows, u32 cols, row-major float64 little-endian."""
    a = np.ascontiguousarray(np.atleast_2d(np.asarray(arr, dtype=np.float64)))
    if a.ndim != 2:
        raise ProtocolError("matrix payloads must be 2-D")
    return struct.pack("<II", a.shape[0], a.shape[1]) + a.astype(
        "<f8").tobytes()


def unpack_matrix(payload: bytes) -> np.ndarray:
    if len(payload) < 8:
        raise ProtocolError("matrix payload too short")
    rows, cols = struct.unpack_from("<II", payload, 0)
    body = payload[8:]
    if len(body) != rows * cols * 8:
        raise ProtocolError("matrix payload size mismatch")
    return np.frombuffer(body, dtype="<f8").reshape(rows, cols).copy()


def pack_ciphers(key_id: str, scale: int, rows: int, cols: int,
                 ciphertexts: Sequence[int]) -> bytes:
    """Cipher block: key id, power-of-two scale exponent, shape, big-endian ints."""
    if scale <= 0 or scale & (scale - 1):
        raise ProtocolError("cipher scale must be a positive power of two")
    if len(ciphertexts) != rows * cols:
        raise ProtocolError("cipher count does not match shape")
    kid = key_id.encode("ascii")
    if len(kid) != 16:
        raise ProtocolError("key id must be 16 ascii chars")
    parts = [kid, struct.pack("<HII", scale.bit_length() - 1, rows, cols)]
    for c in ciphertexts:
        raw = int(c).to_bytes((int(c).bit_length() + 7) // 8 or 1, "big")
        parts.append(struct.pack("<I", len(raw)))
        parts.append(raw)
    return b"".join(parts)


def unpack_ciphers(payload: bytes) -> tuple[str, int, int, int, tuple[int, ...]]:
    if len(payload) < 26:
        raise ProtocolError("cipher payload too short")
    key_id = payload[:16].decode("ascii")
    scale_exp, rows, cols = struct.unpack_from("<HII", payload, 16)
    offset = 26
    cts = []
    for _ in range(rows * cols):
        if offset + 4 > len(payload):
            raise ProtocolError("cipher payload truncated")
        (length,) = struct.unpack_from("<I", payload, offset)
        offset += 4
        if offset + length > len(payload):
            raise ProtocolError("cipher payload truncated")
        cts.append(int.from_bytes(payload[offset:offset + length], "big"))
        offset += length
    if offset != len(payload):
        raise ProtocolError("trailing bytes in cipher payload")
    return key_id, 2 ** scale_exp, rows, cols, tuple(cts)


def pack_tokens(tokens: Iterable[bytes]) -> bytes:
    toks = list(tokens)
    parts = [struct.pack("<I", len(toks))]
    for t in toks:
        parts.append(struct.pack("<I", len(t)))
        parts.append(bytes(t))
    return b"".join(parts)


def unpack_tokens(payload: bytes) -> tuple[bytes, ...]:
    if len(payload) < 4:
        raise ProtocolError("token payload too short")
    (count,) = struct.unpack_from("<I", payload, 0)
    offset = 4
    out = []
    for _ in range(count):
        if offset + 4 > len(payload):
            raise ProtocolError("token payload truncated")
        (length,) = struct.unpack_from("<I", payload, offset)
        offset += 4
        out.append(payload[offset:offset + length])
        offset += length
    if offset != len(payload):
        raise ProtocolError("trailing bytes in token payload")
    return tuple(out)


def pack_json(obj) -> bytes:
    return json.dumps(obj, sort_keys=True).encode("utf-8")


def unpack_json(payload: bytes):
    try:
        return json.loads(payload.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ProtocolError("malformed control payload") from exc


# -- channels ----------------------------------------------------------------

class _LocalChannel:
    """FIFO byte-frame queue with blocking reads."""

    def __init__(self):
        self._frames = deque()
        self._cond = threading.Condition()
        self._closed = False

    def send(self, frame: bytes) -> None:
        with self._cond:
            if self._closed:
                raise ProtocolError("channel closed")
            self._frames.append(frame)
            self._cond.notify()

    def recv(self, timeout: float) -> bytes:
        deadline = time.monotonic() + timeout
        with self._cond:
            while not self._frames:
                if self._closed:
                    raise ProtocolError("channel closed")
                remaining = deadline - time.monotonic()
                if remaining <= 0:
                    raise ProtocolError("recv timed out")
                self._cond.wait(remaining)
            return self._frames.popleft()

    def close(self) -> None:
        with self._cond:
            self._closed = True
            self._cond.notify_all()


class _TcpChannel:
    """One directed channel over a localhost TCP connection."""

    def __init__(self, host: str = "127.0.0.1"):
        listener = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
        listener.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
        listener.bind((host, 0))
        listener.listen(1)
        self.port = listener.getsockname()[1]
        self._write = socket.create_connection(listener.getsockname())
        self._read, _ = listener.accept()
        listener.close()
        # generous buffers: protocol scripts may queue several frames
        # before the peer drains them
        self._write.setsockopt(socket.SOL_SOCKET, socket.SO_SNDBUF, 1 << 22)
        self._read.setsockopt(socket.SOL_SOCKET, socket.SO_RCVBUF, 1 << 22)

    def send(self, frame: bytes) -> None:
        self._write.sendall(frame)

    def recv(self, timeout: float) -> bytes:
        self._read.settimeout(timeout)
        try:
            head = self._read_exact(4)
            (length,) = struct.unpack("<I", head)
            return head + self._read_exact(length)
        except socket.timeout as exc:
            raise ProtocolError("recv timed out") from exc

    def _read_exact(self, count: int) -> bytes:
        chunks = []
        while count:
            chunk = self._read.recv(count)
            if not chunk:
                raise ProtocolError("channel closed")
            chunks.append(chunk)
            count -= len(chunk)
        return b"".join(chunks)

    def close(self) -> None:
        for sock in (self._write, self._read):
            try:
                sock.close()
            except OSError:
                pass


@dataclass
class TranscriptEntry:
    message: ProtocolMessage
    frame: bytes


class Transcript:
    """Ordered record of every message a hub delivered."""

    def __init__(self):
        self.entries: list[TranscriptEntry] = []

    def __len__(self) -> int:
        return len(self.entries)

    def messages(self) -> list[ProtocolMessage]:
        return [e.message for e in self.entries]

    def view(self, actor: str) -> list[ProtocolMessage]:
        """Messages the actor could observe: sent by it or delivered to it."""
        return [e.message for e in self.entries
                if actor in (e.message.sender, e.message.receiver)]

    def received_by(self, actor: str) -> list[ProtocolMessage]:
        return [e.message for e in self.entries if e.message.receiver == actor]

    def frames(self) -> list[bytes]:
        return [e.frame for e in self.entries]

    def to_jsonl(self, path, unsafe_audit: bool = False) -> None:
        """One JSON object per message; payloads are hashed unless audited."""
        with open(path, "w") as fh:
            for e in self.entries:
                m = e.message
                row = {"msg_id": m.msg_id, "sender": m.sender,
                       "receiver": m.receiver, "kind": m.kind.name,
                       "batch_tag": m.batch_tag,
                       "payload_bytes": len(m.payload)}
                if unsafe_audit:
                    row["payload_hex"] = m.payload.hex()
                else:
                    row["payload_sha256"] = sha256(m.payload).hexdigest()
                fh.write(json.dumps(row, sort_keys=True) + "\n")


class Hub:
    """Channel fabric plus transcript recorder for one protocol run.

    ``backend`` is "local" or "tcp"; both move identical frames.
    """

    def __init__(self, actors: Sequence[str] = ACTORS, backend: str = "local",
                 timeout: float = DEFAULT_TIMEOUT, unsafe_audit: bool = False):
        for a in actors:
            if a not in ACTORS:
                raise ProtocolError(f"unknown actor {a!r}")
        if backend not in ("local", "tcp"):
            raise ProtocolError(f"unknown backend {backend!r}")
        self.actors = tuple(actors)
        self.backend = backend
        self.timeout = timeout
        self.unsafe_audit = unsafe_audit
        self.transcript = Transcript()
        self._lock = threading.Lock()
        self._next_id = 0
        self._channels = {}
        for s in self.actors:
            for r in self.actors:
                if s != r:
                    self._channels[(s, r)] = (_LocalChannel() if
                                              backend == "local"
                                              else _TcpChannel())

    def send(self, sender: str, receiver: str, kind: MessageKind,
             payload: bytes, batch_tag: int | None = None) -> ProtocolMessage:
        if (sender, receiver) not in self._channels:
            raise ProtocolError(f"no channel {sender!r}->{receiver!r}")
        with self._lock:
            msg = ProtocolMessage(self._next_id, sender, receiver,
                                  MessageKind(kind), bytes(payload), batch_tag)
            self._next_id += 1
            frame = encode_message(msg)
            self.transcript.entries.append(TranscriptEntry(msg, frame))
        self._channels[(sender, receiver)].send(frame)
        return msg

    def recv(self, receiver: str, sender: str,
             kind: MessageKind | None = None,
             timeout: float | None = None) -> ProtocolMessage:
        if (sender, receiver) not in self._channels:
            raise ProtocolError(f"no channel {sender!r}->{receiver!r}")
        frame = self._channels[(sender, receiver)].recv(
            self.timeout if timeout is None else timeout)
        msg = decode_message(frame)
        if msg.sender != sender or msg.receiver != receiver:
            raise ProtocolError("frame delivered on the wrong channel")
        if kind is not None and msg.kind != kind:
            raise ProtocolError(f"expected {MessageKind(kind).name}, got "
                                f"{msg.kind.name} (msg {msg.msg_id})")
        return msg

    def close(self) -> None:
        for ch in self._channels.values():
            ch.close()


# -- declarative transcript checks -------------------------------------------

Predicate = Callable[[Transcript], str | None]

MATRIX_KINDS = (MessageKind.InferredBatch, MessageKind.GradTerm,
                MessageKind.PartialSum, MessageKind.DeltaError,
                MessageKind.MatrixBlock)


@dataclass
class AssertionReport:
    results: dict[str, str | None] = field(default_factory=dict)

    @property
    def ok(self) -> bool:
        return all(v is None for v in self.results.values())

    def failures(self) -> dict[str, str]:
        return {k: v for k, v in self.results.items() if v is not None}


def transcript_assert(transcript: Transcript,
                      predicates: Mapping[str, Predicate]) -> AssertionReport:
    """Evaluate named predicates; each returns None (pass) or a detail."""
    report = AssertionReport()
    for name, pred in predicates.items():
        report.results[name] = pred(transcript)
    return report


def _matrix_payloads(transcript: Transcript, receiver: str | None,
                     kinds) -> Iterable[tuple[ProtocolMessage, np.ndarray]]:
    for msg in transcript.messages():
        if receiver is not None and msg.receiver != receiver:
            continue
        if msg.kind not in kinds:
            continue
        yield msg, unpack_matrix(msg.payload)


def forbid_plaintext_rows(receiver: str | None, forbidden,
                          kinds=MATRIX_KINDS) -> Predicate:
    """Fail if any float payload row equals (bit-for-bit) a forbidden row."""
    forb = np.atleast_2d(np.asarray(forbidden, dtype=np.float64))

    def pred(transcript: Transcript) -> str | None:
        for msg, mat in _matrix_payloads(transcript, receiver, kinds):
            if mat.shape[1] != forb.shape[1]:
                continue
            hits = (mat[:, None, :] == forb[None, :, :]).all(axis=2)
            if hits.any():
                row = int(np.argwhere(hits)[0][0])
                return (f"msg {msg.msg_id} ({msg.kind.name} -> "
                        f"{msg.receiver}) leaks forbidden row {row}")
        return None

    return pred


def forbid_plaintext_values(receiver: str | None, forbidden,
                            kinds=MATRIX_KINDS) -> Predicate:
    """Fail if any float payload entry equals a forbidden scalar exactly."""
    vals = np.unique(np.asarray(forbidden, dtype=np.float64).ravel())

    def pred(transcript: Transcript) -> str | None:
        for msg, mat in _matrix_payloads(transcript, receiver, kinds):
            if np.isin(mat.ravel(), vals).any():
                return (f"msg {msg.msg_id} ({msg.kind.name} -> "
                        f"{msg.receiver}) carries a forbidden value")
        return None

    return pred


def require_cipher_key(receiver: str, sender: str, key_id: str) -> Predicate:
    """All CipherBlocks on a directed channel must be under one key."""

    def pred(transcript: Transcript) -> str | None:
        for msg in transcript.messages():
            if (msg.kind == MessageKind.CipherBlock and
                    msg.receiver == receiver and msg.sender == sender):
                found = unpack_ciphers(msg.payload)[0]
                if found != key_id:
                    return (f"msg {msg.msg_id} cipher key {found} != "
                            f"expected {key_id}")
        return None

    return pred


def allowed_kinds_only(receiver: str, kinds) -> Predicate:
    """The receiver may only ever see the listed message kinds."""
    allowed = set(kinds)

    def pred(transcript: Transcript) -> str | None:
        for msg in transcript.messages():
            if msg.receiver == receiver and msg.kind not in allowed:
                return (f"msg {msg.msg_id} of kind {msg.kind.name} "
                        f"delivered to {receiver}")
        return None

    return pred
