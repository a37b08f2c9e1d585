"""Length-prefixed frames: u32 big-endian length, one kind byte, JSON payload.

``length`` counts the kind byte plus the payload. An empty payload stands
for the empty document ``{}``. Payload documents carry ``"v"`` (schema
version, default 1); a peer seeing a higher version answers
UnsupportedVersion instead of guessing.
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from enum import IntEnum
from typing import Any

from .errors import InferShareError

MAX_FRAME = 64 * 1024 * 1024
HEADER = struct.Struct(">IB")
PROTOCOL_VERSION = 1


class Kind(IntEnum):
    UPLOAD_MODEL = 0x01
    DELETE_MODEL = 0x02
    LIST_MODELS = 0x03
    GET_STATS = 0x04
    INFER = 0x05
    LOAD_MODEL = 0x06
    EVICT_MODEL = 0x07
    HEARTBEAT = 0x08
    DEMAND_REPORT = 0x09
    REGISTER_WORKER = 0x0A
    OK = 0x80
    ERROR = 0x81


KINDS = frozenset(int(k) for k in Kind)


class ProtocolError(InferShareError):
    pass


class NeedMoreBytes(ProtocolError):
    def __init__(self, n: int):
        super().__init__(f"need {n} more bytes")
        self.n = n


class FrameTooLarge(ProtocolError):
    pass


class UnknownKind(ProtocolError):
    pass


class MalformedPayload(ProtocolError):
    pass


class UnsupportedVersion(ProtocolError):
    pass


@dataclass(frozen=True)
class Frame:
    kind: Kind
    payload: dict

    @property
    def version(self) -> int:
        return self.payload.get("v", PROTOCOL_VERSION)


def encode_payload(payload: dict | None) -> bytes:
    if not payload:
        return b""
    return json.dumps(payload, sort_keys=True, separators=(",", ":"), allow_nan=False).encode()


def encode_frame(kind: int, payload: dict | None = None) -> bytes:
    if int(kind) not in KINDS:
        raise UnknownKind(f"kind 0x{int(kind):02x}")
    body = encode_payload(payload)
    if len(body) + 1 > MAX_FRAME:
        raise FrameTooLarge(f"payload of {len(body)} bytes exceeds {MAX_FRAME - 1}")
    return HEADER.pack(len(body) + 1, int(kind)) + body


def decode_frame(data: bytes | bytearray | memoryview) -> tuple[Frame, int]:
    """Decode the first frame in ``data``; returns it and the bytes consumed."""
    if len(data) < 4:
        raise NeedMoreBytes(4 - len(data))
    (length,) = struct.unpack_from(">I", data, 0)
    if length < 1:
        raise MalformedPayload("frame length must cover the kind byte")
    if length > MAX_FRAME:
        # checked before waiting for the body: never buffer an oversized frame
        raise FrameTooLarge(f"frame length {length} exceeds {MAX_FRAME}")
    total = 4 + length
    if len(data) < total:
        raise NeedMoreBytes(total - len(data))
    kind = data[4]
    if kind not in KINDS:
        raise UnknownKind(f"kind 0x{kind:02x}")
    body = bytes(data[5:total])
    if not body:
        payload: Any = {}
    else:
        try:
            payload = json.loads(body.decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError, RecursionError) as exc:
            raise MalformedPayload(str(exc)) from None
        if not isinstance(payload, dict):
            raise MalformedPayload("payload must be a JSON object")
    v = payload.get("v", PROTOCOL_VERSION)
    if not isinstance(v, int) or isinstance(v, bool):
        raise MalformedPayload("payload version must be an integer")
    if v > PROTOCOL_VERSION:
        raise UnsupportedVersion(f"payload version {v} > {PROTOCOL_VERSION}")
    return Frame(Kind(kind), payload), total


class FrameReader:
    """Incremental decoder for a byte stream."""

    def __init__(self):
        self._buf = bytearray()

    def feed(self, data: bytes) -> list[Frame]:
        self._buf.extend(data)
        frames = []
        while True:
            try:
                frame, used = decode_frame(self._buf)
            except NeedMoreBytes:
                return frames
            del self._buf[:used]
            frames.append(frame)


def error_payload(error: str, message: str = "", **extra) -> dict:
    return {"v": PROTOCOL_VERSION, "error": error, "message": message, **extra}


async def read_frame(reader) -> Frame:
    """Read one frame from an asyncio stream."""
    header = await reader.readexactly(4)
    (length,) = struct.unpack(">I", header)
    if length < 1:
        raise MalformedPayload("frame length must cover the kind byte")
    if length > MAX_FRAME:
        raise FrameTooLarge(f"frame length {length} exceeds {MAX_FRAME}")
    rest = await reader.readexactly(length)
    frame, _ = decode_frame(header + rest)
    return frame


async def write_frame(writer, kind: int, payload: dict | None = None) -> None:
    writer.write(encode_frame(kind, payload))
    await writer.drain()
