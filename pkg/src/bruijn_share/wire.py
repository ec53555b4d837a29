"""Message envelope and its canonical JSON codec.

Frames on stream transports are a 4-byte big-endian length followed by the
UTF-8 JSON body with sorted keys.
"""
from __future__ import annotations

import asyncio
import json
import struct
from dataclasses import dataclass, field
from enum import Enum
from typing import Any

MAX_FRAME = 1 << 20
_HEADER = struct.Struct(">I")


class DecodeError(ValueError):
    """Raised for oversize, malformed or unknown frames."""


class MsgType(str, Enum):
    # overlay
    JOIN_REQ = "JOIN_REQ"
    JOIN_REPLY = "JOIN_REPLY"
    JOIN_REFUSE = "JOIN_REFUSE"
    SPLIT_CONFIRM = "SPLIT_CONFIRM"
    KEY_TRANSFER = "KEY_TRANSFER"
    LEAVE_REQ = "LEAVE_REQ"
    LEAVE_ACCEPT = "LEAVE_ACCEPT"
    LEAVE_REFUSE = "LEAVE_REFUSE"
    ZONE_UPDATE = "ZONE_UPDATE"
    KEEP_ALIVE = "KEEP_ALIVE"
    TAKEOVER = "TAKEOVER"
    # dht
    PUT = "PUT"
    GET = "GET"
    GET_REPLY = "GET_REPLY"
    MPUT = "MPUT"
    MGET = "MGET"
    DELIVERY_FAILURE = "DELIVERY_FAILURE"
    # forum
    GOSSIP = "GOSSIP"
    RECON_START = "RECON_START"
    RECON_HASHES = "RECON_HASHES"
    RECON_IDS = "RECON_IDS"
    RECON_FETCH = "RECON_FETCH"
    RECON_RECORDS = "RECON_RECORDS"
    # file transfer
    CHUNK_REQ = "CHUNK_REQ"
    CHUNK_DATA = "CHUNK_DATA"
    # rendezvous
    RDV_REGISTER = "RDV_REGISTER"
    RDV_LIST = "RDV_LIST"
    RDV_PEERS = "RDV_PEERS"
    # local control socket
    CTRL_SEARCH = "CTRL_SEARCH"
    CTRL_GET = "CTRL_GET"
    CTRL_POST = "CTRL_POST"
    CTRL_COMMENT = "CTRL_COMMENT"
    CTRL_ANNOTATE = "CTRL_ANNOTATE"
    CTRL_STATUS = "CTRL_STATUS"
    CTRL_RESULT = "CTRL_RESULT"


PROTOCOL_TYPES = frozenset({
    MsgType.JOIN_REQ, MsgType.JOIN_REPLY, MsgType.JOIN_REFUSE, MsgType.SPLIT_CONFIRM,
    MsgType.KEY_TRANSFER, MsgType.LEAVE_REQ, MsgType.LEAVE_ACCEPT, MsgType.LEAVE_REFUSE,
    MsgType.ZONE_UPDATE, MsgType.TAKEOVER,
})

CONTROL_TYPES = frozenset({
    MsgType.CTRL_SEARCH, MsgType.CTRL_GET, MsgType.CTRL_POST, MsgType.CTRL_COMMENT,
    MsgType.CTRL_ANNOTATE, MsgType.CTRL_STATUS,
})


@dataclass
class Envelope:
    msg_type: MsgType
    sender_address: str
    payload: dict[str, Any] = field(default_factory=dict)
    sender_id: str | None = None
    search_id: str | None = None
    hop_count: int = 0

    def forwarded(self, payload: dict[str, Any] | None = None) -> Envelope:
        """Copy for the next physical hop; the original sender is kept."""
        return Envelope(
            msg_type=self.msg_type,
            sender_address=self.sender_address,
            payload=self.payload if payload is None else payload,
            sender_id=self.sender_id,
            search_id=self.search_id,
            hop_count=self.hop_count + 1,
        )

    def to_dict(self) -> dict[str, Any]:
        return {
            "type": self.msg_type.value,
            "from": self.sender_address,
            "fromId": self.sender_id,
            "searchId": self.search_id,
            "hops": self.hop_count,
            "payload": self.payload,
        }


def encode(env: Envelope) -> bytes:
    """Canonical body bytes (no length prefix)."""
    body = json.dumps(env.to_dict(), sort_keys=True, separators=(",", ":"), ensure_ascii=False).encode("utf-8")
    if len(body) + _HEADER.size > MAX_FRAME:
        raise DecodeError(f"frame of {len(body)} bytes exceeds {MAX_FRAME}")
    return body


def decode(body: bytes) -> Envelope:
    if len(body) + _HEADER.size > MAX_FRAME:
        raise DecodeError(f"frame of {len(body)} bytes exceeds {MAX_FRAME}")
    try:
        raw = json.loads(body.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise DecodeError(f"malformed body: {exc}") from exc
    if not isinstance(raw, dict):
        raise DecodeError("envelope must be a JSON object")
    try:
        msg_type = MsgType(raw.get("type"))
    except ValueError as exc:
        raise DecodeError(f"unknown message type {raw.get('type')!r}") from exc
    sender = raw.get("from")
    payload = raw.get("payload", {})
    hops = raw.get("hops", 0)
    sender_id = raw.get("fromId")
    search_id = raw.get("searchId")
    if not isinstance(sender, str) or not isinstance(payload, dict):
        raise DecodeError("envelope needs a string sender and an object payload")
    if not isinstance(hops, int) or isinstance(hops, bool) or hops < 0:
        raise DecodeError(f"bad hop count {hops!r}")
    if sender_id is not None and not isinstance(sender_id, str):
        raise DecodeError("sender id must be a string")
    if search_id is not None and not isinstance(search_id, str):
        raise DecodeError("search id must be a string")
    return Envelope(
        msg_type=msg_type,
        sender_address=sender,
        payload=payload,
        sender_id=sender_id,
        search_id=search_id,
        hop_count=hops,
    )


def frame(env: Envelope) -> bytes:
    body = encode(env)
    return _HEADER.pack(len(body)) + body


def frame_length(header: bytes) -> int:
    """Validate a 4-byte prefix and return the body length it announces."""
    if len(header) != _HEADER.size:
        raise DecodeError("truncated length prefix")
    (length,) = _HEADER.unpack(header)
    if length + _HEADER.size > MAX_FRAME:
        raise DecodeError(f"announced frame of {length} bytes exceeds {MAX_FRAME}")
    return length


def unframe(data: bytes) -> Envelope:
    """Decode one complete frame (prefix included)."""
    length = frame_length(data[: _HEADER.size])
    body = data[_HEADER.size:]
    if len(body) != length:
        raise DecodeError(f"frame announces {length} bytes, carries {len(body)}")
    return decode(body)


async def read_envelope(reader: asyncio.StreamReader) -> Envelope | None:
    """Read one frame; None on a clean end of stream."""
    try:
        header = await reader.readexactly(_HEADER.size)
    except asyncio.IncompleteReadError as exc:
        if exc.partial:
            raise DecodeError("truncated length prefix") from exc
        return None
    length = frame_length(header)
    try:
        body = await reader.readexactly(length)
    except asyncio.IncompleteReadError as exc:
        raise DecodeError("truncated frame body") from exc
    return decode(body)


async def write_envelope(writer: asyncio.StreamWriter, env: Envelope) -> None:
    writer.write(frame(env))
    await writer.drain()
