"""Wire protocol for live and mock deployments.

Control plane: line-delimited messages over a byte stream, each line one
JSON object with a ``type`` field.  The simulator bypasses this and calls
the manager in-process; live deployments speak exactly these frames.
Connection close without deregistration is treated as a preemption.

Pull sessions (instance -> agent) carry weights as tagged length-prefixed
frames: 1-byte kind (``W`` weight shard, ``D`` done) + u32 big-endian payload
length + payload.  The done payload is a JSON object reporting version and
total bytes.
"""
from __future__ import annotations

import json
import struct
from typing import IO, Iterator


class ProtocolError(ValueError):
    pass


# type -> required fields beyond "type"; senders may add more (e.g. a status
# message carries no instance_id because the connection identifies it)
INSTANCE_TO_MANAGER = {
    "register": ("instance_id", "gpu_count"),
    "status": ("m_pending", "m_exec", "weight_version"),
    "token": ("request_id", "token_id"),
    "complete": ("request_id",),
}
MANAGER_TO_INSTANCE = {
    "generate": ("request_id", "prompt_tokens", "prefix_tokens"),
    "cancel": ("request_id",),
    "pull_weights": ("version", "agent_endpoint"),
}
MESSAGE_FIELDS = {**INSTANCE_TO_MANAGER, **MANAGER_TO_INSTANCE}


def encode_message(message: dict) -> bytes:
    validate_message(message)
    return (json.dumps(message, sort_keys=True, separators=(",", ":")) + "\n").encode()


def decode_line(line: bytes | str) -> dict:
    if isinstance(line, bytes):
        line = line.decode()
    try:
        message = json.loads(line)
    except json.JSONDecodeError as exc:
        raise ProtocolError(f"malformed message: {exc}") from exc
    if not isinstance(message, dict):
        raise ProtocolError(f"expected JSON object, got {type(message).__name__}")
    validate_message(message)
    return message


def validate_message(message: dict) -> None:
    kind = message.get("type")
    if kind not in MESSAGE_FIELDS:
        raise ProtocolError(f"unknown message type: {kind!r}")
    missing = [f for f in MESSAGE_FIELDS[kind] if f not in message]
    if missing:
        raise ProtocolError(f"{kind}: missing fields {missing}")


def iter_messages(stream: IO[bytes]) -> Iterator[dict]:
    for line in stream:
        if line.strip():
            yield decode_line(line)


# Message builders used by the manager side.

def msg_generate(request_id: str, prompt_tokens: list[int], prefix_tokens: list[int]) -> dict:
    return {
        "type": "generate",
        "request_id": request_id,
        "prompt_tokens": prompt_tokens,
        "prefix_tokens": prefix_tokens,
    }


def msg_cancel(request_id: str) -> dict:
    return {"type": "cancel", "request_id": request_id}


def msg_pull_weights(version: int, agent_endpoint: str) -> dict:
    return {"type": "pull_weights", "version": version, "agent_endpoint": agent_endpoint}


# Pull-session framing.

_FRAME_HEADER = struct.Struct(">cI")
SHARD_KIND = b"W"
DONE_KIND = b"D"


def write_pull_request(stream: IO[bytes], version: int) -> None:
    stream.write((json.dumps({"type": "pull", "version": version}) + "\n").encode())


def read_pull_request(stream: IO[bytes]) -> int:
    line = stream.readline()
    message = json.loads(line)
    if message.get("type") != "pull" or "version" not in message:
        raise ProtocolError(f"bad pull request: {message!r}")
    return message["version"]


def write_shard(stream: IO[bytes], payload: bytes) -> None:
    stream.write(_FRAME_HEADER.pack(SHARD_KIND, len(payload)))
    stream.write(payload)


def write_done(stream: IO[bytes], version: int, total_bytes: int) -> None:
    payload = json.dumps(
        {"type": "done", "version": version, "bytes": total_bytes}, sort_keys=True
    ).encode()
    stream.write(_FRAME_HEADER.pack(DONE_KIND, len(payload)))
    stream.write(payload)


def read_frames(stream: IO[bytes]) -> Iterator[tuple[bytes, bytes]]:
    """Yield (kind, payload) frames until the done frame (inclusive) or EOF."""
    while True:
        header = stream.read(_FRAME_HEADER.size)
        if not header:
            return
        if len(header) < _FRAME_HEADER.size:
            raise ProtocolError("truncated frame header")
        kind, length = _FRAME_HEADER.unpack(header)
        payload = stream.read(length)
        if len(payload) < length:
            raise ProtocolError("truncated frame payload")
        yield kind, payload
        if kind == DONE_KIND:
            return
        if kind != SHARD_KIND:
            raise ProtocolError(f"unknown frame kind: {kind!r}")


def receive_weights(stream: IO[bytes]) -> tuple[int, bytes]:
    """Consume a full pull session; returns (version, weight bytes)."""
    chunks: list[bytes] = []
    done: dict | None = None
    for kind, payload in read_frames(stream):
        if kind == SHARD_KIND:
            chunks.append(payload)
        else:
            done = json.loads(payload)
    if done is None:
        raise ProtocolError("stream ended before done frame")
    blob = b"".join(chunks)
    if done["bytes"] != len(blob):
        raise ProtocolError(f"byte count mismatch: {done['bytes']} != {len(blob)}")
    return done["version"], blob
