"""Length-prefixed tensor frames shared by the backend client and stub server.

Frame layout (see PROTOCOL.md for byte-level examples):

    [4 bytes big-endian uint32: header byte count]
    [UTF-8 JSON header]
    [raw little-endian float32 payload, 4 * prod(shape) bytes]

The payload is present exactly when the header carries a ``shape`` field; its
length is derived from that shape, never transmitted separately. Malformed
input raises ProtocolError; connection-level failures raise TransportError.
"""

from __future__ import annotations

import json
import struct
from typing import BinaryIO

import numpy as np

from .errors import ProtocolError, TransportError

PROTOCOL_VERSION = 1
MAX_HEADER_BYTES = 1 << 20
MAX_ELEMENTS = 1 << 24

_LEN = struct.Struct(">I")


def read_exact(stream: BinaryIO, n: int) -> bytes:
    """Read exactly n bytes; empty stream at a frame boundary returns b''."""
    chunks = []
    got = 0
    while got < n:
        try:
            chunk = stream.read(n - got)
        except OSError as exc:  # timeouts, resets
            raise TransportError(str(exc)) from exc
        if not chunk:
            if got == 0:
                return b""
            raise TransportError(f"connection closed mid-frame ({got}/{n} bytes)")
        chunks.append(chunk)
        got += len(chunk)
    return b"".join(chunks)


def payload_elements(header: dict) -> int:
    """Number of float32 elements implied by the header's shape, 0 if none."""
    shape = header.get("shape")
    if shape is None:
        return 0
    if (
        not isinstance(shape, (list, tuple))
        or len(shape) != 4
        or not all(isinstance(d, int) and d > 0 for d in shape)
    ):
        raise ProtocolError(f"invalid shape field: {shape!r}")
    n = int(np.prod(shape))
    if n > MAX_ELEMENTS:
        raise ProtocolError(f"shape {shape} exceeds the {MAX_ELEMENTS}-element cap")
    return n


def write_frame(stream: BinaryIO, header: dict, payload: bytes = b"") -> None:
    body = json.dumps(header, separators=(",", ":"), sort_keys=True).encode("utf-8")
    if len(body) > MAX_HEADER_BYTES:
        raise ProtocolError(f"header of {len(body)} bytes exceeds cap")
    expected = 4 * payload_elements(header)
    if len(payload) != expected:
        raise ProtocolError(f"payload is {len(payload)} bytes, header implies {expected}")
    try:
        stream.write(_LEN.pack(len(body)))
        stream.write(body)
        if payload:
            stream.write(payload)
        stream.flush()
    except OSError as exc:
        raise TransportError(str(exc)) from exc


def read_frame(stream: BinaryIO) -> tuple[dict, bytes] | None:
    """Read one frame; None on clean end-of-stream.

    The stream stays frame-aligned after a ProtocolError raised here only if
    ``recoverable`` is set on the exception; callers may then keep reading.
    """
    prefix = read_exact(stream, 4)
    if prefix == b"":
        return None
    (length,) = _LEN.unpack(prefix)
    if length == 0 or length > MAX_HEADER_BYTES:
        raise ProtocolError(f"header length {length} outside (0, {MAX_HEADER_BYTES}]")
    body = read_exact(stream, length)
    if len(body) < length:
        raise TransportError("connection closed inside header")
    try:
        header = json.loads(body.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        err = ProtocolError(f"undecodable header: {exc}")
        err.recoverable = True
        raise err
    if not isinstance(header, dict):
        err = ProtocolError("header is not a JSON object")
        err.recoverable = True
        raise err
    n = payload_elements(header)
    payload = b""
    if n:
        payload = read_exact(stream, 4 * n)
        if len(payload) < 4 * n:
            raise TransportError("connection closed inside payload")
    return header, payload


def tensor_to_payload(arr: np.ndarray) -> bytes:
    return np.ascontiguousarray(arr, dtype="<f4").tobytes()


def payload_to_tensor(payload: bytes, shape) -> np.ndarray:
    arr = np.frombuffer(payload, dtype="<f4")
    if arr.size != int(np.prod(shape)):
        raise ProtocolError(f"payload holds {arr.size} floats, shape {shape} expects {int(np.prod(shape))}")
    return arr.reshape(tuple(shape)).astype(np.float64)
