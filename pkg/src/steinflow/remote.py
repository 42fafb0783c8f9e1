"""Client side of the expert wire protocol.

A remote expert looks exactly like an in-process score model: it serializes
the field, asks the backend for a score (or a velocity, converted back through
the path algebra), and returns the tensor. Score evaluation is pure, so a
timed-out request is retried once on a fresh connection.
"""

from __future__ import annotations

import queue
import socket
import uuid
from dataclasses import dataclass

import numpy as np

from .errors import BackendError, ProtocolError, TransportError
from .flows import NoiseSchedule, score_from_velocity
from .wire import (
    PROTOCOL_VERSION,
    payload_to_tensor,
    read_frame,
    tensor_to_payload,
    write_frame,
)

DEFAULT_TIMEOUT = 10.0


@dataclass(frozen=True)
class Endpoint:
    host: str
    port: int


class BackendConnection:
    """One socket with an exclusive in-flight request and a completed handshake."""

    def __init__(self, endpoint: Endpoint, timeout: float = DEFAULT_TIMEOUT):
        self.endpoint = endpoint
        self.timeout = timeout
        try:
            self._sock = socket.create_connection((endpoint.host, endpoint.port), timeout=timeout)
            self._sock.settimeout(timeout)
            self._stream = self._sock.makefile("rwb")
        except OSError as exc:
            raise TransportError(f"cannot reach {endpoint.host}:{endpoint.port}: {exc}") from exc
        self._handshake()

    def _handshake(self) -> None:
        reply = self.roundtrip({"kind": "hello", "protocol_version": PROTOCOL_VERSION})
        header, _ = reply
        if header.get("status") != "ok":
            raise BackendError(f"handshake refused: {header.get('message', '?')}")
        if header.get("protocol_version") != PROTOCOL_VERSION:
            raise ProtocolError(f"server speaks protocol {header.get('protocol_version')}, need {PROTOCOL_VERSION}")

    def roundtrip(self, header: dict, payload: bytes = b"") -> tuple[dict, bytes]:
        request_id = header.setdefault("request_id", uuid.uuid4().hex)
        try:
            write_frame(self._stream, header, payload)
            reply = read_frame(self._stream)
        except socket.timeout as exc:
            raise TransportError(f"request {request_id} timed out") from exc
        if reply is None:
            raise TransportError("server closed the connection")
        reply_header, reply_payload = reply
        if reply_header.get("request_id") != request_id:
            raise ProtocolError(
                f"response for {reply_header.get('request_id')!r}, expected {request_id!r}"
            )
        return reply_header, reply_payload

    def close(self) -> None:
        try:
            self._stream.close()
            self._sock.close()
        except OSError:
            pass


class ConnectionPool:
    """Reusable connections, one in-flight request per connection."""

    def __init__(self, endpoint: Endpoint, timeout: float = DEFAULT_TIMEOUT):
        self.endpoint = endpoint
        self.timeout = timeout
        self._idle: queue.SimpleQueue[BackendConnection] = queue.SimpleQueue()

    def acquire(self) -> BackendConnection:
        try:
            return self._idle.get_nowait()
        except queue.Empty:
            return BackendConnection(self.endpoint, self.timeout)

    def release(self, conn: BackendConnection) -> None:
        self._idle.put(conn)

    def close(self) -> None:
        while True:
            try:
                self._idle.get_nowait().close()
            except queue.Empty:
                return


def _score_request(x: np.ndarray, tau: float, conditioning: str, kind: str) -> tuple[dict, bytes]:
    header = {
        "protocol_version": PROTOCOL_VERSION,
        "kind": kind,
        "tau": float(tau),
        "shape": [int(d) for d in x.shape],
        "conditioning": conditioning,
    }
    return header, tensor_to_payload(x)


def _decode_score(
    reply: tuple[dict, bytes], x: np.ndarray, tau: float, kind: str, sched: NoiseSchedule
) -> np.ndarray:
    header, payload = reply
    if header.get("status") == "error":
        raise BackendError(header.get("message", "backend error"))
    if header.get("status") != "ok":
        raise ProtocolError(f"unknown response status {header.get('status')!r}")
    if tuple(header.get("shape", ())) != x.shape:
        raise ProtocolError(f"response shape {header.get('shape')} does not match request {x.shape}")
    tensor = payload_to_tensor(payload, x.shape)
    if kind == "velocity":
        return score_from_velocity(x, tensor, tau, sched)
    return tensor


class RemoteExpert:
    """Score model served by an external process over the wire protocol."""

    def __init__(
        self,
        endpoint: Endpoint,
        conditioning: str = "",
        kind: str = "score",
        name: str = "remote",
        timeout: float = DEFAULT_TIMEOUT,
    ):
        if kind not in ("score", "velocity"):
            raise ProtocolError(f"unsupported request kind {kind!r}")
        self.endpoint = endpoint
        self.conditioning = conditioning
        self.kind = kind
        self.name = name
        self.pool = ConnectionPool(endpoint, timeout)

    def score(self, x: np.ndarray, tau: float, sched: NoiseSchedule) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        if x.ndim == 5:  # ensemble batch: one request per particle
            return np.stack([self.score(p, tau, sched) for p in x])
        header, payload = _score_request(x, tau, self.conditioning, self.kind)
        conn = self.pool.acquire()
        try:
            try:
                reply = conn.roundtrip(dict(header), payload)
            except TransportError:
                conn.close()
                conn = BackendConnection(self.endpoint, self.pool.timeout)  # one retry
                reply = conn.roundtrip(dict(header), payload)
            self.pool.release(conn)
        except BaseException:
            conn.close()
            raise
        return _decode_score(reply, x, tau, self.kind, sched)

    def close(self) -> None:
        self.pool.close()


def remote_score(
    endpoint: Endpoint,
    x: np.ndarray,
    tau: float,
    conditioning: str = "",
    sched: NoiseSchedule | None = None,
    kind: str = "score",
    timeout: float = DEFAULT_TIMEOUT,
) -> np.ndarray:
    """One-shot remote score evaluation over a fresh connection."""
    expert = RemoteExpert(endpoint, conditioning, kind, timeout=timeout)
    try:
        return expert.score(x, tau, sched or NoiseSchedule())
    finally:
        expert.close()
