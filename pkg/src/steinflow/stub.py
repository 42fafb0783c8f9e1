"""Reference backend: serves analytic expert scores over the wire protocol.

One request is in flight per connection; connections are handled by
independent threads, so concurrent clients get independent answers. Malformed
frames draw an error response and, when the stream is still frame-aligned,
the connection stays open.
"""

from __future__ import annotations

import socketserver
import sys
import threading
from typing import BinaryIO

import numpy as np

from .errors import ProtocolError, TransportError
from .experts import GmmExpert
from .flows import NoiseSchedule, velocity_from_score
from .wire import (
    PROTOCOL_VERSION,
    payload_elements,
    payload_to_tensor,
    read_frame,
    tensor_to_payload,
    write_frame,
)


def _error(request_id, message: str) -> dict:
    return {"request_id": request_id, "status": "error", "message": message}


def handle_request(
    header: dict, payload: bytes, expert: GmmExpert, sched: NoiseSchedule
) -> tuple[dict, bytes]:
    """Pure request handler; shared by the TCP and stdio transports."""
    request_id = header.get("request_id", "unknown")
    version = header.get("protocol_version")
    if version != PROTOCOL_VERSION:
        return _error(request_id, f"unsupported version {version!r}"), b""
    kind = header.get("kind")
    if kind == "hello":
        return {"request_id": request_id, "status": "ok", "protocol_version": PROTOCOL_VERSION}, b""
    if kind not in ("score", "velocity"):
        return _error(request_id, f"unknown request kind {kind!r}"), b""

    tau = header.get("tau")
    if not isinstance(tau, (int, float)) or not np.isfinite(tau):
        return _error(request_id, f"invalid tau {tau!r}"), b""
    try:
        n = payload_elements(header)
        if n == 0:
            return _error(request_id, "score request carries no tensor shape"), b""
        x = payload_to_tensor(payload, header["shape"])
    except ProtocolError as exc:
        return _error(request_id, str(exc)), b""
    if tuple(x.shape) != expert.shape:
        return _error(
            request_id, f"backend serves shape {list(expert.shape)}, request has {header['shape']}"
        ), b""

    try:
        out = expert.score(x, float(tau), sched)
        if kind == "velocity":
            out = velocity_from_score(x, out, float(tau), sched)
    except Exception as exc:  # noqa: BLE001 - report, do not crash the server
        return _error(request_id, f"evaluation failed: {exc}"), b""
    reply = {"request_id": request_id, "status": "ok", "shape": list(out.shape)}
    return reply, tensor_to_payload(out)


def serve_stream(stream_in: BinaryIO, stream_out: BinaryIO, expert: GmmExpert, sched: NoiseSchedule) -> None:
    """Answer frames from a binary stream until it closes or desynchronizes."""
    while True:
        try:
            frame = read_frame(stream_in)
        except ProtocolError as exc:
            try:
                write_frame(stream_out, _error("unknown", str(exc)))
            except TransportError:
                return
            if getattr(exc, "recoverable", False):
                continue
            return
        except TransportError:
            return
        if frame is None:
            return
        header, payload = frame
        reply, reply_payload = handle_request(header, payload, expert, sched)
        try:
            write_frame(stream_out, reply, reply_payload)
        except TransportError:
            return


class StubServer:
    """Threaded TCP stub serving one analytic expert."""

    def __init__(self, expert: GmmExpert, sched: NoiseSchedule | None = None,
                 host: str = "127.0.0.1", port: int = 0):
        self.expert = expert
        self.sched = sched or NoiseSchedule()
        outer = self

        class Handler(socketserver.StreamRequestHandler):
            def handle(self):
                serve_stream(self.rfile, self.wfile, outer.expert, outer.sched)

        class Server(socketserver.ThreadingTCPServer):
            allow_reuse_address = True
            daemon_threads = True

        self._server = Server((host, port), Handler)
        self._thread: threading.Thread | None = None

    @property
    def address(self) -> tuple[str, int]:
        return self._server.server_address[:2]

    def start(self) -> "StubServer":
        self._thread = threading.Thread(target=self._server.serve_forever, daemon=True)
        self._thread.start()
        return self

    def serve_forever(self) -> None:
        self._server.serve_forever()

    def shutdown(self) -> None:
        self._server.shutdown()
        self._server.server_close()
        if self._thread is not None:
            self._thread.join(timeout=5)

    def __enter__(self) -> "StubServer":
        return self.start()

    def __exit__(self, *exc) -> None:
        self.shutdown()


def serve_stdio(expert: GmmExpert, sched: NoiseSchedule | None = None) -> None:
    """Serve requests over stdin/stdout (for subprocess-style backends)."""
    serve_stream(sys.stdin.buffer, sys.stdout.buffer, expert, sched or NoiseSchedule())
