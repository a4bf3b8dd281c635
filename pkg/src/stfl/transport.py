"""Request/response transports between the host and one party.

The host owns a :class:`Channel` per party. A party is any callable that maps
an incoming :class:`ProtocolMessage` to its reply. Every exchange goes through
the binary framing in :mod:`stfl.messages`, including the in-process
transport, so tests exercise the wire format on every call.
"""

from __future__ import annotations

import logging
import socket
import socketserver
import threading
from typing import Callable, Collection, List, Optional, Tuple

from .messages import (
    HEADER_SIZE,
    HOST_ID,
    Control,
    MessageType,
    Payload,
    ProtocolError,
    ProtocolMessage,
    parse_header,
)

log = logging.getLogger(__name__)

Handler = Callable[[ProtocolMessage], ProtocolMessage]
Record = Tuple[str, ProtocolMessage]


class FrameEndpoint:
    """Party-side frame processor: decode, order-check, dispatch, encode."""

    def __init__(self, handler: Handler, allowed: Optional[Collection[MessageType]] = None):
        self.handler = handler
        self.allowed = frozenset(allowed) if allowed is not None else None
        self._last_seq = 0
        self._lock = threading.Lock()

    def process(self, frame: bytes) -> bytes:
        with self._lock:
            msg = ProtocolMessage.decode(frame)
            if msg.seq != self._last_seq + 1:
                reply = _abort(msg, f"sequence violation: expected {self._last_seq + 1}, got {msg.seq}")
                return reply.encode()
            self._last_seq = msg.seq
            if self.allowed is not None and msg.type not in self.allowed:
                return _abort(msg, f"message type {msg.type.name} is not part of this protocol").encode()
            try:
                reply = self.handler(msg)
            except Exception as exc:  # reported back to the requester
                log.debug("handler failed on %s", msg.type.name, exc_info=True)
                reply = _abort(msg, f"{type(exc).__name__}: {exc}")
            reply.seq = msg.seq
            return reply.encode()


def _abort(msg: ProtocolMessage, text: str) -> ProtocolMessage:
    return ProtocolMessage(0xFFFF, MessageType.ABORT, Control(1, text), msg.seq)


class Channel:
    """Host-side link to a single party."""

    def __init__(self, local_id: int = HOST_ID, record: bool = False):
        self.local_id = local_id
        self._seq = 0
        self.records: Optional[List[Record]] = [] if record else None
        self.bytes_sent = 0
        self.bytes_received = 0

    def _exchange(self, frame: bytes) -> bytes:
        raise NotImplementedError

    def request(self, mtype: MessageType, payload: Payload) -> ProtocolMessage:
        self._seq += 1
        msg = ProtocolMessage(self.local_id, mtype, payload, self._seq)
        frame = msg.encode()
        reply_frame = self._exchange(frame)
        self.bytes_sent += len(frame)
        self.bytes_received += len(reply_frame)
        reply = ProtocolMessage.decode(reply_frame)
        if self.records is not None:
            self.records.append(("sent", ProtocolMessage.decode(frame)))
            self.records.append(("received", reply))
        if reply.seq != msg.seq:
            raise ProtocolError(f"reply sequence {reply.seq} does not match request {msg.seq}")
        if reply.type is MessageType.ABORT:
            raise ProtocolError(f"peer aborted: {reply.payload.text}")
        return reply

    def close(self) -> None:
        pass


class InProcessChannel(Channel):
    def __init__(self, handler: Handler, allowed: Optional[Collection[MessageType]] = None,
                 local_id: int = HOST_ID, record: bool = False):
        super().__init__(local_id, record)
        self.endpoint = FrameEndpoint(handler, allowed)

    def _exchange(self, frame: bytes) -> bytes:
        return self.endpoint.process(frame)


def _recv_exact(sock: socket.socket, n: int) -> bytes:
    chunks = bytearray()
    while len(chunks) < n:
        part = sock.recv(n - len(chunks))
        if not part:
            raise ConnectionError("connection closed mid-frame")
        chunks += part
    return bytes(chunks)


def read_frame(sock: socket.socket) -> bytes:
    header = _recv_exact(sock, HEADER_SIZE)
    length = parse_header(header)[-1]
    return header + _recv_exact(sock, length)


class TcpChannel(Channel):
    def __init__(self, address: Tuple[str, int], local_id: int = HOST_ID,
                 record: bool = False, timeout: float = 60.0):
        super().__init__(local_id, record)
        self.sock = socket.create_connection(address, timeout=timeout)

    def _exchange(self, frame: bytes) -> bytes:
        self.sock.sendall(frame)
        return read_frame(self.sock)

    def close(self) -> None:
        try:
            self.sock.close()
        except OSError:
            pass


class _FrameHandler(socketserver.BaseRequestHandler):
    def handle(self) -> None:
        endpoint: FrameEndpoint = self.server.endpoint  # type: ignore[attr-defined]
        while True:
            try:
                frame = read_frame(self.request)
            except (ConnectionError, OSError):
                return
            self.request.sendall(endpoint.process(frame))


class _Server(socketserver.ThreadingTCPServer):
    allow_reuse_address = True
    daemon_threads = True


class TcpPartyServer:
    """Serves one party's handler on a TCP port in a background thread."""

    def __init__(self, handler: Handler, allowed: Optional[Collection[MessageType]] = None,
                 host: str = "127.0.0.1", port: int = 0):
        self._server = _Server((host, port), _FrameHandler)
        self._server.endpoint = FrameEndpoint(handler, allowed)  # type: ignore[attr-defined]
        self._thread = threading.Thread(target=self._server.serve_forever, daemon=True)
        self._thread.start()

    @property
    def address(self) -> Tuple[str, int]:
        return self._server.server_address[:2]

    def close(self) -> None:
        self._server.shutdown()
        self._server.server_close()
        self._thread.join(timeout=5)

    def __enter__(self) -> "TcpPartyServer":
        return self

    def __exit__(self, *exc) -> None:
        self.close()


def connect(handler: Handler, transport: str = "in-process",
            allowed: Optional[Collection[MessageType]] = None,
            record: bool = False) -> Tuple[Channel, Optional[TcpPartyServer]]:
    """Wire a party handler to a fresh host-side channel."""
    if transport == "in-process":
        return InProcessChannel(handler, allowed, record=record), None
    if transport == "tcp":
        server = TcpPartyServer(handler, allowed)
        return TcpChannel(server.address, record=record), server
    raise ValueError(f"unknown transport {transport!r}")
