"""Transports carrying protocol frames.

The protocol only needs a reliable ordered byte stream. Two are provided:
a TCP socket (deployment) and a synchronous in-process channel that feeds
encoded frames straight into a worker core (tests, sweeps). Both run the
same handshake and the same byte-level codec.
"""

from __future__ import annotations

import socket

from .errors import TransportError, VersionMismatchError, WorkerFault
from .protocol import (
    HEADER_LEN,
    MAGIC,
    PROTOCOL_VERSION,
    ErrorMessage,
    Message,
    decode_exactly_one,
    encode,
)
from .wire import Reader


class Session:
    """One request/response exchange in flight at a time."""

    def request(self, msg: Message) -> Message:
        raise NotImplementedError

    def close(self) -> None:
        pass

    def checked_request(self, msg: Message) -> Message:
        """request() that converts worker Error responses into WorkerFault."""
        reply = self.request(msg)
        if isinstance(reply, ErrorMessage):
            raise WorkerFault(reply.code, reply.text)
        return reply


def _recv_exact(sock: socket.socket, n: int) -> bytes:
    chunks = []
    got = 0
    while got < n:
        try:
            chunk = sock.recv(n - got)
        except OSError as exc:
            raise TransportError(str(exc)) from exc
        if not chunk:
            raise TransportError("connection closed mid-frame")
        chunks.append(chunk)
        got += len(chunk)
    return b"".join(chunks)


def read_frame(sock: socket.socket) -> bytes:
    header = _recv_exact(sock, HEADER_LEN)
    r = Reader(header)
    r.take(4)
    r.u8()
    ln = r.u64()
    return header + _recv_exact(sock, ln)


class TcpSession(Session):
    def __init__(self, host: str, port: int, timeout: float = 30.0):
        try:
            self.sock = socket.create_connection((host, port), timeout=timeout)
        except OSError as exc:
            raise TransportError(f"cannot connect to {host}:{port}: {exc}") from exc
        self._handshake()

    def _handshake(self) -> None:
        try:
            self.sock.sendall(MAGIC + bytes([PROTOCOL_VERSION]))
        except OSError as exc:
            raise TransportError(str(exc)) from exc
        greeting = _recv_exact(self.sock, 5)
        if greeting[:4] != MAGIC:
            raise VersionMismatchError("peer is not speaking this protocol")
        if greeting[4] != PROTOCOL_VERSION:
            self.sock.close()
            raise VersionMismatchError(
                f"peer version {greeting[4]}, ours {PROTOCOL_VERSION}"
            )

    def request(self, msg: Message) -> Message:
        try:
            self.sock.sendall(encode(msg))
        except OSError as exc:
            raise TransportError(str(exc)) from exc
        return decode_exactly_one(read_frame(self.sock))

    def close(self) -> None:
        try:
            self.sock.close()
        except OSError:
            pass


class DirectSession(Session):
    """In-process loopback: frames still cross the byte codec both ways."""

    def __init__(self, worker_core, version: int = PROTOCOL_VERSION):
        if version != PROTOCOL_VERSION:
            raise VersionMismatchError(f"peer version {version}, ours {PROTOCOL_VERSION}")
        self.core = worker_core

    def request(self, msg: Message) -> Message:
        reply_frame = self.core.handle_frame(encode(msg))
        return decode_exactly_one(reply_frame)


def connect(endpoint: str, timeout: float = 30.0) -> TcpSession:
    """endpoint is "host:port"."""
    host, _, port = endpoint.rpartition(":")
    if not host:
        raise TransportError(f"bad endpoint {endpoint!r}, want host:port")
    return TcpSession(host, int(port), timeout=timeout)
