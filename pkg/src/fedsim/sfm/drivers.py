"""Pluggable byte transports beneath the framed message layer.

A driver exposes ``connect(address)`` and ``listen(address)``. Connections are
ordered, reliable, bidirectional byte pipes with ``sendall``, ``recv_into`` and
``close``; acceptors hand out server-side connections via ``accept``.
"""

from __future__ import annotations

import collections
import errno
import socket
import threading
import time
from typing import Protocol


class DriverError(Exception):
    pass


class ConnectionClosed(DriverError):
    pass


class ConnectionRefused(DriverError):
    pass


class AddressInUse(DriverError):
    pass


class DriverUnavailable(DriverError):
    pass


class Connection(Protocol):
    def sendall(self, data) -> None: ...

    def recv_into(self, buf: memoryview) -> int: ...

    def close(self) -> None: ...


class Acceptor(Protocol):
    address: str

    def accept(self, timeout: float | None = None) -> Connection | None: ...

    def close(self) -> None: ...


class Driver(Protocol):
    name: str

    def connect(self, address: str, timeout: float | None = None) -> Connection: ...

    def listen(self, address: str) -> Acceptor: ...


# -- in-process ------------------------------------------------------------


class _Pipe:
    """One direction of an in-process connection with bounded buffering."""

    def __init__(self, capacity: int):
        self.capacity = capacity
        self._chunks: collections.deque[bytes] = collections.deque()
        self._offset = 0
        self._buffered = 0
        self._closed = False
        self._cond = threading.Condition()

    def write(self, data) -> None:
        data = bytes(data)
        if not data:
            return
        with self._cond:
            while not self._closed and self._buffered and self._buffered + len(data) > self.capacity:
                self._cond.wait()
            if self._closed:
                raise ConnectionClosed("in-process pipe closed")
            self._chunks.append(data)
            self._buffered += len(data)
            self._cond.notify_all()

    def read_into(self, buf: memoryview) -> int:
        with self._cond:
            while not self._chunks and not self._closed:
                self._cond.wait()
            if not self._chunks:
                return 0
            n = 0
            want = len(buf)
            while self._chunks and n < want:
                head = self._chunks[0]
                take = min(len(head) - self._offset, want - n)
                buf[n : n + take] = head[self._offset : self._offset + take]
                n += take
                self._offset += take
                if self._offset == len(head):
                    self._chunks.popleft()
                    self._offset = 0
            self._buffered -= n
            self._cond.notify_all()
            return n

    def close(self) -> None:
        with self._cond:
            self._closed = True
            self._cond.notify_all()


class InProcConnection:
    def __init__(self, inbound: _Pipe, outbound: _Pipe, peer_name: str):
        self._in = inbound
        self._out = outbound
        self.peer_name = peer_name

    def sendall(self, data) -> None:
        self._out.write(data)

    def recv_into(self, buf: memoryview) -> int:
        return self._in.read_into(buf)

    def close(self) -> None:
        self._out.close()
        self._in.close()


class InProcAcceptor:
    def __init__(self, driver: InProcDriver, address: str):
        self._driver = driver
        self.address = address
        self._pending: collections.deque[InProcConnection] = collections.deque()
        self._cond = threading.Condition()
        self._closed = False

    def _enqueue(self, conn: InProcConnection) -> None:
        with self._cond:
            if self._closed:
                raise ConnectionRefused(self.address)
            self._pending.append(conn)
            self._cond.notify_all()

    def accept(self, timeout: float | None = None) -> InProcConnection | None:
        deadline = None if timeout is None else time.monotonic() + timeout
        with self._cond:
            while not self._pending:
                if self._closed:
                    raise ConnectionClosed(f"acceptor {self.address} closed")
                remaining = None if deadline is None else deadline - time.monotonic()
                if remaining is not None and remaining <= 0:
                    return None
                self._cond.wait(remaining)
            return self._pending.popleft()

    def close(self) -> None:
        with self._cond:
            self._closed = True
            pending = list(self._pending)
            self._pending.clear()
            self._cond.notify_all()
        for conn in pending:
            conn.close()
        self._driver._unregister(self.address, self)


class InProcDriver:
    """Named endpoints inside one process; addresses are arbitrary registry keys."""

    name = "inproc"

    def __init__(self, pipe_capacity: int = 4 << 20):
        self.pipe_capacity = pipe_capacity
        self._endpoints: dict[str, InProcAcceptor] = {}
        self._lock = threading.Lock()

    def listen(self, address: str) -> InProcAcceptor:
        with self._lock:
            if address in self._endpoints:
                raise AddressInUse(address)
            acceptor = InProcAcceptor(self, address)
            self._endpoints[address] = acceptor
            return acceptor

    def connect(self, address: str, timeout: float | None = None) -> InProcConnection:
        with self._lock:
            acceptor = self._endpoints.get(address)
        if acceptor is None:
            raise ConnectionRefused(f"no in-process endpoint named {address!r}")
        a_to_b, b_to_a = _Pipe(self.pipe_capacity), _Pipe(self.pipe_capacity)
        client = InProcConnection(b_to_a, a_to_b, address)
        server = InProcConnection(a_to_b, b_to_a, f"client-of-{address}")
        acceptor._enqueue(server)
        return client

    def _unregister(self, address: str, acceptor: InProcAcceptor) -> None:
        with self._lock:
            if self._endpoints.get(address) is acceptor:
                del self._endpoints[address]


# -- TCP -------------------------------------------------------------------


def parse_host_port(address: str) -> tuple[str, int]:
    host, sep, port = address.rpartition(":")
    if not sep or not port.isdigit():
        raise ValueError(f"TCP address must be host:port, got {address!r}")
    return host or "127.0.0.1", int(port)


class TcpConnection:
    def __init__(self, sock: socket.socket):
        sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        self._sock = sock
        self._closed = False

    def sendall(self, data) -> None:
        try:
            self._sock.sendall(data)
        except OSError as exc:
            raise ConnectionClosed(str(exc)) from exc

    def recv_into(self, buf: memoryview) -> int:
        try:
            return self._sock.recv_into(buf)
        except OSError:
            if self._closed:
                return 0
            raise ConnectionClosed("socket error during recv") from None

    def close(self) -> None:
        if self._closed:
            return
        self._closed = True
        try:
            self._sock.shutdown(socket.SHUT_RDWR)
        except OSError:
            pass
        self._sock.close()


class TcpAcceptor:
    def __init__(self, sock: socket.socket):
        self._sock = sock
        host, port = sock.getsockname()[:2]
        self.address = f"{host}:{port}"
        self._closed = False

    def accept(self, timeout: float | None = None) -> TcpConnection | None:
        self._sock.settimeout(timeout)
        try:
            sock, _ = self._sock.accept()
        except socket.timeout:
            return None
        except OSError as exc:
            raise ConnectionClosed(f"acceptor {self.address} closed") from exc
        sock.settimeout(None)
        return TcpConnection(sock)

    def close(self) -> None:
        if self._closed:
            return
        self._closed = True
        try:
            self._sock.shutdown(socket.SHUT_RDWR)
        except OSError:
            pass
        self._sock.close()


class TcpDriver:
    """Plain TCP stream sockets; addresses are ``host:port`` (port 0 picks one)."""

    name = "tcp"

    def listen(self, address: str) -> TcpAcceptor:
        host, port = parse_host_port(address)
        sock = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
        sock.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
        try:
            sock.bind((host, port))
        except OSError as exc:
            sock.close()
            if exc.errno == errno.EADDRINUSE:
                raise AddressInUse(address) from exc
            raise
        sock.listen(64)
        return TcpAcceptor(sock)

    def connect(self, address: str, timeout: float | None = 10.0) -> TcpConnection:
        host, port = parse_host_port(address)
        try:
            sock = socket.create_connection((host, port), timeout=timeout)
        except (ConnectionRefusedError, socket.timeout) as exc:
            raise ConnectionRefused(address) from exc
        except OSError as exc:
            raise ConnectionRefused(f"{address}: {exc}") from exc
        sock.settimeout(None)
        return TcpConnection(sock)


_DRIVERS: dict[str, Driver] = {"inproc": InProcDriver(), "tcp": TcpDriver()}


def register_driver(driver: Driver) -> None:
    _DRIVERS[driver.name] = driver


def get_driver(name: str) -> Driver:
    try:
        return _DRIVERS[name]
    except KeyError:
        raise DriverUnavailable(f"no driver named {name!r}; have {sorted(_DRIVERS)}") from None


def available_drivers() -> list[str]:
    return sorted(_DRIVERS)
