"""Real-socket transport: one frame out, one frame back, per request.

Clients open a fresh connection per call (requests are small and rare at
desk scale; connection reuse is not worth its failure modes here). The
server side keeps a connection open and answers frames until the client
closes it, one handler thread per connection.
"""

from __future__ import annotations

import errno
import socket
import threading
from typing import Callable, Optional

from . import wire
from ..errors import BadFrame, ConnectionRefused, FrameTooLarge, MgError, PortClash, Timeout

DEFAULT_TIMEOUT_MS = 30_000


def split_address(address: str):
    host, _, port = address.rpartition(":")
    if not host or not port.isdigit():
        raise ConnectionRefused(f"bad address {address!r}, want host:port")
    return host, int(port)


class TcpTransport:
    concurrent = True

    def __init__(self, default_timeout_ms: int = DEFAULT_TIMEOUT_MS):
        self.default_timeout_ms = default_timeout_ms

    def call(self, address: str, request: dict, timeout_ms: Optional[int] = None) -> dict:
        host, port = split_address(address)
        timeout_s = (timeout_ms or self.default_timeout_ms) / 1000.0
        try:
            sock = socket.create_connection((host, port), timeout=timeout_s)
        except socket.timeout:
            raise Timeout(f"connecting to {address}") from None
        except OSError as exc:
            raise ConnectionRefused(f"{address}: {exc}") from None
        try:
            sock.settimeout(timeout_s)
            wire.send_frame(sock, request)
            response = wire.recv_frame(sock)
        except socket.timeout:
            raise Timeout(f"waiting on {address}") from None
        except MgError:
            raise
        except OSError as exc:
            raise ConnectionRefused(f"{address}: {exc}") from None
        finally:
            sock.close()
        if response is None:
            raise ConnectionRefused(f"{address} closed the connection mid-call")
        return response


class Server:
    """Threaded frame server bound to one listen address."""

    def __init__(self, handler: Callable[[dict], dict], listen: str):
        self.handler = handler
        self.listen = listen
        self._stop = threading.Event()
        self._thread: Optional[threading.Thread] = None
        host, port = split_address(listen)
        self._sock = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
        self._sock.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
        try:
            self._sock.bind((host, port))
        except OSError as exc:
            self._sock.close()
            if exc.errno == errno.EADDRINUSE:
                raise PortClash(f"{listen} is already bound") from None
            raise
        self._sock.listen(32)
        self.port = self._sock.getsockname()[1]

    def start(self) -> "Server":
        self._thread = threading.Thread(target=self._accept_loop, daemon=True)
        self._thread.start()
        return self

    def stop(self) -> None:
        self._stop.set()
        try:
            self._sock.close()
        except OSError:
            pass
        if self._thread is not None:
            self._thread.join(timeout=5)

    def _accept_loop(self) -> None:
        try:
            self._sock.settimeout(0.2)
        except OSError:
            return  # stop() won the race before the loop began
        while not self._stop.is_set():
            try:
                conn, _addr = self._sock.accept()
            except socket.timeout:
                continue
            except OSError:
                return
            threading.Thread(target=self._serve_connection, args=(conn,),
                             daemon=True).start()

    def _serve_connection(self, conn: socket.socket) -> None:
        with conn:
            conn.settimeout(60)
            while not self._stop.is_set():
                try:
                    request = wire.recv_frame(conn)
                except (BadFrame, FrameTooLarge) as exc:
                    try:
                        wire.send_frame(conn, wire.response_for(exc))
                    except OSError:
                        pass
                    return
                except (socket.timeout, OSError):
                    return
                if request is None:
                    return
                try:
                    response = self.handler(request)
                except Exception as exc:  # handlers answer their own errors
                    response = wire.response_for(exc)
                try:
                    wire.send_frame(conn, response)
                except OSError:
                    return
