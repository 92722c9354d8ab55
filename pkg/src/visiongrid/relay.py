"""Event relay between workers and the coordinator.

Workers publish ``{session_id, event}`` messages over the same framed-JSON
transport the broker uses; the coordinator-side server hands each message to
a callback.  The publisher keeps a bounded local backlog so a relay outage
never blocks or reorders a running task: events queue up (drop-oldest past
10k) and flush in order once the relay returns.
"""

from __future__ import annotations

import collections
import logging
import socket
import socketserver
import threading

from . import net
from .errors import RelayUnreachable
from .jobs import JobEvent

logger = logging.getLogger(__name__)

DEFAULT_MAX_BUFFER = 10_000


class _RelayConnection(socketserver.BaseRequestHandler):
    def handle(self):
        on_event = self.server.on_event  # type: ignore[attr-defined]
        while True:
            try:
                request = net.recv_frame(self.request)
            except (net.ConnectionClosed, OSError, ValueError):
                return
            if request.get("op") != "emit":
                response = {"ok": False, "error": "UnknownOp"}
            else:
                try:
                    on_event(request["session_id"],
                             JobEvent.from_wire(request["event"]),
                             request.get("dropped_before", 0))
                    response = {"ok": True}
                except Exception as exc:  # noqa: BLE001 - protocol boundary
                    logger.exception("relay event handling failed")
                    response = {"ok": False, "error": "InternalError",
                                "message": str(exc)}
            try:
                net.send_frame(self.request, response)
            except OSError:
                return


class RelayServer:
    """Receives worker events and forwards them to ``on_event``.

    ``on_event(session_id, event, dropped_before)`` runs on the connection's
    thread; per-connection arrival order is preserved, which is what gives
    per-task event ordering end to end.
    """

    def __init__(self, on_event, host: str = "127.0.0.1", port: int = 0):
        self._server = socketserver.ThreadingTCPServer(
            (host, port), _RelayConnection, bind_and_activate=True)
        self._server.daemon_threads = True
        self._server.on_event = on_event  # type: ignore[attr-defined]
        self._thread = threading.Thread(target=self._server.serve_forever,
                                        name="relay-server", daemon=True)

    @property
    def address(self) -> tuple:
        return self._server.server_address

    def start(self):
        self._thread.start()

    def stop(self):
        self._server.shutdown()
        self._server.server_close()


class RelayPublisher:
    """Worker-side publisher with local buffering across relay outages."""

    def __init__(self, address: tuple, max_buffer: int = DEFAULT_MAX_BUFFER,
                 flush_interval: float = 0.1):
        self.address = tuple(address)
        self.max_buffer = max_buffer
        self._flush_interval = flush_interval
        self._lock = threading.Lock()
        self._pending: collections.deque = collections.deque()
        self._dropped_since_flush = 0
        self.total_dropped = 0
        self._sock: socket.socket | None = None
        self._stop = threading.Event()
        self._wake = threading.Event()
        self._thread = threading.Thread(target=self._flush_loop,
                                        name="relay-publisher", daemon=True)

    def start(self):
        self._thread.start()
        return self

    def stop(self, drain_timeout: float = 2.0):
        self.flush(timeout=drain_timeout)
        self._stop.set()
        self._wake.set()
        self._thread.join(timeout=drain_timeout)
        with self._lock:
            if self._sock is not None:
                self._sock.close()
                self._sock = None

    def emit(self, session_id: str, event: JobEvent):
        """Queue one event; never blocks on the network."""
        with self._lock:
            if len(self._pending) >= self.max_buffer:
                self._pending.popleft()
                self._dropped_since_flush += 1
                self.total_dropped += 1
                if self._dropped_since_flush == 1:
                    logger.warning("relay backlog full; dropping oldest events")
            self._pending.append((session_id, event))
        self._wake.set()

    @property
    def backlog(self) -> int:
        with self._lock:
            return len(self._pending)

    def flush(self, timeout: float = 5.0):
        """Best-effort synchronous drain (used at task end and shutdown)."""
        import time
        deadline = time.monotonic() + timeout
        while time.monotonic() < deadline:
            if not self._try_flush_once():
                time.sleep(0.05)
            with self._lock:
                if not self._pending:
                    return True
        return self.backlog == 0

    def _connect_locked(self):
        if self._sock is None:
            try:
                self._sock = socket.create_connection(self.address, timeout=2.0)
                self._sock.settimeout(10.0)
            except OSError as exc:
                raise RelayUnreachable(str(exc)) from exc

    def _try_flush_once(self) -> bool:
        """Send as much of the backlog as possible; False if the link is down."""
        with self._lock:
            if not self._pending:
                return True
            try:
                self._connect_locked()
            except RelayUnreachable:
                return False
            while self._pending:
                session_id, event = self._pending[0]
                body = {"op": "emit", "session_id": session_id,
                        "event": event.to_wire()}
                if self._dropped_since_flush:
                    body["dropped_before"] = self._dropped_since_flush
                try:
                    net.send_frame(self._sock, body)
                    response = net.recv_frame(self._sock)
                except (OSError, net.ConnectionClosed, ValueError):
                    self._sock.close()
                    self._sock = None
                    return False
                if not response.get("ok"):
                    logger.warning("relay rejected event: %s", response)
                self._pending.popleft()
                self._dropped_since_flush = 0
            return True

    def _flush_loop(self):
        while not self._stop.is_set():
            self._wake.wait(timeout=self._flush_interval)
            self._wake.clear()
            if self._stop.is_set():
                break
            self._try_flush_once()
