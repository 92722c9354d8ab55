"""Broker wire protocol: length-prefixed JSON frames over TCP.

Request body: ``{"op": ..., "queue": ..., "routing_key": ..., "tag": ...,
"payload": ..., "consumer_id": ..., "timeout_ms": ...}`` with only the
fields the op needs.  Responses carry ``{"ok": true, ...}`` or
``{"ok": false, "error": <code>, "message": ...}``.

When a connection drops, every consumer id it popped with is disconnected,
requeueing whatever it still held -- that is what makes worker death safe.
"""

from __future__ import annotations

import logging
import socket
import socketserver
import threading
import time

from .. import net
from ..errors import BrokerUnreachable, VisionGridError, error_for_code
from .core import Broker, Delivery

logger = logging.getLogger(__name__)


class _BrokerConnection(socketserver.BaseRequestHandler):
    def handle(self):
        broker: Broker = self.server.broker  # type: ignore[attr-defined]
        seen_consumers = set()
        try:
            while True:
                try:
                    request = net.recv_frame(self.request)
                except net.ConnectionClosed:
                    break
                try:
                    response = self._dispatch(broker, request, seen_consumers)
                except VisionGridError as exc:
                    response = {"ok": False, "error": exc.code, "message": str(exc)}
                except Exception as exc:  # noqa: BLE001 - protocol boundary
                    logger.exception("broker op failed")
                    response = {"ok": False, "error": "InternalError",
                                "message": str(exc)}
                try:
                    net.send_frame(self.request, response)
                except OSError:
                    break
        finally:
            for consumer_id in seen_consumers:
                broker.disconnect_consumer(consumer_id)

    def _dispatch(self, broker: Broker, request: dict, seen_consumers: set) -> dict:
        op = request.get("op")
        if op == "ping":
            return {"ok": True}
        if op == "declare":
            broker.declare_and_bind(request["queue"], request.get("routing_key"))
            return {"ok": True}
        if op == "bindings":
            return {"ok": True, "bindings": broker.bindings()}
        if op == "publish":
            depth = broker.publish(request["routing_key"], request["payload"])
            return {"ok": True, "depth": depth}
        if op == "pop":
            consumer_id = request["consumer_id"]
            seen_consumers.add(consumer_id)
            delivery = broker.pop(request["queue"], consumer_id,
                                  timeout=request.get("timeout_ms", 0) / 1000.0)
            if delivery is None:
                return {"ok": True, "delivery": None}
            return {"ok": True, "delivery": {
                "tag": delivery.tag, "payload": delivery.payload,
                "attempts": delivery.attempts}}
        if op == "ack":
            broker.ack(request["queue"], request["consumer_id"], request["tag"])
            return {"ok": True}
        if op == "nack":
            broker.nack(request["queue"], request["consumer_id"], request["tag"])
            return {"ok": True}
        if op == "stats":
            return {"ok": True, "stats": broker.stats()}
        return {"ok": False, "error": "UnknownOp", "message": f"op {op!r}"}


class BrokerServer:
    """Threaded TCP front-end for a :class:`Broker`."""

    def __init__(self, broker: Broker, host: str = "127.0.0.1", port: int = 0):
        self._server = socketserver.ThreadingTCPServer(
            (host, port), _BrokerConnection, bind_and_activate=True)
        self._server.daemon_threads = True
        self._server.broker = broker  # type: ignore[attr-defined]
        self._thread = threading.Thread(target=self._server.serve_forever,
                                        name="broker-server", daemon=True)

    @property
    def address(self) -> tuple:
        return self._server.server_address

    def start(self):
        self._thread.start()

    def stop(self):
        self._server.shutdown()
        self._server.server_close()


class BrokerClient:
    """Blocking client; one request in flight per connection."""

    def __init__(self, address: tuple, connect_retries: int = 5,
                 retry_delay: float = 0.2):
        self.address = tuple(address)
        self._connect_retries = connect_retries
        self._retry_delay = retry_delay
        self._lock = threading.Lock()
        self._sock: socket.socket | None = None

    def connect(self):
        delay = self._retry_delay
        last_error: Exception | None = None
        for _ in range(self._connect_retries):
            try:
                self._sock = socket.create_connection(self.address, timeout=10.0)
                self._sock.settimeout(None)
                return self
            except OSError as exc:
                last_error = exc
                time.sleep(delay)
                delay = min(delay * 2, 2.0)
        raise BrokerUnreachable(
            f"cannot reach broker at {self.address}: {last_error}")

    def close(self):
        with self._lock:
            if self._sock is not None:
                try:
                    self._sock.close()
                finally:
                    self._sock = None

    def _request(self, body: dict, timeout: float | None = None) -> dict:
        with self._lock:
            if self._sock is None:
                raise BrokerUnreachable("client is not connected")
            try:
                self._sock.settimeout(timeout)
                net.send_frame(self._sock, body)
                response = net.recv_frame(self._sock)
            except (OSError, net.ConnectionClosed) as exc:
                self.close()
                raise BrokerUnreachable(f"broker connection lost: {exc}") from exc
            finally:
                if self._sock is not None:
                    self._sock.settimeout(None)
        if response.get("ok"):
            return response
        raise error_for_code(response.get("error", ""), response.get("message", ""))

    def ping(self):
        self._request({"op": "ping"}, timeout=5.0)

    def declare_and_bind(self, queue: str, routing_key: str | None = None):
        self._request({"op": "declare", "queue": queue,
                       "routing_key": routing_key}, timeout=10.0)

    def bindings(self) -> dict:
        return self._request({"op": "bindings"}, timeout=10.0)["bindings"]

    def publish(self, routing_key: str, payload: str) -> int:
        return self._request({"op": "publish", "routing_key": routing_key,
                              "payload": payload}, timeout=10.0)["depth"]

    def pop(self, queue: str, consumer_id: str,
            timeout: float = 0.0) -> Delivery | None:
        response = self._request(
            {"op": "pop", "queue": queue, "consumer_id": consumer_id,
             "timeout_ms": int(timeout * 1000)},
            timeout=timeout + 10.0)
        raw = response["delivery"]
        if raw is None:
            return None
        return Delivery(raw["tag"], raw["payload"], raw["attempts"])

    def ack(self, queue: str, consumer_id: str, tag: int):
        self._request({"op": "ack", "queue": queue, "consumer_id": consumer_id,
                       "tag": tag}, timeout=10.0)

    def nack(self, queue: str, consumer_id: str, tag: int):
        self._request({"op": "nack", "queue": queue, "consumer_id": consumer_id,
                       "tag": tag}, timeout=10.0)

    def stats(self) -> dict:
        return self._request({"op": "stats"}, timeout=10.0)["stats"]
