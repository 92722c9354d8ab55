"""Worker-node runtime.

A worker registers its resource classes, pulls tasks from every queue those
classes qualify it for, executes the named functionality, and streams
events through the relay.  Failed tasks are retried once via nack; a second
failure is acked as a permanent failure so poison messages cannot wedge a
queue.
"""

from __future__ import annotations

import json
import logging
import threading
import time
import uuid
from dataclasses import dataclass

from ..broker.core import queues_for_classes
from ..broker.wire import BrokerClient
from ..errors import FetchFailure, VisionGridError
from ..jobs import JobEvent, TaskEnvelope
from ..relay import RelayPublisher
from .context import WorkerContext, default_context
from .handlers import HANDLERS

logger = logging.getLogger(__name__)

MAX_ATTEMPTS = 2


@dataclass(frozen=True)
class WorkerProfile:
    worker_id: str
    resource_classes: frozenset
    slots: int = 1
    heartbeat_interval: float = 10.0

    def __post_init__(self):
        if not self.resource_classes:
            raise ValueError("worker needs at least one resource class")
        if self.slots < 1:
            raise ValueError("slots must be >= 1")

    @classmethod
    def create(cls, classes, slots: int = 1, worker_id: str | None = None,
               heartbeat_interval: float = 10.0) -> "WorkerProfile":
        return cls(worker_id or f"worker-{uuid.uuid4().hex[:8]}",
                   frozenset(classes), slots, heartbeat_interval)


class TaskEventSink:
    """Per-task event emitter with its own monotone sequence counter."""

    def __init__(self, publisher: RelayPublisher, envelope: TaskEnvelope,
                 attempt: int):
        self._publisher = publisher
        self._envelope = envelope
        self._attempt = attempt
        self._lock = threading.Lock()
        self._seq = 0

    def _emit(self, kind: str, payload: str):
        with self._lock:
            seq = self._seq
            self._seq += 1
        event = JobEvent(self._envelope.job_id, self._envelope.task_index,
                         seq, kind, payload, attempt=self._attempt)
        self._publisher.emit(self._envelope.session_id, event)

    def started(self, payload: dict):
        self._emit("task_started", json.dumps(payload))

    def output(self, line: str):
        self._emit("output_line", line)

    def artifact(self, key: str):
        self._emit("artifact", key)

    def done(self, summary: dict):
        self._emit("task_done", json.dumps(summary))

    def failed(self, error: str, message: str, final: bool):
        self._emit("failed", json.dumps(
            {"error": error, "message": message, "final": final,
             "attempt": self._attempt}))


class Worker:
    def __init__(self, profile: WorkerProfile, broker_address, relay_address,
                 storage_root=None, context: WorkerContext | None = None,
                 poll_timeout: float = 0.5, handlers=None,
                 connect_retries: int = 5):
        if context is None:
            if storage_root is None:
                raise ValueError("need a storage_root or an explicit context")
            context = default_context(storage_root)
        self.profile = profile
        self.context = context
        self.broker_address = tuple(broker_address)
        self.relay_address = tuple(relay_address)
        self.poll_timeout = poll_timeout
        self.connect_retries = connect_retries
        self.handlers = dict(handlers or HANDLERS)
        self.subscriptions: list = []
        self.publisher = RelayPublisher(self.relay_address)
        self._slots = threading.Semaphore(profile.slots)
        self._active = 0
        self._active_lock = threading.Lock()
        self._stop = threading.Event()
        self._threads: list = []
        self._clients: list = []

    # -- lifecycle -----------------------------------------------------------

    def start(self) -> list:
        """Connect, subscribe, and begin pulling; returns the queue list."""
        probe = BrokerClient(self.broker_address,
                             connect_retries=self.connect_retries).connect()
        bindings = probe.bindings()
        probe.close()
        self.subscriptions = queues_for_classes(
            bindings, self.profile.resource_classes)
        self.publisher.start()
        for queue in self.subscriptions:
            thread = threading.Thread(
                target=self._pull_loop, args=(queue,),
                name=f"{self.profile.worker_id}-{queue}", daemon=True)
            self._threads.append(thread)
            thread.start()
        heartbeat = threading.Thread(target=self._heartbeat_loop,
                                     name=f"{self.profile.worker_id}-heartbeat",
                                     daemon=True)
        self._threads.append(heartbeat)
        heartbeat.start()
        logger.info("worker %s subscribed to %s", self.profile.worker_id,
                    self.subscriptions)
        return list(self.subscriptions)

    def stop(self, timeout: float = 5.0):
        self._stop.set()
        for thread in self._threads:
            thread.join(timeout=timeout)
        for client in self._clients:
            client.close()
        self.publisher.stop()

    @property
    def active_tasks(self) -> int:
        with self._active_lock:
            return self._active

    # -- internals -----------------------------------------------------------

    def _consumer_id(self, queue: str) -> str:
        return f"{self.profile.worker_id}:{queue}"

    def _heartbeat_loop(self):
        client = None
        while not self._stop.wait(self.profile.heartbeat_interval):
            try:
                if client is None:
                    client = BrokerClient(self.broker_address,
                                          connect_retries=1).connect()
                client.ping()
            except VisionGridError:
                client = None

    def _pull_loop(self, queue: str):
        client = BrokerClient(self.broker_address).connect()
        self._clients.append(client)
        consumer_id = self._consumer_id(queue)
        while not self._stop.is_set():
            # Take a slot before popping so we never hold more deliveries
            # than we can run.
            if not self._slots.acquire(timeout=0.2):
                continue
            delivery = None
            try:
                delivery = client.pop(queue, consumer_id, timeout=self.poll_timeout)
            except VisionGridError:
                if self._stop.is_set():
                    break
                time.sleep(0.5)
                try:
                    client = BrokerClient(self.broker_address).connect()
                    self._clients.append(client)
                except VisionGridError:
                    pass
            finally:
                if delivery is None:
                    self._slots.release()
            if delivery is None:
                continue
            with self._active_lock:
                self._active += 1
            runner = threading.Thread(
                target=self._run_delivery, args=(client, queue, delivery),
                name=f"{self.profile.worker_id}-task", daemon=True)
            runner.start()

    def _run_delivery(self, client: BrokerClient, queue: str, delivery):
        consumer_id = self._consumer_id(queue)
        try:
            self.run_task(delivery, lambda: client.ack(queue, consumer_id, delivery.tag),
                          lambda: client.nack(queue, consumer_id, delivery.tag))
        finally:
            with self._active_lock:
                self._active -= 1
            self._slots.release()

    def run_task(self, delivery, ack, nack):
        """Execute one delivery and settle it (ack, or nack for one retry)."""
        envelope = TaskEnvelope.from_json(delivery.payload)
        attempt = delivery.attempts
        sink = TaskEventSink(self.publisher, envelope, attempt)

        def settle(operation, label):
            # A lost broker connection requeues our deliveries anyway; the
            # settle failure itself must not take the worker down.
            try:
                operation()
            except VisionGridError as exc:
                logger.warning("could not %s task %s[%s]: %s", label,
                               envelope.job_id, envelope.task_index, exc)

        try:
            handler = self.handlers.get(envelope.functionality)
            if handler is None:
                raise FetchFailure(
                    f"no handler for functionality {envelope.functionality!r}")
            sink.started({"functionality": envelope.functionality,
                          "images": len(envelope.images), "attempt": attempt,
                          "worker": self.profile.worker_id})
            started = time.monotonic()
            images = [(ref, self.context.fetch_image(ref))
                      for ref in envelope.images]
            summary = handler(envelope, images, sink, self.context)
            summary["duration_s"] = round(time.monotonic() - started, 4)
            summary["worker"] = self.profile.worker_id
            sink.done(summary)
            settle(ack, "ack")
        except Exception as exc:  # noqa: BLE001 - every failure becomes an event
            code = exc.code if isinstance(exc, VisionGridError) else "HandlerError"
            final = attempt >= MAX_ATTEMPTS
            logger.warning("task %s[%s] attempt %d failed: %s",
                           envelope.job_id, envelope.task_index, attempt, exc)
            sink.failed(code, str(exc), final=final)
            settle(ack if final else nack, "ack" if final else "nack")
