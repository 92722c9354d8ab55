"""In-process message broker: one direct exchange, named queues, bindings.

Producers publish with a routing key; the binding table selects exactly one
queue; consumers compete for deliveries with explicit ack/nack.  Delivery is
at-least-once: an unacked message is requeued at the buffer head when its
consumer disconnects, nacks, or exceeds the visibility deadline.

All operations take one lock, so any interleaving of publishes, pops and
acks from any number of threads or connections is linearizable.
"""

from __future__ import annotations

import threading
import time
from dataclasses import dataclass, field

from ..errors import (
    BindingConflict,
    NotOwner,
    QueueMissing,
    UnknownTag,
    UnroutableKey,
)
from ..jobs import FUNCTIONALITY_RESOURCE

# Default routing table: accelerator-labelled work and the multi-core
# stitching queue.
DEFAULT_BINDINGS = {
    "classify": "classification.gpu",
    "features": "classification.gpu",
    "vip": "classification.gpu",
    "ImageStitch": "stitching.cpu",
}

QUEUE_RESOURCE_CLASS = {
    "classification.gpu": "gpu",
    "stitching.cpu": "cpu",
}


@dataclass
class _Message:
    payload: str
    publish_seq: int
    deliveries: int = 0


@dataclass
class _Unacked:
    message: _Message
    consumer_id: str
    deadline: float


@dataclass
class Delivery:
    """What a consumer receives from a pop."""

    tag: int
    payload: str
    attempts: int


@dataclass
class _Queue:
    name: str
    buffer: list = field(default_factory=list)
    unacked: dict = field(default_factory=dict)  # tag -> _Unacked
    next_tag: int = 1
    published: int = 0
    acked: int = 0


class Broker:
    def __init__(self, visibility_timeout: float = 60.0, clock=time.monotonic):
        self._visibility_timeout = visibility_timeout
        self._clock = clock
        self._lock = threading.Lock()
        self._changed = threading.Condition(self._lock)
        self._queues: dict = {}
        self._bindings: dict = {}
        self._publish_seq = 0

    # -- declaration --------------------------------------------------------

    def declare_and_bind(self, queue_name: str, routing_key: str | None = None):
        """Idempotently create a queue and optionally bind a routing key.

        A key already bound to a different queue is a conflict; rebinding to
        the same queue is a no-op.
        """
        if not queue_name:
            raise ValueError("queue name must be non-empty")
        with self._lock:
            if queue_name not in self._queues:
                self._queues[queue_name] = _Queue(queue_name)
            if routing_key is not None:
                bound = self._bindings.get(routing_key)
                if bound is not None and bound != queue_name:
                    raise BindingConflict(
                        f"{routing_key!r} is already bound to {bound!r}")
                self._bindings[routing_key] = queue_name

    def install_default_bindings(self):
        for key, queue in DEFAULT_BINDINGS.items():
            self.declare_and_bind(queue, key)

    def bindings(self) -> dict:
        with self._lock:
            return dict(self._bindings)

    # -- publish / consume --------------------------------------------------

    def publish(self, routing_key: str, payload: str) -> int:
        """Append to the bound queue; returns the queue depth after append."""
        with self._lock:
            queue_name = self._bindings.get(routing_key)
            if queue_name is None:
                raise UnroutableKey(f"no binding for {routing_key!r}")
            queue = self._queues[queue_name]
            self._publish_seq += 1
            queue.buffer.append(_Message(payload, self._publish_seq))
            queue.published += 1
            self._changed.notify_all()
            return len(queue.buffer)

    def _queue(self, queue_name: str) -> _Queue:
        try:
            return self._queues[queue_name]
        except KeyError:
            raise QueueMissing(f"queue {queue_name!r} not declared") from None

    def _requeue(self, queue: _Queue, messages):
        """Put messages back at the buffer head, oldest first."""
        for message in sorted(messages, key=lambda m: m.publish_seq, reverse=True):
            queue.buffer.insert(0, message)
        if messages:
            self._changed.notify_all()

    def _expire_locked(self, queue: _Queue, now: float):
        overdue = [tag for tag, entry in queue.unacked.items()
                   if entry.deadline <= now]
        expired = [queue.unacked.pop(tag).message for tag in overdue]
        self._requeue(queue, expired)

    def pop(self, queue_name: str, consumer_id: str,
            timeout: float = 0.0) -> Delivery | None:
        """Move the buffer head to this consumer's unacked set.

        Returns None if nothing arrives within ``timeout`` seconds (0 means
        non-blocking).  The consumer must later ack or nack the tag.
        """
        deadline = self._clock() + timeout
        with self._lock:
            queue = self._queue(queue_name)
            while True:
                self._expire_locked(queue, self._clock())
                if queue.buffer:
                    message = queue.buffer.pop(0)
                    message.deliveries += 1
                    tag = queue.next_tag
                    queue.next_tag += 1
                    queue.unacked[tag] = _Unacked(
                        message, consumer_id,
                        self._clock() + self._visibility_timeout)
                    return Delivery(tag, message.payload, message.deliveries)
                remaining = deadline - self._clock()
                if remaining <= 0:
                    return None
                # Wait in short slices so visibility expiry is noticed even
                # without new publishes.
                self._changed.wait(min(remaining, 0.05))

    def _take_owned(self, queue: _Queue, consumer_id: str, tag: int) -> _Unacked:
        entry = queue.unacked.get(tag)
        if entry is None:
            raise UnknownTag(f"tag {tag} has no outstanding delivery")
        if entry.consumer_id != consumer_id:
            raise NotOwner(
                f"tag {tag} is owned by {entry.consumer_id!r}, not {consumer_id!r}")
        del queue.unacked[tag]
        return entry

    def ack(self, queue_name: str, consumer_id: str, tag: int):
        with self._lock:
            queue = self._queue(queue_name)
            self._take_owned(queue, consumer_id, tag)
            queue.acked += 1

    def nack(self, queue_name: str, consumer_id: str, tag: int):
        with self._lock:
            queue = self._queue(queue_name)
            entry = self._take_owned(queue, consumer_id, tag)
            self._requeue(queue, [entry.message])

    def disconnect_consumer(self, consumer_id: str):
        """Requeue every delivery the consumer still holds (death handling)."""
        with self._lock:
            for queue in self._queues.values():
                held = [tag for tag, entry in queue.unacked.items()
                        if entry.consumer_id == consumer_id]
                messages = [queue.unacked.pop(tag).message for tag in held]
                self._requeue(queue, messages)

    def sweep_expired(self):
        with self._lock:
            now = self._clock()
            for queue in self._queues.values():
                self._expire_locked(queue, now)

    # -- introspection -------------------------------------------------------

    def depth(self, queue_name: str) -> int:
        with self._lock:
            return len(self._queue(queue_name).buffer)

    def stats(self) -> dict:
        with self._lock:
            return {
                name: {
                    "buffered": len(q.buffer),
                    "unacked": len(q.unacked),
                    "published": q.published,
                    "acked": q.acked,
                }
                for name, q in self._queues.items()
            }


def queues_for_classes(bindings: dict, resource_classes) -> list:
    """Queues a worker with the given classes should consume, sorted.

    A queue qualifies when the resource class of its bound functionality is
    one of the worker's classes.
    """
    classes = set(resource_classes)
    queues = set()
    for routing_key, queue_name in bindings.items():
        required = FUNCTIONALITY_RESOURCE.get(
            routing_key, QUEUE_RESOURCE_CLASS.get(queue_name))
        if required in classes:
            queues.add(queue_name)
    return sorted(queues)
