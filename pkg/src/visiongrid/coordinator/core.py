"""Coordinator state: sessions, job records, event routing.

This is the synchronous heart of the master node.  The HTTP/WebSocket layer
and the relay server both call into it; everything is guarded by one lock so
event handling, submissions and status reads interleave safely.

Events for a live session are forwarded immediately in arrival order;
events for a closed session are retained on the job record (a reconnecting
client replays them via the status endpoint).  The record also tracks task
attempts so a redelivered task's stale stream cannot corrupt sequence
accounting.
"""

from __future__ import annotations

import json
import logging
import threading
import time
import uuid

from ..errors import (
    NotFound,
    StorageFailure,
    TooManyImages,
    UnknownJob,
    UnknownSession,
    ValidationFailed,
    VisionGridError,
)
from ..jobs import JobEvent, JobSpec, expand_job, parse_job_config, resolve_image_ref
from ..storage import ObjectStore, SchemeResolver, list_image_files

logger = logging.getLogger(__name__)

TERMINAL_TASK_STATES = {"done", "failed"}


class TaskStatus:
    __slots__ = ("index", "state", "attempt", "events", "artifacts")

    def __init__(self, index: int):
        self.index = index
        self.state = "pending"
        self.attempt = 0
        self.events: list = []
        self.artifacts: list = []

    def view(self) -> dict:
        return {"index": self.index, "state": self.state,
                "attempt": self.attempt, "artifacts": list(self.artifacts),
                "events": len(self.events)}


class JobRecord:
    def __init__(self, job_id: str, spec: JobSpec, session_id: str,
                 n_tasks: int, n_images: int, user: str | None):
        self.job_id = job_id
        self.functionality = spec.exec
        self.maxim = spec.maxim
        self.session_id = session_id
        self.user = user
        self.state = "accepted"
        self.tasks = [TaskStatus(i) for i in range(n_tasks)]
        self.n_images = n_images
        self.created_at = time.time()
        self.finished_at: float | None = None
        self.job_events: list = []
        self._job_seq = 0

    def next_job_seq(self) -> int:
        seq = self._job_seq
        self._job_seq += 1
        return seq

    def artifacts(self) -> list:
        keys = []
        for task in self.tasks:
            keys.extend(task.artifacts)
        return keys

    def counts(self) -> dict:
        counts = {"pending": 0, "running": 0, "done": 0, "failed": 0}
        for task in self.tasks:
            counts[task.state] += 1
        return counts

    def view(self, include_events: bool = True) -> dict:
        view = {
            "job_id": self.job_id,
            "functionality": self.functionality,
            "state": self.state,
            "session_id": self.session_id,
            "n_images": self.n_images,
            "created_at": self.created_at,
            "finished_at": self.finished_at,
            "tasks": [task.view() for task in self.tasks],
            "counts": self.counts(),
            "artifacts": self.artifacts(),
        }
        if include_events:
            ordered = list(self.job_events)
            for task in self.tasks:
                ordered.extend(task.events)
            ordered.sort(key=lambda item: item[0])
            view["events"] = [event for _, event in ordered]
        return view


class CoordinatorCore:
    def __init__(self, storage: ObjectStore, resolver: SchemeResolver, broker):
        self.storage = storage
        self.resolver = resolver
        self.broker = broker
        self._lock = threading.RLock()
        self._sessions: dict = {}
        self._jobs: dict = {}
        self._arrival = 0
        self.relay_drops = 0
        self.orphan_events = 0

    # -- sessions ------------------------------------------------------------

    def open_session(self, handle) -> str:
        session_id = uuid.uuid4().hex
        with self._lock:
            self._sessions[session_id] = handle
        return session_id

    def close_session(self, session_id: str):
        with self._lock:
            self._sessions.pop(session_id, None)

    def has_session(self, session_id: str) -> bool:
        with self._lock:
            return session_id in self._sessions

    def session_count(self) -> int:
        with self._lock:
            return len(self._sessions)

    def subscribe(self, session_id: str, job_id: str):
        """Re-point a job's live event delivery (reconnect support)."""
        with self._lock:
            if session_id not in self._sessions:
                raise UnknownSession(session_id)
            record = self._jobs.get(job_id)
            if record is None:
                raise UnknownJob(job_id)
            record.session_id = session_id

    # -- submission ----------------------------------------------------------

    def _ingest_upload(self, data: bytes, filename: str):
        key = self.storage.store("images", data)
        ref = resolve_image_ref(f"local:{filename or 'upload'}")
        return ref.with_hash(key)

    def _ingest_ref(self, raw: str) -> list:
        ref = resolve_image_ref(raw)
        root = self.resolver.resolve(ref.scheme, ref.path)
        refs = []
        for path in list_image_files(root):
            try:
                data = path.read_bytes()
            except OSError as exc:
                raise StorageFailure(f"cannot read {path}: {exc}") from exc
            key = self.storage.store("images", data)
            refs.append(resolve_image_ref(f"{ref.scheme}:{path}").with_hash(key))
        return refs

    def submit_job(self, session_id: str, config_text: str,
                   uploads=(), refs=(), user: str | None = None) -> str:
        """Validate, ingest, record, and dispatch one job; returns job_id.

        The HTTP response (this method's return) never waits on a worker:
        dispatch is a broker publish.
        """
        with self._lock:
            if session_id not in self._sessions:
                raise UnknownSession(f"session {session_id!r} is not connected")
        try:
            spec = parse_job_config(config_text)
        except VisionGridError:
            raise
        except Exception as exc:  # noqa: BLE001
            raise ValidationFailed(str(exc)) from exc

        manifest = []
        for filename, data in uploads:
            manifest.append(self._ingest_upload(data, filename))
        for raw in refs:
            manifest.extend(self._ingest_ref(raw))
        if not uploads and not refs:
            manifest.extend(self._ingest_ref(spec.active.path))
        if len(manifest) > spec.maxim:
            raise TooManyImages(
                f"{len(manifest)} images exceed the job cap of {spec.maxim}")

        job_id = uuid.uuid4().hex
        envelopes = expand_job(spec, manifest, session_id, job_id=job_id)
        record = JobRecord(job_id, spec, session_id, len(envelopes),
                           len(manifest), user)
        with self._lock:
            self._jobs[job_id] = record
        accepted = JobEvent(job_id, None, record.next_job_seq(), "accepted",
                            json.dumps({"tasks": len(envelopes),
                                        "images": len(manifest),
                                        "functionality": spec.exec}))
        self.handle_event(session_id, accepted)
        for envelope in envelopes:
            self.broker.publish(envelope.functionality, envelope.to_json())
        return job_id

    # -- events ----------------------------------------------------------------

    def handle_event(self, session_id: str, event: JobEvent,
                     dropped_before: int = 0):
        """Record one event and forward it to the owning live session."""
        with self._lock:
            if dropped_before:
                self.relay_drops += dropped_before
            record = self._jobs.get(event.job_id)
            if record is None:
                self.orphan_events += 1
                return
            self._arrival += 1
            stamp = self._arrival

            if event.task_index is None:
                record.job_events.append((stamp, event.to_wire()))
                self._forward(record, event)
                return

            if not 0 <= event.task_index < len(record.tasks):
                self.orphan_events += 1
                return
            task = record.tasks[event.task_index]
            if event.attempt < task.attempt:
                return  # stale attempt, superseded by a redelivery
            if event.attempt > task.attempt:
                task.attempt = event.attempt
                task.events = []
            task.events.append((stamp, event.to_wire()))

            if event.kind == "task_started":
                task.state = "running"
                if record.state == "accepted":
                    record.state = "running"
            elif event.kind == "artifact":
                task.artifacts.append(event.payload)
            elif event.kind == "task_done":
                task.state = "done"
            elif event.kind == "failed":
                final = True
                try:
                    final = bool(json.loads(event.payload).get("final", True))
                except (ValueError, AttributeError):
                    pass
                if final:
                    task.state = "failed"
            self._forward(record, event)
            self._maybe_finish(record)

    def _forward(self, record: JobRecord, event: JobEvent):
        handle = self._sessions.get(record.session_id)
        if handle is None:
            self.relay_drops += 1
            return
        try:
            handle.deliver(event.to_wire())
        except Exception:  # noqa: BLE001 - a dying channel must not stall others
            logger.exception("event delivery failed; dropping session %s",
                             record.session_id)
            self._sessions.pop(record.session_id, None)

    def _maybe_finish(self, record: JobRecord):
        if record.state in ("done", "failed"):
            return
        if not all(task.state in TERMINAL_TASK_STATES for task in record.tasks):
            return
        failed = any(task.state == "failed" for task in record.tasks)
        record.state = "failed" if failed else "done"
        record.finished_at = time.time()
        done = JobEvent(record.job_id, None, record.next_job_seq(), "job_done",
                        json.dumps({"state": record.state,
                                    "artifacts": len(record.artifacts())}))
        self._arrival += 1
        record.job_events.append((self._arrival, done.to_wire()))
        self._forward(record, done)

    # -- queries ---------------------------------------------------------------

    def job_status(self, job_id: str, include_events: bool = True) -> dict:
        with self._lock:
            record = self._jobs.get(job_id)
            if record is None:
                raise UnknownJob(job_id)
            return record.view(include_events=include_events)

    def job_artifact(self, job_id: str, key: str) -> bytes:
        with self._lock:
            record = self._jobs.get(job_id)
            if record is None:
                raise UnknownJob(job_id)
            if key not in record.artifacts():
                raise NotFound(f"job {job_id} has no artifact {key!r}")
        return self.storage.fetch("artifacts", key)

    def stats(self) -> dict:
        with self._lock:
            return {
                "sessions": len(self._sessions),
                "jobs": len(self._jobs),
                "relay_drops": self.relay_drops,
                "orphan_events": self.orphan_events,
            }
