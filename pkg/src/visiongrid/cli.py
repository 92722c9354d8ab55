"""Command-line entry points.

``visiongrid serve``   -- run the coordinator (HTTP + event channel + broker
                          + relay in one process)
``visiongrid worker``  -- run a worker node against a coordinator
``visiongrid submit``  -- submit a job from a config file and stream its
                          terminal output live
``visiongrid save``    -- copy a finished job's artifacts to a locator

Exit codes for ``submit``: 0 success, 2 config error, 3 connection error,
4 job failed.
"""

from __future__ import annotations

import argparse
import json
import logging
import signal
import sys
import time
from pathlib import Path

import requests

from .errors import JobNotDone, TargetUnwritable, VisionGridError
from .jobs import parse_job_config, serialize_job_config
from .storage import SchemeResolver

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_CONNECT = 3
EXIT_JOB_FAILED = 4


def apply_overrides(config_text: str, overrides: dict) -> str:
    """Overlay dotted-key overrides onto a config document.

    Top-level keys (``exec``, ``maxim``) apply directly; a key like
    ``features.params.verbose`` targets one functionality's entry.
    """
    spec = parse_job_config(config_text)
    doc = json.loads(serialize_job_config(spec))
    for key, value in overrides.items():
        parts = key.split(".")
        if parts[0] in ("exec", "maxim") and len(parts) == 1:
            doc[parts[0]] = int(value) if parts[0] == "maxim" else value
            continue
        if len(parts) < 2:
            raise VisionGridError(f"override {key!r} is not a known setting")
        name, field = parts[0], parts[1]
        for entry in doc["config"]:
            if entry["name"] == name:
                break
        else:
            raise VisionGridError(f"override {key!r}: no config entry {name!r}")
        if field == "params":
            if len(parts) != 3:
                raise VisionGridError(f"override {key!r} needs params.<name>")
            entry["params"][parts[2]] = value
        elif field in ("path", "output"):
            entry[field] = value
        else:
            raise VisionGridError(f"override {key!r}: unknown field {field!r}")
    # Re-validate before returning.
    rendered = json.dumps(doc)
    parse_job_config(rendered)
    return rendered


def _parse_set_args(pairs) -> dict:
    overrides = {}
    for pair in pairs or ():
        key, sep, value = pair.partition("=")
        if not sep:
            raise VisionGridError(f"--set needs key=value, got {pair!r}")
        overrides[key.strip()] = value
    return overrides


class EventStream:
    """Client side of the event channel with replay-based reconnect."""

    def __init__(self, base_url: str, open_timeout: float = 10.0):
        from websockets.sync.client import connect
        ws_url = base_url.replace("http://", "ws://", 1) + "/ws"
        self._connect = lambda: connect(ws_url, open_timeout=open_timeout)
        self.socket = self._connect()
        hello = json.loads(self.socket.recv(timeout=open_timeout))
        if hello.get("type") != "hello":
            raise VisionGridError(f"unexpected channel greeting: {hello}")
        self.session_id = hello["session_id"]

    def recv(self, timeout: float):
        return json.loads(self.socket.recv(timeout=timeout))

    def resubscribe(self, job_id: str):
        self.socket = self._connect()
        hello = json.loads(self.socket.recv(timeout=10.0))
        self.session_id = hello["session_id"]
        self.socket.send(json.dumps({"type": "subscribe", "job_id": job_id}))

    def close(self):
        try:
            self.socket.close()
        except Exception:  # noqa: BLE001
            pass


def submit_and_monitor(coordinator: str, config_text: str,
                       anonymous: bool = True, token: str | None = None,
                       out=None, err=None,
                       poll_timeout: float = 600.0) -> tuple:
    """Submit a job and stream output lines until it finishes.

    Returns ``(exit_code, job_id)``.  Output lines go to ``out`` verbatim in
    per-task sequence order; diagnostics go to ``err``.
    """
    out = out if out is not None else sys.stdout
    err = err if err is not None else sys.stderr
    base = coordinator.rstrip("/")
    try:
        stream = EventStream(base)
    except Exception as exc:  # noqa: BLE001
        print(f"cannot open event channel at {base}: {exc}", file=err)
        return EXIT_CONNECT, None

    headers = {"X-Session-Id": stream.session_id}
    if not anonymous:
        headers["X-User-Token"] = token or "user"
    try:
        response = requests.post(
            f"{base}/api/v1/jobs",
            files={"spec": ("config.json", config_text, "application/json")},
            headers=headers, timeout=30.0)
    except requests.RequestException as exc:
        print(f"cannot submit job: {exc}", file=err)
        stream.close()
        return EXIT_CONNECT, None
    if response.status_code != 200:
        print(f"submission rejected: {response.text}", file=err)
        stream.close()
        return EXIT_CONFIG, None
    job_id = response.json()["job_id"]
    print(f"job {job_id} submitted", file=err)

    failed = False
    printed = set()
    deadline = time.time() + poll_timeout
    try:
        while time.time() < deadline:
            try:
                event = stream.recv(timeout=5.0)
            except TimeoutError:
                continue
            except Exception:  # noqa: BLE001 - channel dropped: replay + retry
                status = requests.get(f"{base}/api/v1/jobs/{job_id}",
                                      timeout=10.0).json()
                for wire in status.get("events", []):
                    if wire["type"] == "output_line":
                        dedup = (wire["task"], wire["seq"])
                        if dedup not in printed:
                            printed.add(dedup)
                            print(wire["payload"], file=out, flush=True)
                    elif wire["type"] == "failed":
                        failed = True
                if status["state"] in ("done", "failed"):
                    return (EXIT_JOB_FAILED if status["state"] == "failed" or failed
                            else EXIT_OK), job_id
                stream.resubscribe(job_id)
                continue
            if event.get("job_id") not in (None, job_id):
                continue
            kind = event.get("type")
            if kind == "output_line":
                dedup = (event["task"], event["seq"])
                if dedup not in printed:
                    printed.add(dedup)
                    print(event["payload"], file=out, flush=True)
            elif kind == "failed":
                failed = True
                print(f"task {event.get('task')} failed: {event.get('payload')}",
                      file=err)
            elif kind == "job_done":
                state = json.loads(event["payload"]).get("state")
                return (EXIT_JOB_FAILED if failed or state == "failed"
                        else EXIT_OK), job_id
        print("timed out waiting for the job to finish", file=err)
        return EXIT_JOB_FAILED, job_id
    finally:
        stream.close()


def save_results(coordinator: str, job_id: str, target: str,
                 dropbox_root=None) -> list:
    """Copy every artifact of a finished job under the target locator."""
    from .jobs import resolve_image_ref

    base = coordinator.rstrip("/")
    status = requests.get(f"{base}/api/v1/jobs/{job_id}?events=0", timeout=10.0)
    if status.status_code != 200:
        raise JobNotDone(f"job {job_id}: {status.text}")
    view = status.json()
    if view["state"] != "done":
        raise JobNotDone(f"job {job_id} is {view['state']}, not done")

    ref = resolve_image_ref(target)
    if ref.scheme == "dropbox":
        resolver = SchemeResolver(dropbox_root or Path.home() / ".visiongrid-dropbox")
        root = resolver.resolve("dropbox", ref.path)
    else:
        root = Path(ref.path)
    written = []
    for key in view["artifacts"]:
        response = requests.get(f"{base}/api/v1/jobs/{job_id}/artifacts/{key}",
                                timeout=30.0)
        if response.status_code != 200:
            raise JobNotDone(f"artifact {key} unavailable: {response.status_code}")
        destination = root / key
        try:
            destination.parent.mkdir(parents=True, exist_ok=True)
            destination.write_bytes(response.content)
        except OSError as exc:
            raise TargetUnwritable(f"cannot write {destination}: {exc}") from exc
        written.append(str(destination))
    return written


# -- argparse wiring ----------------------------------------------------------

def _cmd_serve(args) -> int:
    from .coordinator import CoordinatorService

    service = CoordinatorService(
        args.storage_root, host=args.host, http_port=args.http_port,
        broker_port=args.broker_port, relay_port=args.relay_port,
        dropbox_root=args.dropbox_root, console_dir=args.console_dir)
    service.start()
    print(f"http      {service.http_url}")
    print(f"broker    {service.broker_address[0]}:{service.broker_address[1]}")
    print(f"relay     {service.relay_address[0]}:{service.relay_address[1]}")
    stop = {"flag": False}
    signal.signal(signal.SIGTERM, lambda *_: stop.update(flag=True))
    signal.signal(signal.SIGINT, lambda *_: stop.update(flag=True))
    try:
        while not stop["flag"]:
            time.sleep(0.2)
    finally:
        service.stop()
    return EXIT_OK


def _address(text: str) -> tuple:
    host, _, port = text.rpartition(":")
    return (host or "127.0.0.1", int(port))


def _cmd_worker(args) -> int:
    from .worker import Worker, WorkerProfile, default_context

    profile = WorkerProfile.create(
        classes=[c.strip() for c in args.classes.split(",") if c.strip()],
        slots=args.slots, worker_id=args.worker_id)
    context = default_context(args.storage_root, dropbox_root=args.dropbox_root)
    worker = Worker(profile, _address(args.broker), _address(args.relay),
                    context=context)
    try:
        queues = worker.start()
    except VisionGridError as exc:
        print(f"cannot start worker: {exc}", file=sys.stderr)
        return EXIT_CONNECT
    print(f"worker {profile.worker_id} consuming {', '.join(queues)}")
    stop = {"flag": False}
    signal.signal(signal.SIGTERM, lambda *_: stop.update(flag=True))
    signal.signal(signal.SIGINT, lambda *_: stop.update(flag=True))
    try:
        while not stop["flag"]:
            time.sleep(0.2)
    finally:
        worker.stop()
    return EXIT_OK


def _cmd_submit(args) -> int:
    try:
        config_text = Path(args.config).read_text(encoding="utf-8")
        overrides = _parse_set_args(args.set)
        config_text = apply_overrides(config_text, overrides)
    except (OSError, VisionGridError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG

    code, job_id = submit_and_monitor(
        args.coordinator, config_text, anonymous=args.anonymous,
        token=args.token)
    if code == EXIT_OK and args.save and job_id:
        try:
            written = save_results(args.coordinator, job_id, args.save,
                                   dropbox_root=args.dropbox_root)
        except VisionGridError as exc:
            print(f"save failed: {exc}", file=sys.stderr)
            return EXIT_JOB_FAILED
        for path in written:
            print(f"saved {path}", file=sys.stderr)
    return code


def _cmd_save(args) -> int:
    try:
        written = save_results(args.coordinator, args.job, args.to,
                               dropbox_root=args.dropbox_root)
    except VisionGridError as exc:
        print(f"save failed: {exc}", file=sys.stderr)
        return EXIT_JOB_FAILED
    for path in written:
        print(path)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="visiongrid",
        description="Distributed vision-compute service and client")
    sub = parser.add_subparsers(dest="command", required=True)

    serve = sub.add_parser("serve", help="run the coordinator")
    serve.add_argument("--host", default="127.0.0.1")
    serve.add_argument("--http-port", type=int, default=8080)
    serve.add_argument("--broker-port", type=int, default=7070)
    serve.add_argument("--relay-port", type=int, default=7071)
    serve.add_argument("--storage-root", required=True)
    serve.add_argument("--dropbox-root", default=None)
    serve.add_argument("--console-dir", default=None)
    serve.set_defaults(func=_cmd_serve)

    worker = sub.add_parser("worker", help="run a worker node")
    worker.add_argument("--broker", required=True, help="host:port")
    worker.add_argument("--relay", required=True, help="host:port")
    worker.add_argument("--classes", default="cpu", help="gpu,cpu")
    worker.add_argument("--slots", type=int, default=2)
    worker.add_argument("--storage-root", required=True)
    worker.add_argument("--dropbox-root", default=None)
    worker.add_argument("--worker-id", default=None)
    worker.set_defaults(func=_cmd_worker)

    submit = sub.add_parser("submit", help="submit a job and stream output")
    submit.add_argument("--config", required=True)
    submit.add_argument("--set", action="append", metavar="KEY=VALUE",
                        help="override a config value (repeatable)")
    submit.add_argument("--coordinator", default="http://127.0.0.1:8080")
    submit.add_argument("--anonymous", action="store_true")
    submit.add_argument("--token", default=None)
    submit.add_argument("--save", default=None, metavar="SCHEME:PATH")
    submit.add_argument("--dropbox-root", default=None)
    submit.set_defaults(func=_cmd_submit)

    save = sub.add_parser("save", help="copy a finished job's artifacts")
    save.add_argument("--job", required=True)
    save.add_argument("--to", required=True, metavar="SCHEME:PATH")
    save.add_argument("--coordinator", default="http://127.0.0.1:8080")
    save.add_argument("--dropbox-root", default=None)
    save.set_defaults(func=_cmd_save)
    return parser


def main(argv=None) -> int:
    logging.basicConfig(
        level=logging.INFO,
        format="%(asctime)s %(name)-24s %(levelname)-7s %(message)s")
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
