"""Master-node service: HTTP API, WebSocket event channel, embedded broker
and relay, all in one process.

Endpoints:

* ``POST /api/v1/jobs`` -- multipart (``spec`` document, ``images`` files,
  ``refs`` JSON list) or a JSON body; header ``X-Session-Id`` required.
* ``GET /api/v1/jobs/{job_id}`` -- job record view (with the event log).
* ``GET /api/v1/jobs/{job_id}/artifacts/{key}`` -- artifact bytes.
* ``GET /api/v1/health`` -- liveness and counters.
* ``GET /ws`` -- event channel; first server message is
  ``{"type": "hello", "session_id": ...}``; clients may send
  ``{"type": "subscribe", "job_id": ...}`` to re-attach after a reconnect.

The web console, when built, is served at ``/``.
"""

from __future__ import annotations

import asyncio
import json
import logging
import mimetypes
import threading
from pathlib import Path

from aiohttp import WSMsgType, web

from ..broker.core import Broker
from ..broker.wire import BrokerServer
from ..errors import (
    NotFound,
    TooManyImages,
    UnknownJob,
    UnknownSession,
    ValidationFailed,
    VisionGridError,
)
from ..relay import RelayServer
from ..storage import ObjectStore, SchemeResolver
from .core import CoordinatorCore

logger = logging.getLogger(__name__)

_HTTP_STATUS = {
    UnknownSession: 400,
    ValidationFailed: 400,
    TooManyImages: 400,
    UnknownJob: 404,
    NotFound: 404,
}


def _error_response(exc: VisionGridError) -> web.Response:
    status = 500
    for cls, code in _HTTP_STATUS.items():
        if isinstance(exc, cls):
            status = code
            break
    return web.json_response({"error": exc.code, "message": str(exc)},
                             status=status)


class _WsSessionHandle:
    """Bridges core event delivery onto the session's asyncio queue."""

    def __init__(self, loop: asyncio.AbstractEventLoop):
        self.loop = loop
        self.queue: asyncio.Queue = asyncio.Queue()

    def deliver(self, wire: dict):
        self.loop.call_soon_threadsafe(self.queue.put_nowait, wire)


class CoordinatorService:
    def __init__(self, storage_root, host: str = "127.0.0.1",
                 http_port: int = 0, broker_port: int = 0, relay_port: int = 0,
                 dropbox_root=None, console_dir=None,
                 visibility_timeout: float = 60.0):
        self.host = host
        self.storage = ObjectStore(storage_root)
        self.resolver = SchemeResolver(
            dropbox_root or (self.storage.root / "dropbox"))
        self.broker = Broker(visibility_timeout=visibility_timeout)
        self.broker.install_default_bindings()
        self.core = CoordinatorCore(self.storage, self.resolver, self.broker)
        self.console_dir = Path(console_dir) if console_dir else None

        self._broker_server = BrokerServer(self.broker, host, broker_port)
        self._relay_server = RelayServer(self.core.handle_event, host, relay_port)
        self._http_port = http_port
        self._loop: asyncio.AbstractEventLoop | None = None
        self._loop_thread: threading.Thread | None = None
        self._runner: web.AppRunner | None = None
        self._site: web.TCPSite | None = None
        self._ready = threading.Event()

    # -- lifecycle -----------------------------------------------------------

    @property
    def broker_address(self) -> tuple:
        return self._broker_server.address

    @property
    def relay_address(self) -> tuple:
        return self._relay_server.address

    @property
    def http_address(self) -> tuple:
        assert self._site is not None, "service not started"
        return self._site._server.sockets[0].getsockname()  # noqa: SLF001

    @property
    def http_url(self) -> str:
        host, port = self.http_address[:2]
        return f"http://{host}:{port}"

    def start(self):
        self._broker_server.start()
        self._relay_server.start()
        self._loop = asyncio.new_event_loop()
        self._loop_thread = threading.Thread(target=self._run_loop,
                                             name="coordinator-http", daemon=True)
        self._loop_thread.start()
        if not self._ready.wait(timeout=10.0):
            raise RuntimeError("coordinator HTTP server failed to start")
        return self

    def _run_loop(self):
        asyncio.set_event_loop(self._loop)
        self._loop.run_until_complete(self._start_app())
        self._ready.set()
        self._loop.run_forever()
        self._loop.run_until_complete(self._loop.shutdown_asyncgens())
        self._loop.close()

    async def _start_app(self):
        app = web.Application(client_max_size=256 * 1024 * 1024)
        app.router.add_post("/api/v1/jobs", self._post_job)
        app.router.add_get("/api/v1/jobs/{job_id}", self._get_job)
        app.router.add_get("/api/v1/jobs/{job_id}/artifacts/{key:.+}",
                           self._get_artifact)
        app.router.add_get("/api/v1/health", self._get_health)
        app.router.add_get("/ws", self._websocket)
        app.router.add_get("/", self._index)
        if self.console_dir and self.console_dir.is_dir():
            app.router.add_static("/ui", self.console_dir)
        self._runner = web.AppRunner(app)
        await self._runner.setup()
        self._site = web.TCPSite(self._runner, self.host, self._http_port)
        await self._site.start()

    def stop(self):
        if self._loop is not None:
            async def shutdown():
                if self._runner is not None:
                    await self._runner.cleanup()
            future = asyncio.run_coroutine_threadsafe(shutdown(), self._loop)
            try:
                future.result(timeout=5.0)
            except Exception:  # noqa: BLE001
                logger.exception("http shutdown failed")
            self._loop.call_soon_threadsafe(self._loop.stop)
            if self._loop_thread is not None:
                self._loop_thread.join(timeout=5.0)
        self._relay_server.stop()
        self._broker_server.stop()

    # -- http handlers ---------------------------------------------------------

    async def _post_job(self, request: web.Request) -> web.Response:
        session_id = request.headers.get("X-Session-Id", "")
        user = request.headers.get("X-User-Token")
        try:
            spec_text, uploads, refs = await self._read_submission(request)
            job_id = await asyncio.get_running_loop().run_in_executor(
                None,
                lambda: self.core.submit_job(session_id, spec_text,
                                             uploads=uploads, refs=refs,
                                             user=user))
        except VisionGridError as exc:
            return _error_response(exc)
        return web.json_response({"job_id": job_id})

    async def _read_submission(self, request: web.Request):
        spec_text = ""
        uploads: list = []
        refs: list = []
        if request.content_type.startswith("multipart/"):
            reader = await request.multipart()
            async for part in reader:
                if part.name == "spec":
                    spec_text = (await part.read()).decode("utf-8")
                elif part.name == "images":
                    uploads.append((part.filename or "upload",
                                    await part.read()))
                elif part.name == "refs":
                    refs = json.loads((await part.read()).decode("utf-8"))
        else:
            body = await request.json()
            spec_text = body.get("spec", "")
            refs = body.get("refs", [])
        if not spec_text:
            raise ValidationFailed("submission carries no config document")
        if not isinstance(refs, list):
            raise ValidationFailed("'refs' must be a list of locators")
        return spec_text, uploads, refs

    async def _get_job(self, request: web.Request) -> web.Response:
        include_events = request.query.get("events", "1") != "0"
        try:
            view = self.core.job_status(request.match_info["job_id"],
                                        include_events=include_events)
        except VisionGridError as exc:
            return _error_response(exc)
        return web.json_response(view)

    async def _get_artifact(self, request: web.Request) -> web.Response:
        try:
            data = self.core.job_artifact(request.match_info["job_id"],
                                          request.match_info["key"])
        except VisionGridError as exc:
            return _error_response(exc)
        content_type = (mimetypes.guess_type(request.match_info["key"])[0]
                        or "application/octet-stream")
        return web.Response(body=data, content_type=content_type)

    async def _get_health(self, _request: web.Request) -> web.Response:
        return web.json_response({"status": "ok", **self.core.stats()})

    async def _index(self, _request: web.Request) -> web.Response:
        if self.console_dir:
            index = self.console_dir / "index.html"
            if index.is_file():
                return web.FileResponse(index)
        return web.json_response({
            "service": "visiongrid",
            "api": "/api/v1",
            "events": "/ws",
        })

    # -- websocket ---------------------------------------------------------------

    async def _websocket(self, request: web.Request) -> web.WebSocketResponse:
        ws = web.WebSocketResponse(heartbeat=30.0)
        await ws.prepare(request)
        handle = _WsSessionHandle(asyncio.get_running_loop())
        session_id = self.core.open_session(handle)
        await ws.send_json({"type": "hello", "session_id": session_id})

        async def pump():
            while True:
                wire = await handle.queue.get()
                await ws.send_json(wire)

        sender = asyncio.create_task(pump())
        try:
            async for message in ws:
                if message.type != WSMsgType.TEXT:
                    continue
                try:
                    body = json.loads(message.data)
                except ValueError:
                    await ws.send_json({"type": "error", "payload": "bad json"})
                    continue
                if body.get("type") == "subscribe":
                    try:
                        self.core.subscribe(session_id, body.get("job_id", ""))
                        await ws.send_json({"type": "subscribed",
                                            "job_id": body.get("job_id")})
                    except VisionGridError as exc:
                        await ws.send_json({"type": "error", "payload": exc.code})
        finally:
            sender.cancel()
            self.core.close_session(session_id)
        return ws
