"""Shared object store, scheme resolution, and the feature cache.

Coordinator and workers share one storage root laid out as
``<root>/{images,features,artifacts,models}/<key>``.  Image keys are the
SHA-256 of the bytes, so storing the same content twice is a no-op and
features can be cached content-addressed.
"""

from __future__ import annotations

import hashlib
import json
import os
import tempfile
import threading
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import matcontainer
from .errors import IoFailure, NotFound, PathEscape

NAMESPACES = ("images", "features", "artifacts", "models")


def content_hash(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def _safe_key(key: str) -> str:
    if not key or key.startswith(("/", "\\")) or ".." in key.split("/"):
        raise PathEscape(f"invalid object key {key!r}")
    return key


class ObjectStore:
    """Filesystem-backed object store with atomic writes."""

    def __init__(self, root):
        self.root = Path(root)
        for ns in NAMESPACES:
            (self.root / ns).mkdir(parents=True, exist_ok=True)

    def _path(self, namespace: str, key: str) -> Path:
        if namespace not in NAMESPACES:
            raise NotFound(f"unknown namespace {namespace!r}")
        return self.root / namespace / _safe_key(key)

    def store(self, namespace: str, data: bytes, key: str | None = None) -> str:
        """Write bytes and return the object key.

        Without an explicit key the object is content-addressed, which makes
        the write idempotent for identical bytes.
        """
        addressed = key is None
        if addressed:
            key = content_hash(data)
        path = self._path(namespace, key)
        if addressed and path.exists():
            return key
        try:
            path.parent.mkdir(parents=True, exist_ok=True)
            fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=".tmp-")
            with os.fdopen(fd, "wb") as fh:
                fh.write(data)
            os.replace(tmp, path)
        except OSError as exc:
            raise IoFailure(f"store {namespace}/{key}: {exc}") from exc
        return key

    def fetch(self, namespace: str, key: str) -> bytes:
        path = self._path(namespace, key)
        try:
            return path.read_bytes()
        except FileNotFoundError:
            raise NotFound(f"{namespace}/{key}") from None
        except OSError as exc:
            raise IoFailure(f"fetch {namespace}/{key}: {exc}") from exc

    def exists(self, namespace: str, key: str) -> bool:
        return self._path(namespace, key).exists()

    def list_keys(self, namespace: str) -> list:
        base = self.root / namespace
        return sorted(
            str(p.relative_to(base))
            for p in base.rglob("*")
            if p.is_file() and not p.name.startswith(".tmp-")
        )


class SchemeResolver:
    """Maps scheme-qualified locators onto the filesystem.

    ``dropbox:p`` resolves under a stub directory that stands in for the
    real client; ``local:p`` is taken as-is.  Dropbox paths are canonicalized
    and must stay inside their root.
    """

    def __init__(self, dropbox_root):
        self.dropbox_root = Path(dropbox_root).resolve()
        self.dropbox_root.mkdir(parents=True, exist_ok=True)

    def resolve(self, scheme: str, path: str) -> Path:
        if scheme == "local":
            return Path(path)
        if scheme == "dropbox":
            candidate = (self.dropbox_root / path.lstrip("/")).resolve()
            if not candidate.is_relative_to(self.dropbox_root):
                raise PathEscape(f"dropbox path {path!r} escapes its root")
            return candidate
        raise NotFound(f"unknown scheme {scheme!r}")


IMAGE_EXTENSIONS = {".png", ".jpg", ".jpeg", ".bmp", ".gif", ".tif", ".tiff"}


def list_image_files(path: Path) -> list:
    """Image files under a locator: the file itself, or a directory listing."""
    if path.is_file():
        return [path]
    if path.is_dir():
        return sorted(
            p for p in path.iterdir()
            if p.is_file() and p.suffix.lower() in IMAGE_EXTENSIONS
        )
    raise NotFound(f"no such file or directory: {path}")


@dataclass(frozen=True)
class CacheKey:
    """Identity of a cached feature matrix."""

    image_hash: str
    backend: str
    params_digest: str

    def storage_key(self) -> str:
        return f"{self.image_hash}-{self.backend}-{self.params_digest}.ccvm"


def params_digest(params: dict) -> str:
    canonical = json.dumps(params, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()[:16]


@dataclass
class CacheStats:
    hits: int = 0
    misses: int = 0
    computes: int = 0
    io_errors: int = 0


class FeatureCache:
    """Content-addressed feature cache with single-flight misses.

    Concurrent callers asking for the same key wait on one in-flight
    computation instead of recomputing; IO failures fall back to returning
    the computed value without persisting it.
    """

    def __init__(self, store: ObjectStore):
        self.store = store
        self.stats = CacheStats()
        self._stats_lock = threading.Lock()
        self._flight_lock = threading.Lock()
        self._in_flight: dict = {}

    def _bump(self, attr: str):
        with self._stats_lock:
            setattr(self.stats, attr, getattr(self.stats, attr) + 1)

    def _key_lock(self, key: str) -> threading.Lock:
        with self._flight_lock:
            lock = self._in_flight.get(key)
            if lock is None:
                lock = self._in_flight[key] = threading.Lock()
            return lock

    def get_or_compute(self, key: CacheKey, compute):
        """Return ``(matrix, hit)``; ``compute`` runs at most once per miss."""
        skey = key.storage_key()
        lock = self._key_lock(skey)
        with lock:
            try:
                if self.store.exists("features", skey):
                    matrix = matcontainer.read_matrix(self.store.fetch("features", skey))
                    self._bump("hits")
                    return matrix, True
            except (NotFound, IoFailure, ValueError):
                self._bump("io_errors")
            self._bump("misses")
            self._bump("computes")
            matrix = np.asarray(compute(), dtype=np.float64)
            try:
                self.store.store("features", matcontainer.write_matrix(matrix), key=skey)
            except IoFailure:
                self._bump("io_errors")
            return matrix, False
