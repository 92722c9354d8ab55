"""Job and task data model.

A job arrives as a JSON config document naming one functionality to run
(``exec``), an image cap (``maxim``), and per-functionality settings.  It is
parsed into a :class:`JobSpec` and fanned out into routable
:class:`TaskEnvelope` work units: one envelope per image for the
image-parallel functionalities, a single envelope carrying every image for
graph jobs like stitching.
"""

from __future__ import annotations

import json
import uuid
from dataclasses import dataclass, field, replace

from .errors import (
    EmptyManifest,
    EmptyPath,
    MalformedDocument,
    MissingField,
    TooManyImages,
    UnknownFunctionality,
    UnknownScheme,
)

# Routing classes per functionality; stitching wants many cores, the rest
# run on the accelerator-labelled pool.
FUNCTIONALITY_RESOURCE = {
    "classify": "gpu",
    "features": "gpu",
    "vip": "gpu",
    "ImageStitch": "cpu",
}
FUNCTIONALITIES = frozenset(FUNCTIONALITY_RESOURCE)
IMAGE_PARALLEL = frozenset({"classify", "features", "vip"})
GRAPH_JOBS = frozenset({"ImageStitch"})

SCHEMES = frozenset({"local", "dropbox"})

EVENT_KINDS = frozenset({
    "accepted", "task_started", "output_line", "artifact",
    "task_done", "job_done", "failed",
})

DEFAULT_MAXIM = 500


@dataclass(frozen=True)
class ImageRef:
    """Scheme-qualified image locator; ``content_hash`` is set on ingest."""

    scheme: str
    path: str
    content_hash: str | None = None

    def __post_init__(self):
        if self.scheme not in SCHEMES:
            raise UnknownScheme(f"unknown scheme {self.scheme!r}")
        if not self.path:
            raise EmptyPath("image locator has an empty path")

    def with_hash(self, content_hash: str) -> "ImageRef":
        return replace(self, content_hash=content_hash)

    def to_dict(self) -> dict:
        return {"scheme": self.scheme, "path": self.path,
                "content_hash": self.content_hash}

    @classmethod
    def from_dict(cls, d: dict) -> "ImageRef":
        return cls(d["scheme"], d["path"], d.get("content_hash"))


def resolve_image_ref(raw: str) -> ImageRef:
    """Split a ``<scheme>:<path>`` locator, trimming whitespace on both sides."""
    text = raw.strip()
    scheme, sep, path = text.partition(":")
    if not sep:
        raise UnknownScheme(f"locator {raw!r} has no scheme prefix")
    scheme = scheme.strip()
    path = path.strip()
    if scheme not in SCHEMES:
        raise UnknownScheme(f"unknown scheme {scheme!r} in {raw!r}")
    if not path:
        raise EmptyPath(f"locator {raw!r} has an empty path")
    return ImageRef(scheme, path)


@dataclass(frozen=True)
class FunctionalityConfig:
    name: str
    path: str
    output: str
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.name not in FUNCTIONALITIES:
            raise UnknownFunctionality(f"unknown functionality {self.name!r}")
        # Validates the scheme/path shape early; the ref itself is rebuilt
        # at ingest time.
        resolve_image_ref(self.path)


@dataclass(frozen=True)
class JobSpec:
    exec: str
    maxim: int
    configs: tuple

    def __post_init__(self):
        if self.maxim < 1:
            raise MalformedDocument(f"maxim must be >= 1, got {self.maxim}")
        names = [c.name for c in self.configs]
        if len(set(names)) != len(names):
            raise MalformedDocument("duplicate functionality names in config")
        if self.exec not in names:
            raise MissingField(f"exec {self.exec!r} has no matching config entry")

    def config_for(self, name: str) -> FunctionalityConfig:
        for c in self.configs:
            if c.name == name:
                return c
        raise UnknownFunctionality(name)

    @property
    def active(self) -> FunctionalityConfig:
        return self.config_for(self.exec)


def _strip_trailing_commas(text: str) -> str:
    """Drop commas immediately before a closing brace/bracket, outside strings."""
    out = []
    in_string = False
    escaped = False
    pending_comma = -1
    for ch in text:
        if in_string:
            out.append(ch)
            if escaped:
                escaped = False
            elif ch == "\\":
                escaped = True
            elif ch == '"':
                in_string = False
            continue
        if ch == '"':
            in_string = True
            out.append(ch)
            pending_comma = -1
            continue
        if ch == ",":
            out.append(ch)
            pending_comma = len(out) - 1
            continue
        if ch in "}]" and pending_comma >= 0:
            out[pending_comma] = ""
        if not ch.isspace():
            pending_comma = -1
        out.append(ch)
    return "".join(out)


def _require_str(entry: dict, key: str, where: str) -> str:
    if key not in entry:
        raise MissingField(f"{where}: missing {key!r}")
    value = entry[key]
    if not isinstance(value, str) or not value:
        raise MalformedDocument(f"{where}: {key!r} must be a non-empty string")
    return value


def parse_job_config(text: str) -> JobSpec:
    """Parse a config document into a validated :class:`JobSpec`.

    The format is JSON with one tolerance: trailing commas before a closing
    brace or bracket are accepted, since hand-written configs routinely
    carry them.
    """
    try:
        doc = json.loads(text)
    except json.JSONDecodeError:
        try:
            doc = json.loads(_strip_trailing_commas(text))
        except json.JSONDecodeError as exc:
            raise MalformedDocument(f"config is not valid JSON: {exc}") from None
    if not isinstance(doc, dict):
        raise MalformedDocument("config root must be an object")

    unknown = set(doc) - {"exec", "maxim", "config"}
    if unknown:
        raise MalformedDocument(f"unknown top-level keys: {sorted(unknown)}")
    if "exec" not in doc:
        raise MissingField("missing 'exec'")
    exec_name = doc["exec"]
    if not isinstance(exec_name, str):
        raise MalformedDocument("'exec' must be a string")
    if exec_name not in FUNCTIONALITIES:
        raise UnknownFunctionality(f"unknown functionality {exec_name!r}")

    maxim = doc.get("maxim", DEFAULT_MAXIM)
    if isinstance(maxim, bool) or not isinstance(maxim, int) or maxim < 1:
        raise MalformedDocument(f"'maxim' must be a positive integer, got {maxim!r}")

    if "config" not in doc:
        raise MissingField("missing 'config' list")
    raw_configs = doc["config"]
    if not isinstance(raw_configs, list):
        raise MalformedDocument("'config' must be a list")

    configs = []
    for i, entry in enumerate(raw_configs):
        where = f"config[{i}]"
        if not isinstance(entry, dict):
            raise MalformedDocument(f"{where} must be an object")
        unknown = set(entry) - {"name", "path", "output", "params"}
        if unknown:
            raise MalformedDocument(f"{where}: unknown keys {sorted(unknown)}")
        name = _require_str(entry, "name", where)
        if name not in FUNCTIONALITIES:
            raise UnknownFunctionality(f"{where}: unknown functionality {name!r}")
        path = _require_str(entry, "path", where)
        output = _require_str(entry, "output", where)
        params = entry.get("params", {})
        if not isinstance(params, dict):
            raise MalformedDocument(f"{where}: 'params' must be an object")
        for k, v in params.items():
            if not isinstance(k, str) or not isinstance(v, str):
                raise MalformedDocument(
                    f"{where}: params entries must be string -> string")
        configs.append(FunctionalityConfig(name, path, output, dict(params)))

    return JobSpec(exec=exec_name, maxim=maxim, configs=tuple(configs))


def serialize_job_config(spec: JobSpec) -> str:
    """Inverse of :func:`parse_job_config` (strict JSON output)."""
    doc = {
        "exec": spec.exec,
        "maxim": spec.maxim,
        "config": [
            {"name": c.name, "path": c.path, "output": c.output,
             "params": dict(c.params)}
            for c in spec.configs
        ],
    }
    return json.dumps(doc, indent=4)


@dataclass(frozen=True)
class TaskEnvelope:
    """One routable unit of work."""

    job_id: str
    task_index: int
    functionality: str
    images: tuple
    params: dict
    resource_class: str
    session_id: str

    def __post_init__(self):
        if not self.images:
            raise EmptyManifest("task envelope carries no images")
        if self.resource_class != FUNCTIONALITY_RESOURCE[self.functionality]:
            raise MalformedDocument(
                f"resource class {self.resource_class!r} does not match "
                f"functionality {self.functionality!r}")

    def to_json(self) -> str:
        return json.dumps({
            "job_id": self.job_id,
            "task_index": self.task_index,
            "functionality": self.functionality,
            "images": [r.to_dict() for r in self.images],
            "params": self.params,
            "resource_class": self.resource_class,
            "session_id": self.session_id,
        })

    @classmethod
    def from_json(cls, raw: str) -> "TaskEnvelope":
        d = json.loads(raw)
        return cls(
            job_id=d["job_id"],
            task_index=d["task_index"],
            functionality=d["functionality"],
            images=tuple(ImageRef.from_dict(r) for r in d["images"]),
            params=d["params"],
            resource_class=d["resource_class"],
            session_id=d["session_id"],
        )


def expand_job(spec: JobSpec, manifest: list, session_id: str,
               job_id: str | None = None) -> list:
    """Fan a job out into task envelopes.

    Image-parallel functionalities get one envelope per image so progress
    events stay fine-grained; graph jobs get a single envelope carrying the
    whole manifest.
    """
    if not manifest:
        raise EmptyManifest("job has no input images")
    if len(manifest) > spec.maxim:
        raise TooManyImages(
            f"{len(manifest)} images exceed the job cap of {spec.maxim}")
    job_id = job_id or uuid.uuid4().hex
    config = spec.active
    resource = FUNCTIONALITY_RESOURCE[spec.exec]
    if spec.exec in IMAGE_PARALLEL:
        return [
            TaskEnvelope(job_id, i, spec.exec, (ref,), dict(config.params),
                         resource, session_id)
            for i, ref in enumerate(manifest)
        ]
    return [TaskEnvelope(job_id, 0, spec.exec, tuple(manifest),
                         dict(config.params), resource, session_id)]


@dataclass(frozen=True)
class JobEvent:
    """One progress/result event; ``task_index`` is None for job-level events."""

    job_id: str
    task_index: int | None
    seq: int
    kind: str
    payload: str
    attempt: int = 1

    def __post_init__(self):
        if self.kind not in EVENT_KINDS:
            raise MalformedDocument(f"unknown event kind {self.kind!r}")
        if self.seq < 0:
            raise MalformedDocument("event seq must be >= 0")

    def to_wire(self) -> dict:
        return {"type": self.kind, "job_id": self.job_id,
                "task": self.task_index, "seq": self.seq,
                "payload": self.payload, "attempt": self.attempt}

    @classmethod
    def from_wire(cls, d: dict) -> "JobEvent":
        return cls(job_id=d["job_id"], task_index=d.get("task"),
                   seq=d["seq"], kind=d["type"], payload=d.get("payload", ""),
                   attempt=d.get("attempt", 1))
