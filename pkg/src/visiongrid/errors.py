"""Exception types used across the service.

Every error carries a stable ``code`` (the class name) so that the wire
protocols can round-trip failures between processes.
"""

from __future__ import annotations


class VisionGridError(Exception):
    """Base class for all service errors."""

    @property
    def code(self) -> str:
        return type(self).__name__


# --- job configuration / expansion ---------------------------------------

class MalformedDocument(VisionGridError):
    """Config document is syntactically or structurally invalid."""


class UnknownFunctionality(VisionGridError):
    """Functionality name is not in the registry."""


class MissingField(VisionGridError):
    """A required config field is absent."""


class UnknownScheme(VisionGridError):
    """Locator scheme outside {local, dropbox}."""


class EmptyPath(VisionGridError):
    """Locator has an empty path component."""


class TooManyImages(VisionGridError):
    """Manifest exceeds the job's image cap."""


class EmptyManifest(VisionGridError):
    """Job expansion requires at least one image."""


class ValidationFailed(VisionGridError):
    """Submitted job failed validation."""


# --- broker ----------------------------------------------------------------

class BindingConflict(VisionGridError):
    """Routing key is already bound to a different queue."""


class UnroutableKey(VisionGridError):
    """Publish with a routing key that has no binding."""


class QueueMissing(VisionGridError):
    """Operation on a queue that was never declared."""


class UnknownTag(VisionGridError):
    """Ack/nack with a delivery tag that is not outstanding."""


class NotOwner(VisionGridError):
    """Ack/nack by a consumer that does not own the delivery."""


class BrokerUnreachable(VisionGridError):
    """Broker endpoint could not be reached after retries."""


# --- coordinator -----------------------------------------------------------

class UnknownSession(VisionGridError):
    """Session id is not registered (or its channel closed)."""


class UnknownJob(VisionGridError):
    """Job id does not exist."""


class ChannelClosed(VisionGridError):
    """Event channel closed during a required exchange."""


# --- storage ---------------------------------------------------------------

class NotFound(VisionGridError):
    """Object key does not exist in the store."""


class IoFailure(VisionGridError):
    """Underlying filesystem operation failed."""


class StorageFailure(VisionGridError):
    """Ingest or artifact persistence failed."""


class PathEscape(VisionGridError):
    """Locator resolves outside its scheme root."""


# --- worker ----------------------------------------------------------------

class FetchFailure(VisionGridError):
    """Task input could not be fetched or decoded."""


class HandlerError(VisionGridError):
    """Functionality handler raised."""


class RelayUnreachable(VisionGridError):
    """Event relay endpoint is down."""


# --- graph engine ----------------------------------------------------------

class VertexFailure(VisionGridError):
    """One or more vertex computations failed.

    ``failures`` maps vertex id to the raised exception; ``completed`` lists
    vertices whose computation finished.
    """

    def __init__(self, failures: dict, completed: list):
        self.failures = failures
        self.completed = completed
        ids = ", ".join(repr(v) for v in sorted(failures, key=repr))
        super().__init__(f"vertex computation failed for: {ids}")


class EdgeFailure(VisionGridError):
    """One or more edge computations failed."""

    def __init__(self, failures: dict, completed: list):
        self.failures = failures
        self.completed = completed
        ids = ", ".join(repr(e) for e in sorted(failures, key=repr))
        super().__init__(f"edge computation failed for: {ids}")


class NonFiniteResidual(VisionGridError):
    """Vertex program reported a NaN/inf residual (divergence)."""


class DisconnectedGraph(VisionGridError):
    """Operation requires a connected graph."""


# --- vision ----------------------------------------------------------------

class DegenerateImage(VisionGridError):
    """Image too small (or invalid) for the requested operation."""


class DimensionMismatch(VisionGridError):
    """Feature / model dimensions do not agree."""


class SingularAfterRegularization(VisionGridError):
    """Covariance not invertible even after regularization."""


class DuplicateLabel(VisionGridError):
    """Category label already present in the model."""


class NoFaces(VisionGridError):
    """Input not decodable as an image for face detection."""


class CanvasOverflow(VisionGridError):
    """Panorama canvas exceeds the configured pixel budget."""


# --- client ----------------------------------------------------------------

class JobNotDone(VisionGridError):
    """Results requested before the job reached the done state."""


class TargetUnwritable(VisionGridError):
    """Save target cannot be written."""


_ALL_ERRORS = {
    cls.__name__: cls
    for cls in list(globals().values())
    if isinstance(cls, type) and issubclass(cls, VisionGridError)
}


def error_for_code(code: str, message: str = "") -> VisionGridError:
    """Rebuild an error from its wire code; unknown codes map to the base."""
    cls = _ALL_ERRORS.get(code, VisionGridError)
    if cls in (VertexFailure, EdgeFailure):
        return cls({}, [])
    return cls(message or code)
