from .context import WorkerContext, build_demo_model, default_context
from .handlers import HANDLERS
from .runtime import Worker, WorkerProfile

__all__ = ["Worker", "WorkerProfile", "WorkerContext", "HANDLERS",
           "build_demo_model", "default_context"]
