from .core import CoordinatorCore, JobRecord
from .service import CoordinatorService

__all__ = ["CoordinatorCore", "CoordinatorService", "JobRecord"]
