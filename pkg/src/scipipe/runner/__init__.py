from .agent import RunnerAgent, RunnerConfig
from .client import CoordinatorClient

__all__ = ["RunnerAgent", "RunnerConfig", "CoordinatorClient"]
