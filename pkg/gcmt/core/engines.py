from concurrent.futures import ThreadPoolExecutor
from typing import Any, Callable, Dict, List, Optional, Sequence, Type, TypeVar

from gcmt.core.abc import EngineAPI
from gcmt.core.errors import ParameterError, ValidationError
from gcmt.utils.logging import get_logger

# Get the logger
logger = get_logger()

T = TypeVar("T")
R = TypeVar("R")


class SerialEngine(EngineAPI):
    """Runs the per-pair work inline in the calling thread."""

    def __init__(self) -> None:
        logger.debug("SerialEngine initialized")

    def setup(self) -> None:
        """Nothing to start for inline execution."""
        logger.debug("Setting up SerialEngine")

    def teardown(self) -> None:
        """Nothing to release for inline execution."""
        logger.debug("Tearing down SerialEngine")

    def is_ready(self) -> bool:
        """Check if engine is ready for computation."""
        return True

    def map(self, fn: Callable[[T], R], items: Sequence[T]) -> List[R]:
        """Apply `fn` to every item in order."""
        return [fn(item) for item in items]


class PoolEngine(EngineAPI):
    """Thread pool executor; results are collected in submission order."""

    def __init__(self, max_workers: int = 4) -> None:
        if max_workers < 1:
            raise ParameterError(f"max_workers must be >= 1, got {max_workers}")

        self._executor: Optional[ThreadPoolExecutor] = None
        self._max_workers = max_workers
        logger.debug(f"PoolEngine initialized with max_workers: {max_workers}")

    def is_ready(self) -> bool:
        """Check if engine is ready for computation."""
        return self._executor is not None

    def setup(self) -> None:
        """Start the worker threads."""
        logger.debug(f"Setting up PoolEngine with {self._max_workers} workers")
        self._executor = ThreadPoolExecutor(max_workers=self._max_workers, thread_name_prefix="gcmt-pair")

    def map(self, fn: Callable[[T], R], items: Sequence[T]) -> List[R]:
        """Apply `fn` to every item concurrently."""
        if self._executor is None:
            raise ValidationError("PoolEngine used before setup()")

        futures = [self._executor.submit(fn, item) for item in items]
        return [future.result() for future in futures]

    def teardown(self) -> None:
        """Cleanup phase."""
        if self._executor is None:
            raise ValidationError("PoolEngine not running")

        logger.debug("Tearing down PoolEngine")
        self._executor.shutdown(wait=True)
        self._executor = None


ENGINES: Dict[str, Type[EngineAPI]] = {
    "SerialEngine": SerialEngine,
    "PoolEngine": PoolEngine,
}


def get_engine(name: str, **kwargs: Any) -> EngineAPI:
    """Instantiate an engine by class name."""
    if name not in ENGINES:
        raise ParameterError(f"unknown engine `{name}`, expected one of {sorted(ENGINES)}")

    return ENGINES[name](**kwargs)
