import abc
from typing import Callable, List, Sequence, TypeVar

T = TypeVar("T")
R = TypeVar("R")


class EngineAPI(metaclass=abc.ABCMeta):
    """Executor for the independent per-pair computations of one training step."""

    def setup(self) -> None:
        """Prepare the executor for computation."""
        raise NotImplementedError

    def is_ready(self) -> bool:
        """Check if engine is ready for computation."""
        raise NotImplementedError

    def map(self, fn: Callable[[T], R], items: Sequence[T]) -> List[R]:
        """Apply `fn` to every item; results come back in item order."""
        raise NotImplementedError

    def teardown(self) -> None:
        """Cleanup phase."""
        raise NotImplementedError

    def __enter__(self) -> "EngineAPI":
        self.setup()
        return self

    def __exit__(self, *exc: object) -> None:
        self.teardown()
