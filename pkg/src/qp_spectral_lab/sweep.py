"""
Data-parallel sweep engine.

Work is spread over a thread pool; numpy and scipy release the GIL inside
LAPACK. Results are always reduced in grid order, so aggregates do not
depend on the worker count or on scheduling.
"""

import asyncio
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Any, Callable, Iterable, Sequence, TypeVar

from qp_spectral_lab.errors import LabError, SweepFailureError, ValidationFailure

logger = logging.getLogger(__name__)

T = TypeVar("T")
R = TypeVar("R")


@dataclass(frozen=True)
class SweepPoint:
    index: int
    value: float
    result: dict[str, Any] | None = None
    error: dict[str, Any] | None = None

    @property
    def ok(self) -> bool:
        return self.error is None

    def to_record(self) -> dict[str, Any]:
        return {"index": self.index, "value": self.value, "ok": self.ok, "result": self.result, "error": self.error}


@dataclass(frozen=True)
class SweepOutcome:
    axis: str
    points: list[SweepPoint]

    @property
    def failures(self) -> int:
        return sum(not p.ok for p in self.points)

    @property
    def failure_fraction(self) -> float:
        return self.failures / len(self.points) if self.points else 0.0

    def check(self, failure_fraction_max: float) -> None:
        """
        Apply the partial-failure policy.
        :raises SweepFailureError: If too many grid points failed
        """
        if self.failure_fraction > failure_fraction_max:
            raise SweepFailureError(
                f"{self.failures} of {len(self.points)} sweep points failed",
                axis=self.axis,
                failure_fraction=self.failure_fraction,
                threshold=failure_fraction_max,
                failed=[p.index for p in self.points if not p.ok],
            )

    def to_record(self) -> dict[str, Any]:
        return {
            "axis": self.axis,
            "count": len(self.points),
            "failures": self.failures,
            "failure_fraction": self.failure_fraction,
            "points": [p.to_record() for p in self.points],
        }


class SweepEngine:
    """
    Owns all parallelism of a run. Module operations stay serial; the engine
    maps them over grids.
    :param workers: Number of worker threads
    """

    def __init__(self, workers: int = 1):
        if workers < 1:
            raise ValidationFailure(f"Worker count must be at least 1, got {workers}")
        self.workers = workers

    def map(self, fn: Callable[[T], R], items: Iterable[T]) -> list[R]:
        """Order-preserving parallel map."""
        items = list(items)
        if self.workers == 1 or len(items) < 2:
            return [fn(item) for item in items]
        with ThreadPoolExecutor(max_workers=self.workers) as pool:
            return list(pool.map(fn, items))

    async def sweep(
        self,
        axis: str,
        grid: Sequence[float],
        evaluate: Callable[[float], dict[str, Any]],
    ) -> SweepOutcome:
        """
        Evaluate a command at every grid value. A point whose evaluation
        raises a lab error is recorded as failed and the sweep continues.
        :param axis: Name of the swept parameter
        :param grid: Parameter values
        :param evaluate: Maps a value to a results mapping
        :return: Points in grid order
        :raises ValidationFailure: If the grid is empty
        """
        if len(grid) == 0:
            raise ValidationFailure(f"Sweep grid for axis {axis!r} is empty", axis=axis)

        def run_point(index: int, value: float) -> SweepPoint:
            try:
                return SweepPoint(index=index, value=float(value), result=evaluate(float(value)))
            except LabError as e:
                logger.warning(f"Sweep point {axis}={value} failed: {e.message}")
                return SweepPoint(index=index, value=float(value), error=e.to_payload())

        loop = asyncio.get_running_loop()
        with ThreadPoolExecutor(max_workers=self.workers) as pool:
            futures = [loop.run_in_executor(pool, run_point, k, v) for k, v in enumerate(grid)]
            points = await asyncio.gather(*futures)

        outcome = SweepOutcome(axis=axis, points=list(points))
        logger.info(f"Sweep over {axis}: {len(points)} points, {outcome.failures} failed")
        return outcome
