import pytest

from qp_spectral_lab.errors import SingularResolventError, SweepFailureError, ValidationFailure
from qp_spectral_lab.sweep import SweepEngine


def square(value: float) -> dict:
    return {"square": value * value}


def fail_at_half(value: float) -> dict:
    if value == 0.5:
        raise SingularResolventError("singular", energy=value)
    return square(value)


class TestSweepEngine:
    def test_workers_must_be_positive(self):
        with pytest.raises(ValidationFailure):
            SweepEngine(0)

    def test_map_preserves_order(self):
        """Test that the parallel map returns results in input order."""
        items = list(range(20))
        assert SweepEngine(4).map(lambda k: k * k, items) == [k * k for k in items]
        assert SweepEngine(1).map(lambda k: k + 1, items) == [k + 1 for k in items]

    async def test_sweep_is_ordered(self):
        """Test that sweep points come back in grid order for any worker count."""
        grid = [0.0, 0.25, 0.5, 0.75, 1.0]
        serial = await SweepEngine(1).sweep("theta", grid, square)
        parallel = await SweepEngine(3).sweep("theta", grid, square)
        assert serial.to_record() == parallel.to_record()
        assert [p.value for p in serial.points] == grid
        assert serial.points[2].result == {"square": 0.25}

    async def test_empty_grid(self):
        with pytest.raises(ValidationFailure):
            await SweepEngine(2).sweep("E", [], square)

    async def test_failed_point_is_recorded(self):
        """Test that a failing point is recorded and the sweep continues."""
        outcome = await SweepEngine(2).sweep("E", [0.0, 0.5, 1.0], fail_at_half)
        assert outcome.failures == 1
        assert outcome.failure_fraction == pytest.approx(1 / 3)
        failed = outcome.points[1]
        assert not failed.ok
        assert failed.error["kind"] == "SINGULAR"
        assert outcome.points[2].result == {"square": 1.0}

    async def test_failure_policy(self):
        """Test that the failure fraction is checked against the threshold."""
        outcome = await SweepEngine(1).sweep("E", [0.0, 0.5, 1.0], fail_at_half)
        outcome.check(0.5)
        with pytest.raises(SweepFailureError) as exc_info:
            outcome.check(0.1)
        assert exc_info.value.details["failed"] == [1]
        assert exc_info.value.exit_code == 3

    async def test_other_errors_propagate(self):
        def broken(value: float) -> dict:
            raise RuntimeError("bug")

        with pytest.raises(RuntimeError):
            await SweepEngine(1).sweep("E", [0.0], broken)
