import math

import numpy as np
import pytest
from pydantic import ValidationError

from qp_spectral_lab.errors import DimensionMismatchError, ValidationFailure
from qp_spectral_lab.model import (
    AnalyticPotential,
    FourierTerm,
    FrequencyVector,
    GevreySymbol,
    ShiftMode,
    SymbolEntry,
    SymbolRule,
    TorusPoint,
    default_frequency,
    evaluate_potential,
    frequency_family,
    nondegeneracy_check,
    orbit_points,
    shift_orbit,
    symbol_coefficient,
    symbol_l1_norm,
    truncation_tail_bound,
    verify_gevrey,
    wrap,
)


class TestTorus:
    def test_wrap_into_unit_interval(self):
        assert wrap(1.25) == pytest.approx(0.25)
        assert wrap(-0.25) == pytest.approx(0.75)
        assert wrap(-1e-20) == 0.0

    def test_torus_point_wraps_coordinates(self):
        point = TorusPoint(coords=(1.5, -0.25))
        assert point.coords == pytest.approx((0.5, 0.75))
        assert point.dim == 2

    def test_torus_point_accepts_bare_coordinates(self):
        assert TorusPoint.model_validate([0.25]).coords == (0.25,)

    def test_default_frequency(self):
        omega = default_frequency(2)
        assert omega.coords == pytest.approx((math.sqrt(2) % 1.0, math.sqrt(3) % 1.0))
        assert omega.diophantine_log_quality is not None

    def test_rational_frequency_is_rejected(self):
        """n·ω integral for some n means the frequency is not Diophantine."""
        with pytest.raises(ValueError):
            FrequencyVector(coords=(0.5,))

    def test_frequency_family_shifts_every_coordinate(self):
        base = default_frequency(2)
        shifted = frequency_family(base, 0.25)
        assert shifted.coords == pytest.approx(tuple(wrap(base.as_array() + 0.25)))

    def test_componentwise_orbit(self):
        omega = default_frequency(1)
        points = orbit_points(TorusPoint(coords=(0.1,)), omega, np.array([[0], [1], [2]]))
        expected = wrap(0.1 + np.arange(3) * omega.coords[0])
        assert points[:, 0] == pytest.approx(expected)

    def test_inner_orbit(self):
        omega = default_frequency(2)
        shifted = shift_orbit(TorusPoint(coords=(0.0,)), omega, (1, 1), ShiftMode.INNER)
        assert shifted.coords[0] == pytest.approx(float(wrap(sum(omega.coords))))

    def test_shift_dimension_mismatch(self):
        with pytest.raises(DimensionMismatchError):
            shift_orbit(TorusPoint(coords=(0.0,)), default_frequency(1), (1, 2))


class TestGevreySymbol:
    def test_canonical_coefficients(self):
        symbol = GevreySymbol(rho=1.0, gamma=0.7, radius=4)
        assert symbol_coefficient(symbol, 0) == 1.0
        assert symbol_coefficient(symbol, 2) == pytest.approx(math.exp(-(2**0.7)))
        assert symbol_coefficient(symbol, 5) == 0.0

    def test_coefficient_dimension_mismatch(self):
        with pytest.raises(ValidationFailure):
            symbol_coefficient(GevreySymbol(dim=2, radius=2), 1)

    def test_canonical_symbol_saturates_bound(self):
        report = verify_gevrey(GevreySymbol(radius=8))
        assert report.passed
        assert report.worst_ratio == pytest.approx(1.0)
        assert report.worst_n == (8,)

    def test_table_violation_is_reported(self):
        symbol = GevreySymbol.from_table({(1,): 1.0}, rho=1.0, gamma=0.7, radius=4)
        assert symbol.rule == SymbolRule.TABLE
        report = verify_gevrey(symbol)
        assert not report.passed
        assert report.worst_n == (1,)
        assert report.worst_ratio == pytest.approx(math.e)

    def test_table_must_be_even(self):
        with pytest.raises(ValidationError):
            GevreySymbol(
                rule=SymbolRule.TABLE,
                coefficients=(SymbolEntry(n=(1,), value=0.2), SymbolEntry(n=(-1,), value=0.1)),
            )

    def test_canonical_takes_no_table(self):
        with pytest.raises(ValidationError):
            GevreySymbol(coefficients=(SymbolEntry(n=(0,), value=0.1),))

    def test_l1_norm(self):
        symbol = GevreySymbol(rho=1.0, gamma=0.5, radius=3)
        expected = 1.0 + 2.0 * sum(math.exp(-(k**0.5)) for k in range(1, 4))
        assert symbol_l1_norm(symbol) == pytest.approx(expected)

    def test_tail_bound_decreases_with_radius(self):
        symbol = GevreySymbol(rho=1.0, gamma=0.7)
        tails = [truncation_tail_bound(symbol, r) for r in (4, 8, 16)]
        assert tails[0] > tails[1] > tails[2] > 0.0

    def test_tail_bound_rejects_zero_radius(self):
        with pytest.raises(ValidationFailure):
            truncation_tail_bound(GevreySymbol(), 0)


class TestAnalyticPotential:
    def test_cosine_values(self):
        f = AnalyticPotential.cosine()
        assert evaluate_potential(f, TorusPoint(coords=(0.0,))) == pytest.approx(2.0)
        assert evaluate_potential(f, TorusPoint(coords=(0.5,))) == pytest.approx(-2.0)
        assert evaluate_potential(f, TorusPoint(coords=(0.25,))) == pytest.approx(0.0, abs=1e-12)

    def test_non_real_coefficients_are_rejected(self):
        with pytest.raises(ValidationError):
            AnalyticPotential(fourier=(FourierTerm(n=(1,), re=1.0),))

    def test_lipschitz_bound_of_cosine(self):
        assert AnalyticPotential.cosine().lipschitz_bound(axis=0) == pytest.approx(4.0 * math.pi)

    def test_evaluate_dimension_mismatch(self):
        with pytest.raises(DimensionMismatchError):
            AnalyticPotential.cosine().evaluate_many(np.zeros((3, 2)))

    def test_from_symbol_at_origin_is_l1_norm(self):
        symbol = GevreySymbol(radius=6)
        v = AnalyticPotential.from_symbol(symbol)
        assert v.dim == 1
        assert evaluate_potential(v, TorusPoint(coords=(0.0,))) == pytest.approx(symbol_l1_norm(symbol))


class TestNondegeneracy:
    def test_cosine_oscillates(self):
        report = nondegeneracy_check(AnalyticPotential.cosine())
        assert report.min_oscillation == pytest.approx(4.0)
        assert not report.degenerate

    def test_sum_of_cosines_per_axis(self):
        report = nondegeneracy_check(AnalyticPotential.sum_of_cosines(2), seed=3)
        assert len(report.per_axis) == 2
        assert all(v == pytest.approx(4.0) for v in report.per_axis)

    def test_constant_is_degenerate(self):
        assert nondegeneracy_check(AnalyticPotential.constant(1.0)).degenerate

    def test_sample_counts_are_checked(self):
        with pytest.raises(ValidationFailure):
            nondegeneracy_check(AnalyticPotential.cosine(), line_samples=4)
