import logging
import math

import numpy as np
import pytest

from qp_spectral_lab.duality import (
    aubry_dual_map,
    delyon_bound,
    dual_vector,
    duality_compare,
    hausdorff_distance,
    poisson_residual_check,
    select_poisson_pairs,
    xi_values,
)
from qp_spectral_lab.errors import NotDualizableError, ValidationFailure
from qp_spectral_lab.model import (
    AnalyticPotential,
    GevreySymbol,
    TorusPoint,
    default_frequency,
)
from qp_spectral_lab.operators import OperatorFamily, OperatorSpec, assemble, default_model


class TestDualMap:
    def test_families_swap(self, default_spec):
        partner = aubry_dual_map(default_spec)
        assert partner.family == OperatorFamily.DIRECT
        assert partner.phase == default_spec.dual_phase
        assert partner.coupling == default_spec.coupling

    def test_map_is_an_involution(self, default_spec):
        assert aubry_dual_map(aubry_dual_map(default_spec)) == default_spec

    def test_multivariate_potential_has_no_dual(self):
        spec = OperatorSpec(
            symbol=GevreySymbol(dim=2, radius=4),
            profile=AnalyticPotential.sum_of_cosines(2),
            omega=default_frequency(2),
            phase=TorusPoint.zeros(2),
        )
        with pytest.raises(NotDualizableError) as exc_info:
            aubry_dual_map(spec)
        assert exc_info.value.exit_code == 2


class TestDualVector:
    def test_constant_function(self):
        vector = dual_vector(psi=np.array([0.0, 1.0, 0.0]), grid_size=5)
        assert vector.values == pytest.approx(np.ones(5))
        assert vector.parseval_error == pytest.approx(0.0, abs=1e-12)

    def test_single_mode(self):
        vector = dual_vector(psi=np.array([0.0, 0.0, 1.0]), grid_size=5)
        assert vector.values == pytest.approx(np.exp(2j * np.pi * np.arange(5) / 5))

    def test_samples_recover_the_coefficients(self):
        psi = np.array([0.5, -1.0, 2.0, 0.25, 1.5])
        forward = dual_vector(psi=psi, grid_size=7)
        recovered = dual_vector(samples=forward.values)
        assert recovered.coefficients[1:-1] == pytest.approx(psi)
        assert recovered.parseval_error == pytest.approx(0.0, abs=1e-12)

    def test_argument_checks(self):
        with pytest.raises(ValidationFailure):
            dual_vector()
        with pytest.raises(ValidationFailure):
            dual_vector(psi=np.ones(3), samples=np.ones(3))
        with pytest.raises(ValidationFailure):
            dual_vector(samples=np.ones(4))
        with pytest.raises(ValidationFailure):
            dual_vector(psi=np.ones(5), grid_size=3)

    def test_xi_values_carry_the_phase(self):
        omega = default_frequency(1)
        sites = np.array([[0], [1]])
        flat = xi_values(np.array([0.0, 1.0, 0.0]), TorusPoint(coords=(0.0,)), omega, 0.2, sites)
        assert flat == pytest.approx(np.ones(2))
        twisted = xi_values(np.array([0.0, 1.0, 0.0]), TorusPoint(coords=(0.25,)), omega, 0.2, sites)
        assert twisted == pytest.approx(np.array([1.0, 1j]))


class TestHausdorff:
    def test_endpoint_distance(self):
        assert hausdorff_distance([(0.0, 1.0)], [(0.0, 1.5)]) == pytest.approx(0.5)

    def test_gap_midpoint(self):
        assert hausdorff_distance([(0.0, 1.0), (2.0, 3.0)], [(0.0, 3.0)]) == pytest.approx(0.5)

    def test_empty_sets(self):
        assert hausdorff_distance([], []) == 0.0
        assert hausdorff_distance([(0.0, 1.0)], []) == math.inf

    def test_free_operators_agree(self, free_spec):
        comparison = duality_compare(free_spec, 16, 16, 8)
        assert comparison.distance < 0.05
        record = comparison.to_record()
        assert record["direct_size"] == 16
        assert record["dual"]["mode"] == "direct"


class TestPoisson:
    def test_identity_holds_within_budget(self, default_spec):
        op = assemble(default_spec, 16, TorusPoint(coords=(0.37,)))
        pairs = select_poisson_pairs(op, 8, 3)
        assert pairs
        assert len(pairs) <= 3
        assert all(11 <= index < 22 for index in pairs)
        for index in pairs:
            report = poisson_residual_check(op, index, 8)
            assert report.residual <= report.budget + 1e-8
            assert report.to_record()["index"] == index

    def test_sub_box_must_fit(self, default_spec):
        op = assemble(default_spec, 8)
        with pytest.raises(ValidationFailure):
            poisson_residual_check(op, 0, 8)


class TestDelyon:
    def test_bounds_decrease(self):
        report = delyon_bound(default_model(gamma=1.0), [16, 32, 64])
        assert report.decreasing
        assert report.good == [None, None, None]
        assert len(report.to_record()["bounds"]) == 3

    def test_rise_is_flagged_below_gamma_one(self, caplog):
        """Test that the chain at γ = 0.7 rises between 16 and 32 and says so."""
        with caplog.at_level(logging.WARNING, logger="qp_spectral_lab.duality"):
            report = delyon_bound(default_model(), [16, 32, 64])
        assert report.rises == [(16, 32)]
        assert not report.decreasing
        assert report.log_bounds[2] < report.log_bounds[1]
        assert report.to_record()["rises"] == [[16, 32]]
        assert any("does not decrease" in record.getMessage() for record in caplog.records)

    def test_goodness_is_recorded(self, default_spec):
        report = delyon_bound(default_spec, [8, 16], theta=TorusPoint(coords=(0.3,)), energy=2.5)
        assert all(isinstance(flag, bool) for flag in report.good)

    def test_needs_scales(self, default_spec):
        with pytest.raises(ValidationFailure):
            delyon_bound(default_spec, [])
