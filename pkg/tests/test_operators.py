import math

import numpy as np
import pytest
from pydantic import ValidationError

from qp_spectral_lab.errors import DimensionMismatchError, ValidationFailure
from qp_spectral_lab.lattice import Region
from qp_spectral_lab.model import (
    AnalyticPotential,
    GevreySymbol,
    ShiftMode,
    TorusPoint,
    default_frequency,
    symbol_l1_norm,
    truncation_tail_bound,
)
from qp_spectral_lab.operators import (
    OperatorFamily,
    OperatorSpec,
    assemble,
    assemble_direct,
    assemble_dual,
    default_model,
    energy_grid,
    numerical_range,
)


class TestOperatorSpec:
    def test_default_model(self, default_spec):
        assert default_spec.family == OperatorFamily.DUAL
        assert default_spec.coupling == 1e-3
        assert default_spec.dim == 1
        assert default_spec.lattice_dim == 1
        assert default_spec.dualizable
        assert default_spec.dual_phase.coords == (0.0,)

    def test_lambda_alias(self, default_spec):
        raw = default_spec.model_dump(by_alias=True)
        assert raw["lambda"] == 1e-3
        assert OperatorSpec.model_validate(raw) == default_spec

    def test_negative_coupling_is_rejected(self, default_spec):
        raw = default_spec.model_dump(by_alias=True)
        raw["lambda"] = -0.1
        with pytest.raises(ValidationError):
            OperatorSpec.model_validate(raw)

    def test_symbol_dimension_must_match(self):
        with pytest.raises(ValidationError):
            OperatorSpec(
                symbol=GevreySymbol(dim=2),
                profile=AnalyticPotential.cosine(),
                omega=default_frequency(1),
                phase=TorusPoint(coords=(0.0,)),
            )

    def test_inner_shift_for_scalar_potential(self):
        spec = default_model(dim=2, radius=4)
        assert spec.lattice_dim == 2
        assert spec.shift_mode == ShiftMode.INNER
        assert spec.dualizable

    def test_multivariate_potential_is_not_dualizable(self):
        spec = OperatorSpec(
            symbol=GevreySymbol(dim=2, radius=4),
            profile=AnalyticPotential.sum_of_cosines(2),
            omega=default_frequency(2),
            phase=TorusPoint.zeros(2),
        )
        assert spec.shift_mode == ShiftMode.COMPONENTWISE
        assert not spec.dualizable

    def test_direct_family_lives_on_the_line(self, direct_spec):
        assert direct_spec.lattice_dim == 1
        assert direct_spec.hopping == direct_spec.profile


class TestAssembly:
    def test_dual_without_hopping_is_diagonal(self, free_spec):
        op = assemble(free_spec, 4, TorusPoint(coords=(0.1,)))
        assert op.is_diagonal()
        omega = free_spec.omega.coords[0]
        expected = [2.0 * math.cos(2.0 * math.pi * (0.1 + n * omega)) for n in range(-4, 5)]
        assert np.diag(op.matrix) == pytest.approx(expected)

    def test_dual_hopping_entries(self, default_spec):
        op = assemble(default_spec, 4)
        assert op.matrix[0, 3] == pytest.approx(1e-3 * math.exp(-(3**0.7)))
        assert op.matrix[3, 0] == op.matrix[0, 3]
        assert op.hermiticity_residual() == 0.0

    def test_hopping_stops_at_the_symbol_radius(self):
        spec = default_model(radius=2)
        op = assemble(spec, 4)
        assert op.matrix[0, 2] != 0.0
        assert op.matrix[0, 3] == 0.0

    def test_tail_bound(self, default_spec):
        op = assemble(default_spec, 4)
        expected = 1e-3 * truncation_tail_bound(default_spec.symbol, default_spec.symbol.radius)
        assert op.tail_bound == pytest.approx(expected)

    def test_direct_without_potential_is_the_free_laplacian(self):
        spec = default_model(coupling=0.0, family=OperatorFamily.DIRECT)
        op = assemble(spec, 3)
        assert np.diag(op.matrix) == pytest.approx(np.zeros(7))
        assert np.diag(op.matrix, 1) == pytest.approx(np.ones(6))
        assert np.diag(op.matrix, 2) == pytest.approx(np.zeros(5))
        expected = sorted(2.0 * math.cos(math.pi * k / 8) for k in range(1, 8))
        assert op.spectrum == pytest.approx(expected)

    def test_direct_potential_is_the_symbol(self, direct_spec):
        op = assemble(direct_spec, 2, TorusPoint(coords=(0.0,)))
        origin = op.row((0,))
        assert op.matrix[origin, origin] == pytest.approx(1e-3 * symbol_l1_norm(direct_spec.symbol))

    def test_direct_potential_is_cached(self, direct_spec):
        assert direct_spec.potential is direct_spec.potential
        assert direct_spec.potential is default_model(family=OperatorFamily.DIRECT).potential
        assert direct_spec.potential == AnalyticPotential.from_symbol(direct_spec.symbol)

    def test_family_checks(self, default_spec, direct_spec):
        with pytest.raises(ValidationFailure):
            assemble_dual(direct_spec, Region.cube(2))
        with pytest.raises(ValidationFailure):
            assemble_direct(default_spec, 2)

    def test_region_dimension_mismatch(self, default_spec):
        with pytest.raises(DimensionMismatchError):
            assemble(default_spec, Region.cube(2, dim=2))

    def test_two_dimensional_dual(self):
        spec = default_model(dim=2, radius=3)
        op = assemble(spec, 2)
        assert op.size == 25
        assert op.hermiticity_residual() == 0.0
        assert op.distances.max() == 4

    def test_restrict_and_rows(self, default_spec):
        op = assemble(default_spec, 4)
        rows = op.rows_of(np.array([[-1], [0], [1]]))
        assert rows.tolist() == [3, 4, 5]
        sub = op.restrict(rows)
        assert sub.size == 3
        assert sub.matrix == pytest.approx(op.matrix[3:6, 3:6])

    def test_triples_skip_zero_entries(self):
        spec = default_model(coupling=0.0, family=OperatorFamily.DIRECT)
        triples = list(assemble(spec, 2).triples())
        assert len(triples) == 8
        assert ("-2", "-1", 1.0) in triples


class TestNumericalRange:
    def test_free_range(self, free_spec):
        assert numerical_range(free_spec) == pytest.approx((-2.0, 2.0))

    def test_range_widens_with_coupling(self, default_spec):
        spread = 1e-3 * symbol_l1_norm(default_spec.symbol)
        assert numerical_range(default_spec) == pytest.approx((-2.0 - spread, 2.0 + spread))

    def test_spectrum_inside_range(self, default_spec):
        lower, upper = numerical_range(default_spec)
        spectrum = assemble(default_spec, 16, TorusPoint(coords=(0.37,))).spectrum
        assert spectrum.min() >= lower - 1e-9
        assert spectrum.max() <= upper + 1e-9

    def test_energy_grid(self, free_spec):
        assert energy_grid(free_spec, 2) == pytest.approx([-1.0, 1.0])

    def test_empty_energy_grid(self, free_spec):
        with pytest.raises(ValidationFailure):
            energy_grid(free_spec, 0)
