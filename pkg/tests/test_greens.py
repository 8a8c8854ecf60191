import math

import numpy as np
import pytest
from scipy.linalg import inv

from qp_spectral_lab.errors import SingularResolventError, ValidationFailure
from qp_spectral_lab.greens import (
    check_ldt_bounds,
    fit_decay,
    green,
    neumann_expansion,
    norm_threshold,
    resolvent_identity_residual,
    terminal_rate,
)
from qp_spectral_lab.model import TorusPoint
from qp_spectral_lab.operators import OperatorFamily, assemble, default_model


class TestRates:
    def test_terminal_rate(self):
        assert terminal_rate(1.0, 0.7) == pytest.approx((1.0 - 5.0**-0.7) / 2.0)
        assert terminal_rate(2.0, 1.0) == pytest.approx(0.8)

    def test_norm_threshold(self):
        assert norm_threshold(16, 1.0) == pytest.approx(math.exp(4.0))


class TestGreen:
    def test_diagonal_inverse(self, free_spec):
        op = assemble(free_spec, 4, TorusPoint(coords=(0.2,)))
        g = green(op, 2.5)
        diagonal = np.diag(op.matrix)
        assert np.diag(g.matrix) == pytest.approx(1.0 / (diagonal - 2.5))
        assert g.op_norm == pytest.approx(1.0 / np.abs(diagonal - 2.5).min())
        assert g.residual < 1e-14

    def test_matches_dense_inverse(self, default_spec):
        op = assemble(default_spec, 8, TorusPoint(coords=(0.3,)))
        g = green(op, 0.4)
        reference = inv(op.matrix - 0.4 * np.eye(op.size))
        assert g.matrix == pytest.approx(reference, abs=1e-10)
        assert g.entry((0,), (2,)) == pytest.approx(reference[8, 10], abs=1e-12)

    def test_regularized_green_is_complex(self):
        spec = default_model(coupling=0.0, family=OperatorFamily.DIRECT)
        op = assemble(spec, 2)
        g = green(op, 0.0, epsilon=0.1)
        assert np.iscomplexobj(g.matrix)
        assert g.op_norm == pytest.approx(10.0, rel=1e-6)

    def test_energy_on_a_diagonal_entry_is_singular(self, free_spec):
        op = assemble(free_spec, 4)
        with pytest.raises(SingularResolventError) as exc_info:
            green(op, 2.0)
        assert exc_info.value.kind == "SINGULAR"
        assert exc_info.value.exit_code == 3

    def test_ill_conditioned_energy_is_singular(self):
        spec = default_model(coupling=0.0, family=OperatorFamily.DIRECT)
        op = assemble(spec, 2)
        with pytest.raises(SingularResolventError):
            green(op, 1.0)

    def test_negative_regularization(self, free_spec):
        with pytest.raises(ValidationFailure):
            green(assemble(free_spec, 2), 2.5, epsilon=-1.0)

    def test_profile_filters_by_distance(self, default_spec):
        g = green(assemble(default_spec, 4), 2.5)
        profile = g.profile(min_distance=3)
        assert len(profile["distance"]) > 0
        assert profile["distance"].min() >= 3
        assert profile["log_abs"] == pytest.approx(np.log(np.abs(profile["value"])))


class TestBounds:
    def test_off_resonance_green_passes(self, default_spec):
        g = green(assemble(default_spec, 8), 2.5)
        certificate = check_ldt_bounds(g, terminal_rate(1.0, 0.7))
        assert certificate.pass_norm
        assert certificate.pass_decay
        assert certificate.passed
        assert certificate.worst_violators == []
        assert certificate.to_record()["scale"] == 8

    def test_decay_violators_are_reported(self, default_spec):
        g = green(assemble(default_spec, 8), 2.5)
        certificate = check_ldt_bounds(g, 50.0)
        assert not certificate.pass_decay
        assert 0 < len(certificate.worst_violators) <= 5
        worst = certificate.worst_violators[0]
        assert worst["abs_value"] > worst["bound"]

    def test_fit_recovers_the_rate(self):
        distances = np.array([1.0, 2.0, 4.0, 8.0])
        fit = fit_decay(distances, np.exp(-0.5 * distances), gamma=1.0)
        assert fit.rho_bar_fit == pytest.approx(0.5)
        assert fit.min_rate == pytest.approx(0.5)
        assert fit.r_squared == pytest.approx(1.0)
        assert fit.pair_count == 4

    def test_fit_without_pairs(self):
        assert fit_decay(np.array([]), np.array([]), gamma=0.7) is None


class TestResolventIdentity:
    def test_identity_without_hopping(self, free_spec):
        op = assemble(free_spec, 6, TorusPoint(coords=(0.1,)))
        assert resolvent_identity_residual(op, np.arange(5), 2.5) == 0.0

    def test_identity_with_hopping(self, default_spec):
        op = assemble(default_spec, 8, TorusPoint(coords=(0.4,)))
        first = np.abs(op.sites[:, 0]) <= 3
        assert resolvent_identity_residual(op, first, 0.3, relative=True) < 1e-10

    def test_neumann_series_is_close(self, default_spec):
        op = assemble(default_spec, 6, TorusPoint(coords=(0.15,)))
        g = green(op, 2.5)
        assert np.abs(neumann_expansion(op, 2.5) - g.matrix).max() < 1e-5
