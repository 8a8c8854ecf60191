import math

import numpy as np
import pytest

from qp_spectral_lab.certificates import (
    AnnulusCertificate,
    annulus_decay_certify,
    block_resolvent_solve,
    calibrate_annulus_constant,
    paving_bound,
    paving_norm_certify,
    perturbation_lemma_check,
    verify_cover,
    verify_subblock,
)
from qp_spectral_lab.errors import (
    DivergedError,
    HypothesisViolatedError,
    NoGoodAnnulusError,
    UncoveredPointError,
    ValidationFailure,
)
from qp_spectral_lab.greens import green, terminal_rate
from qp_spectral_lab.lattice import Region, pave_region
from qp_spectral_lab.operators import assemble

RHO_BAR = terminal_rate(1.0, 0.7)


@pytest.fixture
def box(default_spec):
    region = Region.cube(16)
    return assemble(default_spec, region), pave_region(region, 4)


class TestSubBlocks:
    def test_off_resonance_block_is_verified(self, box):
        op, _ = box
        certificate = verify_subblock(op, Region.cube(4, center=(3,)), 2.5, RHO_BAR)
        assert certificate.verified
        assert len(certificate.rows) == 9
        assert certificate.op_norm <= 2.1

    def test_singular_block_is_not_verified(self, free_spec):
        op = assemble(free_spec, 8)
        certificate = verify_subblock(op, Region.cube(2), 2.0, RHO_BAR)
        assert certificate.green is None
        assert not certificate.verified
        assert certificate.op_norm == float("inf")

    def test_norm_factor_relaxes_the_block_bound(self, free_spec):
        """Test that a block failing 2e^{M^{γ/2}} passes once the bound is scaled by K."""
        op = assemble(free_spec, 8)
        block = Region.cube(2)
        assert not verify_subblock(op, block, 1.95, RHO_BAR).verified
        assert verify_subblock(op, block, 1.95, RHO_BAR, norm_factor=4.0).verified

    def test_cover_is_verified_block_by_block(self, box):
        op, cover = box
        certificates = verify_cover(op, cover, 2.5, RHO_BAR)
        assert set(certificates) == set(cover.regions())
        assert all(c.verified for c in certificates.values())


class TestBlockResolvent:
    def test_fixed_point_matches_direct_inverse(self, box):
        op, cover = box
        result = block_resolvent_solve(op, cover, 2.5)
        assert result.contraction < 0.5
        assert result.iterations >= 1
        assert result.approximation == pytest.approx(green(op, 2.5).matrix, abs=1e-10)
        assert result.residual < 1e-10

    def test_reuses_verified_blocks(self, box):
        op, cover = box
        certificates = verify_cover(op, cover, 2.5, RHO_BAR)
        result = block_resolvent_solve(op, cover, 2.5, certificates=certificates)
        assert result.residual < 1e-10

    def test_uncovered_site(self, default_spec):
        op = assemble(default_spec, 16)
        with pytest.raises(UncoveredPointError):
            block_resolvent_solve(op, pave_region(Region.cube(8), 2), 2.5)

    def test_singular_block_diverges(self, free_spec):
        region = Region.cube(16)
        op = assemble(free_spec, region)
        with pytest.raises(DivergedError):
            block_resolvent_solve(op, pave_region(region, 4), 2.0)


class TestPerturbationBound:
    def test_small_perturbation(self):
        a = 3.0 * np.eye(4)
        b = a + 0.01 * np.eye(4)
        report = perturbation_lemma_check(a, b, rho_bar=0.5, scale=1, gamma=1.0)
        assert report.hypotheses_hold
        assert report.conclusions_hold
        assert report.inverse_norm == pytest.approx(1.0 / 3.0)
        assert report.perturbed_inverse_norm == pytest.approx(1.0 / 3.01)

    def test_large_perturbation_skips_conclusions(self):
        a = 3.0 * np.eye(4)
        report = perturbation_lemma_check(a, a + np.ones((4, 4)), rho_bar=0.5, scale=1, gamma=1.0)
        assert not report.hypotheses["perturbation"]
        assert report.conclusions is None
        assert report.conclusions_hold is None

    def test_shape_mismatch(self):
        with pytest.raises(ValidationFailure):
            perturbation_lemma_check(np.eye(3), np.eye(4), rho_bar=0.5, scale=1, gamma=1.0)


class TestPavingNorm:
    def test_bound(self):
        assert paving_bound(4, 1, 1.0) == pytest.approx(36.0 * math.exp(2.0))
        assert paving_bound(4, 1, 1.0, norm_factor=3.0) == pytest.approx(108.0 * math.exp(2.0))

    def test_certified_norm_is_sound(self, box):
        op, cover = box
        certificates = verify_cover(op, cover, 2.5, RHO_BAR)
        certificate = paving_norm_certify(op, cover, certificates, 2.5)
        assert certificate.sound
        assert certificate.slack > 1.0
        assert certificate.block_count == len(cover.regions())

    def test_without_cross_check(self, box):
        op, cover = box
        certificates = verify_cover(op, cover, 2.5, RHO_BAR)
        certificate = paving_norm_certify(op, cover, certificates, 2.5, cross_check=False)
        assert certificate.direct_norm is None
        assert certificate.sound is None

    def test_unverified_block(self, box):
        op, cover = box
        with pytest.raises(UncoveredPointError):
            paving_norm_certify(op, cover, {}, 2.5)


class TestAnnulus:
    def test_single_site_core(self, box):
        op, _ = box
        certificate = annulus_decay_certify(op, np.array([[0]]), 4, 2.5, RHO_BAR)
        assert certificate.hypotheses == {"core_diameter": True, "shell_coverage": True}
        assert certificate.corrected_rate == pytest.approx(RHO_BAR - 4**-0.35)
        assert certificate.holds
        assert certificate.worst_rate is not None
        assert certificate.required_constant >= 0.0

    def test_core_too_wide(self, box):
        op, _ = box
        with pytest.raises(HypothesisViolatedError) as exc_info:
            annulus_decay_certify(op, np.array([[0], [1], [2], [3]]), 4, 2.5, RHO_BAR)
        assert exc_info.value.details["hypothesis"] == "core_diameter"

    def test_strict_asymptotics(self, box):
        op, _ = box
        with pytest.raises(HypothesisViolatedError):
            annulus_decay_certify(op, np.array([[0]]), 4, 2.5, RHO_BAR, strict=True)

    def test_required_constant(self):
        certificate = AnnulusCertificate(
            scale=16,
            min_size=4,
            gamma=1.0,
            rho_bar=0.5,
            corrected_rate=0.0,
            hypotheses={},
            asymptotic={},
            worst_rate=0.3,
        )
        assert certificate.required_constant == pytest.approx(0.4)
        assert calibrate_annulus_constant([certificate]) == pytest.approx(0.4)

    def test_calibration_needs_a_cross_check(self):
        with pytest.raises(NoGoodAnnulusError):
            calibrate_annulus_constant([])
