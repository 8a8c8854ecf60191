import math

import numpy as np
import pytest

from qp_spectral_lab.errors import ValidationFailure
from qp_spectral_lab.lattice import Region, region_points
from qp_spectral_lab.model import TorusPoint
from qp_spectral_lab.operators import OperatorFamily, assemble, default_model
from qp_spectral_lab.spectral import (
    SpectrumMode,
    branch_extract,
    branch_refine,
    cluster_values,
    continuity_tolerance,
    eigensystem,
    image_measure,
    localization_profile,
    localization_profiles,
    mass_bound,
    middle_third,
    quasimode_residual,
    spectrum_measure_estimate,
)

SITES = np.arange(-10, 11)[:, None]


class TestEigensystem:
    def test_free_laplacian(self):
        op = assemble(default_model(coupling=0.0, family=OperatorFamily.DIRECT), 2)
        system = eigensystem(op)
        expected = sorted(2.0 * math.cos(math.pi * k / 6) for k in range(1, 6))
        assert system.values == pytest.approx(expected)
        assert system.residual < 1e-12
        assert system.orthonormality < 1e-12

    def test_diagonal_operator_uses_exact_basis(self, free_spec):
        system = eigensystem(assemble(free_spec, 4))
        assert system.residual == 0.0
        assert system.orthonormality == 0.0
        assert np.all(np.diff(system.values) >= 0)


class TestLocalization:
    def test_exponential_profile(self):
        vector = np.exp(-0.5 * np.abs(SITES[:, 0]))
        profile = localization_profile(vector, SITES, gamma=1.0, scale=10)
        assert profile.center == (0,)
        assert profile.rate == pytest.approx(0.5)
        assert profile.r_squared == pytest.approx(1.0)
        assert not profile.extended
        assert not profile.maximally_localized

    def test_flat_vector_is_extended(self):
        profile = localization_profile(np.ones(len(SITES)), SITES, gamma=1.0, scale=10)
        assert profile.rate == pytest.approx(0.0)
        assert profile.extended

    def test_rate_is_capped(self):
        vector = np.zeros(len(SITES))
        vector[10] = 1.0
        profile = localization_profile(vector, SITES, gamma=0.7, scale=10)
        assert profile.rate == 10.0
        assert profile.maximally_localized

    def test_middle_third(self):
        assert list(middle_third(9)) == [3, 4, 5]
        assert list(middle_third(1)) == [0]
        assert list(middle_third(2)) == [0]

    def test_profiles_default_to_the_middle_third(self, free_spec):
        system = eigensystem(assemble(free_spec, 4))
        profiles = localization_profiles(system)
        assert [p.index for p in profiles] == [3, 4, 5]
        assert all(p.maximally_localized for p in profiles)
        assert profiles[0].to_row()["extended_flag"] is False


class TestBranches:
    def test_mass_bound(self):
        assert mass_bound(4, 1) == pytest.approx(1.0 / 3.0)

    def test_continuity_tolerance(self, free_spec):
        assert continuity_tolerance(free_spec, 0.01) == pytest.approx(4.0 * math.pi * 0.01)

    def test_free_branch_follows_the_potential(self, free_spec):
        thetas = np.linspace(0.1, 0.2, 5)
        branches = branch_extract(free_spec, 4, thetas)
        assert len(branches) == 1
        branch = branches[0]
        assert branch.energies == pytest.approx(2.0 * np.cos(2.0 * np.pi * thetas))
        assert branch.masses == pytest.approx(np.ones(5))
        assert branch.length == pytest.approx(0.1)
        assert branch.residuals is None

    def test_quasimode_residuals_are_recorded(self, default_spec):
        branches = branch_extract(default_spec, 8, np.linspace(0.1, 0.2, 4), truncation=4, big_size=12)
        assert branches
        for branch in branches:
            assert branch.residuals is not None
            assert branch.max_residual < 0.05
            assert len(branch.to_rows()) == len(branch.thetas)

    def test_extraction_needs_dual_family_and_two_samples(self, free_spec, direct_spec):
        with pytest.raises(ValidationFailure):
            branch_extract(direct_spec, 4, [0.1, 0.2])
        with pytest.raises(ValidationFailure):
            branch_extract(free_spec, 4, [0.1])

    def test_refinement_keeps_the_free_branch(self, free_spec):
        branches = branch_extract(free_spec, 4, np.linspace(0.1, 0.2, 5))
        refined, ledger = branch_refine(free_spec, branches, 8)
        assert len(refined) == 1
        assert refined[0].scale == 8
        assert refined[0].energies == pytest.approx(branches[0].energies)
        assert ledger.loss == pytest.approx(0.0)
        assert ledger.within_bound
        assert ledger.to_record()["allowed_loss"] == pytest.approx(1.0 / 8 + 4.0 * math.pi * 0.025)

    def test_resampling_subdivides_the_parent_grid(self, default_spec):
        branches = branch_extract(default_spec, 4, np.linspace(0.1, 0.2, 5))
        refined, _ = branch_refine(default_spec, branches, 8, resample_factor=2)
        assert len(refined) == 1
        assert len(refined[0].thetas) == 9

    def test_refinement_checks(self, free_spec):
        branches = branch_extract(free_spec, 4, np.linspace(0.1, 0.2, 5))
        with pytest.raises(ValidationFailure):
            branch_refine(free_spec, [], 8)
        with pytest.raises(ValidationFailure):
            branch_refine(free_spec, branches, 2)

    def test_quasimode_of_a_free_eigenvector(self, free_spec):
        sites = region_points(Region.cube(8))
        vector = np.zeros(len(sites))
        vector[8] = 1.0
        theta = TorusPoint(coords=(0.3,))
        energy = 2.0 * math.cos(2.0 * math.pi * 0.3)
        residual = quasimode_residual(free_spec, theta, vector, sites, energy, 4, 12)
        assert residual.residual == pytest.approx(0.0, abs=1e-12)
        assert residual.tail_budget == 0.0

    def test_quasimode_box_checks(self, free_spec):
        sites = region_points(Region.cube(8))
        with pytest.raises(ValidationFailure):
            quasimode_residual(free_spec, TorusPoint(coords=(0.3,)), np.ones(17), sites, 0.0, 8, 12)


class TestSpectrumEstimate:
    def test_cluster_values(self):
        assert cluster_values(np.array([1.0, 0.0, 0.1]), 0.2) == [(0.0, 0.1), (1.0, 1.0)]
        assert cluster_values(np.array([]), 0.2) == []

    def test_branch_mode_is_the_union_of_images(self, free_spec):
        branches = branch_extract(free_spec, 4, np.linspace(0.1, 0.2, 5))
        estimate = spectrum_measure_estimate(branches=branches)
        assert estimate.mode == SpectrumMode.BRANCH
        assert estimate.measure == pytest.approx(image_measure(branches))
        assert estimate.budget["residual_inflation"] == 0.0

    def test_direct_mode_on_the_free_laplacian(self):
        spec = default_model(coupling=0.0, family=OperatorFamily.DIRECT)
        estimate = spectrum_measure_estimate(spec=spec, size=16, phases=np.zeros((2, 1)))
        assert estimate.mode == SpectrumMode.DIRECT
        assert len(estimate.intervals) == 1
        assert estimate.measure == pytest.approx(4.0 * math.cos(math.pi / 34))

    def test_direct_mode_needs_inputs(self, free_spec):
        with pytest.raises(ValidationFailure):
            spectrum_measure_estimate(spec=free_spec, size=4)
        with pytest.raises(ValidationFailure):
            spectrum_measure_estimate(spec=free_spec, size=4, phases=np.zeros((0, 1)))
