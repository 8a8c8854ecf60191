"""
Desk-scale checks on the reference model. Run with `pytest -m slow`.
"""

import math

import numpy as np
import pytest

from qp_spectral_lab.certificates import (
    annulus_decay_certify,
    calibrate_annulus_constant,
    paving_norm_certify,
    perturbation_lemma_check,
    verify_cover,
)
from qp_spectral_lab.commands import run_command, sweep
from qp_spectral_lab.constants import ArtifactNames
from qp_spectral_lab.duality import (
    aubry_dual_map,
    delyon_bound,
    duality_compare,
    poisson_residual_check,
    select_poisson_pairs,
)
from qp_spectral_lab.errors import HypothesisViolatedError
from qp_spectral_lab.greens import norm_threshold, resolvent_identity_residual, terminal_rate
from qp_spectral_lab.lattice import Region, pave_region
from qp_spectral_lab.ldt import (
    cosine_resonance_intervals,
    initial_bad_set,
    interval_union_measure,
    lambda_threshold,
    resonance_measure_scan,
    resonance_window,
    theta_grid,
)
from qp_spectral_lab.model import TorusPoint
from qp_spectral_lab.operators import assemble, default_model, numerical_range
from qp_spectral_lab.sweep import SweepEngine
from tests.conftest import SMALL_COMMANDS, SMALL_GRIDS

pytestmark = pytest.mark.slow

RHO_BAR = terminal_rate(1.0, 0.7)
# Smallest distance of E to the spectrum for a configuration to count as non-resonant
NONRESONANT_GAP = 0.01


def _phase(rng: np.random.Generator) -> TorusPoint:
    return TorusPoint(coords=(float(rng.random()),))


def _identity_residuals(rng: np.random.Generator, dim: int, max_size: int, count: int) -> list[float]:
    residuals = []
    while len(residuals) < count:
        size = int(rng.integers(1, max_size + 1))
        spec = default_model(dim=dim, radius=16 if dim == 1 else 4, coupling=float(rng.uniform(0.0, 0.01)))
        op = assemble(spec, Region.cube(size, dim=dim), _phase(rng))
        first = rng.random(op.size) < 0.5
        energy = float(rng.uniform(*numerical_range(spec)))
        if first.all() or not first.any():
            continue
        block = op.restrict(np.flatnonzero(first))
        if min(np.abs(op.spectrum - energy).min(), np.abs(block.spectrum - energy).min()) < 1e-3:
            continue
        residuals.append(resolvent_identity_residual(op, first, energy, relative=True))
    return residuals


def test_resolvent_identity_on_random_splits():
    """Test the resolvent identity on 100 random splits in one and in two dimensions."""
    rng = np.random.default_rng(1)
    one = _identity_residuals(rng, 1, 32, 100)
    two = _identity_residuals(rng, 2, 6, 100)
    assert max(one) <= 1e-10
    assert max(two) <= 1e-10


def test_initial_step_has_no_violations():
    """Test that phases off the resonant set satisfy the Neumann bounds."""
    coupling = 0.9 * lambda_threshold(0.1, 8, 1)
    report = initial_bad_set(default_model(coupling=coupling), 8, 0.1, 0.5, theta_grid(1, 1000))
    assert report.threshold_met
    assert report.verified > 0
    assert report.violations == 0


def test_perturbation_lemma_on_verified_instances(default_spec):
    """Test that 50 pairs meeting the perturbation hypotheses meet its conclusions."""
    lower, upper = numerical_range(default_spec)
    rng = np.random.default_rng(4)
    reports = []
    for _ in range(2000):
        scale = int(rng.integers(20, 33))
        op = assemble(default_spec, scale, _phase(rng))
        a = op.matrix - float(rng.uniform(lower, upper)) * np.eye(op.size)
        noise = rng.uniform(-1.0, 1.0, a.shape)
        envelope = np.exp(-3.0 * RHO_BAR * scale**0.7 - RHO_BAR * op.distances.astype(float) ** 0.7)
        b = a + 0.25 * (noise + noise.T) * envelope
        report = perturbation_lemma_check(a, b, RHO_BAR, scale, 0.7, op.sites)
        if report.hypotheses_hold:
            reports.append(report)
            if len(reports) == 50:
                break
    assert len(reports) == 50
    assert all(report.conclusions_hold for report in reports)


def test_paving_bound_is_never_exceeded(default_spec):
    """Test the paving norm bound on 100 boxes whose paving blocks all verify."""
    lower, upper = numerical_range(default_spec)
    rng = np.random.default_rng(5)
    certificates = []
    for _ in range(5000):
        region = Region.cube(int(rng.integers(16, 65)))
        block_size = int(rng.integers(4, 9))
        op = assemble(default_spec, region, _phase(rng))
        energy = float(rng.uniform(lower, upper))
        cover = pave_region(region, block_size)
        blocks = verify_cover(op, cover, energy, RHO_BAR)
        if not all(block.verified for block in blocks.values()):
            continue
        certificates.append(paving_norm_certify(op, cover, blocks, energy))
        if len(certificates) == 100:
            break
    assert len(certificates) == 100
    assert all(certificate.sound for certificate in certificates)


def _annulus_certificates(spec, seed: int, count: int, c_res2: float) -> list:
    """Annulus certificates at N = 128, M₀ = 16 around the origin, non-resonant boxes only."""
    lower, upper = numerical_range(spec)
    rng = np.random.default_rng(seed)
    region = Region.cube(128)
    found = []
    for _ in range(50 * count):
        op = assemble(spec, region, _phase(rng))
        energy = float(rng.uniform(lower, upper))
        if np.abs(op.spectrum - energy).min() < NONRESONANT_GAP:
            continue
        try:
            found.append(
                annulus_decay_certify(
                    op, np.zeros((1, 1), dtype=np.int64), 16, energy, RHO_BAR, c_res2=c_res2, norm_factor=4.0
                )
            )
        except HypothesisViolatedError:
            continue
        if len(found) == count:
            break
    return found


def test_annulus_decay_with_the_calibrated_constant(default_spec):
    """Test that a constant calibrated on one batch of boxes holds on 50 fresh ones."""
    calibrated = calibrate_annulus_constant(_annulus_certificates(default_spec, 6, 20, 1.0))
    certificates = _annulus_certificates(default_spec, 7, 50, calibrated)
    assert len(certificates) == 50
    assert all(certificate.holds for certificate in certificates)


def test_ldt_fractions_shrink_and_stay_within_the_lock(make_config, tmp_path):
    """Test the failing fractions at N = 8, 32 on 10⁴ phases against a calibrated lock."""
    grids = {**SMALL_GRIDS, "theta_count": 10_000, "energy_count": 16}
    commands = {
        **SMALL_COMMANDS,
        "ldt_scan": {"scales": [8, 32], "initial_size": 4, "resonance_samples": 0, "heatmap": False},
    }
    config = make_config(grids=grids, commands=commands)
    engine = SweepEngine(4)
    run_command("calibrate", config, tmp_path / "oracle", engine=engine)
    locked = config.with_calibration_lock(tmp_path / "oracle" / ArtifactNames.CALIBRATION_LOCK)

    report = run_command("ldt-scan", locked, tmp_path / "scan", engine=engine)
    coarse, fine = report.results["scales"]
    assert fine["max_failing_fraction"] <= coarse["max_failing_fraction"]
    assert report.results["nonincreasing"]
    assert coarse["within_lock"] and fine["within_lock"]


def test_resonance_scan_without_hopping_matches_the_closed_form(free_spec):
    size = 16
    eta = 1.0 / norm_threshold(size, 0.7)
    window = resonance_window(1.0, 8, 0.7, 1e-4)
    shifts = [n * free_spec.omega.coords[0] for n in range(-size, size + 1)]
    rng = np.random.default_rng(8)
    for k in range(50):
        theta = float(rng.uniform(0.01, 0.99))
        energy = 2.0 * math.cos(2.0 * math.pi * theta) + (1 if k % 2 else -1) * eta * float(rng.uniform(0.5, 1.5))
        estimate = resonance_measure_scan(free_spec, size, TorusPoint(coords=(theta,)), 0, window, energy)
        exact = interval_union_measure(cosine_resonance_intervals(2.0, energy, eta, shifts), estimate.window)
        assert abs(estimate.measure - exact) <= estimate.grid_step


def test_resonance_scan_meets_the_target(default_spec):
    """Test the resonance measure at Ñ = 16 on 100 sampled (θ, E)."""
    window = resonance_window(1.0, 8, 0.7, 1e-4)
    lower, upper = numerical_range(default_spec)
    rng = np.random.default_rng(9)
    within = 0
    for _ in range(100):
        theta = _phase(rng)
        estimate = resonance_measure_scan(default_spec, 16, theta, 0, window, float(rng.uniform(lower, upper)))
        within += estimate.within_target
    assert within >= 95


def test_multiscale_certificates_are_sound(make_config, tmp_path):
    """Test 100 good phases inside the spectrum at (N₁, N) = (8, 64)."""
    commands = {**SMALL_COMMANDS, "msa_verify": {"theta_count": 100, "energy": 0.5}}
    report = run_command("msa-verify", make_config(commands=commands), tmp_path, engine=SweepEngine(4))
    assert report.results["selection"]["selected"] == 100
    assert report.results["certified"] == 100
    assert report.results["unsound"] == 0


def test_middle_third_states_are_localized(make_config, tmp_path):
    commands = {**SMALL_COMMANDS, "localize": {"size": 64, "theta_count": 32}}
    report = run_command("localize", make_config(commands=commands), tmp_path, engine=SweepEngine(4))
    assert report.results["phases"] == 32
    assert report.results["localized_fraction"] >= 0.9
    assert report.results["meets_target"]


def test_branch_machinery(make_config, tmp_path):
    """
    Test that the mass bound always selects a state, that two refinement
    rounds keep the image measure and that the BRANCH measure agrees with the
    DIRECT oracle at λ = 0.01.
    """
    grids = {**SMALL_GRIDS, "branch_samples": 512, "phase_count": 64}
    commands = {**SMALL_COMMANDS, "branch": {"size": 32, "truncation": 16, "big_size": 96, "refine_rounds": 2}}
    config = make_config(spec=default_model(coupling=0.01), grids=grids, commands=commands)

    branches = run_command("branch", config, tmp_path / "branch").results
    initial = branches["initial"]
    assert initial["samples"] == 512
    assert initial["min_mass"] >= initial["mass_bound"] - 1e-12
    assert len(branches["rounds"]) == 2
    resolution = max(r["allowed_loss"] - 1.0 / r["new_scale"] for r in branches["rounds"])
    assert branches["total_loss"] <= 1.0 / 32 + 2.0 * resolution
    assert branches["spectrum"]["measure"] >= 3.5

    measure = run_command("measure", config, tmp_path / "measure").results
    assert measure["estimate"]["measure"] >= 3.5
    budget = measure["oracle"]["budget"]["resolution"] + measure["estimate"]["budget"]["residual_inflation"]
    assert abs(measure["measure_gap"]) <= budget


def test_duality_at_256(make_config, tmp_path):
    """
    Test the DIRECT/DUAL spectrum distance at N = 256 against the frozen
    tolerance, and that doubling N does not move the estimates apart by more
    than the finer clustering resolution.
    """
    spec = default_model(coupling=0.01)
    grids = {**SMALL_GRIDS, "phase_count": 64}
    oracle = duality_compare(spec, 256, 256, 64, seed=7)
    config = make_config(
        spec=spec,
        grids=grids,
        commands={**SMALL_COMMANDS, "duality": {"direct_size": 256, "dual_size": 256, "doublings": 1}},
        calibration={"duality_tolerance": oracle.distance},
    )
    results = run_command("duality", config, tmp_path, engine=SweepEngine(4)).results
    assert results["roundtrip_identity"]
    assert results["parseval_ok"]
    assert results["within_tolerance"]
    first, doubled = results["distances"]
    assert doubled <= first + results["comparisons"][1]["direct"]["budget"]["resolution"]


def test_poisson_identity_on_interior_pairs():
    """Test the Poisson identity on twenty interior eigenpairs of the DIRECT box."""
    op = assemble(aubry_dual_map(default_model()), 64)
    pairs = select_poisson_pairs(op, 32, 20)
    assert len(pairs) == 20
    for index in pairs:
        report = poisson_residual_check(op, index, 32)
        assert report.residual <= 1e-8 + report.budget


def test_delyon_chain_decreases():
    assert delyon_bound(default_model(gamma=1.0), [16, 32, 64]).decreasing


def test_delyon_rise_is_reported(make_config, tmp_path):
    """Test that the poisson command reports where the chain fails to decrease at γ = 0.7."""
    commands = {**SMALL_COMMANDS, "poisson": {"big_size": 64, "sub_size": 32, "pairs": 20}}
    chain = run_command("poisson", make_config(commands=commands), tmp_path).results["delyon"]
    assert chain["decreasing"] is False
    assert chain["rises"] == [[16, 32]]


async def test_sweeps_do_not_depend_on_workers(make_config, tmp_path):
    """Test that an LDT sweep gives byte-identical results at 1 and 8 workers."""
    config = make_config(sweep={"command": "ldt-scan", "start": 0.1, "stop": 0.9, "count": 4})
    await sweep(config, "theta", tmp_path / "one", engine=SweepEngine(1))
    await sweep(config, "theta", tmp_path / "eight", engine=SweepEngine(8))
    one = (tmp_path / "one" / ArtifactNames.RESULTS).read_text()
    assert one == (tmp_path / "eight" / ArtifactNames.RESULTS).read_text()


def test_free_duality_is_close(make_config, tmp_path):
    config = make_config(spec=default_model(coupling=0.0))
    report = run_command("duality", config, tmp_path)
    assert report.results["within_tolerance"]
