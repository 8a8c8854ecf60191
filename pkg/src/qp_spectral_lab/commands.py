"""
Command dispatch for the lab.

Each command runs module operations on a validated config, writes its
artifacts into the output directory and returns a results mapping. The
results are a pure function of the config; wall-clock timings and the
environment fingerprint go to a separate run report.
"""

import logging
import math
import os
import platform
import time
from contextlib import contextmanager
from dataclasses import dataclass, field
from importlib import metadata
from pathlib import Path
from typing import Any, Callable, Iterator

import numpy as np
from pydantic import ValidationError
from scipy.linalg import LinAlgError, inv

from qp_spectral_lab import plots
from qp_spectral_lab.certificates import block_resolvent_solve, calibrate_annulus_constant
from qp_spectral_lab.constants import SCHEMA_VERSION, ArtifactNames
from qp_spectral_lab.duality import (
    aubry_dual_map,
    delyon_bound,
    dual_vector,
    duality_compare,
    poisson_residual_check,
    select_poisson_pairs,
)
from qp_spectral_lab.errors import DivergedError, NoGoodAnnulusError, SingularResolventError, ValidationFailure
from qp_spectral_lab.formatters import CSVFormatter, JSONFormatter
from qp_spectral_lab.greens import check_ldt_bounds, green, neumann_expansion
from qp_spectral_lab.lattice import Region, pave_region
from qp_spectral_lab.ldt import (
    BadSetEstimate,
    MsaTrace,
    PhaseSelection,
    annulus_site_fraction,
    goodness_norm_factor,
    initial_bad_set,
    ldt_scan_energies,
    multiscale_verify,
    resonance_measure_scan,
    resonance_window,
    select_good_phases,
    theta_grid,
)
from qp_spectral_lab.model import TorusPoint, frequency_family, nondegeneracy_check, verify_gevrey
from qp_spectral_lab.operators import OperatorFamily, assemble, energy_grid, numerical_range
from qp_spectral_lab.settings import ExperimentConfig, MeasureMode, SweepAxis
from qp_spectral_lab.spectral import (
    EigenBranch,
    EigenSystem,
    LocalizationProfile,
    RefinementLedger,
    branch_extract,
    branch_refine,
    eigensystem,
    image_measure,
    localization_profiles,
    mass_bound,
    spectrum_measure_estimate,
)
from qp_spectral_lab.sweep import SweepEngine

logger = logging.getLogger(__name__)

FINGERPRINT_PACKAGES = ("numpy", "scipy", "matplotlib", "pydantic", "pydantic-settings")
LOCALIZED_TARGET = 0.9
DECAY_PLOT_VECTORS = 4


def environment_fingerprint() -> dict[str, Any]:
    """Interpreter, platform and package versions of the running process."""
    packages: dict[str, str | None] = {}
    for name in FINGERPRINT_PACKAGES:
        try:
            packages[name] = metadata.version(name)
        except metadata.PackageNotFoundError:
            packages[name] = None
    return {
        "python": platform.python_version(),
        "implementation": platform.python_implementation(),
        "platform": platform.platform(),
        "machine": platform.machine(),
        "cpu_count": os.cpu_count(),
        "packages": packages,
    }


@dataclass
class CommandContext:
    """
    Everything a command needs besides its config: where artifacts go, the
    engine that owns parallelism, and the timing ledger.
    :param emit: When False (inside sweeps) no artifacts are written
    """

    config: ExperimentConfig
    out_dir: Path
    engine: SweepEngine = field(default_factory=SweepEngine)
    emit: bool = True
    timings: dict[str, Any] = field(default_factory=dict)
    artifacts: list[str] = field(default_factory=list)

    def __post_init__(self) -> None:
        self.config_hash = self.config.config_hash()

    @contextmanager
    def stage(self, name: str) -> Iterator[None]:
        start = time.perf_counter()
        try:
            yield
        finally:
            self.timings[name] = self.timings.get(name, 0.0) + time.perf_counter() - start

    def write_csv(self, name: str, rows: Any) -> None:
        if self.emit:
            CSVFormatter(self.config_hash).write(self.out_dir / name, rows)
            self.artifacts.append(name)

    def write_json(self, name: str, payload: dict[str, Any]) -> None:
        if self.emit:
            JSONFormatter(self.config_hash).write(self.out_dir / name, payload)
            self.artifacts.append(name)

    def plot(self, name: str, draw: Callable[[Path, str], Path]) -> None:
        if self.emit:
            draw(self.out_dir / name, self.config_hash)
            self.artifacts.append(name)


@dataclass(frozen=True)
class RunReport:
    command: str
    config_hash: str
    results: dict[str, Any]
    timings: dict[str, Any]
    artifacts: list[str]
    environment: dict[str, Any]

    def results_payload(self) -> dict[str, Any]:
        """The deterministic part of the report."""
        return {"schema_version": SCHEMA_VERSION, "command": self.command, "results": self.results}

    def report_payload(self) -> dict[str, Any]:
        return {
            "schema_version": SCHEMA_VERSION,
            "command": self.command,
            "timings": self.timings,
            "artifacts": self.artifacts,
            "environment": self.environment,
        }


def _site_label(site: np.ndarray) -> str:
    return " ".join(str(int(c)) for c in site)


def _theta_point(row: np.ndarray) -> TorusPoint:
    return TorusPoint(coords=tuple(float(c) for c in row))


def op_info(ctx: CommandContext) -> dict[str, Any]:
    """Dimensions, hermiticity, tail budget and model checks of the configured operator."""
    config = ctx.config
    spec = config.operator
    size = config.commands.green.size
    op = assemble(spec, size)
    residual = op.hermiticity_residual()
    if residual > config.tolerances.hermiticity:
        logger.warning(f"Hermiticity residual {residual:.3g} above {config.tolerances.hermiticity:.3g}")
    gevrey = verify_gevrey(spec.symbol)
    nondegeneracy = nondegeneracy_check(spec.potential, seed=config.seed)
    lower, upper = numerical_range(spec)

    ctx.write_csv(
        ArtifactNames.OPERATOR_CSV,
        ({"row_site": r, "col_site": c, "value": v} for r, c, v in op.triples()),
    )
    logger.info(f"Operator of dimension {op.size}: hermiticity residual {residual:.3e}, tail budget {op.tail_bound:.3e}")
    return {
        "family": spec.family.value,
        "dim": spec.dim,
        "lattice_dim": spec.lattice_dim,
        "size": size,
        "matrix_dimension": op.size,
        "hermiticity_residual": residual,
        "hermitian": residual <= config.tolerances.hermiticity,
        "tail_budget": op.tail_bound,
        "numerical_range": [lower, upper],
        "coupling": spec.coupling,
        "gamma": spec.gamma,
        "rho": spec.rho,
        "terminal_rate": config.rho_bar,
        "omega": list(spec.omega.coords),
        "diophantine_log_quality": spec.omega.diophantine_log_quality,
        "dualizable": spec.dualizable,
        "gevrey": {"passed": gevrey.passed, "worst_n": gevrey.worst_n, "worst_ratio": gevrey.worst_ratio},
        "nondegeneracy": {
            "min_oscillation": nondegeneracy.min_oscillation,
            "degenerate": nondegeneracy.degenerate,
        },
    }


def green_command(ctx: CommandContext) -> dict[str, Any]:
    """Green's function on the centered box with its large deviation certificate."""
    config = ctx.config
    params = config.commands.green
    spec = config.operator
    op = assemble(spec, params.size)
    with ctx.stage("green"):
        g = green(
            op,
            params.energy,
            params.epsilon,
            residual_tolerance=config.tolerances.residual,
            condition_max=config.tolerances.condition_max,
        )
    rho_bar = config.scale_schedule.rate_at(params.size, spec.rho)
    certificate = check_ldt_bounds(g, rho_bar, scale=params.size)

    neumann_error = None
    if params.epsilon == 0.0 and np.all(np.diag(op.matrix) != params.energy):
        neumann_error = float(np.abs(g.matrix - neumann_expansion(op, params.energy)).max())

    profile = g.profile()
    ctx.write_csv(
        ArtifactNames.GREEN_CSV,
        (
            {
                "site_m": _site_label(op.sites[i]),
                "site_n": _site_label(op.sites[j]),
                "value": value,
                "distance": int(dist),
                "log_abs": log_abs,
            }
            for i, j, value, dist, log_abs in zip(
                profile["rows"], profile["cols"], profile["value"], profile["distance"], profile["log_abs"]
            )
        ),
    )
    return {
        "size": params.size,
        "E": params.energy,
        "epsilon": params.epsilon,
        "op_norm": g.op_norm,
        "condition_estimate": g.condition_estimate,
        "residual": g.residual,
        "neumann_error": neumann_error,
        "certificate": certificate.to_record(),
    }


def _energies(ctx: CommandContext) -> np.ndarray:
    params = ctx.config.commands.ldt_scan
    if params.energies is not None:
        if not params.energies:
            raise ValidationFailure("Energy grid must be nonempty")
        return np.asarray(params.energies, dtype=float)
    return energy_grid(ctx.config.operator, ctx.config.grids.energy_count)


def _ldt_estimates(ctx: CommandContext, scale: int, energies: np.ndarray, thetas: np.ndarray) -> list[BadSetEstimate]:
    config = ctx.config
    grids = config.grids
    with ctx.stage(f"ldt_scan_N{scale}"):
        return ldt_scan_energies(
            config.operator,
            config.scale_schedule,
            scale,
            energies,
            thetas,
            mapper=ctx.engine.map,
            sections=(grids.section_count, grids.line_count, config.seed),
        )


def ldt_scan_command(ctx: CommandContext) -> dict[str, Any]:
    """Failing fractions per scale and energy, the initial step and the resonance scan."""
    config = ctx.config
    params = config.commands.ldt_scan
    spec = config.operator
    schedule = config.scale_schedule
    thetas = theta_grid(spec.phase.dim, config.grids.theta_count, config.seed)
    energies = _energies(ctx)

    scales = []
    for scale in params.scales:
        estimates = _ldt_estimates(ctx, scale, energies, thetas)
        worst = max(e.failing_fraction for e in estimates)
        locked = config.calibration.ldt_failing_fraction.get(scale)
        scales.append(
            {
                "scale": scale,
                "rho_bar": schedule.rate_at(scale, spec.rho),
                "max_failing_fraction": worst,
                "lock_threshold": locked,
                "within_lock": None if locked is None else worst <= locked,
                "estimates": [e.to_summary() for e in estimates],
            }
        )
        ctx.write_csv(
            ArtifactNames.LDT_CSV.format(scale=scale),
            (check.to_row() for estimate in estimates for check in estimate.checks),
        )
        if params.heatmap:
            ctx.plot(
                ArtifactNames.LDT_HEATMAP.format(scale=scale),
                lambda path, config_hash: plots.ldt_heatmap(path, estimates, thetas, config_hash),
            )
    fractions = [s["max_failing_fraction"] for s in scales]

    initial = None
    if spec.family == OperatorFamily.DUAL:
        with ctx.stage("initial_step"):
            reports = ctx.engine.map(
                lambda energy: initial_bad_set(spec, params.initial_size, params.initial_delta, float(energy), thetas),
                energies,
            )
        initial = {
            "size": params.initial_size,
            "delta": params.initial_delta,
            "violations": sum(r.violations for r in reports),
            "reports": [r.to_summary() for r in reports],
        }

    return {
        "scales": scales,
        "nonincreasing": all(a >= b for a, b in zip(fractions, fractions[1:])),
        "initial_step": initial,
        "resonance": _resonance_scan(ctx, energies),
    }


def _resonance_scan(ctx: CommandContext, energies: np.ndarray) -> dict[str, Any]:
    config = ctx.config
    params = config.commands.ldt_scan
    spec = config.operator
    if params.resonance_samples == 0:
        return {"samples": 0, "estimates": []}
    delta1 = resonance_window(spec.rho, config.scale_schedule.n1, spec.gamma, config.tolerances.window_floor)
    rng = np.random.default_rng(config.seed)
    lower, upper = numerical_range(spec)
    samples = [
        (_theta_point(rng.random(spec.phase.dim)), float(rng.uniform(lower, upper)))
        for _ in range(params.resonance_samples)
    ]
    with ctx.stage("resonance_scan"):
        estimates = ctx.engine.map(
            lambda sample: resonance_measure_scan(
                spec, params.resonance_size, sample[0], 0, delta1, sample[1], config.grids.y_count
            ),
            samples,
        )
    within = sum(e.within_target for e in estimates)
    return {
        "samples": len(estimates),
        "size": params.resonance_size,
        "window": delta1,
        "within_target_fraction": within / len(estimates),
        "estimates": [{"theta": list(t.coords), "E": e, **est.to_summary()} for (t, e), est in zip(samples, estimates)],
    }


def _msa_outcomes(
    ctx: CommandContext, norm_factor: float | None = None
) -> tuple[list[MsaTrace | NoGoodAnnulusError], PhaseSelection | None]:
    config = ctx.config
    params = config.commands.msa_verify
    spec = config.operator
    schedule = config.scale_schedule
    rate = schedule.rate_at(schedule.n1, spec.rho)
    factor = config.calibration.msa_norm_factor if norm_factor is None else norm_factor

    selection = None
    if params.good_only:
        with ctx.stage("msa_select"):
            selection = select_good_phases(
                spec,
                schedule,
                params.energy,
                params.theta_count,
                seed=config.seed,
                rho_bar=rate,
                norm_factor=factor,
                max_draws=params.max_draws,
            )
        thetas = selection.thetas
    else:
        thetas = theta_grid(spec.phase.dim, params.theta_count, config.seed)

    def verify(row: np.ndarray) -> MsaTrace | NoGoodAnnulusError:
        try:
            return multiscale_verify(
                spec,
                schedule,
                params.energy,
                _theta_point(row),
                rho_bar=rate,
                c_res2=config.calibration.c_res2,
                strict=config.tolerances.strict_asymptotics,
                norm_factor=factor,
            )
        except NoGoodAnnulusError as e:
            return e

    with ctx.stage("msa_verify"):
        return ctx.engine.map(verify, thetas), selection


def msa_verify_command(ctx: CommandContext) -> dict[str, Any]:
    """Multiscale certification at sampled phases, cross-checked by direct inversion."""
    outcomes, selection = _msa_outcomes(ctx)
    traces = [o for o in outcomes if isinstance(o, MsaTrace)]
    records = [o.to_record() if isinstance(o, MsaTrace) else {"error": o.to_payload()} for o in outcomes]
    unsound = sum(not t.sound for t in traces)
    if unsound:
        logger.warning(f"{unsound} multiscale certificates contradicted by direct inversion")
    return {
        "E": ctx.config.commands.msa_verify.energy,
        "norm_factor": ctx.config.calibration.msa_norm_factor,
        "selection": selection.to_summary() if selection else None,
        "count": len(outcomes),
        "certified": len(traces),
        "no_annulus": len(outcomes) - len(traces),
        "sound": len(traces) - unsound,
        "unsound": unsound,
        "traces": records,
    }


def _localization(ctx: CommandContext) -> list[tuple[np.ndarray, EigenSystem, list[LocalizationProfile]]]:
    config = ctx.config
    params = config.commands.localize
    spec = config.operator
    tolerances = config.tolerances
    thetas = theta_grid(spec.phase.dim, params.theta_count, config.seed)

    def analyse(row: np.ndarray) -> tuple[np.ndarray, EigenSystem, list[LocalizationProfile]]:
        op = assemble(spec, params.size, _theta_point(row))
        system = eigensystem(op, tolerances.eigen_residual, tolerances.orthonormality)
        profiles = localization_profiles(
            system, floor=tolerances.localization_floor, ceiling=tolerances.localization_ceiling
        )
        return row, system, profiles

    with ctx.stage("localize"):
        return ctx.engine.map(analyse, thetas)


def localize_command(ctx: CommandContext) -> dict[str, Any]:
    """Stretched-exponential rates of middle-third eigenvectors at sampled phases."""
    config = ctx.config
    outcomes = _localization(ctx)
    rate_floor = config.calibration.localization_factor * config.rho_bar
    profiles = [p for _, _, batch in outcomes for p in batch]
    rates = np.asarray([p.rate for p in profiles])
    localized = int(np.sum(rates >= rate_floor))

    ctx.write_csv(
        ArtifactNames.LOCALIZATION_CSV,
        (
            {"theta": " ".join(repr(float(c)) for c in row), **profile.to_row()}
            for row, _, batch in outcomes
            for profile in batch
        ),
    )
    if outcomes and outcomes[0][2]:
        _, system, batch = outcomes[0]
        picks = np.unique(np.linspace(0, len(batch) - 1, min(DECAY_PLOT_VECTORS, len(batch))).round().astype(int))
        chosen = [batch[k] for k in picks]
        ctx.plot(
            ArtifactNames.DECAY_PLOT,
            lambda path, config_hash: plots.decay_profiles(path, system, chosen, config_hash),
        )
    fraction = localized / len(profiles) if profiles else 0.0
    return {
        "size": config.commands.localize.size,
        "phases": len(outcomes),
        "states": len(profiles),
        "rate_floor": rate_floor,
        "localized": localized,
        "localized_fraction": fraction,
        "meets_target": fraction >= LOCALIZED_TARGET,
        "extended": sum(p.extended for p in profiles),
        "min_rate": float(rates.min()) if len(rates) else None,
        "median_rate": float(np.median(rates)) if len(rates) else None,
    }


def _branch_thetas(ctx: CommandContext) -> np.ndarray:
    count = ctx.config.grids.branch_samples
    return np.arange(count) / count


def _extract(ctx: CommandContext) -> list[EigenBranch]:
    config = ctx.config
    params = config.commands.branch
    with ctx.stage("branch_extract"):
        return branch_extract(
            config.operator,
            params.size,
            _branch_thetas(ctx),
            truncation=params.truncation,
            big_size=params.big_size,
            continuity_factor=config.calibration.continuity_factor,
            coupling_max=config.calibration.branch_coupling_max,
        )


def _refine(ctx: CommandContext, branches: list[EigenBranch]) -> tuple[list[EigenBranch], list[RefinementLedger]]:
    config = ctx.config
    params = config.commands.branch
    margin = params.big_size - params.size
    ledgers = []
    size = params.size
    for _ in range(params.refine_rounds):
        if not branches:
            break
        size *= 2
        with ctx.stage("branch_refine"):
            branches, ledger = branch_refine(
                config.operator,
                branches,
                size,
                resample_factor=params.resample_factor,
                truncation=params.truncation,
                big_size=size + margin,
                continuity_factor=config.calibration.continuity_factor,
            )
        ledgers.append(ledger)
    return branches, ledgers


def _residual_threshold(ctx: CommandContext, size: int) -> float:
    calibration = ctx.config.calibration
    if calibration.quasimode_threshold is not None:
        return calibration.quasimode_threshold
    schedule = ctx.config.scale_schedule
    return math.exp(-calibration.c5 * math.log(size) ** (ctx.config.operator.gamma / schedule.c1))


def _branch_summary(ctx: CommandContext, branches: list[EigenBranch]) -> dict[str, Any]:
    size = ctx.config.commands.branch.size
    longest = max((b.length for b in branches), default=0.0)
    max_residual = max((b.max_residual for b in branches), default=0.0)
    length_target = size ** (-ctx.config.calibration.c1_branch)
    threshold = _residual_threshold(ctx, size)
    bound = mass_bound(size, ctx.config.operator.lattice_dim)
    return {
        "scale": size,
        "branches": len(branches),
        "samples": sum(len(b.thetas) for b in branches),
        "image_measure": image_measure(branches),
        "mass_bound": bound,
        "min_mass": min((float(b.masses.min()) for b in branches), default=None),
        "longest": longest,
        "length_target": length_target,
        "longest_ok": longest >= length_target,
        "max_residual": max_residual,
        "residual_threshold": threshold,
        "residual_ok": max_residual <= threshold,
    }


def branch_command(ctx: CommandContext) -> dict[str, Any]:
    """Eigen-branches, their refinement rounds and the BRANCH-mode spectrum estimate."""
    branches = _extract(ctx)
    summary = _branch_summary(ctx, branches)
    refined, ledgers = _refine(ctx, branches)
    final = refined if ledgers else branches
    total_loss = sum(ledger.loss for ledger in ledgers)
    allowed = sum(ledger.allowed_loss for ledger in ledgers)

    ctx.write_csv(ArtifactNames.BRANCH_CSV, (row for branch in final for row in branch.to_rows()))
    ctx.plot(
        ArtifactNames.BRANCH_PLOT,
        lambda path, config_hash: plots.branch_curves(path, final, config_hash),
    )
    return {
        "initial": summary,
        "rounds": [ledger.to_record() for ledger in ledgers],
        "total_loss": total_loss,
        "allowed_total_loss": allowed,
        "within_loss_bound": total_loss <= allowed,
        "final_branches": len(final),
        "spectrum": spectrum_measure_estimate(branches=final).to_record() if final else None,
    }


def measure_command(ctx: CommandContext) -> dict[str, Any]:
    """Spectrum measure estimate, BRANCH mode with a DIRECT-mode oracle or DIRECT alone."""
    config = ctx.config
    params = config.commands.branch
    spec = config.operator
    phases = theta_grid(spec.phase.dim, config.grids.phase_count, config.seed)
    with ctx.stage("measure_direct"):
        direct = spectrum_measure_estimate(spec=spec, size=params.size, phases=phases)
    if params.measure_mode == MeasureMode.DIRECT:
        return {"mode": MeasureMode.DIRECT.value, "estimate": direct.to_record()}

    branches = _extract(ctx)
    if not branches:
        raise ValidationFailure("No eigen-branch survived selection; BRANCH mode has nothing to measure")
    estimate = spectrum_measure_estimate(branches=branches)
    return {
        "mode": MeasureMode.BRANCH.value,
        "estimate": estimate.to_record(),
        "oracle": direct.to_record(),
        "measure_gap": direct.measure - estimate.measure,
    }


def duality_command(ctx: CommandContext) -> dict[str, Any]:
    """Round trip of the duality map, Parseval check and spectrum comparison."""
    config = ctx.config
    params = config.commands.duality
    spec = config.operator
    partner = aubry_dual_map(spec)
    roundtrip = aubry_dual_map(partner) == spec

    direct_spec = spec if spec.family == OperatorFamily.DIRECT else partner
    op = assemble(direct_spec, params.direct_size)
    psi = op.decomposition[1][:, op.size // 2]
    parseval = dual_vector(psi=psi).parseval_error

    comparisons = []
    for k in range(params.doublings + 1):
        with ctx.stage(f"duality_{k}"):
            comparisons.append(
                duality_compare(
                    spec,
                    params.direct_size * 2**k,
                    params.dual_size * 2**k,
                    config.grids.phase_count,
                    config.seed,
                )
            )
    distances = [c.distance for c in comparisons]
    return {
        "roundtrip_identity": roundtrip,
        "parseval_error": parseval,
        "parseval_ok": parseval <= config.tolerances.parseval,
        "distances": distances,
        "nonincreasing": all(a >= b for a, b in zip(distances, distances[1:])),
        "tolerance": config.calibration.duality_tolerance,
        "within_tolerance": distances[0] <= config.calibration.duality_tolerance,
        "comparisons": [c.to_record() for c in comparisons],
    }


def poisson_command(ctx: CommandContext) -> dict[str, Any]:
    """Poisson identity on interior eigenpairs of the DIRECT box and the Delyon chain of its dual."""
    config = ctx.config
    params = config.commands.poisson
    spec = config.operator
    direct = spec if spec.family == OperatorFamily.DIRECT else aubry_dual_map(spec)
    dual = aubry_dual_map(direct)

    op = assemble(direct, params.big_size)
    indices = select_poisson_pairs(op, params.sub_size, params.pairs, config.tolerances.poisson_gap)
    with ctx.stage("poisson"):
        reports = ctx.engine.map(lambda s: poisson_residual_check(op, s, params.sub_size), indices)
    within = [r.residual <= config.tolerances.poisson_residual + r.budget for r in reports]
    ctx.write_csv(
        ArtifactNames.POISSON_CSV,
        ({**r.to_record(), "within_budget": ok} for r, ok in zip(reports, within)),
    )

    energy = float(np.median([r.energy for r in reports])) if reports else None
    with ctx.stage("delyon"):
        chain = delyon_bound(dual, params.delyon_scales, theta=dual.phase, energy=energy)
    return {
        "big_size": params.big_size,
        "sub_size": params.sub_size,
        "pairs": len(reports),
        "all_within_budget": all(within),
        "max_residual": max((r.residual for r in reports), default=None),
        "delyon_energy": energy,
        "delyon": chain.to_record(),
    }


def calibrate_command(ctx: CommandContext) -> dict[str, Any]:
    """
    Run the oracle computations and freeze the derived thresholds into the
    calibration lockfile.
    """
    config = ctx.config
    spec = config.operator
    frozen: dict[str, Any] = {}
    observations: dict[str, Any] = {}

    thetas = theta_grid(spec.phase.dim, config.grids.theta_count, config.seed)
    energies = _energies(ctx)
    fractions = {}
    for scale in config.commands.ldt_scan.scales:
        fractions[scale] = max(e.failing_fraction for e in _ldt_estimates(ctx, scale, energies, thetas))
    frozen["ldt_failing_fraction"] = fractions

    rates = np.asarray([p.rate for _, _, batch in _localization(ctx) for p in batch])
    if len(rates):
        frozen["localization_factor"] = float(np.quantile(rates, 1.0 - LOCALIZED_TARGET)) / config.rho_bar
        observations["localization_rates"] = {"min": float(rates.min()), "median": float(np.median(rates))}

    if spec.dualizable:
        params = config.commands.duality
        with ctx.stage("duality_0"):
            comparison = duality_compare(spec, params.direct_size, params.dual_size, config.grids.phase_count, config.seed)
        frozen["duality_tolerance"] = comparison.distance

    if spec.family == OperatorFamily.DUAL:
        branches = _extract(ctx)
        size = config.commands.branch.size
        max_residual = max((b.max_residual for b in branches), default=0.0)
        longest = max((b.length for b in branches), default=0.0)
        frozen["quasimode_threshold"] = max_residual
        if 0.0 < max_residual < 1.0:
            frozen["c5"] = -math.log(max_residual) / math.log(size) ** (spec.gamma / config.scale_schedule.c1)
        if 0.0 < longest < 1.0:
            frozen["c1_branch"] = -math.log(longest) / math.log(size)
        observations["branches"] = {"count": len(branches), "longest": longest, "max_residual": max_residual}

        schedule = config.scale_schedule
        site_fraction = annulus_site_fraction(schedule, spec.lattice_dim)
        with ctx.stage("msa_norm_factor"):
            factor = goodness_norm_factor(
                spec,
                schedule,
                config.commands.msa_verify.energy,
                thetas,
                site_fraction,
                mapper=ctx.engine.map,
            )
        frozen["msa_norm_factor"] = factor
        observations["msa_site_fraction"] = site_fraction

        outcomes, _ = _msa_outcomes(ctx, norm_factor=factor)
        certificates = [o.annulus for o in outcomes if isinstance(o, MsaTrace)]
        try:
            frozen["c_res2"] = calibrate_annulus_constant(certificates)
        except NoGoodAnnulusError as e:
            logger.warning(f"C_res2 kept at {config.calibration.c_res2}: {e.message}")
        observations["annulus_certificates"] = len(certificates)

    calibration = config.calibration.model_validate({**config.calibration.model_dump(), **frozen})
    lock = {
        "schema_version": SCHEMA_VERSION,
        "calibration": calibration.model_dump(mode="json"),
        "observations": observations,
    }
    ctx.write_json(ArtifactNames.CALIBRATION_LOCK, lock)
    logger.info(f"Froze {len(frozen)} calibration constants")
    return {"frozen": sorted(frozen), **lock}


def bench_command(ctx: CommandContext) -> dict[str, Any]:
    """
    Block-resolvent fixed point against direct inversion. Accuracy goes to the
    results; timings and the crossover size only to the run report.
    """
    config = ctx.config
    params = config.commands.bench
    spec = config.operator
    if spec.lattice_dim != 1:
        raise ValidationFailure("Benchmarks run on one-dimensional operators", lattice_dim=spec.lattice_dim)

    results = []
    rows = []
    timings = {}
    for size in params.sizes:
        region = Region.cube(size, dim=1)
        op = assemble(spec, region)
        cover = pave_region(region, params.block_size)
        shifted = op.matrix - params.energy * np.eye(op.size)
        direct_time = block_time = math.inf
        outcome = None
        for _ in range(params.repeats):
            start = time.perf_counter()
            try:
                reference = inv(shifted)
            except LinAlgError as exc:
                raise SingularResolventError(f"H_N - E is singular at N={size}", energy=params.energy, size=size) from exc
            direct_time = min(direct_time, time.perf_counter() - start)
            start = time.perf_counter()
            try:
                outcome = block_resolvent_solve(op, cover, params.energy, tolerance=config.tolerances.fixed_point)
            except DivergedError as e:
                logger.warning(f"Block solve diverged at N={size}: {e.message}")
                outcome = None
                break
            block_time = min(block_time, time.perf_counter() - start)

        error = float(np.abs(outcome.approximation - reference).max()) if outcome else None
        record = {
            "N": size,
            "matrix_dimension": op.size,
            "blocks": len(cover.regions()),
            "diverged": outcome is None,
            "error": error,
            "within_tolerance": None if error is None else error <= config.tolerances.block_error,
            "contraction": outcome.contraction if outcome else None,
            "iterations": outcome.iterations if outcome else None,
        }
        results.append(record)
        timings[size] = {"direct": direct_time, "block": None if outcome is None else block_time}
        rows.append({**record, "direct_seconds": direct_time, "block_seconds": timings[size]["block"]})

    crossover = next(
        (n for n, t in timings.items() if t["block"] is not None and t["block"] < t["direct"]),
        None,
    )
    ctx.timings["bench"] = {"sizes": timings, "crossover": crossover}
    ctx.write_csv(ArtifactNames.BENCH_CSV, rows)
    return {"energy": params.energy, "block_size": params.block_size, "sizes": results}


COMMANDS: dict[str, Callable[[CommandContext], dict[str, Any]]] = {
    "op-info": op_info,
    "green": green_command,
    "ldt-scan": ldt_scan_command,
    "msa-verify": msa_verify_command,
    "localize": localize_command,
    "branch": branch_command,
    "measure": measure_command,
    "duality": duality_command,
    "poisson": poisson_command,
    "calibrate": calibrate_command,
    "bench": bench_command,
}

SWEEPABLE = frozenset(COMMANDS) - {"calibrate", "bench"}


def _finish(ctx: CommandContext, command: str, results: dict[str, Any]) -> RunReport:
    report = RunReport(
        command=command,
        config_hash=ctx.config_hash,
        results=results,
        timings=ctx.timings,
        artifacts=list(ctx.artifacts) + [ArtifactNames.RESULTS, ArtifactNames.RUN_REPORT],
        environment=environment_fingerprint(),
    )
    ctx.out_dir.mkdir(parents=True, exist_ok=True)
    JSONFormatter(ctx.config_hash).write(ctx.out_dir / ArtifactNames.RESULTS, report.results_payload())
    JSONFormatter(ctx.config_hash).write(ctx.out_dir / ArtifactNames.RUN_REPORT, report.report_payload())
    return report


def run_command(
    name: str,
    config: ExperimentConfig,
    out_dir: Path,
    engine: SweepEngine | None = None,
) -> RunReport:
    """
    Run one command and write its artifacts, results.json and run_report.json.
    :param name: Command name
    :param config: Validated config
    :param out_dir: Output directory
    :param engine: Engine for parallel maps, one with config.workers threads by default
    :return: The run report
    :raises ValidationFailure: For an unknown command or invalid inputs
    :raises NumericalFailure: When a numerical operation fails
    """
    if name not in COMMANDS:
        raise ValidationFailure(f"Unknown command {name!r}", command=name, known=sorted(COMMANDS))
    ctx = CommandContext(config=config, out_dir=Path(out_dir), engine=engine or SweepEngine(config.workers))
    logger.info(f"Running {name} (config {ctx.config_hash[:12]})")
    with ctx.stage("total"):
        results = COMMANDS[name](ctx)
    return _finish(ctx, name, results)


def sweep_point_config(config: ExperimentConfig, axis: SweepAxis, value: float) -> ExperimentConfig:
    """The config of one sweep point: the swept parameter replaced by value."""
    spec = config.operator
    if axis == SweepAxis.THETA:
        coords = list(spec.phase.coords)
        coords[0] = value
        return config.with_operator(spec.with_phase(TorusPoint(coords=tuple(coords))))
    if axis == SweepAxis.COUPLING:
        if value < 0:
            raise ValidationFailure(f"Coupling must be nonnegative, got {value}", value=value)
        return config.with_operator(spec.with_coupling(value))
    if axis == SweepAxis.FREQUENCY:
        try:
            omega = frequency_family(spec.omega, value)
        except ValidationError as exc:
            raise ValidationFailure(f"No admissible frequency at t={value}", value=value) from exc
        return config.with_operator(spec.model_copy(update={"omega": omega}))

    commands = config.commands
    updated = commands.model_copy(
        update={
            "green": commands.green.model_copy(update={"energy": value}),
            "msa_verify": commands.msa_verify.model_copy(update={"energy": value}),
            "bench": commands.bench.model_copy(update={"energy": value}),
            "ldt_scan": commands.ldt_scan.model_copy(update={"energies": [value]}),
        }
    )
    return config.model_copy(update={"commands": updated})


def _scalar_columns(result: dict[str, Any] | None) -> dict[str, Any]:
    if not result:
        return {}
    return {k: v for k, v in result.items() if isinstance(v, (bool, int, float, str)) or v is None}


async def sweep(
    config: ExperimentConfig,
    axis: SweepAxis | str,
    out_dir: Path,
    command: str | None = None,
    engine: SweepEngine | None = None,
) -> RunReport:
    """
    Evaluate a command at every point of the configured grid along one axis.
    Points run in parallel; results are reduced in grid order. The report is
    written before the partial-failure policy is applied.
    :raises ValidationFailure: For an empty grid or a command that cannot be swept
    :raises SweepFailureError: If the failure fraction exceeds config.failure_fraction_max
    """
    axis = SweepAxis(axis)
    name = command or config.sweep.command
    if name not in SWEEPABLE:
        raise ValidationFailure(f"Command {name!r} cannot be swept", command=name, sweepable=sorted(SWEEPABLE))
    engine = engine or SweepEngine(config.workers)
    serial = SweepEngine(1)

    def evaluate(value: float) -> dict[str, Any]:
        point = CommandContext(
            config=sweep_point_config(config, axis, value),
            out_dir=Path(out_dir),
            engine=serial,
            emit=False,
        )
        return COMMANDS[name](point)

    ctx = CommandContext(config=config, out_dir=Path(out_dir), engine=engine)
    with ctx.stage("total"):
        outcome = await engine.sweep(axis.value, config.sweep.grid(), evaluate)
    ctx.write_csv(
        ArtifactNames.SWEEP_CSV,
        (
            {
                "index": p.index,
                axis.value: p.value,
                "ok": p.ok,
                "error_kind": p.error["kind"] if p.error else None,
                **_scalar_columns(p.result),
            }
            for p in outcome.points
        ),
    )
    report = _finish(ctx, name, {"sweep": outcome.to_record()})
    outcome.check(config.failure_fraction_max)
    return report
