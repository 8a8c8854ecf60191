"""
Large deviation machinery: the initial-step bad set, θ-grid scans of the
norm and decay bounds, the resonance-measure scan and the multiscale step.
"""

import logging
import math
from dataclasses import dataclass, field, replace
from typing import Any, Callable, Iterable, Sequence

import numpy as np

from qp_spectral_lab.certificates import (
    AnnulusCertificate,
    PavingCertificate,
    annulus_cross_check,
    annulus_decay_certify,
    paving_norm_certify,
    verify_cover,
)
from qp_spectral_lab.errors import (
    HypothesisViolatedError,
    NoGoodAnnulusError,
    SingularResolventError,
    UncoveredPointError,
    ValidationFailure,
)
from qp_spectral_lab.greens import CONDITION_MAX, bound_certificate, green, norm_threshold, terminal_rate
from qp_spectral_lab.lattice import Region, RegionShape, enumerate_shapes, pave_region, region_points
from qp_spectral_lab.model import TorusPoint, wrap
from qp_spectral_lab.operators import AssembledOperator, OperatorFamily, OperatorSpec, assemble
from qp_spectral_lab.settings import ScaleSchedule

logger = logging.getLogger(__name__)

MIN_SCAN_POINTS = 1000
MAX_DRAWS_PER_PHASE = 20

Interval = tuple[float, float]


def theta_grid(dim: int, count: int, seed: int = 0) -> np.ndarray:
    """
    Phase grid of shape (count, dim): the uniform grid k/count on T, seeded
    uniform samples in higher dimension.
    """
    if count < 1:
        raise ValidationFailure("Phase grid must be nonempty")
    if dim == 1:
        return (np.arange(count) / count)[:, None]
    return np.random.default_rng(seed).random((count, dim))


def grid_step(dim: int, count: int) -> float:
    return float(count ** (-1.0 / dim))


def lambda_threshold(delta: float, scale: int, dim: int) -> float:
    """Largest coupling with λ⁻¹ ≥ 2δ⁻¹(2N+1)^d."""
    return delta / (2.0 * (2 * scale + 1) ** dim)


def _profile_orbit(spec: OperatorSpec, thetas: np.ndarray, sites: np.ndarray) -> np.ndarray:
    """f(θ + nω) for every phase and site, shape (phases, sites)."""
    omega = spec.omega.as_array()
    if spec.profile.dim == spec.dim:
        points = wrap(thetas[:, None, :] + (sites * omega[None, :])[None, :, :])
    else:
        points = wrap(thetas[:, :1] + (sites @ omega)[None, :])[:, :, None]
    flat = points.reshape(-1, points.shape[-1])
    return spec.profile.evaluate_many(flat).reshape(len(thetas), len(sites))


@dataclass(frozen=True)
class ShapeCheck:
    theta: tuple[float, ...]
    energy: float
    shape_id: str
    pass_norm: bool
    pass_decay: bool
    op_norm: float
    worst_pair_rate: float | None
    singular: bool = False

    @property
    def passed(self) -> bool:
        return self.pass_norm and self.pass_decay

    def to_row(self) -> dict[str, Any]:
        row: dict[str, Any] = {f"theta_{i}": t for i, t in enumerate(self.theta)}
        row.update(
            {
                "E": self.energy,
                "shape_id": self.shape_id,
                "pass_norm": self.pass_norm,
                "pass_decay": self.pass_decay,
                "op_norm": self.op_norm,
                "worst_pair_rate": self.worst_pair_rate,
                "singular": self.singular,
            }
        )
        return row


@dataclass(frozen=True, eq=False)
class BadSetEstimate:
    scale: int
    energy: float
    omega: tuple[float, ...]
    grid_size: int
    grid_step: float
    failing_fraction: float
    section_measures: list[float]
    target: float
    indicator: np.ndarray
    checks: list[ShapeCheck] = field(default_factory=list)

    def to_summary(self) -> dict[str, Any]:
        return {
            "scale": self.scale,
            "E": self.energy,
            "omega": list(self.omega),
            "grid_size": self.grid_size,
            "grid_step": self.grid_step,
            "failing_fraction": self.failing_fraction,
            "section_measures": self.section_measures,
            "target": self.target,
        }


@dataclass(frozen=True, eq=False)
class InitialStepReport:
    """The sampled bad set X_N of the initial step and the Neumann-regime checks."""

    spec: OperatorSpec
    delta: float
    estimate: BadSetEstimate
    lambda_threshold: float
    threshold_met: bool
    verified: int
    violations: int

    def indicator(self, thetas: np.ndarray) -> np.ndarray:
        """Membership in X_N = ∪_{|n|≤N} {θ: |f(θ+nω) - E| < δ}."""
        sites = region_points(Region.cube(self.estimate.scale, dim=self.spec.dim))
        values = _profile_orbit(self.spec, np.atleast_2d(thetas), sites)
        return np.any(np.abs(values - self.estimate.energy) < self.delta, axis=1)

    def to_summary(self) -> dict[str, Any]:
        return {
            **self.estimate.to_summary(),
            "delta": self.delta,
            "lambda_threshold": self.lambda_threshold,
            "threshold_met": self.threshold_met,
            "verified": self.verified,
            "violations": self.violations,
        }


def initial_bad_set(
    spec: OperatorSpec,
    scale: int,
    delta: float,
    energy: float,
    thetas: np.ndarray,
    verify_limit: int | None = None,
) -> InitialStepReport:
    """
    Sample X_N and, when λ ≤ δ/(2(2N+1)^d), check ‖G_Λ‖ ≤ 2/δ and
    |G(n,n')| ≤ (2/δ)e^{-ρ|n-n'|^γ} at phases outside X_N.
    :param spec: DUAL spec
    :param scale: Size N of Λ = [-N, N]^d
    :param delta: Resonance width δ > 0
    :param energy: Energy E
    :param thetas: Phase grid of shape (count, profile dim)
    :param verify_limit: Cap on the number of phases inverted
    :return: The report
    """
    if spec.family != OperatorFamily.DUAL:
        raise ValidationFailure("The initial step is stated for the DUAL family")
    if delta <= 0:
        raise ValidationFailure(f"δ must be positive, got {delta}")
    thetas = np.atleast_2d(np.asarray(thetas, dtype=float))
    d = spec.dim
    region = Region.cube(scale, dim=d)
    sites = region_points(region)

    resonant = np.any(np.abs(_profile_orbit(spec, thetas, sites) - energy) < delta, axis=1)
    threshold = lambda_threshold(delta, scale, d)
    threshold_met = spec.coupling <= threshold

    verified = violations = 0
    if threshold_met:
        good = np.flatnonzero(~resonant)
        if verify_limit is not None:
            good = good[:verify_limit]
        for k in good:
            op = assemble(spec, region, TorusPoint(coords=tuple(thetas[k])))
            g = green(op, energy)
            envelope = (2.0 / delta) * np.exp(-spec.rho * op.distances.astype(float) ** spec.gamma)
            off_diagonal = op.distances > 0
            entry_ok = np.all(np.abs(g.matrix[off_diagonal]) <= envelope[off_diagonal] * (1 + 1e-12))
            if g.op_norm > 2.0 / delta or not entry_ok:
                violations += 1
            verified += 1
        if violations:
            logger.warning(f"Initial step: {violations} of {verified} phases outside X_N violate the bounds")
    else:
        logger.info(f"λ={spec.coupling} exceeds the initial-step threshold {threshold:.3g}; bounds not checked")

    p = thetas.shape[1]
    fraction = float(resonant.mean())
    estimate = BadSetEstimate(
        scale=scale,
        energy=energy,
        omega=spec.omega.coords,
        grid_size=len(thetas),
        grid_step=grid_step(p, len(thetas)),
        failing_fraction=fraction,
        section_measures=[fraction] if p == 1 else [],
        target=float("nan"),
        indicator=resonant,
    )
    return InitialStepReport(
        spec=spec,
        delta=delta,
        estimate=estimate,
        lambda_threshold=threshold,
        threshold_met=threshold_met,
        verified=verified,
        violations=violations,
    )


def _check_energy(
    op: AssembledOperator,
    theta: tuple[float, ...],
    shape_id: str,
    energy: float,
    scale: int,
    rho_bar: float,
    condition_max: float = CONDITION_MAX,
) -> ShapeCheck:
    values, vectors = op.decomposition
    gaps = values - energy
    smallest = float(np.abs(gaps).min())
    # same singularity rule as green()
    if smallest == 0.0 or float(np.abs(gaps).max()) / smallest > condition_max:
        return ShapeCheck(theta, energy, shape_id, False, False, float("inf"), None, singular=True)
    matrix = (vectors / gaps[None, :]) @ vectors.conj().T
    cert = bound_certificate(
        matrix,
        1.0 / smallest,
        op.distances,
        op.sites,
        scale,
        op.spec.gamma,
        rho_bar,
    )
    return ShapeCheck(
        theta=theta,
        energy=energy,
        shape_id=shape_id,
        pass_norm=cert.pass_norm,
        pass_decay=cert.pass_decay,
        op_norm=cert.op_norm,
        worst_pair_rate=cert.worst_pair_rate,
    )


def scan_theta(
    spec: OperatorSpec,
    scale: int,
    theta: Sequence[float],
    energies: Sequence[float],
    rho_bar: float,
    shapes: list[RegionShape] | None = None,
) -> list[list[ShapeCheck]]:
    """
    Check the bounds at one phase for every shape Q ∈ ℰ_N⁰ and every energy.
    The decomposition of each H_Q(θ) is shared across energies.
    :return: Per energy, the checks of all shapes
    """
    theta = tuple(float(t) for t in theta)
    shapes = shapes if shapes is not None else enumerate_shapes(spec.lattice_dim)
    origin = (0,) * spec.lattice_dim
    results: list[list[ShapeCheck]] = [[] for _ in energies]
    for shape in shapes:
        op = assemble(spec, Region.from_shape(shape, scale, origin), TorusPoint(coords=theta))
        for k, energy in enumerate(energies):
            results[k].append(_check_energy(op, theta, shape.shape_id, float(energy), scale, rho_bar))
    return results


def summarize_scan(
    spec: OperatorSpec,
    scale: int,
    energies: Sequence[float],
    thetas: np.ndarray,
    per_theta: Sequence[list[list[ShapeCheck]]],
    c1: float,
    section_measures: Sequence[list[float]] | None = None,
) -> list[BadSetEstimate]:
    """Reduce per-phase checks, in grid order, into one estimate per energy."""
    thetas = np.atleast_2d(thetas)
    p = thetas.shape[1]
    estimates = []
    for k, energy in enumerate(energies):
        checks = [check for outcome in per_theta for check in outcome[k]]
        indicator = np.asarray([not all(c.passed for c in outcome[k]) for outcome in per_theta], dtype=bool)
        fraction = float(indicator.mean()) if len(indicator) else 0.0
        sections = list(section_measures[k]) if section_measures is not None else ([fraction] if p == 1 else [])
        estimates.append(
            BadSetEstimate(
                scale=scale,
                energy=float(energy),
                omega=spec.omega.coords,
                grid_size=len(thetas),
                grid_step=grid_step(p, len(thetas)),
                failing_fraction=fraction,
                section_measures=sections,
                target=math.exp(-(scale**c1)),
                indicator=indicator,
                checks=checks,
            )
        )
    return estimates


def section_measures(
    spec: OperatorSpec,
    scale: int,
    energy: float,
    rho_bar: float,
    section_count: int,
    line_count: int,
    seed: int = 0,
) -> list[float]:
    """
    For each coordinate j, the largest failing measure of θ_j along a line,
    over seeded random sections θ_j¬.
    """
    p = spec.phase.dim
    rng = np.random.default_rng(seed)
    line = np.arange(line_count) / line_count
    measures = []
    for j in range(p):
        worst = 0.0
        for section in rng.random((section_count, p)):
            failed = 0
            for y in line:
                theta = section.copy()
                theta[j] = y
                outcome = scan_theta(spec, scale, theta, [energy], rho_bar)[0]
                failed += not all(c.passed for c in outcome)
            worst = max(worst, failed / line_count)
        measures.append(worst)
    return measures


def ldt_scan_energies(
    spec: OperatorSpec,
    schedule: ScaleSchedule,
    scale: int,
    energies: Sequence[float],
    thetas: np.ndarray,
    rho_bar: float | None = None,
    mapper: Callable[[Callable[[Any], Any], Iterable[Any]], Iterable[Any]] = map,
    sections: tuple[int, int, int] | None = None,
) -> list[BadSetEstimate]:
    """
    Scan the bounds over a phase grid for several energies at once.
    :param spec: Operator spec
    :param schedule: Scale schedule (supplies c1 for the target e^{-N^{c1}})
    :param scale: Size N
    :param energies: Energies E
    :param thetas: Phase grid of shape (count, phase dim)
    :param rho_bar: Decay rate, defaults to the schedule rate at N
    :param mapper: map-like callable applied over the grid
    :param sections: (section_count, line_count, seed) for higher-dimensional phases
    :return: One estimate per energy
    """
    if len(energies) == 0:
        raise ValidationFailure("Energy grid must be nonempty")
    thetas = np.atleast_2d(np.asarray(thetas, dtype=float))
    if len(thetas) < MIN_SCAN_POINTS:
        logger.warning(
            f"Phase grid of {len(thetas)} points is below {MIN_SCAN_POINTS}; failing fractions are coarse"
        )
    rate = schedule.rate_at(scale, spec.rho) if rho_bar is None else rho_bar
    shapes = enumerate_shapes(spec.lattice_dim)
    per_theta = list(mapper(lambda theta: scan_theta(spec, scale, theta, energies, rate, shapes), thetas))

    measures = None
    if sections is not None and thetas.shape[1] > 1:
        count, line_count, seed = sections
        measures = [section_measures(spec, scale, e, rate, count, line_count, seed) for e in energies]
    estimates = summarize_scan(spec, scale, energies, thetas, per_theta, schedule.c1, measures)
    for estimate in estimates:
        logger.debug(f"LDT scan N={scale}, E={estimate.energy:.4g}: failing fraction {estimate.failing_fraction:.4g}")
    return estimates


def ldt_scan(
    spec: OperatorSpec,
    schedule: ScaleSchedule,
    scale: int,
    energy: float,
    thetas: np.ndarray,
    rho_bar: float | None = None,
) -> BadSetEstimate:
    """A θ fails if any shape of ℰ_N⁰ fails the norm or decay bound."""
    return ldt_scan_energies(spec, schedule, scale, [energy], thetas, rho_bar)[0]


def normalize_intervals(intervals: Iterable[Interval]) -> list[Interval]:
    """Sort and merge closed intervals into a disjoint union."""
    merged: list[list[float]] = []
    for lo, hi in sorted((float(a), float(b)) for a, b in intervals if b >= a):
        if merged and lo <= merged[-1][1]:
            merged[-1][1] = max(merged[-1][1], hi)
        else:
            merged.append([lo, hi])
    return [(lo, hi) for lo, hi in merged]


def interval_union_measure(intervals: Iterable[Interval], window: Interval | None = None) -> float:
    """Lebesgue measure of a union of intervals, optionally clipped to a window."""
    clipped = []
    for lo, hi in intervals:
        if window is not None:
            lo, hi = max(lo, window[0]), min(hi, window[1])
        if hi > lo:
            clipped.append((lo, hi))
    return float(sum(hi - lo for lo, hi in normalize_intervals(clipped)))


def _torus_interval(lo: float, hi: float) -> list[Interval]:
    """Split an arc [lo, hi] of T (lo taken mod 1) into intervals of [0, 1]."""
    length = hi - lo
    if length >= 1.0:
        return [(0.0, 1.0)]
    start = lo % 1.0
    end = start + length
    if end <= 1.0:
        return [(start, end)]
    return [(start, 1.0), (0.0, end - 1.0)]


def cosine_resonance_intervals(
    amplitude: float,
    energy: float,
    eta: float,
    shifts: Iterable[float],
) -> list[Interval]:
    """
    {y ∈ [0, 1]: |A cos 2π(y + s) - E| ≤ η for some shift s} as disjoint intervals.
    """
    lo = max((energy - eta) / amplitude, -1.0)
    hi = min((energy + eta) / amplitude, 1.0)
    if lo > hi:
        return []
    # cos 2πφ ∈ [lo, hi] on φ ∈ [a, b] ∪ [1 - b, 1 - a]
    a = math.acos(hi) / (2 * math.pi)
    b = math.acos(lo) / (2 * math.pi)
    pieces: list[Interval] = []
    for s in shifts:
        pieces += _torus_interval(a - s, b - s)
        pieces += _torus_interval(1.0 - b - s, 1.0 - a - s)
    return normalize_intervals(pieces)


def resonance_window(rho: float, n1: int, gamma: float, floor: float) -> float:
    """Window width δ₁ = 2e^{-10ρN₁^γ}, relaxed to at least floor."""
    return max(2.0 * math.exp(-10.0 * rho * n1**gamma), floor)


@dataclass(frozen=True, eq=False)
class ResonanceEstimate:
    size: int
    axis: int
    window: Interval
    measure: float
    target: float
    grid_step: float
    samples: np.ndarray
    bad: np.ndarray

    @property
    def within_target(self) -> bool:
        return self.measure <= self.target + self.grid_step

    def to_summary(self) -> dict[str, Any]:
        return {
            "size": self.size,
            "axis": self.axis,
            "window": list(self.window),
            "measure": self.measure,
            "target": self.target,
            "grid_step": self.grid_step,
            "within_target": self.within_target,
        }


def resonance_measure_scan(
    spec: OperatorSpec,
    size: int,
    theta: TorusPoint,
    axis: int,
    delta1: float,
    energy: float,
    y_count: int = 512,
) -> ResonanceEstimate:
    """
    Estimate mes{y: |y - θ_j| ≤ δ₁/2, ‖G_Λ(E; θ with θ_j = y)‖ ≥ e^{Ñ^{γ/2}}}
    on the centered cube of size Ñ by midpoint sampling.
    :param spec: Operator spec
    :param size: Size Ñ
    :param theta: Base phase
    :param axis: Coordinate j varied
    :param delta1: Window width
    :param energy: Energy E
    :param y_count: Samples across the window
    :return: The estimate and the sampled indicator
    """
    if not 0 <= axis < theta.dim:
        raise ValidationFailure(f"Axis {axis} outside a phase of dimension {theta.dim}")
    center = theta.coords[axis]
    window = (center - delta1 / 2.0, center + delta1 / 2.0)
    target = math.exp(-(size ** (spec.gamma / 3.0)))
    if delta1 <= 0 or y_count < 1:
        empty = np.zeros(0)
        return ResonanceEstimate(size, axis, window, 0.0, target, 0.0, empty, empty.astype(bool))

    step = delta1 / y_count
    samples = window[0] + step * (np.arange(y_count) + 0.5)
    threshold = norm_threshold(size, spec.gamma)
    region = Region.cube(size, dim=spec.lattice_dim)
    bad = np.zeros(y_count, dtype=bool)
    for k, y in enumerate(samples):
        coords = list(theta.coords)
        coords[axis] = y
        op = assemble(spec, region, TorusPoint(coords=tuple(coords)))
        gap = float(np.abs(op.spectrum - energy).min())
        bad[k] = gap == 0.0 or 1.0 / gap >= threshold
    return ResonanceEstimate(
        size=size,
        axis=axis,
        window=window,
        measure=float(bad.sum() * step),
        target=target,
        grid_step=step,
        samples=samples,
        bad=bad,
    )


def annulus_range(schedule: ScaleSchedule, dim: int) -> range:
    """
    Annulus sizes M searched at the top scale: from max(⌈N^{c3}/10⌉, 2N₁+2),
    which leaves room for shell blocks of size N₁, to max(⌊10N^{c4}⌋, that + 2N₁),
    capped at N.
    """
    lo = max(math.ceil(schedule.n**schedule.c3 / 10.0), 2 * schedule.n1 + 2)
    hi = max(math.floor(10.0 * schedule.n**schedule.c4), lo + 2 * schedule.n1)
    return range(lo, max(lo, min(hi, schedule.n)) + 1)


def core_radius(size: int, gamma: float, dim: int) -> int:
    """⌊M^{γ/10d}⌋, shrunk until the core diameter stays within M^{γ/3d}."""
    radius = math.floor(size ** (gamma / (10.0 * dim)))
    return min(radius, math.floor(size ** (gamma / (3.0 * dim)) / 2.0))


@dataclass(frozen=True, eq=False)
class MsaTrace:
    theta: tuple[float, ...]
    energy: float
    annulus_size: int
    core_radius: int
    norm_factor: float
    tried: list[dict[str, Any]]
    paving: PavingCertificate
    annulus: AnnulusCertificate
    direct_norm: float

    @property
    def sound(self) -> bool:
        return bool(self.paving.sound) and bool(self.annulus.holds)

    def to_record(self) -> dict[str, Any]:
        return {
            "theta": list(self.theta),
            "E": self.energy,
            "annulus_size": self.annulus_size,
            "core_radius": self.core_radius,
            "norm_factor": self.norm_factor,
            "tried": self.tried,
            "paving": self.paving.to_record(),
            "annulus": self.annulus.to_record(),
            "direct_norm": self.direct_norm,
            "sound": self.sound,
        }


class _SiteGoodness:
    """
    Memoized goodness of lattice sites k: θ + kω ∉ X_{N₁}, where the norm
    bound of X_{N₁} is relaxed to Ke^{N₁^{γ/2}}.
    """

    def __init__(
        self,
        spec: OperatorSpec,
        theta: TorusPoint,
        scale: int,
        energy: float,
        rho_bar: float,
        norm_factor: float = 1.0,
    ):
        self.spec = spec
        self.theta = theta
        self.scale = scale
        self.energy = energy
        self.rho_bar = rho_bar
        self.norm_factor = norm_factor
        self.shapes = enumerate_shapes(spec.lattice_dim)
        self.cache: dict[tuple[int, ...], bool] = {}

    def __call__(self, site: tuple[int, ...]) -> bool:
        if site not in self.cache:
            self.cache[site] = all(self._passes(shape, site) for shape in self.shapes)
        return self.cache[site]

    def _passes(self, shape: RegionShape, site: tuple[int, ...]) -> bool:
        op = assemble(self.spec, Region.from_shape(shape, self.scale, site), self.theta)
        try:
            g = green(op, self.energy)
        except SingularResolventError:
            return False
        cert = bound_certificate(
            g.matrix,
            g.op_norm,
            op.distances,
            op.sites,
            self.scale,
            self.spec.gamma,
            self.rho_bar,
            norm_factor=self.norm_factor,
        )
        return cert.passed


def annulus_sites(size: int, radius: int, dim: int) -> np.ndarray:
    """Sites of [-M, M]^d outside the core cube of the given radius."""
    sites = region_points(Region.cube(size, dim=dim))
    return sites[np.abs(sites).max(axis=1) > radius]


def _bad_sites(good: _SiteGoodness, sites: np.ndarray, first_only: bool = False) -> list[tuple[int, ...]]:
    bad = []
    for site in sites:
        key = tuple(int(c) for c in site)
        if not good(key):
            bad.append(key)
            if first_only:
                break
    return bad


def _require_dual(spec: OperatorSpec) -> None:
    if spec.family != OperatorFamily.DUAL:
        raise ValidationFailure("Multiscale verification runs on the DUAL family")


def is_good_phase(
    spec: OperatorSpec,
    schedule: ScaleSchedule,
    energy: float,
    theta: TorusPoint,
    rho_bar: float | None = None,
    norm_factor: float = 1.0,
) -> bool:
    """Every site of the smallest searched annulus is good at scale N₁."""
    _require_dual(spec)
    rate = terminal_rate(spec.rho, spec.gamma) if rho_bar is None else rho_bar
    d = spec.lattice_dim
    size = annulus_range(schedule, d).start
    good = _SiteGoodness(spec, theta, schedule.n1, energy, rate, norm_factor)
    return not _bad_sites(good, annulus_sites(size, core_radius(size, spec.gamma, d), d), first_only=True)


@dataclass(frozen=True, eq=False)
class PhaseSelection:
    thetas: np.ndarray
    draws: int

    @property
    def acceptance(self) -> float:
        return len(self.thetas) / self.draws if self.draws else 0.0

    def to_summary(self) -> dict[str, Any]:
        return {"selected": len(self.thetas), "draws": self.draws, "acceptance": self.acceptance}


def select_good_phases(
    spec: OperatorSpec,
    schedule: ScaleSchedule,
    energy: float,
    count: int,
    seed: int = 0,
    rho_bar: float | None = None,
    norm_factor: float = 1.0,
    max_draws: int | None = None,
) -> PhaseSelection:
    """
    Seeded good phases: candidates are drawn uniformly in a fixed order and
    kept when is_good_phase holds.
    :param spec: DUAL spec
    :param schedule: Scale schedule
    :param energy: Energy E
    :param count: Number of phases wanted
    :param seed: Seed of the candidate stream
    :param rho_bar: Decay rate, defaults to the terminal rate
    :param norm_factor: Goodness norm factor K
    :param max_draws: Cap on candidates, defaults to MAX_DRAWS_PER_PHASE per phase
    :return: The kept phases, possibly fewer than count, and the number of draws
    """
    _require_dual(spec)
    if count < 1:
        raise ValidationFailure(f"Phase count must be positive, got {count}")
    limit = MAX_DRAWS_PER_PHASE * count if max_draws is None else max_draws
    p = spec.phase.dim
    rng = np.random.default_rng(seed)
    kept: list[np.ndarray] = []
    draws = 0
    while len(kept) < count and draws < limit:
        candidate = rng.random(p)
        draws += 1
        theta = TorusPoint(coords=tuple(float(c) for c in candidate))
        if is_good_phase(spec, schedule, energy, theta, rho_bar, norm_factor):
            kept.append(candidate)
    if len(kept) < count:
        logger.warning(f"Only {len(kept)} of {count} good phases found in {draws} draws at E={energy}")
    return PhaseSelection(thetas=np.asarray(kept, dtype=float).reshape(len(kept), p), draws=draws)


def annulus_site_fraction(schedule: ScaleSchedule, dim: int) -> float:
    """
    Per-site failure rate 1/(4|S|), S the sites the smallest annulus depends
    on: the annulus and the N₁-neighbourhoods of its sites.
    """
    span = 2 * (annulus_range(schedule, dim).start + schedule.n1) + 1
    return 1.0 / (4.0 * span**dim)


def goodness_norm_factor(
    spec: OperatorSpec,
    schedule: ScaleSchedule,
    energy: float,
    thetas: np.ndarray,
    site_fraction: float,
    rho_bar: float | None = None,
    mapper: Callable[[Callable[[Any], Any], Iterable[Any]], Iterable[Any]] = map,
) -> float:
    """
    Smallest K ≥ 1 with at most a site_fraction of the phases having a shape of
    ℰ_{N₁}⁰ with ‖G‖ > Ke^{N₁^{γ/2}}. Phases at exact resonance are left out.
    """
    if not 0.0 < site_fraction < 1.0:
        raise ValidationFailure(f"Site fraction must lie in (0, 1), got {site_fraction}")
    rate = schedule.rate_at(schedule.n1, spec.rho) if rho_bar is None else rho_bar
    shapes = enumerate_shapes(spec.lattice_dim)
    thetas = np.atleast_2d(np.asarray(thetas, dtype=float))
    outcomes = mapper(lambda theta: scan_theta(spec, schedule.n1, theta, [energy], rate, shapes)[0], thetas)
    norms = np.asarray([max(check.op_norm for check in outcome) for outcome in outcomes])
    finite = norms[np.isfinite(norms)]
    if len(finite) == 0:
        logger.warning(f"Every phase is resonant at E={energy}; goodness factor left at 1")
        return 1.0
    quantile = float(np.quantile(finite, 1.0 - site_fraction, method="higher"))
    return max(1.0, quantile / norm_threshold(schedule.n1, spec.gamma))


def multiscale_verify(
    spec: OperatorSpec,
    schedule: ScaleSchedule,
    energy: float,
    theta: TorusPoint,
    rho_bar: float | None = None,
    c_res2: float = 1.0,
    strict: bool = False,
    norm_factor: float = 1.0,
) -> MsaTrace:
    """
    Certify the bounds on an annulus region from scale-N₁ information.

    For each M in annulus_range, Λ = [-M, M]^d and the core Λ̄ is the cube of
    core_radius(M). When every site of Λ \\ Λ̄ is good at scale N₁, the norm
    is certified by paving Λ with verified blocks and the decay by the annulus
    certificate; neither step inverts H_Λ. An M whose paving has a site
    without a verified block is skipped. The direct inverse is computed last
    as a cross-check.
    :param spec: DUAL spec
    :param schedule: Scale schedule
    :param energy: Energy E
    :param theta: Phase θ
    :param rho_bar: Block decay rate, defaults to the terminal rate
    :param c_res2: Annulus rate constant
    :param strict: Enforce the asymptotic annulus hypotheses
    :param norm_factor: Goodness norm factor K of the N₁ bad set and the blocks
    :return: The certification trace
    :raises NoGoodAnnulusError: If no annulus size works
    """
    _require_dual(spec)
    rate = terminal_rate(spec.rho, spec.gamma) if rho_bar is None else rho_bar
    d = spec.lattice_dim
    n1 = schedule.n1
    good = _SiteGoodness(spec, theta, n1, energy, rate, norm_factor)
    tried: list[dict[str, Any]] = []

    for size in annulus_range(schedule, d):
        radius = core_radius(size, spec.gamma, d)
        region = Region.cube(size, dim=d)
        sites = region_points(region)
        in_core = np.abs(sites).max(axis=1) <= radius
        bad = _bad_sites(good, sites[~in_core])
        if bad:
            tried.append({"M": size, "reason": "bad_sites", "count": len(bad)})
            continue

        op = assemble(spec, region, theta)
        cover = pave_region(region, n1)
        certificates = verify_cover(op, cover, energy, rate, norm_factor)
        try:
            paving = paving_norm_certify(
                op, cover, certificates, energy, cross_check=False, norm_factor=norm_factor
            )
        except UncoveredPointError as exc:
            tried.append({"M": size, "reason": "paving", "site": exc.details.get("site")})
            continue
        try:
            annulus = annulus_decay_certify(
                op,
                sites[in_core],
                n1,
                energy,
                rate,
                c_res2=c_res2,
                crude_norm_bound=paving.bound,
                strict=strict,
                cross_check=False,
                norm_factor=norm_factor,
            )
        except HypothesisViolatedError as exc:
            tried.append({"M": size, "reason": exc.details.get("hypothesis", "hypothesis")})
            continue

        try:
            g = green(op, energy)
            direct_norm = g.op_norm
            annulus = annulus_cross_check(op, energy, annulus, g)
        except SingularResolventError:
            direct_norm = float("inf")
            annulus = replace(annulus, holds=False, notes=["singular"])
        trace = MsaTrace(
            theta=theta.coords,
            energy=energy,
            annulus_size=size,
            core_radius=radius,
            norm_factor=norm_factor,
            tried=tried,
            paving=replace(paving, direct_norm=direct_norm),
            annulus=annulus,
            direct_norm=direct_norm,
        )
        if not trace.sound:
            logger.warning(f"Certificate at θ={theta.coords}, M={size} contradicted by direct inversion")
        return trace

    raise NoGoodAnnulusError(
        f"No annulus size certifies θ={theta.coords} at E={energy}",
        theta=list(theta.coords),
        energy=energy,
        tried=tried,
    )
