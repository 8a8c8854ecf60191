"""
Eigen-analysis of assembled operators: eigensystems, localization profiles,
eigen-branches with their quasimode residuals, and spectrum estimates.
"""

import logging
from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Iterable, Sequence

import numpy as np
from scipy.linalg import LinAlgError, norm

from qp_spectral_lab.constants import LOG_FLOOR
from qp_spectral_lab.errors import EigenSolverError, ValidationFailure
from qp_spectral_lab.ldt import Interval, normalize_intervals
from qp_spectral_lab.lattice import Region, region_points
from qp_spectral_lab.model import TorusPoint, symbol_l1_norm, truncation_tail_bound
from qp_spectral_lab.operators import AssembledOperator, OperatorFamily, OperatorSpec, assemble

logger = logging.getLogger(__name__)

EIGEN_RESIDUAL = 1e-10
ORTHONORMALITY = 1e-10
LOCALIZATION_FLOOR = 0.2
LOCALIZATION_CEILING = 10.0
SELECTION_SLACK = 1e-12


@dataclass(frozen=True, eq=False)
class EigenSystem:
    operator: AssembledOperator
    values: np.ndarray
    vectors: np.ndarray
    residual: float
    orthonormality: float

    @property
    def count(self) -> int:
        return len(self.values)

    def vector(self, index: int) -> np.ndarray:
        return self.vectors[:, index]


def eigensystem(
    op: AssembledOperator,
    residual_tolerance: float = EIGEN_RESIDUAL,
    orthonormality_tolerance: float = ORTHONORMALITY,
) -> EigenSystem:
    """
    Full hermitian eigendecomposition with residual and Gram checks.
    :raises EigenSolverError: If LAPACK fails or a check is not met
    """
    try:
        values, vectors = op.decomposition
    except (LinAlgError, ValueError) as exc:
        raise EigenSolverError(f"Eigensolver failed on a {op.size}x{op.size} operator: {exc}", size=op.size) from exc

    scale = max(1.0, float(np.abs(values).max())) if len(values) else 1.0
    residual = float(np.abs(op.matrix @ vectors - vectors * values[None, :]).max()) if len(values) else 0.0
    gram = float(np.abs(vectors.conj().T @ vectors - np.eye(len(values))).max()) if len(values) else 0.0
    if residual > residual_tolerance * scale or gram > orthonormality_tolerance:
        raise EigenSolverError(
            f"Eigendecomposition failed verification (residual {residual:.3g}, Gram deviation {gram:.3g})",
            residual=residual,
            orthonormality=gram,
            hermiticity=op.hermiticity_residual(),
        )
    return EigenSystem(operator=op, values=values, vectors=vectors, residual=residual, orthonormality=gram)


@dataclass(frozen=True)
class LocalizationProfile:
    index: int
    center: tuple[int, ...]
    rate: float
    worst_site_rate: float
    r_squared: float
    extended: bool
    maximally_localized: bool

    def to_row(self) -> dict[str, Any]:
        return {
            "eig_index": self.index,
            "center": " ".join(str(c) for c in self.center),
            "rate": self.rate,
            "r2": self.r_squared,
            "extended_flag": self.extended,
        }


def localization_profile(
    vector: np.ndarray,
    sites: np.ndarray,
    gamma: float,
    scale: int,
    index: int = 0,
    floor: float = LOCALIZATION_FLOOR,
    ceiling: float = LOCALIZATION_CEILING,
) -> LocalizationProfile:
    """
    Fit log|φ(c)| - log|φ(n)| ≈ r|n - c|^γ through the origin over |n - c| ≥ N/10,
    with c the site of largest modulus.
    :param vector: Eigenvector
    :param sites: Its sites, shape (k, d)
    :param gamma: Stretching exponent
    :param scale: Box size N
    :param index: Eigenvalue index, carried into the profile
    :param floor: Rates below it flag the vector as extended
    :param ceiling: Rates are capped here
    :return: The profile
    """
    magnitudes = np.abs(vector)
    peak = int(np.argmax(magnitudes))
    center = tuple(int(c) for c in sites[peak])
    distances = np.abs(sites - sites[peak][None, :]).max(axis=1)
    mask = distances >= max(scale / 10.0, 1.0)
    if not np.any(mask):
        return LocalizationProfile(index, center, ceiling, ceiling, 1.0, False, True)

    x = distances[mask].astype(float) ** gamma
    y = np.log(magnitudes[peak]) - np.log(np.maximum(magnitudes[mask], LOG_FLOOR))
    rate = float(np.dot(x, y) / np.dot(x, x))
    total = float(np.sum((y - y.mean()) ** 2))
    r_squared = 1.0 - float(np.sum((y - rate * x) ** 2)) / total if total > 0 else 1.0
    worst = float(np.min(y / x))
    capped = min(rate, ceiling)
    return LocalizationProfile(
        index=index,
        center=center,
        rate=capped,
        worst_site_rate=min(worst, ceiling),
        r_squared=r_squared,
        extended=capped < floor,
        maximally_localized=rate >= ceiling,
    )


def middle_third(count: int) -> range:
    return range(count // 3, max(count // 3 + 1, 2 * count // 3))


def localization_profiles(
    system: EigenSystem,
    indices: Iterable[int] | None = None,
    floor: float = LOCALIZATION_FLOOR,
    ceiling: float = LOCALIZATION_CEILING,
) -> list[LocalizationProfile]:
    """Profiles of the given eigenvectors, the middle third of the spectrum by default."""
    op = system.operator
    chosen = middle_third(system.count) if indices is None else indices
    return [
        localization_profile(system.vector(s), op.sites, op.spec.gamma, op.scale, s, floor, ceiling)
        for s in chosen
    ]


def branch_closeness_constant(spec: OperatorSpec) -> float:
    """C = Σ|v̂_n| in |λ_{s⋆}(θ) - f(θ)| ≤ C(2N+1)^{d/2}λ."""
    return symbol_l1_norm(spec.symbol)


def mass_bound(size: int, dim: int) -> float:
    """(2N+1)^{-d/2}, the least mass the selected eigenvector puts at the origin."""
    return float((2 * size + 1) ** (-dim / 2.0))


@dataclass(frozen=True)
class QuasimodeResidual:
    residual: float
    tail_budget: float

    @property
    def total(self) -> float:
        return self.residual + self.tail_budget


def quasimode_residual(
    spec: OperatorSpec,
    theta: TorusPoint,
    vector: np.ndarray,
    sites: np.ndarray,
    eigenvalue: float,
    truncation: int,
    big_size: int,
) -> QuasimodeResidual:
    """
    ‖(H̃_B - λ_{s⋆})ψ‖ for ψ = R_J φ/‖R_J φ‖ zero-padded into the cube B,
    plus the budget λΣ_{|m|>min(R, B-J)}|v̂_m| for hopping cut by the symbol
    radius R or falling outside B.
    :param spec: DUAL spec
    :param theta: Phase of φ
    :param vector: Eigenvector φ on sites
    :param sites: Sites of φ's box
    :param eigenvalue: λ_{s⋆}
    :param truncation: Radius J of the cube φ is cut to
    :param big_size: Size of the residual box B
    :return: Residual and budget
    """
    if spec.family != OperatorFamily.DUAL:
        raise ValidationFailure("Quasimode residuals are computed for the DUAL family")
    box = int(np.abs(sites).max())
    if truncation >= box or big_size <= box:
        raise ValidationFailure(f"Need J < {box} < B, got J={truncation}, B={big_size}")

    big = assemble(spec, Region.cube(big_size, dim=spec.lattice_dim), theta)
    kept = np.abs(sites).max(axis=1) <= truncation
    restricted = vector[kept]
    mass = float(norm(restricted))
    if mass == 0.0:
        raise ValidationFailure("Eigenvector vanishes on the truncation cube")
    psi = np.zeros(big.size, dtype=np.result_type(vector, big.matrix))
    psi[big.rows_of(sites[kept])] = restricted / mass

    residual = float(norm(big.matrix @ psi - eigenvalue * psi))
    reach = min(spec.symbol.radius, big_size - truncation)
    budget = spec.coupling * truncation_tail_bound(spec.symbol, reach) if spec.coupling > 0 else 0.0
    return QuasimodeResidual(residual=residual, tail_budget=budget)


@dataclass(frozen=True, eq=False)
class EigenBranch:
    branch_id: int
    scale: int
    thetas: np.ndarray
    energies: np.ndarray
    masses: np.ndarray
    indices: np.ndarray
    residuals: np.ndarray | None = None

    @property
    def interval(self) -> Interval:
        return float(self.thetas[0]), float(self.thetas[-1])

    @property
    def length(self) -> float:
        return float(self.thetas[-1] - self.thetas[0])

    @property
    def image(self) -> Interval:
        return float(self.energies.min()), float(self.energies.max())

    @property
    def max_residual(self) -> float:
        return float(self.residuals.max()) if self.residuals is not None and len(self.residuals) else 0.0

    def energy_at(self, thetas: np.ndarray) -> np.ndarray:
        return np.interp(thetas, self.thetas, self.energies)

    def to_rows(self) -> list[dict[str, Any]]:
        rows = []
        for k in range(len(self.thetas)):
            rows.append(
                {
                    "theta": float(self.thetas[k]),
                    "E": float(self.energies[k]),
                    "mass": float(self.masses[k]),
                    "residual": float(self.residuals[k]) if self.residuals is not None else None,
                    "branch_id": self.branch_id,
                }
            )
        return rows


@dataclass
class _Sample:
    grid_index: int
    theta: float
    energy: float
    mass: float
    index: int
    residual: float | None = None


def continuity_tolerance(spec: OperatorSpec, step: float, factor: float = 10.0) -> float:
    """(1 + factor·λ)·‖f′‖·step, from the Hellmann–Feynman bound |dλ_s/dθ| ≤ ‖f′‖."""
    return (1.0 + factor * spec.coupling) * spec.profile.lipschitz_bound(axis=0) * step


def _phase(spec: OperatorSpec, theta: float, axis: int) -> TorusPoint:
    coords = list(spec.phase.coords)
    coords[axis] = float(theta)
    return TorusPoint(coords=tuple(coords))


def _select(
    spec: OperatorSpec,
    size: int,
    theta: float,
    axis: int,
    window: tuple[float, float] | None = None,
) -> tuple[_Sample | None, AssembledOperator, np.ndarray]:
    """Pick s⋆ maximizing |⟨e₀, φ_s⟩|, optionally among eigenvalues in a window."""
    phase = _phase(spec, theta, axis)
    op = assemble(spec, Region.cube(size, dim=spec.lattice_dim), phase)
    system = eigensystem(op)
    origin = op.row((0,) * spec.lattice_dim)
    masses = np.abs(system.vectors[origin, :])
    candidates = np.arange(system.count)
    if window is not None:
        candidates = candidates[(system.values >= window[0]) & (system.values <= window[1])]
    if len(candidates) == 0:
        return None, op, system.vectors[:, 0]
    best = int(candidates[np.argmax(masses[candidates])])
    energy = float(system.values[best])
    mass = float(masses[best])

    bound = mass_bound(size, spec.lattice_dim)
    closeness = branch_closeness_constant(spec) * spec.coupling / mass_bound(size, spec.lattice_dim)
    f_theta = float(spec.profile.evaluate_many(np.asarray([phase.coords]))[0])
    if mass < bound - SELECTION_SLACK or abs(energy - f_theta) > closeness + SELECTION_SLACK:
        logger.info(f"Dropped branch sample θ={theta:.6g}: mass {mass:.3g}, |E - f(θ)| = {abs(energy - f_theta):.3g}")
        return None, op, system.vectors[:, best]
    return _Sample(grid_index=-1, theta=float(theta), energy=energy, mass=mass, index=best), op, system.vectors[:, best]


def _chain(samples: list[_Sample], tolerance: float, scale: int, first_id: int = 0) -> list[EigenBranch]:
    branches: list[EigenBranch] = []
    current: list[_Sample] = []

    def close() -> None:
        if current:
            branches.append(
                EigenBranch(
                    branch_id=first_id + len(branches),
                    scale=scale,
                    thetas=np.asarray([s.theta for s in current]),
                    energies=np.asarray([s.energy for s in current]),
                    masses=np.asarray([s.mass for s in current]),
                    indices=np.asarray([s.index for s in current], dtype=np.int64),
                    residuals=(
                        np.asarray([s.residual for s in current])
                        if all(s.residual is not None for s in current)
                        else None
                    ),
                )
            )

    for sample in samples:
        if current and (
            sample.grid_index != current[-1].grid_index + 1
            or abs(sample.energy - current[-1].energy) > tolerance
        ):
            close()
            current = []
        current.append(sample)
    close()
    return branches


def branch_extract(
    spec: OperatorSpec,
    size: int,
    thetas: Sequence[float],
    axis: int = 0,
    truncation: int | None = None,
    big_size: int | None = None,
    continuity_factor: float = 10.0,
    coupling_max: float | None = None,
) -> list[EigenBranch]:
    """
    Follow the eigenvalue whose eigenvector weighs most at the origin along a
    θ-slice, and chain samples into branches with continuous E.
    :param spec: DUAL spec
    :param size: Box size N
    :param thetas: Increasing samples of coordinate axis
    :param axis: Coordinate of the phase that varies
    :param truncation: J for quasimode residuals, None to skip them
    :param big_size: Residual box size B
    :param continuity_factor: Factor of λ in the continuity tolerance
    :param coupling_max: Warn above this coupling
    :return: Branches in θ order
    """
    if spec.family != OperatorFamily.DUAL:
        raise ValidationFailure("Eigen-branches are extracted for the DUAL family")
    thetas = np.asarray(thetas, dtype=float)
    if len(thetas) < 2:
        raise ValidationFailure("Branch extraction needs at least two θ samples")
    if coupling_max is not None and spec.coupling > coupling_max:
        logger.warning(f"λ={spec.coupling} is above the branch coherence bound {coupling_max}")

    box_sites = region_points(Region.cube(size, dim=spec.lattice_dim))
    samples = []
    for k, theta in enumerate(thetas):
        sample, _, vector = _select(spec, size, theta, axis)
        if sample is None:
            continue
        sample.grid_index = k
        if truncation is not None and big_size is not None:
            sample.residual = quasimode_residual(
                spec, _phase(spec, theta, axis), vector, box_sites, sample.energy, truncation, big_size
            ).total
        samples.append(sample)

    step = float(np.max(np.diff(thetas)))
    branches = _chain(samples, continuity_tolerance(spec, step, continuity_factor), size)
    logger.debug(f"Extracted {len(branches)} branches from {len(samples)} of {len(thetas)} samples at N={size}")
    return branches


def image_measure(branches: Iterable[EigenBranch]) -> float:
    return float(sum(hi - lo for lo, hi in normalize_intervals(b.image for b in branches)))


@dataclass(frozen=True)
class RefinementLedger:
    old_scale: int
    new_scale: int
    measure_before: float
    measure_after: float
    resolution: float

    @property
    def loss(self) -> float:
        return max(0.0, self.measure_before - self.measure_after)

    @property
    def allowed_loss(self) -> float:
        return 1.0 / self.new_scale + self.resolution

    @property
    def within_bound(self) -> bool:
        return self.loss <= self.allowed_loss

    def to_record(self) -> dict[str, Any]:
        return {
            "old_scale": self.old_scale,
            "new_scale": self.new_scale,
            "measure_before": self.measure_before,
            "measure_after": self.measure_after,
            "loss": self.loss,
            "allowed_loss": self.allowed_loss,
            "within_bound": self.within_bound,
        }


def _subdivide(thetas: np.ndarray, factor: int) -> np.ndarray:
    if factor == 1 or len(thetas) < 2:
        return thetas.copy()
    pieces = [np.linspace(a, b, factor, endpoint=False) for a, b in zip(thetas[:-1], thetas[1:])]
    return np.concatenate(pieces + [thetas[-1:]])


def branch_refine(
    spec: OperatorSpec,
    branches: Sequence[EigenBranch],
    new_size: int,
    resample_factor: int = 1,
    axis: int = 0,
    truncation: int | None = None,
    big_size: int | None = None,
    continuity_factor: float = 10.0,
) -> tuple[list[EigenBranch], RefinementLedger]:
    """
    Re-extract branches at a larger scale inside the parent θ-intervals. At
    each θ the candidate eigenvalues lie within the closeness window of the
    parent energy, and the one of largest mass at the origin is kept.
    :return: Refined branches and the image-measure ledger
    """
    if not branches:
        raise ValidationFailure("Nothing to refine")
    old_size = branches[0].scale
    if new_size < old_size:
        raise ValidationFailure(f"Refinement scale {new_size} is below the parent scale {old_size}")
    d = spec.lattice_dim
    closeness = branch_closeness_constant(spec) * spec.coupling
    window_width = closeness / mass_bound(old_size, d) + closeness / mass_bound(new_size, d)

    refined: list[EigenBranch] = []
    max_step = 0.0
    for parent in branches:
        thetas = _subdivide(parent.thetas, resample_factor)
        parent_energy = parent.energy_at(thetas)
        if len(thetas) > 1:
            max_step = max(max_step, float(np.max(np.diff(thetas))))
        samples = []
        for k, theta in enumerate(thetas):
            window = (parent_energy[k] - window_width, parent_energy[k] + window_width)
            sample, _, vector = _select(spec, new_size, theta, axis, window)
            if sample is None:
                continue
            sample.grid_index = k
            if truncation is not None and big_size is not None:
                sample.residual = quasimode_residual(
                    spec,
                    _phase(spec, theta, axis),
                    vector,
                    region_points(Region.cube(new_size, dim=d)),
                    sample.energy,
                    truncation,
                    big_size,
                ).total
            samples.append(sample)
        step = float(np.max(np.diff(thetas))) if len(thetas) > 1 else 0.0
        refined += _chain(samples, continuity_tolerance(spec, step, continuity_factor), new_size, len(refined))

    ledger = RefinementLedger(
        old_scale=old_size,
        new_scale=new_size,
        measure_before=image_measure(branches),
        measure_after=image_measure(refined),
        resolution=spec.profile.lipschitz_bound(axis=axis) * max_step,
    )
    if not ledger.within_bound:
        logger.warning(f"Refinement {old_size} -> {new_size} lost {ledger.loss:.4g} > {ledger.allowed_loss:.4g}")
    return refined, ledger


class SpectrumMode(str, Enum):
    BRANCH = "branch"
    DIRECT = "direct"


@dataclass(frozen=True)
class SpectrumEstimate:
    intervals: list[Interval]
    mode: SpectrumMode
    budget: dict[str, float] = field(default_factory=dict)

    @property
    def measure(self) -> float:
        return float(sum(hi - lo for lo, hi in self.intervals))

    def to_record(self) -> dict[str, Any]:
        return {
            "mode": self.mode.value,
            "intervals": [list(i) for i in self.intervals],
            "measure": self.measure,
            "budget": self.budget,
        }


def cluster_resolution(spec: OperatorSpec, size: int, phase_step: float) -> float:
    """
    Gap below which sampled eigenvalues are merged into one interval: the
    phase Lipschitz bound times the step, and for DIRECT also the Dirichlet
    level spacing ‖g′‖/(2(2N+2)) of the hopping.
    """
    if spec.family == OperatorFamily.DUAL:
        return spec.profile.lipschitz_bound() * phase_step
    potential_step = spec.coupling * spec.potential.lipschitz_bound() * phase_step
    return max(potential_step, spec.profile.lipschitz_bound() / (2.0 * (2 * size + 2)))


def cluster_values(values: np.ndarray, resolution: float) -> list[Interval]:
    """Merge sorted values whose consecutive gaps are at most resolution."""
    ordered = np.sort(np.asarray(values, dtype=float).ravel())
    if len(ordered) == 0:
        return []
    breaks = np.flatnonzero(np.diff(ordered) > resolution)
    starts = np.concatenate([[0], breaks + 1])
    ends = np.concatenate([breaks, [len(ordered) - 1]])
    return [(float(ordered[s]), float(ordered[e])) for s, e in zip(starts, ends)]


def spectrum_measure_estimate(
    branches: Sequence[EigenBranch] | None = None,
    spec: OperatorSpec | None = None,
    size: int | None = None,
    phases: np.ndarray | None = None,
    resolution: float | None = None,
) -> SpectrumEstimate:
    """
    BRANCH mode (branches given): the union of branch images, each widened by
    its largest quasimode residual. DIRECT mode (spec, size, phases given):
    all eigenvalues of the truncations over the phase grid, clustered.
    """
    if branches is not None:
        intervals = []
        inflation = 0.0
        for branch in branches:
            lo, hi = branch.image
            pad = branch.max_residual
            inflation += 2.0 * pad
            intervals.append((lo - pad, hi + pad))
        return SpectrumEstimate(
            intervals=normalize_intervals(intervals),
            mode=SpectrumMode.BRANCH,
            budget={"residual_inflation": inflation},
        )

    if spec is None or size is None or phases is None:
        raise ValidationFailure("DIRECT spectrum estimates need a spec, a size and a phase grid")
    phases = np.atleast_2d(np.asarray(phases, dtype=float))
    if len(phases) == 0:
        raise ValidationFailure("Phase grid must be nonempty")
    region = Region.cube(size, dim=spec.lattice_dim)
    values = []
    tail = 0.0
    for phase in phases:
        op = assemble(spec, region, TorusPoint(coords=tuple(phase)))
        values.append(op.spectrum)
        tail = op.tail_bound
    step = float(len(phases) ** (-1.0 / phases.shape[1]))
    if resolution is None:
        resolution = cluster_resolution(spec, size, step)
    return SpectrumEstimate(
        intervals=cluster_values(np.concatenate(values), resolution),
        mode=SpectrumMode.DIRECT,
        budget={"truncation": tail, "resolution": resolution},
    )
