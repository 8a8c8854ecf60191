"""
Aubry duality between the DUAL and DIRECT families, and the Poisson
identity behind the absence of point spectrum for the DIRECT family.
"""

import logging
import math
from dataclasses import dataclass
from typing import Any, Sequence

import numpy as np

from qp_spectral_lab.constants import TAIL_TERM_CUTOFF
from qp_spectral_lab.errors import NotDualizableError, SingularResolventError, ValidationFailure
from qp_spectral_lab.greens import check_ldt_bounds, green
from qp_spectral_lab.ldt import Interval, normalize_intervals, theta_grid
from qp_spectral_lab.model import FrequencyVector, TorusPoint
from qp_spectral_lab.operators import AssembledOperator, OperatorFamily, OperatorSpec, assemble
from qp_spectral_lab.spectral import SpectrumEstimate, middle_third, spectrum_measure_estimate

logger = logging.getLogger(__name__)

POISSON_GAP = 1e-6
SHELL_CHUNK = 256


def aubry_dual_map(spec: OperatorSpec) -> OperatorSpec:
    """
    Swap the families: the DUAL operator with diagonal g(θ + n·ω) and
    hopping λv̂ corresponds to the DIRECT operator with hopping ĝ and
    potential λv(x + ℓω). Phases trade places, so the map is an involution.
    :raises NotDualizableError: If the DUAL potential is not a function of one variable
    """
    if not spec.dualizable:
        raise NotDualizableError(
            f"A DUAL potential of dimension {spec.profile.dim} is not of the form g(θ + n·ω)",
            potential_dim=spec.profile.dim,
        )
    target = OperatorFamily.DIRECT if spec.family == OperatorFamily.DUAL else OperatorFamily.DUAL
    return spec.model_copy(update={"family": target, "phase": spec.dual_phase, "dual_phase": spec.phase})


@dataclass(frozen=True, eq=False)
class DualVector:
    thetas: np.ndarray
    values: np.ndarray
    coefficients: np.ndarray

    @property
    def l2_norm(self) -> float:
        """‖F‖_{L²(T)} by the sample mean, exact for grids finer than the support."""
        return float(np.sqrt(np.mean(np.abs(self.values) ** 2)))

    @property
    def coefficient_norm(self) -> float:
        return float(np.linalg.norm(self.coefficients))

    @property
    def parseval_error(self) -> float:
        return abs(self.l2_norm - self.coefficient_norm)


def dual_vector(
    psi: np.ndarray | None = None,
    samples: np.ndarray | None = None,
    grid_size: int | None = None,
) -> DualVector:
    """
    Finite Fourier transform between ψ on [-N, N] and F(θ) = Σ_ℓ ψ_ℓ e^{2πiℓθ}
    sampled at θ_j = j/M, M ≥ 2N + 1. Pass ψ to get F, or samples of F on a
    grid of odd size M to recover ψ.
    """
    if (psi is None) == (samples is None):
        raise ValidationFailure("Give exactly one of psi and samples")
    if psi is not None:
        psi = np.asarray(psi, dtype=complex)
        half = (len(psi) - 1) // 2
        if len(psi) != 2 * half + 1:
            raise ValidationFailure("ψ must live on a centered interval [-N, N]")
        size = grid_size or len(psi)
        if size < len(psi):
            raise ValidationFailure(f"Grid of {size} points aliases a vector of length {len(psi)}")
        padded = np.zeros(size, dtype=complex)
        padded[np.arange(-half, half + 1) % size] = psi
        values = size * np.fft.ifft(padded)
        return DualVector(thetas=np.arange(size) / size, values=values, coefficients=psi)

    samples = np.asarray(samples, dtype=complex)
    size = len(samples)
    if size % 2 == 0:
        raise ValidationFailure("Recovering ψ needs an odd number of samples")
    half = (size - 1) // 2
    coefficients = np.fft.fft(samples)[np.arange(-half, half + 1) % size] / size
    return DualVector(thetas=np.arange(size) / size, values=samples, coefficients=coefficients)


def xi_values(
    psi: np.ndarray,
    x: TorusPoint,
    omega: FrequencyVector,
    theta: float,
    sites: np.ndarray,
) -> np.ndarray:
    """ξ_n(θ) = e^{2πin·x} F(θ + n·ω) at the given lattice sites."""
    half = (len(psi) - 1) // 2
    ells = np.arange(-half, half + 1)
    shifts = theta + np.atleast_2d(sites) @ omega.as_array()
    f_values = np.exp(2j * np.pi * np.outer(shifts, ells)) @ np.asarray(psi, dtype=complex)
    return np.exp(2j * np.pi * (np.atleast_2d(sites) @ x.as_array())) * f_values


def _distance_to_union(point: float, intervals: Sequence[Interval]) -> float:
    best = math.inf
    for lo, hi in intervals:
        if lo <= point <= hi:
            return 0.0
        best = min(best, lo - point if point < lo else point - hi)
    return best


def _directed_distance(a: Sequence[Interval], b: Sequence[Interval]) -> float:
    # sup over a of dist(·, b) is attained at an endpoint of a or a midpoint of a gap of b
    candidates = [p for lo, hi in a for p in (lo, hi)]
    for (_, left), (right, _) in zip(b[:-1], b[1:]):
        middle = 0.5 * (left + right)
        if any(lo <= middle <= hi for lo, hi in a):
            candidates.append(middle)
    return max(_distance_to_union(p, b) for p in candidates)


def hausdorff_distance(a: Sequence[Interval], b: Sequence[Interval]) -> float:
    """Hausdorff distance between two finite unions of closed intervals."""
    a = normalize_intervals(a)
    b = normalize_intervals(b)
    if not a and not b:
        return 0.0
    if not a or not b:
        return math.inf
    return max(_directed_distance(a, b), _directed_distance(b, a))


@dataclass(frozen=True)
class DualityComparison:
    distance: float
    direct: SpectrumEstimate
    dual: SpectrumEstimate
    direct_size: int
    dual_size: int

    def to_record(self) -> dict[str, Any]:
        return {
            "distance": self.distance,
            "direct_size": self.direct_size,
            "dual_size": self.dual_size,
            "direct": self.direct.to_record(),
            "dual": self.dual.to_record(),
        }


def duality_compare(
    spec: OperatorSpec,
    direct_size: int,
    dual_size: int,
    phase_count: int,
    seed: int = 0,
) -> DualityComparison:
    """
    Compare DIRECT-mode spectrum estimates of an operator and its dual.
    :param spec: Dualizable spec of either family
    :param direct_size: Truncation N of the DIRECT operator
    :param dual_size: Truncation N of the DUAL operator
    :param phase_count: Phase samples per operator
    :param seed: Seed of higher-dimensional phase samples
    :return: Hausdorff distance with both estimates and budgets
    """
    partner = aubry_dual_map(spec)
    direct_spec, dual_spec = (partner, spec) if spec.family == OperatorFamily.DUAL else (spec, partner)
    direct = spectrum_measure_estimate(
        spec=direct_spec,
        size=direct_size,
        phases=theta_grid(direct_spec.phase.dim, phase_count, seed),
    )
    dual = spectrum_measure_estimate(
        spec=dual_spec,
        size=dual_size,
        phases=theta_grid(dual_spec.phase.dim, phase_count, seed),
    )
    distance = hausdorff_distance(direct.intervals, dual.intervals)
    logger.debug(f"Duality distance {distance:.4g} at N_direct={direct_size}, N_dual={dual_size}")
    return DualityComparison(
        distance=distance,
        direct=direct,
        dual=dual,
        direct_size=direct_size,
        dual_size=dual_size,
    )


@dataclass(frozen=True)
class PoissonReport:
    index: int
    energy: float
    residual: float
    budget: float

    def to_record(self) -> dict[str, Any]:
        return {"index": self.index, "E": self.energy, "residual": self.residual, "budget": self.budget}


def _sub_rows(op: AssembledOperator, sub_size: int) -> np.ndarray:
    return np.flatnonzero(np.abs(op.sites).max(axis=1) <= sub_size)


def poisson_residual_check(op: AssembledOperator, index: int, sub_size: int) -> PoissonReport:
    """
    Evaluate ξ_Λ = -G_Λ(E) H_{Λ,Λᶜ} ξ_{Λᶜ} for the eigenpair (E, ξ) of the box
    operator, with Λ the centered cube of size sub_size.
    :param op: Box operator
    :param index: Eigenpair index
    :param sub_size: Size of Λ, strictly inside the box
    :return: Max residual and the budget from the box's own truncation and eigen residual
    :raises SingularResolventError: If E is an eigenvalue of H_Λ
    """
    if sub_size >= op.scale:
        raise ValidationFailure(f"Sub-box size {sub_size} must be below the box size {op.scale}")
    values, vectors = op.decomposition
    energy = float(values[index])
    xi = vectors[:, index]
    inside = _sub_rows(op, sub_size)
    outside = np.setdiff1d(np.arange(op.size), inside)

    g = green(op.restrict(inside), energy)
    predicted = -g.matrix @ (op.matrix[np.ix_(inside, outside)] @ xi[outside])
    residual = float(np.abs(xi[inside] - predicted).max())
    eigen_residual = float(np.abs(op.matrix @ xi - energy * xi).max())
    budget = op.tail_bound + g.op_norm * eigen_residual * math.sqrt(len(inside))
    return PoissonReport(index=index, energy=energy, residual=residual, budget=budget)


def select_poisson_pairs(op: AssembledOperator, sub_size: int, count: int, gap: float = POISSON_GAP) -> list[int]:
    """
    Middle-third eigenpairs whose energy stays at least gap away from the
    spectrum of the sub-box, evenly spread over the eligible ones.
    """
    values = op.spectrum
    sub_spectrum = op.restrict(_sub_rows(op, sub_size)).spectrum
    eligible = [s for s in middle_third(len(values)) if np.abs(sub_spectrum - values[s]).min() >= gap]
    if len(eligible) <= count:
        return eligible
    picks = np.linspace(0, len(eligible) - 1, count).round().astype(int)
    return [eligible[k] for k in picks]


@dataclass(frozen=True)
class DelyonReport:
    scales: list[int]
    log_bounds: list[float]
    good: list[bool | None]

    @property
    def bounds(self) -> list[float]:
        return [math.exp(b) for b in self.log_bounds]

    @property
    def rises(self) -> list[tuple[int, int]]:
        """Consecutive scale pairs (N, N') at which the bound fails to decrease."""
        steps = zip(self.scales, self.scales[1:], self.log_bounds, self.log_bounds[1:])
        return [(n, m) for n, m, a, b in steps if b >= a]

    @property
    def decreasing(self) -> bool:
        return not self.rises

    def to_record(self) -> dict[str, Any]:
        return {
            "scales": self.scales,
            "bounds": self.bounds,
            "log_bounds": self.log_bounds,
            "good": self.good,
            "decreasing": self.decreasing,
            "rises": [list(step) for step in self.rises],
        }


def delyon_log_bound(scale: int, rho_bar: float, gamma: float, dim: int = 1) -> float:
    """
    log Σ_{|n|>N} (1+|n|)^d exp(-(ρ̄/2)|n|^γ + (ρ̄/2)(N/10)^γ + N^{γ/2}),
    the bound on |ξ₀| obtained from the Poisson identity on [-N, N]^d.
    """
    offset = 0.5 * rho_bar * (scale / 10.0) ** gamma + scale ** (gamma / 2.0)
    total = 0.0
    start = scale + 1
    while True:
        m = np.arange(start, start + SHELL_CHUNK, dtype=float)
        shells = (2 * m + 1) ** dim - (2 * m - 1) ** dim
        terms = shells * (1 + m) ** dim * np.exp(-0.5 * rho_bar * m**gamma)
        total += float(terms.sum())
        if terms[-1] < TAIL_TERM_CUTOFF * max(total, 1e-300) and terms[-1] <= terms[0]:
            break
        start += SHELL_CHUNK
    return math.log(total) + offset


def delyon_bound(
    spec: OperatorSpec,
    scales: Sequence[int],
    theta: TorusPoint | None = None,
    energy: float | None = None,
) -> DelyonReport:
    """
    The bound chain on |ξ₀| at increasing scales, with ρ̄ = (1 - 5^{-γ})ρ.
    Given θ and E, each scale also records whether θ is LDT-good there.
    """
    if not scales:
        raise ValidationFailure("Delyon chain needs at least one scale")
    gamma = spec.gamma
    rho_bar = (1.0 - 5.0 ** (-gamma)) * spec.rho
    d = spec.lattice_dim
    log_bounds = [delyon_log_bound(n, rho_bar, gamma, d) for n in scales]
    good: list[bool | None] = []
    for n in scales:
        if theta is None or energy is None:
            good.append(None)
            continue
        try:
            g = green(assemble(spec, n, theta), energy)
            good.append(check_ldt_bounds(g, rho_bar / 2.0).passed)
        except SingularResolventError:
            logger.debug(f"H_N(θ) is singular at E={energy}, N={n}")
            good.append(False)
    report = DelyonReport(scales=list(scales), log_bounds=log_bounds, good=good)
    if report.rises:
        logger.warning(f"Delyon bound does not decrease at γ={gamma} between scales {report.rises}")
    return report
