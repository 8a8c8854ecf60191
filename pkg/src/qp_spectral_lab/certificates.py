"""
Certificates for the multiscale inductive step: verified sub-blocks, the
block-resolvent fixed point, the perturbation lemma, the paving norm bound
and the annulus decay bound.
"""

import logging
from dataclasses import dataclass, field, replace
from typing import Any, Iterable

import numpy as np
from scipy.linalg import inv, norm

from qp_spectral_lab.constants import LOG_FLOOR
from qp_spectral_lab.errors import (
    DivergedError,
    HypothesisViolatedError,
    InfeasiblePavingError,
    NoGoodAnnulusError,
    SingularResolventError,
    UncoveredPointError,
    ValidationFailure,
)
from qp_spectral_lab.greens import (
    BoundCertificate,
    GreenEvaluation,
    bound_certificate,
    green,
    norm_threshold,
)
from qp_spectral_lab.lattice import PavingCover, Region, diameter, pave_sites, region_points
from qp_spectral_lab.operators import AssembledOperator

logger = logging.getLogger(__name__)

CONTRACTION_LIMIT = 0.5
FIXED_POINT_TOLERANCE = 1e-13
MAX_FIXED_POINT_ITERATIONS = 200
HYPOTHESIS_SLACK = 1.0 + 1e-9


@dataclass(frozen=True, eq=False)
class SubBlockCertificate:
    """Outcome of checking one paving block W at scale M."""

    region: Region
    rows: np.ndarray
    green: GreenEvaluation | None
    bounds: BoundCertificate | None

    @property
    def verified(self) -> bool:
        return self.bounds is not None and self.bounds.passed

    @property
    def op_norm(self) -> float:
        return self.green.op_norm if self.green else float("inf")


def verify_subblock(
    op: AssembledOperator,
    block: Region,
    energy: float,
    rho_bar: float,
    norm_factor: float = 1.0,
) -> SubBlockCertificate:
    """
    Check ‖G_W‖ ≤ 2Ke^{M^{γ/2}} and |G_W(n,n')| ≤ 2e^{-ρ̄|n-n'|^γ} for
    |n-n'| ≥ M/10 on a block W contained in the sites of op. K is the
    goodness norm factor.
    """
    rows = op.rows_of(region_points(block))
    sub = op.restrict(rows)
    try:
        g = green(sub, energy)
    except SingularResolventError:
        return SubBlockCertificate(region=block, rows=rows, green=None, bounds=None)
    bounds = bound_certificate(
        g.matrix,
        g.op_norm,
        sub.distances,
        sub.sites,
        block.size,
        op.spec.gamma,
        rho_bar,
        norm_factor=2.0 * norm_factor,
        decay_factor=2.0,
    )
    return SubBlockCertificate(region=block, rows=rows, green=g, bounds=bounds)


def verify_cover(
    op: AssembledOperator,
    cover: PavingCover,
    energy: float,
    rho_bar: float,
    norm_factor: float = 1.0,
) -> dict[Region, SubBlockCertificate]:
    """Verify every distinct block of a cover once."""
    certificates = {
        block: verify_subblock(op, block, energy, rho_bar, norm_factor) for block in cover.regions()
    }
    failed = sum(not c.verified for c in certificates.values())
    if failed:
        logger.debug(f"{failed} of {len(certificates)} paving blocks failed verification at E={energy}")
    return certificates


@dataclass(frozen=True, eq=False)
class BlockSolveResult:
    approximation: np.ndarray
    contraction: float
    iterations: int
    residual: float


def block_resolvent_solve(
    op: AssembledOperator,
    cover: PavingCover,
    energy: float,
    certificates: dict[Region, SubBlockCertificate] | None = None,
    tolerance: float = FIXED_POINT_TOLERANCE,
    max_iterations: int = MAX_FIXED_POINT_ITERATIONS,
) -> BlockSolveResult:
    """
    Solve for G_Λ through the block expansion

        G_Λ(m,n) = G_W(m,n)χ_W(n) - Σ_{n'∈W, n''∉W} G_W(m,n')H(n',n'')G_Λ(n'',n),  W = W(m)

    iterated as X ← B + KX from X = B.
    :param op: Operator on Λ
    :param cover: Paving cover of Λ
    :param energy: Energy E
    :param certificates: Cached block Green's functions
    :param tolerance: Stop once an update moves no entry by more than this (relative)
    :param max_iterations: Iteration cap
    :return: Approximation with contraction factor and residual
    :raises UncoveredPointError: If a site has no cover cell
    :raises DivergedError: If the contraction factor exceeds 1/2
    """
    certificates = dict(certificates or {})
    size = op.size
    base = np.zeros((size, size), dtype=complex if np.iscomplexobj(op.matrix) else float)
    kernel = np.zeros_like(base)

    for i, site in enumerate(op.sites):
        key = tuple(int(c) for c in site)
        if key not in cover:
            raise UncoveredPointError(f"Site {key} has no paving block", site=list(key))
        block = cover[key].region
        if block not in certificates or certificates[block].green is None:
            rows = op.rows_of(region_points(block))
            try:
                g = green(op.restrict(rows), energy)
            except SingularResolventError as exc:
                raise DivergedError(f"Block around {key} is singular at E={energy}", site=list(key)) from exc
            certificates[block] = SubBlockCertificate(region=block, rows=rows, green=g, bounds=None)
        cert = certificates[block]
        local = int(np.flatnonzero(cert.rows == i)[0])
        green_row = cert.green.matrix[local, :]
        base[i, cert.rows] = green_row
        coupling = green_row @ op.matrix[cert.rows, :]
        coupling[cert.rows] = 0.0
        kernel[i, :] = -coupling

    contraction = float(np.abs(kernel).sum(axis=1).max()) if size else 0.0
    if contraction > CONTRACTION_LIMIT:
        raise DivergedError(
            f"Block expansion contraction {contraction:.3g} exceeds {CONTRACTION_LIMIT}",
            contraction=contraction,
        )

    approximation = base.copy()
    iterations = 0
    for iterations in range(1, max_iterations + 1):
        update = base + kernel @ approximation
        delta = float(np.abs(update - approximation).max())
        approximation = update
        if delta <= tolerance * max(1.0, float(np.abs(approximation).max())):
            break

    shifted = op.matrix - energy * np.eye(size)
    residual = float(np.abs(shifted @ approximation - np.eye(size)).max())
    logger.debug(f"Block solve: contraction {contraction:.3g}, {iterations} iterations, residual {residual:.3g}")
    return BlockSolveResult(
        approximation=approximation,
        contraction=contraction,
        iterations=iterations,
        residual=residual,
    )


@dataclass(frozen=True)
class PerturbationReport:
    hypotheses: dict[str, bool]
    conclusions: dict[str, bool] | None
    inverse_norm: float
    perturbed_inverse_norm: float | None
    norm_slack: float | None

    @property
    def hypotheses_hold(self) -> bool:
        return all(self.hypotheses.values())

    @property
    def conclusions_hold(self) -> bool | None:
        return None if self.conclusions is None else all(self.conclusions.values())


def _centered_sites(size: int) -> np.ndarray:
    return (np.arange(size) - size // 2)[:, None]


def perturbation_lemma_check(
    a: np.ndarray,
    b: np.ndarray,
    rho_bar: float,
    scale: int,
    gamma: float,
    sites: np.ndarray | None = None,
) -> PerturbationReport:
    """
    Check the perturbation lemma on a pair of matrices.

    Hypotheses: ‖A⁻¹‖ ≤ e^{N^{γ/2}}, |A⁻¹(n,n')| ≤ e^{-ρ̄|n-n'|^γ} for
    |n-n'| ≥ N/10, |B-A|(n,n') ≤ e^{-3ρ̄N^γ - ρ̄|n-n'|^γ}.
    Conclusions: ‖B⁻¹‖ ≤ 2‖A⁻¹‖ and |B⁻¹| ≤ |A⁻¹| + e^{-ρ̄|n-n'|^γ}.
    Conclusions are only evaluated when the hypotheses hold.
    """
    a = np.asarray(a)
    b = np.asarray(b)
    if a.shape != b.shape or a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ValidationFailure(f"Perturbation check needs equal square matrices, got {a.shape} and {b.shape}")
    sites = _centered_sites(a.shape[0]) if sites is None else np.atleast_2d(sites)
    distances = np.abs(sites[:, None, :] - sites[None, :, :]).max(axis=2).astype(float)
    envelope = np.exp(-rho_bar * distances**gamma)

    a_inv = inv(a)
    a_norm = float(norm(a_inv, 2))
    far = distances >= max(scale / 10.0, 1.0)
    hypotheses = {
        "inverse_norm": a_norm <= norm_threshold(scale, gamma) * HYPOTHESIS_SLACK,
        "inverse_decay": bool(np.all(np.abs(a_inv[far]) <= envelope[far] * HYPOTHESIS_SLACK)),
        "perturbation": bool(
            np.all(np.abs(b - a) <= np.exp(-3.0 * rho_bar * scale**gamma) * envelope * HYPOTHESIS_SLACK)
        ),
    }
    if not all(hypotheses.values()):
        return PerturbationReport(
            hypotheses=hypotheses,
            conclusions=None,
            inverse_norm=a_norm,
            perturbed_inverse_norm=None,
            norm_slack=None,
        )

    b_inv = inv(b)
    b_norm = float(norm(b_inv, 2))
    conclusions = {
        "inverse_norm": b_norm <= 2.0 * a_norm,
        "entries": bool(np.all(np.abs(b_inv) <= (np.abs(a_inv) + envelope) * HYPOTHESIS_SLACK)),
    }
    return PerturbationReport(
        hypotheses=hypotheses,
        conclusions=conclusions,
        inverse_norm=a_norm,
        perturbed_inverse_norm=b_norm,
        norm_slack=2.0 * a_norm / b_norm if b_norm > 0 else float("inf"),
    )


def paving_bound(max_size: int, dim: int, gamma: float, norm_factor: float = 1.0) -> float:
    """The crude norm bound 4K(2M₁+1)^d e^{M₁^{γ/2}}, linear in the block bound."""
    return 4.0 * norm_factor * (2 * max_size + 1) ** dim * norm_threshold(max_size, gamma)


@dataclass(frozen=True)
class PavingCertificate:
    bound: float
    direct_norm: float | None
    block_count: int

    @property
    def sound(self) -> bool | None:
        return None if self.direct_norm is None else self.direct_norm <= self.bound

    @property
    def slack(self) -> float | None:
        if self.direct_norm is None:
            return None
        return self.bound / self.direct_norm if self.direct_norm > 0 else float("inf")

    def to_record(self) -> dict[str, Any]:
        return {
            "bound": self.bound,
            "direct_norm": self.direct_norm,
            "sound": self.sound,
            "slack": self.slack,
            "block_count": self.block_count,
        }


def paving_norm_certify(
    op: AssembledOperator,
    cover: PavingCover,
    certificates: dict[Region, SubBlockCertificate],
    energy: float,
    cross_check: bool = True,
    norm_factor: float = 1.0,
) -> PavingCertificate:
    """
    Certify ‖G_Λ‖ ≤ 4K(2M₁+1)^d e^{M₁^{γ/2}} from verified paving blocks.
    :param op: Operator on Λ
    :param cover: Cover with the M'/2 margin at every site
    :param certificates: Verified blocks of the cover
    :param energy: Energy E, used by the cross-check
    :param cross_check: Compare with a direct inversion
    :param norm_factor: Goodness norm factor K the blocks were verified with
    :return: The certificate
    :raises UncoveredPointError: If a site lacks a verified block with margin
    """
    for site in op.sites:
        key = tuple(int(c) for c in site)
        if key not in cover:
            raise UncoveredPointError(f"Site {key} has no paving block", site=list(key))
        cell = cover[key]
        cert = certificates.get(cell.region)
        if cert is None or not cert.verified or not cell.margin_met:
            raise UncoveredPointError(
                f"Site {key} is not covered by a verified block with margin",
                site=list(key),
                margin=cell.margin,
            )
    bound = paving_bound(cover.max_size, op.spec.lattice_dim, op.spec.gamma, norm_factor)
    direct = None
    if cross_check:
        try:
            direct = green(op, energy).op_norm
        except SingularResolventError:
            direct = float("inf")
        if direct > bound:
            logger.warning(f"Paving bound {bound:.3g} is below the direct norm {direct:.3g}")
    return PavingCertificate(bound=bound, direct_norm=direct, block_count=len(cover.regions()))


@dataclass(frozen=True)
class AnnulusCertificate:
    scale: int
    min_size: int
    gamma: float
    rho_bar: float
    corrected_rate: float
    hypotheses: dict[str, bool]
    asymptotic: dict[str, bool]
    holds: bool | None = None
    worst_rate: float | None = None
    worst_pair: dict[str, Any] | None = None
    notes: list[str] = field(default_factory=list)

    @property
    def required_constant(self) -> float | None:
        """Smallest C with ρ̄ - C/M₀^{γ/2} at or below the observed worst rate."""
        if self.worst_rate is None:
            return None
        return max(0.0, (self.rho_bar - self.worst_rate) * self.min_size ** (self.gamma / 2.0))

    def to_record(self) -> dict[str, Any]:
        return {
            "scale": self.scale,
            "min_size": self.min_size,
            "corrected_rate": self.corrected_rate,
            "hypotheses": self.hypotheses,
            "asymptotic": self.asymptotic,
            "holds": self.holds,
            "worst_rate": self.worst_rate,
            "worst_pair": self.worst_pair,
            "required_constant": self.required_constant,
        }


def annulus_decay_certify(
    op: AssembledOperator,
    core_sites: np.ndarray | Region,
    min_size: int,
    energy: float,
    rho_bar: float,
    c_res2: float = 1.0,
    crude_norm_bound: float | None = None,
    strict: bool = False,
    cross_check: bool = True,
    norm_factor: float = 1.0,
) -> AnnulusCertificate:
    """
    Certify decay at rate ρ̄ - C/M₀^{γ/2} on Λ with a small core Λ₁ of
    possibly bad sites, the shell Λ \\ Λ₁ being paved by verified blocks.

    The core diameter and shell coverage hypotheses are always enforced. The
    asymptotic ones (M₀ ≥ (log N)^{2/γ}, block size ≤ N^{γ/3}, block margins,
    crude norm ≤ e^{N^{γ/2}}) are recorded and only enforced when strict.
    :param op: Operator on Λ
    :param core_sites: The core Λ₁
    :param min_size: Paving block size M₀
    :param energy: Energy E
    :param rho_bar: Block decay rate ρ̄
    :param c_res2: The constant C
    :param crude_norm_bound: A prior bound on ‖G_Λ‖, defaults to the direct norm
    :param strict: Enforce asymptotic hypotheses
    :param cross_check: Compare the conclusion with a direct inversion
    :param norm_factor: Goodness norm factor K for the shell blocks
    :return: The certificate
    :raises HypothesisViolatedError: If an enforced hypothesis fails
    """
    scale = op.scale
    gamma = op.spec.gamma
    d = op.spec.lattice_dim
    core = region_points(core_sites) if isinstance(core_sites, Region) else np.atleast_2d(core_sites)
    core_rows = op.rows_of(core)
    shell_rows = np.setdiff1d(np.arange(op.size), core_rows)

    core_limit = scale ** (gamma / (3.0 * d))
    if diameter(core) > core_limit:
        raise HypothesisViolatedError(
            f"Core diameter {diameter(core)} exceeds N^(γ/3d) = {core_limit:.3g}",
            hypothesis="core_diameter",
            diameter=diameter(core),
            limit=core_limit,
        )

    uncovered: list[list[int]] = []
    margins_met = True
    block_size = min_size
    if len(shell_rows):
        try:
            cover = pave_sites(op.sites[shell_rows], min_size, require_margin=False)
        except InfeasiblePavingError as exc:
            raise HypothesisViolatedError(
                f"Shell cannot be paved with blocks of size {min_size}",
                hypothesis="shell_coverage",
            ) from exc
        certificates = verify_cover(op, cover, energy, rho_bar, norm_factor)
        for key in cover:
            if not certificates[cover[key].region].verified:
                uncovered.append(list(key))
        margins_met = cover.margins_met
        block_size = cover.max_size
    if uncovered:
        raise HypothesisViolatedError(
            f"{len(uncovered)} shell sites lack a verified block",
            hypothesis="shell_coverage",
            sites=uncovered[:10],
        )

    crude = crude_norm_bound
    if crude is None:
        try:
            crude = green(op, energy).op_norm
        except SingularResolventError:
            crude = float("inf")
    log_n = np.log(max(scale, 2))
    asymptotic = {
        "min_size": min_size >= log_n ** (2.0 / gamma),
        "block_size": block_size <= scale ** (gamma / 3.0),
        "margins": margins_met,
        "crude_norm": crude <= norm_threshold(scale, gamma),
    }
    failed = [name for name, ok in asymptotic.items() if not ok]
    if failed:
        if strict:
            raise HypothesisViolatedError(
                f"Asymptotic hypotheses fail at N={scale}: {', '.join(failed)}",
                hypothesis=failed[0],
                failed=failed,
            )
        logger.debug(f"Asymptotic hypotheses not met at N={scale}: {failed}")

    corrected = rho_bar - c_res2 / min_size ** (gamma / 2.0)
    certificate = AnnulusCertificate(
        scale=scale,
        min_size=min_size,
        gamma=gamma,
        rho_bar=rho_bar,
        corrected_rate=corrected,
        hypotheses={"core_diameter": True, "shell_coverage": True},
        asymptotic=asymptotic,
    )
    if not cross_check:
        return certificate
    return annulus_cross_check(op, energy, certificate)


def annulus_cross_check(
    op: AssembledOperator,
    energy: float,
    certificate: AnnulusCertificate,
    g: GreenEvaluation | None = None,
) -> AnnulusCertificate:
    """Compare an annulus certificate with the directly inverted Green's function."""
    if g is None:
        try:
            g = green(op, energy)
        except SingularResolventError:
            return replace(certificate, holds=False, notes=["singular"])
    distances = op.distances
    rows, cols = np.nonzero(distances >= max(certificate.scale / 10.0, 1.0))
    if len(rows) == 0:
        return replace(certificate, holds=True)
    x = distances[rows, cols].astype(float) ** certificate.gamma
    rates = -np.log(np.maximum(np.abs(g.matrix[rows, cols]), LOG_FLOOR)) / x
    worst = int(np.argmin(rates))
    worst_pair = {
        "m": [int(c) for c in op.sites[rows[worst]]],
        "n": [int(c) for c in op.sites[cols[worst]]],
        "rate": float(rates[worst]),
    }
    return replace(
        certificate,
        holds=bool(rates[worst] >= certificate.corrected_rate),
        worst_rate=float(rates[worst]),
        worst_pair=worst_pair,
    )


def calibrate_annulus_constant(certificates: Iterable[AnnulusCertificate]) -> float:
    """
    Smallest C for which every cross-checked annulus certificate holds.
    :raises NoGoodAnnulusError: If no certificate carries a cross-check
    """
    required = [c.required_constant for c in certificates if c.required_constant is not None]
    if not required:
        raise NoGoodAnnulusError("No cross-checked annulus certificate to calibrate from")
    return float(max(required))
