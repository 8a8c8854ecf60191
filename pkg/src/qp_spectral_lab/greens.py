"""
Finite-volume Green's functions G_Λ(E) = (H_Λ - E + iε)^{-1} and the
large-deviation bound checks on them.
"""

import logging
from dataclasses import dataclass, field
from typing import Any

import numpy as np
from scipy.linalg import lu_factor, lu_solve

from qp_spectral_lab.constants import LOG_FLOOR
from qp_spectral_lab.errors import SingularResolventError, ValidationFailure
from qp_spectral_lab.operators import AssembledOperator

logger = logging.getLogger(__name__)

RESIDUAL_TOLERANCE = 1e-10
CONDITION_MAX = 1e14
REFINEMENT_STEPS = 3
MAX_VIOLATORS = 5


def terminal_rate(rho: float, gamma: float) -> float:
    """The terminal decay rate (1 - 5^{-γ})ρ/2 of the large deviation bounds."""
    return (1.0 - 5.0 ** (-gamma)) * rho / 2.0


def norm_threshold(scale: int, gamma: float) -> float:
    """The norm bound e^{N^{γ/2}} at scale N."""
    return float(np.exp(scale ** (gamma / 2.0)))


@dataclass(frozen=True, eq=False)
class GreenEvaluation:
    operator: AssembledOperator
    energy: float
    epsilon: float
    matrix: np.ndarray
    op_norm: float
    condition_estimate: float
    residual: float

    def entry(self, m: tuple[int, ...], n: tuple[int, ...]) -> complex | float:
        value = self.matrix[self.operator.row(m), self.operator.row(n)]
        return value if np.iscomplexobj(self.matrix) else float(value)

    def profile(self, min_distance: float = 0.0) -> dict[str, np.ndarray]:
        """
        Entries with their sup-norm distance, for decay plots.
        :param min_distance: Smallest |m - n| kept
        :return: Arrays rows, cols, distance, value, log_abs
        """
        distances = self.operator.distances
        rows, cols = np.nonzero(distances >= min_distance)
        values = self.matrix[rows, cols]
        return {
            "rows": rows,
            "cols": cols,
            "distance": distances[rows, cols],
            "value": values,
            "log_abs": np.log(np.maximum(np.abs(values), LOG_FLOOR)),
        }


def green(
    op: AssembledOperator,
    energy: float,
    epsilon: float = 0.0,
    *,
    residual_tolerance: float = RESIDUAL_TOLERANCE,
    condition_max: float = CONDITION_MAX,
) -> GreenEvaluation:
    """
    Invert H_Λ - E + iε with a residual-verified dense factorization.

    The norm and the condition number come from the spectrum of H_Λ, since
    H_Λ - E + iε is normal.
    :param op: Assembled operator
    :param energy: Real energy E
    :param epsilon: Nonnegative regularization ε
    :param residual_tolerance: Allowed max-entry residual relative to max(1, ‖G‖)
    :param condition_max: Condition number above which ε = 0 inversions are refused
    :return: The Green's function
    :raises SingularResolventError: If E is an eigenvalue at resolution (ε = 0)
    """
    if epsilon < 0:
        raise ValidationFailure(f"Regularization must be nonnegative, got {epsilon}")

    gaps = np.abs(op.spectrum - energy + 1j * epsilon)
    smallest, largest = float(gaps.min()), float(gaps.max())
    if smallest == 0.0 or (epsilon == 0.0 and largest / smallest > condition_max):
        raise SingularResolventError(
            f"E={energy} lies in the spectrum at resolution (distance {smallest:.3g})",
            energy=energy,
            distance=smallest,
        )
    op_norm = 1.0 / smallest
    condition = largest / smallest

    dtype = complex if (epsilon > 0 or np.iscomplexobj(op.matrix)) else float
    shifted = op.matrix.astype(dtype) - (energy - 1j * epsilon if epsilon > 0 else energy) * np.eye(op.size)
    identity = np.eye(op.size, dtype=dtype)

    if op.is_diagonal():
        inverse = np.diag(1.0 / np.diag(shifted))
    else:
        factors = lu_factor(shifted)
        inverse = lu_solve(factors, identity)
        for _ in range(REFINEMENT_STEPS):
            correction = identity - shifted @ inverse
            if np.abs(correction).max() <= 1e-3 * residual_tolerance:
                break
            inverse = inverse + lu_solve(factors, correction)
        if dtype is float:
            inverse = 0.5 * (inverse + inverse.T)

    residual = float(np.abs(shifted @ inverse - identity).max())
    if residual > residual_tolerance * max(1.0, op_norm):
        if epsilon == 0.0:
            raise SingularResolventError(
                f"Inverse residual {residual:.3g} failed verification at E={energy}",
                energy=energy,
                residual=residual,
            )
        logger.warning(f"Inverse residual {residual:.3g} above tolerance at E={energy}, ε={epsilon}")

    return GreenEvaluation(
        operator=op,
        energy=energy,
        epsilon=epsilon,
        matrix=inverse,
        op_norm=op_norm,
        condition_estimate=condition,
        residual=residual,
    )


@dataclass(frozen=True)
class DecayFit:
    gamma: float
    rho_bar_fit: float
    r_squared: float
    min_rate: float
    pair_count: int


def fit_decay(distances: np.ndarray, magnitudes: np.ndarray, gamma: float) -> DecayFit | None:
    """
    Least-squares rate r in |G| ≈ e^{-r|n-n'|^γ}, fitted through the origin.

    The through-origin slope is an x²-weighted mean of the per-pair rates, so
    the worst-pair rate never exceeds it.
    :param distances: Positive sup-norm distances
    :param magnitudes: Matching absolute values
    :param gamma: Regressor exponent
    :return: The fit, or None without pairs
    """
    if len(distances) == 0:
        return None
    x = np.asarray(distances, dtype=float) ** gamma
    y = -np.log(np.maximum(np.asarray(magnitudes, dtype=float), LOG_FLOOR))
    rate = float(np.dot(x, y) / np.dot(x, x))
    total = float(np.sum((y - y.mean()) ** 2))
    unexplained = float(np.sum((y - rate * x) ** 2))
    r_squared = 1.0 - unexplained / total if total > 0 else 1.0
    return DecayFit(
        gamma=gamma,
        rho_bar_fit=rate,
        r_squared=r_squared,
        min_rate=float(np.min(y / x)),
        pair_count=int(len(x)),
    )


@dataclass(frozen=True)
class BoundCertificate:
    scale: int
    norm_bound: float
    decay_rate: float
    op_norm: float
    pass_norm: bool
    pass_decay: bool
    worst_violators: list[dict[str, Any]] = field(default_factory=list)
    fit: DecayFit | None = None

    @property
    def passed(self) -> bool:
        return self.pass_norm and self.pass_decay

    @property
    def worst_pair_rate(self) -> float | None:
        return self.fit.min_rate if self.fit else None

    def to_record(self) -> dict[str, Any]:
        return {
            "scale": self.scale,
            "norm_bound": self.norm_bound,
            "decay_rate": self.decay_rate,
            "op_norm": self.op_norm,
            "pass_norm": self.pass_norm,
            "pass_decay": self.pass_decay,
            "worst_pair_rate": self.worst_pair_rate,
            "rho_bar_fit": self.fit.rho_bar_fit if self.fit else None,
            "r_squared": self.fit.r_squared if self.fit else None,
            "worst_violators": self.worst_violators,
        }


def bound_certificate(
    matrix: np.ndarray,
    op_norm: float,
    distances: np.ndarray,
    sites: np.ndarray,
    scale: int,
    gamma: float,
    rho_bar: float,
    norm_factor: float = 1.0,
    decay_factor: float = 1.0,
) -> BoundCertificate:
    """
    Check ‖G‖ ≤ c·e^{N^{γ/2}} and |G(n,n')| ≤ c'·e^{-ρ̄|n-n'|^γ} for |n-n'| ≥ N/10.
    """
    norm_bound = norm_factor * norm_threshold(scale, gamma)
    mask = distances >= max(scale / 10.0, 1.0)
    rows, cols = np.nonzero(mask)
    pair_distances = distances[rows, cols].astype(float)
    magnitudes = np.abs(matrix[rows, cols])
    bounds = decay_factor * np.exp(-rho_bar * pair_distances**gamma)
    ratios = magnitudes / bounds

    violators = []
    if len(ratios) and ratios.max() > 1.0:
        for k in np.argsort(-ratios, kind="stable")[:MAX_VIOLATORS]:
            if ratios[k] <= 1.0:
                break
            violators.append(
                {
                    "m": [int(c) for c in sites[rows[k]]],
                    "n": [int(c) for c in sites[cols[k]]],
                    "abs_value": float(magnitudes[k]),
                    "bound": float(bounds[k]),
                }
            )

    return BoundCertificate(
        scale=scale,
        norm_bound=norm_bound,
        decay_rate=rho_bar,
        op_norm=op_norm,
        pass_norm=op_norm <= norm_bound,
        pass_decay=not violators,
        worst_violators=violators,
        fit=fit_decay(pair_distances, magnitudes, gamma),
    )


def check_ldt_bounds(
    g: GreenEvaluation,
    rho_bar: float,
    scale: int | None = None,
) -> BoundCertificate:
    """
    Certify the large deviation bounds on a Green's function.
    :param g: Green's function on a region of size N
    :param rho_bar: Decay rate ρ̄
    :param scale: Override of the region size N
    :return: Certificate with pass flags, worst violators and decay fit
    """
    op = g.operator
    return bound_certificate(
        g.matrix,
        g.op_norm,
        op.distances,
        op.sites,
        op.scale if scale is None else scale,
        op.spec.gamma,
        rho_bar,
    )


def resolvent_identity_residual(
    op: AssembledOperator,
    first_rows: np.ndarray,
    energy: float,
    epsilon: float = 0.0,
    relative: bool = False,
) -> float:
    """
    Residual of G_Λ(m,n) = G_{Λ₁}(m,n)χ_{Λ₁}(n) - Σ G_{Λ₁}(m,n')H(n',n'')G_Λ(n'',n)
    over m ∈ Λ₁, n ∈ Λ, with n' ∈ Λ₁ and n'' ∈ Λ₂ = Λ \\ Λ₁.
    :param op: Operator on Λ
    :param first_rows: Row indices (or boolean mask) of Λ₁
    :param energy: Energy E
    :param epsilon: Regularization ε
    :param relative: Divide by max(1, ‖G_Λ‖)
    :return: Max absolute (or relative) discrepancy
    """
    first_rows = np.asarray(first_rows)
    if first_rows.dtype == bool:
        first_rows = np.flatnonzero(first_rows)
    second_rows = np.setdiff1d(np.arange(op.size), first_rows)

    full = green(op, energy, epsilon)
    block = green(op.restrict(first_rows), energy, epsilon).matrix

    rhs = np.zeros((len(first_rows), op.size), dtype=np.result_type(block, full.matrix))
    rhs[:, first_rows] = block
    if len(second_rows):
        coupling = op.matrix[np.ix_(first_rows, second_rows)]
        rhs -= block @ coupling @ full.matrix[second_rows, :]

    residual = float(np.abs(full.matrix[first_rows, :] - rhs).max())
    return residual / max(1.0, full.op_norm) if relative else residual


def neumann_expansion(op: AssembledOperator, energy: float, order: int = 2) -> np.ndarray:
    """
    Truncated Neumann series Σ_{k≤order} (-1)^k D^{-1}(T D^{-1})^k of
    (D + T)^{-1}, with D the diagonal of H - E and T the off-diagonal part.
    """
    diagonal = np.diag(op.matrix).astype(float) - energy
    inverse_diag = np.diag(1.0 / diagonal)
    off_diagonal = op.matrix - np.diag(np.diag(op.matrix))
    step = off_diagonal @ inverse_diag
    term = inverse_diag
    total = inverse_diag.copy()
    for k in range(1, order + 1):
        term = -term @ step
        total = total + term
    return total
