"""
Finite-volume assembly of the two operator families.

DUAL on Z^d:   (H̃ξ)_n = λ Σ_k v̂_{n-k} ξ_k + f(θ + nω) ξ_n
DIRECT on Z:   (Hψ)_ℓ = Σ_k ĝ_{ℓ-k} ψ_k + λ v(x + ℓω) ψ_ℓ

Both share the Gevrey symbol v and the trig polynomial f = g; the roles of
hopping and potential swap between the families.
"""

import logging
from dataclasses import dataclass
from enum import Enum
from functools import cached_property, lru_cache
from typing import Any, Callable, Iterator

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator
from scipy.linalg import eigh, toeplitz

from qp_spectral_lab.errors import DimensionMismatchError, ValidationFailure
from qp_spectral_lab.lattice import Region, region_points
from qp_spectral_lab.model import (
    AnalyticPotential,
    FrequencyVector,
    GevreySymbol,
    ShiftMode,
    TorusPoint,
    coefficients_at,
    default_frequency,
    orbit_points,
    symbol_l1_norm,
    truncation_tail_bound,
    wrap,
)
from qp_spectral_lab.model.symbols import lattice_box

logger = logging.getLogger(__name__)

HERMITICITY_TOLERANCE = 1e-13
RANGE_SAMPLES_1D = 4096
RANGE_SAMPLES_PER_AXIS = 64


class OperatorFamily(str, Enum):
    DUAL = "dual"
    DIRECT = "direct"


def _raw_dim(value: Any) -> int:
    if hasattr(value, "dim"):
        return int(value.dim)
    if isinstance(value, dict):
        return len(value.get("coords", ()))
    if isinstance(value, (list, tuple)):
        return len(value)
    return 1


@lru_cache(maxsize=32)
def symbol_potential(symbol: GevreySymbol) -> AnalyticPotential:
    """The trig polynomial of a symbol, shared by every spec carrying it."""
    return AnalyticPotential.from_symbol(symbol)


class OperatorSpec(BaseModel):
    """
    Full description of a DUAL or DIRECT operator.

    symbol is the Gevrey function v (DUAL hopping, DIRECT potential) and
    profile the trig polynomial f = g (DUAL diagonal, DIRECT hopping).
    phase is θ for DUAL and x for DIRECT; dual_phase holds the phase of the
    partner family so the duality map is an involution.
    """

    model_config = ConfigDict(frozen=True, populate_by_name=True)

    family: OperatorFamily = OperatorFamily.DUAL
    coupling: float = Field(default=1e-3, ge=0.0, alias="lambda")
    symbol: GevreySymbol
    profile: AnalyticPotential
    omega: FrequencyVector
    phase: TorusPoint
    dual_phase: TorusPoint

    @model_validator(mode="before")
    @classmethod
    def _default_dual_phase(cls, data: Any) -> Any:
        if isinstance(data, dict) and data.get("dual_phase") is None:
            family = OperatorFamily(data.get("family", OperatorFamily.DUAL))
            dim = 1 if family == OperatorFamily.DIRECT else _raw_dim(data.get("omega"))
            data = {**data, "dual_phase": (0.0,) * max(dim, 1)}
        return data

    @model_validator(mode="after")
    def check_dimensions(self) -> "OperatorSpec":
        d = self.omega.dim
        if self.symbol.dim != d:
            raise ValueError(f"Symbol dimension {self.symbol.dim} differs from ω dimension {d}")
        if self.family == OperatorFamily.DUAL:
            if self.profile.dim not in (1, d):
                raise ValueError(f"DUAL potential must have dimension 1 or {d}, got {self.profile.dim}")
            if self.phase.dim != self.profile.dim:
                raise ValueError(f"DUAL phase dimension {self.phase.dim} differs from potential dimension")
            if self.dual_phase.dim != d:
                raise ValueError(f"DUAL partner phase must have dimension {d}")
        else:
            if self.profile.dim != 1:
                raise ValueError("DIRECT hopping symbol g must be one-dimensional")
            if self.phase.dim != d:
                raise ValueError(f"DIRECT phase must have dimension {d}, got {self.phase.dim}")
            if self.dual_phase.dim != 1:
                raise ValueError("DIRECT partner phase must be one-dimensional")
        return self

    @property
    def dim(self) -> int:
        """Dimension of the frequency and of the symbol v."""
        return self.omega.dim

    @property
    def lattice_dim(self) -> int:
        return self.dim if self.family == OperatorFamily.DUAL else 1

    @property
    def shift_mode(self) -> ShiftMode:
        if self.family == OperatorFamily.DUAL and self.profile.dim == 1 and self.dim > 1:
            return ShiftMode.INNER
        return ShiftMode.COMPONENTWISE

    @property
    def dualizable(self) -> bool:
        return self.family == OperatorFamily.DIRECT or self.profile.dim == 1

    @property
    def gamma(self) -> float:
        return self.symbol.gamma

    @property
    def rho(self) -> float:
        return self.symbol.rho

    @property
    def hopping(self) -> GevreySymbol | AnalyticPotential:
        return self.symbol if self.family == OperatorFamily.DUAL else self.profile

    @property
    def potential(self) -> AnalyticPotential:
        if self.family == OperatorFamily.DUAL:
            return self.profile
        return symbol_potential(self.symbol)

    def with_phase(self, phase: TorusPoint) -> "OperatorSpec":
        return self.model_copy(update={"phase": phase})

    def with_coupling(self, coupling: float) -> "OperatorSpec":
        return self.model_copy(update={"coupling": coupling})


def default_model(
    dim: int = 1,
    gamma: float = 0.7,
    rho: float = 1.0,
    coupling: float = 1e-3,
    radius: int = 16,
    family: OperatorFamily = OperatorFamily.DUAL,
) -> OperatorSpec:
    """
    The reference model: f = g = 2cos2πθ, v CANONICAL, ω_i = frac(√p_i).
    """
    return OperatorSpec(
        family=family,
        coupling=coupling,
        symbol=GevreySymbol(rho=rho, gamma=gamma, dim=dim, radius=radius),
        profile=AnalyticPotential.cosine(),
        omega=default_frequency(dim),
        phase=TorusPoint.zeros(1 if family == OperatorFamily.DUAL else dim),
    )


@dataclass(frozen=True, eq=False)
class AssembledOperator:
    """A dense hermitian matrix with its site indexing."""

    spec: OperatorSpec
    region: Region | None
    sites: np.ndarray
    matrix: np.ndarray
    tail_bound: float

    @property
    def size(self) -> int:
        return self.matrix.shape[0]

    @property
    def scale(self) -> int:
        """Size N of the underlying region (half the sup-norm diameter otherwise)."""
        if self.region is not None:
            return self.region.size
        return int((self.sites.max(axis=0) - self.sites.min(axis=0)).max()) // 2

    @cached_property
    def index_map(self) -> dict[tuple[int, ...], int]:
        return {tuple(int(c) for c in site): row for row, site in enumerate(self.sites)}

    def row(self, site: tuple[int, ...]) -> int:
        return self.index_map[tuple(site)]

    @cached_property
    def distances(self) -> np.ndarray:
        """Pairwise sup-norm distances |m - n| between sites."""
        diff = self.sites[:, None, :] - self.sites[None, :, :]
        return np.abs(diff).max(axis=2)

    def hermiticity_residual(self) -> float:
        return float(np.abs(self.matrix - self.matrix.conj().T).max())

    def is_diagonal(self) -> bool:
        return not np.any(self.matrix - np.diag(np.diag(self.matrix)))

    @cached_property
    def decomposition(self) -> tuple[np.ndarray, np.ndarray]:
        """
        Eigenvalues (ascending) and eigenvectors; diagonal matrices are
        decomposed exactly without calling LAPACK.
        """
        if self.is_diagonal():
            diagonal = np.real(np.diag(self.matrix))
            order = np.argsort(diagonal, kind="stable")
            vectors = np.eye(self.size, dtype=self.matrix.dtype)[:, order]
            return diagonal[order], vectors
        values, vectors = eigh(self.matrix)
        return values, vectors

    @property
    def spectrum(self) -> np.ndarray:
        return self.decomposition[0]

    def restrict(self, rows: np.ndarray) -> "AssembledOperator":
        """Sub-operator R_S H R_S on the given row indices."""
        rows = np.asarray(rows, dtype=np.int64)
        return AssembledOperator(
            spec=self.spec,
            region=None,
            sites=self.sites[rows],
            matrix=self.matrix[np.ix_(rows, rows)],
            tail_bound=self.tail_bound,
        )

    def rows_of(self, sites: np.ndarray) -> np.ndarray:
        return np.asarray([self.row(tuple(int(c) for c in s)) for s in np.atleast_2d(sites)], dtype=np.int64)

    def triples(self) -> Iterator[tuple[str, str, float]]:
        """(row_site, col_site, value) for every nonzero entry."""
        labels = [" ".join(str(int(c)) for c in site) for site in self.sites]
        rows, cols = np.nonzero(self.matrix)
        for i, j in zip(rows, cols):
            yield labels[i], labels[j], float(np.real(self.matrix[i, j]))


def _is_contiguous_interval(sites: np.ndarray) -> bool:
    return sites.shape[1] == 1 and bool(np.all(np.diff(sites[:, 0]) == 1))


def toeplitz_matrix(coefficient: Callable[[np.ndarray], np.ndarray], sites: np.ndarray) -> np.ndarray:
    """
    Matrix with entries c(m - n) over the given sites.
    :param coefficient: Vectorized map from offsets of shape (k, d) to values
    :param sites: Integer array of shape (k, d)
    :return: Dense matrix
    """
    if _is_contiguous_interval(sites):
        k = len(sites)
        lags = np.arange(k)[:, None]
        return toeplitz(coefficient(lags), coefficient(-lags))

    span = int((sites.max(axis=0) - sites.min(axis=0)).max())
    d = sites.shape[1]
    offsets = lattice_box(span, d)
    table = coefficient(offsets).reshape((2 * span + 1,) * d)
    diff = sites[:, None, :] - sites[None, :, :] + span
    return table[tuple(np.moveaxis(diff, -1, 0))]


def _trig_coefficients(profile: AnalyticPotential) -> Callable[[np.ndarray], np.ndarray]:
    modes, values = profile.modes()
    lookup = {tuple(int(c) for c in m): v for m, v in zip(modes, values)}
    has_imag = any(v.imag != 0 for v in values)

    def coefficient(offsets: np.ndarray) -> np.ndarray:
        out = np.asarray([lookup.get(tuple(int(c) for c in o), 0.0) for o in np.atleast_2d(offsets)])
        return out.astype(complex if has_imag else float)

    return coefficient


def assemble_dual(
    spec: OperatorSpec,
    region: Region,
    theta_override: TorusPoint | None = None,
) -> AssembledOperator:
    """
    Assemble H̃_Λ(θ) with entries λ v̂_{m-n} + δ_{mn} f(θ + nω).
    :param spec: A DUAL spec
    :param region: Region Λ of dimension d
    :param theta_override: Phase replacing spec.phase
    :return: The assembled operator
    """
    if spec.family != OperatorFamily.DUAL:
        raise ValidationFailure(f"assemble_dual needs a DUAL spec, got {spec.family.value}")
    if region.dim != spec.dim:
        raise DimensionMismatchError(
            f"Region dimension {region.dim} differs from operator dimension {spec.dim}",
            region_dim=region.dim,
            operator_dim=spec.dim,
        )
    theta = theta_override if theta_override is not None else spec.phase
    sites = region_points(region)

    hopping = toeplitz_matrix(lambda offsets: coefficients_at(spec.symbol, offsets), sites)
    diagonal = spec.profile.evaluate_many(orbit_points(theta, spec.omega, sites, spec.shift_mode))
    matrix = spec.coupling * hopping + np.diag(diagonal)

    tail = spec.coupling * truncation_tail_bound(spec.symbol, spec.symbol.radius)
    return AssembledOperator(spec=spec, region=region, sites=sites, matrix=matrix, tail_bound=tail)


def assemble_direct(
    spec: OperatorSpec,
    size: int | Region,
    x_override: TorusPoint | None = None,
) -> AssembledOperator:
    """
    Assemble H_{[-N,N]}(x) with entries ĝ_{ℓ-ℓ'} + δ_{ℓℓ'} λ v(x + ℓω).
    :param spec: A DIRECT spec
    :param size: Half-width N of the interval, or a one-dimensional region
    :param x_override: Phase replacing spec.phase
    :return: The assembled operator
    """
    if spec.family != OperatorFamily.DIRECT:
        raise ValidationFailure(f"assemble_direct needs a DIRECT spec, got {spec.family.value}")
    region = size if isinstance(size, Region) else Region.cube(size, dim=1)
    if region.dim != 1:
        raise DimensionMismatchError(f"DIRECT operators live on Z, got a region of dimension {region.dim}")
    x = x_override if x_override is not None else spec.phase
    sites = region_points(region)

    hopping = toeplitz_matrix(_trig_coefficients(spec.profile), sites)
    orbit = wrap(x.as_array()[None, :] + sites[:, :1] * spec.omega.as_array()[None, :])
    diagonal = spec.potential.evaluate_many(orbit)
    matrix = hopping + spec.coupling * np.diag(diagonal)

    tail = spec.coupling * truncation_tail_bound(spec.symbol, spec.symbol.radius)
    return AssembledOperator(spec=spec, region=region, sites=sites, matrix=matrix, tail_bound=tail)


def assemble(
    spec: OperatorSpec,
    region: Region | int,
    phase_override: TorusPoint | None = None,
) -> AssembledOperator:
    """Assemble either family on a region (an integer N means the centered cube)."""
    if isinstance(region, int):
        region = Region.cube(region, dim=spec.lattice_dim)
    if spec.family == OperatorFamily.DUAL:
        return assemble_dual(spec, region, phase_override)
    return assemble_direct(spec, region, phase_override)


def numerical_range(spec: OperatorSpec) -> tuple[float, float]:
    """
    Interval containing the spectrum of every finite restriction, up to the
    sampling resolution of the diagonal profile.
    :return: (lower, upper)
    """
    if spec.family == OperatorFamily.DUAL:
        d = spec.profile.dim
        count = RANGE_SAMPLES_1D if d == 1 else RANGE_SAMPLES_PER_AXIS
        axis = np.arange(count) / count
        grid = np.stack(np.meshgrid(*([axis] * d), indexing="ij"), axis=-1).reshape(-1, d)
        values = spec.profile.evaluate_many(grid)
        spread = spec.coupling * symbol_l1_norm(spec.symbol)
    else:
        grid = (np.arange(RANGE_SAMPLES_1D) / RANGE_SAMPLES_1D)[:, None]
        values = spec.profile.evaluate_many(grid)
        spread = spec.coupling * symbol_l1_norm(spec.symbol)
    return float(values.min() - spread), float(values.max() + spread)


def energy_grid(spec: OperatorSpec, count: int) -> np.ndarray:
    """count energies spread uniformly over the interior of the numerical range."""
    if count < 1:
        raise ValidationFailure("Energy grid must be nonempty")
    lower, upper = numerical_range(spec)
    return lower + (upper - lower) * (np.arange(count) + 0.5) / count
