"""
Analytic potentials given as real trigonometric polynomials on T^d.
"""

import logging
from dataclasses import dataclass
from typing import Any

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator

from qp_spectral_lab.errors import CorruptCoefficientsError, DimensionMismatchError, ValidationFailure
from qp_spectral_lab.model.symbols import GevreySymbol, coefficients_at, lattice_box
from qp_spectral_lab.model.torus import TorusPoint

logger = logging.getLogger(__name__)

CONJUGATE_TOLERANCE = 1e-12
IMAGINARY_TOLERANCE = 1e-12
DEFAULT_OSCILLATION_FLOOR = 1e-3


class FourierTerm(BaseModel):
    model_config = ConfigDict(frozen=True)

    n: tuple[int, ...]
    re: float
    im: float = 0.0


class AnalyticPotential(BaseModel):
    """A real trigonometric polynomial Σ f̂_k e^{2πik·θ}."""

    model_config = ConfigDict(frozen=True)

    fourier: tuple[FourierTerm, ...]
    dim: int = Field(default=0, ge=0)
    min_oscillation: float | None = Field(default=None, ge=0.0)

    @model_validator(mode="before")
    @classmethod
    def _infer_dim(cls, data: Any) -> Any:
        if isinstance(data, dict) and not data.get("dim") and data.get("fourier"):
            first = data["fourier"][0]
            n = first.n if isinstance(first, FourierTerm) else first["n"]
            data = {**data, "dim": len(n)}
        return data

    @model_validator(mode="after")
    def check_real_valued(self) -> "AnalyticPotential":
        if self.dim < 1:
            raise ValueError("Potential dimension must be given when there are no Fourier terms")
        coeffs: dict[tuple[int, ...], complex] = {}
        for term in self.fourier:
            if len(term.n) != self.dim:
                raise ValueError(f"Fourier index {term.n} does not have dimension {self.dim}")
            if term.n in coeffs:
                raise ValueError(f"Duplicate Fourier index {term.n}")
            coeffs[term.n] = complex(term.re, term.im)
        for n, value in coeffs.items():
            mirror = coeffs.get(tuple(-i for i in n), 0.0)
            if abs(complex(mirror) - value.conjugate()) > CONJUGATE_TOLERANCE:
                raise ValueError(
                    f"Potential is not real-valued: coefficient at -{n} is not the conjugate of {value}"
                )
        return self

    def modes(self) -> tuple[np.ndarray, np.ndarray]:
        """
        :return: Integer modes of shape (m, d) and complex coefficients of shape (m,)
        """
        if not self.fourier:
            return np.zeros((0, self.dim), dtype=np.int64), np.zeros(0, dtype=complex)
        modes = np.asarray([t.n for t in self.fourier], dtype=np.int64)
        values = np.asarray([complex(t.re, t.im) for t in self.fourier])
        return modes, values

    def l1_norm(self) -> float:
        """Σ|f̂_k|, an upper bound on sup|f|."""
        return float(sum(abs(complex(t.re, t.im)) for t in self.fourier))

    def lipschitz_bound(self, axis: int | None = None) -> float:
        """
        Upper bound on the derivative along one coordinate, Σ 2π|k_axis||f̂_k|.
        With axis=None the bound covers the diagonal direction, Σ 2π|Σ_i k_i||f̂_k|.
        """
        modes, values = self.modes()
        if axis is None:
            weights = np.abs(modes.sum(axis=1))
        else:
            weights = np.abs(modes[:, axis])
        return float(2.0 * np.pi * np.sum(weights * np.abs(values)))

    def evaluate_many(self, points: np.ndarray) -> np.ndarray:
        """
        Evaluate at many points of T^d.
        :param points: Array of shape (k, d)
        :return: Real values of shape (k,)
        """
        points = np.atleast_2d(np.asarray(points, dtype=float))
        if points.shape[1] != self.dim:
            raise DimensionMismatchError(
                f"Points of dimension {points.shape[1]} do not match potential dimension {self.dim}",
                points_dim=int(points.shape[1]),
                potential_dim=self.dim,
            )
        modes, values = self.modes()
        if modes.shape[0] == 0:
            return np.zeros(points.shape[0])

        phases = points @ modes.T.astype(float)
        phases -= np.round(phases)
        result = np.exp(2j * np.pi * phases) @ values

        residue = float(np.abs(result.imag).max())
        if residue > IMAGINARY_TOLERANCE * max(1.0, self.l1_norm()):
            raise CorruptCoefficientsError(
                f"Imaginary residue {residue:.3g} exceeds tolerance; coefficient table is corrupt",
                residue=residue,
            )
        return result.real

    @classmethod
    def cosine(cls, amplitude: float = 2.0, dim: int = 1, axis: int = 0) -> "AnalyticPotential":
        """amplitude·cos 2πθ_axis."""
        unit = tuple(1 if i == axis else 0 for i in range(dim))
        mirror = tuple(-i for i in unit)
        return cls(
            fourier=(
                FourierTerm(n=unit, re=amplitude / 2.0),
                FourierTerm(n=mirror, re=amplitude / 2.0),
            ),
            dim=dim,
        )

    @classmethod
    def sum_of_cosines(cls, dim: int, amplitude: float = 2.0) -> "AnalyticPotential":
        """Σ_j amplitude·cos 2πθ_j."""
        terms = []
        for axis in range(dim):
            unit = tuple(1 if i == axis else 0 for i in range(dim))
            terms.append(FourierTerm(n=unit, re=amplitude / 2.0))
            terms.append(FourierTerm(n=tuple(-i for i in unit), re=amplitude / 2.0))
        return cls(fourier=tuple(terms), dim=dim)

    @classmethod
    def constant(cls, value: float, dim: int = 1) -> "AnalyticPotential":
        return cls(fourier=(FourierTerm(n=(0,) * dim, re=value),), dim=dim)

    @classmethod
    def from_symbol(cls, symbol: GevreySymbol, radius: int | None = None) -> "AnalyticPotential":
        """
        Trig polynomial Σ_{|n|≤R} v̂_n e^{2πin·x} of a Gevrey symbol.
        :param symbol: The symbol v
        :param radius: Truncation radius, defaults to the symbol radius
        :return: The truncated potential
        """
        radius = symbol.radius if radius is None else radius
        indices = lattice_box(radius, symbol.dim)
        values = coefficients_at(symbol, indices)
        terms = tuple(
            FourierTerm(n=tuple(int(c) for c in n), re=float(v))
            for n, v in zip(indices, values)
            if v != 0.0
        )
        return cls(fourier=terms, dim=symbol.dim)


def evaluate_potential(potential: AnalyticPotential, theta: TorusPoint) -> float:
    """
    Evaluate f(θ) = Σ f̂_k e^{2πik·θ}.
    :param potential: The potential
    :param theta: A point of T^d
    :return: The real value
    """
    return float(potential.evaluate_many(theta.as_array()[None, :])[0])


@dataclass(frozen=True)
class NondegeneracyReport:
    min_oscillation: float
    per_axis: tuple[float, ...]
    floor: float

    @property
    def degenerate(self) -> bool:
        return not self.min_oscillation > self.floor


def nondegeneracy_check(
    potential: AnalyticPotential,
    line_samples: int = 64,
    section_samples: int = 64,
    floor: float = DEFAULT_OSCILLATION_FLOOR,
    seed: int = 0,
) -> NondegeneracyReport:
    """
    Measure the oscillation of f along coordinate lines.

    For each coordinate j and each sampled section θ_j¬, records max - min of
    θ_j ↦ f(θ_j, θ_j¬) over a uniform line grid, then takes the minimum.
    :param potential: The potential f
    :param line_samples: Points per line
    :param section_samples: Random sections per coordinate
    :param floor: Oscillation at or below which f is flagged degenerate
    :param seed: Seed of the section sampler
    :return: The report
    """
    if line_samples < 8 or section_samples < 8:
        raise ValidationFailure(
            f"Sample counts must be at least 8, got {line_samples} and {section_samples}"
        )

    rng = np.random.default_rng(seed)
    d = potential.dim
    line = np.arange(line_samples) / line_samples
    sections = rng.random((section_samples, d)) if d > 1 else np.zeros((1, 1))

    per_axis = []
    for axis in range(d):
        points = np.repeat(sections, line_samples, axis=0)
        points[:, axis] = np.tile(line, len(sections))
        values = potential.evaluate_many(points).reshape(len(sections), line_samples)
        per_axis.append(float((values.max(axis=1) - values.min(axis=1)).min()))

    report = NondegeneracyReport(
        min_oscillation=min(per_axis), per_axis=tuple(per_axis), floor=floor
    )
    if report.degenerate:
        logger.warning(f"Potential flagged degenerate: per-axis oscillation {report.per_axis}")
    return report
