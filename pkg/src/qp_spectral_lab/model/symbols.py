"""
Gevrey hopping symbols v̂_n with |v̂_n| ≤ e^{-ρ|n|^γ}.

The CANONICAL rule saturates the bound, v̂_n = e^{-ρ|n|^γ}; the TABLE rule
holds finitely many user-supplied real, even coefficients.
"""

import logging
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator

from qp_spectral_lab.constants import TAIL_TERM_CUTOFF
from qp_spectral_lab.errors import ValidationFailure
from qp_spectral_lab.model.types import SymbolRule

logger = logging.getLogger(__name__)

TAIL_CHUNK = 4096
TAIL_MAX_CHUNKS = 4096
GEVREY_RATIO_SLACK = 1e-12


def gevrey_envelope(rho: float, gamma: float, sup_norms: np.ndarray) -> np.ndarray:
    """The envelope e^{-ρ|n|^γ} evaluated on an array of sup norms."""
    return np.exp(-rho * np.asarray(sup_norms, dtype=float) ** gamma)


def lattice_box(radius: int, dim: int) -> np.ndarray:
    """All integer vectors with sup norm at most radius, in lexicographic order."""
    axis = np.arange(-radius, radius + 1)
    return np.stack(np.meshgrid(*([axis] * dim), indexing="ij"), axis=-1).reshape(-1, dim)


class SymbolEntry(BaseModel):
    model_config = ConfigDict(frozen=True)

    n: tuple[int, ...]
    value: float


class GevreySymbol(BaseModel):
    """
    Hopping coefficient rule v̂_n truncated at a radius R.
    """

    model_config = ConfigDict(frozen=True)

    rule: SymbolRule = SymbolRule.CANONICAL
    rho: float = Field(default=1.0, gt=0.0)
    gamma: float = Field(default=0.7, gt=0.0, le=1.0)
    dim: int = Field(default=1, ge=1)
    radius: int = Field(default=16, ge=1)
    coefficients: tuple[SymbolEntry, ...] = ()

    @model_validator(mode="after")
    def check_table(self) -> "GevreySymbol":
        if self.rule == SymbolRule.CANONICAL:
            if self.coefficients:
                raise ValueError("CANONICAL symbols take no coefficient table")
            return self

        seen: dict[tuple[int, ...], float] = {}
        for entry in self.coefficients:
            if len(entry.n) != self.dim:
                raise ValueError(f"Coefficient index {entry.n} does not have dimension {self.dim}")
            if max(abs(i) for i in entry.n) > self.radius:
                raise ValueError(f"Coefficient index {entry.n} lies beyond radius {self.radius}")
            if entry.n in seen and seen[entry.n] != entry.value:
                raise ValueError(f"Conflicting values for coefficient {entry.n}")
            seen[entry.n] = entry.value
        for n, value in seen.items():
            mirror = tuple(-i for i in n)
            if mirror in seen and seen[mirror] != value:
                raise ValueError(f"Symbol is not even: v̂{n} != v̂{mirror}")
        return self

    @property
    def truncation_radius(self) -> int:
        return self.radius

    def table(self) -> dict[tuple[int, ...], float]:
        """
        Coefficient table with absent mirror entries v̂_{-n} filled in.
        :return: Mapping from index to coefficient
        """
        table: dict[tuple[int, ...], float] = {}
        for entry in self.coefficients:
            table[entry.n] = entry.value
            table.setdefault(tuple(-i for i in entry.n), entry.value)
        return table

    @classmethod
    def from_table(
        cls,
        values: dict[tuple[int, ...], float],
        rho: float,
        gamma: float,
        radius: int,
    ) -> "GevreySymbol":
        dim = len(next(iter(values))) if values else 1
        entries = tuple(SymbolEntry(n=n, value=v) for n, v in sorted(values.items()))
        return cls(
            rule=SymbolRule.TABLE,
            rho=rho,
            gamma=gamma,
            dim=dim,
            radius=radius,
            coefficients=entries,
        )


def coefficients_at(symbol: GevreySymbol, offsets: np.ndarray) -> np.ndarray:
    """
    Vectorized v̂ lookup.
    :param symbol: The symbol
    :param offsets: Integer array of shape (k, d)
    :return: Array of k coefficients, zero beyond the truncation radius
    """
    offsets = np.atleast_2d(np.asarray(offsets))
    sup = np.abs(offsets).max(axis=1)
    inside = sup <= symbol.radius

    if symbol.rule == SymbolRule.CANONICAL:
        return np.where(inside, gevrey_envelope(symbol.rho, symbol.gamma, sup), 0.0)

    table = symbol.table()
    values = np.zeros(len(offsets))
    for i in np.flatnonzero(inside):
        values[i] = table.get(tuple(int(c) for c in offsets[i]), 0.0)
    return values


def symbol_coefficient(symbol: GevreySymbol, n: Sequence[int] | int) -> float:
    """
    Return v̂_n, or 0 for |n| beyond the truncation radius.
    :param symbol: The symbol
    :param n: Integer vector of dimension symbol.dim
    :return: The coefficient
    """
    site = np.atleast_1d(np.asarray(n, dtype=np.int64))
    if site.size != symbol.dim:
        raise ValidationFailure(
            f"Index {tuple(site)} does not match symbol dimension {symbol.dim}"
        )
    return float(coefficients_at(symbol, site[None, :])[0])


def symbol_l1_norm(symbol: GevreySymbol) -> float:
    """Σ_{|n|≤R} |v̂_n|, the Schur bound on the norm of the truncated hopping."""
    if symbol.rule == SymbolRule.TABLE:
        return float(sum(abs(v) for v in symbol.table().values()))
    return float(np.abs(coefficients_at(symbol, lattice_box(symbol.radius, symbol.dim))).sum())


@dataclass(frozen=True)
class GevreyReport:
    passed: bool
    worst_n: tuple[int, ...] | None
    worst_ratio: float


def verify_gevrey(symbol: GevreySymbol) -> GevreyReport:
    """
    Check |v̂_n| ≤ e^{-ρ|n|^γ} coefficient by coefficient.

    Ties for the worst ratio go to the lexicographically largest index.
    :param symbol: The symbol to check
    :return: Report with the worst index and ratio
    """
    if symbol.rule == SymbolRule.CANONICAL:
        indices = lattice_box(symbol.radius, symbol.dim)
    else:
        keys = sorted(symbol.table())
        if not keys:
            return GevreyReport(passed=True, worst_n=None, worst_ratio=0.0)
        indices = np.asarray(keys, dtype=np.int64)

    values = coefficients_at(symbol, indices)
    bounds = gevrey_envelope(symbol.rho, symbol.gamma, np.abs(indices).max(axis=1))
    ratios = np.abs(values) / bounds

    worst_ratio = float(ratios.max())
    worst = int(np.flatnonzero(ratios == worst_ratio)[-1])
    passed = worst_ratio <= 1.0 + GEVREY_RATIO_SLACK
    if not passed:
        logger.warning(
            f"Gevrey bound violated at n={tuple(indices[worst])} with ratio {worst_ratio:.6g}"
        )
    return GevreyReport(
        passed=passed,
        worst_n=tuple(int(c) for c in indices[worst]),
        worst_ratio=worst_ratio,
    )


def truncation_tail_bound(symbol: GevreySymbol, radius: int) -> float:
    """
    Σ_{|n|>R} e^{-ρ|n|^γ} summed shell by shell over Z^d.

    The shell |n| = k holds (2k+1)^d - (2k-1)^d points. Summation stops once
    the shell terms are decreasing and below the cutoff.
    :param symbol: Symbol providing ρ, γ and d
    :param radius: Truncation radius R ≥ 1
    :return: Operator-norm bound on the discarded hopping (Schur test)
    """
    if radius < 1:
        raise ValidationFailure(f"Truncation radius must be at least 1, got {radius}")

    total = 0.0
    start = radius + 1
    for _ in range(TAIL_MAX_CHUNKS):
        shells = np.arange(start, start + TAIL_CHUNK, dtype=float)
        counts = (2 * shells + 1) ** symbol.dim - (2 * shells - 1) ** symbol.dim
        terms = counts * gevrey_envelope(symbol.rho, symbol.gamma, shells)
        total += float(terms.sum())
        if terms[-1] < TAIL_TERM_CUTOFF and terms[-1] <= terms[-2]:
            return total
        start += TAIL_CHUNK

    logger.warning(
        f"Tail sum for ρ={symbol.rho}, γ={symbol.gamma} did not reach the cutoff; "
        "returning the partial sum"
    )
    return total
