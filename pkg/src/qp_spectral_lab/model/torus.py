"""
Torus arithmetic: points of T^d, frequency vectors and orbit shifts.

All arithmetic wraps into [0, 1) by floor subtraction.
"""

import logging
import math
from typing import Any, Sequence

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

from qp_spectral_lab.errors import DimensionMismatchError
from qp_spectral_lab.model.types import ShiftMode

logger = logging.getLogger(__name__)

PRIMES = (2, 3, 5, 7, 11, 13, 17, 19, 23, 29, 31, 37)

# n·ω closer than this to an integer counts as an exact rational relation
RATIONAL_RELATION_TOLERANCE = 1e-15


def wrap(values: Any) -> np.ndarray:
    """
    Reduce reals modulo 1 into [0, 1).
    :param values: Scalar or array of reals
    :return: Array of wrapped values
    """
    arr = np.asarray(values, dtype=float)
    wrapped = arr - np.floor(arr)
    # x - floor(x) rounds up to 1.0 for tiny negative x
    return np.where(wrapped >= 1.0, 0.0, wrapped)


def circular_distance(a: Any, b: Any) -> np.ndarray:
    """
    Distance on the circle R/Z, componentwise.
    :param a: First array of reals
    :param b: Second array of reals
    :return: Array of distances in [0, 1/2]
    """
    diff = np.abs(wrap(np.asarray(a, dtype=float) - np.asarray(b, dtype=float)))
    return np.minimum(diff, 1.0 - diff)


def _as_coords(value: Any) -> tuple[float, ...]:
    if isinstance(value, (int, float)):
        return (float(value),)
    return tuple(float(v) for v in value)


class TorusPoint(BaseModel):
    """A point of T^d stored with every coordinate in [0, 1)."""

    model_config = ConfigDict(frozen=True)

    coords: tuple[float, ...] = Field(min_length=1)

    @model_validator(mode="before")
    @classmethod
    def _accept_bare_coordinates(cls, data: Any) -> Any:
        if isinstance(data, (int, float, list, tuple, np.ndarray)):
            return {"coords": _as_coords(data)}
        return data

    @field_validator("coords", mode="before")
    @classmethod
    def _wrap_coords(cls, value: Any) -> tuple[float, ...]:
        return tuple(float(c) for c in wrap(_as_coords(value)))

    @property
    def dim(self) -> int:
        return len(self.coords)

    def as_array(self) -> np.ndarray:
        return np.asarray(self.coords, dtype=float)

    @classmethod
    def zeros(cls, dim: int) -> "TorusPoint":
        return cls(coords=(0.0,) * dim)


def measure_small_divisors(coords: Sequence[float], index_range: int) -> float:
    """
    Measure the worst small-divisor exponent of a frequency vector.

    Returns max over 2 <= |n| <= index_range of -log||n·ω|| / log|n|, where
    ||·|| is the distance to the nearest integer and |n| the sup norm.
    :param coords: Frequency coordinates
    :param index_range: Largest sup norm of the integer vectors checked
    :return: Nonnegative exponent
    :raises ValueError: If some n·ω is an integer (rationally dependent frequencies)
    """
    omega = np.asarray(coords, dtype=float)
    d = omega.size
    axis = np.arange(-index_range, index_range + 1)
    grid = np.stack(np.meshgrid(*([axis] * d), indexing="ij"), axis=-1).reshape(-1, d)
    sup = np.abs(grid).max(axis=1)
    grid, sup = grid[sup > 0], sup[sup > 0]

    products = grid @ omega
    divisors = np.abs(products - np.round(products))
    if divisors.min() < RATIONAL_RELATION_TOLERANCE:
        worst = grid[int(np.argmin(divisors))]
        raise ValueError(
            f"Frequency {tuple(coords)} has an exact rational relation at n={tuple(worst)}"
        )

    mask = sup >= 2
    if not mask.any():
        return 0.0
    exponents = -np.log(divisors[mask]) / np.log(sup[mask])
    return float(max(exponents.max(), 0.0))


def default_index_range(dim: int) -> int:
    return 32 if dim <= 3 else 8


class FrequencyVector(BaseModel):
    """A frequency ω in T^d together with its measured Diophantine quality."""

    model_config = ConfigDict(frozen=True)

    coords: tuple[float, ...] = Field(min_length=1)
    index_range: int = Field(default=0, ge=0)
    diophantine_log_quality: float | None = Field(default=None, ge=0.0)

    @model_validator(mode="before")
    @classmethod
    def _measure_quality(cls, data: Any) -> Any:
        if isinstance(data, (int, float, list, tuple, np.ndarray)):
            data = {"coords": _as_coords(data)}
        if not isinstance(data, dict):
            return data
        if data.get("coords") is None:
            return data
        data = dict(data)
        coords = _as_coords(data["coords"])
        index_range = data.get("index_range") or default_index_range(len(coords))
        data["coords"] = coords
        data["index_range"] = index_range
        if data.get("diophantine_log_quality") is None:
            data["diophantine_log_quality"] = measure_small_divisors(coords, index_range)
        return data

    @field_validator("coords", mode="after")
    @classmethod
    def _wrap_coords(cls, value: tuple[float, ...]) -> tuple[float, ...]:
        return tuple(float(c) for c in wrap(value))

    @property
    def dim(self) -> int:
        return len(self.coords)

    def as_array(self) -> np.ndarray:
        return np.asarray(self.coords, dtype=float)


def default_frequency(dim: int) -> FrequencyVector:
    """
    Componentwise Diophantine surrogate ω_i = frac(√p_i) over the first d primes.
    :param dim: Dimension d
    :return: Frequency vector
    """
    if dim > len(PRIMES):
        raise ValueError(f"No default frequency for dimension {dim}")
    coords = tuple(math.sqrt(p) % 1.0 for p in PRIMES[:dim])
    return FrequencyVector(coords=coords)


def frequency_family(base: FrequencyVector, t: float) -> FrequencyVector:
    """
    One-parameter family ω(t) = frac(ω₀ + t·(1, ..., 1)) used to scan frequencies.
    :param base: The base frequency ω₀
    :param t: Family parameter
    :return: Shifted frequency vector
    """
    return FrequencyVector(coords=tuple(wrap(base.as_array() + t)))


def orbit_points(
    theta: TorusPoint,
    omega: FrequencyVector,
    sites: np.ndarray,
    mode: ShiftMode = ShiftMode.COMPONENTWISE,
) -> np.ndarray:
    """
    Shift a phase along many lattice sites at once.
    :param theta: Base phase
    :param omega: Frequency vector
    :param sites: Integer array of shape (k, d)
    :param mode: COMPONENTWISE gives θ + nω in T^d, INNER gives x + n·ω in T
    :return: Array of shape (k, d) or (k, 1) with wrapped coordinates
    """
    sites = np.atleast_2d(np.asarray(sites))
    if sites.shape[1] != omega.dim:
        raise DimensionMismatchError(
            f"Sites of dimension {sites.shape[1]} do not match ω of dimension {omega.dim}",
            sites_dim=int(sites.shape[1]),
            omega_dim=omega.dim,
        )
    if mode == ShiftMode.COMPONENTWISE:
        if theta.dim != omega.dim:
            raise DimensionMismatchError(
                f"Componentwise shift needs θ and ω of equal dimension, got {theta.dim} and {omega.dim}",
                theta_dim=theta.dim,
                omega_dim=omega.dim,
            )
        return wrap(theta.as_array()[None, :] + sites * omega.as_array()[None, :])

    if theta.dim != 1:
        raise DimensionMismatchError(
            f"Inner shift needs a one-dimensional base point, got dimension {theta.dim}",
            theta_dim=theta.dim,
        )
    return wrap(theta.coords[0] + sites @ omega.as_array())[:, None]


def shift_orbit(
    theta: TorusPoint,
    omega: FrequencyVector,
    n: Sequence[int] | int,
    mode: ShiftMode = ShiftMode.COMPONENTWISE,
) -> TorusPoint:
    """
    Shift a torus point by the lattice vector n.
    :param theta: Base point (θ ∈ T^d for COMPONENTWISE, x ∈ T for INNER)
    :param omega: Frequency vector
    :param n: Integer vector of dimension ω.dim
    :param mode: Shift mode
    :return: The shifted point
    """
    site = np.atleast_1d(np.asarray(n, dtype=np.int64))
    if site.size != omega.dim:
        raise DimensionMismatchError(
            f"Lattice vector of dimension {site.size} does not match ω of dimension {omega.dim}",
            n_dim=int(site.size),
            omega_dim=omega.dim,
        )
    return TorusPoint(coords=tuple(orbit_points(theta, omega, site[None, :], mode)[0]))
