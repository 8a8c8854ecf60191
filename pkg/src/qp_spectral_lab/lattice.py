"""
Lattice geometry: elementary regions, sup-norm distances and paving covers.

An elementary region of size N centered at n₀ is the cube [-N, N]^d + n₀,
optionally with one corner {n: n_i ς_i 0 for every flagged i} removed, where
at least two coordinates carry a sign flag.
"""

import itertools
import logging
from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Iterator

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator

from qp_spectral_lab.constants import MAX_MATERIALIZED_SITES
from qp_spectral_lab.errors import DimensionMismatchError, InfeasiblePavingError, RegionTooLargeError
from qp_spectral_lab.model.symbols import lattice_box

logger = logging.getLogger(__name__)

Site = tuple[int, ...]


class SignFlag(str, Enum):
    NEG = "neg"
    NONE = "none"
    POS = "pos"


class ShapeKind(str, Enum):
    FULL_CUBE = "cube"
    CORNER_REMOVED = "corner"


class RegionShape(BaseModel):
    model_config = ConfigDict(frozen=True)

    kind: ShapeKind = ShapeKind.FULL_CUBE
    signs: tuple[SignFlag, ...] = ()

    @model_validator(mode="after")
    def check_signs(self) -> "RegionShape":
        flagged = sum(1 for s in self.signs if s != SignFlag.NONE)
        if self.kind == ShapeKind.FULL_CUBE and self.signs:
            raise ValueError("A full cube carries no sign flags")
        if self.kind == ShapeKind.CORNER_REMOVED and flagged < 2:
            raise ValueError(f"A removed corner needs at least two sign flags, got {flagged}")
        return self

    @property
    def shape_id(self) -> str:
        if self.kind == ShapeKind.FULL_CUBE:
            return "cube"
        symbols = {SignFlag.NEG: "-", SignFlag.NONE: "0", SignFlag.POS: "+"}
        return "corner" + "".join(symbols[s] for s in self.signs)


class Region(BaseModel):
    """An elementary region stored as shape, size and center."""

    model_config = ConfigDict(frozen=True, populate_by_name=True)

    shape: ShapeKind = ShapeKind.FULL_CUBE
    signs: tuple[SignFlag, ...] = ()
    size: int = Field(alias="N", ge=0)
    center: tuple[int, ...] = Field(min_length=1)

    @model_validator(mode="after")
    def check_shape(self) -> "Region":
        RegionShape(kind=self.shape, signs=self.signs)
        if self.signs and len(self.signs) != len(self.center):
            raise ValueError(
                f"Sign vector of length {len(self.signs)} does not match dimension {len(self.center)}"
            )
        return self

    @classmethod
    def cube(cls, size: int, center: Site | None = None, dim: int = 1) -> "Region":
        return cls(size=size, center=center if center is not None else (0,) * dim)

    @classmethod
    def from_shape(cls, shape: RegionShape, size: int, center: Site) -> "Region":
        return cls(shape=shape.kind, signs=shape.signs, size=size, center=center)

    @property
    def dim(self) -> int:
        return len(self.center)

    @property
    def region_shape(self) -> RegionShape:
        return RegionShape(kind=self.shape, signs=self.signs)

    @property
    def cardinality(self) -> int:
        full = (2 * self.size + 1) ** self.dim
        if self.shape == ShapeKind.FULL_CUBE:
            return full
        removed = 1
        for sign in self.signs:
            removed *= 2 * self.size + 1 if sign == SignFlag.NONE else self.size
        return full - removed

    def translate(self, shift: Site) -> "Region":
        if len(shift) != self.dim:
            raise DimensionMismatchError(f"Shift {shift} does not match region dimension {self.dim}")
        return self.model_copy(update={"center": tuple(c + s for c, s in zip(self.center, shift))})

    def contains(self, points: np.ndarray) -> np.ndarray:
        """
        Vectorized membership test.
        :param points: Integer array of shape (k, d)
        :return: Boolean mask of shape (k,)
        """
        points = np.atleast_2d(np.asarray(points))
        if points.shape[1] != self.dim:
            raise DimensionMismatchError(
                f"Points of dimension {points.shape[1]} do not match region dimension {self.dim}"
            )
        rel = points - np.asarray(self.center)[None, :]
        member = np.all(np.abs(rel) <= self.size, axis=1)
        if self.shape == ShapeKind.CORNER_REMOVED:
            corner = np.ones(len(points), dtype=bool)
            for axis, sign in enumerate(self.signs):
                if sign == SignFlag.POS:
                    corner &= rel[:, axis] > 0
                elif sign == SignFlag.NEG:
                    corner &= rel[:, axis] < 0
            member &= ~corner
        return member


def enumerate_shapes(dim: int) -> list[RegionShape]:
    """
    All elementary shapes in dimension d: the full cube, then every sign
    vector with at least two flags, in lexicographic order (NEG < NONE < POS).
    :param dim: Dimension d ≥ 1
    :return: 3^d - 2d shapes
    """
    if dim < 1:
        raise ValueError(f"Dimension must be positive, got {dim}")
    shapes = [RegionShape()]
    for signs in itertools.product((SignFlag.NEG, SignFlag.NONE, SignFlag.POS), repeat=dim):
        if sum(1 for s in signs if s != SignFlag.NONE) >= 2:
            shapes.append(RegionShape(kind=ShapeKind.CORNER_REMOVED, signs=signs))
    return shapes


def region_points(region: Region) -> np.ndarray:
    """
    Member points in lexicographic order.
    :param region: The region
    :return: Integer array of shape (|region|, d)
    """
    box_count = (2 * region.size + 1) ** region.dim
    if box_count > MAX_MATERIALIZED_SITES:
        raise RegionTooLargeError(
            f"Region with {box_count} box points exceeds the materialization limit",
            box_points=box_count,
        )
    points = lattice_box(region.size, region.dim) + np.asarray(region.center)[None, :]
    return points[region.contains(points)]


def diameter(points: np.ndarray) -> int:
    """Sup-norm diameter of a finite point set."""
    points = np.atleast_2d(np.asarray(points))
    if len(points) == 0:
        return 0
    return int((points.max(axis=0) - points.min(axis=0)).max())


def distance(site: Any, points: np.ndarray) -> float:
    """Sup-norm distance from a site to a finite point set; infinite for the empty set."""
    points = np.atleast_2d(np.asarray(points))
    if points.size == 0:
        return float("inf")
    return float(np.abs(points - np.asarray(site)[None, :]).max(axis=1).min())


@dataclass(frozen=True)
class CoverCell:
    site: Site
    region: Region
    margin: float

    @property
    def margin_met(self) -> bool:
        return self.margin >= self.region.size / 2


@dataclass
class PavingCover:
    """Assignment n ↦ W(n) with the sup-norm margin dist(n, S \\ W(n))."""

    min_size: int
    max_size: int
    cells: dict[Site, CoverCell] = field(default_factory=dict)

    def __getitem__(self, site: Site) -> CoverCell:
        return self.cells[site]

    def __contains__(self, site: object) -> bool:
        return site in self.cells

    def __iter__(self) -> Iterator[Site]:
        return iter(self.cells)

    def __len__(self) -> int:
        return len(self.cells)

    @property
    def margins_met(self) -> bool:
        return all(cell.margin_met for cell in self.cells.values())

    def regions(self) -> list[Region]:
        """Distinct cover regions in first-use order."""
        return list(dict.fromkeys(cell.region for cell in self.cells.values()))


class _Occupancy:
    """Boolean grid over the bounding box of a site set."""

    def __init__(self, sites: np.ndarray):
        self.sites = sites
        self.lo = sites.min(axis=0)
        self.hi = sites.max(axis=0)
        self.grid = np.zeros(tuple(self.hi - self.lo + 1), dtype=bool)
        self.grid[tuple((sites - self.lo).T)] = True

    def all_inside(self, points: np.ndarray) -> bool:
        if np.any(points < self.lo) or np.any(points > self.hi):
            return False
        return bool(self.grid[tuple((points - self.lo).T)].all())


def _candidate_centers(site: np.ndarray, size: int, occupancy: _Occupancy) -> Iterator[np.ndarray]:
    # The clipped center first, then all centers within reach ordered by distance
    clipped = np.clip(site, occupancy.lo + size, np.maximum(occupancy.hi - size, occupancy.lo + size))
    yield clipped
    offsets = lattice_box(size, len(site))
    order = np.lexsort(tuple(offsets.T[::-1]) + (np.abs(offsets).max(axis=1),))
    for offset in offsets[order]:
        center = site + offset
        if not np.array_equal(center, clipped):
            yield center


def pave_sites(
    sites: np.ndarray,
    size: int,
    max_size: int | None = None,
    require_margin: bool = True,
) -> PavingCover:
    """
    Cover every site n of a finite set S by an elementary region W(n) ⊆ S.

    Sizes are tried from size to max_size. For each size the candidate center
    is the site clipped into the bounding box, then centers ordered by distance
    to n (ties lexicographic), each with every elementary shape. A candidate is
    accepted once n ∈ W ⊆ S and dist(n, S \\ W) ≥ M'/2. When require_margin is
    False, sites without such a W keep the candidate with the largest margin.
    :param sites: Integer array of shape (k, d)
    :param size: Smallest block size M
    :param max_size: Largest block size, defaults to M
    :param require_margin: Raise instead of falling back when the margin fails
    :return: The cover
    """
    sites = np.atleast_2d(np.asarray(sites, dtype=np.int64))
    max_size = size if max_size is None else max_size
    if max_size < size:
        raise InfeasiblePavingError(f"Paving max size {max_size} is below the block size {size}")

    occupancy = _Occupancy(sites)
    shapes = enumerate_shapes(sites.shape[1])
    cover = PavingCover(min_size=size, max_size=max_size)

    for site in sites:
        key = tuple(int(c) for c in site)
        fallback: CoverCell | None = None
        accepted: CoverCell | None = None
        for block_size in range(size, max_size + 1):
            for center in _candidate_centers(site, block_size, occupancy):
                for shape in shapes:
                    block = Region.from_shape(shape, block_size, tuple(int(c) for c in center))
                    if not block.contains(site[None, :])[0]:
                        continue
                    if not occupancy.all_inside(region_points(block)):
                        continue
                    outside = sites[~block.contains(sites)]
                    cell = CoverCell(site=key, region=block, margin=distance(site, outside))
                    if cell.margin_met:
                        accepted = cell
                        break
                    if fallback is None or cell.margin > fallback.margin:
                        fallback = cell
                if accepted:
                    break
            if accepted:
                break

        if accepted is None:
            if require_margin or fallback is None:
                raise InfeasiblePavingError(
                    f"No elementary region of size {size}..{max_size} covers site {key}",
                    site=list(key),
                )
            logger.debug(f"Site {key} covered with short margin {fallback.margin}")
            accepted = fallback
        cover.cells[key] = accepted

    return cover


def pave_region(region: Region, size: int, max_size: int | None = None) -> PavingCover:
    """
    Paving cover of an elementary region with blocks of size between M and max_size.
    :param region: The region Λ
    :param size: Block size M
    :param max_size: Largest block size
    :return: Cover with dist(n, Λ \\ W(n)) ≥ M'/2 for every n
    :raises InfeasiblePavingError: If diam(Λ) < 2M + 1
    """
    points = region_points(region)
    if diameter(points) < 2 * size + 1:
        raise InfeasiblePavingError(
            f"Region of diameter {diameter(points)} is too small for blocks of size {size}",
            diameter=diameter(points),
            size=size,
        )
    return pave_sites(points, size, max_size)
