"""Equiangular latitude/longitude grid geometry on the unit sphere.

Cells are centered on an equiangular mesh with the poles on cell edges.
Cell areas are analytic: dA = dlon * (sin(lat_top) - sin(lat_bottom)),
so the areas of one latitude row are identical and the full set of
areas partitions the sphere (sums to 4*pi).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import NonFiniteError, ShapeMismatchError

FULL_SPHERE_AREA = 4.0 * np.pi


class GridDimensionError(ValueError):
    pass


@dataclass(frozen=True)
class Grid:
    """Cell-centered equiangular grid.

    lats: cell-center latitudes in radians, strictly decreasing from north.
    lons: cell-center longitudes in radians, increasing on [0, 2*pi).
    lat_edges: row edges in radians, lat_edges[0] = pi/2, lat_edges[-1] = -pi/2.
    row_areas: per-row cell area (identical along a row).
    """

    nlat: int
    nlon: int
    lats: np.ndarray
    lons: np.ndarray
    lat_edges: np.ndarray
    row_areas: np.ndarray

    @property
    def dlon(self) -> float:
        return 2.0 * np.pi / self.nlon

    def cell_areas(self) -> np.ndarray:
        """Full (nlat, nlon) area array."""
        return np.repeat(self.row_areas[:, None], self.nlon, axis=1)

    def area_fractions(self) -> np.ndarray:
        """(nlat, nlon) array of dA / (4*pi); sums to 1."""
        return self.cell_areas() / FULL_SPHERE_AREA


def build_grid(nlat: int, nlon: int) -> Grid:
    """Build an equiangular grid with analytic cell areas.

    Requires nlat >= 2 and nlon >= 4 so rows and columns are resolvable.
    """
    if nlat < 2 or nlon < 4:
        raise GridDimensionError(f"grid dimensions too small: ({nlat}, {nlon})")
    lat_edges = np.linspace(np.pi / 2.0, -np.pi / 2.0, nlat + 1)
    lats = 0.5 * (lat_edges[:-1] + lat_edges[1:])
    dlon = 2.0 * np.pi / nlon
    lons = (np.arange(nlon) + 0.5) * dlon
    row_areas = dlon * (np.sin(lat_edges[:-1]) - np.sin(lat_edges[1:]))
    return Grid(nlat=nlat, nlon=nlon, lats=lats, lons=lons,
                lat_edges=lat_edges, row_areas=row_areas)


def area_weighted_mean(values: np.ndarray, grid: Grid) -> np.ndarray | float:
    """Mean of `values` over the sphere: sum(v * dA) / (4*pi).

    `values` may carry leading axes; the trailing two must be (nlat, nlon).
    Returns a scalar for 2-d input, an array over the leading axes otherwise.
    """
    values = np.asarray(values)
    if values.ndim < 2 or values.shape[-2:] != (grid.nlat, grid.nlon):
        raise ShapeMismatchError(
            f"expected trailing shape ({grid.nlat}, {grid.nlon}), got {values.shape}")
    if not np.all(np.isfinite(values)):
        raise NonFiniteError("non-finite values in area_weighted_mean input")
    weights = grid.row_areas / FULL_SPHERE_AREA
    out = np.einsum("...ij,i->...", values, weights)
    if out.ndim == 0:
        return float(out)
    return out
