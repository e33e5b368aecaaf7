"""Shared fixtures and brute-force oracles used across test modules.

The oracles here deliberately use plain Python loops and scalar math so
they stay independent of the vectorized library code they check.
"""

from datetime import datetime, timedelta

import numpy as np

from finecast.grid import Grid, build_grid
from finecast.toydata import (
    NORMALIZED,
    PHYSICAL,
    FieldState,
    NormalizationStats,
    SystemSpec,
    VariableLayout,
    VariableSpec,
)

T0 = datetime(2001, 1, 1)


def whole_sphere_cell() -> Grid:
    """A one-cell grid covering the whole sphere, for formula-collapse checks.

    build_grid() refuses degenerate dimensions, so this is assembled by hand.
    """
    return Grid(nlat=1, nlon=1, lats=np.array([0.0]), lons=np.array([np.pi]),
                lat_edges=np.array([np.pi / 2.0, -np.pi / 2.0]),
                row_areas=np.array([4.0 * np.pi]))


def surface_only_layout(weight: float = 1.0) -> VariableLayout:
    return VariableLayout(
        variables=(VariableSpec("s2", "surface", weight),),
        levels_hpa=(1000.0,),
    )


def unit_stats(layout: VariableLayout) -> NormalizationStats:
    shape = (layout.n_vars, layout.n_levels)
    return NormalizationStats(layout=layout, mean=np.zeros(shape),
                              std=np.ones(shape), dstd=np.ones(shape),
                              period_start=T0, period_end=T0 + timedelta(days=365))


def small_layout() -> VariableLayout:
    return VariableLayout(
        variables=(
            VariableSpec("temp", "3d", 1.0),
            VariableSpec("wind", "3d", 1.0),
            VariableSpec("t2", "surface", 1.0),
            VariableSpec("press", "surface", 0.1),
        ),
        levels_hpa=(300.0, 700.0, 1000.0),
    )


def random_stats(layout: VariableLayout, rng: np.random.Generator,
                 std_range=(0.5, 4.0), dstd_range=(0.05, 0.9)) -> NormalizationStats:
    shape = (layout.n_vars, layout.n_levels)
    mean = np.zeros(shape)
    std = np.ones(shape)
    dstd = np.ones(shape)
    mask = layout.valid_mask()
    mean[mask] = rng.normal(0.0, 3.0, mask.sum())
    std[mask] = rng.uniform(*std_range, mask.sum())
    dstd[mask] = rng.uniform(*dstd_range, mask.sum())
    return NormalizationStats(layout=layout, mean=mean, std=std, dstd=dstd,
                              period_start=T0, period_end=T0 + timedelta(days=365))


def random_trajectories(layout: VariableLayout, nlat: int, nlon: int,
                        n_steps: int, rng: np.random.Generator, space: str):
    """Aligned (pred, target) FieldState lists with zeros at invalid slots."""
    mask4 = layout.valid_mask()[:, :, None, None]
    pred, target = [], []
    for step in range(n_steps):
        t = T0 + timedelta(hours=6 * (step + 1))
        shape = (layout.n_vars, layout.n_levels, nlat, nlon)
        pv = rng.normal(0.0, 1.0, shape) * mask4
        tv = rng.normal(0.0, 1.0, shape) * mask4
        pred.append(FieldState(values=pv, time=t, space=space, layout=layout))
        target.append(FieldState(values=tv, time=t, space=space, layout=layout))
    return pred, target


def oracle_weighted_mse(pred, target, stats: NormalizationStats,
                        level_w: np.ndarray, grid) -> float:
    """Quadruple-loop reference implementation of the trajectory loss."""
    layout = stats.layout
    areas = grid.cell_areas()
    four_pi = 4.0 * np.pi
    n = len(pred)
    total = 0.0
    for step in range(n):
        pv = pred[step].values
        tv = target[step].values
        space = pred[step].space
        for vi, li in layout.slots():
            omega = layout.variables[vi].weight
            sigma = float(stats.std[vi, li])
            dstd = float(stats.dstd[vi, li])
            w = float(level_w[li])
            for i in range(grid.nlat):
                for j in range(grid.nlon):
                    d = float(pv[vi, li, i, j]) - float(tv[vi, li, i, j])
                    if space == NORMALIZED:
                        d *= sigma
                    elif space != PHYSICAL:
                        raise ValueError(space)
                    total += (areas[i, j] / four_pi) * w * omega * (d / dstd) ** 2
    return total / n


def small_grid(nlat: int = 4, nlon: int = 8):
    return build_grid(nlat, nlon)


def tiny_system(nlat: int = 4, nlon: int = 8) -> SystemSpec:
    """A fast 8-channel system over small_layout for trainer-level tests."""
    layout = small_layout()
    shape = (layout.n_vars, layout.n_levels)
    mask = layout.valid_mask().astype(float)

    def table(per_var):
        out = np.zeros(shape)
        for vi in range(layout.n_vars):
            out[vi] = per_var[vi]
        return out * mask

    base = np.zeros(shape)
    base[0, 1:] = [240.0, 270.0, 288.0]   # temp 3d levels
    base[1, 1:] = [30.0, 12.0, 5.0]       # wind 3d levels
    base[2, 0] = 288.0                    # t2 surface
    base[3, 0] = 1010.0                   # press surface
    noise = table([0.8, 0.5, 0.7, 1.2])
    return SystemSpec(
        system_id="tiny",
        nlat=nlat,
        nlon=nlon,
        layout=layout,
        base=base,
        stationary_amp=1.5 * noise,
        seasonal_amp=table([4.0, 2.0, 5.0, 3.0]),
        diurnal_amp=table([0.0, 0.0, 1.5, 0.0]),
        advect=table([0.4, 0.5, 0.25, 0.3]),
        diffuse=np.full(shape, 0.08) * mask,
        relax=table([0.10, 0.10, 0.15, 0.15]),
        couple=0.5 * noise,
        noise_amp=noise,
        mean_offset=np.zeros(shape),
        std_scale=np.ones(shape),
        burn_in=40,
    )
