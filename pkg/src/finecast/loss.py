"""Area- and level-weighted multi-step forecast loss.

The scalar objective over an n-step trajectory is

    sum_tau (1/n) * sum_cells (dA / 4 pi) * sum_levels w(k)
        * sum_vars omega_var * (pred - target)^2 / dstd^2,

with the squared difference taken in physical units and divided by the
per-slot 6 h increment standard deviation. Level index 0 (the surface)
always carries w(0) = 1 and each surface variable its own omega; the 3-d
level weights are normalized to sum to 1 on their own.

Trajectories may be supplied in physical or normalized space; both are
converted to normalized-increment differences before squaring.
"""

from __future__ import annotations

import csv
import json
import os
from dataclasses import dataclass

import numpy as np

from .errors import (
    LayoutMismatchError,
    NonFiniteError,
    ShapeMismatchError,
    SpaceMismatchError,
)
from .grid import Grid
from .toydata import (
    NORMALIZED,
    PHYSICAL,
    FieldState,
    NormalizationStats,
    VariableLayout,
)

STANDARD_PRESSURE_LEVELS_HPA = (
    1, 2, 3, 5, 7, 10, 20, 30, 50, 70, 100, 125, 150, 175, 200, 225, 250,
    300, 350, 400, 450, 500, 550, 600, 650, 700, 750, 775, 800, 825, 850,
    875, 900, 925, 950, 975, 1000,
)

NORMALIZED_SCHEMES = ("pressure", "sensitivity")


@dataclass(frozen=True)
class LevelWeights:
    """Per-level loss weights w(k); index 0 is the surface with w(0) = 1."""

    scheme: str
    w: np.ndarray

    def __post_init__(self) -> None:
        w = np.asarray(self.w, dtype=np.float64)
        object.__setattr__(self, "w", w)
        if w.ndim != 1 or w.size < 2:
            raise ShapeMismatchError("level weights must be 1-d with a surface entry")
        if not np.all(np.isfinite(w)) or np.any(w < 0.0):
            raise ValueError("level weights must be finite and non-negative")
        if w[0] != 1.0:
            raise ValueError(f"surface weight w(0) must be 1, got {w[0]}")
        if self.scheme in NORMALIZED_SCHEMES:
            total = w[1:].sum()
            if abs(total - 1.0) > 1e-9:
                raise ValueError(
                    f"{self.scheme} scheme requires 3-d weights summing to 1, got {total}")

    def to_dict(self) -> dict:
        return {"scheme": self.scheme, "w": self.w.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "LevelWeights":
        return cls(scheme=d["scheme"], w=np.asarray(d["w"], dtype=np.float64))

    def save(self, path: str) -> None:
        tmp = path + ".tmp"
        with open(tmp, "w", encoding="utf-8") as fh:
            json.dump(self.to_dict(), fh, sort_keys=True, indent=1)
        os.replace(tmp, path)

    @classmethod
    def load(cls, path: str) -> "LevelWeights":
        with open(path, "r", encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))


def pressure_level_weights(levels_hpa) -> LevelWeights:
    """w(k) proportional to pressure, normalized over the 3-d levels."""
    levels = np.asarray(levels_hpa, dtype=np.float64)
    if levels.ndim != 1 or levels.size < 1:
        raise ShapeMismatchError("levels must be a non-empty 1-d sequence")
    if np.any(levels <= 0.0) or np.any(np.diff(levels) < 0.0):
        raise ValueError("pressure levels must be positive and nondecreasing")
    w = np.concatenate([[1.0], levels / levels.sum()])
    return LevelWeights(scheme="pressure", w=w)


def uniform_level_weights(n_levels: int) -> LevelWeights:
    """w = 1 everywhere; used for level-by-level error probes."""
    return LevelWeights(scheme="uniform", w=np.ones(n_levels))


@dataclass(frozen=True)
class LossSpec:
    """Everything the loss needs besides the trajectories themselves."""

    stats: NormalizationStats
    level_weights: LevelWeights
    n_steps: int

    def __post_init__(self) -> None:
        if self.level_weights.w.size != self.layout.n_levels:
            raise ShapeMismatchError(
                f"level weights length {self.level_weights.w.size} != "
                f"layout levels {self.layout.n_levels}")
        if self.n_steps < 1:
            raise ValueError("n_steps must be at least 1")

    @property
    def layout(self) -> VariableLayout:
        return self.stats.layout


def slot_order(layout: VariableLayout) -> list[tuple[int, int]]:
    return layout.slots()


def slot_coefficients(spec: LossSpec) -> dict:
    """Per-slot arrays aligned with slot_order(layout).

    alpha multiplies squared *normalized-state* differences so that
    alpha * dz^2 = w * omega * (dx / dstd)^2; sigma and dstd come along
    for space conversions and increment scaling.
    """
    layout = spec.layout
    slots = slot_order(layout)
    sigma = np.array([spec.stats.std[vi, li] for vi, li in slots])
    dstd = np.array([spec.stats.dstd[vi, li] for vi, li in slots])
    w = np.array([spec.level_weights.w[li] for vi, li in slots])
    omega = np.array([layout.variables[vi].weight for vi, li in slots])
    alpha = w * omega * (sigma / dstd) ** 2
    return {"slots": slots, "sigma": sigma, "dstd": dstd, "w": w,
            "omega": omega, "alpha": alpha}


def pack_slots(values: np.ndarray, layout: VariableLayout) -> np.ndarray:
    """(V, L, H, W) -> (C, H, W) over valid slots in slot_order."""
    return np.stack([values[vi, li] for vi, li in slot_order(layout)])


def unpack_slots(packed: np.ndarray, layout: VariableLayout) -> np.ndarray:
    out = np.zeros((layout.n_vars, layout.n_levels) + packed.shape[1:])
    for c, (vi, li) in enumerate(slot_order(layout)):
        out[vi, li] = packed[c]
    return out


def packed_squared_errors(pred: np.ndarray, target: np.ndarray,
                          grid: Grid) -> np.ndarray:
    """Area-mean squared difference per (step, channel)."""
    if pred.shape != target.shape:
        raise ShapeMismatchError(f"trajectory shapes differ: {pred.shape} vs {target.shape}")
    frac = grid.row_areas / (4.0 * np.pi)
    d = pred - target
    return np.einsum("tcij,i->tc", d * d, frac)


def packed_weighted_mse(pred: np.ndarray, target: np.ndarray, alpha: np.ndarray,
                        grid: Grid, n_steps_norm: int) -> float:
    """Loss kernel on packed normalized trajectories (T, C, nlat, nlon)."""
    per = packed_squared_errors(pred, target, grid)
    return float(np.sum(per @ alpha) / n_steps_norm)


def _check_trajectories(pred, target, spec: LossSpec) -> str:
    if len(pred) != spec.n_steps or len(target) != spec.n_steps:
        raise ShapeMismatchError(
            f"expected {spec.n_steps}-step trajectories, got {len(pred)} and {len(target)}")
    spaces = {s.space for s in list(pred) + list(target)}
    if len(spaces) != 1:
        raise SpaceMismatchError(f"mixed trajectory spaces: {sorted(spaces)}")
    for p, t in zip(pred, target):
        if p.layout.digest != spec.layout.digest or t.layout.digest != spec.layout.digest:
            raise LayoutMismatchError("trajectory layout differs from loss spec layout")
        if p.time != t.time:
            raise ValueError(f"misaligned trajectories: {p.time} vs {t.time}")
    return spaces.pop()


def _normalized_increment_diffs(pred, target, spec: LossSpec, space: str) -> np.ndarray:
    """(T, C, H, W) differences scaled by 1/dstd in physical units."""
    coeffs = slot_coefficients(spec)
    layout = spec.layout
    diffs = np.stack([pack_slots(p.values - t.values, layout)
                      for p, t in zip(pred, target)])
    if space == PHYSICAL:
        factor = 1.0 / coeffs["dstd"]
    elif space == NORMALIZED:
        factor = coeffs["sigma"] / coeffs["dstd"]
    else:
        raise SpaceMismatchError(f"unknown space {space!r}")
    return diffs * factor[None, :, None, None]


def weighted_mse(pred, target, spec: LossSpec, grid: Grid) -> float:
    """Scalar loss over aligned trajectories of FieldStates."""
    space = _check_trajectories(pred, target, spec)
    d = _normalized_increment_diffs(pred, target, spec, space)
    if not np.all(np.isfinite(d)):
        raise NonFiniteError("non-finite difference in weighted_mse")
    coeffs = slot_coefficients(spec)
    weights = coeffs["w"] * coeffs["omega"]
    per = packed_squared_errors(d, np.zeros_like(d), grid)
    return float(np.sum(per @ weights) / spec.n_steps)


def per_component_loss(pred, target, spec: LossSpec, grid: Grid) -> list[dict]:
    """Unaggregated loss terms whose weighted sum reproduces weighted_mse.

    unweighted_mse is the area-mean squared normalized-increment error of
    one slot at one lead; weighted_contribution folds in w, omega, and the
    1/n_steps factor, so column sums match the scalar loss.
    """
    space = _check_trajectories(pred, target, spec)
    d = _normalized_increment_diffs(pred, target, spec, space)
    if not np.all(np.isfinite(d)):
        raise NonFiniteError("non-finite difference in per_component_loss")
    coeffs = slot_coefficients(spec)
    per = packed_squared_errors(d, np.zeros_like(d), grid)  # (T, C)
    layout = spec.layout
    rows = []
    for ti in range(spec.n_steps):
        for c, (vi, li) in enumerate(coeffs["slots"]):
            unweighted = float(per[ti, c])
            rows.append({
                "variable": layout.variables[vi].name,
                "level_hpa": layout.level_hpa_of(li),
                "lead_hours": 6 * (ti + 1),
                "unweighted_mse": unweighted,
                "weighted_contribution": float(
                    coeffs["w"][c] * coeffs["omega"][c] * unweighted / spec.n_steps),
            })
    return rows


def write_per_component_csv(rows: list[dict], path: str) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=[
            "variable", "level_hpa", "lead_hours", "unweighted_mse",
            "weighted_contribution"])
        writer.writeheader()
        for row in rows:
            writer.writerow({k: repr(v) if isinstance(v, float) else v
                             for k, v in row.items()})
