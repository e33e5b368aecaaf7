"""Per-level initial-condition sensitivity and derived level weights.

For each analysis date d, a control forecast runs from (x(d-6h), x(d)).
A one-step reforecast p' from (x(d-12h), x(d-6h)) supplies a physically
plausible alternative analysis at d. One 3-d level at a time is nudged
toward p' with a coefficient calibrated from that level's one-step error,
and the medium-range response ||p - p'||^2 (area-weighted, physical
units) is recorded per (lead day, variable, output level). Row 0 of the
perturbed-level axis is an unperturbed control rerun that bounds the
noise floor.

The reduction to weights standardizes each output point over its
(date x perturbed-level) pool, control row included: with the control
excluded the z-scores of a balanced pool sum to zero and the global-mean
divisor vanishes identically. The same identity forces the control row's
relative sensitivity to the constant -K, so the noise-floor comparison
is made on the standardized (mean z-score) scale, where orderings match
the relative scale whenever the global mean is positive.

Reductions sum in value-sorted order and the unit-sum closure residual
goes to the largest weight (ties broken by smaller level label), so
permuting level labels permutes every output bitwise and the 3-d weights
sum to exactly 1.0.
"""

from __future__ import annotations

import csv
import json
import os
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from datetime import datetime

import numpy as np

from .errors import (
    ConfigError,
    DataGapError,
    FormatError,
    LayoutMismatchError,
    ShapeMismatchError,
)
from .emulator import STEP_HOURS, ModelConfig, make_context, pack_state, rollout_packed
from .grid import Grid
from .loss import LevelWeights, packed_squared_errors
from .toydata import (
    CADENCE,
    AnalysisArchive,
    DegenerateFieldError,
    NormalizationStats,
    VariableLayout,
    parse_time,
)
from .trainer import derive_seed

STEPS_PER_DAY = 24 // STEP_HOURS
EPS_MODES = ("inverse", "inverse-sqrt")


def perturbation_coefficient(err: float, eps_mode: str = "inverse") -> float:
    """Blend coefficient from a level's one-step normalized MSE."""
    if eps_mode not in EPS_MODES:
        raise ConfigError(f"unknown eps_mode {eps_mode!r}; expected one of {EPS_MODES}")
    if err <= 0.0:
        raise DegenerateFieldError(
            "one-step reforecast reproduces the analysis exactly; "
            "perturbation size is undefined")
    return 1.0 / err if eps_mode == "inverse" else 1.0 / np.sqrt(err)


@dataclass(frozen=True)
class SensitivityRaw:
    """Squared forecast responses per (date, perturbed level, output point).

    values[d, 0, :] is the unperturbed control rerun; values[d, 1 + i, :]
    the run that perturbed perturbed_hpa[i]. Output points are
    (lead_day, variable, level_hPa) with 0 denoting the surface.
    """

    layout: VariableLayout
    dates: tuple[datetime, ...]
    perturbed_hpa: tuple[float, ...]
    points: tuple[tuple[int, str, float], ...]
    values: np.ndarray
    epsilons: np.ndarray
    eps_mode: str

    def __post_init__(self) -> None:
        values = np.asarray(self.values, dtype=np.float64)
        eps = np.asarray(self.epsilons, dtype=np.float64)
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "epsilons", eps)
        object.__setattr__(self, "dates", tuple(self.dates))
        object.__setattr__(self, "perturbed_hpa",
                           tuple(float(p) for p in self.perturbed_hpa))
        object.__setattr__(self, "points",
                           tuple((int(d), str(v), float(l)) for d, v, l in self.points))
        if self.eps_mode not in EPS_MODES:
            raise ConfigError(f"unknown eps_mode {self.eps_mode!r}")
        shape = (len(self.dates), len(self.perturbed_hpa) + 1, len(self.points))
        if values.shape != shape:
            raise ShapeMismatchError(
                f"values shape {values.shape} != (dates, levels + control, points) {shape}")
        if eps.shape != (len(self.dates), len(self.perturbed_hpa)):
            raise ShapeMismatchError(
                f"epsilons shape {eps.shape} != (dates, levels) "
                f"{(len(self.dates), len(self.perturbed_hpa))}")
        if np.any(values < 0.0) or not np.all(np.isfinite(values)):
            raise ValueError("sensitivity values must be finite and non-negative")

    @property
    def n_dates(self) -> int:
        return len(self.dates)

    @property
    def n_levels(self) -> int:
        return len(self.perturbed_hpa)

    def to_dict(self) -> dict:
        return {
            "format": "finecast-sensitivity-raw",
            "version": 1,
            "layout": self.layout.to_dict(),
            "dates": [d.isoformat() for d in self.dates],
            "perturbed_hpa": list(self.perturbed_hpa),
            "points": [list(p) for p in self.points],
            "values": self.values.tolist(),
            "epsilons": self.epsilons.tolist(),
            "eps_mode": self.eps_mode,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SensitivityRaw":
        if d.get("format") != "finecast-sensitivity-raw":
            raise FormatError("not a sensitivity raw-output document")
        return cls(
            layout=VariableLayout.from_dict(d["layout"]),
            dates=tuple(parse_time(s) for s in d["dates"]),
            perturbed_hpa=tuple(d["perturbed_hpa"]),
            points=tuple((p[0], p[1], p[2]) for p in d["points"]),
            values=np.asarray(d["values"], dtype=np.float64),
            epsilons=np.asarray(d["epsilons"], dtype=np.float64),
            eps_mode=d["eps_mode"],
        )

    def save(self, path: str) -> None:
        tmp = path + ".tmp"
        with open(tmp, "w", encoding="utf-8") as fh:
            json.dump(self.to_dict(), fh, sort_keys=True)
        os.replace(tmp, path)

    @classmethod
    def load(cls, path: str) -> "SensitivityRaw":
        with open(path, "r", encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))


def eligible_sensitivity_times(archive: AnalysisArchive, lead_days: int) -> list[datetime]:
    """Dates with both reforecast inputs and the full verification span."""
    last = archive.n_times - 1 - STEPS_PER_DAY * lead_days
    return [archive.time_at(i) for i in range(2, last + 1)]


def select_sensitivity_dates(archive: AnalysisArchive, n_dates: int,
                             lead_days: int, seed: int) -> list[datetime]:
    """Seeded draw of initialization dates, without replacement, sorted."""
    eligible = eligible_sensitivity_times(archive, lead_days)
    if n_dates > len(eligible):
        raise DataGapError(
            f"archive offers {len(eligible)} eligible sensitivity dates, need {n_dates}")
    rng = np.random.default_rng(seed)
    picks = rng.choice(len(eligible), size=n_dates, replace=False)
    return [eligible[i] for i in sorted(int(i) for i in picks)]


def _uniform_alpha(stats: NormalizationStats) -> np.ndarray:
    """Per-channel loss coefficients with every level weight set to 1."""
    layout = stats.layout
    slots = layout.slots()
    sigma = np.array([stats.std[vi, li] for vi, li in slots])
    dstd = np.array([stats.dstd[vi, li] for vi, li in slots])
    omega = np.array([layout.variables[vi].weight for vi, li in slots])
    return omega * (sigma / dstd) ** 2


def _level_channels(layout: VariableLayout) -> list[np.ndarray]:
    """Channel indices per 3-d level (level axis index 1..n)."""
    slots = layout.slots()
    out = []
    for li in range(1, layout.n_levels):
        out.append(np.array([c for c, (vi, sl) in enumerate(slots) if sl == li]))
    return out


def _one_date(params: dict, ctx, grid: Grid, archive: AnalysisArchive,
              stats: NormalizationStats, when: datetime, lead_days: int,
              eps_mode: str, alpha: np.ndarray,
              level_channels: list[np.ndarray], sigma_sq: np.ndarray):
    idx = archive.index_of(when)
    if idx < 2:
        raise DataGapError(
            f"timestamp {(when - 2 * CADENCE).isoformat()} not in archive "
            "(needed as the reforecast input)")
    n_steps = STEPS_PER_DAY * lead_days
    if idx + n_steps >= archive.n_times:
        missing = when + n_steps * CADENCE
        raise DataGapError(
            f"timestamp {missing.isoformat()} not in archive "
            "(needed to cover the verification span)")
    z_m12 = pack_state(archive.state(idx - 2), stats)
    z_m6 = pack_state(archive.state(idx - 1), stats)
    z_0 = pack_state(archive.state(idx), stats)

    control = rollout_packed(params, ctx, z_m6, z_0, when, n_steps)
    reforecast = rollout_packed(params, ctx, z_m12, z_m6, when - CADENCE, 1)
    one_step_sq = packed_squared_errors(reforecast, z_0[None], grid)[0]

    day_steps = [STEPS_PER_DAY * day - 1 for day in range(1, lead_days + 1)]
    n_levels = len(level_channels)
    rows = np.empty((n_levels + 1, lead_days * ctx.n_channels))
    eps_row = np.empty(n_levels)
    for k in range(n_levels + 1):
        z_init = z_0
        if k > 0:
            ch = level_channels[k - 1]
            err = float(np.sort(alpha[ch] * one_step_sq[ch]).sum())
            if err <= 0.0:
                hpa = ctx.layout.levels_hpa[k - 1]
                raise DegenerateFieldError(
                    f"one-step reforecast reproduces the analysis exactly at "
                    f"{hpa:g} hPa on {when.isoformat()}; perturbation size is undefined")
            eps = perturbation_coefficient(err, eps_mode)
            eps_row[k - 1] = eps
            z_init = z_0.copy()
            z_init[ch] = (1.0 - eps) * z_0[ch] + eps * reforecast[0, ch]
        trial = rollout_packed(params, ctx, z_m6, z_init, when, n_steps)
        per = packed_squared_errors(control[day_steps], trial[day_steps], grid)
        rows[k] = (per * sigma_sq[None, :]).reshape(-1)
    return rows, eps_row


def run_sensitivity(params: dict, config: ModelConfig, stats: NormalizationStats,
                    archive: AnalysisArchive, dates, lead_days: int = 5,
                    eps_mode: str = "inverse", workers: int = 1) -> SensitivityRaw:
    """Control/trial forecast responses for every date and perturbed level."""
    if eps_mode not in EPS_MODES:
        raise ConfigError(f"unknown eps_mode {eps_mode!r}; expected one of {EPS_MODES}")
    if lead_days < 1:
        raise ConfigError("lead_days must be at least 1")
    layout = stats.layout
    if layout.digest != archive.layout.digest:
        raise LayoutMismatchError("archive layout differs from stats layout")
    dates = list(dates)
    if not dates:
        raise ConfigError("at least one initialization date required")
    grid = archive.grid()
    ctx = make_context(config, stats, grid)
    alpha = _uniform_alpha(stats)
    level_channels = _level_channels(layout)
    slots = layout.slots()
    sigma_sq = np.array([stats.std[vi, li] for vi, li in slots]) ** 2

    def job(when):
        return _one_date(params, ctx, grid, archive, stats, when, lead_days,
                         eps_mode, alpha, level_channels, sigma_sq)

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(job, dates))
    else:
        results = [job(d) for d in dates]

    points = tuple((day, layout.variables[vi].name, layout.level_hpa_of(li))
                   for day in range(1, lead_days + 1) for vi, li in slots)
    return SensitivityRaw(
        layout=layout,
        dates=tuple(dates),
        perturbed_hpa=layout.levels_hpa,
        points=points,
        values=np.stack([r for r, _ in results]),
        epsilons=np.stack([e for _, e in results]),
        eps_mode=eps_mode,
    )


def _ordered_sum(a: np.ndarray) -> float:
    """Sum in ascending value order: invariant to element ordering."""
    return float(np.sort(np.asarray(a, dtype=np.float64).ravel()).sum())


def _ordered_mean(a: np.ndarray) -> float:
    a = np.asarray(a, dtype=np.float64).ravel()
    return _ordered_sum(a) / a.size


@dataclass(frozen=True)
class SensitivityWeights:
    """Standardized responses, relative sensitivities, and unit-sum weights."""

    levels_hpa: tuple[float, ...]
    weights: np.ndarray        # (K,) floored, sums to exactly 1
    relative: np.ndarray       # (K,) mean z / global mean, before flooring
    mean_z: np.ndarray         # (K,) standardized per-level response
    z_bands: np.ndarray        # (K, 2) bootstrap bands of per-date mean z
    control_mean_z: float      # standardized response of the control rerun
    control_band: np.ndarray   # (2,) bootstrap band of the control response
    global_mean_z: float       # divisor: mean standardized response, perturbed rows
    n_dates: int
    n_points: int              # output points retained after variance screening
    eps_mode: str

    def __post_init__(self) -> None:
        for name in ("weights", "relative", "mean_z", "z_bands", "control_band"):
            object.__setattr__(self, name,
                               np.asarray(getattr(self, name), dtype=np.float64))
        object.__setattr__(self, "levels_hpa",
                           tuple(float(p) for p in self.levels_hpa))
        k = len(self.levels_hpa)
        if self.weights.shape != (k,) or self.relative.shape != (k,) \
                or self.mean_z.shape != (k,):
            raise ShapeMismatchError("per-level arrays must match levels_hpa length")
        if self.z_bands.shape != (k, 2) or self.control_band.shape != (2,):
            raise ShapeMismatchError("bands must be (levels, 2) and (2,)")
        if np.any(self.weights < 0.0) or not np.all(np.isfinite(self.weights)):
            raise ValueError("weights must be finite and non-negative")

    def to_level_weights(self) -> LevelWeights:
        """Loss-consumable weights, level axis ascending as in the layout."""
        order = np.argsort(np.asarray(self.levels_hpa))
        return LevelWeights(scheme="sensitivity",
                            w=np.concatenate([[1.0], self.weights[order]]))

    def to_dict(self) -> dict:
        return {
            "format": "finecast-sensitivity-weights",
            "version": 1,
            "levels_hpa": list(self.levels_hpa),
            "weights": self.weights.tolist(),
            "relative": self.relative.tolist(),
            "mean_z": self.mean_z.tolist(),
            "z_bands": self.z_bands.tolist(),
            "control_mean_z": self.control_mean_z,
            "control_band": self.control_band.tolist(),
            "global_mean_z": self.global_mean_z,
            "n_dates": self.n_dates,
            "n_points": self.n_points,
            "eps_mode": self.eps_mode,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SensitivityWeights":
        if d.get("format") != "finecast-sensitivity-weights":
            raise FormatError("not a sensitivity weights document")
        return cls(
            levels_hpa=tuple(d["levels_hpa"]),
            weights=np.asarray(d["weights"]),
            relative=np.asarray(d["relative"]),
            mean_z=np.asarray(d["mean_z"]),
            z_bands=np.asarray(d["z_bands"]),
            control_mean_z=float(d["control_mean_z"]),
            control_band=np.asarray(d["control_band"]),
            global_mean_z=float(d["global_mean_z"]),
            n_dates=int(d["n_dates"]),
            n_points=int(d["n_points"]),
            eps_mode=d["eps_mode"],
        )

    def save(self, path: str) -> None:
        tmp = path + ".tmp"
        with open(tmp, "w", encoding="utf-8") as fh:
            json.dump(self.to_dict(), fh, sort_keys=True, indent=1)
        os.replace(tmp, path)

    @classmethod
    def load(cls, path: str) -> "SensitivityWeights":
        with open(path, "r", encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))


def bootstrap_ci(samples, level=(5.0, 95.0), resamples: int = 1000,
                 seed: int = 0, statistic=np.mean) -> np.ndarray:
    """Seeded percentile bootstrap of a statistic over the sample axis."""
    s = np.asarray(samples, dtype=np.float64).ravel()
    if s.size < 2:
        raise ConfigError(f"bootstrap needs at least two samples, got {s.size}")
    if resamples < 100:
        raise ConfigError(f"bootstrap needs at least 100 resamples, got {resamples}")
    rng = np.random.default_rng(seed)
    idx = rng.integers(0, s.size, size=(int(resamples), s.size))
    stats = statistic(s[idx], axis=1)
    return np.percentile(stats, list(level))


def sensitivity_to_weights(raw: SensitivityRaw, resamples: int = 2000,
                           seed: int = 0, band=(5.0, 95.0)) -> SensitivityWeights:
    """Standardize, average, divide by the perturbed-row mean, floor, normalize."""
    n_dates, n_rows, n_points = raw.values.shape
    n_levels = n_rows - 1
    if n_dates < 2:
        raise ConfigError(f"z-scores need at least 2 dates, got {n_dates}")
    if n_levels < 2:
        raise ConfigError(f"z-scores need at least 2 perturbed levels, got {n_levels}")

    mu = np.empty(n_points)
    sd = np.empty(n_points)
    for p in range(n_points):
        pool = raw.values[:, :, p]
        mu[p] = _ordered_mean(pool)
        sd[p] = np.sqrt(_ordered_mean((pool - mu[p]) ** 2))
    keep = sd > 0.0
    if not np.all(keep):
        dropped = int(np.count_nonzero(~keep))
        first = raw.points[int(np.flatnonzero(~keep)[0])]
        warnings.warn(
            f"excluding {dropped} zero-variance sensitivity output points "
            f"(first: lead day {first[0]}, {first[1]}, {first[2]:g} hPa)",
            stacklevel=2)
    if not np.any(keep):
        raise DegenerateFieldError("every sensitivity output point has zero variance")

    z = (raw.values[:, :, keep] - mu[keep][None, None, :]) / sd[keep][None, None, :]
    # per-date standardized response per row, then full means per row
    r = np.empty((n_dates, n_rows))
    for d in range(n_dates):
        for k in range(n_rows):
            r[d, k] = _ordered_mean(z[d, k])
    m = np.array([_ordered_mean(z[:, k, :]) for k in range(n_rows)])
    g = _ordered_mean(m[1:])
    if g <= 0.0:
        raise DegenerateFieldError(
            "perturbed responses do not rise above the pooled background; "
            "relative sensitivities are undefined")

    relative = m[1:] / g
    floored = np.maximum(relative, 0.0)
    total = _ordered_sum(floored)
    w = floored / total
    # closure: the largest weight absorbs the rounding residual so the sum
    # is exactly 1; ties broken by smaller level label for permutation safety
    order = np.lexsort((raw.perturbed_hpa, -w))
    for _ in range(32):
        residual = 1.0 - _ordered_sum(w)
        if residual == 0.0:
            break
        w[order[0]] += residual

    bands = np.empty((n_levels, 2))
    for k in range(n_levels):
        bands[k] = bootstrap_ci(r[:, k + 1], level=band, resamples=resamples,
                                seed=derive_seed(seed, f"band:{raw.perturbed_hpa[k]:g}"))
    control_band = bootstrap_ci(r[:, 0], level=band, resamples=resamples,
                                seed=derive_seed(seed, "band:control"))

    return SensitivityWeights(
        levels_hpa=raw.perturbed_hpa,
        weights=w,
        relative=relative,
        mean_z=m[1:],
        z_bands=bands,
        control_mean_z=float(m[0]),
        control_band=control_band,
        global_mean_z=float(g),
        n_dates=n_dates,
        n_points=int(np.count_nonzero(keep)),
        eps_mode=raw.eps_mode,
    )


@dataclass(frozen=True)
class NoiseFloorVerdict:
    """Per-level margins of standardized response over the control's band."""

    passed: bool
    control_q95: float
    levels_hpa: tuple[float, ...]
    margins: np.ndarray = field(repr=False)


def noise_floor_check(weights: SensitivityWeights) -> NoiseFloorVerdict:
    """Pass iff every perturbed level responds above the control's 95th band."""
    q95 = float(weights.control_band[1])
    margins = weights.mean_z - q95
    return NoiseFloorVerdict(
        passed=bool(np.all(margins > 0.0)),
        control_q95=q95,
        levels_hpa=weights.levels_hpa,
        margins=margins,
    )


def write_sensitivity_csv(raw: SensitivityRaw, path: str) -> None:
    """One row per (date, perturbed level, output point); 0 = control row."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=[
            "date", "perturbed_level_hpa", "lead_day", "variable",
            "level_hpa", "sq_diff", "epsilon"])
        writer.writeheader()
        for di, when in enumerate(raw.dates):
            for row in range(raw.n_levels + 1):
                eps = "" if row == 0 else repr(float(raw.epsilons[di, row - 1]))
                hpa = 0.0 if row == 0 else raw.perturbed_hpa[row - 1]
                for pi, (day, var, lev) in enumerate(raw.points):
                    writer.writerow({
                        "date": when.isoformat(),
                        "perturbed_level_hpa": repr(float(hpa)),
                        "lead_day": day,
                        "variable": var,
                        "level_hpa": repr(float(lev)),
                        "sq_diff": repr(float(raw.values[di, row, pi])),
                        "epsilon": eps,
                    })


def write_weights_csv(weights: SensitivityWeights, path: str) -> None:
    """Per-level weights and bands, with the control row labeled as such."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=[
            "kind", "level_hpa", "weight", "relative", "mean_z",
            "band_lo", "band_hi"])
        writer.writeheader()
        writer.writerow({
            "kind": "control", "level_hpa": repr(0.0), "weight": "",
            "relative": "", "mean_z": repr(float(weights.control_mean_z)),
            "band_lo": repr(float(weights.control_band[0])),
            "band_hi": repr(float(weights.control_band[1])),
        })
        for k, hpa in enumerate(weights.levels_hpa):
            writer.writerow({
                "kind": "perturbed",
                "level_hpa": repr(float(hpa)),
                "weight": repr(float(weights.weights[k])),
                "relative": repr(float(weights.relative[k])),
                "mean_z": repr(float(weights.mean_z[k])),
                "band_lo": repr(float(weights.z_bands[k, 0])),
                "band_hi": repr(float(weights.z_bands[k, 1])),
            })
