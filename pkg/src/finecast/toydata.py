"""Synthetic two-system analysis archives on the unit sphere.

Each system integrates per-(variable, level) anomaly dynamics on the
grid: fractional-cell zonal advection, 5-point diffusion, linear
relaxation, a weak tanh coupling to the level above, and stochastic
forcing drawn from a counter-based generator keyed by
(seed, step, variable, level) so regeneration is order-independent.

Archived values are an affine transform of the anomaly,

    x = base + stationary + seasonal(t) + diurnal(t) + mean_offset
        + std_scale * a,

so a second system can carry exact distribution shifts (mean offset,
standard-deviation inflation) on top of its own dynamics. Fields are
stored as little-endian float32 in (time, variable, level, lat, lon)
order behind a JSON header.

Level index 0 is the surface; indices 1..N map onto the pressure levels
in increasing-pressure (top to surface) order.
"""

from __future__ import annotations

import csv
import hashlib
import json
from dataclasses import dataclass, field, replace
from datetime import datetime, timedelta

import numpy as np
from numpy.random import Generator, Philox

from .container import read_container, write_container
from .errors import (
    DataGapError,
    LayoutMismatchError,
    NonFiniteError,
    ShapeMismatchError,
    SpaceMismatchError,
    VersionMismatchError,
)
from .grid import Grid, build_grid

CADENCE_HOURS = 6
CADENCE = timedelta(hours=CADENCE_HOURS)
ARCHIVE_MAGIC = b"FCARCH01"
ARCHIVE_VERSION = 1
STATS_VERSION = 1

PHYSICAL = "physical"
NORMALIZED = "normalized"


class UnstableParameterError(ValueError):
    pass


class DegenerateFieldError(ValueError):
    pass


def canonical_digest(obj) -> str:
    blob = json.dumps(obj, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return hashlib.sha256(blob).hexdigest()


def day_fraction(t: datetime) -> float:
    return (t.hour * 3600 + t.minute * 60 + t.second) / 86400.0


def year_fraction(t: datetime) -> float:
    start = datetime(t.year, 1, 1)
    end = datetime(t.year + 1, 1, 1)
    return (t - start) / (end - start)


def parse_time(s: str) -> datetime:
    return datetime.fromisoformat(s)


@dataclass(frozen=True)
class VariableSpec:
    name: str
    kind: str  # "3d" or "surface"
    weight: float = 1.0

    def __post_init__(self) -> None:
        if self.kind not in ("3d", "surface"):
            raise ValueError(f"unknown variable kind {self.kind!r}")


@dataclass(frozen=True)
class VariableLayout:
    variables: tuple[VariableSpec, ...]
    levels_hpa: tuple[float, ...]

    def __post_init__(self) -> None:
        if len(self.levels_hpa) < 1:
            raise ValueError("at least one pressure level required")
        diffs = np.diff(self.levels_hpa)
        if np.any(diffs <= 0):
            raise ValueError("pressure levels must strictly increase toward the surface")
        names = [v.name for v in self.variables]
        if len(set(names)) != len(names):
            raise ValueError("duplicate variable names")

    @property
    def n_vars(self) -> int:
        return len(self.variables)

    @property
    def n_levels(self) -> int:
        # level axis length: slot 0 is the surface
        return len(self.levels_hpa) + 1

    def slots(self) -> list[tuple[int, int]]:
        out = []
        for vi, v in enumerate(self.variables):
            if v.kind == "surface":
                out.append((vi, 0))
            else:
                out.extend((vi, li) for li in range(1, self.n_levels))
        return out

    def valid_mask(self) -> np.ndarray:
        mask = np.zeros((self.n_vars, self.n_levels), dtype=bool)
        for vi, li in self.slots():
            mask[vi, li] = True
        return mask

    def var_index(self, name: str) -> int:
        for vi, v in enumerate(self.variables):
            if v.name == name:
                return vi
        raise KeyError(f"unknown variable {name!r}")

    def level_index(self, hpa: float) -> int:
        for li, p in enumerate(self.levels_hpa):
            if p == hpa:
                return li + 1
        raise KeyError(f"unknown pressure level {hpa}")

    def level_hpa_of(self, li: int) -> float:
        # 0 denotes the surface in reports
        return 0.0 if li == 0 else float(self.levels_hpa[li - 1])

    def to_dict(self) -> dict:
        return {
            "variables": [{"name": v.name, "kind": v.kind, "weight": v.weight}
                          for v in self.variables],
            "levels_hpa": list(self.levels_hpa),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "VariableLayout":
        return cls(
            variables=tuple(VariableSpec(v["name"], v["kind"], v["weight"])
                            for v in d["variables"]),
            levels_hpa=tuple(d["levels_hpa"]),
        )

    @property
    def digest(self) -> str:
        return canonical_digest(self.to_dict())


@dataclass
class FieldState:
    """One timestamped multi-variable state on the grid."""

    values: np.ndarray  # (n_vars, n_levels, nlat, nlon)
    time: datetime
    space: str
    layout: VariableLayout

    def __post_init__(self) -> None:
        if self.space not in (PHYSICAL, NORMALIZED):
            raise ValueError(f"unknown space {self.space!r}")
        if self.values.ndim != 4 or self.values.shape[:2] != (
                self.layout.n_vars, self.layout.n_levels):
            raise ShapeMismatchError(
                f"state shape {self.values.shape} inconsistent with layout "
                f"({self.layout.n_vars}, {self.layout.n_levels}, nlat, nlon)")

    @property
    def nlat(self) -> int:
        return self.values.shape[2]

    @property
    def nlon(self) -> int:
        return self.values.shape[3]

    def field(self, variable: str, level_hpa: float | None = None) -> np.ndarray:
        vi = self.layout.var_index(variable)
        li = 0 if level_hpa is None else self.layout.level_index(level_hpa)
        return self.values[vi, li]


def _as_table(layout: VariableLayout, spec_map: dict, default: float) -> np.ndarray:
    """Expand {variable: scalar | per-level list} into a (V, L) table."""
    table = np.full((layout.n_vars, layout.n_levels), default, dtype=np.float64)
    for vi, v in enumerate(layout.variables):
        if v.name not in spec_map:
            continue
        entry = spec_map[v.name]
        if np.isscalar(entry):
            if v.kind == "surface":
                table[vi, 0] = entry
            else:
                table[vi, 1:] = entry
        else:
            vals = np.asarray(entry, dtype=np.float64)
            if v.kind == "surface":
                raise ShapeMismatchError(f"surface variable {v.name} takes a scalar")
            if vals.shape != (layout.n_levels - 1,):
                raise ShapeMismatchError(
                    f"per-level entry for {v.name} must have {layout.n_levels - 1} values")
            table[vi, 1:] = vals
    return table


@dataclass(frozen=True)
class SystemSpec:
    """Full parameterization of one synthetic analysis system."""

    system_id: str
    nlat: int
    nlon: int
    layout: VariableLayout
    base: np.ndarray
    stationary_amp: np.ndarray
    seasonal_amp: np.ndarray
    diurnal_amp: np.ndarray
    advect: np.ndarray
    diffuse: np.ndarray
    relax: np.ndarray
    couple: np.ndarray
    noise_amp: np.ndarray
    mean_offset: np.ndarray
    std_scale: np.ndarray
    burn_in: int = 80

    def __post_init__(self) -> None:
        shape = (self.layout.n_vars, self.layout.n_levels)
        for name in ("base", "stationary_amp", "seasonal_amp", "diurnal_amp", "advect",
                     "diffuse", "relax", "couple", "noise_amp", "mean_offset", "std_scale"):
            arr = getattr(self, name)
            if arr.shape != shape:
                raise ShapeMismatchError(f"{name} must have shape {shape}, got {arr.shape}")
        if np.any(self.diffuse < 0.0) or np.any(self.diffuse > 0.24):
            raise UnstableParameterError("diffusion weight outside stable range [0, 0.24]")
        if np.any(self.relax < 0.0) or np.any(self.relax >= 2.0):
            raise UnstableParameterError("relaxation rate outside stable range [0, 2)")
        if np.any(self.std_scale <= 0.0):
            raise UnstableParameterError("std_scale must be positive")

    def to_dict(self) -> dict:
        d = {"system_id": self.system_id, "nlat": self.nlat, "nlon": self.nlon,
             "layout": self.layout.to_dict(), "burn_in": self.burn_in}
        for name in ("base", "stationary_amp", "seasonal_amp", "diurnal_amp", "advect",
                     "diffuse", "relax", "couple", "noise_amp", "mean_offset", "std_scale"):
            d[name] = getattr(self, name).tolist()
        return d

    @property
    def digest(self) -> str:
        return canonical_digest(self.to_dict())


DEFAULT_LEVELS_HPA = (50.0, 100.0, 200.0, 300.0, 500.0, 700.0, 850.0, 1000.0)


def default_layout() -> VariableLayout:
    return VariableLayout(
        variables=(
            VariableSpec("mass", "3d", 1.0),
            VariableSpec("temp", "3d", 1.0),
            VariableSpec("humid", "3d", 1.0),
            VariableSpec("sfc_temp", "surface", 1.0),
            VariableSpec("sfc_pres", "surface", 0.1),
        ),
        levels_hpa=DEFAULT_LEVELS_HPA,
    )


# Humidity-analog System-A standard deviations at the two top levels,
# measured over a two-year default-parameter archive; System B's default
# mean offset is two of these.
_HUMID_TOP_SIGMA_A = (7.26e-06, 1.76e-05)


def default_system_a(nlat: int = 8, nlon: int = 16) -> SystemSpec:
    layout = default_layout()
    humid_base = [2e-4, 4e-4, 1e-3, 2e-3, 4e-3, 6e-3, 8e-3, 1e-2]
    base = _as_table(layout, {
        "mass": [5700.0, 5600.0, 5450.0, 5300.0, 5100.0, 4950.0, 4850.0, 4750.0],
        "temp": [212.0, 218.0, 228.0, 240.0, 256.0, 270.0, 280.0, 288.0],
        "humid": humid_base,
        "sfc_temp": 288.0,
        "sfc_pres": 1010.0,
    }, 0.0)
    noise = _as_table(layout, {
        "mass": 6.0,
        "temp": 0.8,
        "humid": [b * 0.05 for b in humid_base],
        "sfc_temp": 0.7,
        "sfc_pres": 1.2,
    }, 0.0)
    stationary = 1.5 * noise
    hi = layout.var_index("humid")
    # no stationary wave at the two top humidity levels either, so the
    # System-B inflation applies to (nearly) the whole variance there
    stationary[hi, 1] = 0.0
    stationary[hi, 2] = 0.0
    return SystemSpec(
        system_id="system-a",
        nlat=nlat,
        nlon=nlon,
        layout=layout,
        base=base,
        stationary_amp=stationary,
        seasonal_amp=_as_table(layout, {
            "mass": 25.0,
            "temp": 6.0,
            # zero at the two top levels so the System-B inflation oracle is clean
            "humid": [0.0, 0.0] + [0.12 * b for b in humid_base[2:]],
            "sfc_temp": 8.0,
            "sfc_pres": 4.0,
        }, 0.0),
        diurnal_amp=_as_table(layout, {"sfc_temp": 1.5}, 0.0),
        advect=_as_table(layout, {
            "mass": [0.55, 0.55, 0.5, 0.5, 0.45, 0.4, 0.35, 0.3],
            "temp": 0.4,
            "humid": 0.35,
            "sfc_temp": 0.25,
            "sfc_pres": 0.3,
        }, 0.0),
        diffuse=_as_table(layout, {}, 0.08),
        relax=_as_table(layout, {"sfc_temp": 0.15, "sfc_pres": 0.15}, 0.10),
        couple=0.5 * noise,
        noise_amp=noise,
        mean_offset=np.zeros_like(base),
        std_scale=np.ones_like(base),
    )


def default_system_b(nlat: int = 8, nlon: int = 16) -> SystemSpec:
    """System A plus systematic dynamics changes and the humidity shift.

    The humidity-analog dynamics stay identical to System A; its shift is
    carried entirely by the affine output transform so measured offsets
    and standard-deviation ratios track the spec parameters directly.
    """
    a = default_system_a(nlat=nlat, nlon=nlon)
    layout = a.layout
    mi = layout.var_index("mass")
    ti = layout.var_index("temp")
    hi = layout.var_index("humid")
    advect = a.advect.copy()
    advect[mi, 1:] *= 1.25
    relax = a.relax.copy()
    relax[ti, 1:] = 0.14
    mean_offset = a.mean_offset.copy()
    mean_offset[hi, 1] = 2.0 * _HUMID_TOP_SIGMA_A[0]
    mean_offset[hi, 2] = 2.0 * _HUMID_TOP_SIGMA_A[1]
    std_scale = a.std_scale.copy()
    std_scale[hi, 1] = 6.0
    std_scale[hi, 2] = 6.0
    return replace(a, system_id="system-b", advect=advect, relax=relax,
                   mean_offset=mean_offset, std_scale=std_scale)


def _laplacian(a: np.ndarray) -> np.ndarray:
    padded = np.concatenate([a[:1], a, a[-1:]], axis=0)  # clamp at the poles
    return (padded[:-2] + padded[2:] + np.roll(a, 1, axis=1)
            + np.roll(a, -1, axis=1) - 4.0 * a)


def _lon_shift(a: np.ndarray, cells: float) -> np.ndarray:
    """Shift eastward by a fractional number of cells (linear interpolation)."""
    s = int(np.floor(cells))
    f = cells - s
    if f == 0.0:
        return np.roll(a, s, axis=1)
    return (1.0 - f) * np.roll(a, s, axis=1) + f * np.roll(a, s + 1, axis=1)


@dataclass
class AnalysisArchive:
    """Uniform-cadence record of system states."""

    system_id: str
    layout: VariableLayout
    nlat: int
    nlon: int
    start: datetime
    values: np.ndarray  # (n_times, n_vars, n_levels, nlat, nlon) float32
    seed: int
    spec_digest: str
    provenance: dict = field(default_factory=dict)

    @property
    def n_times(self) -> int:
        return self.values.shape[0]

    @property
    def end(self) -> datetime:
        return self.start + self.n_times * CADENCE

    def time_at(self, idx: int) -> datetime:
        return self.start + idx * CADENCE

    def times(self) -> list[datetime]:
        return [self.time_at(i) for i in range(self.n_times)]

    def index_of(self, t: datetime) -> int:
        delta = t - self.start
        steps, rem = divmod(delta, CADENCE)
        if rem != timedelta(0) or not (0 <= steps < self.n_times):
            raise DataGapError(f"timestamp {t.isoformat()} not in archive "
                               f"[{self.start.isoformat()}, {self.end.isoformat()})")
        return int(steps)

    def state(self, when: datetime | int) -> FieldState:
        idx = when if isinstance(when, int) else self.index_of(when)
        if not (0 <= idx < self.n_times):
            raise DataGapError(f"state index {idx} outside archive of {self.n_times}")
        return FieldState(values=self.values[idx].astype(np.float64),
                          time=self.time_at(idx), space=PHYSICAL, layout=self.layout)

    def slice(self, start: datetime, end: datetime) -> "AnalysisArchive":
        i0 = self.index_of(start)
        n = max(0, int((end - start) / CADENCE))
        if i0 + n > self.n_times:
            raise DataGapError(f"slice [{start.isoformat()}, {end.isoformat()}) "
                               "extends past archive end")
        return replace(self, start=start, values=self.values[i0:i0 + n])

    def grid(self) -> Grid:
        return build_grid(self.nlat, self.nlon)

    def save(self, path: str) -> None:
        header = {
            "format": "finecast-archive",
            "version": ARCHIVE_VERSION,
            "system_id": self.system_id,
            "layout": self.layout.to_dict(),
            "grid": {"nlat": self.nlat, "nlon": self.nlon},
            "start": self.start.isoformat(),
            "cadence_hours": CADENCE_HOURS,
            "n_times": self.n_times,
            "seed": self.seed,
            "spec_digest": self.spec_digest,
            "provenance": self.provenance,
            "dtype": "<f4",
            "order": "(time, variable, level, lat, lon)",
        }
        write_container(path, ARCHIVE_MAGIC, header,
                        np.ascontiguousarray(self.values, dtype="<f4").tobytes())

    @classmethod
    def load(cls, path: str) -> "AnalysisArchive":
        header, payload = read_container(path, ARCHIVE_MAGIC)
        if header.get("version") != ARCHIVE_VERSION:
            raise VersionMismatchError(
                f"archive version {header.get('version')} != {ARCHIVE_VERSION}")
        layout = VariableLayout.from_dict(header["layout"])
        nlat, nlon = header["grid"]["nlat"], header["grid"]["nlon"]
        shape = (header["n_times"], layout.n_vars, layout.n_levels, nlat, nlon)
        values = np.frombuffer(payload, dtype="<f4").reshape(shape)
        return cls(system_id=header["system_id"], layout=layout, nlat=nlat, nlon=nlon,
                   start=parse_time(header["start"]), values=values,
                   seed=header["seed"], spec_digest=header["spec_digest"],
                   provenance=header.get("provenance", {}))


def generate_archive(spec: SystemSpec, start: datetime, end: datetime,
                     seed: int, provenance: dict | None = None) -> AnalysisArchive:
    """Integrate the system and record states every 6 h on [start, end)."""
    if end <= start:
        raise ValueError("end must be after start")
    n_times = int((end - start) / CADENCE)
    if start + n_times * CADENCE < end:
        n_times += 1
    grid = build_grid(spec.nlat, spec.nlon)
    layout = spec.layout
    V, L, H, W = layout.n_vars, layout.n_levels, spec.nlat, spec.nlon
    slots = layout.slots()

    lat2d = np.repeat(grid.lats[:, None], W, axis=1)
    lon2d = np.repeat(grid.lons[None, :], H, axis=0)
    stationary = np.cos(2.0 * lon2d) * np.cos(lat2d)
    seasonal_pattern = np.sin(lat2d)
    diurnal_pattern = np.cos(lat2d)
    lon_frac = lon2d / (2.0 * np.pi)

    anom = np.zeros((V, L, H, W))
    out = np.zeros((n_times, V, L, H, W), dtype=np.float32)
    src_scale = 3.0 * spec.noise_amp + 1e-12

    for k in range(-spec.burn_in, n_times):
        if k >= 0:
            t = start + k * CADENCE
            yf = year_fraction(t)
            df = day_fraction(t)
            seasonal_t = np.sin(2.0 * np.pi * yf)
            diurnal_t = np.cos(2.0 * np.pi * (df + lon_frac))
            for vi, li in slots:
                out[k, vi, li] = (
                    spec.base[vi, li]
                    + spec.stationary_amp[vi, li] * stationary
                    + spec.seasonal_amp[vi, li] * seasonal_pattern * seasonal_t
                    + spec.diurnal_amp[vi, li] * diurnal_pattern * diurnal_t
                    + spec.mean_offset[vi, li]
                    + spec.std_scale[vi, li] * anom[vi, li]
                ).astype(np.float32)
        ctr = k + spec.burn_in
        new = np.zeros_like(anom)
        for vi, li in slots:
            adv = _lon_shift(anom[vi, li], spec.advect[vi, li])
            upd = (adv + spec.diffuse[vi, li] * _laplacian(adv)
                   - spec.relax[vi, li] * adv)
            if li >= 2:
                upd = upd + spec.couple[vi, li] * np.tanh(
                    anom[vi, li - 1] / src_scale[vi, li - 1])
            if spec.noise_amp[vi, li] != 0.0:
                gen = Generator(Philox(key=seed, counter=[0, ctr, vi, li]))
                eta = gen.standard_normal((H, W))
                eta = eta + 0.2 * _laplacian(eta)
                upd = upd + spec.noise_amp[vi, li] * eta
            new[vi, li] = upd
        anom = new
        if not np.all(np.isfinite(anom)):
            raise UnstableParameterError(
                f"integration diverged at step {k} of system {spec.system_id}")

    return AnalysisArchive(system_id=spec.system_id, layout=layout, nlat=H, nlon=W,
                           start=start, values=out, seed=seed,
                           spec_digest=spec.digest, provenance=provenance or {})


@dataclass
class NormalizationStats:
    """Per-(variable, level) mean, std, and 6 h increment std.

    Entries at invalid slots are fixed to mean 0 and stds 1 so full-array
    arithmetic stays well-defined; only valid slots carry information.
    """

    layout: VariableLayout
    mean: np.ndarray
    std: np.ndarray
    dstd: np.ndarray
    period_start: datetime
    period_end: datetime
    truncated: bool = False
    source: dict = field(default_factory=dict)

    def __post_init__(self) -> None:
        shape = (self.layout.n_vars, self.layout.n_levels)
        for name in ("mean", "std", "dstd"):
            if getattr(self, name).shape != shape:
                raise ShapeMismatchError(f"{name} must have shape {shape}")
        mask = self.layout.valid_mask()
        for name in ("std", "dstd"):
            vals = getattr(self, name)[mask]
            if np.any(vals <= 0.0) or not np.all(np.isfinite(vals)):
                raise DegenerateFieldError(f"{name} must be positive and finite "
                                           "at every valid slot")

    def to_dict(self) -> dict:
        return {
            "format": "finecast-stats",
            "version": STATS_VERSION,
            "layout": self.layout.to_dict(),
            "mean": self.mean.tolist(),
            "std": self.std.tolist(),
            "dstd": self.dstd.tolist(),
            "period_start": self.period_start.isoformat(),
            "period_end": self.period_end.isoformat(),
            "truncated": self.truncated,
            "source": self.source,
        }

    @property
    def digest(self) -> str:
        return canonical_digest(self.to_dict())

    def save(self, path: str) -> None:
        tmp = path + ".tmp"
        with open(tmp, "w", encoding="utf-8") as fh:
            json.dump(self.to_dict(), fh, sort_keys=True, indent=1)
        import os
        os.replace(tmp, path)

    @classmethod
    def load(cls, path: str) -> "NormalizationStats":
        with open(path, "r", encoding="utf-8") as fh:
            d = json.load(fh)
        if d.get("version") != STATS_VERSION:
            raise VersionMismatchError(f"stats version {d.get('version')} != {STATS_VERSION}")
        return cls(layout=VariableLayout.from_dict(d["layout"]),
                   mean=np.asarray(d["mean"]), std=np.asarray(d["std"]),
                   dstd=np.asarray(d["dstd"]),
                   period_start=parse_time(d["period_start"]),
                   period_end=parse_time(d["period_end"]),
                   truncated=d["truncated"], source=d.get("source", {}))


def _whole_year_end(start: datetime, end: datetime) -> datetime:
    years = 0
    while True:
        try:
            candidate = start.replace(year=start.year + years + 1)
        except ValueError:  # Feb 29 anchor
            candidate = start.replace(year=start.year + years + 1, day=28)
        if candidate <= end:
            years += 1
        else:
            break
    if years < 1:
        raise ValueError("whole-year truncation requires a period of at least one year")
    try:
        return start.replace(year=start.year + years)
    except ValueError:
        return start.replace(year=start.year + years, day=28)


def compute_normalization(archive: AnalysisArchive,
                          period: tuple[datetime, datetime] | None = None,
                          truncate_whole_years: bool = False) -> NormalizationStats:
    """Mean, std, and 6 h increment std over the period (unweighted cells)."""
    start = period[0] if period else archive.start
    end = period[1] if period else archive.end
    if truncate_whole_years:
        end = _whole_year_end(start, end)
    i0 = archive.index_of(start)
    n = int((end - start) / CADENCE)
    if n < 2:
        raise ValueError("normalization period must cover at least two states")
    if i0 + n > archive.n_times:
        raise DataGapError("normalization period extends past archive end")
    data = archive.values[i0:i0 + n].astype(np.float64)
    mean = data.mean(axis=(0, 3, 4))
    std = data.std(axis=(0, 3, 4))
    diffs = np.diff(data, axis=0)
    dstd = diffs.std(axis=(0, 3, 4))
    mask = archive.layout.valid_mask()
    for vi, li in archive.layout.slots():
        if std[vi, li] <= 0.0:
            v = archive.layout.variables[vi].name
            raise DegenerateFieldError(
                f"constant field for {v} at level index {li}: std is zero")
        if dstd[vi, li] <= 0.0:
            v = archive.layout.variables[vi].name
            raise DegenerateFieldError(
                f"static field for {v} at level index {li}: increment std is zero")
    mean[~mask] = 0.0
    std[~mask] = 1.0
    dstd[~mask] = 1.0
    return NormalizationStats(layout=archive.layout, mean=mean, std=std, dstd=dstd,
                              period_start=start, period_end=end,
                              truncated=truncate_whole_years,
                              source={"system_id": archive.system_id,
                                      "spec_digest": archive.spec_digest,
                                      "seed": archive.seed})


def normalize(state: FieldState, stats: NormalizationStats) -> FieldState:
    if state.space != PHYSICAL:
        raise SpaceMismatchError("normalize expects a physical-space state")
    if state.layout.digest != stats.layout.digest:
        raise LayoutMismatchError("state and stats layouts differ")
    values = (state.values - stats.mean[:, :, None, None]) / stats.std[:, :, None, None]
    return FieldState(values=values, time=state.time, space=NORMALIZED, layout=state.layout)


def denormalize(state: FieldState, stats: NormalizationStats) -> FieldState:
    if state.space != NORMALIZED:
        raise SpaceMismatchError("denormalize expects a normalized-space state")
    if state.layout.digest != stats.layout.digest:
        raise LayoutMismatchError("state and stats layouts differ")
    values = state.values * stats.std[:, :, None, None] + stats.mean[:, :, None, None]
    return FieldState(values=values, time=state.time, space=PHYSICAL, layout=state.layout)


def compare_norm_stats(a: NormalizationStats, b: NormalizationStats) -> list[dict]:
    """Per-slot shift report of b against a.

    mean_zscore = (mean_b - mean_a) / std_a, std_ratio = std_b / std_a,
    dstd_ratio = dstd_b / dstd_a. Surface rows report level_hpa = 0.
    """
    if a.layout.digest != b.layout.digest:
        raise LayoutMismatchError("cannot compare stats over different layouts")
    rows = []
    for vi, li in a.layout.slots():
        rows.append({
            "variable": a.layout.variables[vi].name,
            "level_hpa": a.layout.level_hpa_of(li),
            "mean_zscore": float((b.mean[vi, li] - a.mean[vi, li]) / a.std[vi, li]),
            "std_ratio": float(b.std[vi, li] / a.std[vi, li]),
            "dstd_ratio": float(b.dstd[vi, li] / a.dstd[vi, li]),
        })
    return rows


def write_norm_comparison_csv(rows: list[dict], path: str) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(
            fh, fieldnames=["variable", "level_hpa", "mean_zscore", "std_ratio", "dstd_ratio"])
        writer.writeheader()
        for row in rows:
            writer.writerow({k: repr(v) if isinstance(v, float) else v
                             for k, v in row.items()})


@dataclass
class TrainingWindow:
    """Two input states and n_steps target states at 6 h cadence."""

    valid_time: datetime
    inputs: tuple[FieldState, FieldState]
    targets: list[FieldState]

    @property
    def n_steps(self) -> int:
        return len(self.targets)

    @property
    def layout(self) -> VariableLayout:
        return self.inputs[0].layout


def sample_window(archive: AnalysisArchive, valid_time: datetime,
                  n_steps: int) -> TrainingWindow:
    """Window with inputs (valid-6h, valid) and targets valid+6h..valid+6h*n."""
    if n_steps < 1:
        raise ValueError("n_steps must be at least 1")
    idx = archive.index_of(valid_time)
    if idx - 1 < 0:
        raise DataGapError(f"timestamp {(valid_time - CADENCE).isoformat()} "
                           "not in archive (needed as the earlier input)")
    if idx + n_steps >= archive.n_times:
        missing = valid_time + n_steps * CADENCE
        raise DataGapError(f"timestamp {missing.isoformat()} not in archive "
                           "(needed as the final target)")
    inputs = (archive.state(idx - 1), archive.state(idx))
    targets = [archive.state(idx + 1 + i) for i in range(n_steps)]
    return TrainingWindow(valid_time=valid_time, inputs=inputs, targets=targets)


def eligible_window_times(archive: AnalysisArchive, n_steps: int) -> list[datetime]:
    """Valid times whose window fits entirely inside the archive."""
    return [archive.time_at(i) for i in range(1, archive.n_times - n_steps)]
