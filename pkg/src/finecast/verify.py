"""Forecast verification: climatology, error metrics, scorecards, spectra.

Climatology buckets analysis states by calendar date and time of day
(leap-proof month/day keys). Metrics are area-weighted over the sphere:
rmse is the root area-mean squared difference at one variable/level,
activity is rmse against the climatology, skill is 1 - rmse_c/rmse_r,
and acc is the area-weighted anomaly covariance divided by the two
activities (bias not removed, no outer root).

Scorecards aggregate per-date RMSE root-mean over initializations, then
convert to skill per level and average over level bands (or aggregate
RMSE across the band first when skill_then_average=False). Spectral
reports compare per-wavenumber variance of forecasts against the truth
and their cross-spectral coherence, band-averaged with a proportional
window.
"""

from __future__ import annotations

import csv
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from datetime import datetime, timedelta

import numpy as np

from .container import read_container, write_container
from .emulator import STEP_HOURS, ModelConfig, forecast_states
from .errors import (
    ConfigError,
    DataGapError,
    LayoutMismatchError,
    ShapeMismatchError,
    SpaceMismatchError,
    VersionMismatchError,
)
from .grid import Grid
from .spectral import band_average, sht_forward, spectral_coherence, spectral_variance
from .toydata import (
    PHYSICAL,
    AnalysisArchive,
    DegenerateFieldError,
    FieldState,
    NormalizationStats,
    VariableLayout,
    parse_time,
)

FORECAST_MAGIC = b"FCFSET01"
FORECAST_VERSION = 1


# ---------------------------------------------------------------------------
# climatology


@dataclass
class ClimatologyStore:
    """Per-(calendar date, time of day) mean states over a source period."""

    layout: VariableLayout
    nlat: int
    nlon: int
    period: tuple[str, str]
    means: dict = field(repr=False)
    counts: dict = field(repr=False)

    @staticmethod
    def key_for(when: datetime) -> tuple[int, int, int]:
        return (when.month, when.day, when.hour)

    def available(self, when: datetime) -> bool:
        return self.key_for(when) in self.means

    @property
    def n_buckets(self) -> int:
        return len(self.means)

    def state_for(self, when: datetime) -> FieldState:
        key = self.key_for(when)
        if key not in self.means:
            raise DataGapError(
                f"climatology bucket (month={key[0]}, day={key[1]}, "
                f"hour={key[2]}) not populated by period {self.period}")
        return FieldState(values=self.means[key], time=when, space=PHYSICAL,
                          layout=self.layout)


def build_climatology(archive: AnalysisArchive, start: datetime | None = None,
                      end: datetime | None = None) -> ClimatologyStore:
    """Bucket means over every archive state inside [start, end)."""
    start = start or archive.start
    end = end or archive.end
    sums: dict = {}
    counts: dict = {}
    for i in range(archive.n_times):
        t = archive.time_at(i)
        if not (start <= t < end):
            continue
        key = ClimatologyStore.key_for(t)
        if key not in sums:
            sums[key] = np.zeros(archive.values.shape[1:])
            counts[key] = 0
        sums[key] += archive.values[i]
        counts[key] += 1
    if not sums:
        raise DataGapError(
            f"no archive states in climatology period "
            f"[{start.isoformat()}, {end.isoformat()})")
    means = {k: s / counts[k] for k, s in sums.items()}
    return ClimatologyStore(layout=archive.layout, nlat=archive.nlat,
                            nlon=archive.nlon,
                            period=(start.isoformat(), end.isoformat()),
                            means=means, counts=counts)


# ---------------------------------------------------------------------------
# point metrics


def _area_fractions(grid: Grid) -> np.ndarray:
    return grid.row_areas / (4.0 * np.pi)


def _check_pair(a: FieldState, b: FieldState) -> None:
    if a.layout.digest != b.layout.digest:
        raise LayoutMismatchError("states describe different layouts")
    if a.space != PHYSICAL or b.space != PHYSICAL:
        raise SpaceMismatchError("verification metrics expect physical-space states")


def rmse(pred: FieldState, truth: FieldState, grid: Grid, variable: str,
         level_hpa: float | None = None) -> float:
    """Root of the area-weighted mean squared difference at one level."""
    _check_pair(pred, truth)
    d = pred.field(variable, level_hpa) - truth.field(variable, level_hpa)
    return float(np.sqrt(np.einsum("ij,i->", d * d, _area_fractions(grid))))


def skill(rmse_candidate: float, rmse_reference: float) -> float:
    """Relative improvement of the candidate over the reference error."""
    if rmse_candidate < 0.0 or rmse_reference < 0.0:
        raise ValueError("rmse values must be non-negative")
    if rmse_reference == 0.0:
        raise DegenerateFieldError("reference error is zero; skill undefined")
    return 1.0 - rmse_candidate / rmse_reference


def activity(x: FieldState, climatology: ClimatologyStore, grid: Grid,
             variable: str, level_hpa: float | None = None) -> float:
    """Root mean squared departure from the climatological state."""
    return rmse(x, climatology.state_for(x.time), grid, variable, level_hpa)


def acc(pred: FieldState, analysis: FieldState, climatology: ClimatologyStore,
        grid: Grid, variable: str, level_hpa: float | None = None) -> float:
    """Area-weighted anomaly covariance over the activity product."""
    _check_pair(pred, analysis)
    if pred.time != analysis.time:
        raise ValueError(
            f"valid times differ: {pred.time.isoformat()} vs "
            f"{analysis.time.isoformat()}")
    clim = climatology.state_for(pred.time).field(variable, level_hpa)
    ap = pred.field(variable, level_hpa) - clim
    aa = analysis.field(variable, level_hpa) - clim
    frac = _area_fractions(grid)
    act_p = float(np.sqrt(np.einsum("ij,i->", ap * ap, frac)))
    act_a = float(np.sqrt(np.einsum("ij,i->", aa * aa, frac)))
    if act_p == 0.0 or act_a == 0.0:
        raise DegenerateFieldError(
            "anomaly activity is zero; correlation undefined")
    cov = float(np.einsum("ij,i->", ap * aa, frac))
    return cov / (act_a * act_p)


# ---------------------------------------------------------------------------
# forecast sets


@dataclass
class ForecastSet:
    """Forecasts for a batch of initializations at fixed 6 h-multiple leads."""

    model_id: str
    layout: VariableLayout
    nlat: int
    nlon: int
    init_times: tuple[datetime, ...]
    lead_hours: tuple[int, ...]
    values: np.ndarray  # (inits, leads, vars, levels, nlat, nlon) float32
    provenance: dict = field(default_factory=dict)

    def __post_init__(self) -> None:
        self.init_times = tuple(self.init_times)
        self.lead_hours = tuple(int(h) for h in self.lead_hours)
        if not self.init_times or not self.lead_hours:
            raise ConfigError("forecast set needs init times and lead hours")
        if any(h % STEP_HOURS != 0 or h < STEP_HOURS for h in self.lead_hours):
            raise ConfigError(f"lead hours must be positive multiples of {STEP_HOURS}")
        if list(self.lead_hours) != sorted(set(self.lead_hours)):
            raise ConfigError("lead hours must be strictly increasing")
        shape = (len(self.init_times), len(self.lead_hours), self.layout.n_vars,
                 self.layout.n_levels, self.nlat, self.nlon)
        if self.values.shape != shape:
            raise ShapeMismatchError(
                f"forecast values shape {self.values.shape} != {shape}")

    def init_index(self, t: datetime) -> int:
        try:
            return self.init_times.index(t)
        except ValueError:
            raise DataGapError(
                f"initialization {t.isoformat()} not in forecast set") from None

    def lead_index(self, hours: int) -> int:
        try:
            return self.lead_hours.index(int(hours))
        except ValueError:
            raise DataGapError(f"lead {hours} h not in forecast set") from None

    def state(self, init_time: datetime, lead: int) -> FieldState:
        i = self.init_index(init_time)
        j = self.lead_index(lead)
        return FieldState(
            values=self.values[i, j].astype(np.float64),
            time=init_time + timedelta(hours=int(lead)),
            space=PHYSICAL, layout=self.layout)

    def save(self, path: str) -> None:
        header = {
            "format": "finecast-forecast-set",
            "version": FORECAST_VERSION,
            "model_id": self.model_id,
            "layout": self.layout.to_dict(),
            "grid": {"nlat": self.nlat, "nlon": self.nlon},
            "init_times": [t.isoformat() for t in self.init_times],
            "lead_hours": list(self.lead_hours),
            "provenance": self.provenance,
            "dtype": "<f4",
            "order": "(init, lead, variable, level, lat, lon)",
        }
        write_container(path, FORECAST_MAGIC, header,
                        np.ascontiguousarray(self.values, dtype="<f4").tobytes())

    @classmethod
    def load(cls, path: str) -> "ForecastSet":
        header, payload = read_container(path, FORECAST_MAGIC)
        if header.get("version") != FORECAST_VERSION:
            raise VersionMismatchError(
                f"forecast set version {header.get('version')} != {FORECAST_VERSION}")
        layout = VariableLayout.from_dict(header["layout"])
        nlat, nlon = header["grid"]["nlat"], header["grid"]["nlon"]
        inits = tuple(parse_time(s) for s in header["init_times"])
        leads = tuple(header["lead_hours"])
        shape = (len(inits), len(leads), layout.n_vars, layout.n_levels, nlat, nlon)
        values = np.frombuffer(payload, dtype="<f4").reshape(shape)
        return cls(model_id=header["model_id"], layout=layout, nlat=nlat,
                   nlon=nlon, init_times=inits, lead_hours=leads, values=values,
                   provenance=header.get("provenance", {}))


def make_forecast_set(params: dict, config: ModelConfig,
                      stats: NormalizationStats, archive: AnalysisArchive,
                      init_times, lead_hours, model_id: str = "model",
                      workers: int = 1) -> ForecastSet:
    """Run the emulator out to max(lead_hours) from each initialization."""
    init_times = list(init_times)
    lead_hours = sorted(set(int(h) for h in lead_hours))
    if not init_times or not lead_hours:
        raise ConfigError("forecast set needs init times and lead hours")
    n_steps = max(lead_hours) // STEP_HOURS
    steps = [h // STEP_HOURS - 1 for h in lead_hours]
    grid = archive.grid()

    def job(t):
        idx = archive.index_of(t)
        if idx < 1:
            raise DataGapError(
                f"timestamp {(t - timedelta(hours=STEP_HOURS)).isoformat()} "
                "not in archive (needed as the earlier input)")
        preds = forecast_states(params, config, stats, archive.state(idx - 1),
                                archive.state(idx), n_steps, grid)
        return np.stack([preds[s].values for s in steps]).astype(np.float32)

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            per_init = list(pool.map(job, init_times))
    else:
        per_init = [job(t) for t in init_times]
    return ForecastSet(model_id=model_id, layout=stats.layout,
                       nlat=archive.nlat, nlon=archive.nlon,
                       init_times=tuple(init_times),
                       lead_hours=tuple(lead_hours),
                       values=np.stack(per_init),
                       provenance={"kind": "model", "n_steps": n_steps})


def persistence_forecast_set(archive: AnalysisArchive, init_times,
                             lead_hours) -> ForecastSet:
    """Baseline that repeats the initial state at every lead."""
    init_times = list(init_times)
    lead_hours = sorted(set(int(h) for h in lead_hours))
    rows = []
    for t in init_times:
        state = archive.state(t).values.astype(np.float32)
        rows.append(np.repeat(state[None], len(lead_hours), axis=0))
    return ForecastSet(model_id="persistence", layout=archive.layout,
                       nlat=archive.nlat, nlon=archive.nlon,
                       init_times=tuple(init_times),
                       lead_hours=tuple(lead_hours),
                       values=np.stack(rows), provenance={"kind": "persistence"})


# ---------------------------------------------------------------------------
# aggregated tables and scorecards


def _check_alignment(candidate: ForecastSet, reference: ForecastSet) -> None:
    if candidate.layout.digest != reference.layout.digest:
        raise LayoutMismatchError("forecast sets describe different layouts")
    if candidate.lead_hours != reference.lead_hours:
        raise DataGapError(
            f"lead hours differ: {candidate.lead_hours} vs {reference.lead_hours}")
    if candidate.init_times != reference.init_times:
        missing = sorted(set(candidate.init_times) ^ set(reference.init_times))
        shown = ", ".join(t.isoformat() for t in missing[:5])
        raise DataGapError(
            f"initialization dates differ between forecast sets "
            f"({len(missing)} unmatched; first: {shown})")


def _per_level_rmse(fset: ForecastSet, truth: AnalysisArchive) -> np.ndarray:
    """(leads, vars, levels) root-mean-over-dates area-weighted RMSE."""
    if fset.layout.digest != truth.layout.digest:
        raise LayoutMismatchError("forecast layout differs from truth layout")
    frac = _area_fractions(truth.grid())
    total = np.zeros((len(fset.lead_hours), fset.layout.n_vars,
                      fset.layout.n_levels))
    for i, t0 in enumerate(fset.init_times):
        for j, h in enumerate(fset.lead_hours):
            target = truth.state(t0 + timedelta(hours=h))
            d = fset.values[i, j].astype(np.float64) - target.values
            total[j] += np.einsum("vlij,i->vl", d * d, frac)
    return np.sqrt(total / len(fset.init_times))


def rmse_table(fset: ForecastSet, truth: AnalysisArchive,
               climatology: ClimatologyStore | None = None) -> list[dict]:
    """Per (variable, level, lead) aggregated RMSE, plus mean ACC if given."""
    agg = _per_level_rmse(fset, truth)
    layout = fset.layout
    grid = truth.grid()
    rows = []
    for j, h in enumerate(fset.lead_hours):
        for vi, li in layout.slots():
            row = {
                "model_id": fset.model_id,
                "variable": layout.variables[vi].name,
                "level_hpa": layout.level_hpa_of(li),
                "lead_hours": h,
                "rmse": float(agg[j, vi, li]),
            }
            if climatology is not None:
                name = layout.variables[vi].name
                hpa = None if li == 0 else layout.levels_hpa[li - 1]
                accs = [acc(fset.state(t0, h),
                            truth.state(t0 + timedelta(hours=h)),
                            climatology, grid, name, hpa)
                        for t0 in fset.init_times]
                row["acc"] = float(np.mean(accs))
            rows.append(row)
    return rows


def write_metrics_csv(rows: list[dict], path: str) -> None:
    names = list(rows[0].keys()) if rows else [
        "model_id", "variable", "level_hpa", "lead_hours", "rmse"]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=names)
        writer.writeheader()
        for row in rows:
            writer.writerow({k: repr(v) if isinstance(v, float) else v
                             for k, v in row.items()})


def default_bands(layout: VariableLayout) -> tuple[tuple[str, float, float], ...]:
    """Surface plus pressure groupings; [lo, hi) selection on 3-d levels."""
    bands = [("surface", 0.0, 0.0)]
    for label, lo, hi in (("1000-500hPa", 500.0, 1000.1),
                          ("500-100hPa", 100.0, 500.0),
                          ("top", 0.0, 100.0)):
        if any(lo <= p < hi for p in layout.levels_hpa):
            bands.append((label, lo, hi))
    return tuple(bands)


@dataclass(frozen=True)
class Scorecard:
    """Band-averaged relative skill of a candidate against a reference."""

    candidate_id: str
    reference_id: str
    skill_then_average: bool
    rows: tuple[dict, ...]

    def cell(self, variable: str, band: str, lead_hours: int) -> dict:
        for row in self.rows:
            if (row["variable"], row["band"], row["lead_hours"]) == (
                    variable, band, lead_hours):
                return row
        raise KeyError(f"no scorecard cell ({variable}, {band}, {lead_hours})")


def scorecard(candidate: ForecastSet, reference: ForecastSet,
              truth: AnalysisArchive, bands=None, variables=None,
              lead_hours=None, annotate_above: float = 0.05,
              skill_then_average: bool = True) -> Scorecard:
    """Aggregate RMSE over dates, convert to skill, average over bands."""
    _check_alignment(candidate, reference)
    layout = candidate.layout
    bands = tuple(bands) if bands is not None else default_bands(layout)
    names = [v.name for v in layout.variables]
    if variables is not None:
        unknown = [v for v in variables if v not in names]
        if unknown:
            raise ConfigError(f"unknown variables {unknown}")
        names = [v for v in names if v in set(variables)]
    leads = (list(candidate.lead_hours) if lead_hours is None
             else [int(h) for h in lead_hours])
    lead_cols = [(candidate.lead_index(h), h) for h in leads]
    cand = _per_level_rmse(candidate, truth)
    ref = _per_level_rmse(reference, truth)

    rows = []
    for vi, vspec in enumerate(layout.variables):
        if vspec.name not in names:
            continue
        for label, lo, hi in bands:
            if vspec.kind == "surface":
                lis = [0] if label == "surface" else []
            else:
                lis = [li for li in range(1, layout.n_levels)
                       if lo <= layout.levels_hpa[li - 1] < hi]
            if not lis:
                continue
            for j, h in lead_cols:
                if skill_then_average:
                    skills = [
                        1.0 - cand[j, vi, li] / ref[j, vi, li]
                        if ref[j, vi, li] > 0.0 else np.nan
                        for li in lis]
                    value = float(np.mean(skills))
                else:
                    c_band = np.sqrt(np.mean(cand[j, vi, lis] ** 2))
                    r_band = np.sqrt(np.mean(ref[j, vi, lis] ** 2))
                    value = (1.0 - c_band / r_band) if r_band > 0.0 else np.nan
                marker = 0 if np.isnan(value) else int(np.sign(value))
                annotated = ""
                if np.isfinite(value) and abs(value) > annotate_above:
                    annotated = f"{100.0 * value:+.1f}%"
                rows.append({
                    "variable": vspec.name,
                    "band": label,
                    "lead_hours": h,
                    "skill": value,
                    "marker": marker,
                    "annotated": annotated,
                })
    return Scorecard(candidate_id=candidate.model_id,
                     reference_id=reference.model_id,
                     skill_then_average=skill_then_average,
                     rows=tuple(rows))


def write_scorecard_csv(card: Scorecard, path: str) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=[
            "variable", "band", "lead_hours", "skill", "marker", "annotated"])
        writer.writeheader()
        for row in card.rows:
            out = dict(row)
            out["skill"] = repr(float(row["skill"]))
            writer.writerow(out)


# ---------------------------------------------------------------------------
# spectral reports


def default_lmax(nlat: int, nlon: int) -> int:
    return min(nlat - 1, (nlon - 1) // 2)


def spectral_report(fset: ForecastSet, truth: AnalysisArchive, variable: str,
                    level_hpa: float | None, lead_hours=None,
                    lmax: int | None = None,
                    band_fraction: float = 0.1) -> list[dict]:
    """Date-mean variance ratio and coherence per (lead, total wavenumber)."""
    if fset.layout.digest != truth.layout.digest:
        raise LayoutMismatchError("forecast layout differs from truth layout")
    leads = list(lead_hours) if lead_hours is not None else list(fset.lead_hours)
    grid = truth.grid()
    if lmax is None:
        lmax = default_lmax(truth.nlat, truth.nlon)
    rows = []
    for h in leads:
        ratio_sum = np.zeros(lmax + 1)
        ratio_n = np.zeros(lmax + 1, dtype=int)
        coh_sum = np.zeros(lmax + 1)
        coh_n = np.zeros(lmax + 1, dtype=int)
        for t0 in fset.init_times:
            f = fset.state(t0, h).field(variable, level_hpa)
            a = truth.state(t0 + timedelta(hours=h)).field(variable, level_hpa)
            cf = sht_forward(f, grid, lmax)
            ca = sht_forward(a, grid, lmax)
            svar_f = spectral_variance(cf)
            svar_a = spectral_variance(ca)
            ok = svar_a > 0.0
            ratio_sum[ok] += svar_f[ok] / svar_a[ok]
            ratio_n[ok] += 1
            coh = spectral_coherence(cf, ca)
            ok = np.isfinite(coh)
            coh_sum[ok] += coh[ok]
            coh_n[ok] += 1
        ratio = np.where(ratio_n > 0, ratio_sum / np.maximum(ratio_n, 1), np.nan)
        coh = np.where(coh_n > 0, coh_sum / np.maximum(coh_n, 1), np.nan)
        ratio = band_average(ratio, band_fraction)
        coh = band_average(coh, band_fraction)
        for k in range(lmax + 1):
            rows.append({
                "lead_hours": int(h),
                "wavenumber": k,
                "variance_ratio": float(ratio[k]),
                "coherence": float(coh[k]),
            })
    return rows


def write_spectral_csv(rows: list[dict], path: str) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=[
            "lead_hours", "wavenumber", "variance_ratio", "coherence"])
        writer.writeheader()
        for row in rows:
            out = dict(row)
            out["variance_ratio"] = repr(float(row["variance_ratio"]))
            out["coherence"] = repr(float(row["coherence"]))
            writer.writerow(out)
