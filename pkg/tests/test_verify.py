"""Verification-suite tests: climatology, metrics, forecast sets, scorecards, spectra."""

import csv
import os
import tempfile
from dataclasses import replace
from datetime import timedelta
from functools import lru_cache

import numpy as np
import pytest

from helpers import small_layout, surface_only_layout, tiny_system
from finecast.container import write_container
from finecast.errors import (
    ConfigError,
    DataGapError,
    FormatError,
    LayoutMismatchError,
    ShapeMismatchError,
    SpaceMismatchError,
    VersionMismatchError,
)
from finecast.emulator import ModelConfig, forecast_states, init_params, zero_params
from finecast.grid import build_grid
from finecast.spectral import sht_forward, sht_inverse, spectral_variance
from finecast.toydata import (
    PHYSICAL,
    AnalysisArchive,
    DegenerateFieldError,
    FieldState,
    compute_normalization,
    day_fraction,
    generate_archive,
    normalize,
    parse_time,
    year_fraction,
)
from finecast.verify import (
    FORECAST_MAGIC,
    ForecastSet,
    acc,
    activity,
    build_climatology,
    default_bands,
    default_lmax,
    make_forecast_set,
    persistence_forecast_set,
    rmse,
    rmse_table,
    scorecard,
    skill,
    spectral_report,
    write_metrics_csv,
    write_scorecard_csv,
    write_spectral_csv,
)

T0 = parse_time("2001-01-01T00")


@lru_cache(maxsize=1)
def _archive():
    return generate_archive(tiny_system(), T0, parse_time("2001-03-01T00"), seed=5)


@lru_cache(maxsize=1)
def _quiet_archive():
    # low noise, no cross-level coupling: the deterministic forcing dominates
    spec = tiny_system()
    quiet = replace(spec, noise_amp=spec.noise_amp * 0.02,
                    couple=np.zeros_like(spec.couple), system_id="tiny-quiet")
    return generate_archive(quiet, T0, parse_time("2003-01-01T00"), seed=11)


@lru_cache(maxsize=1)
def _setup():
    arc = _archive()
    stats = compute_normalization(arc)
    config = ModelConfig(hidden_width=6)
    params = init_params(config, len(arc.layout.slots()), 3)
    return stats, config, params


@lru_cache(maxsize=1)
def _fsets():
    arc = _archive()
    stats, config, params = _setup()
    inits = tuple(arc.time_at(i) for i in (10, 14, 18))
    leads = (6, 12, 24)
    model = make_forecast_set(params, config, stats, arc, inits, leads,
                              model_id="m1")
    persist = persistence_forecast_set(arc, inits, leads)
    return model, persist


def _hand_archive(values, layout=None, start=T0):
    return AnalysisArchive(system_id="hand", layout=layout or small_layout(),
                           nlat=values.shape[-2], nlon=values.shape[-1],
                           start=start, values=values.astype(np.float32),
                           seed=0, spec_digest="hand", provenance={})


def _truth_fset(arc, inits, leads, model_id="truth-copy"):
    # forecast values copied from the verifying archive itself
    vals = np.stack([
        np.stack([arc.values[arc.index_of(t0) + h // 6] for h in leads])
        for t0 in inits])
    return ForecastSet(model_id=model_id, layout=arc.layout, nlat=arc.nlat,
                       nlon=arc.nlon, init_times=tuple(inits),
                       lead_hours=tuple(leads), values=vals)


def _quiet_deterministic(t):
    # forcing terms of the quiet system, rebuilt from its parameter tables
    arc = _quiet_archive()
    spec = replace(tiny_system(), noise_amp=tiny_system().noise_amp * 0.02,
                   couple=np.zeros_like(tiny_system().couple))
    grid = build_grid(arc.nlat, arc.nlon)
    lat2d = np.repeat(grid.lats[:, None], arc.nlon, axis=1)
    lon2d = np.repeat(grid.lons[None, :], arc.nlat, axis=0)
    yf, df = year_fraction(t), day_fraction(t)
    out = np.zeros((arc.layout.n_vars, arc.layout.n_levels, arc.nlat, arc.nlon))
    for vi, li in arc.layout.slots():
        out[vi, li] = (
            spec.base[vi, li]
            + spec.stationary_amp[vi, li] * np.cos(2 * lon2d) * np.cos(lat2d)
            + spec.seasonal_amp[vi, li] * np.sin(lat2d) * np.sin(2 * np.pi * yf)
            + spec.diurnal_amp[vi, li] * np.cos(lat2d)
            * np.cos(2 * np.pi * (df + lon2d / (2 * np.pi)))
            + spec.mean_offset[vi, li])
    return out


# ---------------------------------------------------------------------------
# climatology


def test_constant_archive_gives_constant_buckets():
    year = 365 * 4
    vals = np.full((year, 4, 4, 4, 8), 7.25, dtype=np.float32)
    clim = build_climatology(_hand_archive(vals))
    assert clim.n_buckets == year
    st = clim.state_for(parse_time("2001-08-09T18"))
    assert np.all(st.values == 7.25)
    assert st.space == PHYSICAL
    assert all(c == 1 for c in clim.counts.values())


def test_two_year_bucket_is_mean_of_both_years():
    year = 365 * 4
    rng = np.random.default_rng(0)
    one = rng.normal(size=(year, 4, 4, 4, 8)).astype(np.float32)
    arc = _hand_archive(np.concatenate([one, one + 2.0]))
    clim = build_climatology(arc)
    assert clim.n_buckets == year
    assert all(c == 2 for c in clim.counts.values())
    t = parse_time("2001-05-05T12")
    i = arc.index_of(t)
    expect = (arc.values[i].astype(np.float64)
              + arc.values[i + year].astype(np.float64)) / 2.0
    assert np.array_equal(clim.state_for(t).values, expect)
    # same bucket serves the second year's date too
    assert np.array_equal(
        clim.state_for(t + timedelta(days=365)).values, expect)
    assert clim.period == (arc.start.isoformat(), arc.end.isoformat())


def test_climatology_empty_period_and_missing_bucket():
    arc = _archive()
    with pytest.raises(DataGapError):
        build_climatology(arc, start=arc.end, end=arc.end + timedelta(days=4))
    jan = build_climatology(arc, start=T0, end=parse_time("2001-02-01T00"))
    t_feb = parse_time("2001-02-10T00")
    assert not jan.available(t_feb)
    assert jan.available(parse_time("2001-01-10T00"))
    with pytest.raises(DataGapError, match="bucket"):
        jan.state_for(t_feb)


def test_climatology_reproduces_seasonal_cycle():
    arc = _quiet_archive()
    clim = build_climatology(arc)
    grid = arc.grid()
    samples = [parse_time(s) for s in
               ("2001-02-10T06", "2001-07-04T12", "2001-11-20T18", "2002-05-01T00")]
    for t in samples:
        det = _quiet_deterministic(t)
        assert np.abs(clim.state_for(t).values - det).max() < 0.1

    # residual activity sits at the anomaly noise level, far below the cycle
    idx = np.arange(0, arc.n_times, 13)
    anom = arc.values[idx, 0, 2].astype(np.float64) - np.array(
        [_quiet_deterministic(arc.time_at(int(i)))[0, 2] for i in idx])
    sigma = float(np.std(anom))
    acts = [activity(arc.state(t), clim, grid, "temp", 700.0) for t in samples]
    assert all(0.2 * sigma < a < 2.0 * sigma for a in acts)
    assert max(acts) < 0.05 * 2.0  # seasonal amplitude for temp is 2.0

    # the annual cycle itself is reproduced through the year
    ts = [parse_time(f"2001-{m:02d}-15T00") for m in range(1, 13)]
    cvals = np.array([clim.state_for(t).values[0, 2, 3, 0] for t in ts])
    dvals = np.array([_quiet_deterministic(t)[0, 2, 3, 0] for t in ts])
    assert np.corrcoef(cvals, dvals)[0, 1] > 0.999

    # time-of-day buckets differ where the diurnal forcing acts (t2 surface)
    d00 = clim.state_for(parse_time("2001-06-01T00")).field("t2")
    d12 = clim.state_for(parse_time("2001-06-01T12")).field("t2")
    assert np.abs(d00 - d12).max() > 1.0


# ---------------------------------------------------------------------------
# point metrics


def test_rmse_trivials_and_direct_sum_oracle():
    arc = _archive()
    grid = arc.grid()
    a = arc.state(4)
    assert rmse(a, a, grid, "temp", 700.0) == 0.0
    shifted = FieldState(values=a.values + 0.73, time=a.time, space=PHYSICAL,
                         layout=a.layout)
    assert abs(rmse(shifted, a, grid, "wind", 300.0) - 0.73) < 1e-12

    grid24 = build_grid(2, 4)
    rng = np.random.default_rng(7)
    p = FieldState(values=rng.normal(size=(4, 4, 2, 4)), time=T0,
                   space=PHYSICAL, layout=small_layout())
    t = FieldState(values=rng.normal(size=(4, 4, 2, 4)), time=T0,
                   space=PHYSICAL, layout=small_layout())
    total = 0.0
    for i in range(2):
        for j in range(4):
            frac = grid24.row_areas[i] / (4.0 * np.pi)
            total += frac * (p.values[1, 2, i, j] - t.values[1, 2, i, j]) ** 2
    assert abs(rmse(p, t, grid24, "wind", 700.0) - np.sqrt(total)) < 1e-12


def test_rmse_is_a_metric():
    arc = _archive()
    grid = arc.grid()
    rng = np.random.default_rng(3)
    for _ in range(5):
        sa, sb, sc = (FieldState(values=rng.normal(size=(4, 4, 4, 8)), time=T0,
                                 space=PHYSICAL, layout=small_layout())
                      for _ in range(3))
        ab = rmse(sa, sb, grid, "temp", 300.0)
        ba = rmse(sb, sa, grid, "temp", 300.0)
        ac = rmse(sa, sc, grid, "temp", 300.0)
        cb = rmse(sc, sb, grid, "temp", 300.0)
        assert ab == ba
        assert ab >= 0.0
        assert ab <= ac + cb + 1e-12


def test_rmse_rejects_mismatched_inputs():
    arc = _archive()
    grid = arc.grid()
    a = arc.state(0)
    other = FieldState(values=np.zeros((1, 2, 4, 8)), time=a.time,
                       space=PHYSICAL, layout=surface_only_layout())
    with pytest.raises(LayoutMismatchError):
        rmse(a, other, grid, "s2", None)
    stats, _, _ = _setup()
    with pytest.raises(SpaceMismatchError):
        rmse(normalize(a, stats), a, grid, "temp", 300.0)


def test_skill_values_and_reciprocity():
    assert skill(1.0, 1.0) == 0.0
    assert skill(0.5, 1.0) == 0.5
    assert skill(2.0, 1.0) == -1.0
    with pytest.raises(DegenerateFieldError):
        skill(1.0, 0.0)
    with pytest.raises(ValueError):
        skill(-1.0, 1.0)
    rng = np.random.default_rng(1)
    for _ in range(20):
        a, b = rng.uniform(0.1, 5.0, size=2)
        assert abs((1.0 - skill(a, b)) * (1.0 - skill(b, a)) - 1.0) < 1e-12


def test_activity_identity_and_trivials():
    arc = _quiet_archive()
    clim = build_climatology(arc)
    grid = arc.grid()
    t = parse_time("2001-03-03T06")
    base = clim.state_for(t)
    assert activity(base, clim, grid, "temp", 700.0) == 0.0
    shifted = FieldState(values=base.values + 1.3, time=t, space=PHYSICAL,
                         layout=base.layout)
    assert abs(activity(shifted, clim, grid, "press") - 1.3) < 1e-12
    x = arc.state(t)
    assert activity(x, clim, grid, "wind", 300.0) == rmse(
        x, clim.state_for(t), grid, "wind", 300.0)


def test_acc_trivials_bounds_and_oracle():
    arc = _quiet_archive()
    clim = build_climatology(arc)
    grid = arc.grid()
    t = parse_time("2001-04-10T12")
    x = arc.state(t)
    assert abs(acc(x, x, clim, grid, "temp", 1000.0) - 1.0) < 1e-12
    cv = clim.state_for(t).values
    mirrored = FieldState(values=2.0 * cv - x.values, time=t, space=PHYSICAL,
                          layout=x.layout)
    assert abs(acc(mirrored, x, clim, grid, "temp", 1000.0) + 1.0) < 1e-12

    # direct-sum oracle on a 2x4 grid with a hand-built climatology state
    grid24 = build_grid(2, 4)
    rng = np.random.default_rng(9)
    year = 365 * 4
    cvals = np.broadcast_to(rng.normal(size=(1, 4, 4, 2, 4)),
                            (year, 4, 4, 2, 4)).astype(np.float32)
    clim24 = build_climatology(_hand_archive(cvals))
    tt = parse_time("2001-02-02T00")
    p = FieldState(values=rng.normal(size=(4, 4, 2, 4)), time=tt,
                   space=PHYSICAL, layout=small_layout())
    an = FieldState(values=rng.normal(size=(4, 4, 2, 4)), time=tt,
                    space=PHYSICAL, layout=small_layout())
    got = acc(p, an, clim24, grid24, "temp", 300.0)
    cov = act_p = act_a = 0.0
    cfield = clim24.state_for(tt).values
    for i in range(2):
        for j in range(4):
            frac = grid24.row_areas[i] / (4.0 * np.pi)
            dp = p.values[0, 1, i, j] - cfield[0, 1, i, j]
            da = an.values[0, 1, i, j] - cfield[0, 1, i, j]
            cov += frac * dp * da
            act_p += frac * dp * dp
            act_a += frac * da * da
    assert abs(got - cov / np.sqrt(act_a * act_p)) < 1e-12
    assert abs(got) <= 1.0 + 1e-9

    for k in range(10):
        p2 = FieldState(values=rng.normal(size=(4, 4, 2, 4)), time=tt,
                        space=PHYSICAL, layout=small_layout())
        a2 = FieldState(values=rng.normal(size=(4, 4, 2, 4)), time=tt,
                        space=PHYSICAL, layout=small_layout())
        assert abs(acc(p2, a2, clim24, grid24, "wind", 1000.0)) <= 1.0 + 1e-9


def test_acc_degenerate_and_time_mismatch():
    arc = _quiet_archive()
    clim = build_climatology(arc)
    grid = arc.grid()
    t = parse_time("2001-04-10T12")
    x = arc.state(t)
    exact = clim.state_for(t)
    with pytest.raises(DegenerateFieldError):
        acc(exact, x, clim, grid, "temp", 700.0)
    y = arc.state(parse_time("2001-04-10T18"))
    with pytest.raises(ValueError, match="valid times"):
        acc(x, y, clim, grid, "temp", 700.0)


# ---------------------------------------------------------------------------
# forecast sets


def test_forecast_set_validation():
    arc = _archive()
    good = persistence_forecast_set(arc, [arc.time_at(4)], [6, 12])
    with pytest.raises(ConfigError):
        ForecastSet(model_id="x", layout=good.layout, nlat=4, nlon=8,
                    init_times=good.init_times, lead_hours=(6, 7),
                    values=good.values)
    with pytest.raises(ConfigError):
        ForecastSet(model_id="x", layout=good.layout, nlat=4, nlon=8,
                    init_times=good.init_times, lead_hours=(12, 6),
                    values=good.values)
    with pytest.raises(ConfigError):
        ForecastSet(model_id="x", layout=good.layout, nlat=4, nlon=8,
                    init_times=(), lead_hours=(6,), values=good.values)
    with pytest.raises(ShapeMismatchError):
        ForecastSet(model_id="x", layout=good.layout, nlat=4, nlon=8,
                    init_times=good.init_times, lead_hours=(6, 12, 18),
                    values=good.values)
    with pytest.raises(DataGapError):
        good.state(arc.time_at(5), 6)
    with pytest.raises(DataGapError):
        good.state(arc.time_at(4), 18)


def test_make_forecast_set_matches_direct_rollout():
    arc = _archive()
    stats, config, params = _setup()
    model, _ = _fsets()
    grid = arc.grid()
    for i, t0 in enumerate(model.init_times):
        idx = arc.index_of(t0)
        preds = forecast_states(params, config, stats, arc.state(idx - 1),
                                arc.state(idx), 4, grid)
        for j, h in enumerate(model.lead_hours):
            expect = preds[h // 6 - 1].values.astype(np.float32)
            assert np.array_equal(model.values[i, j], expect)
            st = model.state(t0, h)
            assert st.time == t0 + timedelta(hours=h)
            assert st.space == PHYSICAL

    par = make_forecast_set(params, config, stats, arc, model.init_times,
                            model.lead_hours, model_id="m1", workers=3)
    assert np.array_equal(par.values, model.values)

    with pytest.raises(DataGapError, match="earlier input"):
        make_forecast_set(params, config, stats, arc, [arc.time_at(0)], [6])


def test_zero_model_equals_persistence():
    arc = _archive()
    stats, config, _ = _setup()
    inits = [arc.time_at(i) for i in (10, 14)]
    zf = make_forecast_set(zero_params(config, len(arc.layout.slots())),
                           config, stats, arc, inits, [6, 24], model_id="zero")
    pf = persistence_forecast_set(arc, inits, [6, 24])
    assert pf.model_id == "persistence"
    assert np.allclose(zf.values, pf.values, atol=1e-6)
    for i, t0 in enumerate(inits):
        assert np.array_equal(pf.values[i, 0], arc.values[arc.index_of(t0)])
        assert np.array_equal(pf.values[i, 1], arc.values[arc.index_of(t0)])


def test_forecast_set_roundtrip_and_format_errors():
    model, _ = _fsets()
    with tempfile.TemporaryDirectory() as d:
        path = os.path.join(d, "set.fcst")
        model.save(path)
        back = ForecastSet.load(path)
        assert np.array_equal(back.values, model.values)
        assert back.init_times == model.init_times
        assert back.lead_hours == model.lead_hours
        assert back.model_id == model.model_id
        assert back.layout.digest == model.layout.digest

        wrong = os.path.join(d, "wrong.bin")
        write_container(wrong, b"FCWRONG1", {"format": "other"}, b"")
        with pytest.raises(FormatError):
            ForecastSet.load(wrong)

        stale = os.path.join(d, "stale.fcst")
        write_container(stale, FORECAST_MAGIC, {"version": 99}, b"")
        with pytest.raises(VersionMismatchError):
            ForecastSet.load(stale)


# ---------------------------------------------------------------------------
# scorecards


def test_scorecard_self_comparison_is_all_zero():
    model, _ = _fsets()
    card = scorecard(model, model, _archive())
    assert len(card.rows) > 0
    for row in card.rows:
        assert row["skill"] == 0.0
        assert row["marker"] == 0
        assert row["annotated"] == ""


def test_scorecard_perfect_candidate_scores_one():
    arc = _archive()
    model, persist = _fsets()
    perfect = _truth_fset(arc, model.init_times, model.lead_hours)
    card = scorecard(perfect, persist, arc)
    for row in card.rows:
        assert row["skill"] == 1.0
        assert row["marker"] == 1
        assert row["annotated"] == "+100.0%"


def test_scorecard_matches_recomputation_from_per_date_rmse():
    arc = _archive()
    grid = arc.grid()
    model, persist = _fsets()
    bands = (("surface", 0.0, 0.0), ("all-levels", 0.0, 2000.0))
    card = scorecard(model, persist, arc, bands=bands)
    layout = model.layout

    def agg_rmse(fset, name, hpa, h):
        sqs = []
        for t0 in fset.init_times:
            truth = arc.state(t0 + timedelta(hours=h))
            sqs.append(rmse(fset.state(t0, h), truth, grid, name, hpa) ** 2)
        return float(np.sqrt(np.mean(sqs)))

    for vspec in layout.variables:
        for h in model.lead_hours:
            if vspec.kind == "surface":
                expect = skill(agg_rmse(model, vspec.name, None, h),
                               agg_rmse(persist, vspec.name, None, h))
                got = card.cell(vspec.name, "surface", h)["skill"]
            else:
                per_level = [
                    skill(agg_rmse(model, vspec.name, p, h),
                          agg_rmse(persist, vspec.name, p, h))
                    for p in layout.levels_hpa]
                expect = float(np.mean(per_level))
                got = card.cell(vspec.name, "all-levels", h)["skill"]
            assert abs(got - expect) < 1e-10 * max(1.0, abs(expect))


def test_scorecard_antisymmetry():
    arc = _archive()
    model, persist = _fsets()
    fwd = scorecard(model, persist, arc)
    rev = scorecard(persist, model, arc)
    for f, r in zip(fwd.rows, rev.rows):
        assert (f["variable"], f["band"], f["lead_hours"]) == (
            r["variable"], r["band"], r["lead_hours"])
        assert r["marker"] == -f["marker"]

    # per-level bands obey the exact reciprocity of the skill definition
    bands = tuple((f"L{int(p)}", p - 1.0, p + 1.0)
                  for p in arc.layout.levels_hpa)
    fwd = scorecard(model, persist, arc, bands=bands, variables=["temp"])
    rev = scorecard(persist, model, arc, bands=bands, variables=["temp"])
    for f, r in zip(fwd.rows, rev.rows):
        assert abs((1.0 - f["skill"]) * (1.0 - r["skill"]) - 1.0) < 1e-12


def test_scorecard_band_aggregation_modes():
    arc = _archive()
    model, persist = _fsets()
    singles = tuple((f"L{int(p)}", p - 1.0, p + 1.0)
                    for p in arc.layout.levels_hpa)
    a = scorecard(model, persist, arc, bands=singles, skill_then_average=True)
    b = scorecard(model, persist, arc, bands=singles, skill_then_average=False)
    for ra, rb in zip(a.rows, b.rows):
        assert ra["skill"] == rb["skill"]

    # multi-level band: rmse-then-skill averages errors before converting
    wide = (("all-levels", 0.0, 2000.0),)
    grid = arc.grid()

    def agg_sq(fset, name, hpa, h):
        return np.mean([
            rmse(fset.state(t0, h), arc.state(t0 + timedelta(hours=h)),
                 grid, name, hpa) ** 2
            for t0 in fset.init_times])

    mixed = scorecard(model, persist, arc, bands=wide, variables=["temp"],
                      skill_then_average=False)
    for row in mixed.rows:
        h = row["lead_hours"]
        c_band = np.sqrt(np.mean([agg_sq(model, "temp", p, h)
                                  for p in arc.layout.levels_hpa]))
        r_band = np.sqrt(np.mean([agg_sq(persist, "temp", p, h)
                                  for p in arc.layout.levels_hpa]))
        expect = 1.0 - c_band / r_band
        assert abs(row["skill"] - expect) < 1e-10
    averaged = scorecard(model, persist, arc, bands=wide, variables=["temp"])
    pairs = list(zip(mixed.rows, averaged.rows))
    assert any(abs(m["skill"] - s["skill"]) > 1e-14 for m, s in pairs)


def test_scorecard_filters_and_annotations():
    arc = _archive()
    model, persist = _fsets()
    card = scorecard(model, persist, arc, lead_hours=[24])
    assert {row["lead_hours"] for row in card.rows} == {24}
    card = scorecard(model, persist, arc, variables=["temp"])
    assert {row["variable"] for row in card.rows} == {"temp"}
    with pytest.raises(ConfigError):
        scorecard(model, persist, arc, variables=["nope"])
    with pytest.raises(DataGapError):
        scorecard(model, persist, arc, lead_hours=[18])

    every = scorecard(model, persist, arc, annotate_above=0.0)
    for row in every.rows:
        if row["skill"] != 0.0:
            assert row["annotated"] == f"{100.0 * row['skill']:+.1f}%"
    none = scorecard(model, persist, arc, annotate_above=10.0)
    assert all(row["annotated"] == "" for row in none.rows)

    labels = {row["band"] for row in scorecard(model, persist, arc).rows}
    assert labels == {label for label, _, _ in default_bands(arc.layout)}
    assert labels == {"surface", "1000-500hPa", "500-100hPa"}


def test_scorecard_alignment_errors():
    arc = _archive()
    model, persist = _fsets()
    other_leads = persistence_forecast_set(arc, model.init_times, [6, 12])
    with pytest.raises(DataGapError, match="lead"):
        scorecard(model, other_leads, arc)
    shifted = persistence_forecast_set(
        arc, [t + timedelta(hours=6) for t in model.init_times],
        model.lead_hours)
    with pytest.raises(DataGapError) as err:
        scorecard(model, shifted, arc)
    assert "unmatched" in str(err.value)
    assert model.init_times[0].isoformat() in str(err.value)

    year = 365 * 4
    flat = _hand_archive(np.zeros((year, 1, 2, 4, 8)),
                         layout=surface_only_layout())
    other_layout = persistence_forecast_set(
        flat, list(model.init_times), model.lead_hours)
    with pytest.raises(LayoutMismatchError):
        scorecard(model, other_layout, arc)


def test_scorecard_csv_roundtrip():
    model, persist = _fsets()
    card = scorecard(model, persist, _archive())
    with tempfile.TemporaryDirectory() as d:
        path = os.path.join(d, "scorecard.csv")
        write_scorecard_csv(card, path)
        with open(path, newline="", encoding="utf-8") as fh:
            rows = list(csv.DictReader(fh))
    assert len(rows) == len(card.rows)
    assert list(rows[0].keys()) == [
        "variable", "band", "lead_hours", "skill", "marker", "annotated"]
    for got, row in zip(rows, card.rows):
        assert float(got["skill"]) == row["skill"]
        assert int(got["marker"]) == row["marker"]


def test_rmse_table_matches_metric_and_csv():
    arc = _archive()
    grid = arc.grid()
    model, _ = _fsets()
    clim = build_climatology(_quiet_archive())
    rows = rmse_table(model, arc, climatology=clim)
    assert len(rows) == len(model.lead_hours) * len(arc.layout.slots())
    layout = arc.layout
    for row in rows[:6]:
        hpa = None if row["level_hpa"] == 0.0 else row["level_hpa"]
        sqs = [rmse(model.state(t0, row["lead_hours"]),
                    arc.state(t0 + timedelta(hours=row["lead_hours"])),
                    grid, row["variable"], hpa) ** 2
               for t0 in model.init_times]
        assert abs(row["rmse"] - np.sqrt(np.mean(sqs))) < 1e-10
        assert abs(row["acc"]) <= 1.0 + 1e-9
    with tempfile.TemporaryDirectory() as d:
        path = os.path.join(d, "metrics.csv")
        write_metrics_csv(rows, path)
        with open(path, newline="", encoding="utf-8") as fh:
            back = list(csv.DictReader(fh))
    assert len(back) == len(rows)
    assert float(back[0]["rmse"]) == rows[0]["rmse"]


# ---------------------------------------------------------------------------
# spectral reports


def test_spectral_report_identity_forecast():
    arc = _archive()
    inits = (arc.time_at(10), arc.time_at(14))
    perfect = _truth_fset(arc, inits, (6, 24))
    rows = spectral_report(perfect, arc, "temp", 700.0)
    assert len(rows) == 2 * (default_lmax(4, 8) + 1)
    for row in rows:
        assert abs(row["variance_ratio"] - 1.0) < 1e-9
        assert abs(row["coherence"] - 1.0) < 1e-9


def test_spectral_report_zero_forecast_and_zero_truth():
    arc = _archive()
    inits = (arc.time_at(10),)
    dead = _truth_fset(arc, inits, (6,), model_id="dead")
    vals = dead.values.copy()
    vals[:, :, 0, 2] = 0.0  # temp at 700 hPa zeroed in the forecast only
    dead = replace(dead, values=vals)
    truth_var = spectral_variance(sht_forward(
        arc.state(arc.index_of(inits[0]) + 1).field("temp", 700.0),
        arc.grid(), 3))
    assert np.all(truth_var > 0.0)
    for row in spectral_report(dead, arc, "temp", 700.0):
        assert row["variance_ratio"] == 0.0
        assert np.isnan(row["coherence"])

    # zero truth variance leaves every wavenumber undefined
    flat_vals = arc.values.copy()
    flat_vals[:, 1, 3] = 0.0  # wind at 1000 hPa zeroed in the truth
    flat = _hand_archive(flat_vals)
    fs = _truth_fset(flat, inits, (6,))
    for row in spectral_report(fs, flat, "wind", 1000.0):
        assert np.isnan(row["variance_ratio"])
        assert np.isnan(row["coherence"])


def test_spectral_report_truncated_forecast():
    # synthesize band-limited truth and a kappa<=1 truncation of it; the
    # 8-row grid keeps the analysis quadrature exact through degree 2*lmax
    grid = build_grid(8, 16)
    lmax = 3
    rng = np.random.default_rng(2)
    layout = small_layout()
    n_times = 8
    truth_vals = rng.normal(size=(n_times, 4, 4, 8, 16))
    fc_fields = np.zeros((n_times, 8, 16))
    for i in range(n_times):
        full = sht_forward(truth_vals[i, 0, 1], grid, lmax)
        truth_vals[i, 0, 1] = sht_inverse(full, grid)
        trunc = full.coeffs.copy()
        trunc[2:, :] = 0.0
        fc_fields[i] = sht_inverse(replace(full, coeffs=trunc), grid)
    truth = _hand_archive(truth_vals, layout=layout)
    inits = (truth.time_at(1), truth.time_at(4))
    fset = _truth_fset(truth, inits, (6,), model_id="trunc")
    vals = fset.values.copy()
    for i, t0 in enumerate(inits):
        vals[i, 0, 0, 1] = fc_fields[truth.index_of(t0) + 1]
    fset = replace(fset, values=vals)

    rows = spectral_report(fset, truth, "temp", 300.0, lmax=lmax,
                           band_fraction=0.0)
    by_k = {row["wavenumber"]: row for row in rows}
    for k in (0, 1):
        assert abs(by_k[k]["variance_ratio"] - 1.0) < 1e-6
        assert by_k[k]["coherence"] > 1.0 - 1e-6
    for k in (2, 3):
        assert by_k[k]["variance_ratio"] < 1e-8


def test_spectral_report_band_average_and_csv():
    arc = _archive()
    model, _ = _fsets()
    sharp = spectral_report(model, arc, "temp", 700.0, lead_hours=[6],
                            band_fraction=0.0)
    wide = spectral_report(model, arc, "temp", 700.0, lead_hours=[6],
                           band_fraction=1.0)
    raw = [row["variance_ratio"] for row in sharp]
    for row in wide:
        k = row["wavenumber"]
        lo, hi = k - k, 2 * k  # |k' - k| <= k
        expect = np.mean(raw[lo:min(hi, 3) + 1])
        assert abs(row["variance_ratio"] - expect) < 1e-12

    short = spectral_report(model, arc, "temp", 700.0, lmax=2)
    assert {row["wavenumber"] for row in short} == {0, 1, 2}
    with pytest.raises(DataGapError):
        spectral_report(model, arc, "temp", 700.0, lead_hours=[18])

    rows = spectral_report(model, arc, "temp", 700.0)
    with tempfile.TemporaryDirectory() as d:
        path = os.path.join(d, "spectra.csv")
        write_spectral_csv(rows, path)
        with open(path, newline="", encoding="utf-8") as fh:
            back = list(csv.DictReader(fh))
    assert len(back) == len(rows)
    assert list(back[0].keys()) == [
        "lead_hours", "wavenumber", "variance_ratio", "coherence"]
    assert float(back[0]["variance_ratio"]) == rows[0]["variance_ratio"]
