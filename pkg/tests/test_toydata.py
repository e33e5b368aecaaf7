import csv
from dataclasses import replace
from datetime import datetime

import numpy as np
import pytest

from finecast.errors import (
    DataGapError,
    FormatError,
    LayoutMismatchError,
    SpaceMismatchError,
)
from finecast.toydata import (
    CADENCE,
    AnalysisArchive,
    DegenerateFieldError,
    FieldState,
    NormalizationStats,
    UnstableParameterError,
    VariableLayout,
    VariableSpec,
    compare_norm_stats,
    compute_normalization,
    default_system_a,
    default_system_b,
    denormalize,
    eligible_window_times,
    generate_archive,
    normalize,
    sample_window,
    write_norm_comparison_csv,
)

T0 = datetime(2000, 1, 1)


def tiny_layout() -> VariableLayout:
    return VariableLayout(
        variables=(VariableSpec("a3", "3d", 1.0), VariableSpec("s1", "surface", 0.1)),
        levels_hpa=(300.0, 700.0, 1000.0),
    )


def tiny_archive(n_times: int = 9, seed: int = 0) -> AnalysisArchive:
    layout = tiny_layout()
    rng = np.random.default_rng(seed)
    values = rng.normal(size=(n_times, layout.n_vars, layout.n_levels, 4, 8))
    values[0, 1, 1:] = 0.0  # invalid slots carry nothing
    values[1, 0, 0] = 0.0
    return AnalysisArchive(system_id="tiny", layout=layout, nlat=4, nlon=8,
                           start=T0, values=values.astype(np.float32),
                           seed=seed, spec_digest="none")


def test_generation_deterministic() -> None:
    spec = default_system_a(nlat=4, nlon=8)
    end = datetime(2000, 1, 11)
    one = generate_archive(spec, T0, end, seed=42)
    two = generate_archive(spec, T0, end, seed=42)
    assert np.array_equal(one.values, two.values)
    other = generate_archive(spec, T0, end, seed=43)
    assert not np.array_equal(one.values, other.values)


def test_quiet_system_stays_at_equilibrium() -> None:
    spec = default_system_a(nlat=4, nlon=8)
    zeros = np.zeros_like(spec.base)
    quiet = replace(spec, noise_amp=zeros, seasonal_amp=zeros,
                    stationary_amp=zeros, diurnal_amp=zeros, couple=zeros)
    arch = generate_archive(quiet, T0, datetime(2000, 1, 3), seed=1)
    for vi, li in spec.layout.slots():
        assert np.all(arch.values[:, vi, li] == np.float32(spec.base[vi, li]))


def test_system_b_shift_matches_spec_parameters() -> None:
    # sample-statistics oracle over a one-year pair of archives
    spec_a = default_system_a()
    spec_b = default_system_b()
    end = datetime(2001, 1, 1)
    sa = compute_normalization(generate_archive(spec_a, T0, end, seed=11))
    sb = compute_normalization(generate_archive(spec_b, T0, end, seed=22))
    hi = spec_a.layout.var_index("humid")
    for li in (1, 2):
        measured_offset = sb.mean[hi, li] - sa.mean[hi, li]
        assert measured_offset == pytest.approx(spec_b.mean_offset[hi, li], rel=0.35)
        assert sb.std[hi, li] / sa.std[hi, li] == pytest.approx(6.0, rel=0.2)
        assert sb.dstd[hi, li] / sa.dstd[hi, li] == pytest.approx(6.0, rel=0.2)
    # humidity dynamics identical across systems below the shifted levels
    assert sb.std[hi, 5] / sa.std[hi, 5] == pytest.approx(1.0, abs=0.15)


def test_archive_round_trip(tmp_path) -> None:
    spec = default_system_a(nlat=4, nlon=8)
    arch = generate_archive(spec, T0, datetime(2000, 1, 6), seed=7,
                            provenance={"config_digest": "abc"})
    path = str(tmp_path / "a.arc")
    arch.save(path)
    back = AnalysisArchive.load(path)
    assert np.array_equal(back.values, arch.values)
    assert back.start == arch.start and back.n_times == arch.n_times
    assert back.seed == 7 and back.spec_digest == spec.digest
    assert back.provenance == {"config_digest": "abc"}
    assert back.layout.digest == spec.layout.digest
    with open(path, "r+b") as fh:
        fh.write(b"XXXXXXXX")
    with pytest.raises(FormatError):
        AnalysisArchive.load(path)


def test_state_and_slice_access() -> None:
    arch = tiny_archive(n_times=9)
    st = arch.state(datetime(2000, 1, 1, 12))
    assert st.time == datetime(2000, 1, 1, 12)
    assert st.values.dtype == np.float64
    assert np.array_equal(st.values, arch.values[2].astype(np.float64))
    sl = arch.slice(datetime(2000, 1, 1, 6), datetime(2000, 1, 2, 0))
    assert sl.n_times == 3
    assert sl.state(0).time == datetime(2000, 1, 1, 6)
    with pytest.raises(DataGapError):
        arch.state(datetime(1999, 12, 31))
    with pytest.raises(DataGapError):
        arch.state(datetime(2000, 1, 1, 3))  # off-cadence


def test_normalization_matches_direct_loops() -> None:
    arch = tiny_archive(n_times=8)
    stats = compute_normalization(arch)
    data = arch.values.astype(np.float64)
    for vi, li in arch.layout.slots():
        flat = data[:, vi, li].ravel()
        assert stats.mean[vi, li] == pytest.approx(flat.mean(), rel=1e-12)
        assert stats.std[vi, li] == pytest.approx(flat.std(), rel=1e-12)
        diffs = (data[1:, vi, li] - data[:-1, vi, li]).ravel()
        assert stats.dstd[vi, li] == pytest.approx(diffs.std(), rel=1e-12)
    # invalid slots are inert
    mask = arch.layout.valid_mask()
    assert np.all(stats.std[~mask] == 1.0) and np.all(stats.mean[~mask] == 0.0)


def test_normalization_degenerate_field() -> None:
    arch = tiny_archive(n_times=6)
    frozen = arch.values.copy()
    frozen[:, 0, 1] = 5.0
    with pytest.raises(DegenerateFieldError):
        compute_normalization(replace(arch, values=frozen))


def test_whole_year_truncation() -> None:
    spec = default_system_a(nlat=4, nlon=8)
    arch = generate_archive(spec, T0, datetime(2001, 7, 1), seed=3)
    stats = compute_normalization(arch, truncate_whole_years=True)
    assert stats.truncated
    assert stats.period_end == datetime(2001, 1, 1)
    explicit = compute_normalization(arch, period=(T0, datetime(2001, 1, 1)))
    assert np.array_equal(stats.mean, explicit.mean)
    assert np.array_equal(stats.dstd, explicit.dstd)
    short = arch.slice(T0, datetime(2000, 3, 1))
    with pytest.raises(ValueError):
        compute_normalization(short, truncate_whole_years=True)


def test_normalize_round_trip() -> None:
    arch = tiny_archive()
    stats = compute_normalization(arch)
    st = arch.state(3)
    z = normalize(st, stats)
    assert z.space == "normalized"
    back = denormalize(z, stats)
    assert np.max(np.abs(back.values - st.values)) < 1e-12 * max(1.0, np.max(np.abs(st.values)))
    with pytest.raises(SpaceMismatchError):
        normalize(z, stats)
    with pytest.raises(SpaceMismatchError):
        denormalize(st, stats)


def test_stats_round_trip_and_digest(tmp_path) -> None:
    arch = tiny_archive()
    stats = compute_normalization(arch)
    path = str(tmp_path / "stats.json")
    stats.save(path)
    back = NormalizationStats.load(path)
    assert back.digest == stats.digest
    assert np.array_equal(back.mean, stats.mean)
    assert back.period_start == stats.period_start


def test_compare_norm_stats_identity_and_csv(tmp_path) -> None:
    arch = tiny_archive()
    stats = compute_normalization(arch)
    rows = compare_norm_stats(stats, stats)
    assert len(rows) == len(arch.layout.slots())
    for row in rows:
        assert row["mean_zscore"] == 0.0
        assert row["std_ratio"] == 1.0
        assert row["dstd_ratio"] == 1.0
    surface_rows = [r for r in rows if r["variable"] == "s1"]
    assert surface_rows[0]["level_hpa"] == 0.0
    path = str(tmp_path / "cmp.csv")
    write_norm_comparison_csv(rows, path)
    with open(path, newline="") as fh:
        parsed = list(csv.DictReader(fh))
    assert parsed[0]["variable"] == "a3"
    assert float(parsed[0]["std_ratio"]) == 1.0
    other = compute_normalization(tiny_archive(seed=5))
    different_layout = NormalizationStats(
        layout=VariableLayout(variables=(VariableSpec("x", "surface", 1.0),),
                              levels_hpa=(1000.0,)),
        mean=np.zeros((1, 2)), std=np.ones((1, 2)), dstd=np.ones((1, 2)),
        period_start=T0, period_end=datetime(2000, 1, 2))
    with pytest.raises(LayoutMismatchError):
        compare_norm_stats(other, different_layout)


def test_sample_window() -> None:
    arch = tiny_archive(n_times=9)
    w = sample_window(arch, datetime(2000, 1, 1, 12), n_steps=3)
    assert w.inputs[0].time == datetime(2000, 1, 1, 6)
    assert w.inputs[1].time == datetime(2000, 1, 1, 12)
    assert [t.time for t in w.targets] == [
        datetime(2000, 1, 1, 18), datetime(2000, 1, 2, 0), datetime(2000, 1, 2, 6)]
    with pytest.raises(DataGapError, match="1999-12-31T18"):
        sample_window(arch, datetime(2000, 1, 1, 0), n_steps=1)
    with pytest.raises(DataGapError, match="2000-01-03T06"):
        sample_window(arch, datetime(2000, 1, 2, 12), n_steps=3)
    times = eligible_window_times(arch, n_steps=3)
    assert times[0] == datetime(2000, 1, 1, 6)
    assert times[-1] == arch.time_at(arch.n_times - 4)


def test_unstable_parameters_rejected() -> None:
    spec = default_system_a(nlat=4, nlon=8)
    with pytest.raises(UnstableParameterError):
        replace(spec, diffuse=np.full_like(spec.diffuse, 0.3))
    with pytest.raises(UnstableParameterError):
        replace(spec, relax=np.full_like(spec.relax, 2.5))
    with pytest.raises(UnstableParameterError):
        replace(spec, std_scale=np.zeros_like(spec.std_scale))


def test_field_state_accessors() -> None:
    arch = tiny_archive()
    st = arch.state(0)
    assert np.array_equal(st.field("a3", 700.0), st.values[0, 2])
    assert np.array_equal(st.field("s1"), st.values[1, 0])
    with pytest.raises(KeyError):
        st.field("a3", 123.0)
    with pytest.raises(ValueError):
        FieldState(values=st.values, time=st.time, space="bogus", layout=st.layout)
