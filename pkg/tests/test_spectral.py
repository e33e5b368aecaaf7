import numpy as np
import pytest

from finecast.errors import NonFiniteError, ShapeMismatchError
from finecast.grid import area_weighted_mean, build_grid
from finecast.spectral import (
    HarmonicCoefficients,
    LmaxMismatchError,
    UnresolvableLmaxError,
    band_average,
    cross_spectral_density,
    sht_forward,
    sht_inverse,
    spectral_coherence,
    spectral_variance,
)


def closed_form_y31(colat: np.ndarray, lon: np.ndarray) -> np.ndarray:
    # tabulated orthonormal harmonic, Condon-Shortley phase
    return (-0.125 * np.sqrt(21.0 / np.pi) * np.exp(1j * lon)
            * np.sin(colat) * (5.0 * np.cos(colat) ** 2 - 1.0))


def closed_form_y53(colat: np.ndarray, lon: np.ndarray) -> np.ndarray:
    return (-(1.0 / 32.0) * np.sqrt(385.0 / np.pi) * np.exp(3j * lon)
            * np.sin(colat) ** 3 * (9.0 * np.cos(colat) ** 2 - 1.0))


def grid_mesh(g):
    colat = np.pi / 2.0 - g.lats
    return np.meshgrid(colat, g.lons, indexing="ij")


def random_bandlimited(g, lmax: int, seed: int) -> np.ndarray:
    rng = np.random.default_rng(seed)
    table = np.zeros((lmax + 1, 2 * lmax + 1), dtype=np.complex128)
    for k in range(lmax + 1):
        table[k, lmax] = rng.standard_normal()
        for m in range(1, k + 1):
            c = rng.standard_normal() + 1j * rng.standard_normal()
            table[k, m + lmax] = c
            table[k, -m + lmax] = (-1.0) ** m * np.conj(c)
    return sht_inverse(HarmonicCoefficients(lmax=lmax, coeffs=table), g)


def test_constant_field_energy_at_zero() -> None:
    g = build_grid(16, 32)
    c = sht_forward(np.ones((g.nlat, g.nlon)), g, lmax=6)
    assert abs(c.get(0, 0)) == pytest.approx(np.sqrt(4.0 * np.pi), rel=1e-12)
    svar = spectral_variance(c)
    assert svar[0] == pytest.approx(4.0 * np.pi, rel=1e-12)
    assert np.all(svar[1:] < 1e-20)


def test_synthesis_matches_closed_form_harmonic() -> None:
    g = build_grid(16, 32)
    lmax = 7
    table = np.zeros((lmax + 1, 2 * lmax + 1), dtype=np.complex128)
    table[5, 3 + lmax] = 1.0
    table[5, -3 + lmax] = -1.0  # conjugate-symmetric partner of a unit (5, 3)
    field = sht_inverse(HarmonicCoefficients(lmax=lmax, coeffs=table), g)
    colat, lon = grid_mesh(g)
    expected = 2.0 * np.real(closed_form_y53(colat, lon))
    assert np.max(np.abs(field - expected)) < 1e-12


def test_round_trip_single_harmonic() -> None:
    g = build_grid(16, 32)
    colat, lon = grid_mesh(g)
    field = np.real(closed_form_y31(colat, lon))
    c = sht_forward(field, g, lmax=7)
    assert c.get(3, 1) == pytest.approx(0.5, abs=1e-12)
    assert c.get(3, -1) == pytest.approx(-0.5, abs=1e-12)
    back = sht_inverse(c, g)
    assert np.max(np.abs(back - field)) <= 1e-6 * np.max(np.abs(field))


def test_single_harmonic_energy_concentration() -> None:
    g = build_grid(24, 48)
    colat, lon = grid_mesh(g)
    field = np.real(closed_form_y53(colat, lon))
    svar = spectral_variance(sht_forward(field, g, lmax=11))
    assert svar[5] / svar.sum() > 0.999


def test_parseval_band_limited() -> None:
    g = build_grid(24, 48)
    field = random_bandlimited(g, lmax=8, seed=77)
    svar = spectral_variance(sht_forward(field, g, lmax=8))
    total = svar.sum()
    spatial = 4.0 * np.pi * area_weighted_mean(field * field, g)
    assert total == pytest.approx(spatial, rel=0.01)


def test_round_trip_band_limited() -> None:
    g = build_grid(20, 40)
    field = random_bandlimited(g, lmax=9, seed=5)
    back = sht_inverse(sht_forward(field, g, lmax=9), g)
    assert np.max(np.abs(back - field)) < 1e-10 * np.max(np.abs(field))


def test_conjugate_symmetry_of_real_field() -> None:
    rng = np.random.default_rng(3)
    g = build_grid(12, 24)
    c = sht_forward(rng.standard_normal((g.nlat, g.nlon)), g, lmax=9)
    for k in range(c.lmax + 1):
        for m in range(1, k + 1):
            lhs = c.get(k, -m)
            rhs = (-1.0) ** m * np.conj(c.get(k, m))
            assert lhs == pytest.approx(rhs, abs=1e-13)


def test_cross_density_properties() -> None:
    rng = np.random.default_rng(21)
    g = build_grid(12, 24)
    x = rng.standard_normal((g.nlat, g.nlon))
    y = rng.standard_normal((g.nlat, g.nlon))
    cx = sht_forward(x, g, lmax=8)
    cy = sht_forward(y, g, lmax=8)
    assert np.allclose(cross_spectral_density(cx, cy),
                       np.conj(cross_spectral_density(cy, cx)), atol=1e-14)
    cax = sht_forward(3.0 * x, g, lmax=8)
    assert np.allclose(cross_spectral_density(cax, cy),
                       3.0 * cross_spectral_density(cx, cy), rtol=1e-12, atol=1e-14)


def test_coherence_exact_identities() -> None:
    rng = np.random.default_rng(7)
    g = build_grid(12, 24)
    x = rng.standard_normal((g.nlat, g.nlon))
    cx = sht_forward(x, g, lmax=8)
    c2x = sht_forward(2.0 * x, g, lmax=8)
    svar_x = spectral_variance(cx)
    svar_2x = spectral_variance(c2x)
    assert np.array_equal(svar_2x, 4.0 * svar_x)
    coh_self = spectral_coherence(cx, cx)
    coh_scaled = spectral_coherence(cx, c2x)
    ok = svar_x > 0.0
    assert np.all(coh_self[ok] == 1.0)
    assert np.all(coh_scaled[ok] == 1.0)


def test_coherence_bounds_and_masking() -> None:
    rng = np.random.default_rng(8)
    g = build_grid(16, 32)
    cx = sht_forward(rng.standard_normal((g.nlat, g.nlon)), g, lmax=7)
    cy = sht_forward(rng.standard_normal((g.nlat, g.nlon)), g, lmax=7)
    coh = spectral_coherence(cx, cy)
    finite = coh[np.isfinite(coh)]
    assert np.all(finite >= 0.0) and np.all(finite <= 1.0)
    # a table with energy only at k = 3 is undefined elsewhere
    table = np.zeros((8, 15), dtype=np.complex128)
    table[3, 1 + 7] = 1.0
    table[3, -1 + 7] = -1.0
    cz = HarmonicCoefficients(lmax=7, coeffs=table)
    coh_z = spectral_coherence(cz, cy)
    assert np.isnan(coh_z[0]) and np.isnan(coh_z[5])
    assert np.isfinite(coh_z[3])


def test_rotation_invariance() -> None:
    rng = np.random.default_rng(9)
    g = build_grid(12, 24)
    x = rng.standard_normal((g.nlat, g.nlon))
    y = rng.standard_normal((g.nlat, g.nlon))
    cx, cy = sht_forward(x, g, 8), sht_forward(y, g, 8)
    xr, yr = np.roll(x, 5, axis=1), np.roll(y, 5, axis=1)
    cxr, cyr = sht_forward(xr, g, 8), sht_forward(yr, g, 8)
    assert np.allclose(spectral_variance(cxr), spectral_variance(cx), rtol=1e-10, atol=1e-12)
    assert np.allclose(spectral_coherence(cxr, cyr), spectral_coherence(cx, cy),
                       rtol=1e-10, atol=1e-12)


def test_band_average_windows() -> None:
    values = np.arange(40, dtype=float)
    assert np.array_equal(band_average(values, 0.0), values)
    # at k = 32 with fraction 0.1 the window is 29..35 inclusive
    out = band_average(values, 0.1)
    assert out[32] == pytest.approx(np.mean(np.arange(29, 36)))
    indicator = np.zeros(40)
    indicator[29] = 1.0
    assert band_average(indicator, 0.1)[32] > 0.0
    indicator2 = np.zeros(40)
    indicator2[28] = 1.0
    assert band_average(indicator2, 0.1)[32] == 0.0
    with_nan = values.copy()
    with_nan[30] = np.nan
    out2 = band_average(with_nan, 0.1)
    assert out2[32] == pytest.approx(np.mean([29, 31, 32, 33, 34, 35]))


def test_spectral_errors() -> None:
    g = build_grid(8, 16)
    field = np.zeros((g.nlat, g.nlon))
    with pytest.raises(UnresolvableLmaxError):
        sht_forward(field, g, lmax=8)  # nlat - 1 = 7
    with pytest.raises(UnresolvableLmaxError):
        sht_forward(np.zeros((16, 16)), build_grid(16, 16), lmax=9)  # nlon too small
    with pytest.raises(ShapeMismatchError):
        sht_forward(np.zeros((8, 15)), g, lmax=4)
    bad = field.copy()
    bad[0, 0] = np.inf
    with pytest.raises(NonFiniteError):
        sht_forward(bad, g, lmax=4)
    c1 = sht_forward(field, g, lmax=4)
    c2 = sht_forward(field, g, lmax=5)
    with pytest.raises(LmaxMismatchError):
        cross_spectral_density(c1, c2)
    with pytest.raises(IndexError):
        c1.get(3, 4)
