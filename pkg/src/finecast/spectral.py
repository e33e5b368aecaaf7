"""Spherical-harmonic analysis on equiangular grids.

Convention: orthonormal complex harmonics with Condon-Shortley phase,

    Y_k^m(colat, lon) = Pbar_k^m(cos colat) * exp(i m lon) / sqrt(2 pi),

where Pbar is the associated Legendre function normalized so that
integral of Pbar^2 over [-1, 1] equals 1. A constant field of value 1
therefore transforms to a single coefficient of magnitude sqrt(4 pi)
at total wavenumber 0.

The forward transform runs an FFT over longitude and a quadrature sum
over latitude rows. The latitude weights are solved once per row count
so that Legendre polynomials up to degree nlat - 1 integrate exactly;
on the cell-centered equiangular rows this yields strictly positive
weights. Band-limited fields round-trip through forward/inverse to
machine precision when nlat >= 2 * lmax + 1 and nlon > 2 * lmax.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import NonFiniteError, ShapeMismatchError
from .grid import Grid

_SQRT_2PI = np.sqrt(2.0 * np.pi)


class UnresolvableLmaxError(ValueError):
    pass


class LmaxMismatchError(ValueError):
    pass


@dataclass(frozen=True)
class HarmonicCoefficients:
    """Triangular table of complex coefficients.

    coeffs has shape (lmax + 1, 2 * lmax + 1); entry [k, m + lmax] holds
    the coefficient for total wavenumber k and zonal wavenumber m.
    Entries with |m| > k are identically zero.
    """

    lmax: int
    coeffs: np.ndarray

    def get(self, k: int, m: int) -> complex:
        if not (0 <= k <= self.lmax and abs(m) <= k):
            raise IndexError(f"coefficient ({k}, {m}) outside triangle with lmax={self.lmax}")
        return complex(self.coeffs[k, m + self.lmax])


def _legendre_quadrature_weights(x: np.ndarray) -> np.ndarray:
    """Weights on nodes x that integrate P_0..P_{n-1} exactly over [-1, 1]."""
    n = x.size
    p = np.zeros((n, n))
    p[0] = 1.0
    if n > 1:
        p[1] = x
    for l in range(1, n - 1):
        p[l + 1] = ((2 * l + 1) * x * p[l] - l * p[l - 1]) / (l + 1)
    rhs = np.zeros(n)
    rhs[0] = 2.0
    return np.linalg.solve(p, rhs)


_WEIGHT_CACHE: dict[int, np.ndarray] = {}


def _quadrature_weights(grid: Grid) -> np.ndarray:
    w = _WEIGHT_CACHE.get(grid.nlat)
    if w is None:
        w = _legendre_quadrature_weights(np.sin(grid.lats))
        _WEIGHT_CACHE[grid.nlat] = w
    return w


def _normalized_plm(lmax: int, x: np.ndarray) -> np.ndarray:
    """Associated Legendre table Pbar[k, m, i] on nodes x, unit L2 norm.

    Includes the Condon-Shortley phase. Entries with m > k stay zero.
    Recurrences: sectoral seed then upward in degree at fixed order.
    """
    n = x.size
    u = np.sqrt(np.clip(1.0 - x * x, 0.0, None))
    p = np.zeros((lmax + 1, lmax + 1, n))
    p[0, 0] = 1.0 / np.sqrt(2.0)
    for m in range(1, lmax + 1):
        p[m, m] = -np.sqrt((2.0 * m + 1.0) / (2.0 * m)) * u * p[m - 1, m - 1]
    for m in range(lmax):
        p[m + 1, m] = np.sqrt(2.0 * m + 3.0) * x * p[m, m]
    for m in range(lmax + 1):
        for l in range(m + 2, lmax + 1):
            a = np.sqrt((2.0 * l - 1.0) * (2.0 * l + 1.0) / ((l - m) * (l + m)))
            b = np.sqrt((2.0 * l + 1.0) * (l + m - 1.0) * (l - m - 1.0)
                        / ((l - m) * (l + m) * (2.0 * l - 3.0)))
            p[l, m] = a * x * p[l - 1, m] - b * p[l - 2, m]
    return p


_PLM_CACHE: dict[tuple[int, int], np.ndarray] = {}


def _plm_for_grid(grid: Grid, lmax: int) -> np.ndarray:
    key = (grid.nlat, lmax)
    tab = _PLM_CACHE.get(key)
    if tab is None:
        tab = _normalized_plm(lmax, np.sin(grid.lats))
        _PLM_CACHE[key] = tab
    return tab


def _check_resolvable(grid: Grid, lmax: int) -> None:
    if lmax < 0:
        raise UnresolvableLmaxError(f"lmax must be non-negative, got {lmax}")
    if lmax > grid.nlat - 1:
        raise UnresolvableLmaxError(
            f"lmax={lmax} exceeds nlat-1={grid.nlat - 1}: latitude rows cannot resolve it")
    if 2 * lmax >= grid.nlon:
        raise UnresolvableLmaxError(
            f"lmax={lmax} needs nlon > 2*lmax, got nlon={grid.nlon}")


def sht_forward(field: np.ndarray, grid: Grid, lmax: int) -> HarmonicCoefficients:
    """Project a real field onto orthonormal spherical harmonics up to lmax."""
    _check_resolvable(grid, lmax)
    field = np.asarray(field, dtype=np.float64)
    if field.shape != (grid.nlat, grid.nlon):
        raise ShapeMismatchError(
            f"field shape {field.shape} does not match grid ({grid.nlat}, {grid.nlon})")
    if not np.all(np.isfinite(field)):
        raise NonFiniteError("non-finite values in sht_forward input")

    nlon = grid.nlon
    wq = _quadrature_weights(grid)
    plm = _plm_for_grid(grid, lmax)
    fft_rows = np.fft.fft(field, axis=1)

    ms = np.arange(-lmax, lmax + 1)
    # lons start at half a cell: fold the phase offset of the first center in
    phase = grid.dlon * np.exp(-1j * ms * grid.lons[0])
    fourier = fft_rows[:, ms % nlon] * phase[None, :]

    coeffs = np.zeros((lmax + 1, 2 * lmax + 1), dtype=np.complex128)
    for m in ms:
        am = abs(m)
        sign = -1.0 if (m < 0 and am % 2 == 1) else 1.0
        col = fourier[:, m + lmax] * wq
        coeffs[am:, m + lmax] = sign / _SQRT_2PI * (plm[am:, am, :] @ col)
    return HarmonicCoefficients(lmax=lmax, coeffs=coeffs)


def sht_inverse(coeffs: HarmonicCoefficients, grid: Grid) -> np.ndarray:
    """Synthesize the real field for a conjugate-symmetric coefficient table."""
    lmax = coeffs.lmax
    _check_resolvable(grid, lmax)
    if coeffs.coeffs.shape != (lmax + 1, 2 * lmax + 1):
        raise ShapeMismatchError(f"coefficient table shape {coeffs.coeffs.shape} inconsistent")
    if not np.all(np.isfinite(coeffs.coeffs.view(np.float64))):
        raise NonFiniteError("non-finite coefficients in sht_inverse input")

    plm = _plm_for_grid(grid, lmax)
    out = np.zeros((grid.nlat, grid.nlon), dtype=np.complex128)
    for m in range(-lmax, lmax + 1):
        am = abs(m)
        sign = -1.0 if (m < 0 and am % 2 == 1) else 1.0
        # latitude profile summed over total wavenumber
        prof = sign * (coeffs.coeffs[am:, m + lmax] @ plm[am:, am, :])
        out += np.outer(prof, np.exp(1j * m * grid.lons)) / _SQRT_2PI
    return np.real(out)


def cross_spectral_density(cx: HarmonicCoefficients,
                           cy: HarmonicCoefficients) -> np.ndarray:
    """Per-total-wavenumber cross density: sum over m of cx * conj(cy)."""
    if cx.lmax != cy.lmax:
        raise LmaxMismatchError(f"lmax mismatch: {cx.lmax} vs {cy.lmax}")
    return np.sum(cx.coeffs * np.conj(cy.coeffs), axis=1)


def spectral_variance(cx: HarmonicCoefficients) -> np.ndarray:
    """Per-wavenumber variance |CROSS(x, x)|; real and non-negative."""
    return np.abs(cross_spectral_density(cx, cx))


def spectral_coherence(cx: HarmonicCoefficients,
                       cy: HarmonicCoefficients) -> np.ndarray:
    """Per-wavenumber |CROSS(x,y)|^2 / (SVAR(x) * SVAR(y)), in [0, 1].

    Wavenumbers where either variance vanishes are undefined and returned
    as NaN rather than clamped to 0 or 1.
    """
    cross = cross_spectral_density(cx, cy)
    sx = spectral_variance(cx)
    sy = spectral_variance(cy)
    denom = sx * sy
    out = np.full(cross.shape, np.nan)
    ok = denom > 0.0
    out[ok] = np.abs(cross[ok]) ** 2 / denom[ok]
    return out


def band_average(values: np.ndarray, fraction: float) -> np.ndarray:
    """Average values[k'] over the window |k' - k| <= fraction * k, per k.

    fraction 0 reproduces the input. NaN entries are skipped; a window
    with no finite entries yields NaN.
    """
    values = np.asarray(values, dtype=np.float64)
    if values.ndim != 1:
        raise ShapeMismatchError("band_average expects a 1-d per-wavenumber array")
    if fraction < 0.0:
        raise ValueError(f"fraction must be non-negative, got {fraction}")
    n = values.size
    out = np.empty(n)
    ks = np.arange(n)
    for k in range(n):
        window = values[np.abs(ks - k) <= fraction * k]
        finite = window[np.isfinite(window)]
        out[k] = finite.mean() if finite.size else np.nan
    return out
