"""Type-I biphoton amplitude, summed intensity maps and Schmidt spectra."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.optimize import brentq

from . import sumcoords
from .errors import DomainError
from .fitting import GaussianFitResult, gaussian_fit_1d
from .params import (
    C_NM_PER_FS,
    CrystalPumpParams,
    GridSpec,
    index_ordinary,
    omega_from_wavelength,
    vacuum_wavenumber,
)

PARAXIAL_LIMIT = 0.2


def sinc(x):
    """sin(x)/x with the removable singularity set to exactly 1."""
    x = np.asarray(x, dtype=float)
    out = np.ones_like(x)
    nz = x != 0
    out[nz] = np.sin(x[nz]) / x[nz]
    return out[()] if out.ndim == 0 else out


def pump_envelope(k_x, k_y, omega, params: CrystalPumpParams):
    """Normalized Gaussian pump envelope, peak 1 at (0, 0, omega_p)."""
    k_x = np.asarray(k_x, dtype=float)
    k_y = np.asarray(k_y, dtype=float)
    w0 = params.waist_mm
    dw = np.asarray(omega, dtype=float) - params.pump_omega
    return np.exp(-(w0**2) * (k_x**2 + k_y**2) / 4.0 - dw**2 / (2.0 * params.pump_spectral_width**2))


def _ordinary_kz(k_x, k_y, omega, params):
    k = index_ordinary(2.0 * np.pi * C_NM_PER_FS / omega, params.sellmeier_o) * vacuum_wavenumber(omega)
    kt2 = k_x**2 + k_y**2
    return np.sqrt(np.where(kt2 <= k * k, k * k - kt2, np.nan)), kt2, k


def _extraordinary_kz(k_x, k_y, omega, params):
    """k_z of the extraordinary pump wave with transverse (k_x, k_y).

    The optic axis lies in the x-z plane at ``axis_angle`` from z.  The index
    ellipsoid gives (k.a)^2 / n_o^2 + (|k|^2 - (k.a)^2) / n_e^2 = k0^2, a
    quadratic in k_z; its positive root carries the exact angle between the
    plane-wave direction and the axis.
    """
    lam = 2.0 * np.pi * C_NM_PER_FS / omega
    k0 = vacuum_wavenumber(omega)
    inv_o = 1.0 / params.sellmeier_o.n_squared(lam)
    inv_e = 1.0 / params.sellmeier_e.n_squared(lam)
    d = inv_o - inv_e
    s, c = math.sin(params.axis_angle_rad), math.cos(params.axis_angle_rad)
    p = k_x * s
    kt2 = k_x**2 + k_y**2
    qa = c * c * d + inv_e
    qb = 2.0 * p * c * d
    qc = p * p * d + kt2 * inv_e - k0 * k0
    disc = qb * qb - 4.0 * qa * qc
    root = np.sqrt(np.where(disc >= 0, disc, np.nan))
    kz = np.where(qb >= 0, 2.0 * qc / (-qb - root), (-qb + root) / (2.0 * qa))
    kz = np.where(kz > 0, kz, np.nan)
    k_mag = np.sqrt(kt2 + kz * kz)
    return kz, kt2, k_mag


def _mismatch(k_s, omega_s, k_i, omega_i, params, ky_s=0.0, ky_i=0.0):
    """Phase mismatch plus a mask of arguments violating the preconditions."""
    k_s, omega_s, k_i, omega_i, ky_s, ky_i = np.broadcast_arrays(
        *(np.asarray(v, dtype=float) for v in (k_s, omega_s, k_i, omega_i, ky_s, ky_i))
    )
    kzs, kt2s, ks = _ordinary_kz(k_s, ky_s, omega_s, params)
    kzi, kt2i, ki = _ordinary_kz(k_i, ky_i, omega_i, params)
    kzp, kt2p, kp = _extraordinary_kz(k_s + k_i, ky_s + ky_i, omega_s + omega_i, params)
    lim2 = PARAXIAL_LIMIT**2
    bad = ~np.isfinite(kzs) | ~np.isfinite(kzi) | ~np.isfinite(kzp)
    bad |= (kt2s >= lim2 * ks * ks) | (kt2i >= lim2 * ki * ki) | (kt2p >= lim2 * kp * kp)
    return kzp - kzs - kzi, bad


def _check_band(params, *omegas):
    for om in omegas:
        lam = 2.0 * np.pi * C_NM_PER_FS / np.asarray(om, dtype=float)
        params.sellmeier_o.n_squared(lam)
        params.sellmeier_e.n_squared(lam)


def phase_mismatch(k_s, omega_s, k_i, omega_i, params: CrystalPumpParams, ky_s=0.0, ky_i=0.0):
    """Delta k_z [rad/mm] = k_p,z(k_s + k_i, w_s + w_i) - k_s,z - k_i,z.

    Signal and idler are ordinary waves, the pump is extraordinary.  Raises
    :class:`DomainError` for evanescent or non-paraxial arguments.
    """
    omega_s = np.asarray(omega_s, dtype=float)
    omega_i = np.asarray(omega_i, dtype=float)
    _check_band(params, omega_s, omega_i, omega_s + omega_i)
    dk, bad = _mismatch(k_s, omega_s, k_i, omega_i, params, ky_s, ky_i)
    if np.any(bad):
        raise DomainError("evanescent or non-paraxial wavevector (|k_perp| must stay below 0.2 |k|)")
    return dk[()] if dk.ndim == 0 else dk


def biphoton_amplitude(k_s, lambda_s, k_i, lambda_i, params: CrystalPumpParams, ky_s=0.0, ky_i=0.0):
    """Unnormalized Psi = A_p(k_s + k_i, w_s + w_i) * sinc(L * dk_z / 2)."""
    omega_s = omega_from_wavelength(lambda_s)
    omega_i = omega_from_wavelength(lambda_i)
    dk = phase_mismatch(k_s, omega_s, k_i, omega_i, params, ky_s, ky_i)
    ky_s = np.asarray(ky_s, dtype=float)
    ky_i = np.asarray(ky_i, dtype=float)
    env = pump_envelope(np.add(k_s, k_i), ky_s + ky_i, omega_s + omega_i, params)
    return env * sinc(params.crystal_length_mm * dk / 2.0)


def ring_wavevector(params: CrystalPumpParams, wavelength_nm: float | None = None) -> float:
    """Transverse k > 0 where Delta k_z(k, -k) vanishes at degenerate wavelengths."""
    lam = params.degenerate_wavelength_nm if wavelength_nm is None else wavelength_nm
    om = float(omega_from_wavelength(lam))

    def f(k):
        return float(phase_mismatch(k, om, -k, om, params))

    if f(0.0) >= 0:
        raise DomainError("collinear phase mismatch is non-negative: no emission ring")
    k_max = PARAXIAL_LIMIT * float(index_ordinary(lam, params.sellmeier_o) * vacuum_wavenumber(om)) * 0.999
    if f(k_max) <= 0:
        raise DomainError("no phase-matching root inside the paraxial range")
    return brentq(f, 0.0, k_max, xtol=1e-12, rtol=1e-14)


def default_grid(params: CrystalPumpParams, **kw) -> GridSpec:
    """Mirror-symmetric windows centred on the ring at degenerate wavelength."""
    return GridSpec.mirrored(ring_wavevector(params), params.degenerate_wavelength_nm, **kw)


@dataclass
class AmplitudeGrid:
    """Psi on bin centres, indexed (k_s, lambda_s, k_i, lambda_i)."""

    params: CrystalPumpParams
    grid: GridSpec
    values: np.ndarray
    norm_applied: bool = False

    def __post_init__(self):
        if self.values.shape != self.grid.shape:
            raise ValueError(f"values shape {self.values.shape} does not match grid {self.grid.shape}")

    @property
    def intensity(self) -> np.ndarray:
        return (self.values.real**2 + self.values.imag**2) if np.iscomplexobj(self.values) else self.values**2

    def as_matrix(self) -> np.ndarray:
        n = self.grid.n_bins
        return self.values.reshape(n, n)


def amplitude_grid(params: CrystalPumpParams, grid: GridSpec, normalize: bool = True) -> AmplitudeGrid:
    """Evaluate Psi at every bin centre (k_y = 0) and scale to unit L2 norm."""
    ks, ls = grid.k_axis("signal"), grid.lambda_axis("signal")
    ki, li = grid.k_axis("idler"), grid.lambda_axis("idler")
    ws, wi = omega_from_wavelength(ls), omega_from_wavelength(li)
    try:
        _check_band(params, ws, wi, ws[:, None] + wi[None, :])
    except DomainError as exc:
        raise DomainError(f"grid wavelengths: {exc}") from None

    values = np.empty(grid.shape, dtype=np.complex128)
    L = params.crystal_length_mm
    w_sum = ws[:, None, None] + wi[None, None, :]
    for j in range(grid.n_k):
        # one signal-k slab at a time: (lambda_s, k_i, lambda_i)
        k_s = ks[j]
        k_i = ki[None, :, None]
        dk, bad = _mismatch(k_s, ws[:, None, None], k_i, wi[None, None, :], params)
        if np.any(bad):
            m, l, p = np.argwhere(bad)[0]
            raise DomainError(
                f"bin (k_s={j}, lambda_s={m}, k_i={l}, lambda_i={p}) violates the "
                "paraxial/propagating precondition"
            )
        env = pump_envelope(k_s + k_i, 0.0, w_sum, params)
        values[j] = env * sinc(L * dk / 2.0)

    out = AmplitudeGrid(params, grid, values, norm_applied=False)
    if normalize:
        out = normalize_grid(out)
    return out


def normalize_grid(ag: AmplitudeGrid) -> AmplitudeGrid:
    total = float(np.sum(ag.intensity.ravel()))
    if not total > 0:
        raise ValueError("amplitude grid is identically zero")
    return AmplitudeGrid(ag.params, ag.grid, ag.values / math.sqrt(total), norm_applied=True)


def _bins(sel, n):
    idx = np.arange(n)[sel] if isinstance(sel, slice) else np.asarray(sel, dtype=np.intp).ravel()
    if idx.size == 0:
        raise ValueError("empty sub-region")
    if idx.min() < 0 or idx.max() >= n:
        raise IndexError("sub-region outside the grid axis")
    return idx


def summed_intensity_kk(ag: AmplitudeGrid, lambda_s_bins, lambda_i_bins, unity_max: bool = False):
    """|Psi|^2 summed over the wavelength sub-regions -> (n_k, n_k) over (k_s, k_i)."""
    ls = _bins(lambda_s_bins, ag.grid.n_lambda)
    li = _bins(lambda_i_bins, ag.grid.n_lambda)
    out = ag.intensity[:, ls][:, :, :, li].sum(axis=(1, 3))
    return out / out.max() if unity_max and out.max() > 0 else out


def summed_intensity_ll(ag: AmplitudeGrid, k_s_bins, k_i_bins, unity_max: bool = False):
    """|Psi|^2 summed over the wavevector sub-regions -> (n_l, n_l) over (lambda_s, lambda_i)."""
    ks = _bins(k_s_bins, ag.grid.n_k)
    ki = _bins(k_i_bins, ag.grid.n_k)
    out = ag.intensity[ks][:, :, ki].sum(axis=(0, 2))
    return out / out.max() if unity_max and out.max() > 0 else out


@dataclass(frozen=True)
class SchmidtSpectrum:
    coefficients: np.ndarray
    schmidt_number: float

    def to_dict(self, n_coefficients: int = 20) -> dict:
        return {
            "schmidt_number": float(self.schmidt_number),
            "coefficients": [float(c) for c in self.coefficients[:n_coefficients]],
            "n_coefficients": int(self.coefficients.size),
        }


def schmidt_spectrum(psi) -> SchmidtSpectrum:
    """Schmidt probabilities s_j^2 / sum s^2 of the signal-by-idler matrix of Psi.

    ``psi`` is an :class:`AmplitudeGrid`, a (k_s, l_s, k_i, l_i) tensor or an
    already reshaped matrix.
    """
    if isinstance(psi, AmplitudeGrid):
        mat = psi.as_matrix()
    else:
        psi = np.asarray(psi)
        if psi.ndim == 4:
            mat = psi.reshape(psi.shape[0] * psi.shape[1], -1)
        elif psi.ndim == 2:
            mat = psi
        else:
            raise ValueError("expected a 2-D or 4-D array")
    if np.iscomplexobj(mat) and not np.any(mat.imag):
        mat = mat.real
    if not np.any(mat):
        raise ValueError("cannot decompose an all-zero amplitude")
    s = np.linalg.svd(mat, compute_uv=False)
    p = s**2
    lam = p / p.sum()
    return SchmidtSpectrum(coefficients=lam, schmidt_number=float(1.0 / np.sum(lam**2)))


def _ring_points(params, kx, ky, om, q):
    qx, qy = np.meshgrid(q, q, indexing="xy")
    qx, qy = qx.ravel(), qy.ravel()
    L = params.crystal_length_mm
    out = np.empty((ky.size, kx.size))
    for r, yv in enumerate(ky):
        ksx = kx[:, None]
        ksy = np.full_like(ksx, yv)
        kix = -ksx + qx[None, :]
        kiy = -ksy + qy[None, :]
        dk = phase_mismatch(ksx, om, kix, om, params, ksy, kiy)
        env = pump_envelope(ksx + kix, ksy + kiy, 2.0 * om, params)
        out[r] = np.sum((env * sinc(L * dk / 2.0)) ** 2, axis=1)
    return out


def _cell_offsets(axis, n):
    if n == 1 or axis.size < 2:
        return np.zeros(1)
    step = float(np.mean(np.diff(axis)))
    return ((np.arange(n) + 0.5) / n - 0.5) * step


def ring_map(
    params: CrystalPumpParams,
    k_x,
    k_y,
    wavelength_nm: float | None = None,
    partner_halfwidth: float = 4.0,
    partner_points: int = 17,
    oversample: int = 1,
):
    """Singles intensity over a 2-D transverse grid at degenerate wavelength.

    Each photon's partner is summed over wavevectors ``-k + q`` where ``q``
    covers the pump's transverse spread (+-``partner_halfwidth`` / w0).
    With ``oversample > 1`` every cell is averaged over an
    ``oversample x oversample`` sub-grid, as a pixel integrating its area
    would; the ring is thinner along the tilt plane than across it, so point
    samples overstate the peak there.  Returns shape (len(k_y), len(k_x)).
    """
    lam = params.degenerate_wavelength_nm if wavelength_nm is None else wavelength_nm
    om = float(omega_from_wavelength(lam))
    kx = np.atleast_1d(np.asarray(k_x, dtype=float))
    ky = np.atleast_1d(np.asarray(k_y, dtype=float))
    q = np.linspace(-partner_halfwidth, partner_halfwidth, partner_points) / params.waist_mm
    ox = _cell_offsets(kx, oversample)
    oy = _cell_offsets(ky, oversample)
    fine = _ring_points(params, (kx[:, None] + ox).ravel(), (ky[:, None] + oy).ravel(), om, q)
    return fine.reshape(ky.size, oy.size, kx.size, ox.size).mean(axis=(1, 3))


@dataclass(frozen=True)
class TheoryModeSizes:
    k_fit: GaussianFitResult
    lambda_fit: GaussianFitResult

    @property
    def sigma_k_mode(self) -> float:
        return self.k_fit.sigma / math.sqrt(2.0)

    @property
    def sigma_lambda_mode(self) -> float:
        return self.lambda_fit.sigma / math.sqrt(2.0)


def sum_coordinate_intensity(ag: AmplitudeGrid):
    """|Psi|^2 projected onto (k+, lambda+) with the physical sum axes."""
    proj = sumcoords.project(ag.intensity)
    kp, lp = sumcoords.axes(ag.grid)
    return proj, kp, lp


def theory_mode_sizes(ag: AmplitudeGrid) -> TheoryModeSizes:
    """Gaussian widths of the |Psi|^2 projection along k+ (at lambda+ = 2 lambda_p)
    and along lambda+ (at k+ = 0)."""
    proj, kp, lp = sum_coordinate_intensity(ag)
    row = int(np.argmin(np.abs(lp - 2.0 * ag.params.degenerate_wavelength_nm)))
    col = int(np.argmin(np.abs(kp)))
    k_fit = gaussian_fit_1d(kp, proj[:, row])
    l_fit = gaussian_fit_1d(lp, proj[col, :])
    return TheoryModeSizes(k_fit, l_fit)
