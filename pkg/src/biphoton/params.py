"""Physical parameters of the down-conversion source and the sampling grid.

Units used throughout the package:

* wavelengths in nm, angular frequencies in rad/fs
* transverse wavevectors in rad/mm
* crystal length in mm, pump waist in um
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, replace

import numpy as np

from .errors import DomainError

C_NM_PER_FS = 299.792458
NM_PER_MM = 1.0e6


def omega_from_wavelength(wavelength_nm):
    return 2.0 * np.pi * C_NM_PER_FS / np.asarray(wavelength_nm, dtype=float)


def wavelength_from_omega(omega):
    return 2.0 * np.pi * C_NM_PER_FS / np.asarray(omega, dtype=float)


def vacuum_wavenumber(omega):
    """|k| in vacuum [rad/mm] for angular frequency [rad/fs]."""
    return np.asarray(omega, dtype=float) / C_NM_PER_FS * NM_PER_MM


@dataclass(frozen=True)
class SellmeierCoefficients:
    """n^2 = a + b / (lam^2 - c) - d * lam^2 with lam in um."""

    a: float
    b: float
    c: float
    d: float
    band_nm: tuple[float, float] = (200.0, 1600.0)

    def n_squared(self, wavelength_nm):
        lam = np.asarray(wavelength_nm, dtype=float)
        if np.any(~np.isfinite(lam)) or np.any(lam < self.band_nm[0]) or np.any(lam > self.band_nm[1]):
            raise DomainError(
                f"wavelength outside Sellmeier band {self.band_nm[0]:g}-{self.band_nm[1]:g} nm"
            )
        l2 = (lam * 1.0e-3) ** 2
        return self.a + self.b / (l2 - self.c) - self.d * l2


# beta-BaB2O4, K. Kato, IEEE J. Quantum Electron. 22, 1013 (1986).
# Reproduces the 29.2 deg type-I cut for 800 -> 400 nm doubling.
BBO_ORDINARY = SellmeierCoefficients(a=2.7359, b=0.01878, c=0.01822, d=0.01354)
BBO_EXTRAORDINARY = SellmeierCoefficients(a=2.3753, b=0.01224, c=0.01667, d=0.01516)


def shg_pump_bandwidth(
    fundamental_fwhm_fs: float = 70.0,
    fundamental_wavelength_nm: float = 800.0,
    shg_length_mm: float = 0.5,
    shg_cut_angle_deg: float = 29.2,
    sellmeier_o: SellmeierCoefficients = BBO_ORDINARY,
    sellmeier_e: SellmeierCoefficients = BBO_EXTRAORDINARY,
) -> float:
    """Spectral amplitude std [rad/fs] of a frequency-doubled transform-limited pulse.

    The ideal doubled field is E(t)^2 of the fundamental.  Its spectrum is then
    filtered by the doubling crystal's amplitude acceptance sinc(dL * dw / 2),
    dL being the group-delay walk-off between the fundamental (o) and the second
    harmonic (e).  The sinc is replaced by the Gaussian with the same curvature
    at its peak, exp(-dw^2 / (2 * 12 / dL^2)).
    """
    field_std_t = fundamental_fwhm_fs / (2.0 * math.sqrt(math.log(2.0)))
    ideal = math.sqrt(2.0) / field_std_t
    if shg_length_mm <= 0:
        return ideal

    theta = math.radians(shg_cut_angle_deg)
    lam_f = fundamental_wavelength_nm
    lam_sh = lam_f / 2.0

    def group_index(n_of, lam):
        h = 1.0e-3
        return n_of(lam) - lam * (n_of(lam + h) - n_of(lam - h)) / (2.0 * h)

    def n_o(lam):
        return float(np.sqrt(sellmeier_o.n_squared(lam)))

    def n_e_theta(lam):
        return float(index_extraordinary_effective(lam, theta, sellmeier_o, sellmeier_e))

    walkoff_fs = (group_index(n_e_theta, lam_sh) - group_index(n_o, lam_f)) / C_NM_PER_FS * NM_PER_MM
    walkoff_fs = abs(walkoff_fs) * shg_length_mm
    acceptance = math.sqrt(12.0) / walkoff_fs
    return 1.0 / math.sqrt(1.0 / ideal**2 + 1.0 / acceptance**2)


def index_ordinary(wavelength_nm, coeffs: SellmeierCoefficients = BBO_ORDINARY):
    """Ordinary refractive index at ``wavelength_nm``."""
    return np.sqrt(coeffs.n_squared(wavelength_nm))


def index_extraordinary_effective(
    wavelength_nm,
    theta,
    coeffs_o: SellmeierCoefficients = BBO_ORDINARY,
    coeffs_e: SellmeierCoefficients = BBO_EXTRAORDINARY,
):
    """Index of the extraordinary wave travelling at ``theta`` [rad] to the optic axis."""
    theta = np.asarray(theta, dtype=float)
    if np.any(theta < 0) or np.any(theta > np.pi / 2 + 1e-15):
        raise DomainError("angle to optic axis must lie in [0, pi/2]")
    inv_o = 1.0 / coeffs_o.n_squared(wavelength_nm)
    inv_e = 1.0 / coeffs_e.n_squared(wavelength_nm)
    c2 = np.cos(theta) ** 2
    s2 = np.sin(theta) ** 2
    out = 1.0 / np.sqrt(c2 * inv_o + s2 * inv_e)
    # exact endpoints, no rounding through the ellipsoid
    out = np.where(theta == 0.0, np.sqrt(1.0 / inv_o), out)
    out = np.where(theta == np.pi / 2, np.sqrt(1.0 / inv_e), out)
    return out[()] if out.ndim == 0 else out


DEFAULT_PUMP_SPECTRAL_WIDTH = shg_pump_bandwidth()


@dataclass(frozen=True)
class CrystalPumpParams:
    crystal_length_mm: float = 2.0
    axis_angle_rad: float = math.radians(31.95)
    pump_wavelength_nm: float = 400.0
    pump_waist_um: float = 70.0
    pump_spectral_width: float = DEFAULT_PUMP_SPECTRAL_WIDTH
    sellmeier_o: SellmeierCoefficients = BBO_ORDINARY
    sellmeier_e: SellmeierCoefficients = BBO_EXTRAORDINARY

    def __post_init__(self):
        if not self.crystal_length_mm > 0:
            raise ValueError("crystal_length_mm must be > 0")
        if not 0 < self.axis_angle_rad < math.pi / 2:
            raise ValueError("axis_angle_rad must lie in (0, pi/2)")
        if not self.pump_wavelength_nm > 0:
            raise ValueError("pump_wavelength_nm must be > 0")
        if not self.pump_waist_um > 0:
            raise ValueError("pump_waist_um must be > 0")
        if not self.pump_spectral_width > 0:
            raise ValueError("pump_spectral_width must be > 0")
        band = np.linspace(350.0, 900.0, 56)
        for coeffs in (self.sellmeier_o, self.sellmeier_e):
            if np.any(np.sqrt(coeffs.n_squared(band)) <= 1.0):
                raise ValueError("Sellmeier set yields n <= 1 inside 350-900 nm")

    @property
    def pump_omega(self) -> float:
        return float(omega_from_wavelength(self.pump_wavelength_nm))

    @property
    def waist_mm(self) -> float:
        return self.pump_waist_um * 1.0e-3

    @property
    def degenerate_wavelength_nm(self) -> float:
        return 2.0 * self.pump_wavelength_nm

    def to_dict(self) -> dict:
        d = asdict(self)
        d["sellmeier_o"]["band_nm"] = list(d["sellmeier_o"]["band_nm"])
        d["sellmeier_e"]["band_nm"] = list(d["sellmeier_e"]["band_nm"])
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "CrystalPumpParams":
        d = dict(d)
        for key in ("sellmeier_o", "sellmeier_e"):
            if key in d and isinstance(d[key], dict):
                s = dict(d[key])
                s["band_nm"] = tuple(s.get("band_nm", (200.0, 1600.0)))
                d[key] = SellmeierCoefficients(**s)
        return cls(**d)

    def with_(self, **changes) -> "CrystalPumpParams":
        return replace(self, **changes)


K_PER_PX = 5.95
LAMBDA_PER_PX = 0.127


@dataclass(frozen=True)
class GridSpec:
    """Per-arm window of ``n_k`` wavevector by ``n_lambda`` wavelength bins.

    Both arms share bin counts and steps; ``signal_center``/``idler_center``
    are the (k, lambda) coordinates of the window centres.  Bin ``j`` of an
    axis sits at ``center + (j - (n - 1) / 2) * step``.
    """

    n_k: int = 70
    n_lambda: int = 40
    k_step: float = K_PER_PX
    lambda_step: float = LAMBDA_PER_PX
    signal_center: tuple[float, float] = (0.0, 800.0)
    idler_center: tuple[float, float] = (0.0, 800.0)

    def __post_init__(self):
        if self.n_k < 1 or self.n_lambda < 1:
            raise ValueError("grid needs at least one bin per axis")
        if not (self.k_step > 0 and self.lambda_step > 0):
            raise ValueError("grid ranges must be strictly ordered (positive steps)")
        object.__setattr__(self, "signal_center", tuple(float(v) for v in self.signal_center))
        object.__setattr__(self, "idler_center", tuple(float(v) for v in self.idler_center))

    @classmethod
    def mirrored(cls, k_center: float, lambda_center: float = 800.0, **kw) -> "GridSpec":
        """Signal window at +k_center, idler window at -k_center."""
        return cls(signal_center=(k_center, lambda_center), idler_center=(-k_center, lambda_center), **kw)

    @property
    def n_bins(self) -> int:
        return self.n_k * self.n_lambda

    @property
    def shape(self) -> tuple[int, int, int, int]:
        return (self.n_k, self.n_lambda, self.n_k, self.n_lambda)

    @property
    def k_span(self) -> float:
        return self.n_k * self.k_step

    @property
    def lambda_span(self) -> float:
        return self.n_lambda * self.lambda_step

    def _center(self, arm: str) -> tuple[float, float]:
        if arm == "signal":
            return self.signal_center
        if arm == "idler":
            return self.idler_center
        raise ValueError(f"unknown arm {arm!r}")

    def k_axis(self, arm: str) -> np.ndarray:
        kc = self._center(arm)[0]
        return kc + (np.arange(self.n_k) - (self.n_k - 1) / 2.0) * self.k_step

    def lambda_axis(self, arm: str) -> np.ndarray:
        lc = self._center(arm)[1]
        return lc + (np.arange(self.n_lambda) - (self.n_lambda - 1) / 2.0) * self.lambda_step

    def k_range(self, arm: str) -> tuple[float, float]:
        kc = self._center(arm)[0]
        return kc - self.k_span / 2, kc + self.k_span / 2

    def lambda_range(self, arm: str) -> tuple[float, float]:
        lc = self._center(arm)[1]
        return lc - self.lambda_span / 2, lc + self.lambda_span / 2

    def is_mirror_symmetric(self, tol: float = 1e-9) -> bool:
        (ks, ls), (ki, li) = self.signal_center, self.idler_center
        return abs(ks + ki) <= tol * max(1.0, abs(ks)) and abs(ls - li) <= tol * ls

    def bin_index(self, k_bin, lambda_bin):
        return np.asarray(k_bin) * self.n_lambda + np.asarray(lambda_bin)

    def split_bin(self, index):
        index = np.asarray(index)
        return index // self.n_lambda, index % self.n_lambda

    def refined(self, factor: int) -> "GridSpec":
        """Same window sampled ``factor`` times finer along every axis."""
        return replace(
            self,
            n_k=self.n_k * factor,
            n_lambda=self.n_lambda * factor,
            k_step=self.k_step / factor,
            lambda_step=self.lambda_step / factor,
        )

    def coarsened(self, factor: int) -> "GridSpec":
        if self.n_k % factor or self.n_lambda % factor:
            raise ValueError("bin counts not divisible by coarsening factor")
        return replace(
            self,
            n_k=self.n_k // factor,
            n_lambda=self.n_lambda // factor,
            k_step=self.k_step * factor,
            lambda_step=self.lambda_step * factor,
        )

    def to_dict(self) -> dict:
        d = asdict(self)
        d["signal_center"] = list(self.signal_center)
        d["idler_center"] = list(self.idler_center)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "GridSpec":
        return cls(**d)
