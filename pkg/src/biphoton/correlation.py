"""Streaming coincidence accumulation and the estimators built on it.

Memory: the dense coincidence matrix holds ``(n_k * n_lambda)**2`` int64
counts, i.e. 8 * 2800**2 bytes = 63 MB at the default 70 x 40 window.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numba
import numpy as np

from . import sumcoords
from .errors import FitError
from .fitting import GaussianFitResult, gaussian_fit_1d
from .frames import CameraFrame, FrameBatch
from .params import GridSpec

MAX_MOMENT_DEGREE = 4


@numba.njit(cache=True)
def _add_pairs(coinc, s_off, s_bins, i_off, i_bins):
    for f in range(s_off.size - 1):
        for a in range(s_off[f], s_off[f + 1]):
            row = s_bins[a]
            for b in range(i_off[f], i_off[f + 1]):
                coinc[row, i_bins[b]] += 1


class CorrelationAccumulator:
    """Mergeable integer sums over a frame stream.

    Besides singles and coincidences it keeps the joint histogram of
    per-frame photon numbers ``(n_s, n_i)``, which gives exact moments of
    the global photon numbers for the efficiency and autocorrelation
    estimators.
    """

    def __init__(self, grid: GridSpec):
        self.grid = grid
        nb = grid.n_bins
        self.n_frames = 0
        self.singles_s = np.zeros(nb, dtype=np.int64)
        self.singles_i = np.zeros(nb, dtype=np.int64)
        self.coincidences = np.zeros((nb, nb), dtype=np.int64)
        self.number_histogram: dict[tuple[int, int], int] = {}

    # ingestion

    def ingest_batch(self, batch: FrameBatch) -> "CorrelationAccumulator":
        n = len(batch)
        if n == 0:
            return self
        nb = self.grid.n_bins
        for name, bins, offsets in (
            ("signal", batch.signal_bins, batch.signal_offsets),
            ("idler", batch.idler_bins, batch.idler_offsets),
        ):
            if bins.size and int(bins.max()) >= nb:
                pos = int(np.flatnonzero(bins >= nb)[0])
                f = int(np.searchsorted(offsets, pos, side="right")) - 1
                raise IndexError(
                    f"{name} bin {int(bins[pos])} out of range (n_bins={nb}) in frame {int(batch.frame_index[f])}"
                )
        self.singles_s += np.bincount(batch.signal_bins, minlength=nb)
        self.singles_i += np.bincount(batch.idler_bins, minlength=nb)
        _add_pairs(
            self.coincidences,
            batch.signal_offsets,
            batch.signal_bins.astype(np.int64),
            batch.idler_offsets,
            batch.idler_bins.astype(np.int64),
        )
        keys, counts = np.unique(
            batch.signal_counts.astype(np.int64) << 32 | batch.idler_counts.astype(np.int64),
            return_counts=True,
        )
        hist = self.number_histogram
        for key, c in zip(keys.tolist(), counts.tolist()):
            pair = (key >> 32, key & 0xFFFFFFFF)
            hist[pair] = hist.get(pair, 0) + c
        self.n_frames += n
        return self

    consume = ingest_batch

    def ingest_frame(self, frame: CameraFrame) -> "CorrelationAccumulator":
        return self.ingest_batch(FrameBatch.from_frames([frame]))

    def ingest(self, frames) -> "CorrelationAccumulator":
        """Ingest an iterable of batches or frames."""
        pending = []
        for item in frames:
            if isinstance(item, FrameBatch):
                if pending:
                    self.ingest_batch(FrameBatch.from_frames(pending))
                    pending = []
                self.ingest_batch(item)
            else:
                pending.append(item)
                if len(pending) >= 4096:
                    self.ingest_batch(FrameBatch.from_frames(pending))
                    pending = []
        if pending:
            self.ingest_batch(FrameBatch.from_frames(pending))
        return self

    # combination

    def merge(self, other: "CorrelationAccumulator") -> "CorrelationAccumulator":
        """New accumulator holding the exact sum of both."""
        if other.grid != self.grid:
            raise ValueError("cannot merge accumulators over different grids")
        out = CorrelationAccumulator.__new__(CorrelationAccumulator)
        out.grid = self.grid
        out.n_frames = self.n_frames + other.n_frames
        out.singles_s = self.singles_s + other.singles_s
        out.singles_i = self.singles_i + other.singles_i
        out.coincidences = self.coincidences + other.coincidences
        hist = dict(self.number_histogram)
        for k, v in other.number_histogram.items():
            hist[k] = hist.get(k, 0) + v
        out.number_histogram = hist
        return out

    def equals(self, other: "CorrelationAccumulator") -> bool:
        return (
            self.grid == other.grid
            and self.n_frames == other.n_frames
            and np.array_equal(self.singles_s, other.singles_s)
            and np.array_equal(self.singles_i, other.singles_i)
            and np.array_equal(self.coincidences, other.coincidences)
            and self.number_histogram == other.number_histogram
        )

    def moment(self, a: int, b: int) -> int:
        """Exact sum over frames of n_s**a * n_i**b."""
        if a + b > MAX_MOMENT_DEGREE:
            raise ValueError(f"moments above degree {MAX_MOMENT_DEGREE} are not needed")
        return sum(c * ns**a * ni**b for (ns, ni), c in self.number_histogram.items())

    # 4-D views

    @property
    def coincidences_4d(self) -> np.ndarray:
        return self.coincidences.reshape(self.grid.shape)

    def singles_map(self, arm: str) -> np.ndarray:
        s = self.singles_s if arm == "signal" else self.singles_i
        return s.reshape(self.grid.n_k, self.grid.n_lambda)


def _need_frames(acc, n=2):
    if acc.n_frames < n:
        raise ValueError(f"need at least {n} frames, have {acc.n_frames}")


def covariance(acc: CorrelationAccumulator, s_bin: int, i_bin: int) -> float:
    """<n_s n_i> - <n_s><n_i> for one signal and one idler bin."""
    _need_frames(acc)
    N = acc.n_frames
    return acc.coincidences[s_bin, i_bin] / N - (acc.singles_s[s_bin] / N) * (acc.singles_i[i_bin] / N)


def covariance_matrix(acc: CorrelationAccumulator) -> np.ndarray:
    _need_frames(acc)
    N = acc.n_frames
    return acc.coincidences / N - np.outer(acc.singles_s / N, acc.singles_i / N)


def covariance_4d(acc: CorrelationAccumulator) -> np.ndarray:
    return covariance_matrix(acc).reshape(acc.grid.shape)


def _subregion(sel, n):
    idx = np.arange(n)[sel] if isinstance(sel, slice) else np.asarray(sel, dtype=np.intp).ravel()
    if idx.size == 0:
        raise ValueError("empty sub-region")
    if idx.min() < 0 or idx.max() >= n:
        raise IndexError("sub-region outside the grid axis")
    return idx


def region_summed_cov_kk(acc: CorrelationAccumulator, lambda_s_bins, lambda_i_bins) -> np.ndarray:
    """Covariance summed over signal/idler wavelength sub-regions -> (n_k, n_k)."""
    _need_frames(acc)
    g, N = acc.grid, acc.n_frames
    ls = _subregion(lambda_s_bins, g.n_lambda)
    li = _subregion(lambda_i_bins, g.n_lambda)
    c = np.take(np.take(acc.coincidences_4d, ls, axis=1), li, axis=3).sum(axis=(1, 3))
    ss = acc.singles_map("signal")[:, ls].sum(axis=1)
    si = acc.singles_map("idler")[:, li].sum(axis=1)
    return c / N - np.outer(ss / N, si / N)


def region_summed_cov_ll(acc: CorrelationAccumulator, k_s_bins, k_i_bins) -> np.ndarray:
    """Covariance summed over signal/idler wavevector sub-regions -> (n_lambda, n_lambda)."""
    _need_frames(acc)
    g, N = acc.grid, acc.n_frames
    ks = _subregion(k_s_bins, g.n_k)
    ki = _subregion(k_i_bins, g.n_k)
    c = np.take(np.take(acc.coincidences_4d, ks, axis=0), ki, axis=2).sum(axis=(0, 2))
    ss = acc.singles_map("signal")[ks].sum(axis=0)
    si = acc.singles_map("idler")[ki].sum(axis=0)
    return c / N - np.outer(ss / N, si / N)


def g2_full(acc: CorrelationAccumulator, s_bin: int, i_bin: int):
    """(C/N) / ((S_s/N)(S_i/N)); ``np.ma.masked`` when a singles count is 0."""
    if acc.singles_s[s_bin] == 0 or acc.singles_i[i_bin] == 0:
        return np.ma.masked
    N = acc.n_frames
    return (acc.coincidences[s_bin, i_bin] / N) / ((acc.singles_s[s_bin] / N) * (acc.singles_i[i_bin] / N))


def g2_full_matrix(acc: CorrelationAccumulator) -> np.ma.MaskedArray:
    N = acc.n_frames
    den = np.outer(acc.singles_s / N, acc.singles_i / N)
    mask = den == 0
    with np.errstate(divide="ignore", invalid="ignore"):
        val = np.where(mask, 0.0, (acc.coincidences / N) / np.where(mask, 1.0, den))
    return np.ma.MaskedArray(val, mask=mask)


@dataclass
class G2SumMap:
    """g2 over (k+, lambda+) with the raw ingredients kept for error estimates."""

    values: np.ma.MaskedArray
    coincidence_counts: np.ndarray
    denominator: np.ndarray
    contributors: np.ndarray
    k_plus: np.ndarray
    lambda_plus: np.ndarray
    n_frames: int

    @property
    def errors(self) -> np.ma.MaskedArray:
        """Poisson error from the coincidence counts (singles are far better known)."""
        with np.errstate(divide="ignore", invalid="ignore"):
            rel = 1.0 / np.sqrt(np.maximum(self.coincidence_counts, 1))
        return np.ma.MaskedArray(self.values.filled(0.0) * rel, mask=self.values.mask)

    def fit_weights(self) -> np.ndarray:
        """Inverse variance of each g2 value up to a common factor."""
        return np.where(self.values.mask, 0.0, self.denominator**2 / np.maximum(self.coincidence_counts, 1))

    def index_of(self, k_plus: float, lambda_plus: float) -> tuple[int, int]:
        return int(np.argmin(np.abs(self.k_plus - k_plus))), int(np.argmin(np.abs(self.lambda_plus - lambda_plus)))

    def value_at(self, k_plus: float, lambda_plus: float) -> tuple[float, float]:
        """g2 and its error in the sum bin nearest to (k_plus, lambda_plus)."""
        idx = self.index_of(k_plus, lambda_plus)
        if self.values.mask[idx]:
            return float("nan"), float("nan")
        return float(self.values[idx]), float(self.errors[idx])

    def peak(self, min_counts: int = 100) -> tuple[float, float, tuple[int, int]]:
        """Largest g2 among bins holding at least ``min_counts`` coincidences."""
        vals = np.ma.masked_where(self.coincidence_counts < min_counts, self.values)
        if vals.count() == 0:
            raise ValueError(f"no sum bin has {min_counts} or more coincidences")
        idx = np.unravel_index(int(np.ma.argmax(vals)), vals.shape)
        return float(self.values[idx]), float(self.errors[idx]), (int(idx[0]), int(idx[1]))


def g2_sum_coordinates(acc: CorrelationAccumulator) -> G2SumMap:
    """Coincidence and singles-product rates summed at fixed k+ and lambda+.

    Sum bin (a, b) collects every signal bin (j, m) and idler bin (l, p) with
    j + l = a and m + p = b; its physical coordinate is the sum of the first
    bin centres of both arms plus a (resp. b) steps.
    """
    _need_frames(acc)
    N = acc.n_frames
    num = sumcoords.project(acc.coincidences_4d)
    den = sumcoords.convolve(acc.singles_map("signal") / N, acc.singles_map("idler") / N)
    mask = den == 0
    with np.errstate(divide="ignore", invalid="ignore"):
        val = np.where(mask, 0.0, (num / N) / np.where(mask, 1.0, den))
    kp, lp = sumcoords.axes(acc.grid)
    return G2SumMap(
        values=np.ma.MaskedArray(val, mask=mask),
        coincidence_counts=num,
        denominator=den,
        contributors=sumcoords.contributors(acc.grid.n_k, acc.grid.n_lambda),
        k_plus=kp,
        lambda_plus=lp,
        n_frames=N,
    )


@dataclass(frozen=True)
class ModeSizes:
    k_fit: GaussianFitResult
    lambda_fit: GaussianFitResult

    @property
    def sigma_k_mode(self) -> float:
        return self.k_fit.sigma / math.sqrt(2.0)

    @property
    def sigma_k_mode_error(self) -> float:
        return self.k_fit.errors.get("sigma", 0.0) / math.sqrt(2.0)

    @property
    def sigma_lambda_mode(self) -> float:
        return self.lambda_fit.sigma / math.sqrt(2.0)

    @property
    def sigma_lambda_mode_error(self) -> float:
        return self.lambda_fit.errors.get("sigma", 0.0) / math.sqrt(2.0)

    def to_dict(self) -> dict:
        return {
            "sigma_k": self.k_fit.sigma,
            "sigma_k_error": self.k_fit.errors.get("sigma", 0.0),
            "sigma_lambda": self.lambda_fit.sigma,
            "sigma_lambda_error": self.lambda_fit.errors.get("sigma", 0.0),
            "sigma_k_mode": self.sigma_k_mode,
            "sigma_k_mode_error": self.sigma_k_mode_error,
            "sigma_lambda_mode": self.sigma_lambda_mode,
            "sigma_lambda_mode_error": self.sigma_lambda_mode_error,
            "k_fit": self.k_fit.to_dict(),
            "lambda_fit": self.lambda_fit.to_dict(),
        }


def mode_size_from_fit_sigma(sigma: float) -> float:
    """Single-photon mode width from the width along a sum coordinate."""
    return sigma / math.sqrt(2.0)


def mode_sizes(
    g2: G2SumMap,
    lambda_plus_center: float,
    k_plus_center: float = 0.0,
    baseline: float | None = 1.0,
) -> ModeSizes:
    """Gaussian fits of the row at ``lambda_plus_center`` and the column at ``k_plus_center``.

    The fit offset is held at ``baseline``, the uncorrelated g2 = 1 floor by
    default.  The spectral window is narrower than the correlation width, so
    a free offset is not identifiable there; pass ``None`` to fit it anyway.
    """
    col, row = g2.index_of(k_plus_center, lambda_plus_center)
    w = g2.fit_weights()
    vals = g2.values.filled(np.nan)
    try:
        k_fit = gaussian_fit_1d(g2.k_plus, vals[:, row], w[:, row], offset=baseline)
    except FitError as exc:
        raise FitError(f"k+ cross-section: {exc}", exc.diagnostics) from exc
    try:
        l_fit = gaussian_fit_1d(g2.lambda_plus, vals[col, :], w[col, :], offset=baseline)
    except FitError as exc:
        raise FitError(f"lambda+ cross-section: {exc}", exc.diagnostics) from exc
    return ModeSizes(k_fit, l_fit)


def _number_moments(acc):
    N = acc.n_frames
    return {(a, b): acc.moment(a, b) / N for a in range(3) for b in range(3) if a + b <= MAX_MOMENT_DEGREE}


def efficiency_estimate(acc: CorrelationAccumulator) -> tuple[float, float]:
    """(<n_s n_i> - <n_s><n_i>) / sqrt(<n_s><n_i>) with a delta-method error.

    ``n_s`` and ``n_i`` are the total detected photon numbers per frame.
    """
    _need_frames(acc)
    m = _number_moments(acc)
    ms, mi, msi = m[1, 0], m[0, 1], m[1, 1]
    if ms <= 0 or mi <= 0:
        raise ValueError("efficiency estimate needs detections in both arms")
    r = math.sqrt(ms * mi)
    eta = (msi - ms * mi) / r
    # gradient with respect to (<n_s n_i>, <n_s>, <n_i>)
    grad = np.array([
        1.0 / r,
        -mi / r - 0.5 * eta / ms,
        -ms / r - 0.5 * eta / mi,
    ])
    cov = np.array([
        [m[2, 2] - msi**2, m[2, 1] - msi * ms, m[1, 2] - msi * mi],
        [m[2, 1] - msi * ms, m[2, 0] - ms**2, msi - ms * mi],
        [m[1, 2] - msi * mi, msi - ms * mi, m[0, 2] - mi**2],
    ])
    var = float(grad @ cov @ grad) / acc.n_frames
    return float(eta), math.sqrt(max(var, 0.0))


def autocorrelation(acc: CorrelationAccumulator, arm: str) -> tuple[float, float]:
    """<n(n-1)> / <n>^2 of one arm's total photon number, with a delta-method error."""
    _need_frames(acc)
    m = _number_moments(acc)
    key1, key2 = ((1, 0), (2, 0)) if arm == "signal" else ((0, 1), (0, 2))
    m1, m2 = m[key1], m[key2]
    if m1 <= 0:
        raise ValueError(f"no {arm} detections")
    f = m2 - m1
    g = f / m1**2
    # variables (n^2 - n, n); higher moments from the histogram
    N = acc.n_frames
    e3 = acc.moment(*(3 * k for k in key1)) / N
    e4 = acc.moment(*(4 * k for k in key1)) / N
    var_f = e4 - 2 * e3 + m2 - f**2
    cov_f1 = e3 - m2 - f * m1
    var_1 = m2 - m1**2
    grad = np.array([1.0 / m1**2, -2.0 * f / m1**3])
    cov = np.array([[var_f, cov_f1], [cov_f1, var_1]])
    var = float(grad @ cov @ grad) / N
    return float(g), math.sqrt(max(var, 0.0))


def default_subregions(n: int, parts: int = 4) -> list[np.ndarray]:
    """Equal (up to one bin) contiguous partition of an axis."""
    if not 1 <= parts <= n:
        raise ValueError("parts must lie in [1, n]")
    return np.array_split(np.arange(n), parts)


@dataclass
class CorrelationMaps:
    """Region-summed covariance panels plus the sum-coordinate g2 map."""

    grid: GridSpec
    cov_kk: dict = field(default_factory=dict)
    cov_ll: dict = field(default_factory=dict)
    g2_sum: G2SumMap | None = None
    lambda_regions: list = field(default_factory=list)
    k_regions: list = field(default_factory=list)


def correlation_maps(acc: CorrelationAccumulator, parts: int = 4) -> CorrelationMaps:
    g = acc.grid
    lr = default_subregions(g.n_lambda, parts)
    kr = default_subregions(g.n_k, parts)
    out = CorrelationMaps(grid=g, lambda_regions=lr, k_regions=kr)
    for a, ra in enumerate(lr):
        for b, rb in enumerate(lr):
            out.cov_kk[a, b] = region_summed_cov_kk(acc, ra, rb)
    for a, ra in enumerate(kr):
        for b, rb in enumerate(kr):
            out.cov_ll[a, b] = region_summed_cov_ll(acc, ra, rb)
    out.g2_sum = g2_sum_coordinates(acc)
    return out
