"""Monte Carlo Geiger-mode camera frames from a joint bin distribution.

Every camera frame integrates ``R`` temporal modes.  Each mode carries at
most one pair (probability ``chi``), each photon of a pair survives with
probability ``eta``, dark counts are Poisson and uniform over the window,
and a pixel that fires more than once is still a single event.

Randomness is counter based: frames are produced in fixed blocks of
``BLOCK`` and block ``b`` draws from a Philox stream keyed by
``(seed, b)``, so the content of a frame never depends on how many workers
produced it or on ``n_frames``.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import DomainError, SinkError
from .frames import CameraFrame, FrameBatch
from .params import K_PER_PX, LAMBDA_PER_PX, GridSpec

BLOCK = 8192
MEAN_PHOTONS_PER_FRAME = 0.12


@dataclass(frozen=True)
class SimulationConfig:
    temporal_modes: int = 96
    pair_prob: float = MEAN_PHOTONS_PER_FRAME / (2 * 96 * 0.04)
    efficiency: float = 0.04
    dark_count_rate: float = 0.0
    seed: int = 0
    n_frames: int = 0
    grid: GridSpec | None = None

    def __post_init__(self):
        if int(self.temporal_modes) != self.temporal_modes or self.temporal_modes < 1:
            raise ValueError("temporal_modes must be an integer >= 1")
        if not 0.0 <= self.pair_prob <= 1.0:
            raise ValueError("pair_prob must lie in [0, 1]")
        if not 0.0 <= self.efficiency <= 1.0:
            raise ValueError("efficiency must lie in [0, 1]")
        if not (self.dark_count_rate >= 0.0 and math.isfinite(self.dark_count_rate)):
            raise ValueError("dark_count_rate must be finite and >= 0")
        if not 0 <= self.seed < 2**64:
            raise ValueError("seed must fit in 64 unsigned bits")
        if self.n_frames < 0:
            raise ValueError("n_frames must be >= 0")

    @classmethod
    def calibrated(
        cls,
        mean_photons: float = MEAN_PHOTONS_PER_FRAME,
        efficiency: float = 0.04,
        temporal_modes: int = 96,
        **kw,
    ) -> "SimulationConfig":
        """Choose ``pair_prob`` so that R * chi * eta * 2 equals ``mean_photons``."""
        if efficiency <= 0:
            raise ValueError("calibration needs efficiency > 0")
        chi = mean_photons / (2.0 * temporal_modes * efficiency)
        return cls(temporal_modes=temporal_modes, pair_prob=chi, efficiency=efficiency, **kw)

    def with_(self, **changes) -> "SimulationConfig":
        return replace(self, **changes)

    @property
    def expected_singles(self) -> float:
        """Mean detected photons per arm per frame before the Geiger clamp."""
        return self.temporal_modes * self.pair_prob * self.efficiency + self.dark_count_rate

    def outcome_probabilities(self) -> np.ndarray:
        """Per temporal mode: (both kept, signal only, idler only, nothing)."""
        chi, eta = self.pair_prob, self.efficiency
        p = np.array([chi * eta * eta, chi * eta * (1 - eta), chi * (1 - eta) * eta, 0.0])
        p[3] = max(0.0, 1.0 - p[:3].sum())
        return p

    def to_dict(self) -> dict:
        return {
            "temporal_modes": self.temporal_modes,
            "pair_prob": self.pair_prob,
            "efficiency": self.efficiency,
            "dark_count_rate": self.dark_count_rate,
            "seed": self.seed,
            "n_frames": self.n_frames,
            "grid": None if self.grid is None else self.grid.to_dict(),
        }


@dataclass(frozen=True)
class CalibrationMap:
    """Affine map between a window's (k, lambda) and camera pixels.

    Columns follow the transverse wavevector, rows the wavelength.  The
    ``origins`` entry of an arm is the pixel of bin (0, 0) of that window.
    """

    grid: GridSpec
    origins: dict = field(default_factory=dict)
    k_per_px: float = K_PER_PX
    lambda_per_px: float = LAMBDA_PER_PX
    grating_lines_per_mm: float = 1200.0
    pump_wavelength_nm: float = 400.0

    def __post_init__(self):
        if not (self.k_per_px > 0 and self.lambda_per_px > 0 and self.grating_lines_per_mm > 0):
            raise ValueError("calibration scales must be strictly positive")
        if not self.origins:
            object.__setattr__(self, "origins", self.default_origins(self.grid, self.k_per_px))
        object.__setattr__(
            self, "origins", {arm: (int(r), int(c)) for arm, (r, c) in self.origins.items()}
        )

    @staticmethod
    def default_origins(grid: GridSpec, k_per_px: float, axis_column: int = 976, first_row: int = 30):
        return {
            arm: (first_row, axis_column + int(round(grid.k_axis(arm)[0] / k_per_px)))
            for arm in ("signal", "idler")
        }

    @property
    def resolution_nm(self) -> float:
        """Grating-limited resolution 2 lambda_p / N with N lines per mm (nm)."""
        return 2.0 * self.pump_wavelength_nm / self.grating_lines_per_mm

    @property
    def grating_slope(self) -> float:
        """Transverse-wavevector shift per nm of wavelength [rad/mm/nm]."""
        return self.k_per_px / self.lambda_per_px

    def _origin(self, arm):
        if arm not in self.origins:
            raise ValueError(f"unknown arm {arm!r}")
        return self.origins[arm]

    def physical_to_pixel(self, k, wavelength_nm, arm: str) -> tuple[int, int]:
        row0, col0 = self._origin(arm)
        dc = (k - self.grid.k_axis(arm)[0]) / self.k_per_px
        dr = (wavelength_nm - self.grid.lambda_axis(arm)[0]) / self.lambda_per_px
        # window edges sit half a pixel outside the first and last bin centres
        if not (-0.5 <= dc < self.grid.n_k - 0.5 and -0.5 <= dr < self.grid.n_lambda - 0.5):
            raise DomainError(f"({k}, {wavelength_nm}) lies outside the {arm} window")
        return row0 + int(math.floor(dr + 0.5)), col0 + int(math.floor(dc + 0.5))

    def pixel_to_physical(self, row: int, col: int, arm: str) -> tuple[float, float]:
        row0, col0 = self._origin(arm)
        k = self.grid.k_axis(arm)[0] + (col - col0) * self.k_per_px
        lam = self.grid.lambda_axis(arm)[0] + (row - row0) * self.lambda_per_px
        return float(k), float(lam)

    def bin_to_pixel(self, bin_index: int, arm: str) -> tuple[int, int]:
        j, m = self.grid.split_bin(bin_index)
        row0, col0 = self._origin(arm)
        return row0 + int(m), col0 + int(j)


def _cdf(weights: np.ndarray) -> np.ndarray:
    c = np.cumsum(weights, dtype=float)
    total = c[-1]
    c /= total
    last = int(np.flatnonzero(weights)[-1])
    c[last:] = 1.0
    return c


class PairSampler:
    """Inverse-CDF sampler over the flat (signal bin, idler bin) product space."""

    def __init__(self, weights: np.ndarray, n_bins: int):
        w = np.asarray(weights, dtype=float).reshape(-1)
        if w.size != n_bins * n_bins:
            raise ValueError(f"expected {n_bins * n_bins} joint weights, got {w.size}")
        if not np.all(np.isfinite(w)):
            raise ValueError("joint weights must be finite")
        if np.any(w < 0):
            raise ValueError("joint weights must be non-negative")
        if not w.sum() > 0:
            raise ValueError("joint weights sum to zero")
        self.n_bins = int(n_bins)
        self.probabilities = w / w.sum()
        self.joint_cdf = _cdf(w)
        mat = w.reshape(n_bins, n_bins)
        self.signal_cdf = _cdf(mat.sum(axis=1))
        self.idler_cdf = _cdf(mat.sum(axis=0))

    @classmethod
    def from_weights(cls, weights, n_bins: int | None = None) -> "PairSampler":
        w = np.asarray(weights, dtype=float)
        if n_bins is None:
            if w.ndim == 4:
                n_bins = w.shape[0] * w.shape[1]
            elif w.ndim == 2 and w.shape[0] == w.shape[1]:
                n_bins = w.shape[0]
            else:
                raise ValueError("cannot infer bin count from weights shape")
        return cls(w, n_bins)

    @classmethod
    def from_amplitude_grid(cls, ag) -> "PairSampler":
        return cls(ag.intensity, ag.grid.n_bins)

    @classmethod
    def independent(cls, signal_weights, idler_weights) -> "PairSampler":
        """Product distribution: signal and idler bins drawn independently."""
        s = np.asarray(signal_weights, dtype=float).ravel()
        i = np.asarray(idler_weights, dtype=float).ravel()
        if s.size != i.size:
            raise ValueError("arms must have equal bin counts")
        return cls(np.outer(s, i), s.size)

    def sample_joint(self, u: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        flat = np.searchsorted(self.joint_cdf, u, side="right")
        return flat // self.n_bins, flat % self.n_bins

    def sample_signal(self, u: np.ndarray) -> np.ndarray:
        return np.searchsorted(self.signal_cdf, u, side="right")

    def sample_idler(self, u: np.ndarray) -> np.ndarray:
        return np.searchsorted(self.idler_cdf, u, side="right")


def build_pair_sampler(ag) -> PairSampler:
    """Sampler drawing (signal, idler) bins with probability |Psi|^2."""
    return PairSampler.from_amplitude_grid(ag)


def block_rng(seed: int, block: int) -> np.random.Generator:
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=(int(block),))
    return np.random.Generator(np.random.Philox(ss))


def _clamp(frames: np.ndarray, bins: np.ndarray, n_bins: int, n_frames: int):
    """Sort events per frame and drop duplicates (Geiger clamp)."""
    keys = np.unique(frames.astype(np.int64) * n_bins + bins.astype(np.int64))
    counts = np.bincount(keys // n_bins, minlength=n_frames)
    return counts, (keys % n_bins).astype(np.uint32)


def generate_block(cfg: SimulationConfig, sampler: PairSampler, block: int) -> FrameBatch:
    """All ``BLOCK`` frames of block ``block`` (independent of ``cfg.n_frames``)."""
    rng = block_rng(cfg.seed, block)
    nb = sampler.n_bins
    outcomes = rng.multinomial(cfg.temporal_modes, cfg.outcome_probabilities(), size=BLOCK)
    frame_ids = np.arange(BLOCK, dtype=np.int64)
    n_both, n_s, n_i = outcomes[:, 0], outcomes[:, 1], outcomes[:, 2]

    s_both, i_both = sampler.sample_joint(rng.random(int(n_both.sum())))
    s_only = sampler.sample_signal(rng.random(int(n_s.sum())))
    i_only = sampler.sample_idler(rng.random(int(n_i.sum())))
    f_both = np.repeat(frame_ids, n_both)
    sig_f = [f_both, np.repeat(frame_ids, n_s)]
    sig_b = [s_both, s_only]
    idl_f = [f_both, np.repeat(frame_ids, n_i)]
    idl_b = [i_both, i_only]

    if cfg.dark_count_rate > 0:
        d_s = rng.poisson(cfg.dark_count_rate, BLOCK)
        d_i = rng.poisson(cfg.dark_count_rate, BLOCK)
        sig_f.append(np.repeat(frame_ids, d_s))
        idl_f.append(np.repeat(frame_ids, d_i))
        sig_b.append(rng.integers(0, nb, int(d_s.sum())))
        idl_b.append(rng.integers(0, nb, int(d_i.sum())))

    s_counts, s_bins = _clamp(np.concatenate(sig_f), np.concatenate(sig_b), nb, BLOCK)
    i_counts, i_bins = _clamp(np.concatenate(idl_f), np.concatenate(idl_b), nb, BLOCK)
    index = np.arange(block * BLOCK, (block + 1) * BLOCK, dtype=np.uint64)
    return FrameBatch.from_counts(index, s_counts, s_bins, i_counts, i_bins)


def generate_frames(cfg: SimulationConfig, sampler: PairSampler, start: int, stop: int) -> FrameBatch:
    """Frames with indices in ``[start, stop)``."""
    if not 0 <= start <= stop:
        raise ValueError("need 0 <= start <= stop")
    parts = []
    for b in range(start // BLOCK, -(-stop // BLOCK)):
        lo = max(start - b * BLOCK, 0)
        hi = min(stop - b * BLOCK, BLOCK)
        parts.append(generate_block(cfg, sampler, b).slice(lo, hi))
    return FrameBatch.concatenate(parts)


def generate_frame(cfg: SimulationConfig, sampler: PairSampler, frame_index: int) -> CameraFrame:
    return generate_frames(cfg, sampler, frame_index, frame_index + 1).frame(0)


@dataclass(frozen=True)
class SimulationTotals:
    frames: int = 0
    events_signal: int = 0
    events_idler: int = 0

    def to_dict(self) -> dict:
        return {"frames": self.frames, "events_signal": self.events_signal, "events_idler": self.events_idler}


def _deliver(sink, batch: FrameBatch):
    fn = getattr(sink, "consume", None) or sink
    try:
        fn(batch)
    except Exception as exc:
        raise SinkError(int(batch.frame_index[0]), exc) from exc


def run_simulation(cfg: SimulationConfig, sampler: PairSampler, sink=None, threads: int = 1) -> SimulationTotals:
    """Generate ``cfg.n_frames`` frames and hand them to ``sink`` in frame order.

    ``sink`` is a callable or an object with ``consume(batch)``.  Workers
    generate disjoint blocks; delivery order and content do not depend on
    ``threads``.
    """
    n = cfg.n_frames
    n_blocks = -(-n // BLOCK)
    threads = max(1, int(threads))

    def job(b):
        batch = generate_block(cfg, sampler, b)
        return batch if (b + 1) * BLOCK <= n else batch.slice(0, n - b * BLOCK)

    frames = ev_s = ev_i = 0

    def take(batch):
        nonlocal frames, ev_s, ev_i
        if sink is not None:
            _deliver(sink, batch)
        frames += len(batch)
        ev_s += len(batch.signal_bins)
        ev_i += len(batch.idler_bins)

    if threads == 1 or n_blocks <= 1:
        for b in range(n_blocks):
            take(job(b))
    else:
        window = 4 * threads
        with ThreadPoolExecutor(max_workers=threads) as pool:
            for lo in range(0, n_blocks, window):
                for batch in pool.map(job, range(lo, min(lo + window, n_blocks))):
                    take(batch)
    return SimulationTotals(frames, ev_s, ev_i)
