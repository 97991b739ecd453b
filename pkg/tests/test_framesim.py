import math

import numpy as np
import pytest
from scipy.stats import chisquare

from biphoton.errors import DomainError, SinkError
from biphoton.frames import FrameBatch
from biphoton.framesim import (
    BLOCK,
    CalibrationMap,
    PairSampler,
    SimulationConfig,
    build_pair_sampler,
    generate_frame,
    generate_frames,
    run_simulation,
)
from biphoton.params import GridSpec
from biphoton.spdc import sum_coordinate_intensity


class Collect:
    def __init__(self):
        self.batches = []

    def consume(self, batch):
        self.batches.append(batch)

    def batch(self):
        return FrameBatch.concatenate(self.batches)


def uniform_sampler(n_bins):
    return PairSampler.from_weights(np.ones((n_bins, n_bins)))


# configuration -------------------------------------------------------------


@pytest.mark.parametrize(
    "kw",
    [
        {"temporal_modes": 0},
        {"temporal_modes": 2.5},
        {"pair_prob": -0.1},
        {"pair_prob": 1.1},
        {"efficiency": 1.5},
        {"dark_count_rate": -1.0},
        {"dark_count_rate": math.inf},
        {"n_frames": -1},
        {"seed": -1},
    ],
)
def test_config_rejects(kw):
    with pytest.raises(ValueError):
        SimulationConfig(**kw)


def test_calibrated_pair_probability():
    cfg = SimulationConfig.calibrated()
    assert cfg.pair_prob == pytest.approx(0.12 / (2 * 96 * 0.04), rel=1e-15)
    assert 2 * cfg.expected_singles == pytest.approx(0.12, rel=1e-12)
    assert cfg.outcome_probabilities().sum() == pytest.approx(1.0, abs=1e-15)


# sampler --------------------------------------------------------------------


def test_sampler_uniform_four_bins(rng):
    s = PairSampler.from_weights(np.ones(4), n_bins=2)
    sig, idl = s.sample_joint(rng.random(100_000))
    counts = np.bincount(sig * 2 + idl, minlength=4)
    sd = math.sqrt(100_000 * 0.25 * 0.75)
    assert np.all(np.abs(counts - 25_000) < 3 * sd)


def test_sampler_single_bin(rng):
    w = np.zeros((3, 3))
    w[2, 1] = 0.7
    s = PairSampler.from_weights(w)
    sig, idl = s.sample_joint(rng.random(10_000))
    assert np.all(sig == 2) and np.all(idl == 1)
    assert np.all(s.sample_signal(rng.random(1000)) == 2)
    assert np.all(s.sample_idler(rng.random(1000)) == 1)


def test_sampler_edge_uniforms():
    w = np.array([[0.0, 1.0], [2.0, 0.0]])
    s = PairSampler.from_weights(w)
    # u = 0 must not pick a zero-weight leading bin; u -> 1 must stay in range
    assert s.sample_joint(np.array([0.0]))[0][0] == 0 and s.sample_joint(np.array([0.0]))[1][0] == 1
    sig, idl = s.sample_joint(np.array([np.nextafter(1.0, 0.0)]))
    assert (sig[0], idl[0]) == (1, 0)


@pytest.mark.parametrize("bad", [np.nan, np.inf, -1.0])
def test_sampler_rejects_bad_weights(bad):
    w = np.ones((2, 2))
    w[0, 1] = bad
    with pytest.raises(ValueError):
        PairSampler.from_weights(w)
    with pytest.raises(ValueError):
        PairSampler.from_weights(np.zeros((2, 2)))


def test_sampler_chi_square(small_amplitude, rng):
    s = build_pair_sampler(small_amplitude)
    sig, idl = s.sample_joint(rng.random(1_000_000))
    obs = np.bincount(sig * s.n_bins + idl, minlength=s.n_bins**2)
    exp = s.probabilities * 1_000_000
    keep = exp >= 5
    f_obs = np.append(obs[keep], obs[~keep].sum())
    f_exp = np.append(exp[keep], exp[~keep].sum())
    assert chisquare(f_obs, f_exp * f_obs.sum() / f_exp.sum()).pvalue > 1e-4


@pytest.mark.slow
def test_sampler_k_plus_width(full_amplitude, rng):
    g = full_amplitude.grid
    s = build_pair_sampler(full_amplitude)
    sig, idl = s.sample_joint(rng.random(10_000_000))
    kplus = sig // g.n_lambda + idl // g.n_lambda
    emp = np.bincount(kplus, minlength=2 * g.n_k - 1).astype(float)
    theory = sum_coordinate_intensity(full_amplitude)[0].sum(axis=1)

    def width(h):
        x = np.arange(h.size)
        p = h / h.sum()
        mu = (p * x).sum()
        return math.sqrt((p * (x - mu) ** 2).sum())

    assert width(emp) == pytest.approx(width(theory), rel=0.05)


# frame generation -----------------------------------------------------------


def test_zero_efficiency_gives_empty_frames():
    cfg = SimulationConfig(pair_prob=0.5, efficiency=0.0)
    batch = generate_frames(cfg, uniform_sampler(4), 0, 1000)
    assert len(batch) == 1000
    assert batch.signal_bins.size == 0 and batch.idler_bins.size == 0


def test_geiger_clamp_single_bin():
    # every mode emits a pair into the only bin; both photons always detected
    cfg = SimulationConfig(temporal_modes=2, pair_prob=1.0, efficiency=1.0)
    f = generate_frame(cfg, uniform_sampler(1), 17)
    assert f.signal_events == (0,) and f.idler_events == (0,)


def test_frames_sorted_unique_and_in_range():
    cfg = SimulationConfig(temporal_modes=50, pair_prob=0.5, efficiency=0.8, dark_count_rate=2.0)
    batch = generate_frames(cfg, uniform_sampler(6), 0, 2000)
    for f in batch:
        assert all(b < 6 for b in f.signal_events + f.idler_events)


def test_determinism_independent_of_range():
    cfg = SimulationConfig(dark_count_rate=0.01, seed=99)
    s = uniform_sampler(10)
    whole = generate_frames(cfg, s, 0, 3 * BLOCK)
    part = generate_frames(cfg, s, BLOCK - 5, 2 * BLOCK + 7)
    assert part == whole.slice(BLOCK - 5, 2 * BLOCK + 7)
    assert generate_frame(cfg, s, 12345) == whole.frame(12345)
    assert generate_frames(cfg.with_(seed=100), s, 0, BLOCK) != whole.slice(0, BLOCK)


def test_run_simulation_threads_identical():
    cfg = SimulationConfig(n_frames=5 * BLOCK + 11, seed=7)
    s = uniform_sampler(20)
    outs = []
    for threads in (1, 3, 8):
        c = Collect()
        totals = run_simulation(cfg, s, c, threads=threads)
        outs.append((totals, c.batch()))
    assert all(o[0] == outs[0][0] for o in outs)
    assert all(o[1] == outs[0][1] for o in outs)
    assert len(outs[0][1]) == cfg.n_frames
    assert np.array_equal(outs[0][1].frame_index, np.arange(cfg.n_frames, dtype=np.uint64))


def test_run_simulation_zero_frames():
    c = Collect()
    totals = run_simulation(SimulationConfig(n_frames=0), uniform_sampler(2), c)
    assert (totals.frames, totals.events_signal, totals.events_idler) == (0, 0, 0)
    assert c.batches == []


def test_sink_failure_names_frame():
    seen = []

    def sink(batch):
        seen.append(len(batch))
        if len(seen) == 2:
            raise OSError("disk full")

    with pytest.raises(SinkError) as exc:
        run_simulation(SimulationConfig(n_frames=3 * BLOCK), uniform_sampler(2), sink)
    assert exc.value.frame_index == BLOCK
    assert "disk full" in str(exc.value)


def test_events_per_frame_default_calibration():
    cfg = SimulationConfig(n_frames=1_000_000, seed=3)
    totals = run_simulation(cfg, uniform_sampler(2800))
    # 2800 bins make collisions negligible at 0.06 events per arm
    sd = math.sqrt(0.06 / cfg.n_frames)
    for ev in (totals.events_signal, totals.events_idler):
        assert abs(ev / cfg.n_frames - 0.06) < 3 * sd


@pytest.mark.parametrize("dark", [0.0, 0.05])
def test_rate_linearity(dark):
    cfg = SimulationConfig(n_frames=1_000_000, dark_count_rate=dark, seed=11)
    totals = run_simulation(cfg, uniform_sampler(5000))
    mean = cfg.expected_singles
    # counts per frame are binomial plus Poisson, variance close to the mean
    sd = math.sqrt(mean / cfg.n_frames)
    assert abs(totals.events_signal / cfg.n_frames - mean) < 3 * sd
    assert abs(totals.events_idler / cfg.n_frames - mean) < 3 * sd


def test_geiger_saturation():
    # one-bin window: occupancy probability is 1 - (1 - chi*eta)^R exactly
    s = uniform_sampler(1)
    n = 200_000
    prev = 0.0
    for chi in (0.01, 0.05, 0.2, 0.6, 1.0):
        cfg = SimulationConfig(temporal_modes=10, pair_prob=chi, efficiency=0.5, n_frames=n, seed=5)
        occ = run_simulation(cfg, s).events_signal / n
        exact = 1 - (1 - chi * 0.5) ** 10
        assert occ <= 1.0
        assert occ <= 10 * chi * 0.5 + 1e-12
        assert abs(occ - exact) < 5 * math.sqrt(exact * (1 - exact) / n) + 1e-12
        assert occ >= prev
        prev = occ


# calibration map -------------------------------------------------------------


@pytest.fixture
def cal(full_grid):
    return CalibrationMap(full_grid, CalibrationMap.default_origins(full_grid, 5.95))


def test_origin_maps_to_origin(cal, full_grid):
    for arm in ("signal", "idler"):
        k0, l0 = full_grid.k_axis(arm)[0], full_grid.lambda_axis(arm)[0]
        assert cal.physical_to_pixel(k0, l0, arm) == cal.origins[arm]


def test_pixel_steps(cal, full_grid):
    k0, l0 = full_grid.k_axis("signal")[0], full_grid.lambda_axis("signal")[0]
    r, c = cal.origins["signal"]
    assert cal.physical_to_pixel(k0 + 5.95, l0, "signal") == (r, c + 1)
    assert cal.physical_to_pixel(k0, l0 + 0.127, "signal") == (r + 1, c)


def test_round_trip_half_pixel(cal, full_grid, rng):
    for arm in ("signal", "idler"):
        ks, ls = full_grid.k_range(arm), full_grid.lambda_range(arm)
        for k, lam in zip(rng.uniform(*ks, 200), rng.uniform(*ls, 200)):
            r, c = cal.physical_to_pixel(k, lam, arm)
            k2, l2 = cal.pixel_to_physical(r, c, arm)
            assert abs(k2 - k) <= 0.5 * 5.95 + 1e-9
            assert abs(l2 - lam) <= 0.5 * 0.127 + 1e-9


def test_bin_to_pixel_matches_physical(cal, full_grid):
    b = full_grid.bin_index(12, 7)
    k, lam = full_grid.k_axis("idler")[12], full_grid.lambda_axis("idler")[7]
    assert cal.bin_to_pixel(b, "idler") == cal.physical_to_pixel(k, lam, "idler")


def test_out_of_window(cal, full_grid):
    k1 = full_grid.k_axis("signal")[-1]
    with pytest.raises(DomainError):
        cal.physical_to_pixel(k1 + 5.95, 800.0, "signal")
    with pytest.raises(DomainError):
        cal.physical_to_pixel(full_grid.k_axis("signal")[0], 790.0, "signal")


def test_grating_resolution(cal):
    assert abs(cal.resolution_nm - 2 * 400.0 / 1200) < 1e-9
    assert round(cal.resolution_nm, 2) == 0.67


def test_calibration_rejects_nonpositive(full_grid):
    with pytest.raises(ValueError):
        CalibrationMap(full_grid, {}, k_per_px=0.0)
