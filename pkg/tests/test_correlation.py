import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from biphoton import sumcoords
from biphoton.correlation import (
    G2SumMap,
    CorrelationAccumulator,
    autocorrelation,
    correlation_maps,
    covariance,
    covariance_matrix,
    default_subregions,
    efficiency_estimate,
    g2_full,
    g2_full_matrix,
    g2_sum_coordinates,
    mode_size_from_fit_sigma,
    mode_sizes,
    region_summed_cov_kk,
    region_summed_cov_ll,
)
from biphoton.errors import FitError
from biphoton.fitting import gaussian
from biphoton.frames import CameraFrame, FrameBatch
from biphoton.framesim import PairSampler, SimulationConfig, build_pair_sampler, generate_frames
from biphoton.params import GridSpec
from biphoton.spdc import summed_intensity_kk

ONE = GridSpec(n_k=1, n_lambda=1)
G = GridSpec(n_k=3, n_lambda=4)


def acc_from(grid, batch):
    return CorrelationAccumulator(grid).ingest_batch(batch)


def bernoulli_batch(xs, ys):
    xs, ys = np.asarray(xs, bool), np.asarray(ys, bool)
    n = xs.size
    return FrameBatch.from_counts(
        np.arange(n), xs.astype(int), np.zeros(xs.sum(), np.uint32), ys.astype(int), np.zeros(ys.sum(), np.uint32)
    )


@pytest.fixture(scope="module")
def sim_batch(small_amplitude):
    cfg = SimulationConfig(temporal_modes=20, pair_prob=0.05, efficiency=0.5, dark_count_rate=0.01, seed=1)
    return generate_frames(cfg, build_pair_sampler(small_amplitude), 0, 20_000)


# ingestion -------------------------------------------------------------------


def test_empty_frame_only_counts_frames():
    acc = CorrelationAccumulator(G).ingest_frame(CameraFrame(0))
    assert acc.n_frames == 1
    assert acc.singles_s.sum() == acc.singles_i.sum() == acc.coincidences.sum() == 0


def test_single_pair_frame():
    acc = CorrelationAccumulator(G).ingest_frame(CameraFrame(0, (3,), (7,)))
    assert acc.singles_s[3] == 1 and acc.singles_i[7] == 1
    assert acc.coincidences[3, 7] == 1 and acc.coincidences.sum() == 1


def test_all_pairs_within_frame():
    acc = CorrelationAccumulator(G).ingest_frame(CameraFrame(0, (1, 2), (5,)))
    assert acc.coincidences[1, 5] == 1 and acc.coincidences[2, 5] == 1
    assert acc.coincidences.sum() == 2


def test_out_of_range_names_frame():
    acc = CorrelationAccumulator(G)
    batch = FrameBatch.from_frames([CameraFrame(40, (1,), ()), CameraFrame(41, (), (12,))])
    with pytest.raises(IndexError, match="frame 41"):
        acc.ingest_batch(batch)
    assert acc.n_frames == 0


def test_ingest_frames_equals_batch(sim_batch, small_grid):
    a = acc_from(small_grid, sim_batch)
    b = CorrelationAccumulator(small_grid).ingest(list(sim_batch)[:7000]).ingest([sim_batch.slice(7000, len(sim_batch))])
    assert a.equals(b)


def test_accumulator_invariants(sim_batch, small_grid):
    acc = acc_from(small_grid, sim_batch)
    assert np.all(acc.coincidences <= np.minimum.outer(acc.singles_s, acc.singles_i))
    assert acc.singles_s.max() <= acc.n_frames
    assert acc.moment(1, 0) == acc.singles_s.sum()
    assert acc.moment(1, 1) == acc.coincidences.sum()


# merge -----------------------------------------------------------------------


def test_merge_identity_and_commutativity(sim_batch, small_grid):
    a = acc_from(small_grid, sim_batch.slice(0, 9000))
    b = acc_from(small_grid, sim_batch.slice(9000, 20_000))
    assert a.merge(CorrelationAccumulator(small_grid)).equals(a)
    assert a.merge(b).equals(b.merge(a))
    assert a.merge(b).equals(acc_from(small_grid, sim_batch))


def test_merge_halves_of_ten_thousand(sim_batch, small_grid):
    serial = acc_from(small_grid, sim_batch.slice(0, 10_000))
    halves = acc_from(small_grid, sim_batch.slice(0, 5000)).merge(acc_from(small_grid, sim_batch.slice(5000, 10_000)))
    assert serial.equals(halves)


@settings(max_examples=25, deadline=None)
@given(data=st.data())
def test_merge_random_partitions(sim_batch, small_grid, data):
    n = 3000
    cuts = sorted(data.draw(st.lists(st.integers(0, n), max_size=6)))
    bounds = [0, *cuts, n]
    parts = [acc_from(small_grid, sim_batch.slice(a, b)) for a, b in zip(bounds, bounds[1:])]
    order = data.draw(st.permutations(range(len(parts))))
    merged = CorrelationAccumulator(small_grid)
    for i in order:
        merged = merged.merge(parts[i])
    assert merged.equals(acc_from(small_grid, sim_batch.slice(0, n)))


def test_merge_grid_mismatch():
    with pytest.raises(ValueError):
        CorrelationAccumulator(G).merge(CorrelationAccumulator(ONE))


# covariance --------------------------------------------------------------------


def test_covariance_perfectly_correlated_half():
    x = np.arange(1000) % 2 == 0
    acc = acc_from(ONE, bernoulli_batch(x, x))
    assert covariance(acc, 0, 0) == 0.25


def test_covariance_independent_streams(rng):
    n, p = 1_000_000, 0.3
    acc = acc_from(ONE, bernoulli_batch(rng.random(n) < p, rng.random(n) < p))
    sd = math.sqrt(p * (1 - p) * p * (1 - p) / n)
    assert abs(covariance(acc, 0, 0)) < 5 * sd


def test_covariance_needs_two_frames():
    acc = CorrelationAccumulator(ONE).ingest_frame(CameraFrame(0, (0,), (0,)))
    with pytest.raises(ValueError):
        covariance(acc, 0, 0)


def test_region_sums(sim_batch, small_grid):
    acc = acc_from(small_grid, sim_batch)
    c4 = covariance_matrix(acc).reshape(small_grid.shape)
    assert np.allclose(region_summed_cov_kk(acc, [2], [3]), c4[:, 2, :, 3], atol=1e-15)
    assert np.allclose(region_summed_cov_ll(acc, [1], [6]), c4[1, :, 6, :], atol=1e-15)
    full = region_summed_cov_kk(acc, slice(None), slice(None))
    assert np.allclose(full, c4.sum(axis=(1, 3)), atol=1e-12)
    assert np.allclose(region_summed_cov_ll(acc, slice(None), slice(None)), c4.sum(axis=(0, 2)), atol=1e-12)
    with pytest.raises(ValueError, match="empty"):
        region_summed_cov_kk(acc, [], [0])


def test_cov_kk_anti_diagonal_matches_model(small_amplitude, small_grid):
    cfg = SimulationConfig(temporal_modes=20, pair_prob=0.1, efficiency=0.6, seed=2)
    acc = acc_from(small_grid, generate_frames(cfg, build_pair_sampler(small_amplitude), 0, 200_000))
    for region in default_subregions(small_grid.n_lambda, 2):
        cov = region_summed_cov_kk(acc, region, region)
        theory = summed_intensity_kk(small_amplitude, region, region)
        j, l = np.unravel_index(np.argmax(cov), cov.shape)
        tj, tl = np.unravel_index(np.argmax(theory), theory.shape)
        # mirrored windows: k_s = -k_i is j + l = n_k - 1
        assert abs(j + l - (small_grid.n_k - 1)) <= 1
        assert abs(j - tj) <= 1 and abs(l - tl) <= 1


def test_frame_duplication_invariance(sim_batch, small_grid):
    one = acc_from(small_grid, sim_batch)
    two = acc_from(small_grid, sim_batch).ingest_batch(sim_batch)
    assert np.array_equal(covariance_matrix(one), covariance_matrix(two))
    g1, g2 = g2_sum_coordinates(one), g2_sum_coordinates(two)
    assert np.array_equal(g1.values.filled(-1), g2.values.filled(-1))
    assert np.array_equal(g2_full_matrix(one).filled(-1), g2_full_matrix(two).filled(-1))


# g2 --------------------------------------------------------------------------------


def test_g2_full_independent_is_one(rng):
    n, p = 1_000_000, 0.2
    acc = acc_from(ONE, bernoulli_batch(rng.random(n) < p, rng.random(n) < p))
    g = g2_full(acc, 0, 0)
    # relative error of the coincidence rate dominates
    assert abs(g - 1) < 5 / math.sqrt(n * p * p)


def test_g2_full_masks_empty_bins():
    acc = acc_from(G, FrameBatch.from_frames([CameraFrame(0, (1,), (2,)), CameraFrame(1, (1,), ())]))
    assert g2_full(acc, 0, 2) is np.ma.masked
    assert g2_full(acc, 1, 2) == pytest.approx(1.0)
    m = g2_full_matrix(acc)
    assert m.mask.sum() == G.n_bins**2 - 1
    assert not np.isnan(m.filled(0)).any()


def _enumerate_single_bin(R, chi, eta, clamp=True):
    """Exact moments of the one-bin model by listing every mode outcome."""
    outcomes = {"both": chi * eta * eta, "s": chi * eta * (1 - eta), "i": chi * (1 - eta) * eta}
    outcomes["none"] = 1 - sum(outcomes.values())
    es = ei = esi = 0.0
    for combo in itertools.product(outcomes, repeat=R):
        p = math.prod(outcomes[c] for c in combo)
        ns = sum(c in ("both", "s") for c in combo)
        ni = sum(c in ("both", "i") for c in combo)
        if clamp:
            ns, ni = min(ns, 1), min(ni, 1)
        es += p * ns
        ei += p * ni
        esi += p * ns * ni
    return esi / (es * ei)


@pytest.mark.parametrize("chi,eta", [(0.3, 1.0), (0.1, 0.5), (0.5, 0.2)])
def test_g2_single_bin_closed_forms(chi, eta):
    R = 2
    # unclamped counts: 1 + (1 - chi)/(R chi), independent of eta
    assert _enumerate_single_bin(R, chi, eta, clamp=False) == pytest.approx(1 + (1 - chi) / (R * chi), rel=1e-12)
    # Geiger clamp on the single bin
    q = 1 - chi * eta
    p_s = 1 - q**R
    p_si = 1 - 2 * q**R + (1 - 2 * chi * eta + chi * eta * eta) ** R
    assert _enumerate_single_bin(R, chi, eta) == pytest.approx(p_si / p_s**2, rel=1e-12)


@pytest.mark.parametrize("chi,eta", [(0.3, 1.0), (0.1, 0.5)])
def test_g2_simulator_matches_enumeration(chi, eta):
    cfg = SimulationConfig(temporal_modes=2, pair_prob=chi, efficiency=eta, seed=4)
    batch = generate_frames(cfg, PairSampler.from_weights(np.ones((1, 1))), 0, 1_000_000)
    acc = acc_from(ONE, batch)
    g = g2_full(acc, 0, 0)
    expected = _enumerate_single_bin(2, chi, eta)
    c = acc.coincidences[0, 0]
    assert abs(g - expected) < 5 * g / math.sqrt(c)


def _flat_z(g, level):
    ok = g.coincidence_counts >= 100
    return np.abs((g.values[ok] - level) / g.errors[ok]).max()


def test_g2_sum_flat_for_independent_streams(small_grid):
    # uncorrelated arms: dark counts only
    cfg = SimulationConfig(efficiency=0.0, dark_count_rate=0.3, seed=6)
    acc = acc_from(small_grid, generate_frames(cfg, build_pair_sampler_uniform(small_grid), 0, 200_000))
    assert _flat_z(g2_sum_coordinates(acc), 1.0) < 5


def test_g2_sum_flat_for_uncorrelated_bins(small_grid):
    # pairs with independent bins keep the photon-number correlation of a shared
    # temporal mode: g2 = 1 + 1/(R chi) - 1/R everywhere
    s = PairSampler.independent(np.ones(small_grid.n_bins), np.ones(small_grid.n_bins))
    cfg = SimulationConfig(temporal_modes=20, pair_prob=0.1, efficiency=0.5, seed=6)
    acc = acc_from(small_grid, generate_frames(cfg, s, 0, 200_000))
    assert _flat_z(g2_sum_coordinates(acc), 1 + 1 / (20 * 0.1) - 1 / 20) < 5


def test_g2_sum_masks_without_nan():
    acc = acc_from(G, FrameBatch.from_frames([CameraFrame(0, (0,), (0,)), CameraFrame(1)]))
    g = g2_sum_coordinates(acc)
    assert g.values.mask.sum() == g.values.size - 1
    assert not np.isnan(g.values.filled(0)).any()
    assert not np.isnan(g.errors.filled(0)).any()
    assert g.contributors.sum() == G.n_bins**2
    with pytest.raises(ValueError):
        g.peak(min_counts=5)


# mode sizes ------------------------------------------------------------------------


def test_mode_size_jacobian():
    assert round(mode_size_from_fit_sigma(10.02), 2) == 7.09


def test_mode_sizes_on_synthetic_map():
    g = GridSpec(n_k=30, n_lambda=20, k_step=2.0, lambda_step=0.5, signal_center=(0.0, 800.0), idler_center=(0.0, 800.0))
    kp, lp = sumcoords.axes(g)
    values = 1 + np.outer(gaussian(kp, 2.0, 0.0, 8.0), gaussian(lp, 1.0, 1600.0, 3.0))
    gm = G2SumMap(
        values=np.ma.MaskedArray(values, mask=np.zeros(values.shape, bool)),
        coincidence_counts=np.full(values.shape, 10**6),
        denominator=np.ones(values.shape),
        contributors=sumcoords.contributors(g.n_k, g.n_lambda),
        k_plus=kp,
        lambda_plus=lp,
        n_frames=10**9,
    )
    ms = mode_sizes(gm, lambda_plus_center=1600.0)
    assert ms.sigma_k_mode == pytest.approx(8.0 / math.sqrt(2), rel=1e-8)
    assert ms.sigma_lambda_mode == pytest.approx(3.0 / math.sqrt(2), rel=1e-8)


def test_mode_sizes_flat_map_fails(small_grid):
    s = PairSampler.independent(np.ones(small_grid.n_bins), np.ones(small_grid.n_bins))
    acc = acc_from(small_grid, generate_frames(SimulationConfig(seed=8), s, 0, 10_000))
    g = g2_sum_coordinates(acc)
    g.values = np.ma.MaskedArray(np.ones(g.values.shape), mask=np.zeros(g.values.shape, bool))
    with pytest.raises(FitError, match="cross-section"):
        mode_sizes(g, lambda_plus_center=1600.0)


# efficiency and autocorrelation -------------------------------------------------


def test_efficiency_dark_only_is_zero(small_grid):
    cfg = SimulationConfig(efficiency=0.0, dark_count_rate=0.05, seed=9)
    acc = acc_from(small_grid, generate_frames(cfg, build_pair_sampler_uniform(small_grid), 0, 200_000))
    eta, err = efficiency_estimate(acc)
    assert abs(eta) < 5 * err


def build_pair_sampler_uniform(grid):
    return PairSampler.from_weights(np.ones((grid.n_bins, grid.n_bins)))


def test_efficiency_exact_model(small_amplitude, small_grid):
    cfg = SimulationConfig.calibrated(efficiency=0.2, seed=10)
    acc = acc_from(small_grid, generate_frames(cfg, build_pair_sampler(small_amplitude), 0, 1_000_000))
    eta, err = efficiency_estimate(acc)
    assert abs(eta - 0.2) / 0.2 < 0.2
    # the covariance form measures eta * (1 - chi) under Bernoulli pair emission
    assert abs(eta - 0.2 * (1 - cfg.pair_prob)) < 5 * err


def test_efficiency_needs_detections():
    acc = acc_from(ONE, bernoulli_batch(np.zeros(10), np.ones(10)))
    with pytest.raises(ValueError):
        efficiency_estimate(acc)


def test_autocorrelation_classical(sim_batch, small_grid):
    acc = acc_from(small_grid, sim_batch)
    for arm in ("signal", "idler"):
        g, err = autocorrelation(acc, arm)
        assert err > 0
        assert g <= 2 + 5 * err


def test_autocorrelation_poisson_like():
    # Bernoulli(p) photon numbers: <n(n-1)> = 0, so g = 0 exactly
    acc = acc_from(ONE, bernoulli_batch(np.arange(100) % 3 == 0, np.zeros(100)))
    assert autocorrelation(acc, "signal")[0] == 0.0


def test_autocorrelation_delta_method_error(rng):
    # Poisson photon numbers: g -> 1, error checked against replicate spread
    reps = []
    errs = []
    for r in range(30):
        n = rng.poisson(0.5, 5000)
        counts_i = np.zeros(5000, int)
        acc = CorrelationAccumulator(GridSpec(n_k=8, n_lambda=1))
        bins = np.concatenate([np.arange(k) for k in n]).astype(np.uint32)
        acc.ingest_batch(FrameBatch.from_counts(np.arange(5000), n, bins, counts_i, np.zeros(0, np.uint32)))
        g, e = autocorrelation(acc, "signal")
        reps.append(g)
        errs.append(e)
    assert np.mean(reps) == pytest.approx(1.0, abs=3 * np.std(reps) / math.sqrt(30))
    assert np.mean(errs) == pytest.approx(np.std(reps, ddof=1), rel=0.35)


# estimator consistency ---------------------------------------------------------------


def test_covariance_converges_to_model(small_amplitude, small_grid):
    cfg = SimulationConfig(temporal_modes=4, pair_prob=0.05, efficiency=0.5, seed=12)
    s = build_pair_sampler(small_amplitude)
    P = s.probabilities.reshape(small_grid.n_bins, small_grid.n_bins)
    Ps, Pi = P.sum(axis=1), P.sum(axis=0)
    R, chi, eta = cfg.temporal_modes, cfg.pair_prob, cfg.efficiency
    model = R * (chi * eta**2 * P - chi**2 * eta**2 * np.outer(Ps, Pi))
    errors = []
    for n in (10_000, 100_000, 1_000_000):
        cov = covariance_matrix(acc_from(small_grid, generate_frames(cfg, s, 0, n)))
        errors.append(np.linalg.norm(cov - model) / np.linalg.norm(model))
    assert errors[0] > errors[1] > errors[2]
    # roughly 1/sqrt(N): a decade in N buys about a factor 3
    assert errors[0] / errors[2] > 5


def test_correlation_maps_layout(sim_batch, small_grid):
    maps = correlation_maps(acc_from(small_grid, sim_batch), parts=2)
    assert set(maps.cov_kk) == {(0, 0), (0, 1), (1, 0), (1, 1)}
    assert maps.cov_kk[0, 1].shape == (small_grid.n_k, small_grid.n_k)
    assert maps.cov_ll[1, 0].shape == (small_grid.n_lambda, small_grid.n_lambda)
    assert all(np.isfinite(m).all() for m in maps.cov_kk.values())
    assert maps.g2_sum.values.shape == (2 * small_grid.n_k - 1, 2 * small_grid.n_lambda - 1)
    assert (maps.g2_sum.values.compressed() >= 0).all()
