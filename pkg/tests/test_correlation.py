import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.stats import chisquare

from nvaperture.correlation import brute_force_g2, decay_histogram, g2_histogram
from nvaperture.emitter_mc import DetectionModel, EmitterModel, PhotonStream, simulate_cw, simulate_pulsed
from nvaperture.errors import DomainError, InsufficientDataError
from nvaperture.fitters import fit_g2, fit_multiexp


def _poisson_pair(rate, T, seed):
    rng = np.random.default_rng(seed)
    ta = np.sort(rng.uniform(0, T, rng.poisson(rate * T)))
    tb = np.sort(rng.uniform(0, T, rng.poisson(rate * T)))
    t = np.concatenate([ta, tb])
    c = np.concatenate([np.zeros(len(ta)), np.ones(len(tb))]).astype(np.uint8)
    o = np.argsort(t, kind="stable")
    return PhotonStream(t[o], c[o], T, seed)


@st.composite
def small_streams(draw):
    n = draw(st.integers(4, 400))
    seed = draw(st.integers(0, 2**31))
    rng = np.random.default_rng(seed)
    T = 1e-6
    # clustered times, and some repeating exactly and on bin edges
    t = np.sort(np.round(rng.uniform(0, T, n) / 1e-10) * 1e-10)
    c = rng.integers(0, 2, n).astype(np.uint8)
    c[:2], c[-2:] = 0, 1
    return PhotonStream(t, c, T, seed)


@given(s=small_streams(), bw=st.sampled_from([1e-9, 0.5e-9, 2.5e-10]),
       mult=st.integers(10, 60), blocks=st.integers(1, 7))
def test_fast_equals_brute_force(s, bw, mult, blocks):
    fast = g2_histogram(s, bw, mult * bw, blocks=blocks)
    ref = brute_force_g2(s, bw, mult * bw)
    assert np.array_equal(fast.counts, ref.counts)


def test_uncorrelated_light_normalizes_to_one():
    s = _poisson_pair(1e4, 100.0, seed=0)
    h = g2_histogram(s, 10e-9, 100e-9)
    # sigma of the null hypothesis: Poisson with the expected count per bin
    assert np.all(np.abs(h.g2 - 1) < 3 / math.sqrt(h.norm))


def test_two_level_antibunching():
    m = EmitterModel(1 / 10e-9, pump_rate_per_mW=1e8)
    s = simulate_cw(m, DetectionModel(), 0.5, 0.2, seed=4)
    h = g2_histogram(s, 1e-9, 100e-9)
    assert h.g2[h.half_bins] < 0.1
    assert fit_g2(h, "two_level")["g2_at_zero"] < 0.05


def test_background_mixing_central_bin():
    m = EmitterModel(1 / 10e-9, pump_rate_per_mW=1e8)
    sig = m.emission_rate(0.2)
    s = simulate_cw(m, DetectionModel(background_rate=0.25 * sig), 0.2, 1.0, seed=2)
    h = g2_histogram(s, 0.25e-9, 50e-9)
    c = h.half_bins
    assert abs(h.g2[c] - 0.36) < 3 * h.sigma[c] + 0.01  # + residual dip width of the bin


def test_symmetric_under_tau_reversal():
    m = EmitterModel(1 / 10e-9, 0, 1e7, 3e6, pump_rate_per_mW=1e8)
    s = simulate_cw(m, DetectionModel(), 1.0, 0.2, seed=6)
    h = g2_histogram(s, 2e-9, 200e-9)
    z = (h.counts - h.counts[::-1]) / np.sqrt(np.maximum(h.counts + h.counts[::-1], 1))
    assert np.all(np.abs(z) < 3.5)


def test_relabel_mirrors_histogram():
    s = simulate_cw(EmitterModel(1e8, pump_rate_per_mW=1e8), DetectionModel(), 1.0, 1e-3, 3)
    a = g2_histogram(s, 1e-9, 20e-9)
    b = g2_histogram(s.relabeled(), 1e-9, 20e-9)
    assert np.array_equal(a.counts, b.counts[::-1])


def test_empty_window_has_zero_counts():
    t = np.array([0.0, 1e-6, 2e-6, 3e-6])
    s = PhotonStream(t, np.array([0, 1, 0, 1]), 4e-6, 0)
    assert np.all(brute_force_g2(s, 1e-9, 100e-9).counts == 0)
    assert np.all(g2_histogram(s, 1e-9, 100e-9).counts == 0)


def test_block_count_never_changes_counts():
    s = simulate_cw(EmitterModel(1e8, 0, 1e7, 3e6, 1e8), DetectionModel(0.5, 1e4), 1.0, 0.05, 1)
    a = g2_histogram(s, 1e-9, 200e-9, blocks=1)
    for b in (2, 3, 8, 50):
        assert np.array_equal(a.counts, g2_histogram(s, 1e-9, 200e-9, blocks=b).counts)


@settings(max_examples=10)
@given(c=st.sampled_from([0.5, 2.0, 8.0]))
def test_time_scaling_invariance(c):
    s = simulate_cw(EmitterModel(1e8, pump_rate_per_mW=1e8), DetectionModel(), 1.0, 2e-3, 7)
    a = g2_histogram(s, 1e-9, 20e-9)
    # scale by an exact power of two where possible so binning is unchanged
    scaled = PhotonStream(s.times * c, s.channels, s.duration * c, s.seed)
    b = g2_histogram(scaled, 1e-9 * c, 20e-9 * c)
    assert np.array_equal(a.counts, b.counts)
    assert np.allclose(a.g2, b.g2, rtol=1e-12)


def test_errors():
    s = PhotonStream(np.array([0.0, 1.0]), np.array([0, 0]), 2.0, 0)
    with pytest.raises(InsufficientDataError):
        g2_histogram(s, 1e-9, 1e-8)
    big = PhotonStream(np.linspace(0, 1, 100_001), np.arange(100_001) % 2, 1.0, 0)
    with pytest.raises(DomainError):
        brute_force_g2(big)
    with pytest.raises(DomainError):
        g2_histogram(big, 1e-9, 5e-9)
    with pytest.raises(DomainError):
        decay_histogram(big)


# ---------------------------------------------------------------- decay histograms

def test_photons_at_triggers_land_in_bin_zero():
    trig = np.arange(100) * 1e-7
    s = PhotonStream(trig.copy(), np.zeros(100), 1e-5, 0, triggers=trig)
    h = decay_histogram(s, bin_width=1e-9)
    assert h.counts[0] == 100 and h.counts[1:].sum() == 0


def test_pulsed_lifetime_recovered():
    m = EmitterModel(1 / 16.7e-9)
    s = simulate_pulsed(m, DetectionModel(), 10.8e6, 0.05, 1.0, seed=12)
    res = fit_multiexp(decay_histogram(s, bin_width=0.1e-9), 1)
    assert abs(res["tau1"] / 16.7e-9 - 1) < 0.02


def test_background_only_is_flat():
    s = simulate_pulsed(EmitterModel(1e8), DetectionModel(background_rate=2e5), 10.8e6, 0.0,
                        0.5, seed=3)
    h = decay_histogram(s, bin_width=2e-9)
    full = h.counts[:-1]  # the last bin is shorter than the others
    assert chisquare(full).pvalue > 0.01


def test_decay_counts_sum_to_photons_in_span():
    s = simulate_pulsed(EmitterModel(1e8), DetectionModel(background_rate=1e5), 10.8e6, 0.1,
                        0.05, seed=9)
    h = decay_histogram(s, bin_width=0.1e-9)
    span = (s.times >= s.triggers[0]) & (s.times < s.triggers[-1] + 1 / 10.8e6)
    assert h.counts.sum() == int(span.sum())
    assert np.all(h.counts >= 0)


def test_histogram_csv_headers(tmp_path):
    s = simulate_cw(EmitterModel(1e8, pump_rate_per_mW=1e8), DetectionModel(), 1.0, 1e-3, 3)
    g2_histogram(s, 1e-9, 20e-9).to_csv(tmp_path / "g.csv")
    assert (tmp_path / "g.csv").read_text().splitlines()[0] == "tau_ns,g2,poisson_sigma,counts"
