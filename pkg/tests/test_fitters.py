import json
import math
import warnings

import numpy as np
import pytest

from nvaperture.correlation import G2Histogram, DecayHistogram, g2_histogram
from nvaperture.emitter_mc import DetectionModel, EmitterModel, analytic_g2, simulate_cw
from nvaperture.errors import DomainError, ModelEvaluationError
from nvaperture.fitters import (REGISTRY, ModelSpec, finite_difference_jacobian, fit_fano,
                                fit_g2, fit_multiexp, fit_multiexp_arrays, fit_odmr,
                                fit_saturation, least_squares, saturation_signal)
from nvaperture.fitters.models import fano_model, g2_binned, multiexp_model, odmr_model
from nvaperture.fitters.synthetic import fano_spectrum, odmr_spectrum

RNG = np.random.default_rng(2024)


def test_line_exact_in_two_iterations():
    spec = ModelSpec("line", lambda x, p: p[0] + p[1] * x, ("b", "m"), [-np.inf] * 2,
                     [np.inf] * 2, lambda x, p: np.stack([np.ones_like(x), x], -1))
    x = np.linspace(0, 10, 11)
    res = least_squares(spec, x, 3.0 - 0.5 * x, p0=[0.0, 0.0])
    assert res.converged and res.iterations <= 2
    assert np.allclose(res.values, [3.0, -0.5], rtol=1e-9, atol=1e-9)


def test_noiseless_exponential():
    spec = ModelSpec("exp", lambda x, p: np.exp(-x / p[0]), ("tau",), [1e-6], [1e6])
    x = np.linspace(0, 10, 50)
    res = least_squares(spec, x, np.exp(-x / 2), p0=[1.0])
    assert abs(res["tau"] - 2) < 1e-6


def test_nan_residual_names_parameters():
    spec = ModelSpec("bad", lambda x, p: np.log(p[0] - x), ("a",), [-10.0], [10.0])
    with pytest.raises(ModelEvaluationError, match="a|\\["):
        least_squares(spec, np.linspace(0, 5, 10), np.zeros(10), p0=[1.0])


def test_singular_problem_flags_nonconvergence():
    # two parameters that only ever appear as a sum
    spec = ModelSpec("deg", lambda x, p: (p[0] + p[1]) * x, ("a", "b"), [-np.inf] * 2,
                     [np.inf] * 2, lambda x, p: np.stack([x, x], -1))
    res = least_squares(spec, np.linspace(1, 2, 10), np.linspace(1, 2, 10), p0=[0.0, 0.0])
    assert np.all(res.sigmas >= 0) or np.any(np.isnan(res.sigmas))


# ---------------------------------------------------------------- Jacobians

def _random_point(name):
    u = RNG.uniform
    if name.startswith("g2"):
        t1 = u(1e-9, 30e-9)
        return np.linspace(-100e-9, 100e-9, 81), [t1, u(2, 50) * t1, u(0, 3), u(0, 0.8)]
    if name.startswith("multiexp"):
        n = int(name[-1])
        p = []
        for i in range(n):
            p += [u(10, 1e4), u(1e-9, 60e-9)]
        return np.linspace(0, 90e-9, 91), p + [u(0, 50)]
    if name == "saturation":
        P = np.tile(np.linspace(0.1, 8, 10), 2)
        x = np.column_stack([P, np.repeat([1.0, 0.0], 10)])
        return x, [u(1e3, 2e5), u(0.2, 5), u(0, 1e4), u(0, 1e3)]
    if name == "fano":
        lam0, Q = u(650, 800), u(3, 20)
        return np.linspace(lam0 - 3 * lam0 / Q, lam0 + 3 * lam0 / Q, 81), \
            [lam0, Q, u(-10, 10), u(0.1, 5), u(-1, 1)]
    if name == "odmr":
        f0, G = u(2.8, 2.95), u(0.002, 0.05)
        return np.linspace(f0 - 8 * G, f0 + 8 * G, 81), [f0, G, u(0.01, 0.5)]
    raise KeyError(name)


@pytest.mark.parametrize("name", sorted(REGISTRY))
def test_jacobian_matches_finite_difference(name):
    spec = REGISTRY[name]
    assert spec.analytic_jacobian
    for _ in range(100):
        x, p = _random_point(name)
        p = np.clip(np.asarray(p, float), spec.lower, spec.upper)
        Ja = spec.jacobian(x, p)
        Jf = finite_difference_jacobian(spec.func, x, p, rel_step=1e-6)
        scale = np.maximum(np.max(np.abs(Jf), axis=0), 1e-300)
        assert np.max(np.abs(Ja - Jf) / scale) < 1e-4


@pytest.mark.parametrize("name", sorted(REGISTRY))
def test_bounds_consistent_and_init_inside(name):
    spec = REGISTRY[name]
    assert np.all(spec.lower <= spec.upper)
    x, p = _random_point(name)
    y = spec.func(x, np.asarray(p, float))
    p0 = np.asarray(spec.init(x, y), float)
    assert np.all(p0 >= spec.lower) and np.all(p0 <= spec.upper)


# ---------------------------------------------------------------- noiseless recovery

def _recover(spec_name, x, p, fitter):
    spec = REGISTRY[spec_name]
    y = spec.func(x, np.asarray(p, float))
    return fitter(x, y)


def test_noiseless_recovery_all_models():
    # g2
    tau = np.arange(-150, 151) * 1e-9
    p = [6e-9, 80e-9, 0.6, 0.0]
    y = g2_binned(tau, p, 1e-9)
    h = G2Histogram(1e-9, y * 1e4, 1e4, 1e4, 1e5)  # norm = 1e4 counts
    r = fit_g2(h, "three_level")
    assert np.allclose(r.values, p, rtol=1e-4, atol=1e-6)
    # multi-exponential (1, 2 and 3 components)
    t = np.arange(0, 925) * 0.1e-9 + 0.05e-9
    for p in ([1e4, 16.7e-9, 5.0], [3e3, 1.5e-9, 9e3, 37.17e-9, 2.0],
              [2e3, 1e-9, 4e3, 6e-9, 6e3, 40e-9, 1.0]):
        r = fit_multiexp_arrays(t, multiexp_model(t, p), (len(p) - 1) // 2,
                                sigma=np.ones_like(t))
        assert np.allclose(r.values, p, rtol=1e-4)
    # saturation
    P = np.array([0.1, 0.25, 0.5, 1, 1.5, 2, 3, 4, 6, 8])
    I, Ps, k, b = 1.01e5, 1.18, 8e3, 50.0
    r = fit_saturation(P, saturation_signal(P, I, Ps) + k * P + b, P, k * P + b,
                       np.ones_like(P), np.ones_like(P))
    assert np.allclose(r.values, [I, Ps, k, b], rtol=1e-4)
    # Fano
    lam, y, _ = fano_spectrum(715.0, 10.0, noise=0.0)
    r = fit_fano(lam, y)
    assert np.allclose(r.values, [715.0, 10.0, 3.0, 1.0, 0.1], rtol=1e-4)
    # ODMR
    f, y, _ = odmr_spectrum(noise=0.0)
    r = fit_odmr(f, y)
    assert np.allclose(r.values, [2.87, 0.01, 0.183], rtol=1e-4)


def test_reordering_invariance():
    lam, y, s = fano_spectrum(705.0, 7.0, seed=3)
    a = fit_fano(lam, y, s)
    perm = RNG.permutation(len(lam))
    b = fit_fano(lam[perm], y[perm], s[perm])
    assert np.allclose(a.values, b.values, rtol=1e-6)
    f, y, s = odmr_spectrum(seed=5)
    perm = RNG.permutation(len(f))
    assert np.allclose(fit_odmr(f, y, s).values, fit_odmr(f[perm], y[perm], s[perm]).values,
                       rtol=1e-6)
    t = np.arange(0, 500) * 0.2e-9
    c = RNG.poisson(multiexp_model(t, [1e3, 16.7e-9, 3.0])).astype(float)
    perm = RNG.permutation(len(t))
    a = fit_multiexp_arrays(t, c, 1)
    b = fit_multiexp_arrays(t[perm], c[perm], 1)
    assert np.allclose(a.values, b.values, rtol=1e-6)


# ---------------------------------------------------------------- chi-square calibration

def _trial(model, rng):
    if model == "g2":
        tau = np.arange(-100, 101) * 1e-9
        mean = 500 * g2_binned(tau, [6e-9, 60e-9, 0.5, 0.0], 1e-9)
        h = G2Histogram(1e-9, rng.poisson(mean), math.sqrt(500), math.sqrt(500), 1e9)
        return fit_g2(h, "three_level")
    if model == "multiexp":
        t = np.arange(0, 925) * 0.1e-9 + 0.05e-9
        mean = multiexp_model(t, [400.0, 1.5e-9, 1200.0, 37.17e-9, 20.0])
        return fit_multiexp_arrays(t, rng.poisson(mean).astype(float), 2)
    if model == "saturation":
        P = np.array([0.1, 0.25, 0.5, 0.75, 1, 1.5, 2, 3, 4, 6, 8])
        bg = 0.1 * 1.01e5 / 1.18 * P
        tot = rng.poisson(saturation_signal(P, 1.01e5, 1.18) + bg)
        nb = rng.poisson(bg)
        return fit_saturation(P, tot, P, nb, np.sqrt(np.maximum(tot, 1)),
                              np.sqrt(np.maximum(nb, 1)))
    if model == "fano":
        lam, y, s = fano_spectrum(715.0, 10.0, peak_counts=1e4, seed=int(rng.integers(2**31)))
        return fit_fano(lam, y, s)
    f, y, s = odmr_spectrum(counts=1e5, seed=int(rng.integers(2**31)))
    return fit_odmr(f, y, s)


@pytest.mark.parametrize("model", ["g2", "multiexp", "saturation", "fano", "odmr"])
def test_reduced_chi2_calibrated(model):
    rng = np.random.default_rng(99)
    chi = np.array([_trial(model, rng).red_chi2 for _ in range(100)])
    # saturation has 22 points and 4 parameters: chi2/18 has sd 0.33, so use its quantiles
    if model == "saturation":
        from scipy.stats import chi2
        lo, hi = chi2.ppf([0.01, 0.99], 18) / 18
        assert np.mean((chi >= lo) & (chi <= hi)) >= 0.9
    else:
        assert np.mean((chi >= 0.7) & (chi <= 1.3)) >= 0.9


# ---------------------------------------------------------------- model-specific

def test_g2_fit_from_stream_antibunching_time():
    tau = 5.65e-9
    m = EmitterModel(1 / tau, pump_rate_per_mW=1 / tau)
    s = simulate_cw(m, DetectionModel(), 1.0, 0.5, seed=31)
    res = fit_g2(g2_histogram(s, 0.5e-9, 60e-9), "two_level")
    predicted = analytic_g2(m, 1.0).tau1
    assert abs(res["tau1"] / predicted - 1) < 0.05


def test_g2_mixed_stream():
    m = EmitterModel(1 / 10e-9, pump_rate_per_mW=1e8)
    sig = m.emission_rate(0.3)
    rho = 0.6
    s = simulate_cw(m, DetectionModel(background_rate=sig * (1 / rho - 1)), 0.3, 0.5, seed=8)
    res = fit_g2(g2_histogram(s, 1e-9, 100e-9), "two_level")
    assert abs(res["g2_at_zero"] - 0.64) < 0.05


def _poisson_g2(p, seed, norm=400.0, bw=2e-9, half=100):
    tau = np.arange(-half, half + 1) * bw
    counts = np.random.default_rng(seed).poisson(norm * g2_binned(tau, p, bw)).astype(float)
    return G2Histogram(bw, counts, 1e4, 1e4, norm / (1e8 * bw))


def test_g2_auto_selects_nested_model():
    # weak bunching (two emitters halve it) must still pick the three-level form
    bunched = [fit_g2(_poisson_g2([15e-9, 200e-9, 0.25, 0.5], 400 + i)) for i in range(10)]
    assert all(r.derived["submodel"] == "three_level" for r in bunched)
    assert abs(np.mean([r["g2_at_zero"] for r in bunched]) - 0.5) < 0.02
    # pure antibunching: the chi2 gain is chi2(2)-distributed, 1% false-positive rate
    plain = [fit_g2(_poisson_g2([15e-9, 200e-9, 0.0, 0.0], 500 + i)) for i in range(10)]
    assert sum(r.derived["submodel"] == "two_level" for r in plain) >= 8


def test_g2_needs_normalized_histogram():
    h = G2Histogram(1e-9, np.ones(21), 1.0, 1.0, 1.0, normalized=False)
    with pytest.raises(DomainError):
        fit_g2(h)


def test_multiexp_fast_background_plus_bare():
    rng = np.random.default_rng(5)
    t = np.arange(0, 925) * 0.1e-9 + 0.05e-9
    A_slow = 2000.0
    # amplitudes 1:3 (fast : slow)
    y = rng.poisson(multiexp_model(t, [A_slow / 3, 1.5e-9, A_slow, 37.17e-9, 5.0]))
    res = fit_multiexp_arrays(t, y.astype(float), 2)
    assert abs(res["tau2"] / 37.17e-9 - 1) < 0.03
    assert res["tau1"] < res["tau2"]


def test_multiexp_single_noiseless_exact():
    t = np.linspace(0, 90e-9, 400)
    res = fit_multiexp_arrays(t, multiexp_model(t, [5e3, 16.7e-9, 0.0]) + 1e-300, 1,
                              sigma=np.ones_like(t))
    assert abs(res["tau1"] / 16.7e-9 - 1) < 1e-6


def test_multiexp_poisson_1e5_counts():
    rng = np.random.default_rng(11)
    t = np.arange(0, 925) * 0.1e-9 + 0.05e-9
    shape = np.exp(-t / 16.7e-9)
    mean = 1e5 * shape / shape.sum()
    h = DecayHistogram(0.1e-9, rng.poisson(mean), 10**6, 92.6e-9)
    res = fit_multiexp(h, 1)
    assert abs(res["tau1"] / 16.7e-9 - 1) < 0.02


def test_multiexp_degenerate_warns():
    t = np.arange(0, 925) * 0.1e-9
    y = multiexp_model(t, [1e3, 10e-9, 1e3, 12e-9, 1.0])
    with warnings.catch_warnings(record=True) as w:
        warnings.simplefilter("always")
        res = fit_multiexp_arrays(t, y, 2, sigma=np.ones_like(t))
    if "ill_conditioned" in res.flags:
        assert any("1.5" in str(x.message) for x in w)
    with pytest.raises(DomainError):
        fit_multiexp(DecayHistogram(1e-9, np.ones(50, int), 1, 5e-8), 4)


@pytest.mark.parametrize("I_sat,P_sat", [(1.01e5, 1.18), (1.24e4, 1.45)])
def test_saturation_recovery(I_sat, P_sat):
    rng = np.random.default_rng(int(I_sat))
    P = np.array([0.1, 0.25, 0.5, 0.75, 1, 1.5, 2, 3, 4, 6, 8])
    bg = 0.1 * I_sat / P_sat * P
    tot = rng.poisson(saturation_signal(P, I_sat, P_sat) + bg)
    nb = rng.poisson(bg)
    res = fit_saturation(P, tot, P, nb)
    assert abs(res["I_sat"] / I_sat - 1) < 0.03
    assert abs(res["P_sat"] / P_sat - 1) < 0.03


def test_saturation_model_half_point():
    assert saturation_signal(1.18, 1.01e5, 1.18) == 1.01e5 / 2


def test_saturation_linear_regime_flag():
    P = np.linspace(0.01, 0.1, 8)
    y = saturation_signal(P, 1e5, 5.0)
    res = fit_saturation(P, y, sigma_total=np.full(8, 30.0))
    assert "P_sat_unidentifiable" in res.flags


def test_fano_715_q10():
    lam, y, s = fano_spectrum(715.0, 10.0, seed=1)
    res = fit_fano(lam, y, s)
    assert abs(res["lambda0"] - 715.0) < 1.0
    assert abs(res["Q"] / 10 - 1) < 0.10


@pytest.mark.parametrize("lam0", [697.0, 732.0])
@pytest.mark.parametrize("Q", [5.0, 13.0])
def test_fano_range(lam0, Q):
    lam, y, s = fano_spectrum(lam0, Q, seed=int(lam0 + Q))
    res = fit_fano(lam, y, s)
    assert abs(res["lambda0"] / lam0 - 1) < 0.10 and abs(res["lambda0"] - lam0) < 1.0
    assert abs(res["Q"] / Q - 1) < 0.10


def test_fano_lorentzian_limit():
    lam = np.linspace(680, 750, 201)
    d = 10 * (715 / lam - 1)
    y = 1 / (1 + 4 * d**2) + 0.05
    res = fit_fano(lam, y)
    assert abs(res["q"]) > 50


def test_fano_edge_flag():
    lam, y, s = fano_spectrum(715.0, 10.0, seed=1)
    keep = lam > 712  # the Fano maximum lies below lambda0 for q > 0
    assert "peak_at_edge" in fit_fano(lam[keep], y[keep], s[keep]).flags


def test_odmr_recovery():
    f, y, s = odmr_spectrum(seed=3)
    res = fit_odmr(f, y, s)
    assert abs(res["f0"] / 2.87 - 1) < 0.02
    assert abs(res["contrast"] / 0.183 - 1) < 0.02


def test_odmr_flat_spectrum_flag():
    f = np.linspace(2.8, 2.94, 201)
    y = 1 + np.random.default_rng(1).normal(0, 0.005, f.size)
    assert "no_resonance" in fit_odmr(f, y, np.full(f.size, 0.005)).flags


def test_odmr_split_spectrum_flag():
    f, y, s = odmr_spectrum(seed=2, split=0.06)
    res = fit_odmr(f, y, s)
    assert res.red_chi2 > 3 and "poor_fit" in res.flags


def test_fit_result_json():
    f, y, s = odmr_spectrum(seed=3)
    doc = json.loads(fit_odmr(f, y, s).to_json())
    assert doc["model"] == "odmr" and doc["converged"]
    assert set(doc["params"]) == {"f0", "linewidth", "contrast"}
    assert all(v["sigma"] >= 0 for v in doc["params"].values())
