"""The five measurement models: g2, multi-exponential decay, saturation, Fano, ODMR."""

from __future__ import annotations

import logging
import math
import warnings

import numpy as np

from ..errors import DomainError
from .lm import ModelSpec, least_squares

log = logging.getLogger(__name__)
INF = np.inf


def poisson_sigma(counts):
    return np.sqrt(np.maximum(np.asarray(counts, dtype=float), 1.0))


def poisson_refine(spec, x, y, res, scale=1.0, fixed=None, n_iter=6):
    """Re-fit histogram data with model-based Poisson weights until stable.

    Weights sigma = sqrt(mu) from the current model mean (in counts,
    ``scale`` converts the fitted quantity to counts) are frozen for each
    least-squares pass; the fixed point solves the Poisson likelihood
    equations, which removes the low-count bias of sigma = sqrt(counts).
    """
    for _ in range(n_iter):
        mu = spec.func(x, res.values) * scale
        s = np.sqrt(np.maximum(mu, 0.1)) / scale
        new = least_squares(spec, x, y, s, res.values, fixed=fixed)
        if not new.converged:
            break
        done = np.allclose(new.values, res.values, rtol=1e-7, atol=0)
        new.flags, new.derived = res.flags, res.derived
        res = new
        if done:
            break
    return res


def _propagate(res, grad):
    """1-sigma of a derived scalar with gradient `grad` w.r.t. the parameters."""
    cov = np.nan_to_num(res.covariance)
    return float(math.sqrt(max(grad @ cov @ grad, 0.0)))


# ---------------------------------------------------------------- g2

def g2_model(tau, p):
    """g2 = 1 - (1 - g0) [(1 + a) e^{-|t|/t1} - a e^{-|t|/t2}]."""
    t1, t2, a, g0 = p
    u = np.abs(tau)
    e1, e2 = np.exp(-u / t1), np.exp(-u / t2)
    return 1.0 - (1.0 - g0) * ((1.0 + a) * e1 - a * e2)


def _exp_bin(tau, bw, tc):
    """Bin mean of exp(-|t|/tc) over [tau - bw/2, tau + bw/2] and its tc-derivative."""
    lo, hi = tau - 0.5 * bw, tau + 0.5 * bw

    def prim(t):
        u = np.abs(t)
        e = np.exp(-u / tc)
        return np.sign(t) * tc * (1.0 - e), np.sign(t) * ((1.0 - e) - (u / tc) * e)

    F1, D1 = prim(hi)
    F0, D0 = prim(lo)
    return (F1 - F0) / bw, (D1 - D0) / bw


def g2_binned(tau, p, bw):
    if bw == 0:
        return g2_model(tau, p)
    t1, t2, a, g0 = p
    m1, _ = _exp_bin(tau, bw, t1)
    m2, _ = _exp_bin(tau, bw, t2)
    return 1.0 - (1.0 - g0) * ((1.0 + a) * m1 - a * m2)


def g2_binned_jac(tau, p, bw):
    t1, t2, a, g0 = p
    s = 1.0 - g0
    if bw == 0:
        u = np.abs(tau)
        m1, m2 = np.exp(-u / t1), np.exp(-u / t2)
        d1, d2 = m1 * u / t1**2, m2 * u / t2**2
    else:
        m1, d1 = _exp_bin(tau, bw, t1)
        m2, d2 = _exp_bin(tau, bw, t2)
    return np.stack([-s * (1.0 + a) * d1, s * a * d2, -s * (m1 - m2),
                     (1.0 + a) * m1 - a * m2], axis=-1)


def g2_init(tau, y):
    tau = np.asarray(tau, float)
    order = np.argsort(np.abs(tau))
    g0 = float(np.clip(np.mean(y[order[:3]]), 0.0, 0.99))
    half = 0.5 * (1.0 + g0)
    u = np.abs(tau)
    above = u[(y >= half) & (u > 0)]
    width = float(above.min()) if above.size else float(u.max()) / 4
    t1 = max(width / math.log(2.0), float(np.min(np.diff(np.unique(u)))) if u.size > 1 else 1e-9)
    a = float(max(np.max(y) - 1.0, 0.0))
    t2 = 10.0 * t1
    return np.array([t1, t2, max(a, 1e-3), g0])


def g2_spec(bin_width=0.0):
    """g2 model averaged over histogram bins of `bin_width` (0: point values)."""
    return ModelSpec("g2", lambda x, p: g2_binned(x, p, bin_width),
                     ("tau1", "tau2", "a", "g2_at_zero"),
                     [1e-12, 1e-12, 0.0, 0.0], [1e-3, 1e-1, 50.0, 2.0],
                     lambda x, p: g2_binned_jac(x, p, bin_width), g2_init,
                     ("s", "s", "", ""), "half-depth width")


G2_SPEC = g2_spec(0.0)


# chi2 quantile (2 dof, 99%) for preferring the bunching terms over a bare dip
_G2_LR_THRESHOLD = 9.21


def _fit_g2_sub(spec, tau, y, s, norm, model):
    p0 = g2_init(tau, y)
    if model == "two_level":
        p0[2] = 0.0
        fixed = {"a": 0.0, "tau2": p0[1]}
    else:
        fixed = None
    res = least_squares(spec, tau, y, s, p0, fixed=fixed)
    if res.converged:
        res = poisson_refine(spec, tau, y, res, norm, fixed)
    res.derived["submodel"] = model
    return res


def fit_g2(hist, model="auto"):
    """Fit a normalized G2Histogram; model is 'two_level', 'three_level' or 'auto'.

    'auto' fits both nested models and keeps the three-level one when its
    chi2 improvement exceeds the 99% point of chi2 with 2 degrees of freedom.
    """
    if not getattr(hist, "normalized", False):
        raise DomainError("fit_g2 needs a normalized histogram")
    if model not in ("auto", "two_level", "three_level"):
        raise DomainError(f"unknown g2 model {model!r}")
    tau, y, s = hist.tau, hist.g2, hist.sigma
    spec = g2_spec(hist.bin_width)
    if model != "auto":
        return _fit_g2_sub(spec, tau, y, s, hist.norm, model)
    two = _fit_g2_sub(spec, tau, y, s, hist.norm, "two_level")
    three = _fit_g2_sub(spec, tau, y, s, hist.norm, "three_level")
    if not three.converged:
        return two
    if not two.converged:
        return three
    n = len(y)
    gain = two.red_chi2 * max(n - 2, 1) - three.red_chi2 * max(n - 4, 1)
    best = three if gain > _G2_LR_THRESHOLD else two
    best.derived["chi2_gain_three_level"] = float(gain)
    return best


# ---------------------------------------------------------------- multi-exponential

def multiexp_model(t, p):
    n = (len(p) - 1) // 2
    out = np.full(np.shape(t), p[-1], dtype=float)
    for i in range(n):
        out = out + p[2 * i] * np.exp(-t / p[2 * i + 1])
    return out


def multiexp_jac(t, p):
    n = (len(p) - 1) // 2
    cols = []
    for i in range(n):
        A, tau = p[2 * i], p[2 * i + 1]
        e = np.exp(-t / tau)
        cols += [e, A * e * t / tau**2]
    cols.append(np.ones(np.shape(t)))
    return np.stack(cols, axis=-1)


def _loglin(t, y):
    """Weighted log-linear regression y ~ A exp(-t/tau); returns (A, tau) or None."""
    ok = y > 0
    if ok.sum() < 3:
        return None
    w = y[ok]  # Poisson weights in log space
    slope, icpt = np.polyfit(t[ok], np.log(y[ok]), 1, w=np.sqrt(w))
    if slope >= 0:
        return None
    return math.exp(icpt), -1.0 / slope


def multiexp_init(t, y, n):
    t = np.asarray(t, float)
    y = np.asarray(y, float)
    tail = max(len(y) // 10, 3)
    c = max(float(np.median(y[-tail:])) * 0.5, 0.0)
    resid = y - c
    params = []
    span = t[-1] - t[0]
    # peel components from the tail inward
    lo = 0.4
    for _ in range(n):
        sel = t >= t[0] + lo * span
        fit = _loglin(t[sel], resid[sel])
        if fit is None:
            A, tau = float(max(resid.max(), 1.0)), span / (5 * (len(params) // 2 + 1))
        else:
            A, tau = fit
        params += [A, tau]
        resid = resid - A * np.exp(-t / tau)
        lo /= 4
    for i in range(0, len(params), 2):
        params[i] = max(params[i], 1e-6 * max(y.max(), 1.0))
    return np.array(params + [c])


def multiexp_spec(n, t_scale):
    names, units, lo, hi = [], [], [], []
    for i in range(1, n + 1):
        names += [f"A{i}", f"tau{i}"]
        units += ["counts", "s"]
        lo += [0.0, 1e-3 * t_scale]
        hi += [INF, 1e3 * t_scale]
    names.append("baseline")
    units.append("counts")
    lo.append(0.0)
    hi.append(INF)
    return ModelSpec(f"multiexp{n}", multiexp_model, tuple(names), lo, hi, multiexp_jac,
                     lambda x, y: multiexp_init(x, y, n), tuple(units), "log-linear tail")


def fit_multiexp(hist, n_components=1, t_min=0.0, t_max=None):
    """Fit sum A_i exp(-t/tau_i) + baseline to a DecayHistogram (Poisson weights)."""
    if n_components not in (1, 2, 3):
        raise DomainError("n_components must be 1, 2 or 3")
    t, y = hist.t, hist.counts.astype(float)
    sel = (t >= t_min) & (t <= (t_max if t_max is not None else np.inf))
    return fit_multiexp_arrays(t[sel], y[sel], n_components)


def fit_multiexp_arrays(t, y, n_components=1, sigma=None):
    """Multi-exponential fit of (t, y); without `sigma` y are Poisson counts."""
    order = np.argsort(np.asarray(t, float), kind="stable")
    t = np.asarray(t, float)[order]
    y = np.asarray(y, float)[order]
    s = poisson_sigma(y) if sigma is None else np.broadcast_to(sigma, y.shape)[order]
    spec = multiexp_spec(n_components, float(t[-1] - t[0]))
    best = None
    p_init = multiexp_init(t, y, n_components)
    starts = [p_init]
    if n_components > 1:
        # alternative start: geometric spread of time constants
        span = t[-1] - t[0]
        alt = []
        for i in range(n_components):
            alt += [max(y.max(), 1.0) / n_components, span / 4 / 8**i]
        starts.append(np.array(alt + [p_init[-1]]))
    for p0 in starts:
        res = least_squares(spec, t, y, s, p0)
        if best is None or (res.converged and (not best.converged or res.red_chi2 < best.red_chi2)):
            best = res
    if sigma is None and best.converged:
        best = poisson_refine(spec, t, y, best)
    _sort_components(best, n_components)
    taus = [best[f"tau{i}"] for i in range(1, n_components + 1)]
    if n_components > 1 and min(b / a for a, b in zip(taus[:-1], taus[1:])) < 1.5:
        best.flags.append("ill_conditioned")
        warnings.warn("multiexp: time constants within a factor 1.5", RuntimeWarning)
    best.derived["lifetime"] = (taus[-1], best.sigma(f"tau{n_components}"))
    return best


def _sort_components(res, n):
    order = np.argsort([res.values[2 * i + 1] for i in range(n)], kind="stable")
    idx = np.concatenate([[2 * i, 2 * i + 1] for i in order] + [[2 * n]]).astype(int)
    res.values = res.values[idx]
    res.sigmas = res.sigmas[idx]
    if res.covariance is not None:
        res.covariance = res.covariance[np.ix_(idx, idx)]


# ---------------------------------------------------------------- saturation

def saturation_signal(P, I_sat, P_sat):
    return I_sat * P / (P + P_sat)


def _sat_model(x, p):
    P, total = x[:, 0], x[:, 1]
    I_sat, P_sat, k, b = p
    return total * I_sat * P / (P + P_sat) + k * P + b


def _sat_jac(x, p):
    P, total = x[:, 0], x[:, 1]
    I_sat, P_sat, k, b = p
    d = P + P_sat
    return np.stack([total * P / d, -total * I_sat * P / d**2, P, np.ones_like(P)], axis=-1)


def _sat_init(x, y):
    P, total = x[:, 0], x[:, 1]
    bg = total == 0
    if bg.sum() >= 2:
        k, b = np.polyfit(P[bg], y[bg], 1)
    else:
        k, b = 0.0, 0.0
    k, b = max(k, 0.0), max(b, 0.0)
    sig = y[~bg] - k * P[~bg] - b
    Pt = P[~bg]
    I0 = float(max(sig.max(), 1.0))
    half = Pt[sig >= 0.5 * I0]
    Ps = float(half.min()) if half.size else float(Pt.max())
    # correct for the largest point not being at full saturation
    I0 = I0 * (Pt.max() + Ps) / Pt.max()
    return np.array([I0, max(Ps, 1e-6), k, b])


SAT_SPEC = ModelSpec("saturation", _sat_model, ("I_sat", "P_sat", "bg_slope", "bg_offset"),
                     [0.0, 1e-9, 0.0, 0.0], [INF, INF, INF, INF], _sat_jac, _sat_init,
                     ("cps", "mW", "cps/mW", "cps"), "half-intensity crossing")


def fit_saturation(P_total, counts_total, P_bg=None, counts_bg=None, sigma_total=None,
                   sigma_bg=None):
    """Joint fit of totals I_sat P/(P+P_sat) + bg(P) and background points bg(P).

    The background is linear in power (slope and offset).
    """
    P_total = np.asarray(P_total, float)
    if len(P_total) < 5:
        raise DomainError("saturation fit needs at least 5 powers")
    P_bg = np.zeros(0) if P_bg is None else np.asarray(P_bg, float)
    counts_bg = np.zeros(0) if counts_bg is None else np.asarray(counts_bg, float)
    x = np.column_stack([np.concatenate([P_total, P_bg]),
                         np.concatenate([np.ones(len(P_total)), np.zeros(len(P_bg))])])
    y = np.concatenate([np.asarray(counts_total, float), counts_bg])
    if sigma_total is None:
        s = poisson_sigma(y)
    else:
        s = np.concatenate([np.broadcast_to(sigma_total, P_total.shape),
                            np.broadcast_to(sigma_bg if sigma_bg is not None else 1.0, P_bg.shape)])
    fixed = None if len(P_bg) >= 2 else {"bg_slope": 0.0, "bg_offset": 0.0}
    res = least_squares(SAT_SPEC, x, y, s, fixed=fixed)
    if P_total.max() < res["P_sat"] or res.sigma("P_sat") > 0.5 * res["P_sat"]:
        res.flags.append("P_sat_unidentifiable")
    return res


# ---------------------------------------------------------------- Fano

def fano_model(lam_nm, p):
    """A (q + 2 d)^2 / (1 + 4 d^2) + offset, d = (w - w0)/G = Q (lam0/lam - 1)."""
    lam0, Q, q, A, c = p
    d = Q * (lam0 / lam_nm - 1.0)
    return A * (q + 2 * d) ** 2 / (1 + 4 * d**2) + c


def fano_jac(lam_nm, p):
    lam0, Q, q, A, c = p
    r = lam0 / lam_nm - 1.0
    d = Q * r
    den = 1 + 4 * d**2
    num = (q + 2 * d) ** 2
    dfd = A * (4 * (q + 2 * d) * den - num * 8 * d) / den**2
    return np.stack([dfd * Q / lam_nm, dfd * r, A * 2 * (q + 2 * d) / den, num / den,
                     np.ones_like(lam_nm)], axis=-1)


def _fano_init(lam, y, q0):
    i = int(np.argmax(y))
    c = float(np.min(y))
    above = lam[y >= c + 0.5 * (y[i] - c)]
    fwhm = max(float(above.max() - above.min()), float(np.min(np.abs(np.diff(lam)))))
    lam0 = float(lam[i])
    Q = lam0 / fwhm
    A = (y[i] - c) / (q0**2 + 1)
    # the Fano maximum sits at d = 1/(2q), not at the bare resonance
    lam0 = lam0 * (1 + 1 / (2 * q0 * Q))
    return np.array([lam0, Q, q0, A, c])


FANO_SPEC = ModelSpec("fano", fano_model, ("lambda0", "Q", "q", "amplitude", "offset"),
                      [1.0, 0.1, -1e4, 0.0, -INF], [1e5, 1e4, 1e4, INF, INF], fano_jac,
                      lambda x, y: _fano_init(x, y, 3.0), ("nm", "", "", "", ""), "peak/FWHM scan")


def fit_fano(lam_nm, intensity, sigma=None):
    lam = np.asarray(lam_nm, float)
    y = np.asarray(intensity, float)
    best = None
    for q0 in (3.0, -3.0, 30.0, -30.0):
        try:
            res = least_squares(FANO_SPEC, lam, y, sigma, _fano_init(lam, y, q0))
        except FloatingPointError:
            continue
        if best is None or (res.converged, -res.red_chi2) > (best.converged, -best.red_chi2):
            best = res
    lam0, Q = best["lambda0"], best["Q"]
    w0 = 2 * math.pi * 299792458.0 / (lam0 * 1e-9)
    grad_G = np.zeros(5)
    grad_G[0] = -w0 / lam0 / Q
    grad_G[1] = -w0 / Q**2
    best.derived["Gamma"] = (w0 / Q, _propagate(best, grad_G))
    best.derived["omega0"] = (w0, _propagate(best, np.array([-w0 / lam0, 0, 0, 0, 0])))
    i_peak = int(np.argmax(fano_model(lam, best.values)))
    if i_peak in (0, len(lam) - 1) or not (lam.min() < lam0 < lam.max()):
        best.flags.append("peak_at_edge")
    return best


# ---------------------------------------------------------------- ODMR

def odmr_model(f, p):
    f0, G, c = p
    return 1.0 - c * G**2 / ((f - f0) ** 2 + G**2)


def odmr_jac(f, p):
    f0, G, c = p
    den = (f - f0) ** 2 + G**2
    L = G**2 / den
    return np.stack([-c * G**2 * 2 * (f - f0) / den**2,
                     -c * (2 * G / den - G**2 * 2 * G / den**2),
                     -L], axis=-1)


def _odmr_init(f, y):
    i = int(np.argmin(y))
    c = float(max(1.0 - y[i], 1e-4))
    below = f[y <= 1.0 - 0.5 * c]
    hw = 0.5 * float(below.max() - below.min()) if below.size > 1 else float(np.ptp(f)) / 20
    return np.array([float(f[i]), max(hw, 1e-6 * abs(float(f[i])) + 1e-12), c])


ODMR_SPEC = ModelSpec("odmr", odmr_model, ("f0", "linewidth", "contrast"),
                      [0.0, 1e-9, 0.0], [INF, INF, 1.0], odmr_jac, _odmr_init,
                      ("GHz", "GHz", ""), "minimum location")


def fit_odmr(f_ghz, counts, sigma=None):
    f = np.asarray(f_ghz, float)
    y = np.asarray(counts, float)
    res = least_squares(ODMR_SPEC, f, y, sigma)
    if not res["contrast"] > 2 * res.sigma("contrast"):
        res.flags.append("no_resonance")
    if res.red_chi2 > 3:
        res.flags.append("poor_fit")
    return res


REGISTRY = {
    "g2": G2_SPEC,
    "g2_binned": g2_spec(1e-9),
    "multiexp1": multiexp_spec(1, 1e-7),
    "multiexp2": multiexp_spec(2, 1e-7),
    "multiexp3": multiexp_spec(3, 1e-7),
    "saturation": SAT_SPEC,
    "fano": FANO_SPEC,
    "odmr": ODMR_SPEC,
}
