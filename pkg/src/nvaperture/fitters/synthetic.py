"""Noisy synthetic spectra drawn from the fit models (generator ground truth)."""

from __future__ import annotations

import numpy as np

from ..errors import DomainError
from .models import fano_model, odmr_model


def _rng(seed):
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(int(seed))))


def _poisson(clean, scale, seed):
    n = _rng(seed).poisson(clean * scale).astype(float)
    return n / scale, np.sqrt(np.maximum(n, 1.0)) / scale


def fano_spectrum(lambda0, Q, q=3.0, amplitude=1.0, offset=0.1, noise=0.01, n_points=201,
                  span=4.0, seed=0, peak_counts=None):
    """(lambda_nm, intensity, sigma) over lambda0 +/- span FWHM.

    Gaussian noise is relative to the peak height of the noiseless curve;
    with `peak_counts` the curve is scaled to that many counts at its
    maximum, Poisson-sampled and scaled back instead.
    """
    if not (Q > 0 and lambda0 > 0):
        raise DomainError("lambda0 and Q must be > 0")
    fwhm = lambda0 / Q
    lam = np.linspace(lambda0 - span * fwhm, lambda0 + span * fwhm, int(n_points))
    clean = fano_model(lam, np.array([lambda0, Q, q, amplitude, offset]))
    if peak_counts is not None:
        return (lam,) + _poisson(clean, peak_counts / float(np.max(clean)), seed)
    s = noise * float(np.max(clean))
    y = clean + _rng(seed).normal(0.0, s, lam.size) if s > 0 else clean
    return lam, y, np.full(lam.size, s if s > 0 else 1.0)


def odmr_spectrum(f0=2.87, linewidth=0.01, contrast=0.183, noise=0.005, n_points=201, span=8.0,
                  seed=0, split=0.0, counts=None):
    """(f_GHz, normalized counts, sigma); `split` > 0 draws a Zeeman pair f0 +/- split/2.

    With `counts` (off-resonance counts per point) the noise is Poisson.
    """
    if not linewidth > 0:
        raise DomainError("linewidth must be > 0")
    half = span * linewidth + split / 2
    f = np.linspace(f0 - half, f0 + half, int(n_points))
    if split > 0:
        clean = (odmr_model(f, np.array([f0 - split / 2, linewidth, contrast]))
                 + odmr_model(f, np.array([f0 + split / 2, linewidth, contrast])) - 1.0)
    else:
        clean = odmr_model(f, np.array([f0, linewidth, contrast]))
    if counts is not None:
        return (f,) + _poisson(clean, float(counts), seed)
    y = clean + _rng(seed).normal(0.0, noise, f.size) if noise > 0 else clean
    return f, y, np.full(f.size, noise if noise > 0 else 1.0)
