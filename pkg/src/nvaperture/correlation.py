"""Photon-pair correlation and TCSPC decay histograms."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass

import numba as nb
import numpy as np

from .errors import DomainError, InsufficientDataError

BRUTE_FORCE_LIMIT = 100_000


@dataclass
class G2Histogram:
    """Coincidences between channels A and B versus delay t_B - t_A.

    Bin k is centred on k * bin_width for k in [-K, K].
    """

    bin_width: float
    counts: np.ndarray
    rate_a: float
    rate_b: float
    duration: float
    normalized: bool = True

    @property
    def half_bins(self):
        return (len(self.counts) - 1) // 2

    @property
    def window(self):
        return (self.half_bins + 0.5) * self.bin_width

    @property
    def tau(self):
        return np.arange(-self.half_bins, self.half_bins + 1) * self.bin_width

    @property
    def edges(self):
        return (np.arange(-self.half_bins, self.half_bins + 2) - 0.5) * self.bin_width

    @property
    def norm(self):
        return self.rate_a * self.rate_b * self.bin_width * self.duration

    @property
    def g2(self):
        return self.counts / self.norm

    @property
    def sigma(self):
        """Poisson error of the normalized values (floor of one count)."""
        return np.sqrt(np.maximum(self.counts, 1)) / self.norm

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["tau_ns", "g2", "poisson_sigma", "counts"])
            for t, g, s, c in zip(self.tau * 1e9, self.g2, self.sigma, self.counts):
                w.writerow([f"{t:.9g}", f"{g:.9g}", f"{s:.9g}", int(c)])


@dataclass
class DecayHistogram:
    """Photon delays after the preceding trigger, in [0, period)."""

    bin_width: float
    counts: np.ndarray
    n_triggers: int
    period: float

    @property
    def edges(self):
        return np.arange(len(self.counts) + 1) * self.bin_width

    @property
    def t(self):
        return (np.arange(len(self.counts)) + 0.5) * self.bin_width

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["delay_ns", "counts"])
            for t, c in zip(self.t * 1e9, self.counts):
                w.writerow([f"{t:.9g}", int(c)])


@nb.njit(cache=True, inline="always")
def _bin_of(dt, inv_bw):
    return math.floor(dt * inv_bw + 0.5)


@nb.njit(cache=True)
def _pairs_sweep(ta, tb, a0, a1, inv_bw, K, reach, out):
    """Sliding two-pointer count for A events a0..a1-1 against all of tb."""
    nb_ = len(tb)
    lo = np.searchsorted(tb, ta[a0] - reach) if a1 > a0 else 0
    for ia in range(a0, a1):
        t = ta[ia]
        while lo < nb_ and tb[lo] < t - reach:
            lo += 1
        ib = lo
        while ib < nb_ and tb[ib] <= t + reach:
            k = _bin_of(tb[ib] - t, inv_bw)
            if -K <= k <= K:
                out[k + K] += 1
            ib += 1


@nb.njit(cache=True, parallel=True)
def _pairs_blocks(ta, tb, bounds, inv_bw, K, reach):
    nblk = len(bounds) - 1
    partial = np.zeros((nblk, 2 * K + 1), dtype=np.int64)
    for b in nb.prange(nblk):
        _pairs_sweep(ta, tb, bounds[b], bounds[b + 1], inv_bw, K, reach, partial[b])
    out = np.zeros(2 * K + 1, dtype=np.int64)
    for b in range(nblk):
        out += partial[b]
    return out


@nb.njit(cache=True)
def _pairs_all(ta, tb, inv_bw, K):
    out = np.zeros(2 * K + 1, dtype=np.int64)
    for ia in range(len(ta)):
        for ib in range(len(tb)):
            k = _bin_of(tb[ib] - ta[ia], inv_bw)
            if -K <= k <= K:
                out[k + K] += 1
    return out


def _prepare(stream, bin_width, window):
    if not bin_width > 0:
        raise DomainError("bin_width must be > 0")
    if window < 0:
        raise DomainError("window must be >= 0")
    ta = np.ascontiguousarray(stream.channel_times(0))
    tb = np.ascontiguousarray(stream.channel_times(1))
    if len(ta) < 2 or len(tb) < 2:
        raise InsufficientDataError("each channel needs at least two events")
    K = int(math.floor(window / bin_width + 1e-9))
    return ta, tb, K


def _histogram(stream, counts, bin_width, ta, tb):
    T = stream.duration
    return G2Histogram(bin_width, counts, len(ta) / T, len(tb) / T, T)


def g2_histogram(stream, bin_width=1e-9, window=200e-9, blocks=None):
    """Multi-start A-B correlation over +/- window, normalized to 1 for Poisson light.

    The A events are partitioned into `blocks` time blocks (default: one per
    ~50k events); each block scans B within reach, so block count never
    changes the integer counts.
    """
    ta, tb, K = _prepare(stream, bin_width, window)
    if window < 10 * bin_width:
        raise DomainError("window must be at least 10 bin widths")
    n = len(ta)
    if blocks is None:
        blocks = max(1, n // 50_000)
    bounds = np.linspace(0, n, int(blocks) + 1).astype(np.int64)
    # anything within (K + 1) bins is examined and then binned exactly
    reach = (K + 1.0) * bin_width
    counts = _pairs_blocks(ta, tb, bounds, 1.0 / bin_width, K, reach)
    return _histogram(stream, counts, bin_width, ta, tb)


def brute_force_g2(stream, bin_width=1e-9, window=200e-9):
    """All-pairs reference correlator (same binning arithmetic)."""
    if len(stream) > BRUTE_FORCE_LIMIT:
        raise DomainError(f"brute force limited to {BRUTE_FORCE_LIMIT} events")
    ta, tb, K = _prepare(stream, bin_width, window)
    counts = _pairs_all(ta, tb, 1.0 / bin_width, K)
    return _histogram(stream, counts, bin_width, ta, tb)


def decay_histogram(stream, triggers=None, bin_width=0.1e-9):
    """Histogram of photon time minus the latest preceding trigger.

    Photons before the first trigger are outside the analyzed span and
    are dropped.
    """
    triggers = stream.triggers if triggers is None else np.asarray(triggers, dtype=float)
    if triggers is None or len(triggers) == 0:
        raise DomainError("decay histogram needs trigger times")
    if not bin_width > 0:
        raise DomainError("bin_width must be > 0")
    triggers = np.sort(triggers)
    period = float(np.median(np.diff(triggers))) if len(triggers) > 1 else stream.duration
    idx = np.searchsorted(triggers, stream.times, side="right") - 1
    ok = idx >= 0
    delay = stream.times[ok] - triggers[idx[ok]]
    delay = delay[delay < period]
    nbins = int(math.ceil(period / bin_width))
    counts = np.bincount(np.minimum((delay / bin_width).astype(np.int64), nbins - 1),
                         minlength=nbins).astype(np.int64)
    return DecayHistogram(bin_width, counts, len(triggers), period)
