"""Kinetic Monte Carlo of a three-level NV emitter and its rate-equation g2.

States are ground (0), excited (1) and metastable (2).  The emitter is
driven at ``pump_rate_per_mW * P`` out of the ground state; the excited
state decays radiatively at ``purcell_factor * k_r``, non-radiatively at
``k_nr`` and into the metastable state at ``k_isc``; the metastable state
returns to ground at ``k_m``.
"""

from __future__ import annotations

import json
import logging
import math
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numba as nb
import numpy as np
from scipy.linalg import expm

from .errors import ConfigurationError, DomainError

log = logging.getLogger(__name__)

CHANNEL_A, CHANNEL_B = 0, 1
# substream ids for the counter-based generator
_EMITTER, _DETECTION, _BACKGROUND, _JITTER = 0, 1, 2, 3


@dataclass(frozen=True)
class EmitterModel:
    radiative_rate: float
    nonradiative_rate: float = 0.0
    shelving_rate: float = 0.0
    deshelving_rate: float = 0.0
    pump_rate_per_mW: float = 1e7
    purcell_factor: float = 1.0

    def __post_init__(self):
        for name in ("radiative_rate", "nonradiative_rate", "shelving_rate",
                     "deshelving_rate", "pump_rate_per_mW", "purcell_factor"):
            if getattr(self, name) < 0 or not math.isfinite(getattr(self, name)):
                raise ConfigurationError(f"{name} must be finite and >= 0")
        if self.radiative_rate <= 0:
            raise ConfigurationError("radiative_rate must be > 0")
        if self.shelving_rate > 0 and self.deshelving_rate <= 0:
            raise ConfigurationError("a shelving channel needs deshelving_rate > 0")

    @property
    def k_rad(self):
        return self.purcell_factor * self.radiative_rate

    @property
    def excited_decay_rate(self):
        return self.k_rad + self.nonradiative_rate + self.shelving_rate

    @property
    def lifetime(self):
        return 1.0 / self.excited_decay_rate

    def pump_rate(self, pump_mW):
        return self.pump_rate_per_mW * pump_mW

    def with_purcell(self, factor):
        return EmitterModel(**{**asdict(self), "purcell_factor": factor})

    def rate_matrix(self, pump_mW):
        """Generator M of dp/dt = M p for p = (ground, excited, metastable)."""
        kp = self.pump_rate(pump_mW)
        kd = self.k_rad + self.nonradiative_rate
        return np.array([
            [-kp, kd, self.deshelving_rate],
            [kp, -self.excited_decay_rate, 0.0],
            [0.0, self.shelving_rate, -self.deshelving_rate],
        ])

    def steady_state(self, pump_mW):
        """Stationary populations (ground, excited, metastable)."""
        kp = self.pump_rate(pump_mW)
        if kp == 0:
            return np.array([1.0, 0.0, 0.0])
        ke, ki, km = self.excited_decay_rate, self.shelving_rate, self.deshelving_rate
        # balance: kp p_g = ke p_e and ki p_e = km p_m
        pe = kp / (kp + ke + (kp * ki / km if ki > 0 else 0.0))
        pg = pe * ke / kp
        pm = pe * ki / km if ki > 0 else 0.0
        return np.array([pg, pe, pm])

    def emission_rate(self, pump_mW):
        """Steady-state photon emission rate (before detection), 1/s."""
        return self.k_rad * self.steady_state(pump_mW)[1]

    def saturation_parameters(self):
        """(I_sat emitted, P_sat in mW) of I(P) = I_sat P / (P + P_sat)."""
        ke, ki, km = self.excited_decay_rate, self.shelving_rate, self.deshelving_rate
        frac = km / (km + ki) if ki > 0 else 1.0
        return self.k_rad * frac, ke * frac / self.pump_rate_per_mW

    def to_dict(self):
        return asdict(self)


@dataclass(frozen=True)
class DetectionModel:
    efficiency: float = 1.0
    background_rate: float = 0.0
    timing_jitter_sigma: float = 0.0

    def __post_init__(self):
        if not 0.0 <= self.efficiency <= 1.0:
            raise ConfigurationError("detection efficiency must lie in [0, 1]")
        if self.background_rate < 0 or self.timing_jitter_sigma < 0:
            raise ConfigurationError("background_rate and jitter must be >= 0")

    def to_dict(self):
        return asdict(self)


@dataclass
class PhotonStream:
    """Time-sorted detection events with splitter channel tags.

    ``triggers`` (pulsed runs only) holds the excitation pulse times.
    ``source`` tags each event as emitter (0) or background (1) photon,
    kept for oracle tests; it is not written to disk.
    """

    times: np.ndarray
    channels: np.ndarray
    duration: float
    seed: int
    truth: dict = field(default_factory=dict)
    triggers: np.ndarray | None = None
    source: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=np.float64)
        self.channels = np.asarray(self.channels, dtype=np.uint8)
        if self.times.shape != self.channels.shape:
            raise ValueError("times and channels differ in length")

    def __len__(self):
        return len(self.times)

    def channel_times(self, channel):
        return self.times[self.channels == channel]

    @property
    def mean_rate(self):
        return len(self.times) / self.duration

    def relabeled(self):
        """Copy with channels A and B swapped."""
        return PhotonStream(self.times.copy(), (1 - self.channels).astype(np.uint8),
                            self.duration, self.seed, dict(self.truth), self.triggers)

    def save(self, path):
        """Binary file: magic, JSON header length, header, (f8 time, u1 channel) records."""
        path = Path(path)
        header = {"seed": self.seed, "duration": self.duration, "n_events": len(self),
                  "truth": self.truth}
        if self.triggers is not None:
            header["n_triggers"] = int(len(self.triggers))
        blob = json.dumps(header, sort_keys=True).encode()
        rec = np.empty(len(self), dtype=[("time_s", "<f8"), ("channel", "u1")])
        rec["time_s"], rec["channel"] = self.times, self.channels
        with open(path, "wb") as fh:
            fh.write(b"PHOTSTR1")
            fh.write(struct.pack("<Q", len(blob)))
            fh.write(blob)
            fh.write(rec.tobytes())
            if self.triggers is not None:
                fh.write(np.asarray(self.triggers, dtype="<f8").tobytes())
        return path

    @classmethod
    def load(cls, path):
        with open(path, "rb") as fh:
            if fh.read(8) != b"PHOTSTR1":
                raise ValueError(f"{path}: not a photon stream file")
            (n,) = struct.unpack("<Q", fh.read(8))
            header = json.loads(fh.read(n))
            rec = np.frombuffer(fh.read(header["n_events"] * 9),
                                dtype=[("time_s", "<f8"), ("channel", "u1")])
            triggers = None
            if "n_triggers" in header:
                triggers = np.frombuffer(fh.read(header["n_triggers"] * 8), dtype="<f8").copy()
        return cls(rec["time_s"].copy(), rec["channel"].copy(), header["duration"],
                   header["seed"], header["truth"], triggers)

    def to_csv(self, path):
        header = json.dumps({"seed": self.seed, "duration": self.duration, "truth": self.truth},
                            sort_keys=True)
        with open(path, "w") as fh:
            fh.write(f"# {header}\n")
            fh.write("time_s,channel\n")
            for t, c in zip(self.times, self.channels):
                fh.write(f"{t:.17g},{'AB'[c]}\n")


def rng_for(seed, stream_id):
    """Counter-based generator keyed by (master seed, substream id)."""
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=(int(stream_id),))
    return np.random.Generator(np.random.Philox(ss))


@nb.njit(cache=True)
def _cw_trajectory(u, t_start, duration, kp, ke, p_rad, p_isc, km, out):
    """Exact-event 3-level trajectory from the ground state.

    `u` supplies uniforms; returns (n_photons, n_uniforms_used, t_end,
    finished).  Photon emission times are written to `out`.
    """
    t = t_start
    n = 0
    j = 0
    nu = len(u)
    while j + 3 < nu:
        # ground -> excited
        t += -math.log(1.0 - u[j]) / kp
        j += 1
        if t >= duration:
            return n, j, t, True
        # excited dwell and branch
        t += -math.log(1.0 - u[j]) / ke
        j += 1
        r = u[j]
        j += 1
        if r < p_rad:
            if t >= duration:
                return n, j, t, True
            out[n] = t
            n += 1
        elif r < p_rad + p_isc:
            t += -math.log(1.0 - u[j]) / km
            j += 1
    return n, j, t, False


def _emit_cw(model, pump_mW, duration, rng, chunk=1 << 20):
    kp = model.pump_rate(pump_mW)
    ke = model.excited_decay_rate
    if kp == 0 or ke == 0:
        return np.zeros(0)
    p_rad = model.k_rad / ke
    p_isc = model.shelving_rate / ke
    km = model.deshelving_rate if model.deshelving_rate > 0 else 1.0
    parts = []
    t = 0.0
    # chunks end only between completed cycles (emitter in the ground state),
    # and each cycle draws at least three uniforms, so `out` never overflows
    while True:
        u = rng.random(chunk)
        out = np.empty(chunk)
        n, used, t_end, done = _cw_trajectory(u, t, duration, kp, ke, p_rad, p_isc, km, out)
        parts.append(out[:n].copy())
        if done:
            break
        t = t_end
    return np.concatenate(parts) if parts else np.zeros(0)


def _detect(emitted, det, duration, seed):
    """Apply efficiency, background, splitter and jitter to emitted photons."""
    rng_d = rng_for(seed, _DETECTION)
    keep = rng_d.random(len(emitted)) < det.efficiency
    sig = emitted[keep]
    rng_b = rng_for(seed, _BACKGROUND)
    n_bg = rng_b.poisson(det.background_rate * duration) if det.background_rate > 0 else 0
    bg = np.sort(rng_b.uniform(0.0, duration, n_bg))
    times = np.concatenate([sig, bg])
    origin = np.concatenate([np.zeros(len(sig), np.uint8), np.ones(len(bg), np.uint8)])
    channels = (rng_d.random(len(times)) < 0.5).astype(np.uint8)
    if det.timing_jitter_sigma > 0:
        times = times + rng_for(seed, _JITTER).normal(0.0, det.timing_jitter_sigma, len(times))
    order = np.lexsort((origin, times))
    return times[order], channels[order], origin[order]


def _check_common(duration, seed):
    if not duration > 0:
        raise DomainError("duration must be > 0")
    if int(seed) < 0:
        raise DomainError("seed must be >= 0")


def simulate_cw(model, det, pump_mW, duration, seed):
    """Photon stream under continuous pumping."""
    _check_common(duration, seed)
    if pump_mW < 0:
        raise DomainError("pump power must be >= 0")
    expected = (det.efficiency * model.emission_rate(pump_mW) + det.background_rate) * duration
    if expected < 1e4:
        log.warning("simulate_cw: only ~%.0f expected events", expected)
    emitted = _emit_cw(model, pump_mW, duration, rng_for(seed, _EMITTER))
    times, channels, origin = _detect(emitted, det, duration, seed)
    truth = {"mode": "cw", "emitter": model.to_dict(), "detection": det.to_dict(),
             "pump_mW": pump_mW, "n_emitted": int(len(emitted))}
    return PhotonStream(times, channels, float(duration), int(seed), truth, None, origin)


@nb.njit(cache=True)
def _pulsed_trajectory(u, k0, n_pulses, period, p_exc, ke, p_rad, p_isc, km, t_free, out):
    """Pulses k0.. until `u` or `out` runs low; returns (n_out, next_pulse, t_free).

    `t_free` is the time the emitter is next back in the ground state.
    """
    n = 0
    j = 0
    nu = len(u)
    k = k0
    while k < n_pulses and j + 4 < nu and n < len(out):
        tp = k * period
        if t_free <= tp:
            r = u[j]
            j += 1
            if r < p_exc:
                t = tp - math.log(1.0 - u[j]) / ke
                r = u[j + 1]
                j += 2
                if r < p_rad:
                    out[n] = t
                    n += 1
                elif r < p_rad + p_isc:
                    t -= math.log(1.0 - u[j]) / km
                    j += 1
                t_free = t
        k += 1
    return n, k, t_free


def simulate_pulsed(model, det, rep_rate, excitation_prob, duration, seed):
    """Photon stream under periodic pulsed excitation.

    At each pulse an emitter that has returned to the ground state is
    promoted with probability `excitation_prob`; one excitation per pulse.
    """
    _check_common(duration, seed)
    if not 0.0 <= excitation_prob <= 1.0:
        raise DomainError("excitation_prob must lie in [0, 1]")
    if not rep_rate > 0:
        raise DomainError("rep_rate must be > 0")
    if rep_rate * model.lifetime >= 0.5:
        log.warning("pulse period %.3g s is shorter than 2 lifetimes", 1 / rep_rate)
    period = 1.0 / rep_rate
    n_pulses = int(math.floor(duration * rep_rate))
    triggers = np.arange(n_pulses) * period
    ke = model.excited_decay_rate
    p_rad = model.k_rad / ke
    p_isc = model.shelving_rate / ke
    km = model.deshelving_rate if model.deshelving_rate > 0 else 1.0
    rng = rng_for(seed, _EMITTER)
    parts = []
    k, t_free = 0, -1.0
    chunk = 1 << 20
    while k < n_pulses and excitation_prob > 0:
        u = rng.random(chunk)
        out = np.empty(chunk // 2)
        n, k, t_free = _pulsed_trajectory(u, k, n_pulses, period, excitation_prob,
                                          ke, p_rad, p_isc, km, t_free, out)
        parts.append(out[:n].copy())
    emitted = np.concatenate(parts) if parts else np.zeros(0)
    emitted = emitted[emitted < duration]
    times, channels, origin = _detect(emitted, det, duration, seed)
    truth = {"mode": "pulsed", "emitter": model.to_dict(), "detection": det.to_dict(),
             "rep_rate": rep_rate, "excitation_prob": excitation_prob,
             "n_emitted": int(len(emitted))}
    return PhotonStream(times, channels, float(duration), int(seed), truth, triggers, origin)


def merge_streams(streams, seed=None):
    """Superpose independent streams (e.g. several emitters) into one."""
    times = np.concatenate([s.times for s in streams])
    chans = np.concatenate([s.channels for s in streams])
    tags = np.concatenate([np.full(len(s), i, dtype=np.int64) for i, s in enumerate(streams)])
    order = np.lexsort((tags, times))
    duration = min(s.duration for s in streams)
    keep = times[order] < duration
    return PhotonStream(times[order][keep], chans[order][keep], duration,
                        streams[0].seed if seed is None else seed,
                        {"merged": [s.truth for s in streams]})


@dataclass
class AnalyticG2:
    """Rate-equation g2 of the three-level emitter.

    ``tau1``/``tau2`` and ``a`` parametrize the equivalent closed form
    g2 = 1 - (1 + a) exp(-|t|/tau1) + a exp(-|t|/tau2).
    """

    model: EmitterModel
    pump_mW: float
    tau1: float
    tau2: float
    a: float
    singular: bool = False
    complex_modes: bool = False

    def __call__(self, tau):
        tau = np.abs(np.asarray(tau, dtype=float))
        if self.singular:
            return 1.0 - np.exp(-tau / self.tau1)
        if self.complex_modes:
            return self.evaluate_expm(tau)
        out = 1.0 - (1.0 + self.a) * np.exp(-tau / self.tau1)
        if self.a != 0.0:
            out = out + self.a * np.exp(-tau / self.tau2)
        return out

    def bin_average(self, centers, width):
        """Mean of g2 over bins [c - w/2, c + w/2] (what a histogram measures)."""
        c = np.asarray(centers, dtype=float)
        lo, hi = c - 0.5 * width, c + 0.5 * width
        if self.complex_modes:
            nodes, weights = np.polynomial.legendre.leggauss(16)
            out = np.zeros_like(c)
            for x, wgt in zip(nodes, weights):
                out += 0.5 * wgt * self(c + 0.5 * width * x)
            return out

        def prim(t, tc):
            # antiderivative of exp(-|t|/tc)
            return np.sign(t) * tc * (1.0 - np.exp(-np.abs(t) / tc))

        def avg(tc):
            return (prim(hi, tc) - prim(lo, tc)) / width

        if self.singular:
            return 1.0 - avg(self.tau1)
        out = 1.0 - (1.0 + self.a) * avg(self.tau1)
        if self.a != 0.0:
            out = out + self.a * avg(self.tau2)
        return out

    def evaluate_expm(self, tau):
        """Direct matrix-exponential evaluation (independent of the closed form)."""
        tau = np.abs(np.atleast_1d(np.asarray(tau, dtype=float)))
        M = self.model.rate_matrix(self.pump_mW)
        pe_inf = self.model.steady_state(self.pump_mW)[1]
        p0 = np.array([1.0, 0.0, 0.0])
        return np.array([(expm(M * t) @ p0)[1] / pe_inf for t in tau])


def analytic_g2(model, pump_mW):
    """g2(tau) of the rate equations after a detection resets to ground."""
    M = model.rate_matrix(pump_mW)
    kp = model.pump_rate(pump_mW)
    if kp == 0:
        return AnalyticG2(model, pump_mW, model.lifetime, math.inf, 0.0, singular=True)
    ev = np.linalg.eigvals(M)
    nonzero = ev[np.argsort(np.abs(ev))][1:]
    if np.any(np.abs(nonzero.imag) > 1e-9 * np.abs(nonzero.real)):
        return AnalyticG2(model, pump_mW, float(-1 / nonzero.real.min()), math.inf, 0.0,
                          complex_modes=True)
    lam = np.sort(nonzero.real)  # most negative first
    if model.shelving_rate == 0:
        return AnalyticG2(model, pump_mW, float(-1 / lam[0]), math.inf, 0.0)
    l1, l2 = lam[0], lam[1]
    # p_e(t)/p_e(inf) = 1 + c1 e^{l1 t} + c2 e^{l2 t}; c1 + c2 = -1 and
    # d/dt at 0 equals kp / p_e(inf) (only pumping feeds the excited state)
    slope = kp / model.steady_state(pump_mW)[1]
    c2 = (slope + l1) / (l2 - l1)
    return AnalyticG2(model, pump_mW, float(-1 / l1), float(-1 / l2), float(c2))


@dataclass
class SaturationData:
    """Count rates versus pump power, on the emitter and on a nearby background spot."""

    powers_mW: np.ndarray
    total_cps: np.ndarray
    background_cps: np.ndarray
    total_sigma: np.ndarray
    background_sigma: np.ndarray
    duration: float
    truth: dict = field(default_factory=dict)

    def to_csv(self, path):
        with open(path, "w") as fh:
            fh.write("power_mW,total_cps,total_sigma_cps,background_cps,background_sigma_cps\n")
            for row in zip(self.powers_mW, self.total_cps, self.total_sigma,
                           self.background_cps, self.background_sigma):
                fh.write(",".join(f"{v:.12g}" for v in row) + "\n")

    @classmethod
    def from_csv(cls, path):
        arr = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
        return cls(arr[:, 0], arr[:, 1], arr[:, 3], arr[:, 2], arr[:, 4], float("nan"))


def saturation_dataset(model, det, powers_mW, duration, seed, background_per_mW=0.0):
    """Detected count rates at each pump power.

    Counts per point are Poisson draws around the steady-state detected
    rate, which is the long-time mean of :func:`simulate_cw`; generating
    every photon of a 10^5 cps curve would add nothing but run time.
    Background grows linearly with power on top of ``det.background_rate``.
    """
    _check_common(duration, seed)
    P = np.asarray(powers_mW, dtype=float)
    if P.size == 0 or np.any(P < 0):
        raise DomainError("powers_mW must be a non-empty list of powers >= 0")
    rng = rng_for(seed, _BACKGROUND)
    signal = np.array([det.efficiency * model.emission_rate(p) for p in P])
    bg = det.background_rate + background_per_mW * P
    n_tot = rng.poisson((signal + bg) * duration)
    n_bg = rng.poisson(bg * duration)
    sig = lambda n: np.sqrt(np.maximum(n, 1)) / duration  # noqa: E731
    i_sat, p_sat = model.saturation_parameters()
    truth = {"mode": "saturation", "emitter": model.to_dict(), "detection": det.to_dict(),
             "background_per_mW": background_per_mW, "I_sat_detected": det.efficiency * i_sat,
             "P_sat_mW": p_sat}
    return SaturationData(P, n_tot / duration, n_bg / duration, sig(n_tot), sig(n_bg),
                          float(duration), truth)
