"""Time stepping, sources and running-DFT monitors for the 3D Yee solver."""

from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field

import numba
import numpy as np

from ..constants import C0, EPS0, ETA0, MU0, SOURCE_BAND_NM, wavelength_to_omega
from ..errors import ConfigurationError, StabilityError
from ..materials import MaterialGrid, evaluate_permittivity
from . import kernels

log = logging.getLogger(__name__)

AXES = "xyz"
MAX_COURANT = 1.0 / math.sqrt(3.0)


@dataclass
class SimulationConfig:
    grid: MaterialGrid
    courant_factor: float = 0.5 / math.sqrt(3.0)
    max_steps: int = 40000
    shutoff_fraction: float = 1e-5
    pml_cells: int | None = None
    pml_order: int = 3
    pml_kappa_max: float = 2.0
    pml_alpha_rel: float = 0.05
    workers: int = 1
    energy_check_interval: int = 20
    blowup_factor: float = 1e3

    def __post_init__(self):
        if self.pml_cells is None:
            self.pml_cells = self.grid.pml_cells
        if not 0 < self.courant_factor < MAX_COURANT:
            raise ConfigurationError(
                f"courant_factor {self.courant_factor} outside (0, 1/sqrt(3))")
        if self.pml_cells < 8:
            raise ConfigurationError(f"pml_cells {self.pml_cells} < 8")
        if not 0 < self.shutoff_fraction < 1:
            raise ConfigurationError("shutoff_fraction must lie in (0, 1)")
        if self.max_steps < 1:
            raise ConfigurationError("max_steps must be >= 1")
        if 2 * self.pml_cells + 3 > min(self.grid.shape):
            raise ConfigurationError("grid too small for the requested PML")

    @property
    def dt(self):
        return self.courant_factor * self.grid.cell_size / C0


def default_band_omegas():
    lo, hi = (wavelength_to_omega(w * 1e-9) for w in SOURCE_BAND_NM[::-1])
    return lo, hi


@dataclass
class DipoleSource:
    """Soft point current with a Gaussian-modulated sine waveform.

    The dipole is centred on a Yee node; each Cartesian component is split
    evenly over the two E samples straddling the node so that all
    components share the same centre.
    """

    position: tuple[float, float, float]
    orientation: tuple[float, float, float] = (1.0, 0.0, 0.0)
    pulse_center_freq: float | None = None
    pulse_bandwidth: float | None = None
    amplitude: float = 1.0

    def __post_init__(self):
        lo, hi = default_band_omegas()
        if self.pulse_center_freq is None:
            self.pulse_center_freq = 0.5 * (lo + hi)
        if self.pulse_bandwidth is None:
            self.pulse_bandwidth = 0.5 * (hi - lo)
        o = np.asarray(self.orientation, dtype=float)
        if o.shape != (3,):
            raise ConfigurationError("orientation must have 3 components")
        if abs(np.linalg.norm(o) - 1.0) > 1e-12:
            raise ConfigurationError("orientation must be a unit vector")
        self.orientation = tuple(float(v) for v in o)
        if self.pulse_bandwidth <= 0 or self.pulse_center_freq <= 0:
            raise ConfigurationError("pulse frequencies must be > 0")

    @classmethod
    def at_angle(cls, position, polar_deg, azimuth_deg=0.0, **kw):
        """Dipole tilted `polar_deg` out of the xy-plane towards +z."""
        th, ph = math.radians(polar_deg), math.radians(azimuth_deg)
        o = (math.cos(th) * math.cos(ph), math.cos(th) * math.sin(ph), math.sin(th))
        n = math.sqrt(sum(v * v for v in o))
        return cls(position, tuple(v / n for v in o), **kw)

    @property
    def sigma_t(self):
        return 1.0 / self.pulse_bandwidth

    @property
    def t0(self):
        return 6.0 * self.sigma_t

    @property
    def t_off(self):
        return 12.0 * self.sigma_t

    def waveform(self, t):
        tau = np.asarray(t, dtype=float) - self.t0
        env = np.exp(-0.5 * (tau / self.sigma_t) ** 2)
        out = self.amplitude * env * np.sin(self.pulse_center_freq * tau)
        return np.where(np.asarray(t) > self.t_off, 0.0, out)


def _face_terms(axis, plane, side, lo, hi):
    """Component pairs, index origins and extents for one monitor face.

    The face is the Yee E-node plane `plane` normal to `axis`; the paired H
    samples sit half a cell outward (towards `side`).  This pairing makes
    the discrete Poynting flux satisfy the summation-by-parts identity of
    the update equations exactly, so nested boxes agree in lossless media.
    """
    b, c = (axis + 1) % 3, (axis + 2) % 3
    q = plane if side > 0 else plane - 1
    terms = []
    # S_a = E_b H_c* - E_c H_b*
    for sign, e_ax, h_ax, half_ax, int_ax in ((+1, b, c, b, c), (-1, c, b, c, b)):
        start = [0, 0, 0]
        count = [0, 0, 0]
        start[half_ax], count[half_ax] = lo[half_ax], hi[half_ax] - lo[half_ax]
        start[int_ax], count[int_ax] = lo[int_ax], hi[int_ax] - lo[int_ax] + 1
        e_start, h_start = list(start), list(start)
        e_start[axis], h_start[axis] = plane, q
        count[axis] = 1
        terms.append((sign, "E" + AXES[e_ax], "H" + AXES[h_ax],
                      tuple(e_start), tuple(h_start), tuple(count)))
    return terms


class Face:
    def __init__(self, axis, plane, side, lo, hi):
        self.axis, self.plane, self.side = axis, int(plane), int(side)
        self.lo, self.hi = tuple(int(v) for v in lo), tuple(int(v) for v in hi)
        self.terms = _face_terms(axis, self.plane, self.side, self.lo, self.hi)
        self.acc = {}

    def allocate(self, nf):
        self.acc = {}
        for n, (_, ec, hc, _, _, count) in enumerate(self.terms):
            self.acc[(n, ec)] = np.zeros((nf,) + count, dtype=complex)
            self.acc[(n, hc)] = np.zeros((nf,) + count, dtype=complex)

    def raw_flux(self):
        """Outward 1/2 Re sum (E x H*) . n dA per frequency (unnormalized)."""
        out = 0.0
        for n, (sign, ec, hc, _, _, _) in enumerate(self.terms):
            e, h = self.acc[(n, ec)], self.acc[(n, hc)]
            out = out + sign * np.sum(e * np.conj(h), axis=(1, 2, 3))
        return 0.5 * self.side * np.real(out)


class FluxMonitor:
    """Running-DFT flux monitor made of axis-aligned faces.

    Index bounds are Yee node indices.  A closed box spans the node
    planes ``lo[a]`` and ``hi[a]`` on every axis.
    """

    def __init__(self, faces, sample_freqs, name="flux", stride=1, closed=False):
        self.faces = list(faces)
        self.sample_freqs = np.asarray(sample_freqs, dtype=float)
        self.name = name
        self.stride = int(stride)
        self.closed = closed
        self.cell_size = None
        self.source_spectrum = None
        self.orientation = 1.0
        if closed and len(self.faces) != 6:
            raise ConfigurationError("closed-box monitors need exactly 6 faces")

    @classmethod
    def closed_box(cls, lo, hi, sample_freqs, name="box", stride=1):
        lo, hi = tuple(int(v) for v in lo), tuple(int(v) for v in hi)
        if any(h - l < 1 for l, h in zip(lo, hi)):
            raise ConfigurationError("closed box must span at least one cell per axis")
        faces = []
        for axis in range(3):
            faces.append(Face(axis, lo[axis], -1, lo, hi))
            faces.append(Face(axis, hi[axis], +1, lo, hi))
        return cls(faces, sample_freqs, name=name, stride=stride, closed=True)

    @classmethod
    def around(cls, center, half_cells, sample_freqs, name="box"):
        hc = np.broadcast_to(np.asarray(half_cells, dtype=int), (3,))
        lo = tuple(int(c - h) for c, h in zip(center, hc))
        hi = tuple(int(c + h) for c, h in zip(center, hc))
        return cls.closed_box(lo, hi, sample_freqs, name=name)

    @classmethod
    def plane(cls, axis, index, lo, hi, sample_freqs, side=+1, name="plane", stride=1):
        """Open face; `lo`/`hi` give the tangential node bounds (3-tuples)."""
        return cls([Face(axis, index, side, lo, hi)], sample_freqs, name=name, stride=stride)

    def reversed(self):
        out = FluxMonitor(self.faces, self.sample_freqs, self.name, self.stride, self.closed)
        out.cell_size, out.source_spectrum = self.cell_size, self.source_spectrum
        out.orientation = -self.orientation
        return out

    def check_inside(self, shape, pml):
        for f in self.faces:
            for a in range(3):
                for bound in (f.lo[a], f.hi[a]):
                    if bound < pml or bound > shape[a] - 1 - pml:
                        raise ConfigurationError(f"monitor {self.name!r} reaches into the PML")

    def allocate(self):
        for f in self.faces:
            f.allocate(len(self.sample_freqs))

    def raw_flux(self):
        return self.orientation * sum(f.raw_flux() for f in self.faces) * self.cell_size**2

    def flux(self):
        """Flux per sample frequency, normalized by |source spectrum|^2."""
        raw = self.raw_flux()
        if self.source_spectrum is None:
            return raw
        s2 = np.abs(self.source_spectrum) ** 2
        return np.divide(raw, s2, out=np.zeros_like(raw), where=s2 > 0)

    def freq_index(self, freq):
        rel = np.abs(self.sample_freqs - freq) / max(abs(freq), 1e-300)
        i = int(np.argmin(rel))
        if rel[i] > 1e-9:
            raise KeyError(f"frequency {freq:.6e} rad/s was not sampled by {self.name!r}")
        return i


def closed_box_flux(monitor, freq):
    """Outward Poynting flux through a closed-box monitor at one sampled
    frequency, in W per unit source amplitude squared."""
    if not monitor.closed:
        raise ConfigurationError(f"monitor {monitor.name!r} is not a closed box")
    i = monitor.freq_index(freq)
    return float(monitor.flux()[i])


@dataclass
class FieldSnapshot:
    """Complex E field (DFT at one frequency) on a node-aligned region.

    ``lo``/``hi`` are inclusive node bounds; the component arrays are
    interpolated to the nodes.  A plane is a region one node thick.
    """

    lo: tuple[int, int, int]
    hi: tuple[int, int, int]
    frequency: float
    Ex: np.ndarray
    Ey: np.ndarray
    Ez: np.ndarray
    coords: tuple[np.ndarray, np.ndarray, np.ndarray]
    eps: np.ndarray
    cell_size: float
    material_ids: np.ndarray | None = None
    names: tuple[str, ...] = ()

    @property
    def intensity(self):
        return np.abs(self.Ex) ** 2 + np.abs(self.Ey) ** 2 + np.abs(self.Ez) ** 2

    def plane(self, axis, index):
        """Sub-snapshot on node plane `index` (absolute node index)."""
        k = index - self.lo[axis]
        if not 0 <= k <= self.hi[axis] - self.lo[axis]:
            raise IndexError("plane outside snapshot")
        sl = [slice(None)] * 3
        sl[axis] = slice(k, k + 1)
        sl = tuple(sl)
        lo, hi = list(self.lo), list(self.hi)
        lo[axis] = hi[axis] = index
        coords = list(self.coords)
        coords[axis] = coords[axis][k:k + 1]
        return FieldSnapshot(tuple(lo), tuple(hi), self.frequency, self.Ex[sl], self.Ey[sl],
                             self.Ez[sl], tuple(coords), self.eps[sl], self.cell_size,
                             None if self.material_ids is None else self.material_ids[sl],
                             self.names)


class FieldMonitor:
    """DFT of all E components over a node region at a few frequencies.

    With ``after_source`` the transform only starts once the source has
    switched off, so the result is the ring-down of the excited modes
    without the driven near field of the dipole.
    """

    def __init__(self, lo, hi, freqs, name="field", stride=4, after_source=False):
        self.lo, self.hi = tuple(int(v) for v in lo), tuple(int(v) for v in hi)
        self.freqs = np.atleast_1d(np.asarray(freqs, dtype=float))
        self.name, self.stride, self.after_source = name, int(stride), after_source
        self.acc = {}

    def allocate(self):
        nf = len(self.freqs)
        self.acc = {}
        for a, comp in enumerate(AXES):
            # component samples bracketing the node range (one extra along its own axis)
            count = [h - l + 1 for l, h in zip(self.lo, self.hi)]
            start = list(self.lo)
            start[a] -= 1
            count[a] += 1
            self.acc["E" + comp] = (tuple(start), np.zeros([nf] + count, dtype=complex))

    def snapshots(self, grid):
        out = []
        ids = grid.ids[tuple(slice(2 * l, 2 * h + 1, 2) for l, h in zip(self.lo, self.hi))]
        coords = tuple(grid.coords(a)[self.lo[a]:self.hi[a] + 1] for a in range(3))
        for n, w in enumerate(self.freqs):
            comps = []
            for a, comp in enumerate(AXES):
                arr = self.acc["E" + comp][1][n]
                sl0 = [slice(None)] * 3
                sl1 = [slice(None)] * 3
                sl0[a], sl1[a] = slice(0, -1), slice(1, None)
                comps.append(0.5 * (arr[tuple(sl0)] + arr[tuple(sl1)]))
            table = np.array([evaluate_permittivity(m, w) for m in grid.materials])
            out.append(FieldSnapshot(self.lo, self.hi, float(w), *comps, coords, table[ids],
                                     grid.cell_size, ids, grid.names))
        return out


@dataclass
class SimulationResult:
    monitors: list
    snapshots: dict
    steps: int
    dt: float
    source_spectrum: np.ndarray
    source_power: np.ndarray
    sample_freqs: np.ndarray
    wall_time: float
    energy_trace: np.ndarray = field(repr=False, default=None)
    terminated_by: str = "max_steps"

    def monitor(self, name):
        for m in self.monitors:
            if m.name == name:
                return m
        raise KeyError(name)


class _Fields:
    pass


def _material_tables(grid, dt):
    nm = len(grid.materials)
    cb = np.zeros(nm)
    kj = np.zeros(nm)
    bj = np.zeros(nm)
    pa = np.zeros(nm)
    pb = np.zeros(nm)
    pc = np.zeros(nm)
    ce = np.zeros(nm)
    eps_inf = np.zeros(nm)
    for m, model in enumerate(grid.materials):
        eps_inf[m] = model.eps_inf
        cb[m] = dt / (EPS0 * model.eps_inf)
        ce[m] = 1.0 / (EPS0 * model.eps_inf)
        if model.kind in ("drude", "drude_lorentz") and model.plasma_freq > 0:
            g = model.damping
            kj[m] = (1 - g * dt / 2) / (1 + g * dt / 2)
            bj[m] = EPS0 * model.plasma_freq**2 * dt / (1 + g * dt / 2)
        if len(model.lorentz_poles) > 1:
            raise ConfigurationError("the time-domain solver supports at most one Lorentz pole")
        for p in model.lorentz_poles:
            den = 1 + p.linewidth * dt / 2
            pa[m] = (2 - (p.center_freq * dt) ** 2) / den
            pb[m] = (p.linewidth * dt / 2 - 1) / den
            pc[m] = EPS0 * p.strength * (p.center_freq * dt) ** 2 / den
    return (cb, kj, bj, pa, pb, pc, ce), eps_inf


def _pml_profiles(n, npml, h, dt, order, kappa_max, alpha_max):
    """CPML (b, c, 1/kappa) on integer (E) and half-integer (H) positions."""
    sigma_max = 0.8 * (order + 1) / (ETA0 * h)

    def depth(u):
        d = np.zeros_like(u)
        lo = u < npml
        hi = u > n - 1 - npml
        d[lo] = (npml - u[lo]) / npml
        d[hi] = (u[hi] - (n - 1 - npml)) / npml
        return np.clip(d, 0, 1)

    out = []
    for u in (np.arange(n, dtype=float), np.arange(n, dtype=float) + 0.5):
        d = depth(u)
        sigma = sigma_max * d**order
        kappa = 1 + (kappa_max - 1) * d**order
        alpha = alpha_max * (1 - d)
        b = np.exp(-(sigma / kappa + alpha) * dt / EPS0)
        denom = sigma * kappa + kappa**2 * alpha
        c = np.divide(sigma * (b - 1), denom, out=np.zeros_like(sigma), where=denom > 0)
        out.append((b, c, 1.0 / kappa))
    return out


# (field, derivative source, curl sign, derivative axis)
_E_PML_TERMS = (("Ex", "Hz", +1, 1), ("Ex", "Hy", -1, 2),
                ("Ey", "Hx", +1, 2), ("Ey", "Hz", -1, 0),
                ("Ez", "Hy", +1, 0), ("Ez", "Hx", -1, 1))
_H_PML_TERMS = (("Hx", "Ez", +1, 1), ("Hx", "Ey", -1, 2),
                ("Hy", "Ex", +1, 2), ("Hy", "Ez", -1, 0),
                ("Hz", "Ey", +1, 0), ("Hz", "Ex", -1, 1))


def _update_ranges(comp, shape):
    """Index ranges that the main kernels update for a field component."""
    nx, ny, nz = shape
    a = "xyz".index(comp[1])
    r = []
    for ax, n in enumerate(shape):
        if comp[0] == "E":
            r.append((0, n - 1) if ax == a else (1, n - 1))
        else:
            r.append((0, n) if ax == a else (0, n - 1))
    return r


class _PML:
    def __init__(self, cfg, grid, dt):
        n, h = grid.shape, grid.cell_size
        npml = cfg.pml_cells
        lo_b, hi_b = default_band_omegas()
        alpha_max = cfg.pml_alpha_rel * EPS0 * 0.5 * (lo_b + hi_b)
        self.prof = [_pml_profiles(n[a], npml, h, dt, cfg.pml_order, cfg.pml_kappa_max, alpha_max)
                     for a in range(3)]
        self.e_jobs, self.h_jobs = [], []
        for terms, is_e in ((_E_PML_TERMS, True), (_H_PML_TERMS, False)):
            for comp, src, sign, ax in terms:
                N = n[ax]
                if is_e:
                    slabs = ((1, npml), (N - npml, N - 1))
                    b, c, kinv = self.prof[ax][0]
                else:
                    slabs = ((0, npml), (N - 1 - npml, N - 1))
                    b, c, kinv = self.prof[ax][1]
                rng = _update_ranges(comp, n)
                for lo, hi in slabs:
                    box = [tuple(r) for r in rng]
                    box[ax] = (lo, hi)
                    box = [np.array(r, dtype=np.int64) for r in box]
                    psi = np.zeros(tuple(int(r[1] - r[0]) for r in box))
                    job = (comp, src, ax, float(sign), psi, b, c, kinv, *box)
                    (self.e_jobs if is_e else self.h_jobs).append(job)

    def apply_e(self, f, cb):
        inv_h = 1.0 / f.h
        for comp, src, ax, sign, psi, b, c, kinv, r0, r1, r2 in self.e_jobs:
            kernels.pml_e(getattr(f, comp), getattr(f, src), ax, sign, getattr(f, "m" + comp[1]),
                          cb, psi, b, c, kinv, r0, r1, r2, inv_h)

    def apply_h(self, f, ch):
        # ch = dt/(mu0 h) already carries the 1/h of the difference
        for comp, src, ax, sign, psi, b, c, kinv, r0, r1, r2 in self.h_jobs:
            kernels.pml_h(getattr(f, comp), getattr(f, src), ax, sign, ch, psi, b, c, kinv,
                          r0, r1, r2)


def _source_taps(grid, source):
    """(component, index, weight) samples of the centred point dipole."""
    idx = grid.node_index(source.position)
    pos = grid.node_position(idx)
    if max(abs(p - q) for p, q in zip(pos, source.position)) > 0.01 * grid.cell_size:
        log.debug("dipole snapped to node %s", idx)
    taps = []
    for a, comp in enumerate(AXES):
        w = source.orientation[a]
        if w == 0.0:
            continue
        for shift in (-1, 0):
            i = list(idx)
            i[a] += shift
            taps.append(("E" + comp, tuple(i), 0.5 * w))
    return idx, taps


def run(config, source, monitors=(), field_monitors=(), *, progress=None):
    """Time-step the grid with `source` until the energy shutoff or max_steps.

    Monitors are filled in place and returned in the result together with
    the source spectrum and the power delivered by the source,
    -1/2 Re sum(E . J*) dV, which equals the flux through any closed box
    in a lossless region enclosing the dipole.
    """
    grid = config.grid
    nx, ny, nz = grid.shape
    h = grid.cell_size
    dt = config.dt
    numba.set_num_threads(max(1, min(config.workers, numba.config.NUMBA_NUM_THREADS)))
    center_idx, taps = _source_taps(grid, source)
    if grid.is_in_pml(center_idx) or any(grid.is_in_pml(t[1]) for t in taps):
        raise ConfigurationError("dipole source lies inside the PML")
    for t in taps:
        if not all(1 <= t[1][a] < grid.shape[a] - 1 for a in range(3)):
            raise ConfigurationError("dipole source lies on the grid boundary")
    for m in monitors:
        m.check_inside(grid.shape, config.pml_cells)
        m.cell_size = h
        m.allocate()
    for fm in field_monitors:
        fm.allocate()

    tables, eps_inf = _material_tables(grid, dt)
    f = _Fields()
    f.h = h
    shape = grid.shape
    for comp in ("Ex", "Ey", "Ez", "Hx", "Hy", "Hz"):
        setattr(f, comp, np.zeros(shape))
    f.mx, f.my, f.mz = (grid.component_ids(c) for c in AXES)
    dispersive = np.any(tables[2] != 0)
    f.has_pole = bool(np.any(tables[5] != 0))
    dummy = np.zeros((1, 1, 1))
    for c in AXES:
        setattr(f, "J" + c, np.zeros(shape) if dispersive else dummy)
        setattr(f, "P" + c, np.zeros(shape) if f.has_pole else dummy)
        setattr(f, "P" + c + "m", np.zeros(shape) if f.has_pole else dummy)
    pml = _PML(config, grid, dt)
    cb = tables[0]
    ch = dt / (MU0 * h)

    tap_cb = [cb[getattr(f, "m" + comp[1])[idx]] for comp, idx, _ in taps]
    all_freqs = [m.sample_freqs for m in monitors] + [fm.freqs for fm in field_monitors]
    key_freqs = np.unique(np.concatenate(all_freqs)) if all_freqs else np.zeros(0)
    src_spec = np.zeros(len(key_freqs), dtype=complex)
    tap_e = np.zeros((len(taps), len(key_freqs)), dtype=complex)

    n_steps = config.max_steps
    energy_trace = []
    peak_energy = 0.0
    energy_at_off = None
    terminated = "max_steps"
    t_start = time.perf_counter()
    step = 0
    for step in range(n_steps):
        t_h = (step + 0.5) * dt
        t_e = (step + 1) * dt
        kernels.update_h(f.Ex, f.Ey, f.Ez, f.Hx, f.Hy, f.Hz, ch)
        pml.apply_h(f, ch)
        for m in monitors:
            if step % m.stride == 0:
                ph = np.exp(1j * m.sample_freqs * t_h) * m.stride
                for face in m.faces:
                    for n, (_, ec, hc, es, hs, count) in enumerate(face.terms):
                        kernels.dft_accumulate(face.acc[(n, hc)], getattr(f, hc), *hs, ph)
        kernels.update_e(f, tables)
        pml.apply_e(f, cb)
        j_now = float(source.waveform(t_h))
        if j_now != 0.0:
            for (comp, idx, w), c in zip(taps, tap_cb):
                getattr(f, comp)[idx] -= c * w * j_now
        if j_now != 0.0 and len(key_freqs):
            src_spec += j_now * np.exp(1j * key_freqs * t_h)
        if len(key_freqs):
            ph_e = np.exp(1j * key_freqs * t_e)
            for n, (comp, idx, w) in enumerate(taps):
                tap_e[n] += getattr(f, comp)[idx] * ph_e
        for m in monitors:
            if step % m.stride == 0:
                ph = np.exp(1j * m.sample_freqs * t_e) * m.stride
                for face in m.faces:
                    for n, (_, ec, hc, es, hs, count) in enumerate(face.terms):
                        kernels.dft_accumulate(face.acc[(n, ec)], getattr(f, ec), *es, ph)
        for fm in field_monitors:
            if step % fm.stride == 0 and (not fm.after_source or t_e > source.t_off):
                ph = np.exp(1j * fm.freqs * t_e) * fm.stride
                for comp in ("Ex", "Ey", "Ez"):
                    start, acc = fm.acc[comp]
                    kernels.dft_accumulate(acc, getattr(f, comp), *start, ph)
        if step % config.energy_check_interval == 0:
            energy = kernels.field_energy(f.Ex, f.Ey, f.Ez, f.Hx, f.Hy, f.Hz, eps_inf,
                                          f.mx, f.my, f.mz, EPS0, MU0)
            energy_trace.append((step, energy))
            if not math.isfinite(energy):
                raise StabilityError(step)
            peak_energy = max(peak_energy, energy)
            if t_e > source.t_off:
                if energy_at_off is None:
                    energy_at_off = energy
                elif energy > config.blowup_factor * max(energy_at_off, 1e-300):
                    raise StabilityError(step)
                if energy <= config.shutoff_fraction * peak_energy:
                    terminated = "energy_decay"
                    break
            if progress is not None:
                progress(step, energy)
    wall = time.perf_counter() - t_start

    # E is transformed on integer steps and J on half steps; with that phase
    # convention the discrete update equations hold exactly in frequency space
    source_power = np.zeros(len(key_freqs))
    for n, (comp, idx, w) in enumerate(taps):
        source_power += -0.5 * np.real(tap_e[n] * np.conj(w * src_spec)) * h**3
    for m in monitors:
        sel = np.searchsorted(key_freqs, m.sample_freqs)
        m.source_spectrum = src_spec[sel]
    snaps = {fm.name: fm.snapshots(grid) for fm in field_monitors}
    s2 = np.abs(src_spec) ** 2
    norm_power = np.divide(source_power, s2, out=np.zeros_like(source_power), where=s2 > 0)
    log.info("fdtd: %d steps (%s) on %s grid in %.1f s", step + 1, terminated, grid.shape, wall)
    return SimulationResult(list(monitors), snaps, step + 1, dt, src_spec, norm_power,
                            key_freqs, wall, np.array(energy_trace), terminated)
