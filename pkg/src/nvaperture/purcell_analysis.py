"""Emission-rate enhancement, mode volume, collection efficiency and sweeps.

Every enhancement comes from :func:`enhancement_spectrum`: rasterize the
geometry, run the structure, run (or reuse) the homogeneous reference on
an identical grid with an identical source and flux box, and divide.
"""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import math
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace

import numpy as np
from scipy.fft import next_fast_len
from scipy.signal.windows import tukey

from .constants import C0, NV_BAND_NM, SOURCE_BAND_NM
from .errors import ConfigurationError, CoverageError
from .fdtd_engine import DipoleSource, FieldMonitor, FluxMonitor, SimulationConfig, run
from .materials import (SILVER, PermittivityModel, evaluate_permittivity, homogeneous_like,
                        rasterize)

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class SolverSettings:
    """Resolution and FDTD parameters shared by every run of an analysis."""

    cell_size: float = 10e-9
    padding: float = 100e-9
    pml_cells: int = 8
    courant_factor: float = 0.5 / math.sqrt(3)
    max_steps: int = 60000
    shutoff_fraction: float = 1e-5
    n_wavelengths: int = 51
    workers: int = 1
    volume_average: bool = True
    silver: PermittivityModel = SILVER

    def __post_init__(self):
        if self.n_wavelengths < 2:
            raise ConfigurationError("n_wavelengths must be >= 2")

    def config(self, grid):
        return SimulationConfig(grid, courant_factor=self.courant_factor,
                                max_steps=self.max_steps, shutoff_fraction=self.shutoff_fraction,
                                pml_cells=self.pml_cells, workers=self.workers)

    def to_dict(self):
        d = asdict(self)
        d["silver"] = self.silver.to_dict()
        return d


COARSE = SolverSettings()
FULL = SolverSettings(cell_size=5e-9, padding=150e-9, pml_cells=10)


@dataclass(frozen=True)
class DipolePose:
    """Dipole placement relative to the post axis.

    ``depth`` is measured down from the top facet (None: the geometry's
    emitter depth); ``polar_deg`` is the angle from the substrate plane
    (0 in-plane, 90 along the post axis); ``offset`` shifts it laterally.
    """

    depth: float | None = None
    polar_deg: float = 0.0
    azimuth_deg: float = 0.0
    offset: tuple = (0.0, 0.0)

    def orientation(self):
        th, ph = math.radians(self.polar_deg), math.radians(self.azimuth_deg)
        v = np.array([math.cos(th) * math.cos(ph), math.cos(th) * math.sin(ph), math.sin(th)])
        v[np.abs(v) < 1e-15] = 0.0
        return tuple(v / np.linalg.norm(v))

    def position(self, geometry):
        depth = geometry.emitter_depth_below_top if self.depth is None else self.depth
        return (self.offset[0], self.offset[1], geometry.post_height - depth)

    def to_dict(self):
        return asdict(self)


def band_wavelengths(settings, band_nm=SOURCE_BAND_NM):
    lo, hi = band_nm
    if lo < SOURCE_BAND_NM[0] - 1e-9 or hi > SOURCE_BAND_NM[1] + 1e-9 or lo >= hi:
        raise ConfigurationError(f"band {band_nm} nm outside the source band {SOURCE_BAND_NM}")
    return np.linspace(lo, hi, settings.n_wavelengths)


def _omegas(lam_nm):
    return 2 * np.pi * C0 / (np.asarray(lam_nm) * 1e-9)


@dataclass
class EnhancementSpectrum:
    wavelengths: np.ndarray
    enhancement: np.ndarray
    fingerprint: str
    pose: DipolePose
    reference: str = "substrate"
    structure_power: np.ndarray | None = field(default=None, repr=False)
    reference_power: np.ndarray | None = field(default=None, repr=False)
    source_power_check: float = 0.0
    steps: int = 0
    terminated_by: str = ""
    geometry: dict = field(default_factory=dict)
    settings: dict = field(default_factory=dict)

    def band_average(self, band_nm=NV_BAND_NM):
        m = (self.wavelengths >= band_nm[0] - 1e-9) & (self.wavelengths <= band_nm[1] + 1e-9)
        return float(np.mean(self.enhancement[m]))

    @property
    def peak_index(self):
        return int(np.argmax(self.enhancement))

    @property
    def peak_enhancement(self):
        return float(self.enhancement[self.peak_index])

    @property
    def peak_wavelength(self):
        """Peak location refined by a parabola through the top three samples (nm)."""
        i = self.peak_index
        lam, F = self.wavelengths, self.enhancement
        if 0 < i < len(lam) - 1:
            x, y = lam[i - 1:i + 2], F[i - 1:i + 2]
            c2, c1, _ = np.polyfit(x, y, 2)
            if c2 < 0:
                xv = -c1 / (2 * c2)
                if x[0] <= xv <= x[2]:
                    return float(xv)
        return float(lam[i])

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["wavelength_nm", "enhancement"])
            for lam, f in zip(self.wavelengths, self.enhancement):
                w.writerow([f"{lam:.6f}", f"{f:.9g}"])

    def sidecar(self):
        return {"geometry_fingerprint": self.fingerprint, "geometry": self.geometry,
                "dipole": self.pose.to_dict(), "reference": self.reference,
                "solver": self.settings, "steps": self.steps,
                "terminated_by": self.terminated_by,
                "source_power_check": self.source_power_check,
                "peak_enhancement": self.peak_enhancement,
                "peak_wavelength_nm": self.peak_wavelength,
                "band_average": self.band_average()}

    def write(self, stem):
        self.to_csv(f"{stem}.csv")
        with open(f"{stem}.json", "w") as fh:
            json.dump(self.sidecar(), fh, indent=2, sort_keys=True)
        return [f"{stem}.csv", f"{stem}.json"]


# ------------------------------------------------------------------ running

_REFERENCE_CACHE: dict = {}


def _box_half_cells(grid, center):
    """Largest closed-box half-width (1 or 2 cells) staying inside the source's material."""
    mid = grid.ids[tuple(2 * c for c in center)]
    for half in (2, 1):
        sl = tuple(slice(2 * (c - half), 2 * (c + half) + 1) for c in center)
        if np.all(grid.ids[sl] == mid):
            return half
    raise ConfigurationError("dipole too close to a material interface for a closed box")


def grid_digest(grid):
    """Content hash of a material grid: what the solver sees, not how it was built.

    Unused material slots and the numbering of ids do not change the hash.
    """
    used, inverse = np.unique(grid.ids, return_inverse=True)
    h = hashlib.sha256()
    h.update(repr((grid.shape, grid.cell_size, grid.origin, grid.pml_cells,
                   [grid.materials[i].to_dict() for i in used])).encode())
    h.update(inverse.astype(np.uint8).tobytes())
    return h.hexdigest()


_STRUCTURE_CACHE: dict = {}


def _run_key(grid, source, freqs, settings, half):
    return hashlib.sha256(repr((grid_digest(grid), source.position, source.orientation,
                                tuple(np.round(freqs, 3)), settings.courant_factor,
                                settings.shutoff_fraction, settings.max_steps,
                                settings.pml_cells, half)).encode()).hexdigest()


def _run_powers(grid, source, freqs, settings, field_monitors=(), half=None):
    """Closed-box power (and source-side power) of one run.

    Runs without field monitors are memoized on the grid content, source
    and solver settings; the engine is deterministic, so a repeat would
    reproduce the same numbers.
    """
    c = grid.node_index(source.position)
    if half is None:
        half = _box_half_cells(grid, c)
    key = _run_key(grid, source, freqs, settings, half)
    if not field_monitors and key in _STRUCTURE_CACHE:
        return _STRUCTURE_CACHE[key] + (half,)
    box = FluxMonitor.around(c, half, freqs, "box")
    res = run(settings.config(grid), source, [box], list(field_monitors))
    flux = box.flux()
    sp = res.source_power[np.searchsorted(res.sample_freqs, freqs)]
    _STRUCTURE_CACHE[key] = (flux, sp, _RunSummary(res.steps, res.terminated_by, res))
    if field_monitors:
        return flux, sp, res, half
    _STRUCTURE_CACHE[key][2].result = None  # keep the memo light
    return flux, sp, _STRUCTURE_CACHE[key][2], half


@dataclass
class _RunSummary:
    steps: int
    terminated_by: str
    result: object = None


_PROFILE_CACHE: dict = {}


def clear_caches():
    """Forget memoized structure, reference, field-scan and mode-profile runs."""
    _STRUCTURE_CACHE.clear()
    _REFERENCE_CACHE.clear()
    _PROFILE_CACHE.clear()


def _profile_key(kind, grid, source, settings, *extra):
    return hashlib.sha256(repr((kind, grid_digest(grid), source.position, source.orientation,
                                settings.courant_factor, settings.shutoff_fraction,
                                settings.max_steps, settings.pml_cells,
                                settings.n_wavelengths) + extra).encode()).hexdigest()


def _reference_key(grid, source, freqs, settings, index, half):
    h = hashlib.sha256()
    h.update(repr((grid.shape, grid.cell_size, grid.origin, source.position, source.orientation,
                   tuple(np.round(freqs, 3)), settings.courant_factor, settings.shutoff_fraction,
                   settings.max_steps, settings.pml_cells, index, half)).encode())
    return h.hexdigest()


def reference_powers(grid, source, freqs, settings, index=None, half=1):
    """Homogeneous-medium dipole power on the same grid and box (memoized)."""
    ref = homogeneous_like(grid, index)
    key = _reference_key(grid, source, freqs, settings, index, half)
    if key not in _REFERENCE_CACHE:
        flux, _, _, _ = _run_powers(ref, source, freqs, settings, half=half)
        _REFERENCE_CACHE[key] = flux
    return _REFERENCE_CACHE[key]


def build_grid(geometry, settings):
    return rasterize(geometry, settings.cell_size, settings.padding,
                     pml_cells=settings.pml_cells, silver=settings.silver,
                     volume_average=settings.volume_average)


def make_source(grid, geometry, pose):
    pos = pose.position(geometry)
    snapped = grid.node_position(grid.node_index(pos))
    return DipoleSource(snapped, pose.orientation())


def enhancement_spectrum(geometry, pose=None, band_nm=SOURCE_BAND_NM, settings=COARSE,
                         reference="substrate", field_monitors=(), _return_run=False):
    """F(lambda) = P_structure / P_homogeneous from identical closed boxes and sources.

    `reference` is 'substrate' (bulk medium of index substrate_index) or
    'vacuum' (solver validation).
    """
    pose = pose or DipolePose()
    lam = band_wavelengths(settings, band_nm)
    freqs = _omegas(lam)
    grid = build_grid(geometry, settings)
    src = make_source(grid, geometry, pose)
    if grid.is_in_pml(grid.node_index(src.position)):
        raise ConfigurationError("dipole lies in the absorbing layer")
    flux, sp, res, half = _run_powers(grid, src, freqs, settings, field_monitors)
    index = geometry.substrate_index if reference == "substrate" else 1.0
    if reference not in ("substrate", "vacuum"):
        raise ConfigurationError(f"unknown reference {reference!r}")
    ref = reference_powers(grid, src, freqs, settings, index, half)
    F = flux / ref
    check = float(np.max(np.abs(sp / flux - 1.0)))
    spec = EnhancementSpectrum(lam, F, geometry.fingerprint(), pose, reference, flux, ref,
                               check, res.steps, res.terminated_by, geometry.to_dict(),
                               settings.to_dict())
    log.info("F: peak %.2f at %.0f nm, band average %.2f", spec.peak_enhancement,
             spec.peak_wavelength, spec.band_average())
    if _return_run:
        return spec, res, grid
    return spec


def quenching_factor(geometry, pose=None, settings=COARSE, band_nm=NV_BAND_NM):
    """Band-averaged enhancement of a bare (uncoated) post; < 1 means quenching."""
    if geometry.variant not in ("bare_post", "homogeneous"):
        raise ConfigurationError("quenching_factor needs the bare_post variant")
    spec = enhancement_spectrum(geometry, pose, settings=settings)
    return spec.band_average(band_nm), spec


# ------------------------------------------------------------------ sweeps

@dataclass
class SweepResult:
    parameter: str
    values: list
    spectra: list

    @property
    def peak_enhancement(self):
        return [s.peak_enhancement for s in self.spectra]

    @property
    def peak_wavelength(self):
        return [s.peak_wavelength for s in self.spectra]

    @property
    def band_average(self):
        return [s.band_average() for s in self.spectra]

    def summary(self):
        return {"min_avg_F": float(min(self.band_average)),
                "max_avg_F": float(max(self.band_average))}

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow([self.parameter, "peak_F", "peak_lambda_nm", "avg_F"])
            for v, s in zip(self.values, self.spectra):
                w.writerow([f"{v:.9g}", f"{s.peak_enhancement:.9g}",
                            f"{s.peak_wavelength:.6f}", f"{s.band_average():.9g}"])


def _one(args):
    geometry, pose, settings = args
    return enhancement_spectrum(geometry, pose, settings=settings)


def _fan_out(jobs, workers):
    """Run (geometry, pose, settings) jobs; order of results matches jobs."""
    if workers > 1 and len(jobs) > 1:
        jobs = [(g, p, replace(s, workers=1)) for g, p, s in jobs]
        with ProcessPoolExecutor(max_workers=min(workers, len(jobs))) as ex:
            return list(ex.map(_one, jobs))
    return [_one(j) for j in jobs]


def radius_sweep(geometry, radii, pose=None, settings=COARSE):
    """Sweep the top radius keeping the sidewall taper (r_bottom - r_top) fixed."""
    taper = geometry.post_radius_bottom - geometry.post_radius_top
    jobs = [(geometry.with_(post_radius_top=r, post_radius_bottom=r + taper), pose, settings)
            for r in radii]
    return SweepResult("radius_m", list(radii), _fan_out(jobs, settings.workers))


def orientation_sweep(geometry, depth=None, angles=(0, 15, 30, 45, 60, 75, 90), azimuth_deg=0.0,
                      settings=COARSE, doublet=False, method="basis"):
    """Band-averaged F versus polar angle (0 in-plane ... 90 axial).

    With ``doublet`` each point averages the rates of two orthogonal
    dipoles perpendicular to the tilted axis (NV-doublet approximation).

    ``method="basis"`` runs the x, y and z dipoles once and combines
    them: on the axis of a structure with mirror planes x=0 and y=0 the
    off-diagonal Green's tensor elements vanish, so the power of
    p = (px, py, pz) is px^2 Px + py^2 Py + pz^2 Pz in both the structure
    and the reference.  ``"direct"`` runs every orientation separately.
    """
    if min(angles) < 0 or max(angles) > 90:
        raise ConfigurationError("angles must lie in [0, 90] degrees")
    if method not in ("basis", "direct"):
        raise ConfigurationError(f"unknown orientation method {method!r}")

    def poses(a):
        if doublet:
            # dipoles perpendicular to an axis tilted by `a` from the substrate plane
            return [DipolePose(depth, 90.0 - a, azimuth_deg + 180.0),
                    DipolePose(depth, 0.0, azimuth_deg + 90.0)]
        return [DipolePose(depth, a, azimuth_deg)]

    if method == "direct":
        spectra = []
        for a in angles:
            group = _fan_out([(geometry, p, settings) for p in poses(a)], settings.workers)
            spectra.append(group[0] if len(group) == 1 else
                           replace(group[0], enhancement=np.mean([g.enhancement for g in group], 0)))
        return SweepResult("polar_deg", list(angles), spectra)

    basis = orientation_basis(geometry, depth, settings)
    spectra = []
    for a in angles:
        group = [combine_basis(basis, p) for p in poses(a)]
        spectra.append(group[0] if len(group) == 1 else
                       replace(group[0], enhancement=np.mean([g.enhancement for g in group], 0)))
    return SweepResult("polar_deg", list(angles), spectra)


def orientation_basis(geometry, depth=None, settings=COARSE):
    """Spectra of on-axis x, y and z dipoles (y reuses x when the grid is x-y symmetric)."""
    grid = build_grid(geometry, settings)
    square = grid.shape[0] == grid.shape[1] and np.array_equal(grid.ids,
                                                               grid.ids.transpose(1, 0, 2))
    jobs = [(geometry, DipolePose(depth, 0.0, 0.0), settings),
            (geometry, DipolePose(depth, 90.0, 0.0), settings)]
    if not square:
        jobs.append((geometry, DipolePose(depth, 0.0, 90.0), settings))
    out = _fan_out(jobs, settings.workers)
    sx, sz = out[0], out[1]
    sy = out[2] if not square else sx
    return {"x": sx, "y": sy, "z": sz}


def combine_basis(basis, pose):
    """Enhancement of an arbitrary on-axis orientation from the basis spectra."""
    v = np.asarray(pose.orientation())
    w = v**2
    num = sum(wi * basis[k].structure_power for wi, k in zip(w, "xyz"))
    den = sum(wi * basis[k].reference_power for wi, k in zip(w, "xyz"))
    base = basis["x"]
    return replace(base, enhancement=num / den, pose=pose, structure_power=num, reference_power=den)


def axial_position_sweep(geometry, depths, pose=None, settings=COARSE):
    for d in depths:
        if not 0 < d < geometry.post_height:
            raise ConfigurationError(f"depth {d} m lies outside the post")
    base = pose or DipolePose()
    jobs = [(geometry, replace(base, depth=d), settings) for d in depths]
    return SweepResult("depth_m", list(depths), _fan_out(jobs, settings.workers))


# ------------------------------------------------------------------ mode profile

def energy_permittivity(model, omega):
    """d(omega eps')/d omega: the permittivity weighting electric energy.

    Equals eps for a dispersionless medium and stays positive for a
    Drude metal (where Re eps < 0).
    """
    d = omega * 1e-6
    f = lambda w: w * evaluate_permittivity(model, w).real
    return (f(omega + d) - f(omega - d)) / (2 * d)


@dataclass
class ModeProfile:
    snapshot: object
    energy_density: np.ndarray
    wavelength_nm: float
    cell_size: float

    @classmethod
    def from_snapshot(cls, snap, grid):
        w = snap.frequency
        table = np.array([energy_permittivity(m, w) for m in grid.materials])
        u = table[snap.material_ids] * snap.intensity
        return cls(snap, u, 2 * np.pi * C0 / w * 1e9, grid.cell_size)

    def axis_profile(self):
        """u along the node column closest to the post axis."""
        s = self.snapshot
        i = int(np.argmin(np.abs(s.coords[0])))
        j = int(np.argmin(np.abs(s.coords[1])))
        return s.coords[2], self.energy_density[i, j, :]

    def to_csv(self, path, axis=1, index=None):
        """Longitudinal slice (x-z plane through the axis by default)."""
        s = self.snapshot
        if index is None:
            index = int(np.argmin(np.abs(s.coords[axis])))
        u = np.take(self.energy_density, index, axis=axis)
        other = [a for a in range(3) if a != axis]
        c0, c1 = s.coords[other[0]], s.coords[other[1]]
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow([f"{'xyz'[other[0]]}_nm", f"{'xyz'[other[1]]}_nm", "energy_density_au"])
            for a in range(len(c0)):
                for b in range(len(c1)):
                    w.writerow([f"{c0[a]*1e9:.3f}", f"{c1[b]*1e9:.3f}", f"{u[a, b]:.6e}"])


def mode_volume(profile, wavelength_nm=None, index=None, region=None):
    """V = sum(u dV) / max(u) in units of (lambda / n)^3.

    `region` (optional ((lo), (hi)) node box inside the snapshot) must be
    covered by the profile, else CoverageError.
    """
    s = profile.snapshot
    if region is not None:
        lo, hi = region
        if any(l < a or h > b for l, h, a, b in zip(lo, hi, s.lo, s.hi)):
            raise CoverageError("mode profile does not cover the requested region")
    lam = (wavelength_nm if wavelength_nm is not None else profile.wavelength_nm) * 1e-9
    n = index if index is not None else 2.417
    u = profile.energy_density
    umax = float(np.max(u))
    if not umax > 0:
        raise CoverageError("mode profile carries no energy")
    V = float(np.sum(u)) * profile.cell_size**3 / umax
    return V / (lam / n) ** 3


def _post_box(grid, geometry, margin_cells):
    """Node bounds enclosing the post plus `margin_cells` on every side."""
    h = grid.cell_size
    r = max(geometry.post_radius_top, geometry.post_radius_bottom) + margin_cells * h
    lo = grid.node_index((-r, -r, -margin_cells * h))
    hi = grid.node_index((r, r, geometry.post_height + margin_cells * h))
    p = grid.pml_cells
    lo = tuple(max(v, p) for v in lo)
    hi = tuple(min(v, n - 1 - p) for v, n in zip(hi, grid.shape))
    return lo, hi


def mode_profile(geometry, wavelength_nm, pose=None, settings=COARSE, margin_cells=4):
    """Ring-down E field over the post region at `wavelength_nm`."""
    pose = pose or DipolePose()
    grid = build_grid(geometry, settings)
    src = make_source(grid, geometry, pose)
    lo, hi = _post_box(grid, geometry, margin_cells)
    key = _profile_key("mode", grid, src, settings, round(float(wavelength_nm), 9), lo, hi)
    if key not in _PROFILE_CACHE:
        fm = FieldMonitor(lo, hi, _omegas([wavelength_nm]), "mode", stride=2, after_source=True)
        res = run(settings.config(grid), src, [], [fm])
        _PROFILE_CACHE[key] = ModeProfile.from_snapshot(res.snapshots["mode"][0], grid)
    return _PROFILE_CACHE[key]


def find_field_maximum(geometry, settings=COARSE, polar_deg=0.0):
    """Locate the intensity antinode on the post axis.

    A preliminary run with the dipole at mid-height gives the resonance
    (peak of F) and the ring-down field on the axis; the depth of maximal
    energy density inside the post is returned with the spectrum.
    """
    mid = DipolePose(depth=geometry.post_height / 2, polar_deg=polar_deg)
    grid = build_grid(geometry, settings)
    src = make_source(grid, geometry, mid)
    key = _profile_key("axis", grid, src, settings)
    if key not in _PROFILE_CACHE:
        _PROFILE_CACHE[key] = _field_scan(geometry, settings, mid, grid)
    return _PROFILE_CACHE[key]


def _field_scan(geometry, settings, mid, grid):
    lam = band_wavelengths(settings)
    c = grid.node_index((0.0, 0.0, 0.0))
    top = grid.node_index((0.0, 0.0, geometry.post_height))
    line = FieldMonitor((c[0], c[1], c[2] + 1), (c[0], c[1], top[2] - 1), _omegas(lam), "axis",
                        stride=2, after_source=True)
    spec, res, _ = enhancement_spectrum(geometry, mid, settings=settings, field_monitors=[line],
                                        _return_run=True)
    snap = res.snapshots["axis"][spec.peak_index]
    z = snap.coords[2]
    inten = snap.intensity[0, 0, :]
    k = int(np.argmax(inten))
    zk = float(z[k])
    if 0 < k < len(z) - 1:
        # parabolic vertex through the top three samples
        a, b, c = inten[k - 1:k + 2]
        den = a - 2 * b + c
        if den < 0:
            zk += 0.5 * (a - c) / den * float(z[k + 1] - z[k])
    depth = geometry.post_height - zk
    return depth, spec, (z, inten)


# ------------------------------------------------------------------ collection

def plane_kspace_power(snap, index, k_max, pad_factor=4, taper=0.5, k_resolution=1 / 48):
    """Power carried through a substrate plane by plane waves with |k_par| <= k_max.

    Only E is needed: in the homogeneous half space below the structure
    every propagating component travels away from the source, so its
    Poynting flux follows from the tangential E (separated into s and p).
    The plane is apodized with a Tukey window (`taper` = tapered
    fraction) so the hard edge of the finite window does not leak
    large-angle power into the small-k disk.  The FFT is zero-padded to
    at least `pad_factor` times the window and fine enough that a k-space
    pixel is at most `k_resolution` of the medium wavenumber (None: no
    floor), so the disk
    sum is a converged quadrature even for small NA.  `k_max` may be a
    sequence (one FFT serves all).  Returns unnormalized power in the
    monitors' DFT units.
    """
    w = snap.frequency
    k = index * w / C0
    kmax = np.atleast_1d(np.asarray(k_max, dtype=float))
    if np.any(kmax > k * (1 + 1e-12)):
        raise ConfigurationError("k_max beyond the propagating limit of the medium")
    h = snap.cell_size
    ex, ey = snap.Ex[:, :, 0], snap.Ey[:, :, 0]
    nx, ny = ex.shape
    if taper > 0:
        win = np.outer(tukey(nx, taper), tukey(ny, taper))
        ex, ey = ex * win, ey * win
    fine = 0 if k_resolution is None else int(np.ceil(2 * np.pi / (k_resolution * k * h)))
    Nx = next_fast_len(max(pad_factor * nx, fine))
    Ny = next_fast_len(max(pad_factor * ny, fine))
    Ex = np.fft.fft2(ex, (Nx, Ny)) * h * h
    Ey = np.fft.fft2(ey, (Nx, Ny)) * h * h
    kx = 2 * np.pi * np.fft.fftfreq(Nx, h)[:, None]
    ky = 2 * np.pi * np.fft.fftfreq(Ny, h)[None, :]
    kp2 = kx**2 + ky**2
    inside = kp2 <= (kmax.max() * (1 + 1e-12)) ** 2
    kp = np.sqrt(kp2[inside])
    kz = np.sqrt(np.maximum(k**2 - kp**2, 1e-30 * k**2))
    bx = np.broadcast_to(kx, kp2.shape)[inside]
    by = np.broadcast_to(ky, kp2.shape)[inside]
    safe = np.where(kp > 0, kp, 1.0)
    ux, uy = np.where(kp > 0, bx / safe, 1.0), np.where(kp > 0, by / safe, 0.0)
    e_p = Ex[inside] * ux + Ey[inside] * uy
    e_s = -Ex[inside] * uy + Ey[inside] * ux
    eta0 = 376.730313668
    Sz = (np.abs(e_s) ** 2 * kz / k + np.abs(e_p) ** 2 * k / kz) * index / (2 * eta0)
    dk = (2 * np.pi / (Nx * h)) * (2 * np.pi / (Ny * h))
    out = np.array([np.sum(Sz[kp <= km]) for km in kmax]) * dk / (2 * np.pi) ** 2
    return float(out[0]) if np.ndim(k_max) == 0 else out


def collection_efficiency(geometry, pose=None, numerical_aperture=0.6, settings=COARSE,
                          plane_below=None, lateral_padding=None, n_wavelengths=None,
                          taper=0.5):
    """Fraction of the dipole's total power inside the NA cone through the substrate.

    Returns (wavelengths_nm, efficiency).  The collection plane sits in
    the substrate `plane_below` under the substrate surface (default two
    cells).  A cone n sin(theta) <= NA inside the substrate is accepted.
    """
    if not 0 < numerical_aperture < 1:
        raise ConfigurationError("numerical aperture must lie in (0, 1)")
    lam, eff = _collect(geometry, pose, [numerical_aperture], settings, plane_below,
                        lateral_padding, n_wavelengths, taper)
    return lam, eff[:, 0]


def _collect(geometry, pose, nas, settings, plane_below, lateral_padding, n_wavelengths,
             taper=0.5):
    """Efficiencies for several k-limits (in units of k0) from one run."""
    pose = pose or DipolePose()
    if lateral_padding is not None:
        settings = replace(settings, padding=lateral_padding)
    grid = build_grid(geometry, settings)
    src = make_source(grid, geometry, pose)
    h = grid.cell_size
    if plane_below is None:
        plane_below = 2 * h
    zc = -plane_below
    if src.position[2] - zc < 100e-9:
        warnings.warn("collection plane closer than 100 nm to the dipole", RuntimeWarning)
    kp = grid.node_index((0, 0, zc))[2]
    if kp < grid.pml_cells + 1:
        raise ConfigurationError("collection plane inside the absorbing layer")
    nlam = n_wavelengths or max(6, settings.n_wavelengths // 4)
    lam = np.linspace(NV_BAND_NM[0], NV_BAND_NM[1], nlam)
    key = _profile_key("collect", grid, src, settings, kp, nlam, tuple(nas), float(taper))
    if key not in _PROFILE_CACHE:
        _PROFILE_CACHE[key] = (lam, _plane_efficiencies(grid, src, geometry, settings, lam, kp,
                                                        nas, taper))
    lam, eff = _PROFILE_CACHE[key]
    return lam.copy(), eff.copy()


def _plane_efficiencies(grid, src, geometry, settings, lam, kp, nas, taper):
    p = grid.pml_cells
    lo = (p, p, kp)
    hi = (grid.shape[0] - 1 - p, grid.shape[1] - 1 - p, kp)
    freqs = _omegas(lam)
    fm = FieldMonitor(lo, hi, freqs, "plane", stride=1)
    res = run(settings.config(grid), src, [], [fm])
    s2 = np.abs(res.source_spectrum[np.searchsorted(res.sample_freqs, freqs)]) ** 2
    total = res.source_power[np.searchsorted(res.sample_freqs, freqs)]
    n = geometry.substrate_index
    eff = np.zeros((len(lam), len(nas)))
    for i, (snap, w, norm, P) in enumerate(zip(res.snapshots["plane"], freqs, s2, total)):
        eff[i] = plane_kspace_power(snap, n, np.asarray(nas) * w / C0, taper=taper) / norm / P
    return eff
