"""Strict run configuration (JSON canonical, TOML accepted) and named presets."""

from __future__ import annotations

import copy
import hashlib
import json
import math
import sys
import typing
from dataclasses import asdict, dataclass, field, fields, is_dataclass
from pathlib import Path

from .constants import DIAMOND_INDEX
from .errors import ConfigurationError

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

SCHEMA_VERSION = 1


@dataclass
class GeometryBlock:
    variant: str = "silver_capped"
    post_radius_top_nm: float = 50.0
    post_radius_bottom_nm: float | None = None  # None: top radius + 10 nm
    post_height_nm: float = 180.0
    silver_thickness_nm: float = 500.0
    substrate_index: float = DIAMOND_INDEX


@dataclass
class MaterialsBlock:
    silver_eps_inf: float = 3.7
    silver_plasma_freq: float = 1.39e16
    silver_damping: float = 2.7e13
    lorentz_delta_eps: float = 0.0
    lorentz_omega0: float = 0.0
    lorentz_gamma: float = 0.0


@dataclass
class SolverBlock:
    preset: str = "coarse"
    cell_size_nm: float | None = None
    padding_nm: float | None = None
    pml_cells: int | None = None
    courant_factor: float | None = None
    max_steps: int | None = None
    shutoff_fraction: float | None = None
    n_wavelengths: int | None = None
    volume_average: bool = True


@dataclass
class DipoleBlock:
    # a number (nm below the top facet) or "field_maximum"
    depth_nm: typing.Any = 20.0
    polar_deg: float = 0.0
    azimuth_deg: float = 0.0
    offset_nm: list = field(default_factory=lambda: [0.0, 0.0])


@dataclass
class EmitterBlock:
    mode: str = "cw"  # cw | pulsed | saturation | fano | odmr
    radiative_rate: float = 4.5e7
    nonradiative_rate: float = 4.88e6
    shelving_rate: float = 1.0e7
    deshelving_rate: float = 3.3e6
    pump_rate_per_mW: float = 1.0e7
    purcell_factor: float = 1.0
    n_emitters: int = 1
    pump_mW: float = 1.0
    duration_s: float = 1.0
    rep_rate_hz: float = 10.8e6
    excitation_prob: float = 0.5
    fast_lifetime_ns: float = 0.0
    fast_excitation_prob: float = 0.0
    powers_mW: list = field(default_factory=list)
    background_per_mW: float = 0.0
    # synthetic spectra
    centers: list = field(default_factory=list)  # nm (fano) or GHz (odmr)
    quality_factors: list = field(default_factory=list)
    fano_q: float = 3.0
    linewidth_ghz: float = 0.01
    contrast: float = 0.183
    noise: float = 0.01
    n_points: int = 201
    write_csv: bool = False


@dataclass
class DetectionBlock:
    efficiency: float = 1.0
    background_rate: float = 0.0
    timing_jitter_sigma: float = 0.0


@dataclass
class SweepBlock:
    param: str = ""
    values: list = field(default_factory=list)


@dataclass
class AnalysisBlock:
    band_nm: list = field(default_factory=lambda: [600.0, 850.0])
    average_band_nm: list = field(default_factory=lambda: [650.0, 800.0])
    reference: str = "substrate"
    dipole: DipoleBlock = field(default_factory=DipoleBlock)
    mode_profile: bool = False
    collection_na: float = 0.0
    doublet: bool = False
    sweep: SweepBlock = field(default_factory=SweepBlock)
    g2_bin_ns: float = 1.0
    g2_window_ns: float = 200.0
    g2_model: str = "auto"
    decay_bin_ns: float = 0.1
    n_components: int = 1
    fit_t_min_ns: float = 0.0


@dataclass
class RunConfig:
    schema_version: int = SCHEMA_VERSION
    geometry: GeometryBlock = field(default_factory=GeometryBlock)
    materials: MaterialsBlock = field(default_factory=MaterialsBlock)
    solver: SolverBlock = field(default_factory=SolverBlock)
    emitter: EmitterBlock = field(default_factory=EmitterBlock)
    detection: DetectionBlock = field(default_factory=DetectionBlock)
    analysis: AnalysisBlock = field(default_factory=AnalysisBlock)
    seed: int = 0
    workers: int = 1
    output_dir: str | None = None

    # ---------------------------------------------------------- conversion
    @classmethod
    def from_dict(cls, data):
        if not isinstance(data, dict):
            raise ConfigurationError("configuration must be a mapping")
        version = data.get("schema_version", SCHEMA_VERSION)
        if version != SCHEMA_VERSION:
            raise ConfigurationError(f"unsupported schema_version {version!r}")
        cfg = _build(cls, data, "")
        cfg.validate()
        cfg.materialize()
        return cfg

    def to_dict(self):
        return asdict(self)

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def digest(self):
        """sha256 of the canonical echoed configuration."""
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()

    # ---------------------------------------------------------- checks
    def validate(self):
        from .materials import VARIANTS
        g = self.geometry
        if g.variant not in VARIANTS:
            raise ConfigurationError(f"geometry.variant must be one of {VARIANTS}")
        if self.solver.preset not in SOLVER_PRESETS:
            raise ConfigurationError(f"solver.preset must be one of {tuple(SOLVER_PRESETS)}")
        if self.emitter.mode not in ("cw", "pulsed", "saturation", "fano", "odmr"):
            raise ConfigurationError(f"unknown emitter.mode {self.emitter.mode!r}")
        if self.analysis.reference not in ("substrate", "vacuum"):
            raise ConfigurationError("analysis.reference must be 'substrate' or 'vacuum'")
        d = self.analysis.dipole.depth_nm
        if not (d == "field_maximum" or (isinstance(d, (int, float)) and not isinstance(d, bool))):
            raise ConfigurationError("analysis.dipole.depth_nm must be a number or 'field_maximum'")
        if len(self.analysis.dipole.offset_nm) != 2:
            raise ConfigurationError("analysis.dipole.offset_nm needs two entries")
        for name in ("band_nm", "average_band_nm"):
            b = getattr(self.analysis, name)
            if len(b) != 2 or not b[0] < b[1]:
                raise ConfigurationError(f"analysis.{name} must be [lo, hi] with lo < hi")
        if self.seed < 0:
            raise ConfigurationError("seed must be >= 0")
        if self.workers < 1:
            raise ConfigurationError("workers must be >= 1")

    def materialize(self):
        """Fill every preset-dependent default so the echo is self-describing."""
        if self.geometry.post_radius_bottom_nm is None:
            self.geometry.post_radius_bottom_nm = self.geometry.post_radius_top_nm + 10.0
        base = SOLVER_PRESETS[self.solver.preset]
        for key, val in base.items():
            if getattr(self.solver, key) is None:
                setattr(self.solver, key, val)

    # ---------------------------------------------------------- domain objects
    def geometry_obj(self):
        from .materials import DeviceGeometry
        g = self.geometry
        return DeviceGeometry(post_radius_top=g.post_radius_top_nm * 1e-9,
                              post_radius_bottom=g.post_radius_bottom_nm * 1e-9,
                              post_height=g.post_height_nm * 1e-9,
                              silver_thickness=g.silver_thickness_nm * 1e-9,
                              substrate_index=g.substrate_index, variant=g.variant)

    def silver_model(self):
        from .materials import LorentzPole, PermittivityModel
        m = self.materials
        poles = ()
        if m.lorentz_delta_eps:
            poles = (LorentzPole(m.lorentz_delta_eps, m.lorentz_omega0, m.lorentz_gamma),)
        kind = "drude_lorentz" if poles else "drude"
        return PermittivityModel(kind=kind, eps_inf=m.silver_eps_inf,
                                 plasma_freq=m.silver_plasma_freq, damping=m.silver_damping,
                                 lorentz_poles=poles)

    def settings(self):
        from .purcell_analysis import SolverSettings
        s = self.solver
        return SolverSettings(cell_size=s.cell_size_nm * 1e-9, padding=s.padding_nm * 1e-9,
                              pml_cells=s.pml_cells, courant_factor=s.courant_factor,
                              max_steps=s.max_steps, shutoff_fraction=s.shutoff_fraction,
                              n_wavelengths=s.n_wavelengths, workers=self.workers,
                              volume_average=s.volume_average, silver=self.silver_model())

    def pose(self, depth_nm=None):
        from .purcell_analysis import DipolePose
        d = self.analysis.dipole
        depth = d.depth_nm if depth_nm is None else depth_nm
        return DipolePose(depth=depth * 1e-9, polar_deg=d.polar_deg, azimuth_deg=d.azimuth_deg,
                          offset=tuple(o * 1e-9 for o in d.offset_nm))

    def emitter_model(self):
        from .emitter_mc import EmitterModel
        e = self.emitter
        return EmitterModel(e.radiative_rate, e.nonradiative_rate, e.shelving_rate,
                            e.deshelving_rate, e.pump_rate_per_mW, e.purcell_factor)

    def detection_model(self):
        from .emitter_mc import DetectionModel
        d = self.detection
        return DetectionModel(d.efficiency, d.background_rate, d.timing_jitter_sigma)


SOLVER_PRESETS = {
    "coarse": {"cell_size_nm": 10.0, "padding_nm": 100.0, "pml_cells": 8,
               "courant_factor": 0.5 / math.sqrt(3), "max_steps": 60000,
               "shutoff_fraction": 1e-5, "n_wavelengths": 51},
    "full": {"cell_size_nm": 5.0, "padding_nm": 150.0, "pml_cells": 10,
             "courant_factor": 0.5 / math.sqrt(3), "max_steps": 120000,
             "shutoff_fraction": 1e-5, "n_wavelengths": 51},
}


def _check_type(hint, value, where):
    origin = typing.get_origin(hint)
    args = typing.get_args(hint)
    if hint is typing.Any:
        return value
    if origin is typing.Union or (origin is not None and str(origin) == "types.UnionType"):
        if value is None and type(None) in args:
            return None
        inner = [a for a in args if a is not type(None)]
        return _check_type(inner[0], value, where)
    if hint is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigurationError(f"{where}: expected a number, got {value!r}")
        return float(value)
    if hint is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigurationError(f"{where}: expected an integer, got {value!r}")
        return value
    if hint is bool:
        if not isinstance(value, bool):
            raise ConfigurationError(f"{where}: expected true/false, got {value!r}")
        return value
    if hint is str:
        if not isinstance(value, str):
            raise ConfigurationError(f"{where}: expected a string, got {value!r}")
        return value
    if hint is list:
        if not isinstance(value, list):
            raise ConfigurationError(f"{where}: expected a list, got {value!r}")
        return list(value)
    if is_dataclass(hint):
        return _build(hint, value, where)
    return value


def _build(cls, data, prefix):
    if not isinstance(data, dict):
        raise ConfigurationError(f"{prefix or 'config'}: expected a table")
    hints = typing.get_type_hints(cls)
    known = {f.name: f for f in fields(cls)}
    unknown = sorted(set(data) - set(known))
    if unknown:
        raise ConfigurationError(f"unknown key(s) {', '.join(prefix + k for k in unknown)}")
    kwargs = {}
    for name, f in known.items():
        if name in data:
            kwargs[name] = _check_type(hints[name], data[name], prefix + name)
        elif is_dataclass(hints[name]):
            kwargs[name] = hints[name]()
    return cls(**kwargs)


def _merge(base, over):
    out = copy.deepcopy(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def parse_text(text, fmt="json"):
    try:
        if fmt == "toml":
            return tomllib.loads(text)
        return json.loads(text)
    except (json.JSONDecodeError, tomllib.TOMLDecodeError) as exc:
        raise ConfigurationError(f"cannot parse {fmt.upper()} config: {exc}") from exc


def load_config(path=None, preset=None, overrides=None):
    """Preset (optional) overlaid by a JSON/TOML file, then by `overrides`."""
    data = {}
    if preset is not None:
        if preset not in PRESETS:
            raise ConfigurationError(f"unknown preset {preset!r}; choose from {sorted(PRESETS)}")
        data = copy.deepcopy(PRESETS[preset])
    if path is not None:
        p = Path(path)
        try:
            text = p.read_text()
        except OSError as exc:
            raise ConfigurationError(f"cannot read config {p}: {exc}") from exc
        data = _merge(data, parse_text(text, "toml" if p.suffix.lower() == ".toml" else "json"))
    if overrides:
        data = _merge(data, overrides)
    return RunConfig.from_dict(data)


# ------------------------------------------------------------------ presets
# Each preset is a partial configuration; everything else takes defaults.

def _fig1d(radius):
    return {"geometry": {"variant": "silver_capped", "post_radius_top_nm": radius},
            "analysis": {"dipole": {"depth_nm": "field_maximum", "polar_deg": 0.0},
                         "mode_profile": True}}


_KR, _KISC, _KM, _KNR = 4.5e7, 1.0e7, 3.3e6, 4.88e6  # default emitter rates, 1/s


def _purcell_for(lifetime_s):
    """Radiative multiplier giving the default emitter the requested lifetime."""
    return (1.0 / lifetime_s - _KISC - _KNR) / _KR


def _lifetime(lifetime_s, fast=0.0):
    # pulsed TCSPC configuration; the Purcell factor sets the lifetime
    block = {"mode": "pulsed", "purcell_factor": _purcell_for(lifetime_s), "rep_rate_hz": 10.8e6,
             "excitation_prob": 0.05, "duration_s": 5.0}
    if fast:
        block.update({"fast_lifetime_ns": 1.5, "fast_excitation_prob": fast})
    return block


def _emitter_for_saturation(lifetime_s, i_sat, p_sat):
    """Emitter block whose detected saturation curve passes through (I_sat, P_sat)."""
    ke = 1.0 / lifetime_s
    F = _purcell_for(lifetime_s)
    frac = _KM / (_KM + _KISC)
    return ({"mode": "saturation", "purcell_factor": F, "pump_rate_per_mW": ke * frac / p_sat,
             "powers_mW": [0.1, 0.25, 0.5, 0.75, 1.0, 1.5, 2.0, 3.0, 4.0, 6.0, 8.0],
             "background_per_mW": 0.1 * i_sat / p_sat, "duration_s": 1.0},
            {"efficiency": i_sat / (F * _KR * frac)})


PRESETS = {
    "fig1d_r50": _fig1d(50.0),
    "fig1d_r55": _fig1d(55.0),
    "fig1d_r65": _fig1d(65.0),
    # bulk 16.7 ns; bare-post 37.17 ns and silver-capped 5.65 ns lifetimes
    "fig3_bulk": {"geometry": {"variant": "homogeneous"}, "emitter": _lifetime(16.7e-9)},
    "fig3_bare65": {"geometry": {"variant": "bare_post", "post_radius_top_nm": 65.0},
                    "emitter": _lifetime(37.17e-9, fast=3e-4), "analysis": {"n_components": 2}},
    "fig3_ag65": {"geometry": {"variant": "silver_capped", "post_radius_top_nm": 65.0},
                  "emitter": _lifetime(5.65e-9, fast=4e-3), "analysis": {"n_components": 2}},
    "fig3e_bare": dict(zip(("emitter", "detection"),
                           _emitter_for_saturation(37.17e-9, 1.24e4, 1.45))),
    "fig3e_ag": dict(zip(("emitter", "detection"),
                         _emitter_for_saturation(5.65e-9, 1.01e5, 1.18))),
    "fig4a_fano": {"emitter": {"mode": "fano", "centers": [697.0, 705.0, 715.0, 724.0, 732.0],
                               "quality_factors": [5.0, 7.0, 10.0, 12.0, 13.0], "noise": 0.01}},
    "fig4b_odmr": {"emitter": {"mode": "odmr", "centers": [2.87], "linewidth_ghz": 0.01,
                               "contrast": 0.183, "noise": 0.005}},
}
for _name in list(PRESETS):
    PRESETS[_name].setdefault("emitter", {})
