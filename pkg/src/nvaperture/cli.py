"""Command-line entry point: simulate | sweep | emit | analyze | validate.

Exit codes: 0 ok, 2 configuration error, 3 solver instability,
4 fit non-convergence, 5 validation failure.  Errors are also written to
stderr as one JSON object.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .config import PRESETS, load_config
from .errors import (ConfigurationError, CoverageError, DomainError, InsufficientDataError,
                     StabilityError)

EXIT_OK, EXIT_CONFIG, EXIT_UNSTABLE, EXIT_FIT, EXIT_VALIDATION = 0, 2, 3, 4, 5
OUTPUT_ENV = "NVAPERTURE_OUTPUT_ROOT"
SWEEP_PARAMS = ("radius", "depth", "orientation")
ANALYZE_KINDS = ("g2", "lifetime", "saturation", "fano", "odmr")

log = logging.getLogger("nvaperture")


# ------------------------------------------------------------------ outputs

def sha256_file(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


class Outputs:
    """Collects written artifacts and writes the run manifest."""

    def __init__(self, root, cfg, command):
        self.root = Path(root)
        self.cfg = cfg
        self.command = command
        self.files = []
        self.steps = {}
        self.t0 = time.perf_counter()

    def path(self, name):
        self.root.mkdir(parents=True, exist_ok=True)
        p = self.root / name
        self.files.append(p)
        return p

    def json(self, name, obj):
        p = self.path(name)
        p.write_text(json.dumps(obj, indent=2, sort_keys=True, default=_jsonable) + "\n")
        return p

    def manifest(self):
        artifacts = {p.name: sha256_file(p) for p in sorted(set(self.files))}
        doc = {"tool": "nvaperture", "version": __version__, "command": self.command,
               "config_sha256": self.cfg.digest() if self.cfg is not None else None,
               "artifacts": artifacts, "steps": self.steps}
        # the digest covers every deterministic field; wall time is excluded
        doc["manifest_sha256"] = hashlib.sha256(json.dumps(doc, sort_keys=True).encode()).hexdigest()
        doc["wall_time_s"] = round(time.perf_counter() - self.t0, 3)
        self.root.mkdir(parents=True, exist_ok=True)
        (self.root / "manifest.json").write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
        return doc


def _jsonable(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, (np.floating, np.integer)):
        return o.item()
    return str(o)


def output_root(args, cfg, command):
    if args.out:
        return Path(args.out)
    if cfg is not None and cfg.output_dir:
        return Path(cfg.output_dir)
    base = Path(os.environ.get(OUTPUT_ENV, "runs"))
    tag = cfg.digest()[:10] if cfg is not None else "default"
    return base / f"{command}-{tag}"


def _config_from_args(args, overrides=None):
    over = dict(overrides or {})
    if getattr(args, "seed", None) is not None:
        over["seed"] = args.seed
    if getattr(args, "workers", None) is not None:
        over["workers"] = args.workers
    return load_config(args.config, args.preset, over)


# ------------------------------------------------------------------ simulate / sweep

def _resolve_depth(cfg, geometry, settings, out):
    from .purcell_analysis import find_field_maximum
    d = cfg.analysis.dipole.depth_nm
    if d != "field_maximum":
        return float(d)
    depth, _, (z, inten) = find_field_maximum(geometry, settings, cfg.analysis.dipole.polar_deg)
    with open(out.path("field_scan.csv"), "w") as fh:
        fh.write("z_nm,intensity_rel\n")
        peak = float(np.max(inten)) or 1.0
        for zz, ii in zip(z, inten):
            fh.write(f"{zz * 1e9:.6f},{ii / peak:.9g}\n")
    return depth * 1e9


def _spectrum_for(cfg, geometry, settings, pose):
    from .purcell_analysis import enhancement_spectrum
    return enhancement_spectrum(geometry, pose, tuple(cfg.analysis.band_nm), settings,
                                cfg.analysis.reference)


def cmd_simulate(args):
    cfg = _config_from_args(args)
    out = Outputs(output_root(args, cfg, "simulate"), cfg, "simulate")
    out.json("effective_config.json", cfg.to_dict())
    geometry, settings = cfg.geometry_obj(), cfg.settings()
    depth_nm = _resolve_depth(cfg, geometry, settings, out)
    pose = cfg.pose(depth_nm)
    spec = _spectrum_for(cfg, geometry, settings, pose)
    spec.to_csv(out.path("spectrum.csv"))
    side = spec.sidecar()
    side["band_average"] = spec.band_average(tuple(cfg.analysis.average_band_nm))
    out.json("spectrum.json", side)
    out.steps["structure"] = spec.steps
    if cfg.analysis.mode_profile and geometry.variant != "homogeneous":
        from .purcell_analysis import mode_profile, mode_volume
        prof = mode_profile(geometry, spec.peak_wavelength, pose, settings)
        prof.to_csv(out.path("mode_profile_xz.csv"), axis=1)
        z, u = prof.axis_profile()
        with open(out.path("mode_profile_axis.csv"), "w") as fh:
            fh.write("z_nm,energy_density_au\n")
            for zz, uu in zip(z, u):
                fh.write(f"{zz * 1e9:.3f},{uu:.6e}\n")
        V = mode_volume(prof, spec.peak_wavelength, geometry.substrate_index)
        out.json("mode_volume.json", {"wavelength_nm": spec.peak_wavelength,
                                      "mode_volume_lambda_over_n_cubed": V})
    if cfg.analysis.collection_na > 0:
        from .purcell_analysis import collection_efficiency
        lam, eff = collection_efficiency(geometry, pose, cfg.analysis.collection_na, settings)
        with open(out.path("collection.csv"), "w") as fh:
            fh.write("wavelength_nm,collection_fraction\n")
            for a, b in zip(lam, eff):
                fh.write(f"{a:.6f},{b:.9g}\n")
    out.manifest()
    print(json.dumps({"peak_enhancement": spec.peak_enhancement,
                      "peak_wavelength_nm": spec.peak_wavelength,
                      "band_average": side["band_average"], "output": str(out.root)}))
    return EXIT_OK


def _parse_values(text):
    try:
        vals = [float(v) for v in text.split(",") if v.strip()]
    except ValueError as exc:
        raise ConfigurationError(f"cannot parse sweep values {text!r}") from exc
    if not vals:
        raise ConfigurationError("sweep needs at least one value")
    return vals


def cmd_sweep(args):
    cfg = _config_from_args(args)
    param = args.param or cfg.analysis.sweep.param
    if param not in SWEEP_PARAMS:
        raise ConfigurationError(f"sweep param must be one of {SWEEP_PARAMS}, got {param!r}")
    values = _parse_values(args.values) if args.values else [float(v) for v in cfg.analysis.sweep.values]
    if not values:
        raise ConfigurationError("sweep needs values (--values or analysis.sweep.values)")
    cfg.analysis.sweep.param, cfg.analysis.sweep.values = param, values
    out = Outputs(output_root(args, cfg, "sweep"), cfg, "sweep")
    out.json("effective_config.json", cfg.to_dict())
    from . import purcell_analysis as pa
    geometry, settings = cfg.geometry_obj(), cfg.settings()
    depth_nm = _resolve_depth(cfg, geometry, settings, out)
    pose = cfg.pose(depth_nm)
    if param == "radius":
        res = pa.radius_sweep(geometry, [v * 1e-9 for v in values], pose, settings)
        labels = values
    elif param == "depth":
        res = pa.axial_position_sweep(geometry, [v * 1e-9 for v in values], pose, settings)
        labels = values
    else:
        res = pa.orientation_sweep(geometry, pose.depth, values, pose.azimuth_deg, settings,
                                   doublet=cfg.analysis.doublet)
        labels = values
    band = tuple(cfg.analysis.average_band_nm)
    with open(out.path("sweep_summary.csv"), "w") as fh:
        unit = {"radius": "radius_nm", "depth": "depth_nm", "orientation": "polar_deg"}[param]
        fh.write(f"{unit},peak_F,peak_lambda_nm,avg_F\n")
        for v, s in zip(labels, res.spectra):
            fh.write(f"{v:.9g},{s.peak_enhancement:.9g},{s.peak_wavelength:.6f},"
                     f"{s.band_average(band):.9g}\n")
    for v, s in zip(labels, res.spectra):
        s.to_csv(out.path(f"spectrum_{param}_{v:g}.csv"))
        out.steps[f"{param}_{v:g}"] = s.steps
    avg = [s.band_average(band) for s in res.spectra]
    summary = {"param": param, "values": labels, "min_avg_F": min(avg), "max_avg_F": max(avg),
               "peak_lambda_nm": [s.peak_wavelength for s in res.spectra]}
    out.json("sweep_summary.json", summary)
    out.manifest()
    print(json.dumps({**summary, "output": str(out.root)}))
    return EXIT_OK


# ------------------------------------------------------------------ emit

def cmd_emit(args):
    cfg = _config_from_args(args)
    e = cfg.emitter
    if not e.duration_s > 0:
        raise DomainError("emitter.duration_s must be > 0")
    out = Outputs(output_root(args, cfg, "emit"), cfg, "emit")
    from . import emitter_mc as mc
    from .fitters import synthetic
    summary = {"mode": e.mode}
    if e.mode in ("cw", "pulsed"):
        model, det = cfg.emitter_model(), cfg.detection_model()
        streams = []
        for k in range(e.n_emitters):
            # independent emitters get seeds derived from (master seed, emitter index)
            seed = cfg.seed if k == 0 else _derived_seed(cfg.seed, k)
            if e.mode == "cw":
                streams.append(mc.simulate_cw(model, det if k == 0 else _no_bg(det), e.pump_mW,
                                              e.duration_s, seed))
            else:
                streams.append(mc.simulate_pulsed(model, det if k == 0 else _no_bg(det),
                                                  e.rep_rate_hz, e.excitation_prob,
                                                  e.duration_s, seed))
        if e.mode == "pulsed" and e.fast_lifetime_ns > 0 and e.fast_excitation_prob > 0:
            fast = mc.EmitterModel(1.0 / (e.fast_lifetime_ns * 1e-9))
            streams.append(mc.simulate_pulsed(fast, _no_bg(det), e.rep_rate_hz,
                                              e.fast_excitation_prob, e.duration_s,
                                              _derived_seed(cfg.seed, 1000)))
        stream = streams[0] if len(streams) == 1 else mc.merge_streams(streams, cfg.seed)
        if stream.triggers is None and e.mode == "pulsed":
            stream.triggers = streams[0].triggers
        stream.save(out.path("stream.bin"))
        if e.write_csv:
            stream.to_csv(out.path("stream.csv"))
        summary.update({"events": len(stream), "mean_rate_cps": stream.mean_rate})
        if e.mode == "cw" and e.n_emitters == 1:
            summary["analytic_rate_cps"] = (det.efficiency * model.emission_rate(e.pump_mW)
                                            + det.background_rate)
    elif e.mode == "saturation":
        powers = e.powers_mW or [0.1, 0.25, 0.5, 1.0, 2.0, 4.0, 8.0]
        data = mc.saturation_dataset(cfg.emitter_model(), cfg.detection_model(), powers,
                                     e.duration_s, cfg.seed, e.background_per_mW)
        data.to_csv(out.path("saturation.csv"))
        out.json("saturation_truth.json", data.truth)
        summary.update({"I_sat_cps": data.truth["I_sat_detected"],
                        "P_sat_mW": data.truth["P_sat_mW"]})
    elif e.mode == "fano":
        qs = e.quality_factors or [10.0] * len(e.centers)
        if not e.centers or len(qs) != len(e.centers):
            raise ConfigurationError("fano mode needs matching emitter.centers and quality_factors")
        for i, (lam0, Q) in enumerate(zip(e.centers, qs)):
            lam, y, s = synthetic.fano_spectrum(lam0, Q, e.fano_q, noise=e.noise,
                                                n_points=e.n_points, seed=cfg.seed + i)
            _write_xy(out.path(f"fano_{i}.csv"), "wavelength_nm", lam, y, s)
        summary["spectra"] = len(e.centers)
    else:
        centers = e.centers or [2.87]
        for i, f0 in enumerate(centers):
            f, y, s = synthetic.odmr_spectrum(f0, e.linewidth_ghz, e.contrast, e.noise,
                                              e.n_points, seed=cfg.seed + i)
            _write_xy(out.path(f"odmr_{i}.csv"), "frequency_GHz", f, y, s)
        summary["spectra"] = len(centers)
    out.json("effective_config.json", cfg.to_dict())
    out.manifest()
    print(json.dumps({**summary, "output": str(out.root)}, default=_jsonable))
    return EXIT_OK


def _derived_seed(seed, k):
    return int(np.random.SeedSequence([seed, k]).generate_state(1, np.uint32)[0])


def _no_bg(det):
    from .emitter_mc import DetectionModel
    return DetectionModel(det.efficiency, 0.0, det.timing_jitter_sigma)


def _write_xy(path, xname, x, y, s):
    with open(path, "w") as fh:
        fh.write(f"{xname},value,sigma\n")
        for a, b, c in zip(x, y, s):
            fh.write(f"{a:.12g},{b:.12g},{c:.12g}\n")


def _read_xy(path):
    try:
        arr = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    except (OSError, ValueError) as exc:
        raise ConfigurationError(f"cannot read {path}: {exc}") from exc
    if arr.shape[1] < 2:
        raise ConfigurationError(f"{path}: need at least two columns")
    sigma = arr[:, 2] if arr.shape[1] > 2 else None
    return arr[:, 0], arr[:, 1], sigma


# ------------------------------------------------------------------ analyze

def cmd_analyze(args):
    if args.kind not in ANALYZE_KINDS:
        raise ConfigurationError(f"analyze kind must be one of {ANALYZE_KINDS}")
    if not args.input or not Path(args.input).exists():
        raise ConfigurationError(f"input {args.input!r} does not exist")
    cfg = _config_from_args(args)
    a = cfg.analysis
    out = Outputs(output_root(args, cfg, f"analyze-{args.kind}"), cfg, f"analyze {args.kind}")
    from . import correlation, fitters
    from .emitter_mc import PhotonStream, SaturationData
    kind = args.kind
    if kind in ("g2", "lifetime"):
        try:
            stream = PhotonStream.load(args.input)
        except (OSError, ValueError, KeyError) as exc:
            raise ConfigurationError(f"cannot read photon stream {args.input}: {exc}") from exc
    if kind == "g2":
        hist = correlation.g2_histogram(stream, a.g2_bin_ns * 1e-9, a.g2_window_ns * 1e-9,
                                        blocks=cfg.workers if cfg.workers > 1 else None)
        hist.to_csv(out.path("g2_histogram.csv"))
        res = fitters.fit_g2(hist, a.g2_model)
        headline = {"g2_at_zero": res["g2_at_zero"]}
    elif kind == "lifetime":
        hist = correlation.decay_histogram(stream, bin_width=a.decay_bin_ns * 1e-9)
        hist.to_csv(out.path("decay_histogram.csv"))
        res = fitters.fit_multiexp(hist, a.n_components, t_min=a.fit_t_min_ns * 1e-9)
        headline = {"tau_ns": res["lifetime"] * 1e9}
    elif kind == "saturation":
        data = SaturationData.from_csv(args.input)
        res = fitters.fit_saturation(data.powers_mW, data.total_cps, data.powers_mW,
                                     data.background_cps, data.total_sigma, data.background_sigma)
        P = np.linspace(0, float(data.powers_mW.max()), 101)
        with open(out.path("saturation_curve.csv"), "w") as fh:
            fh.write("power_mW,nv_signal_cps,background_cps\n")
            for p in P:
                fh.write(f"{p:.9g},{fitters.saturation_signal(p, res['I_sat'], res['P_sat']):.9g},"
                         f"{res['bg_slope'] * p + res['bg_offset']:.9g}\n")
        headline = {"I_sat_cps": res["I_sat"], "P_sat_mW": res["P_sat"]}
    elif kind == "fano":
        x, y, s = _read_xy(args.input)
        res = fitters.fit_fano(x, y, s)
        with open(out.path("fano_curve.csv"), "w") as fh:
            fh.write("wavelength_nm,model\n")
            for xx, m in zip(x, fitters.fano_model(x, res.values)):
                fh.write(f"{xx:.9g},{m:.9g}\n")
        headline = {"lambda0_nm": res["lambda0"], "Q": res["Q"]}
    else:
        x, y, s = _read_xy(args.input)
        res = fitters.fit_odmr(x, y, s)
        with open(out.path("odmr_curve.csv"), "w") as fh:
            fh.write("frequency_GHz,model\n")
            for xx, m in zip(x, fitters.odmr_model(x, res.values)):
                fh.write(f"{xx:.9g},{m:.9g}\n")
        headline = {"f0_GHz": res["f0"], "contrast": res["contrast"]}
    res.to_json(out.path("fit.json"))
    out.manifest()
    print(json.dumps({**headline, "converged": res.converged, "flags": res.flags,
                      "output": str(out.root)}))
    if not res.converged:
        return EXIT_FIT
    return EXIT_OK


# ------------------------------------------------------------------ validate

def cmd_validate(args):
    from .validation import run_validation
    report = run_validation(eps_perturbation=args.perturb_permittivity)
    print(report.text())
    if args.out:
        out = Outputs(args.out, None, "validate")
        out.json("validation.json", report.to_dict())
        out.manifest()
    else:
        print(json.dumps(report.to_dict()))
    if not report.passed:
        _error({"error": "ValidationFailure", "failures": report.failures,
                "exit_code": EXIT_VALIDATION})
        return EXIT_VALIDATION
    return EXIT_OK


# ------------------------------------------------------------------ plumbing

def _error(doc):
    sys.stderr.write(json.dumps(doc, default=_jsonable) + "\n")


def build_parser():
    p = argparse.ArgumentParser(prog="nvaperture", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", help="JSON or TOML run configuration")
        sp.add_argument("--preset", choices=sorted(PRESETS), help="named starting configuration")
        sp.add_argument("--out", help=f"output directory (default ${OUTPUT_ENV}/<command>-<hash>)")
        sp.add_argument("--seed", type=int, help="master seed (overrides the config)")
        sp.add_argument("--workers", type=int, help="parallel workers (overrides the config)")

    sp = sub.add_parser("simulate", help="enhancement spectrum (plus optional mode profile)")
    common(sp)
    sp.set_defaults(func=cmd_simulate)
    sp = sub.add_parser("sweep", help="radius, depth or orientation sweep")
    common(sp)
    sp.add_argument("--param", help="radius | depth | orientation")
    sp.add_argument("--values", help="comma-separated values (nm or degrees)")
    sp.set_defaults(func=cmd_sweep)
    sp = sub.add_parser("emit", help="photon stream or synthetic dataset")
    common(sp)
    sp.set_defaults(func=cmd_emit)
    sp = sub.add_parser("analyze", help="histogram and fit a dataset")
    common(sp)
    sp.add_argument("kind", choices=ANALYZE_KINDS)
    sp.add_argument("input", help="stream file (g2, lifetime) or CSV dataset")
    sp.set_defaults(func=cmd_analyze)
    sp = sub.add_parser("validate", help="solver self-tests")
    sp.add_argument("--out", help="write validation.json and a manifest here")
    sp.add_argument("--perturb-permittivity", type=float, default=0.0,
                    help=argparse.SUPPRESS)
    sp.set_defaults(func=cmd_validate)
    return p


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code not in (0, None) else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if getattr(args, "workers", None) is not None and args.workers < 1:
        _error({"error": "ConfigurationError", "message": "--workers must be >= 1",
                "exit_code": EXIT_CONFIG})
        return EXIT_CONFIG
    try:
        return args.func(args)
    except (ConfigurationError, DomainError, CoverageError, InsufficientDataError) as exc:
        _error({"error": type(exc).__name__, "message": str(exc), "exit_code": EXIT_CONFIG})
        return EXIT_CONFIG
    except StabilityError as exc:
        _error({"error": "StabilityError", "message": str(exc), "step": exc.step,
                "exit_code": EXIT_UNSTABLE})
        return EXIT_UNSTABLE


if __name__ == "__main__":
    sys.exit(main())
