"""Solver self-tests: vacuum dipole power, nested-box conservation, mirror symmetry."""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field

import numpy as np

from .constants import C0, EPS0, SOURCE_BAND_NM, wavelength_to_omega
from .fdtd_engine import DipoleSource, FluxMonitor, SimulationConfig, run
from .materials import MaterialGrid, PermittivityModel

VACUUM_TOL = 0.02
NESTED_TOL = 0.02
SYMMETRY_TOL = 0.01
COARSE_BUDGET_S = 60.0


@dataclass
class Check:
    name: str
    passed: bool
    value: float
    tolerance: float
    detail: str = ""

    def to_dict(self):
        return {"name": self.name, "passed": bool(self.passed), "value": float(self.value),
                "tolerance": float(self.tolerance), "detail": self.detail}


@dataclass
class ValidationReport:
    checks: list = field(default_factory=list)
    wall_time: float = 0.0

    @property
    def passed(self):
        return all(c.passed for c in self.checks)

    @property
    def failures(self):
        return [c.name for c in self.checks if not c.passed]

    def to_dict(self):
        return {"passed": self.passed, "failures": self.failures, "wall_time_s": self.wall_time,
                "checks": [c.to_dict() for c in self.checks]}

    def text(self):
        lines = [f"{'PASS' if c.passed else 'FAIL'}  {c.name}: {c.detail}" for c in self.checks]
        lines.append(f"{'all checks passed' if self.passed else 'FAILED: ' + ', '.join(self.failures)}"
                     f" ({self.wall_time:.1f} s)")
        return "\n".join(lines)


def uniform_grid(cell_size=10e-9, n=41, eps=1.0, pml_cells=8):
    """Cubic grid of one non-dispersive medium."""
    ids = np.zeros((2 * n - 1,) * 3, dtype=np.uint8)
    origin = (-(n // 2) * cell_size,) * 3
    return MaterialGrid(cell_size, (n, n, n), origin, ids, (PermittivityModel.constant(eps),),
                        ("medium",), pml_cells)


def vacuum_dipole_power(omega, cell_size):
    """Radiated power of the unit-amplitude one-cell current element in vacuum."""
    moment = cell_size**3  # current density x cell volume
    return moment**2 * omega**2 / (12 * math.pi * EPS0 * C0**3)


def run_validation(cell_size=10e-9, n=41, eps_perturbation=0.0, n_freqs=11, pml_cells=8):
    """Run every check; `eps_perturbation` scales the medium permittivity (test fixture).

    The vacuum check compares against the analytic free-space power, so a
    perturbed medium fails it; nested boxes and mirror symmetry do not
    depend on which uniform medium fills the grid.
    """
    t0 = time.perf_counter()
    grid = uniform_grid(cell_size, n, 1.0 + eps_perturbation, pml_cells)
    lam = np.linspace(*SOURCE_BAND_NM, n_freqs) * 1e-9
    w = wavelength_to_omega(lam)
    c = (n // 2,) * 3
    inner = FluxMonitor.around(c, 2, w, "inner")
    outer = FluxMonitor.around(c, 2 * (n // 2 - pml_cells) // 3, w, "outer")
    src = DipoleSource(grid.node_position(c), (0.0, 0.0, 1.0))
    run(SimulationConfig(grid, pml_cells=pml_cells), src, [inner, outer])
    f_in, f_out = inner.flux(), outer.flux()
    checks = []

    err = np.max(np.abs(f_in / vacuum_dipole_power(w, cell_size) - 1.0))
    checks.append(Check("vacuum_normalization", err <= VACUUM_TOL, err, VACUUM_TOL,
                        f"max |P_box/P_analytic - 1| = {err:.4f}"))
    err = np.max(np.abs(f_out / f_in - 1.0))
    checks.append(Check("nested_boxes", err <= NESTED_TOL, err, NESTED_TOL,
                        f"max |P_outer/P_inner - 1| = {err:.2e}"))
    # faces come in (-side, +side) pairs per axis
    s2 = np.abs(outer.source_spectrum) ** 2
    face = [f.raw_flux() * cell_size**2 / s2 for f in outer.faces]
    err = 0.0
    for a in range(3):
        lo, hi = face[2 * a], face[2 * a + 1]
        err = max(err, float(np.max(np.abs(lo - hi) / np.abs(f_out))))
    err_xy = float(np.max(np.abs(face[0] - face[2]) / np.abs(f_out)))
    err = max(err, err_xy)
    checks.append(Check("mirror_symmetry", err <= SYMMETRY_TOL, err, SYMMETRY_TOL,
                        f"max opposite/equivalent face mismatch = {err:.2e} of total"))
    wall = time.perf_counter() - t0
    checks.append(Check("coarse_runtime", wall <= COARSE_BUDGET_S, wall, COARSE_BUDGET_S,
                        f"{wall:.1f} s (budget {COARSE_BUDGET_S:.0f} s)"))
    return ValidationReport(checks, wall)
