"""3D finite-difference time-domain solver with dispersive media and CPML."""

from .engine import (DipoleSource, FieldMonitor, FieldSnapshot, FluxMonitor,
                     SimulationConfig, SimulationResult, closed_box_flux, run)

__all__ = ["DipoleSource", "FieldMonitor", "FieldSnapshot", "FluxMonitor",
           "SimulationConfig", "SimulationResult", "closed_box_flux", "run"]
