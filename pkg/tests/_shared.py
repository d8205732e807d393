"""Geometries and settings shared by several test modules (FDTD runs are memoized per process)."""

from nvaperture.materials import DeviceGeometry
from nvaperture.purcell_analysis import COARSE

SETTINGS = COARSE
CONE50 = DeviceGeometry(post_radius_top=50e-9)
BARE50 = CONE50.with_(variant="bare_post")
BARE65 = DeviceGeometry(post_radius_top=65e-9, variant="bare_post")
FAB65 = DeviceGeometry(post_radius_top=65e-9)
HOMOG = DeviceGeometry(variant="homogeneous")
CYL60 = DeviceGeometry.cylinder(60e-9)  # resonance inside the source band
FAB_DEPTH = 20e-9


def fano_factor(model, pump_mW):
    """Long-time count variance / mean from g2: F = 1 + 2 R int_0^inf (g2 - 1) dt."""
    import math

    from nvaperture.emitter_mc import analytic_g2

    g = analytic_g2(model, pump_mW)
    R = model.emission_rate(pump_mW)
    integral = g.a * g.tau2 - (1 + g.a) * g.tau1 if math.isfinite(g.tau2) else -g.tau1
    return 1 + 2 * R * integral
