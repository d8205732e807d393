"""Numerical workbench for a diamond-silver plasmonic aperture single-photon source."""

__version__ = "0.1.0"
