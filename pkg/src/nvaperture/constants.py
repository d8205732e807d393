"""Physical constants (SI) and band defaults shared across modules."""

import math

C0 = 299_792_458.0
EPS0 = 8.8541878128e-12
MU0 = 1.25663706212e-6
ETA0 = math.sqrt(MU0 / EPS0)

DIAMOND_INDEX = 2.417

# NV detection band (bandpass filters of the collection path), nm
NV_BAND_NM = (650.0, 800.0)
# band covered by the broadband dipole pulse, nm
SOURCE_BAND_NM = (600.0, 850.0)


def wavelength_to_omega(wavelength_m):
    return 2.0 * math.pi * C0 / wavelength_m


def omega_to_wavelength(omega):
    return 2.0 * math.pi * C0 / omega
