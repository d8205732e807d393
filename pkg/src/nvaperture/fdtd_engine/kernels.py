"""Compiled Yee update kernels.

Array layout (all shape (nx, ny, nz), cell size h):

    Ex[i,j,k] at ((i+1/2)h, j h, k h)      Hx[i,j,k] at (i h, (j+1/2)h, (k+1/2)h)
    Ey[i,j,k] at (i h, (j+1/2)h, k h)      Hy[i,j,k] at ((i+1/2)h, j h, (k+1/2)h)
    Ez[i,j,k] at (i h, j h, (k+1/2)h)      Hz[i,j,k] at ((i+1/2)h, (j+1/2)h, k h)

Tangential E on the outer faces is never updated (PEC behind the PML).
Per-material coefficient tables are indexed by the uint8 id arrays:

    cb   dt / (eps0 eps_inf)
    kj   Drude current decay  (1 - g dt/2) / (1 + g dt/2)
    bj   Drude current drive  eps0 wp^2 dt / (1 + g dt/2)
    pa, pb, pc   Lorentz polarization recursion P+ = pa P + pb P- + pc E
    ce   1 / (eps0 eps_inf)
"""

import numba as nb
from numba import prange

_opts = dict(cache=True, parallel=True, fastmath=False, nogil=True)


@nb.njit(**_opts)
def update_h(Ex, Ey, Ez, Hx, Hy, Hz, ch):
    """H -= dt/(mu0 h) curl E over the whole grid."""
    nx, ny, nz = Ex.shape
    for i in prange(nx):
        for j in range(ny):
            for k in range(nz):
                if j < ny - 1 and k < nz - 1:
                    Hx[i, j, k] -= ch * ((Ez[i, j + 1, k] - Ez[i, j, k])
                                         - (Ey[i, j, k + 1] - Ey[i, j, k]))
                if i < nx - 1 and k < nz - 1:
                    Hy[i, j, k] -= ch * ((Ex[i, j, k + 1] - Ex[i, j, k])
                                         - (Ez[i + 1, j, k] - Ez[i, j, k]))
                if i < nx - 1 and j < ny - 1:
                    Hz[i, j, k] -= ch * ((Ey[i + 1, j, k] - Ey[i, j, k])
                                         - (Ex[i, j + 1, k] - Ex[i, j, k]))


@nb.njit(cache=True, inline="always")
def _ade(E, J, P, Pm, i, j, k, m, curl, cb, kj, bj, has_pole, pa, pb, pc, ce):
    e_old = E[i, j, k]
    if bj[m] != 0.0:
        jn = kj[m] * J[i, j, k] + bj[m] * e_old
        J[i, j, k] = jn
        curl -= jn
    e_new = e_old + cb[m] * curl
    if has_pole and pc[m] != 0.0:
        p_new = pa[m] * P[i, j, k] + pb[m] * Pm[i, j, k] + pc[m] * e_old
        e_new -= (p_new - P[i, j, k]) * ce[m]
        Pm[i, j, k] = P[i, j, k]
        P[i, j, k] = p_new
    E[i, j, k] = e_new


@nb.njit(**_opts)
def _update_ex(Ex, Hy, Hz, mat, cb, kj, bj, J, has_pole, pa, pb, pc, ce, P, Pm, inv_h):
    nx, ny, nz = Ex.shape
    for i in prange(nx - 1):
        for j in range(1, ny - 1):
            for k in range(1, nz - 1):
                curl = ((Hz[i, j, k] - Hz[i, j - 1, k]) - (Hy[i, j, k] - Hy[i, j, k - 1])) * inv_h
                _ade(Ex, J, P, Pm, i, j, k, mat[i, j, k], curl, cb, kj, bj, has_pole,
                     pa, pb, pc, ce)


@nb.njit(**_opts)
def _update_ey(Ey, Hz, Hx, mat, cb, kj, bj, J, has_pole, pa, pb, pc, ce, P, Pm, inv_h):
    nx, ny, nz = Ey.shape
    for i in prange(1, nx - 1):
        for j in range(ny - 1):
            for k in range(1, nz - 1):
                curl = ((Hx[i, j, k] - Hx[i, j, k - 1]) - (Hz[i, j, k] - Hz[i - 1, j, k])) * inv_h
                _ade(Ey, J, P, Pm, i, j, k, mat[i, j, k], curl, cb, kj, bj, has_pole,
                     pa, pb, pc, ce)


@nb.njit(**_opts)
def _update_ez(Ez, Hx, Hy, mat, cb, kj, bj, J, has_pole, pa, pb, pc, ce, P, Pm, inv_h):
    nx, ny, nz = Ez.shape
    for i in prange(1, nx - 1):
        for j in range(1, ny - 1):
            for k in range(nz - 1):
                curl = ((Hy[i, j, k] - Hy[i - 1, j, k]) - (Hx[i, j, k] - Hx[i, j - 1, k])) * inv_h
                _ade(Ez, J, P, Pm, i, j, k, mat[i, j, k], curl, cb, kj, bj, has_pole,
                     pa, pb, pc, ce)


def update_e(f, tables):
    """Advance the three E components one step (Drude/Lorentz ADE inline)."""
    cb, kj, bj, pa, pb, pc, ce = tables
    inv_h = 1.0 / f.h
    hp = f.has_pole
    _update_ex(f.Ex, f.Hy, f.Hz, f.mx, cb, kj, bj, f.Jx, hp, pa, pb, pc, ce, f.Px, f.Pxm, inv_h)
    _update_ey(f.Ey, f.Hz, f.Hx, f.my, cb, kj, bj, f.Jy, hp, pa, pb, pc, ce, f.Py, f.Pym, inv_h)
    _update_ez(f.Ez, f.Hx, f.Hy, f.mz, cb, kj, bj, f.Jz, hp, pa, pb, pc, ce, f.Pz, f.Pzm, inv_h)


@nb.njit(**_opts)
def pml_e(E, G, axis, sign, mat, cb, psi, b, c, kinv, r0, r1, r2, inv_h):
    """CPML correction for E along `axis` over the index box r0 x r1 x r2.

    The backward difference dG of G along `axis` is filtered:
    psi = b psi + c dG ; E += sign cb (psi + (kinv - 1) dG).
    `psi` is stored relative to the box origin.
    """
    i0, j0, k0 = r0[0], r1[0], r2[0]
    for i in prange(i0, r0[1]):
        for j in range(j0, r1[1]):
            if axis == 0:
                bu, cu, ku = b[i], c[i], kinv[i] - 1.0
                for k in range(k0, r2[1]):
                    d = (G[i, j, k] - G[i - 1, j, k]) * inv_h
                    p = bu * psi[i - i0, j - j0, k - k0] + cu * d
                    psi[i - i0, j - j0, k - k0] = p
                    E[i, j, k] += sign * cb[mat[i, j, k]] * (p + ku * d)
            elif axis == 1:
                bu, cu, ku = b[j], c[j], kinv[j] - 1.0
                for k in range(k0, r2[1]):
                    d = (G[i, j, k] - G[i, j - 1, k]) * inv_h
                    p = bu * psi[i - i0, j - j0, k - k0] + cu * d
                    psi[i - i0, j - j0, k - k0] = p
                    E[i, j, k] += sign * cb[mat[i, j, k]] * (p + ku * d)
            else:
                for k in range(k0, r2[1]):
                    d = (G[i, j, k] - G[i, j, k - 1]) * inv_h
                    p = b[k] * psi[i - i0, j - j0, k - k0] + c[k] * d
                    psi[i - i0, j - j0, k - k0] = p
                    E[i, j, k] += sign * cb[mat[i, j, k]] * (p + (kinv[k] - 1.0) * d)


@nb.njit(**_opts)
def pml_h(H, G, axis, sign, ch, psi, b, c, kinv, r0, r1, r2):
    """CPML correction for H (forward difference); `ch` = dt/(mu0 h)."""
    i0, j0, k0 = r0[0], r1[0], r2[0]
    for i in prange(i0, r0[1]):
        for j in range(j0, r1[1]):
            if axis == 0:
                bu, cu, ku = b[i], c[i], kinv[i] - 1.0
                for k in range(k0, r2[1]):
                    d = G[i + 1, j, k] - G[i, j, k]
                    p = bu * psi[i - i0, j - j0, k - k0] + cu * d
                    psi[i - i0, j - j0, k - k0] = p
                    H[i, j, k] -= sign * ch * (p + ku * d)
            elif axis == 1:
                bu, cu, ku = b[j], c[j], kinv[j] - 1.0
                for k in range(k0, r2[1]):
                    d = G[i, j + 1, k] - G[i, j, k]
                    p = bu * psi[i - i0, j - j0, k - k0] + cu * d
                    psi[i - i0, j - j0, k - k0] = p
                    H[i, j, k] -= sign * ch * (p + ku * d)
            else:
                for k in range(k0, r2[1]):
                    d = G[i, j, k + 1] - G[i, j, k]
                    p = b[k] * psi[i - i0, j - j0, k - k0] + c[k] * d
                    psi[i - i0, j - j0, k - k0] = p
                    H[i, j, k] -= sign * ch * (p + (kinv[k] - 1.0) * d)


@nb.njit(cache=True)
def dft_accumulate(acc, F, i0, j0, k0, phase):
    """acc[f, a, b, c] += F[i0+a, j0+b, k0+c] * phase[f]."""
    nf, na, nbb, nc = acc.shape
    for a in range(na):
        for b_ in range(nbb):
            for c in range(nc):
                v = F[i0 + a, j0 + b_, k0 + c]
                if v != 0.0:
                    for f in range(nf):
                        acc[f, a, b_, c] += v * phase[f]


@nb.njit(cache=True)
def field_energy(Ex, Ey, Ez, Hx, Hy, Hz, eps, mx, my, mz, eps0, mu0):
    """Sum of eps0 eps_inf |E|^2 + mu0 |H|^2 (sequential, deterministic order)."""
    nx, ny, nz = Ex.shape
    e = 0.0
    hsum = 0.0
    for i in range(nx):
        for j in range(ny):
            for k in range(nz):
                e += (eps[mx[i, j, k]] * Ex[i, j, k] ** 2
                      + eps[my[i, j, k]] * Ey[i, j, k] ** 2
                      + eps[mz[i, j, k]] * Ez[i, j, k] ** 2)
                hsum += Hx[i, j, k] ** 2 + Hy[i, j, k] ** 2 + Hz[i, j, k] ** 2
    return eps0 * e + mu0 * hsum
