"""Levenberg-Marquardt least squares with box bounds (projected steps)."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from ..errors import ConfigurationError, DomainError, ModelEvaluationError


@dataclass
class ModelSpec:
    """A fit model y = func(x, p).

    ``jac`` returns d func / d p with shape (n_points, n_params); when it is
    None a central finite difference is used.  ``init(x, y)`` supplies a
    starting vector inside the bounds.
    """

    name: str
    func: Callable
    param_names: tuple
    lower: np.ndarray
    upper: np.ndarray
    jac: Callable | None = None
    init: Callable | None = None
    units: tuple = ()
    initializer: str = "moments"

    def __post_init__(self):
        self.lower = np.asarray(self.lower, dtype=float)
        self.upper = np.asarray(self.upper, dtype=float)
        n = len(self.param_names)
        if self.lower.shape != (n,) or self.upper.shape != (n,):
            raise ConfigurationError(f"{self.name}: bounds must have {n} entries")
        if np.any(self.lower > self.upper):
            raise ConfigurationError(f"{self.name}: lower bound above upper bound")
        if not self.units:
            self.units = ("",) * n

    @property
    def analytic_jacobian(self):
        return self.jac is not None

    def jacobian(self, x, p):
        if self.jac is not None:
            return np.asarray(self.jac(x, p), dtype=float)
        return finite_difference_jacobian(self.func, x, p)


def finite_difference_jacobian(func, x, p, rel_step=1e-6):
    p = np.asarray(p, dtype=float)
    cols = []
    for i in range(len(p)):
        step = rel_step * max(abs(p[i]), 1e-12)
        up, dn = p.copy(), p.copy()
        up[i] += step
        dn[i] -= step
        cols.append((func(x, up) - func(x, dn)) / (2 * step))
    return np.stack(cols, axis=-1)


@dataclass
class FitResult:
    model: str
    param_names: tuple
    values: np.ndarray
    sigmas: np.ndarray
    red_chi2: float
    converged: bool
    iterations: int
    units: tuple = ()
    flags: list = field(default_factory=list)
    derived: dict = field(default_factory=dict)
    covariance: np.ndarray | None = field(default=None, repr=False)
    n_points: int = 0

    def __getitem__(self, name):
        if name in self.param_names:
            return float(self.values[self.param_names.index(name)])
        return self.derived[name][0] if isinstance(self.derived[name], tuple) else self.derived[name]

    def sigma(self, name):
        if name in self.param_names:
            return float(self.sigmas[self.param_names.index(name)])
        val = self.derived[name]
        return val[1] if isinstance(val, tuple) else float("nan")

    def to_dict(self):
        def clean(v):
            if isinstance(v, str):
                return v
            v = float(v)
            return v if math.isfinite(v) else None

        params = {}
        for n, v, s, u in zip(self.param_names, self.values, self.sigmas, self.units):
            params[n] = {"value": clean(v), "sigma": clean(s) if self.converged else None,
                         "unit": u}
        derived = {}
        for k, v in self.derived.items():
            if isinstance(v, tuple):
                derived[k] = {"value": clean(v[0]),
                              "sigma": clean(v[1]) if self.converged else None}
            else:
                derived[k] = {"value": clean(v), "sigma": None}
        return {"model": self.model, "params": params, "derived": derived,
                "red_chi2": clean(self.red_chi2), "converged": bool(self.converged),
                "iterations": int(self.iterations), "flags": list(self.flags),
                "n_points": int(self.n_points)}

    def to_json(self, path=None):
        text = json.dumps(self.to_dict(), indent=2, sort_keys=True)
        if path is not None:
            with open(path, "w") as fh:
                fh.write(text + "\n")
        return text


def _residuals(spec, x, y, w, p):
    r = (y - spec.func(x, p)) * w
    if not np.all(np.isfinite(r)):
        raise ModelEvaluationError(p)
    return r


def least_squares(spec, x, y, sigma=None, p0=None, *, max_iter=500, tol=1e-8,
                  fixed=None):
    """Minimize sum(((y - f(x, p)) / sigma)^2) within the bounds of `spec`.

    Steps are clipped onto the box; parameters pinned at a bound with the
    gradient pushing outward are frozen for that iteration.  Converged means
    both the relative step and the relative cost change fell below `tol`.
    `fixed` maps parameter names onto held values.

    With `sigma` None unit weights are used and the covariance is scaled
    by the reduced chi-square.
    """
    y = np.asarray(y, dtype=float)
    absolute = sigma is not None
    s = np.ones_like(y) if sigma is None else np.broadcast_to(np.asarray(sigma, float), y.shape)
    if np.any(~(s > 0)):
        raise DomainError("sigma must be > 0")
    n_par = len(spec.param_names)
    free = np.ones(n_par, dtype=bool)
    p = np.array(spec.init(x, y) if p0 is None else p0, dtype=float)
    for name, val in (fixed or {}).items():
        i = spec.param_names.index(name)
        p[i] = val
        free[i] = False
    n_free = int(free.sum())
    if y.size <= n_free:
        raise DomainError("need more data points than free parameters")
    lo, hi = spec.lower, spec.upper
    p = np.clip(p, lo, hi)
    w = 1.0 / s

    r = _residuals(spec, x, y, w, p)
    cost = float(r @ r)
    floor = 1e-20 * cost  # below this the data are reproduced to rounding
    lam = 1e-6
    converged = False
    it = 0
    singular = False
    for it in range(1, max_iter + 1):
        J = -spec.jacobian(x, p) * w[:, None]
        g = J.T @ r
        active = free.copy()
        # freeze parameters pinned at a bound where descent points outward
        active &= ~((p <= lo) & (g > 0)) & ~((p >= hi) & (g < 0))
        idx = np.flatnonzero(active)
        if idx.size == 0:
            converged = True
            break
        Ja = J[:, idx]
        A = Ja.T @ Ja
        ga = g[idx]
        diag = np.maximum(np.diag(A), 1e-12 * max(np.max(np.diag(A)), 1e-300))
        accepted = False
        while lam <= 1e16:
            try:
                step = np.linalg.solve(A + lam * np.diag(diag), -ga)
            except np.linalg.LinAlgError:
                lam *= 10
                continue
            trial = p.copy()
            trial[idx] += step
            trial = np.clip(trial, lo, hi)
            r_t = _residuals(spec, x, y, w, trial)
            c_t = float(r_t @ r_t)
            # per-parameter step relative to its value or, near zero, to the
            # resolution 1/sqrt(curvature) the data give it
            dp = (trial - p)[idx]
            rel_step = float(np.max(np.abs(dp) / (np.abs(p[idx]) + 1.0 / np.sqrt(diag))))
            if c_t <= cost:
                rel_cost = (cost - c_t) / max(cost, 1e-300)
                p, r, cost = trial, r_t, c_t
                lam = max(lam / 3.0, 1e-15)
                accepted = True
                if (rel_step < tol and rel_cost < tol) or cost <= floor:
                    converged = True
                break
            if rel_step < tol and (c_t - cost) <= tol * max(cost, 1e-300):
                # the damped step has shrunk to nothing without gain: at a minimum
                converged = True
                accepted = True
                break
            lam *= 10
        if not accepted:
            singular = True
            break
        if converged:
            break

    J = -spec.jacobian(x, p) * w[:, None]
    dof = max(y.size - n_free, 1)
    red = cost / dof
    cov = np.full((n_par, n_par), np.nan)
    Jf = J[:, free]
    try:
        A = Jf.T @ Jf
        # invert in column-scaled variables so disparate units do not
        # masquerade as rank deficiency
        d = np.sqrt(np.diag(A))
        d[d == 0] = 1.0
        ci = np.linalg.pinv(A / np.outer(d, d), rcond=1e-13) / np.outer(d, d)
        if not absolute:
            ci = ci * red
        cov[np.ix_(free, free)] = ci
    except np.linalg.LinAlgError:
        singular = True
    sig = np.sqrt(np.clip(np.diag(cov), 0, None))
    sig[~free] = 0.0
    flags = []
    if singular:
        flags.append("singular_normal_equations")
    if not converged and not singular:
        flags.append("max_iterations")
    return FitResult(spec.name, tuple(spec.param_names), p, sig, red, converged, it,
                     tuple(spec.units), flags, {}, cov, int(y.size))
