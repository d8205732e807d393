"""Permittivity models and rasterization of the aperture geometry.

Lengths are in meters and angular frequencies in rad/s throughout.  The
grid produced by :func:`rasterize` carries material ids on a half-cell
sub-lattice so that every Yee field component can look up the material
at its own staggered position.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .constants import DIAMOND_INDEX
from .errors import ConfigurationError, DomainError

KINDS = ("constant", "drude", "drude_lorentz")
VARIANTS = ("silver_capped", "bare_post", "homogeneous")


@dataclass(frozen=True)
class LorentzPole:
    strength: float
    center_freq: float
    linewidth: float

    def __post_init__(self):
        if self.strength < 0:
            raise ConfigurationError("Lorentz pole strength must be >= 0")
        if self.center_freq <= 0:
            raise ConfigurationError("Lorentz pole center_freq must be > 0")
        if self.linewidth <= 0:
            raise ConfigurationError("Lorentz pole linewidth must be > 0")


@dataclass(frozen=True)
class PermittivityModel:
    """Drude-Lorentz relative permittivity (``exp(-i w t)`` convention).

    eps(w) = eps_inf - wp^2 / (w^2 + i g w)
             + sum_k  s_k w_k^2 / (w_k^2 - w^2 - i G_k w)
    """

    kind: str = "constant"
    eps_inf: float = 1.0
    plasma_freq: float = 0.0
    damping: float = 0.0
    lorentz_poles: tuple[LorentzPole, ...] = ()

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigurationError(f"unknown permittivity kind {self.kind!r}")
        if self.damping < 0:
            raise ConfigurationError("damping must be >= 0")
        if self.plasma_freq < 0:
            raise ConfigurationError("plasma_freq must be >= 0")
        if self.kind == "constant" and self.eps_inf < 1:
            raise ConfigurationError("constant permittivity needs eps_inf >= 1")
        if self.kind != "drude_lorentz" and self.lorentz_poles:
            raise ConfigurationError(f"kind {self.kind!r} takes no Lorentz poles")
        poles = tuple(p if isinstance(p, LorentzPole) else LorentzPole(**p)
                      for p in self.lorentz_poles)
        object.__setattr__(self, "lorentz_poles", poles)

    @classmethod
    def constant(cls, eps):
        return cls(kind="constant", eps_inf=float(eps))

    @classmethod
    def from_index(cls, n):
        return cls.constant(float(n) ** 2)

    @property
    def dispersive(self):
        return self.kind != "constant"

    def __call__(self, omega):
        return evaluate_permittivity(self, omega)

    def to_dict(self):
        d = asdict(self)
        d["lorentz_poles"] = [asdict(p) for p in self.lorentz_poles]
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        d["lorentz_poles"] = tuple(LorentzPole(**p) for p in d.get("lorentz_poles", ()))
        return cls(**d)


def evaluate_permittivity(model, omega):
    """Complex relative permittivity of `model` at angular frequency `omega`.

    Accepts scalars or arrays; raises DomainError for omega <= 0.
    """
    w = np.asarray(omega, dtype=float)
    if np.any(~(w > 0)):
        raise DomainError("omega must be > 0")
    eps = np.full(w.shape, model.eps_inf, dtype=complex)
    if model.kind in ("drude", "drude_lorentz") and model.plasma_freq > 0:
        eps -= model.plasma_freq**2 / (w**2 + 1j * model.damping * w)
    for p in model.lorentz_poles:
        eps += p.strength * p.center_freq**2 / (p.center_freq**2 - w**2 - 1j * p.linewidth * w)
    if eps.ndim == 0:
        return complex(eps)
    return eps


# Drude fit to tabulated bulk silver over 600-800 nm.
SILVER = PermittivityModel(kind="drude", eps_inf=3.7, plasma_freq=1.39e16, damping=2.7e13)
DIAMOND = PermittivityModel.from_index(DIAMOND_INDEX)
AIR = PermittivityModel.constant(1.0)


@dataclass(frozen=True)
class DeviceGeometry:
    """Diamond post embedded in a silver film on a bulk diamond substrate.

    The substrate surface (post base) is the plane z = 0; the post extends
    to z = post_height and the emitter sits `emitter_depth_below_top` below
    the post top facet, on the post axis (x = y = 0).
    """

    post_radius_top: float = 50e-9
    post_radius_bottom: float | None = None
    post_height: float = 180e-9
    silver_thickness: float = 500e-9
    emitter_depth_below_top: float = 20e-9
    substrate_index: float = DIAMOND_INDEX
    variant: str = "silver_capped"

    def __post_init__(self):
        if self.post_radius_bottom is None:
            object.__setattr__(self, "post_radius_bottom", self.post_radius_top + 10e-9)
        if self.variant not in VARIANTS:
            raise ConfigurationError(f"unknown geometry variant {self.variant!r}")
        if self.substrate_index < 1:
            raise ConfigurationError("substrate_index must be >= 1")
        if self.variant == "homogeneous":
            return
        for name in ("post_radius_top", "post_radius_bottom", "post_height",
                     "silver_thickness", "emitter_depth_below_top"):
            if not getattr(self, name) > 0:
                raise ConfigurationError(f"{name} must be > 0")
        if self.emitter_depth_below_top >= self.post_height:
            raise ConfigurationError("emitter_depth_below_top must be < post_height")
        if self.post_radius_top > self.post_radius_bottom:
            raise ConfigurationError("post_radius_top must be <= post_radius_bottom")

    @classmethod
    def cylinder(cls, radius, **kw):
        return cls(post_radius_top=radius, post_radius_bottom=radius, **kw)

    @property
    def emitter_z(self):
        return self.post_height - self.emitter_depth_below_top

    def radius_at(self, z):
        """Cone radius at height z (linear between base and top)."""
        t = np.clip(np.asarray(z, dtype=float) / self.post_height, 0.0, 1.0)
        return self.post_radius_bottom + (self.post_radius_top - self.post_radius_bottom) * t

    def with_(self, **changes):
        return replace(self, **changes)

    def to_dict(self):
        return asdict(self)

    def fingerprint(self):
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


@dataclass
class MaterialGrid:
    """Material ids on the half-cell sub-lattice of a uniform Yee grid.

    ``shape`` is the node count per axis; ``ids`` has shape ``2*shape - 1``
    and ``ids[a, b, c]`` is the material at ``origin + (a, b, c) * cell_size/2``.
    """

    cell_size: float
    shape: tuple[int, int, int]
    origin: tuple[float, float, float]
    ids: np.ndarray
    materials: tuple[PermittivityModel, ...]
    names: tuple[str, ...]
    pml_cells: int = 12
    geometry: DeviceGeometry | None = None
    material_fractions: tuple[dict, ...] | None = field(default=None, repr=False)

    def __post_init__(self):
        expected = tuple(2 * n - 1 for n in self.shape)
        if self.ids.shape != expected:
            raise ConfigurationError(f"ids shape {self.ids.shape} != {expected}")
        if len(self.materials) != len(self.names):
            raise ConfigurationError("materials and names differ in length")
        if self.ids.size and int(self.ids.max()) >= len(self.materials):
            raise ConfigurationError("material id without a model")

    def coords(self, axis, offset=0.0):
        """Node coordinates along `axis`, shifted by `offset` cells."""
        n = self.shape[axis]
        return self.origin[axis] + (np.arange(n) + offset) * self.cell_size

    def node_index(self, position):
        """Nearest node index to a position in meters."""
        idx = []
        for ax in range(3):
            i = int(round((position[ax] - self.origin[ax]) / self.cell_size))
            idx.append(i)
        return tuple(idx)

    def node_position(self, index):
        return tuple(self.origin[a] + index[a] * self.cell_size for a in range(3))

    def component_ids(self, component):
        """Material ids at the Yee positions of E component 'x', 'y' or 'z'."""
        ax = "xyz".index(component)
        sl = [slice(0, None, 2)] * 3
        sl[ax] = slice(1, None, 2)
        sub = self.ids[tuple(sl)]
        pad = [(0, 0)] * 3
        pad[ax] = (0, 1)
        return np.ascontiguousarray(np.pad(sub, pad, mode="edge"))

    def material_id(self, name):
        return self.names.index(name)

    def material_volume(self, name):
        """Volume (m^3) of a named material counted on the sub-lattice."""
        sub_vol = (self.cell_size / 2) ** 3
        if self.material_fractions is None:
            return float(np.count_nonzero(self.ids == self.material_id(name)) * sub_vol)
        weights = np.array([fr.get(name, 0.0) for fr in self.material_fractions])
        return float(weights[self.ids].sum() * sub_vol)

    def interior_slice(self):
        p = self.pml_cells
        return tuple(slice(p, n - p) for n in self.shape)

    def is_in_pml(self, index):
        p = self.pml_cells
        return any(i < p or i > n - 1 - p for i, n in zip(index, self.shape))

    def eps_at(self, component, omega):
        """Relative permittivity at the positions of one E component."""
        table = np.array([evaluate_permittivity(m, omega) for m in self.materials])
        return table[self.component_ids(component)]


def _grid_extents(geometry, cell_size, padding, pml_cells):
    r_max = max(geometry.post_radius_top, geometry.post_radius_bottom)
    n_half = math.ceil((r_max + padding) / cell_size - 1e-9) + pml_cells
    n_below = math.ceil(padding / cell_size - 1e-9) + pml_cells
    n_above = math.ceil((geometry.post_height + padding) / cell_size - 1e-9) + pml_cells
    shape = (2 * n_half + 1, 2 * n_half + 1, n_below + n_above + 1)
    origin = (-n_half * cell_size, -n_half * cell_size, -n_below * cell_size)
    return shape, origin


def _classify(geometry, x, y, z):
    """Material id (0 diamond, 1 silver, 2 air) at broadcastable points."""
    ids = np.zeros(np.broadcast(x, y, z).shape, dtype=np.uint8)
    if geometry.variant == "homogeneous":
        return ids
    tol = 1e-6 * geometry.post_height
    rr = np.sqrt(x**2 + y**2)
    in_post = (z >= -tol) & (z < geometry.post_height - tol) & (rr <= geometry.radius_at(z) + tol)
    above_substrate = (z >= -tol) & ~in_post
    if geometry.variant == "silver_capped":
        silver = above_substrate & (z < geometry.silver_thickness - tol)
        ids[silver] = 1
        ids[above_substrate & ~silver] = 2
    else:
        ids[above_substrate] = 2
    return ids


def _mix(models, fractions):
    """Volume-weighted permittivity mix, exact within the Drude-Lorentz family."""
    eps_inf = sum(f * m.eps_inf for m, f in zip(models, fractions))
    dispersive = [(m, f) for m, f in zip(models, fractions) if m.dispersive and f > 0]
    if not dispersive:
        return PermittivityModel.constant(max(eps_inf, 1.0))
    if len(dispersive) > 1:
        raise ConfigurationError("cannot blend two dispersive materials in one subcell")
    m, f = dispersive[0]
    poles = tuple(replace(p, strength=p.strength * f) for p in m.lorentz_poles)
    return PermittivityModel(kind=m.kind, eps_inf=eps_inf,
                             plasma_freq=m.plasma_freq * math.sqrt(f),
                             damping=m.damping, lorentz_poles=poles)


def rasterize(geometry, cell_size, padding, *, pml_cells=12, silver=SILVER,
              volume_average=False, supersample=4, check_resolution=True):
    """Staircase the device onto a Yee grid.

    `padding` is the distance between the structure and the inner edge
    of the absorbing layer; the PML cells are added outside it.  With
    ``volume_average`` each sub-lattice point gets the volume-weighted
    permittivity of the materials in its subcell, quantized to 1/16.
    """
    if not cell_size > 0:
        raise ConfigurationError("cell_size must be > 0")
    if check_resolution and geometry.variant != "homogeneous" \
            and cell_size > geometry.post_radius_top / 5 * (1 + 1e-9):
        raise ConfigurationError(
            f"cell_size {cell_size:.3e} m exceeds post_radius_top/5 = "
            f"{geometry.post_radius_top / 5:.3e} m")
    if padding < 3 * cell_size * (1 - 1e-9):
        raise ConfigurationError(
            f"padding {padding:.3e} m is below 3*cell_size = {3 * cell_size:.3e} m")
    shape, origin = _grid_extents(geometry, cell_size, padding, pml_cells)
    half = cell_size / 2
    # integer sub-lattice offsets keep the x/y mirror symmetry exact
    sub = [origin[a] + np.arange(2 * shape[a] - 1) * half for a in range(3)]
    sub[0] = (np.arange(2 * shape[0] - 1) - (shape[0] - 1)) * half
    sub[1] = (np.arange(2 * shape[1] - 1) - (shape[1] - 1)) * half
    x, y, z = sub[0][:, None, None], sub[1][None, :, None], sub[2][None, None, :]
    base = (DIAMOND if geometry.substrate_index == DIAMOND_INDEX
            else PermittivityModel.from_index(geometry.substrate_index))
    models = (base, silver, AIR)
    names = ("diamond", "silver", "air")
    if not volume_average:
        ids = _classify(geometry, x, y, z)
        return MaterialGrid(cell_size, shape, origin, ids, models, names, pml_cells, geometry)

    offs = (np.arange(supersample) + 0.5) / supersample * half - half / 2
    counts = np.zeros((3,) + tuple(len(s) for s in sub), dtype=np.int32)
    for dx in offs:
        for dy in offs:
            for dz in offs:
                c = _classify(geometry, x + dx, y + dy, z + dz)
                for m in range(3):
                    counts[m] += c == m
    levels = 16
    q = np.rint(counts / supersample**3 * levels).astype(np.int32)
    # silver and air fractions are quantized; diamond takes the remainder
    over = np.maximum(q[1] + q[2] - levels, 0)
    q[2] -= over
    keys = q[1] * (levels + 1) + q[2]
    uniq, inverse = np.unique(keys, return_inverse=True)
    mixed_models, mixed_names, fractions = [], [], []
    for key in uniq:
        f_ag, f_air = divmod(int(key), levels + 1)
        fr = np.array([levels - f_ag - f_air, f_ag, f_air], dtype=float) / levels
        mixed_models.append(_mix(models, fr))
        pure = np.flatnonzero(fr == 1.0)
        mixed_names.append(names[pure[0]] if pure.size else
                           "mix:" + ",".join(f"{n}={v:.4g}" for n, v in zip(names, fr) if v))
        fractions.append({n: float(v) for n, v in zip(names, fr)})
    ids = inverse.reshape(keys.shape).astype(np.uint8 if len(uniq) < 256 else np.uint16)
    return MaterialGrid(cell_size, shape, origin, ids, tuple(mixed_models),
                        tuple(mixed_names), pml_cells, geometry, tuple(fractions))


def homogeneous_like(grid, index=None):
    """Grid of identical shape filled with the substrate (or given index)."""
    n = index
    if n is None:
        n = grid.geometry.substrate_index if grid.geometry is not None else DIAMOND_INDEX
    model = DIAMOND if n == DIAMOND_INDEX else PermittivityModel.from_index(n)
    geom = grid.geometry.with_(variant="homogeneous", substrate_index=n) if grid.geometry else None
    return MaterialGrid(grid.cell_size, grid.shape, grid.origin,
                        np.zeros_like(grid.ids, dtype=np.uint8), (model,),
                        ("diamond" if n == DIAMOND_INDEX else "medium",), grid.pml_cells, geom)
