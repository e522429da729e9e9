"""Immersed surface patches in R^m and their first/second fundamental data.

A patch is a rectangular parameter grid carrying the immersion 2-jet
(positions, first and second partials).  Catalog surfaces get exact jets
(differentiated symbolically once per surface and evaluated with numpy);
sampled surfaces get finite-difference jets (4th-order centered inside,
order reduced near non-periodic edges).

All derived-field derivatives elsewhere in the package use 2nd-order
centered stencils; every stencil application widens the invalid boundary
collar, tracked explicitly as an integer `margin` (layers per non-periodic
edge).  Nodes outside the valid region are NaN so that accidental use is
loud.

The geometry cache holds the metric, its inverse and determinant,
Christoffel symbols, second fundamental form, mean curvature vector, and
the unit tangent 2-vector of the Gauss map.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from functools import lru_cache
from typing import Callable, Optional

import numpy as np
import sympy as sp

from .exterior_algebra import grade_dim, star_field, wedge_field

DET_G_FLOOR = 1e-10

# antisymmetric symbol, eps[j,k] with eps[0,1] = +1; used with either index
# placement since eps_{jk} = eps^{jk} here
EPS2 = np.array([[0.0, 1.0], [-1.0, 0.0]])


class ImmersionDegenerate(ValueError):
    """Metric determinant below floor somewhere on the valid region."""


class SampledFormatError(ValueError):
    """Malformed sampled-surface stream."""


class MarginError(ValueError):
    """Grid too narrow for the requested stencil margin."""


# ----------------------------------------------------------------------
# patch container
# ----------------------------------------------------------------------


@dataclass
class ImmersionPatch:
    """Immersion 2-jet on a rectangular parameter grid.

    phi: (nx, ny, m) positions; d1: (nx, ny, 2, m) first partials;
    d2: (nx, ny, 2, 2, m) second partials.  Axis 0 is the u direction.
    margin counts boundary layers (per non-periodic edge) where derived
    fields should not be trusted.
    """

    m: int
    u0: float
    v0: float
    hx: float
    hy: float
    periodic: tuple[bool, bool]
    phi: np.ndarray
    d1: np.ndarray
    d2: np.ndarray
    margin: int = 0
    jet_source: str = "analytic"
    name: str = ""
    # for charts whose u axis is an angle: maps a planar contour radius to
    # the v coordinate of the corresponding grid circle (None = planar chart)
    v_of_radius: Optional[Callable[[float], float]] = None

    @property
    def nx(self) -> int:
        return self.phi.shape[0]

    @property
    def ny(self) -> int:
        return self.phi.shape[1]

    def axis_coords(self, axis: int) -> np.ndarray:
        n = self.phi.shape[axis]
        start = self.u0 if axis == 0 else self.v0
        h = self.hx if axis == 0 else self.hy
        return start + h * np.arange(n)

    def grid_uv(self) -> tuple[np.ndarray, np.ndarray]:
        return np.meshgrid(self.axis_coords(0), self.axis_coords(1), indexing="ij")

    def valid_slice(self, margin: int) -> tuple[slice, slice]:
        sl = []
        for axis in range(2):
            if self.periodic[axis] or margin == 0:
                sl.append(slice(None))
            else:
                n = self.phi.shape[axis]
                if n - 2 * margin < 3:
                    raise MarginError(
                        f"grid axis {axis} ({n} nodes) too narrow for margin {margin}"
                    )
                sl.append(slice(margin, n - margin))
        return tuple(sl)


def transform_patch(patch: ImmersionPatch, motion: tuple) -> ImmersionPatch:
    """Apply an ambient motion ('translation', a) / ('rotation', Q) / ('dilation', lam).

    Jets transform exactly; the parameter grid is untouched, so node-for-node
    comparisons with the source patch are meaningful.
    """
    kind = motion[0]
    if kind == "translation":
        a = np.asarray(motion[1], dtype=float)
        if a.shape != (patch.m,):
            raise ValueError(f"translation vector must have length {patch.m}")
        return replace(patch, phi=patch.phi + a, d1=patch.d1.copy(), d2=patch.d2.copy())
    if kind == "rotation":
        Q = np.asarray(motion[1], dtype=float)
        if Q.shape != (patch.m, patch.m):
            raise ValueError(f"rotation matrix must be {patch.m}x{patch.m}")
        if np.abs(Q @ Q.T - np.eye(patch.m)).max() > 1e-10:
            raise ValueError("rotation matrix is not orthogonal")
        rot = lambda A: np.einsum("ab,...b->...a", Q, A)
        return replace(patch, phi=rot(patch.phi), d1=rot(patch.d1), d2=rot(patch.d2))
    if kind == "dilation":
        lam = float(motion[1])
        if lam <= 0:
            raise ValueError("dilation factor must be positive")
        return replace(patch, phi=lam * patch.phi, d1=lam * patch.d1, d2=lam * patch.d2)
    raise ValueError(f"unknown motion kind {kind!r}")


# ----------------------------------------------------------------------
# finite-difference jets
# ----------------------------------------------------------------------


def _fd_d1(F: np.ndarray, axis: int, h: float, periodic: bool) -> np.ndarray:
    """First partial of nodal data: 4th-order centered, reduced near edges."""
    if periodic:
        return (
            8.0 * (np.roll(F, -1, axis) - np.roll(F, 1, axis))
            - (np.roll(F, -2, axis) - np.roll(F, 2, axis))
        ) / (12.0 * h)
    F = np.moveaxis(F, axis, 0)
    out = np.empty_like(F)
    out[2:-2] = (8.0 * (F[3:-1] - F[1:-3]) - (F[4:] - F[:-4])) / (12.0 * h)
    out[1] = (F[2] - F[0]) / (2.0 * h)
    out[-2] = (F[-1] - F[-3]) / (2.0 * h)
    out[0] = (-3.0 * F[0] + 4.0 * F[1] - F[2]) / (2.0 * h)
    out[-1] = (3.0 * F[-1] - 4.0 * F[-2] + F[-3]) / (2.0 * h)
    return np.moveaxis(out, 0, axis)


def _fd_d2(F: np.ndarray, axis: int, h: float, periodic: bool) -> np.ndarray:
    """Pure second partial: 4th-order 5-point centered, reduced near edges."""
    if periodic:
        return (
            16.0 * (np.roll(F, -1, axis) + np.roll(F, 1, axis))
            - (np.roll(F, -2, axis) + np.roll(F, 2, axis))
            - 30.0 * F
        ) / (12.0 * h * h)
    F = np.moveaxis(F, axis, 0)
    out = np.empty_like(F)
    out[2:-2] = (
        16.0 * (F[3:-1] + F[1:-3]) - (F[4:] + F[:-4]) - 30.0 * F[2:-2]
    ) / (12.0 * h * h)
    out[1] = (F[2] - 2.0 * F[1] + F[0]) / (h * h)
    out[-2] = (F[-1] - 2.0 * F[-2] + F[-3]) / (h * h)
    out[0] = (2.0 * F[0] - 5.0 * F[1] + 4.0 * F[2] - F[3]) / (h * h)
    out[-1] = (2.0 * F[-1] - 5.0 * F[-2] + 4.0 * F[-3] - F[-4]) / (h * h)
    return np.moveaxis(out, 0, axis)


def from_positions(
    phi: np.ndarray,
    hx: float,
    hy: float,
    periodic: tuple[bool, bool],
    u0: float = 0.0,
    v0: float = 0.0,
    name: str = "sampled",
    v_of_radius=None,
) -> ImmersionPatch:
    """Build a finite-difference-jet patch from nodal positions."""
    phi = np.asarray(phi, dtype=float)
    if phi.ndim != 3 or phi.shape[2] < 2:
        raise ValueError("positions must have shape (nx, ny, m)")
    if min(phi.shape[0], phi.shape[1]) < 5:
        raise MarginError("finite-difference jets need at least 5 nodes per axis")
    if not np.isfinite(phi).all():
        raise SampledFormatError("non-finite position data")
    nx, ny, m = phi.shape
    d1 = np.empty((nx, ny, 2, m))
    d1[:, :, 0] = _fd_d1(phi, 0, hx, periodic[0])
    d1[:, :, 1] = _fd_d1(phi, 1, hy, periodic[1])
    d2 = np.empty((nx, ny, 2, 2, m))
    d2[:, :, 0, 0] = _fd_d2(phi, 0, hx, periodic[0])
    d2[:, :, 1, 1] = _fd_d2(phi, 1, hy, periodic[1])
    mixed = _fd_d1(_fd_d1(phi, 0, hx, periodic[0]), 1, hy, periodic[1])
    d2[:, :, 0, 1] = mixed
    d2[:, :, 1, 0] = mixed
    margin = 0 if all(periodic) else 2
    return ImmersionPatch(
        m=m, u0=u0, v0=v0, hx=hx, hy=hy, periodic=tuple(periodic),
        phi=phi, d1=d1, d2=d2, margin=margin, jet_source="finite-difference",
        name=name, v_of_radius=v_of_radius,
    )


# ----------------------------------------------------------------------
# sampled-surface text format
# ----------------------------------------------------------------------
#
# header: m nx ny hx hy periodic_u periodic_v
# then nx*ny rows (i outer, j inner): i j phi_1 .. phi_m


def load_sampled_patch(stream) -> ImmersionPatch:
    if isinstance(stream, str):
        with open(stream, "r") as fh:
            return load_sampled_patch(fh)
    lines = [ln.strip() for ln in stream if ln.strip()]
    if not lines:
        raise SampledFormatError("empty stream")
    head = lines[0].split()
    if len(head) != 7:
        raise SampledFormatError(f"header needs 7 fields, got {len(head)}")
    try:
        m, nx, ny = int(head[0]), int(head[1]), int(head[2])
        hx, hy = float(head[3]), float(head[4])
        pu, pv = bool(int(head[5])), bool(int(head[6]))
    except ValueError as exc:
        raise SampledFormatError(f"bad header: {exc}") from exc
    if len(lines) - 1 != nx * ny:
        raise SampledFormatError(f"expected {nx * ny} rows, got {len(lines) - 1}")
    phi = np.empty((nx, ny, m))
    seen = np.zeros((nx, ny), dtype=bool)
    for ln in lines[1:]:
        parts = ln.split()
        if len(parts) != 2 + m:
            raise SampledFormatError(f"row needs {2 + m} fields: {ln!r}")
        i, j = int(parts[0]), int(parts[1])
        if not (0 <= i < nx and 0 <= j < ny):
            raise SampledFormatError(f"row index ({i},{j}) out of range")
        phi[i, j] = [float(x) for x in parts[2:]]
        seen[i, j] = True
    if not seen.all():
        raise SampledFormatError("missing rows for some grid nodes")
    if not np.isfinite(phi).all():
        raise SampledFormatError("non-finite position data")
    return from_positions(phi, hx, hy, (pu, pv))


def dump_sampled_patch(patch: ImmersionPatch, stream) -> None:
    if isinstance(stream, str):
        with open(stream, "w", newline="\n") as fh:
            dump_sampled_patch(patch, fh)
            return
    stream.write(
        f"{patch.m} {patch.nx} {patch.ny} {patch.hx:.17g} {patch.hy:.17g} "
        f"{int(patch.periodic[0])} {int(patch.periodic[1])}\n"
    )
    for i in range(patch.nx):
        for j in range(patch.ny):
            vals = " ".join(f"{x:.17g}" for x in patch.phi[i, j])
            stream.write(f"{i} {j} {vals}\n")


# ----------------------------------------------------------------------
# catalog
# ----------------------------------------------------------------------


def _catalog_defs():
    u, v = sp.symbols("u v", real=True)

    def stereo(cu, cv):
        # v -> -v variant so the parametrization-induced normal points outward
        uu, vv = u + cu, v + cv
        den = 1 + uu**2 + vv**2
        return (2 * uu / den, -2 * vv / den, (uu**2 + vv**2 - 1) / den)

    defs = {}
    defs["flat"] = dict(
        phi=lambda: (u, v, sp.Integer(0)),
        domain=(-1.0, 1.0, -1.0, 1.0), periodic=(False, False), nparams=0,
    )
    defs["sphere_stereo"] = dict(
        # params: optional chart recentering (c1, c2)
        phi=lambda c1=0.0, c2=0.0: stereo(sp.Float(c1), sp.Float(c2)),
        domain=(-1.0, 1.0, -1.0, 1.0), periodic=(False, False), nparams=(0, 2),
    )
    defs["sphere_polar"] = dict(
        # truncated polar chart of the unit sphere; caps of half-angle delta
        # removed at both poles; angular direction chosen for outward normal
        phi=lambda delta=1e-4: (sp.sin(v) * sp.cos(u), -sp.sin(v) * sp.sin(u), sp.cos(v)),
        domain=lambda delta=1e-4: (0.0, 2 * math.pi, delta, math.pi - delta),
        periodic=(True, False), nparams=(0, 1),
    )
    defs["cylinder"] = dict(
        phi=lambda radius=1.0: (
            sp.Float(radius) * sp.cos(u), sp.Float(radius) * sp.sin(u), v),
        domain=(0.0, 2 * math.pi, 0.0, 1.0), periodic=(True, False), nparams=(0, 1),
        v_of_radius=lambda *_p: (lambda r: -math.log(r)),
    )
    defs["catenoid"] = dict(
        phi=lambda: (sp.cosh(v) * sp.cos(u), sp.cosh(v) * sp.sin(u), v),
        domain=(0.0, 2 * math.pi, -1.0, 1.0), periodic=(True, False), nparams=0,
    )
    defs["clifford_torus"] = dict(
        # stereographic image of the flat square torus in S^3: a conformal
        # chart of the R = sqrt(2), r = 1 torus of revolution.  Node density
        # follows the conformal factor, which is what keeps stencil error
        # small near the inner equator.
        phi=lambda: (
            sp.cos(u) / (sp.sqrt(2) - sp.sin(v)),
            sp.sin(u) / (sp.sqrt(2) - sp.sin(v)),
            sp.cos(v) / (sp.sqrt(2) - sp.sin(v)),
        ),
        domain=(0.0, 2 * math.pi, 0.0, 2 * math.pi), periodic=(True, True), nparams=0,
    )
    defs["flat_torus_r4"] = dict(
        # product of two circles in R^4; rank-2 normal bundle with H != 0,
        # the only catalog member exercising codimension 2 away from a
        # minimal surface
        phi=lambda: (
            sp.cos(u) / sp.sqrt(2), sp.sin(u) / sp.sqrt(2),
            sp.cos(v) / sp.sqrt(2), sp.sin(v) / sp.sqrt(2),
        ),
        domain=(0.0, 2 * math.pi, 0.0, 2 * math.pi), periodic=(True, True), nparams=0,
    )
    defs["torus_Rr"] = dict(
        phi=lambda R=2.0, r=1.0: (
            (sp.Float(R) + sp.Float(r) * sp.cos(v)) * sp.cos(u),
            (sp.Float(R) + sp.Float(r) * sp.cos(v)) * sp.sin(u),
            sp.Float(r) * sp.sin(v),
        ),
        domain=(0.0, 2 * math.pi, 0.0, 2 * math.pi), periodic=(True, True),
        nparams=(0, 2),
    )
    defs["graph_z2"] = dict(
        phi=lambda: (u, v, u**2 - v**2, 2 * u * v),
        domain=(-1.0, 1.0, -1.0, 1.0), periodic=(False, False), nparams=0,
    )
    defs["graph_bump"] = dict(
        # generic graph with a non-diagonal metric; exercises mixed-derivative
        # terms that the conformal and rotationally symmetric charts all miss
        phi=lambda amp=0.3: (u, v, sp.Float(amp) * sp.sin(sp.pi * u) * sp.sin(sp.pi * v)),
        domain=(-1.0, 1.0, -1.0, 1.0), periodic=(False, False), nparams=(0, 1),
    )

    def inverted_catenoid(v_min=0.2, v_max=2.5):
        # catenoid end v >= v_min pushed through p -> p/|p|^2; the puncture
        # (v -> +inf) maps to the origin and stays off the grid
        c = (sp.cosh(v) * sp.cos(u), sp.cosh(v) * sp.sin(u), v)
        n2 = c[0] ** 2 + c[1] ** 2 + c[2] ** 2
        return tuple(ci / n2 for ci in c)

    defs["inverted_catenoid_end"] = dict(
        phi=inverted_catenoid,
        domain=lambda v_min=0.2, v_max=2.5: (0.0, 2 * math.pi, v_min, v_max),
        periodic=(True, False), nparams=(0, 2),
        v_of_radius=lambda *_p: (lambda r: -math.log(r)),
    )
    return (u, v), defs


_UV_SYMS, _CATALOG = _catalog_defs()


def catalog_names() -> list[str]:
    return sorted(_CATALOG.keys())


@lru_cache(maxsize=32)
def _lambdified_jet(name: str, params: tuple):
    u, v = _UV_SYMS
    entry = _CATALOG[name]
    phi = entry["phi"](*params)
    exprs = list(phi)
    for w in (u, v):
        exprs.extend(sp.diff(p, w) for p in phi)
    for a, b in ((u, u), (u, v), (v, v)):
        exprs.extend(sp.diff(p, a, b) for p in phi)
    fns = [sp.lambdify((u, v), e, modules="numpy") for e in exprs]
    return len(phi), fns


def build_catalog_patch(
    name: str,
    n: int | tuple[int, int] = 65,
    params: tuple = (),
    domain: Optional[tuple[float, float, float, float]] = None,
    periodic: Optional[tuple[bool, bool]] = None,
) -> ImmersionPatch:
    """Catalog surface with exact jets on an (nx, ny) grid.

    `domain`/`periodic` override the catalog defaults (e.g. a simply
    connected sub-chart of a periodic surface).
    """
    if name not in _CATALOG:
        raise KeyError(f"unknown catalog surface {name!r}; see catalog_names()")
    entry = _CATALOG[name]
    params = tuple(float(p) for p in (params or ()))
    lo, hi = (entry["nparams"], entry["nparams"]) if isinstance(entry["nparams"], int) \
        else entry["nparams"]
    if not (lo <= len(params) <= hi):
        raise ValueError(f"{name} takes {lo}..{hi} parameters, got {len(params)}")
    if name == "torus_Rr" and params:
        R, r = params
        if r <= 0 or R <= 0 or r >= R:
            raise ImmersionDegenerate(f"torus_Rr needs 0 < r < R, got R={R}, r={r}")

    nx, ny = (n, n) if isinstance(n, int) else (int(n[0]), int(n[1]))
    if min(nx, ny) < 5:
        raise MarginError("catalog grids need at least 5 nodes per axis")
    dom = entry["domain"]
    if callable(dom):
        dom = dom(*params)
    if domain is not None:
        dom = tuple(float(x) for x in domain)
    per = tuple(entry["periodic"] if periodic is None else periodic)
    u0, u1, v0, v1 = dom
    hx = (u1 - u0) / (nx if per[0] else nx - 1)
    hy = (v1 - v0) / (ny if per[1] else ny - 1)

    m, fns = _lambdified_jet(name, params)
    U, V = np.meshgrid(u0 + hx * np.arange(nx), v0 + hy * np.arange(ny), indexing="ij")
    vals = [np.broadcast_to(np.asarray(f(U, V), dtype=float), U.shape) for f in fns]
    phi = np.stack(vals[0:m], axis=-1)
    d1 = np.stack(
        [np.stack(vals[m : 2 * m], axis=-1), np.stack(vals[2 * m : 3 * m], axis=-1)],
        axis=2,
    )
    duu = np.stack(vals[3 * m : 4 * m], axis=-1)
    duv = np.stack(vals[4 * m : 5 * m], axis=-1)
    dvv = np.stack(vals[5 * m : 6 * m], axis=-1)
    d2 = np.empty((nx, ny, 2, 2, m))
    d2[:, :, 0, 0], d2[:, :, 0, 1] = duu, duv
    d2[:, :, 1, 0], d2[:, :, 1, 1] = duv, dvv

    vor = entry.get("v_of_radius")
    return ImmersionPatch(
        m=m, u0=u0, v0=v0, hx=hx, hy=hy, periodic=per, phi=phi, d1=d1, d2=d2,
        margin=0, jet_source="analytic", name=name,
        v_of_radius=vor(*params) if vor else None,
    )


# ----------------------------------------------------------------------
# geometry cache
# ----------------------------------------------------------------------


@dataclass
class GeometryCache:
    """Pointwise first/second fundamental data derived from a patch 2-jet."""

    patch: ImmersionPatch
    g: np.ndarray        # (nx, ny, 2, 2)
    ginv: np.ndarray
    detg: np.ndarray
    sqrtg: np.ndarray
    gamma: np.ndarray    # (nx, ny, 2, 2, 2), Gamma^k_{ij} indexed [k, i, j]
    hvec: np.ndarray     # (nx, ny, 2, 2, m) second fundamental form
    Hvec: np.ndarray     # (nx, ny, m) mean curvature vector
    star_n: np.ndarray   # (nx, ny, C(m,2)) unit tangent 2-vector
    nu: Optional[np.ndarray]    # (nx, ny, 3) unit normal, m = 3 only
    acoef: np.ndarray    # (nx, ny, 2, 2) = sqrt(g) * g^{jk}
    _aux: dict = field(default_factory=dict)

    @property
    def m(self) -> int:
        return self.patch.m

    @property
    def margin(self) -> int:
        return self.patch.margin

    def valid_slice(self, margin: int):
        return self.patch.valid_slice(margin)

    def project_tangent(self, w: np.ndarray) -> np.ndarray:
        coef = np.einsum("xyij,xy...m,xyim->xy...j", self.ginv, w, self.patch.d1)
        return np.einsum("xy...j,xyjm->xy...m", coef, self.patch.d1)

    def project_normal(self, w: np.ndarray) -> np.ndarray:
        return w - self.project_tangent(w)


def compute_geometry(patch: ImmersionPatch) -> GeometryCache:
    d1, d2 = patch.d1, patch.d2
    g = np.einsum("xyim,xyjm->xyij", d1, d1)
    detg = g[..., 0, 0] * g[..., 1, 1] - g[..., 0, 1] * g[..., 1, 0]
    interior = patch.valid_slice(patch.margin)
    bad = detg[interior] < DET_G_FLOOR
    if bad.any():
        raise ImmersionDegenerate(
            f"det(g) < {DET_G_FLOOR} at {int(bad.sum())} interior nodes "
            f"(min {float(np.nanmin(detg[interior])):.3e})"
        )
    ginv = np.empty_like(g)
    ginv[..., 0, 0] = g[..., 1, 1] / detg
    ginv[..., 1, 1] = g[..., 0, 0] / detg
    ginv[..., 0, 1] = -g[..., 0, 1] / detg
    ginv[..., 1, 0] = -g[..., 1, 0] / detg
    sqrtg = np.sqrt(detg)

    # Gamma^k_{ij} = g^{kl} (d2_{ij} . d1_l); exact for exact jets
    gamma = np.einsum("xykl,xyijm,xylm->xykij", ginv, d2, d1)
    hvec = d2 - np.einsum("xykij,xykm->xyijm", gamma, d1)
    Hvec = 0.5 * np.einsum("xyij,xyijm->xym", ginv, hvec)
    star_n = wedge_field(patch.m, 1, 1, d1[:, :, 0, :], d1[:, :, 1, :]) / sqrtg[..., None]
    nu = star_field(3, 2, star_n) if patch.m == 3 else None
    acoef = sqrtg[..., None, None] * ginv
    return GeometryCache(
        patch=patch, g=g, ginv=ginv, detg=detg, sqrtg=sqrtg, gamma=gamma,
        hvec=hvec, Hvec=Hvec, star_n=star_n, nu=nu, acoef=acoef,
    )


# ----------------------------------------------------------------------
# stencil operators (2nd-order centered, margin +2 per pass)
# ----------------------------------------------------------------------


def _cdiff(F: np.ndarray, axis: int, h: float, periodic: bool) -> np.ndarray:
    if periodic:
        return (np.roll(F, -1, axis) - np.roll(F, 1, axis)) / (2.0 * h)
    out = np.full_like(F, np.nan)
    src = np.moveaxis(F, axis, 0)
    dst = np.moveaxis(out, axis, 0)
    dst[1:-1] = (src[2:] - src[:-2]) / (2.0 * h)
    return out


def partials(cache: GeometryCache, F: np.ndarray, margin: int) -> tuple[np.ndarray, int]:
    """Flat partials (d_u F, d_v F) stacked on a new axis 2; margin grows by 2."""
    p = cache.patch
    dF = np.stack(
        [_cdiff(F, 0, p.hx, p.periodic[0]), _cdiff(F, 1, p.hy, p.periodic[1])], axis=2
    )
    return dF, margin + 2


def raise_index(cache: GeometryCache, P: np.ndarray) -> np.ndarray:
    """g^{jk} P_k... -> P^j... for P indexed (nx, ny, k, ...)."""
    return np.einsum("xyjk,xyk...->xyj...", cache.ginv, P)


def _bcast(A: np.ndarray, like: np.ndarray) -> np.ndarray:
    """Append singleton axes to A so it broadcasts against `like`."""
    return A.reshape(A.shape + (1,) * (like.ndim - A.ndim))


def flat_divergence(cache: GeometryCache, T: np.ndarray, margin: int) -> tuple[np.ndarray, int]:
    """d_j T^j for T indexed (nx, ny, j, ...); margin grows by 2."""
    p = cache.patch
    out = _cdiff(T[:, :, 0], 0, p.hx, p.periodic[0]) + _cdiff(
        T[:, :, 1], 1, p.hy, p.periodic[1]
    )
    return out, margin + 2


def covariant_divergence(cache: GeometryCache, T: np.ndarray, margin: int) -> tuple[np.ndarray, int]:
    """nabla_j T^j = |g|^{-1/2} d_j(|g|^{1/2} T^j); trailing value axes pass through."""
    W = _bcast(cache.sqrtg[:, :, None], T) * T
    div, margin = flat_divergence(cache, W, margin)
    return div / _bcast(cache.sqrtg, div), margin


def _shift2(F: np.ndarray, d: tuple[int, int], periodic: tuple[bool, bool]) -> np.ndarray:
    """F sampled at grid index + d; NaN where the shift leaves the grid."""
    G = F
    for axis in (0, 1):
        k = d[axis]
        if k == 0:
            continue
        if periodic[axis]:
            G = np.roll(G, -k, axis)
        else:
            H = np.full_like(G, np.nan)
            src = np.moveaxis(G, axis, 0)
            dst = np.moveaxis(H, axis, 0)
            if k > 0:
                dst[:-k] = src[k:]
            else:
                dst[-k:] = src[:k]
            G = H
    return G


def laplace_beltrami(cache: GeometryCache, F: np.ndarray, margin: int) -> tuple[np.ndarray, int]:
    """|g|^{-1/2} d_j(|g|^{1/2} g^{jk} d_k F) as a compact 9-point scheme.

    Every term is a half-node averaged flux: the axis terms along the grid
    axes, and the cross term along the two grid diagonals, using the exact
    rewriting  d_u(a d_v F) + d_v(a d_u F)
    = (2 hx hy)^{-1} [d_s(a d_s F) - d_t(a d_t F)]  with s, t the diagonal
    directions.  The Poisson solver assembles this same stencil, so
    solve-then-apply round trips are consistent, and the assembled matrix
    is symmetric.
    """
    p = cache.patch
    a = cache.acoef
    out = np.zeros_like(F)

    for axis, h in ((0, p.hx), (1, p.hy)):
        aa = _bcast(a[..., axis, axis], F)
        if p.periodic[axis]:
            ap = 0.5 * (aa + np.roll(aa, -1, axis))
            am = 0.5 * (aa + np.roll(aa, 1, axis))
            out += (
                ap * (np.roll(F, -1, axis) - F) - am * (F - np.roll(F, 1, axis))
            ) / (h * h)
        else:
            term = np.full_like(F, np.nan)
            Fm = np.moveaxis(F, axis, 0)
            am_ = np.moveaxis(aa, axis, 0)
            tm = np.moveaxis(term, axis, 0)
            ap = 0.5 * (am_[1:-1] + am_[2:])
            am2 = 0.5 * (am_[1:-1] + am_[:-2])
            tm[1:-1] = (ap * (Fm[2:] - Fm[1:-1]) - am2 * (Fm[1:-1] - Fm[:-2])) / (h * h)
            out = out + term

    a12 = a[..., 0, 1]
    if np.abs(a12).max() > 0:
        b = _bcast(a12, F)
        c = 1.0 / (2.0 * p.hx * p.hy)
        for dvec, sgn in (((1, 1), 1.0), ((1, -1), -1.0)):
            mvec = (-dvec[0], -dvec[1])
            ap = 0.5 * (b + _shift2(b, dvec, p.periodic))
            am = 0.5 * (b + _shift2(b, mvec, p.periodic))
            flux = ap * (_shift2(F, dvec, p.periodic) - F) - am * (
                F - _shift2(F, mvec, p.periodic)
            )
            out = out + sgn * c * flux

    return out / _bcast(cache.sqrtg, out), margin + 2


def normal_laplacian(cache: GeometryCache, F: np.ndarray, margin: int) -> tuple[np.ndarray, int]:
    """Laplacian in the normal bundle: pi_n[|g|^{-1/2} d_j(|g|^{1/2} g^{jk} N_k)],
    N_k = pi_n d_k F.  Two stencil passes: margin grows by 4."""
    if F.shape[-1] != cache.m:
        raise ValueError("normal_laplacian expects an ambient-vector field")
    dF, margin = partials(cache, F, margin)
    N = cache.project_normal(dF)
    G = np.einsum("xyjk,xyk...->xyj...", cache.acoef, N)
    div, margin = flat_divergence(cache, G, margin)
    return cache.project_normal(div / _bcast(cache.sqrtg, div)), margin


# ----------------------------------------------------------------------
# quadrature and norms
# ----------------------------------------------------------------------


def _axis_weights(n: int, h: float, periodic: bool, margin: int) -> np.ndarray:
    w = np.zeros(n)
    if periodic:
        w[:] = h
        return w
    lo, hi = margin, n - 1 - margin
    if hi - lo < 1:
        raise MarginError(f"axis of {n} nodes too narrow for margin {margin}")
    w[lo : hi + 1] = h
    w[lo] = w[hi] = 0.5 * h
    return w


def surface_integral(cache: GeometryCache, f, margin: Optional[int] = None) -> float:
    """Integral of scalar f dvol over the valid region (trapezoid / wrap)."""
    p = cache.patch
    margin = p.margin if margin is None else margin
    integrand = cache.sqrtg if f is None else np.asarray(f) * cache.sqrtg
    wu = _axis_weights(p.nx, p.hx, p.periodic[0], margin)
    wv = _axis_weights(p.ny, p.hy, p.periodic[1], margin)
    # zero outside the valid region so boundary NaN fill cannot leak in;
    # NaN inside the valid region propagates (that is a margin bug)
    vals = np.where((wu[:, None] * wv[None, :]) > 0, integrand, 0.0)
    return float(np.einsum("i,j,ij->", wu, wv, vals))


def willmore_energy(cache: GeometryCache, margin: Optional[int] = None) -> float:
    H2 = np.einsum("xym,xym->xy", cache.Hvec, cache.Hvec)
    return surface_integral(cache, H2, margin)


def sup_norm(cache: GeometryCache, F: np.ndarray, margin: int) -> float:
    """Max pointwise Euclidean norm over the valid region (trailing axes contracted)."""
    sl = cache.valid_slice(margin)
    vals = F[sl]
    if vals.ndim > 2:
        vals = np.linalg.norm(vals.reshape(vals.shape[:2] + (-1,)), axis=-1)
    else:
        vals = np.abs(vals)
    return float(np.max(vals))


def l2_norm(cache: GeometryCache, F: np.ndarray, margin: int) -> float:
    """dvol-weighted L2 norm over the valid region."""
    sq = np.linalg.norm(np.asarray(F).reshape(F.shape[:2] + (-1,)), axis=-1) ** 2
    return math.sqrt(max(surface_integral(cache, sq, margin), 0.0))
