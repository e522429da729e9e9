"""Symmetry currents of the bending energy and their conservation defects.

The fourth-order operator W and the stress field T are built pointwise from
a geometry cache.  Translation, rotation, and dilation invariance of the
energy make three combinations of T divergence-free up to -W source terms;
the residuals of those three laws are the primary verification surface of
this package.

A finite-difference variation check pairs the operator against compactly
supported normal perturbations, tying the pointwise fields back to the
energy they came from.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import immersion_geometry as ig
from .exterior_algebra import grade_dim, wedge_field


def willmore_operator(cache: ig.GeometryCache, margin: int | None = None):
    """W = normal Laplacian of H + (h^i_j . H) h^j_i - 2|H|^2 H.

    The normal Laplacian of H is evaluated through an exact rewriting that
    keeps all finite differencing on smooth cached fields.  For m = 3 the
    normal bundle is a flat line bundle, so it reduces to the scalar
    Laplacian of H.nu times nu; in higher codimension the identity
    pi_n(Delta_g H) + (H.h^jk) h_jk is used instead.  Both agree with the
    two-pass projector form up to discretization error but carry a smaller
    truncation constant.  Returns (field, margin + 4).
    """
    margin = cache.patch.margin if margin is None else margin
    cache.patch.valid_slice(margin + 4)  # fail early on too-narrow grids
    m_out = margin + 4
    if cache.m == 3:
        h_sc = np.einsum("xym,xym->xy", cache.Hvec, cache.nu)
        lap_sc, _ = ig.laplace_beltrami(cache, h_sc, margin)
        lap_perp = lap_sc[..., None] * cache.nu
        h_up = np.einsum("xyik,xykjm->xyijm", cache.ginv, cache.hvec)
        hH = np.einsum("xyijm,xym->xyij", h_up, cache.Hvec)
        alg = np.einsum("xyij,xyjim->xym", hH, h_up)
    else:
        lap, _ = ig.laplace_beltrami(cache, cache.Hvec, margin)
        lap_perp = cache.project_normal(lap)
        # pi_n(Delta_g H) differs from the connection Laplacian by
        # (H.h^jk) h_jk, which merges with the (will0) algebra below
        h_up2 = np.einsum("xyik,xyjl,xyklm->xyijm", cache.ginv, cache.ginv, cache.hvec)
        Hh = np.einsum("xyijm,xym->xyij", h_up2, cache.Hvec)
        alg = 2.0 * np.einsum("xyij,xyijm->xym", Hh, cache.hvec)
    H2 = np.einsum("xym,xym->xy", cache.Hvec, cache.Hvec)
    W = lap_perp + alg - 2.0 * H2[..., None] * cache.Hvec
    return W, m_out


def stress_tensor(cache: ig.GeometryCache, margin: int | None = None):
    """T^j = grad^j H - 2 pi_n grad^j H + |H|^2 grad^j Phi; margin grows by 2."""
    margin = cache.patch.margin if margin is None else margin
    cache.patch.valid_slice(margin + 2)
    dH, m_out = ig.partials(cache, cache.Hvec, margin)
    gradH = ig.raise_index(cache, dH)
    gradPhi = ig.raise_index(cache, cache.patch.d1)
    H2 = np.einsum("xym,xym->xy", cache.Hvec, cache.Hvec)
    T = gradH - 2.0 * cache.project_normal(gradH) + H2[..., None, None] * gradPhi
    return T, m_out


def tangential_defect(cache: ig.GeometryCache, W: np.ndarray, margin: int) -> float:
    """sup |pi_T W| / (1 + sup|W|); the operator is normal-valued by construction."""
    tang = cache.project_tangent(W)
    return ig.sup_norm(cache, tang, margin) / (1.0 + ig.sup_norm(cache, W, margin))


@dataclass
class CurrentSet:
    """Pointwise currents and conservation-law residuals on a shared margin."""

    W: np.ndarray            # (nx, ny, m)
    T: np.ndarray            # (nx, ny, 2, m)
    rot_current: np.ndarray  # (nx, ny, 2, C(m,2))
    dil_current: np.ndarray  # (nx, ny, 2)
    res_trans: np.ndarray    # (nx, ny, m)
    res_rot: np.ndarray      # (nx, ny, C(m,2))
    res_dil: np.ndarray      # (nx, ny)
    margin: int
    margin_W: int
    margin_T: int
    wedge_identity_gap: float = np.nan
    _norms: dict = field(default_factory=dict)

    def summary(self) -> dict:
        return dict(sorted(self._norms.items()))


def conservation_residuals(
    cache: ig.GeometryCache,
    W: np.ndarray | None = None,
    T: np.ndarray | None = None,
    margin_W: int | None = None,
    margin_T: int | None = None,
) -> CurrentSet:
    """Residuals of the three conservation laws.

    res_trans = div T + W;  res_rot = div(T^j ^ Phi + H ^ grad^j Phi) + W ^ Phi;
    res_dil = div(T^j . Phi) + W . Phi.  W and T are recomputed from the cache
    when not supplied (problem modules pass their own W).
    """
    if W is None:
        W, margin_W = willmore_operator(cache)
    elif margin_W is None:
        raise ValueError("margin_W required when W is supplied")
    if T is None:
        T, margin_T = stress_tensor(cache)
    elif margin_T is None:
        raise ValueError("margin_T required when T is supplied")

    m = cache.m
    phi = cache.patch.phi
    gradPhi = ig.raise_index(cache, cache.patch.d1)

    divT, m_div = ig.covariant_divergence(cache, T, margin_T)
    margin = max(m_div, margin_W)
    res_trans = divT + W

    d2 = grade_dim(m, 2)
    rot = np.empty(T.shape[:2] + (2, d2))
    for j in range(2):
        rot[:, :, j] = wedge_field(m, 1, 1, T[:, :, j], phi) + wedge_field(
            m, 1, 1, cache.Hvec, gradPhi[:, :, j]
        )
    div_rot, _ = ig.covariant_divergence(cache, rot, margin_T)
    res_rot = div_rot + wedge_field(m, 1, 1, W, phi)

    dil = np.einsum("xyjm,xym->xyj", T, phi)
    div_dil, _ = ig.covariant_divergence(cache, dil, margin_T)
    res_dil = div_dil + np.einsum("xym,xym->xy", W, phi)

    gap = res_rot - wedge_field(m, 1, 1, res_trans, phi)
    cs = CurrentSet(
        W=W, T=T, rot_current=rot, dil_current=dil, res_trans=res_trans,
        res_rot=res_rot, res_dil=res_dil, margin=margin,
        margin_W=margin_W, margin_T=margin_T,
        wedge_identity_gap=ig.sup_norm(cache, gap, margin),
    )
    for name, res in (
        ("res_translation", res_trans),
        ("res_rotation", res_rot),
        ("res_dilation", res_dil),
    ):
        cs._norms[f"{name}_sup"] = ig.sup_norm(cache, res, margin)
        cs._norms[f"{name}_l2"] = ig.l2_norm(cache, np.nan_to_num(res), margin)
    cs._norms["wedge_identity_gap"] = cs.wedge_identity_gap
    cs._norms["w_sup"] = ig.sup_norm(cache, W, margin)
    return cs


def _perturbation_jets(patch: ig.ImmersionPatch, B: np.ndarray):
    d1 = np.stack(
        [
            ig._fd_d1(B, 0, patch.hx, patch.periodic[0]),
            ig._fd_d1(B, 1, patch.hy, patch.periodic[1]),
        ],
        axis=2,
    )
    d2 = np.empty(B.shape[:2] + (2, 2) + B.shape[2:])
    d2[:, :, 0, 0] = ig._fd_d2(B, 0, patch.hx, patch.periodic[0])
    d2[:, :, 1, 1] = ig._fd_d2(B, 1, patch.hy, patch.periodic[1])
    mixed = ig._fd_d1(
        ig._fd_d1(B, 0, patch.hx, patch.periodic[0]), 1, patch.hy, patch.periodic[1]
    )
    d2[:, :, 0, 1] = mixed
    d2[:, :, 1, 0] = mixed
    return d1, d2


def energy_variation_check(
    patch: ig.ImmersionPatch,
    bump: np.ndarray,
    direction: np.ndarray | None = None,
    t_steps=(1e-2, 1e-3, 1e-4),
):
    """Compare d/dt of the energy under Phi + t*bump*direction with the
    pairing integral of the perturbation against W.

    The bump must vanish on a 4-layer collar inside the patch margin so the
    boundary divergence term of the first variation drops.  Derivative taken
    with a symmetric 5-point stencil per step; with two or more steps the two
    smallest are Richardson-combined under the stencil's t^4 error model.
    Returns (fd_derivative, pairing).
    """
    cache = ig.compute_geometry(patch)
    W, m_W = willmore_operator(cache)

    bump = np.asarray(bump, dtype=float)
    if bump.shape != patch.phi.shape[:2]:
        raise ValueError("bump must be a nodal scalar field")
    support = np.zeros_like(bump, dtype=bool)
    support[patch.valid_slice(m_W)] = True
    if np.abs(np.where(support, 0.0, bump)).max() > 0:
        raise ValueError("bump support touches the boundary collar")

    if direction is None:
        if cache.nu is None:
            raise ValueError("explicit direction field required for m != 3")
        direction = cache.nu
    B = bump[..., None] * direction
    B_d1, B_d2 = _perturbation_jets(patch, B)

    def energy_at(c: float) -> float:
        p = ig.ImmersionPatch(
            m=patch.m, u0=patch.u0, v0=patch.v0, hx=patch.hx, hy=patch.hy,
            periodic=patch.periodic, phi=patch.phi + c * B, d1=patch.d1 + c * B_d1,
            d2=patch.d2 + c * B_d2, margin=patch.margin, jet_source=patch.jet_source,
            name=patch.name,
        )
        return ig.willmore_energy(ig.compute_geometry(p), patch.margin)

    steps = sorted(t_steps, reverse=True)
    if not steps or steps[-1] <= 0:
        raise ValueError("t steps must be positive")
    fds = [
        (-energy_at(2 * t) + 8 * energy_at(t) - 8 * energy_at(-t) + energy_at(-2 * t))
        / (12 * t)
        for t in steps
    ]
    fd = fds[-1]
    if len(steps) >= 2:
        t1, t2 = steps[-2], steps[-1]
        fd = (t1**4 * fds[-1] - t2**4 * fds[-2]) / (t1**4 - t2**4)

    pairing = ig.surface_integral(
        cache, np.einsum("xym,xym->xy", np.nan_to_num(B), np.nan_to_num(W)), m_W
    )
    return fd, pairing


def invariance_check(patch: ig.ImmersionPatch, motion: tuple):
    """Energy before and after an ambient motion of the patch."""
    e0 = ig.willmore_energy(ig.compute_geometry(patch))
    e1 = ig.willmore_energy(ig.compute_geometry(ig.transform_patch(patch, motion)))
    return e0, e1
