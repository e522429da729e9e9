"""Model problems wired through the potential chain.

Four problem families share one skeleton: an Euler-Lagrange field for the
bending energy (possibly with forcing), closed-form gradient overrides for
the potentials V, X, Y, and the coupled-system residual report.  The plain
problem uses zero overrides; the conformally constrained one sources the
forcing from a traceless transverse multiplier tensor q; the vesicle
(area/volume/total-curvature multiplier) problem works in codimension 1
with cross-product forms mapped into the 2-vector chain through the Hodge
star; the biharmonic problem keys everything off Y = Phi.H.

The module also provides closed-surface quadrature for the balancing
condition among vesicle multipliers, and an explicit-Euler descent stepper
whose only job is to certify the sign of the operator: energy must fall
along -W on non-critical surfaces and stay put on critical ones.
"""

from __future__ import annotations

import dataclasses
import warnings
from dataclasses import dataclass

import numpy as np

from . import immersion_geometry as ig
from . import noether_currents as nc
from . import potential_solver as ps
from .exterior_algebra import grade_dim, star_field, wedge_field

PROBLEM_KINDS = ("willmore", "conformally_constrained", "helfrich", "chen")

# q-tensor admissibility: algebraic failures are hard errors, the
# differential one is a warning carrying the measured defect
Q_SYMMETRY_TOL = 1e-8
Q_TRACE_TOL = 1e-8
Q_TRANSVERSE_TOL = 1e-6

# a one-axis-periodic chart counts as closed when the metric area density
# at both open ends has collapsed to this fraction of its peak (polar caps)
CAP_EDGE_FRACTION = 1e-3

FLOW_DET_FLOOR = 1e-10


class TransversalityWarning(UserWarning):
    """Multiplier tensor q has a divergence above tolerance."""


@dataclass
class ProblemSpec:
    """Which problem to pose, with its parameters.

    q holds per-node contravariant components q^{ij} for the constrained
    case; alpha, beta_mult, gamma are the area, volume, and total-curvature
    multipliers; tau and max_steps parametrize the descent stepper.
    """

    kind: str
    q: np.ndarray | None = None
    alpha: float = 0.0
    beta_mult: float = 0.0
    gamma: float = 0.0
    tau: float = 1e-4
    max_steps: int = 50

    def __post_init__(self):
        if self.kind not in PROBLEM_KINDS:
            raise ValueError(
                f"unknown problem kind {self.kind!r}; expected one of {PROBLEM_KINDS}"
            )
        if self.kind == "conformally_constrained" and self.q is None:
            raise ValueError("conformally_constrained needs a q tensor")
        if self.q is not None:
            self.q = np.asarray(self.q, dtype=float)
        for name in ("alpha", "beta_mult", "gamma", "tau"):
            val = float(getattr(self, name))
            if not np.isfinite(val):
                raise ValueError(f"{name} must be finite")
            setattr(self, name, val)
        if self.tau <= 0:
            raise ValueError("tau must be positive")
        self.max_steps = int(self.max_steps)
        if self.max_steps < 1:
            raise ValueError("max_steps must be at least 1")


@dataclass(frozen=True)
class ClosedSurfaceIntegrals:
    """Area, total curvature, algebraic volume, and the multiplier balance."""

    A: float
    M: float
    Vol: float
    balancing_residual: float


def validate_q(cache: ig.GeometryCache, q: np.ndarray, margin: int | None = None) -> float:
    """Check a multiplier tensor: symmetric, traceless, transverse.

    Symmetry and tracelessness are algebraic and fail hard.  Transversality
    nabla_j q^{ij} = 0 is differential: the discrete divergence (including
    the Christoffel term) is measured and reported through a
    TransversalityWarning when it exceeds tolerance.  Returns the defect.
    """
    p = cache.patch
    q = np.asarray(q, dtype=float)
    if q.shape != (p.nx, p.ny, 2, 2):
        raise ValueError("q must be shaped (nx, ny, 2, 2), contravariant components")
    margin = p.margin if margin is None else margin
    sl = cache.valid_slice(margin)
    scale = 1.0 + float(np.abs(q[sl]).max())
    sym = float(np.abs(q[..., 0, 1] - q[..., 1, 0])[sl].max())
    if sym > Q_SYMMETRY_TOL * scale:
        raise ValueError(f"q not symmetric (defect {sym:.3e})")
    tr = np.einsum("xyij,xyij->xy", cache.g, q)
    trace = float(np.abs(tr[sl]).max())
    if trace > Q_TRACE_TOL * scale * (1.0 + float(np.abs(cache.g[sl]).max())):
        raise ValueError(f"q not traceless (defect {trace:.3e})")

    # nabla_j q^{ij} = |g|^{-1/2} d_j(|g|^{1/2} q^{ij}) + Gamma^i_{jk} q^{jk}
    flux = cache.sqrtg[..., None, None] * q
    dflux, mg = ig.partials(cache, flux, margin)
    div = np.einsum("xyjij->xyi", dflux) / cache.sqrtg[..., None]
    div = div + np.einsum("xyijk,xyjk->xyi", cache.gamma, q)
    defect = ig.sup_norm(cache, div, mg)
    if defect > Q_TRANSVERSE_TOL:
        warnings.warn(
            f"q transversality defect {defect:.3e} exceeds {Q_TRANSVERSE_TOL:.0e}",
            TransversalityWarning,
            stacklevel=2,
        )
    return defect


def _zero_overrides(cache: ig.GeometryCache) -> dict:
    p = cache.patch
    return {
        "grad_V": np.zeros((p.nx, p.ny, 2, cache.m)),
        "grad_X": np.zeros((p.nx, p.ny, 2, grade_dim(cache.m, 2))),
        "Y": np.zeros((p.nx, p.ny)),
        "margin": p.margin,
    }


def _residual_report(cache: ig.GeometryCache, pot: ps.PotentialSet, margin) -> dict:
    sysr = ps.system_residuals(cache, pot, margin)
    gradr = ps.gradient_identity_residuals(cache, pot, margin)
    rep = {k: v for k, v in sysr.items() if k != "margin"}
    rep.update({k: v for k, v in gradr.items() if k != "margin"})
    rep["margin_system"] = sysr["margin"]
    rep["margin_identities"] = gradr["margin"]
    for k, v in pot.summary().items():
        rep[k] = v
    return rep


def willmore_problem(
    cache: ig.GeometryCache, margin: int | None = None, method: str = "auto"
):
    """Plain criticality: zero potential overrides, operator as the report.

    Valid in the sense of the underlying derivation wherever the operator
    itself vanishes; on non-critical surfaces the recovery compat entries
    say so instead of the residuals pretending to converge.
    """
    W, mW = nc.willmore_operator(cache)
    pot = ps.build_potential_set(
        cache, W=W, margin_W=mW, overrides=_zero_overrides(cache), method=method
    )
    rep = _residual_report(cache, pot, margin)
    rep["w_sup"] = ig.sup_norm(cache, W, mW)
    rep["margin_W"] = mW
    return W, pot, rep


def constrained_problem(
    cache: ig.GeometryCache,
    q: np.ndarray,
    margin: int | None = None,
    method: str = "auto",
):
    """Criticality against a traceless transverse multiplier tensor.

    The returned field is the operator minus the forcing (h0)_{ij} q^{ij},
    h0 the trace-free part of the second fundamental form.  Because q is
    traceless and transverse the forcing is itself a divergence, so the
    V-stage override grad^j V = -q^{ij} d_i Phi matches it exactly; X and Y
    collapse to zero by the symmetry and trace identities, whose pointwise
    defects are reported.
    """
    p = cache.patch
    q = np.asarray(q, dtype=float)
    defect = validate_q(cache, q, margin=p.margin)

    W0, mW = nc.willmore_operator(cache)
    if q.any():
        h0 = cache.hvec - cache.g[..., None] * cache.Hvec[:, :, None, None, :]
        forcing = np.einsum("xyijm,xyij->xym", h0, q)
        grad_V = -np.einsum("xyij,xyim->xyjm", q, p.d1)
    else:
        # exact zeros, not contractions against a zero q: subtracting a
        # computed -0.0 would flip sign bits and break the guarantee that
        # a vanishing multiplier reproduces the plain problem bit for bit
        forcing = np.zeros_like(W0)
        grad_V = np.zeros((p.nx, p.ny, 2, cache.m))
    W = W0 - forcing
    ov = _zero_overrides(cache)
    ov["grad_V"] = grad_V
    pot = ps.build_potential_set(cache, W=W, margin_W=mW, overrides=ov, method=method)

    rep = _residual_report(cache, pot, margin)
    rep["w_sup"] = ig.sup_norm(cache, W, mW)
    rep["margin_W"] = mW
    rep["forcing_sup"] = ig.sup_norm(cache, forcing, p.margin)
    rep["q_transverse_defect"] = defect
    # trace and symmetry of q make these vanish identically
    rep["q_trace_pair_sup"] = ig.sup_norm(
        cache, np.einsum("xyjm,xyjm->xy", grad_V, p.d1), p.margin
    )
    rep["q_wedge_pair_sup"] = ig.sup_norm(
        cache,
        sum(wedge_field(cache.m, 1, 1, grad_V[:, :, j], p.d1[:, :, j]) for j in (0, 1)),
        p.margin,
    )
    return W, pot, rep


def helfrich_problem(
    cache: ig.GeometryCache,
    alpha: float,
    beta_mult: float,
    gamma: float,
    margin: int | None = None,
    method: str = "auto",
):
    """Vesicle multipliers in codimension 1.

    Forcing 2 alpha H + beta nu - gamma (h^i_j h^j_i / 2 - 2 H^2) nu; the
    returned field is operator minus forcing.  Overrides: grad V assembled
    from the three multiplier currents, grad X from the cross-product form
    (mapped to the 2-vector chain by the Hodge star), Y from a window
    Poisson solve of -2 alpha - gamma H + beta Phi.nu.  The two algebraic
    properties of grad X (rotating it with nu scales the tangent frame by
    beta |Phi|^2 / 4; pairing it against d Phi reproduces beta |Phi|^2 nu / 2)
    are checked pointwise and reported.

    The X override satisfies its divergence equation and the algebraic
    properties above, but it is not curl-free, so the R-equation residual
    retains that curl (it levels off near 2 beta on the unit sphere)
    instead of shrinking with the grid; the S- and position-equation
    residuals and both gradient identities decay at second order.
    """
    if cache.m != 3:
        raise ValueError("vesicle multipliers need a codimension-1 chart (m = 3)")
    p = cache.patch
    alpha, beta_mult, gamma = float(alpha), float(beta_mult), float(gamma)
    nu = cache.nu
    sg = cache.sqrtg
    Hs = np.einsum("xym,xym->xy", cache.Hvec, nu)
    h_sc = np.einsum("xyijm,xym->xyij", cache.hvec, nu)
    h_mix = np.einsum("xyik,xykj->xyij", cache.ginv, h_sc)
    tr_h2 = np.einsum("xyij,xyji->xy", h_mix, h_mix)

    forcing = 2.0 * alpha * cache.Hvec + (
        beta_mult - gamma * (0.5 * tr_h2 - 2.0 * Hs**2)
    )[..., None] * nu
    W0, mW = nc.willmore_operator(cache)
    el = W0 - forcing

    gradPhi = ig.raise_index(cache, p.d1)
    cross_pd = np.cross(p.phi[:, :, None, :], p.d1, axis=-1)
    bterm = np.stack([-cross_pd[:, :, 1], cross_pd[:, :, 0]], axis=2) / sg[..., None, None]
    h_up = np.einsum("xyik,xyjl,xykl->xyij", cache.ginv, cache.ginv, h_sc)
    gterm = np.einsum(
        "xyij,xyim->xyjm", h_up - 2.0 * Hs[..., None, None] * cache.ginv, p.d1
    )
    grad_V = -alpha * gradPhi + 0.5 * beta_mult * bterm + 0.5 * gamma * gterm

    phi2 = np.einsum("xym,xym->xy", p.phi, p.phi)
    gX_vec = (0.25 * beta_mult / sg[..., None, None]) * np.stack(
        [-phi2[..., None] * p.d1[:, :, 1], phi2[..., None] * p.d1[:, :, 0]], axis=2
    )
    grad_X = np.stack([star_field(3, 1, gX_vec[:, :, j]) for j in (0, 1)], axis=2)

    rhs_Y = -2.0 * alpha - gamma * Hs + beta_mult * np.einsum("xym,xym->xy", p.phi, nu)
    solY = ps.solve_weighted_poisson(cache, rhs_Y, p.margin, method)

    ov = {"grad_V": grad_V, "grad_X": grad_X, "Y": solY.u, "margin": solY.margin}
    pot = ps.build_potential_set(cache, W=el, margin_W=mW, overrides=ov, method=method)

    rep = _residual_report(cache, pot, margin)
    rep["el_sup"] = ig.sup_norm(cache, el, mW)
    rep["forcing_sup"] = ig.sup_norm(cache, forcing, p.margin)
    rep["margin_W"] = mW
    rep["solve_res_Y"] = solY.residual
    rot = np.cross(nu[:, :, None, :], gX_vec, axis=-1) - (
        0.25 * beta_mult * phi2[..., None, None]
    ) * gradPhi
    pair = sum(np.cross(gX_vec[:, :, j], p.d1[:, :, j]) for j in (0, 1)) - (
        0.5 * beta_mult * phi2[..., None]
    ) * nu
    rep["xprop_rot_sup"] = ig.sup_norm(cache, rot, p.margin)
    rep["xprop_pair_sup"] = ig.sup_norm(cache, pair, p.margin)
    return el, pot, rep


def chen_problem(
    cache: ig.GeometryCache, margin: int | None = None, method: str = "auto"
):
    """Biharmonicity of the mean curvature vector.

    Returns the biharmonic defect lap_g H, the algebraic operator value
    2 (H.h^{jk}) h_{jk} - 2 |H|^2 H it collapses to when the defect
    vanishes, the potential set for the overrides
    grad^j V = |H|^2 grad^j Phi - 2 (H.h^{jk}) d_k Phi, X = 0, Y = Phi.H,
    and the residual report.  The report also carries the product-rule
    identity lap_g(Phi.H) = 2|H|^2 + 2 grad^j Phi . d_j H + Phi . lap_g H,
    which holds on every immersion and cross-checks the stencils.
    """
    p = cache.patch
    biharm, mB = ig.laplace_beltrami(cache, cache.Hvec, p.margin)

    h_up2 = np.einsum("xyik,xyjl,xyklm->xyijm", cache.ginv, cache.ginv, cache.hvec)
    Hh = np.einsum("xyjkm,xym->xyjk", h_up2, cache.Hvec)
    H2 = np.einsum("xym,xym->xy", cache.Hvec, cache.Hvec)
    W = 2.0 * np.einsum("xyjk,xyjkm->xym", Hh, cache.hvec) - 2.0 * H2[..., None] * cache.Hvec

    gradPhi = ig.raise_index(cache, p.d1)
    grad_V = H2[..., None, None] * gradPhi - 2.0 * np.einsum(
        "xyjk,xykm->xyjm", Hh, p.d1
    )
    Y = np.einsum("xym,xym->xy", p.phi, cache.Hvec)
    ov = _zero_overrides(cache)
    ov["grad_V"] = grad_V
    ov["Y"] = Y
    pot = ps.build_potential_set(
        cache, W=W, margin_W=p.margin, overrides=ov, method=method
    )

    lapY, mU = ig.laplace_beltrami(cache, Y, p.margin)
    dH, mdH = ig.partials(cache, cache.Hvec, p.margin)
    univ = (
        lapY
        - 2.0 * H2
        - 2.0 * np.einsum("xyjm,xyjm->xy", gradPhi, dH)
        - np.einsum("xym,xym->xy", p.phi, biharm)
    )
    m_univ = max(mU, mdH, mB, margin or 0)

    rep = _residual_report(cache, pot, margin)
    norms = np.linalg.norm(biharm, axis=-1)
    sl = cache.valid_slice(max(mB, margin or 0))
    rep["biharm_sup"] = float(norms[sl].max())
    rep["biharm_min"] = float(norms[sl].min())
    rep["universal_sup"] = ig.sup_norm(cache, univ, m_univ)
    rep["w_sup"] = ig.sup_norm(cache, W, p.margin)
    rep["margin_biharm"] = mB
    return biharm, W, pot, rep


def run_problem(
    cache: ig.GeometryCache,
    spec: ProblemSpec,
    margin: int | None = None,
    method: str = "auto",
):
    """Dispatch a ProblemSpec to its solver; returns that problem's tuple."""
    if spec.kind == "willmore":
        return willmore_problem(cache, margin, method)
    if spec.kind == "conformally_constrained":
        return constrained_problem(cache, spec.q, margin, method)
    if spec.kind == "helfrich":
        return helfrich_problem(
            cache, spec.alpha, spec.beta_mult, spec.gamma, margin, method
        )
    return chen_problem(cache, margin, method)


# ----------------------------------------------------------------------
# closed-surface quadrature
# ----------------------------------------------------------------------


def _simpson_weights(n: int, h: float) -> np.ndarray:
    """Composite Simpson weights; even node counts end on a 3/8 block."""
    w = np.zeros(n)
    if n % 2 == 1:
        w[0] = w[-1] = 1.0
        w[1:-1:2] = 4.0
        w[2:-2:2] = 2.0
        return w * (h / 3.0)
    m = n - 3
    w[:m] = _simpson_weights(m, h)
    w[m - 1 :] += np.array([1.0, 3.0, 3.0, 1.0]) * (3.0 * h / 8.0)
    return w


def _closed_weights(cache: ig.GeometryCache) -> tuple[np.ndarray, np.ndarray]:
    """Per-axis quadrature weights for a chart covering a closed surface.

    Fully periodic charts integrate with the wrap rule (spectrally accurate
    there).  A chart periodic in one direction qualifies only when the area
    density at both open ends has collapsed below CAP_EDGE_FRACTION of its
    peak, i.e. the missing caps are quadrature-sized; the open axis then
    uses Simpson weights.  Anything else is a genuine boundary.
    """
    p = cache.patch
    if p.periodic[0] and p.periodic[1]:
        return np.full(p.nx, p.hx), np.full(p.ny, p.hy)
    if p.periodic[0] != p.periodic[1]:
        open_axis = 0 if not p.periodic[0] else 1
        sg = cache.sqrtg
        ends = (sg.take(0, axis=open_axis), sg.take(-1, axis=open_axis))
        ratio = max(float(e.max()) for e in ends) / float(sg.max())
        if ratio <= CAP_EDGE_FRACTION:
            wu = np.full(p.nx, p.hx) if p.periodic[0] else _simpson_weights(p.nx, p.hx)
            wv = np.full(p.ny, p.hy) if p.periodic[1] else _simpson_weights(p.ny, p.hy)
            return wu, wv
    raise ValueError("balancing requires closed surface")


def closed_quadrature(cache: ig.GeometryCache, f=None) -> float:
    """Integral of f dvol with the closed-surface weights (f = None: area)."""
    wu, wv = _closed_weights(cache)
    integrand = cache.sqrtg if f is None else np.asarray(f) * cache.sqrtg
    return float(np.einsum("i,j,ij->", wu, wv, integrand))


def closed_surface_integrals(
    cache: ig.GeometryCache, alpha: float, beta_mult: float, gamma: float
) -> ClosedSurfaceIntegrals:
    """Area, total curvature, algebraic volume, and the multiplier balance.

    Total curvature integrates the scalar H = H.nu and the volume Phi.nu,
    both with the chart-oriented unit normal, so the codimension must be 1.
    The balance 2 alpha A + gamma M - beta Vol is the surface integral of
    the negated Y-equation source; a truncated polar chart omits only its
    caps, whose area scales with the square of the truncation half-angle
    and sits below the quadrature error at the default truncation.
    """
    if cache.m != 3:
        raise ValueError("volume and total curvature need a codimension-1 chart (m = 3)")
    A = closed_quadrature(cache, None)
    if not A > 0:
        raise ig.ImmersionDegenerate("closed-surface area must be positive")
    Hs = np.einsum("xym,xym->xy", cache.Hvec, cache.nu)
    M = closed_quadrature(cache, Hs)
    Vol = closed_quadrature(cache, np.einsum("xym,xym->xy", cache.patch.phi, cache.nu))
    residual = 2.0 * float(alpha) * A + float(gamma) * M - float(beta_mult) * Vol
    return ClosedSurfaceIntegrals(A=A, M=M, Vol=Vol, balancing_residual=residual)


# ----------------------------------------------------------------------
# descent stepper
# ----------------------------------------------------------------------


def willmore_flow_step(patch: ig.ImmersionPatch, tau: float, steps: int):
    """Explicit Euler descent Phi <- Phi - tau W, boundary collar clamped.

    Each step moves the positions by -tau W and advances the stored jets
    with finite differences of the same step field (d1 -= tau dW,
    d2 -= tau d2W), so the jets track the deformation instead of being
    re-derived from the displaced positions.  That keeps critical points
    numerically fixed: where W vanishes to jet accuracy nothing moves, and
    no re-differencing noise is injected.  Updates are applied on the
    window that keeps all three fields valid (operator margin plus four
    rows); the collar outside it is clamped, so a non-periodic axis needs
    at least 2*(margin + 8) + 3 nodes.

    Rows of the returned trace are (step, energy, sup_W, det_g_min), one
    per step plus a final row for the end state; energies integrate over
    the fixed update window.  Explicit Euler on a fourth-order operator is
    conditionally stable, roughly tau < h_min^4 / 16 on the physical grid
    spacing; nothing here enforces that.  Metric collapse below
    FLOW_DET_FLOOR or non-finite data aborts with the step index.
    Returns (final patch, trace array).
    """
    if not tau > 0:
        raise ValueError("tau must be positive")
    steps = int(steps)
    if steps < 1:
        raise ValueError("steps must be at least 1")
    cur = patch
    rows = []
    for k in range(steps + 1):
        if not (
            np.isfinite(cur.phi).all()
            and np.isfinite(cur.d1).all()
            and np.isfinite(cur.d2).all()
        ):
            raise ig.ImmersionDegenerate(
                f"flow aborted at step {k}: non-finite position data"
            )
        try:
            cache = ig.compute_geometry(cur)
        except ig.ImmersionDegenerate as exc:
            raise ig.ImmersionDegenerate(f"flow aborted at step {k}: {exc}") from exc
        W, mW = nc.willmore_operator(cache)
        mc = mW + 4
        det_min = float(cache.detg[cache.valid_slice(cur.margin)].min())
        if det_min < FLOW_DET_FLOOR:
            raise ig.ImmersionDegenerate(
                f"flow aborted at step {k}: det(g) = {det_min:.3e} "
                f"below {FLOW_DET_FLOOR:.0e}"
            )
        rows.append(
            (float(k), ig.willmore_energy(cache, mc), ig.sup_norm(cache, W, mW), det_min)
        )
        if k == steps:
            break
        dW, mdW = ig.partials(cache, W, mW)
        d2W, _ = ig.partials(cache, dW, mdW)
        sl = cur.valid_slice(mc)
        phi = cur.phi.copy()
        d1 = cur.d1.copy()
        d2 = cur.d2.copy()
        phi[sl] -= tau * W[sl]
        d1[sl] -= tau * dW[sl]
        d2[sl] -= tau * d2W[sl]
        cur = dataclasses.replace(
            cur, phi=phi, d1=d1, d2=d2, jet_source="flow-transport"
        )
    return cur, np.array(rows)


def energy_trace_csv(trace: np.ndarray) -> str:
    """Render a flow trace as CSV, one row per recorded step."""
    lines = ["step,energy,sup_W,det_g_min"]
    for row in np.asarray(trace):
        lines.append(
            f"{int(row[0])},{row[1]:.17g},{row[2]:.17g},{row[3]:.17g}"
        )
    return "\n".join(lines) + "\n"
