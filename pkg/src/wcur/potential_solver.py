"""Potential systems behind the conserved currents.

The divergence-free currents of `noether_currents` admit a chain of
potentials on a simply connected chart window: a vector potential V with
lap_g V = -W, a Hodge partner L of the reduced stress T - grad V, secondary
potentials X (2-vector valued) and Y (scalar), and the pair (R, S) recovered
from first-order data.  Together they close a second-order elliptic system
coupling R, S and the immersion itself; `system_residuals` and
`gradient_identity_residuals` measure how well the discrete chain satisfies
it.

Two solver primitives do all the work:

* `solve_weighted_poisson` -- the divergence-form operator
  d_j(|g|^{1/2} g^{jk} d_k u) with zero Dirichlet data on the window frame,
  assembled from the same half-node fluxes as `laplace_beltrami`, so
  applying the operator to a solve output reproduces the right-hand side to
  solver precision.
* `recover_scalar_potential` -- least-squares integration of a gradient
  field, gauged to vanish at the window's center node, with the curl and
  circulation obstructions reported instead of silently absorbed.

All fields follow the module-wide margin convention: arrays cover the full
grid, NaN outside the stated valid region, and every stencil pass widens the
margin by two nodes.
"""

from __future__ import annotations

import warnings
from contextlib import contextmanager
from dataclasses import dataclass, field

import numpy as np
from scipy.sparse import coo_matrix, diags
from scipy.sparse.linalg import cg, splu

from . import immersion_geometry as ig
from . import noether_currents as nc
from .exterior_algebra import bullet_field, grade_dim, wedge_field

# direct factorization up to this many window nodes, conjugate gradients above
DIRECT_NODE_LIMIT = 257 * 257
CG_RTOL = 1e-10
CG_MAXITER_PER_NODE = 20
# recoveries warn when the curl or the least-squares gradient misfit exceeds
# this fraction of the field's sup norm
COMPAT_WARN_FRACTION = 1e-2


class PotentialSolverError(RuntimeError):
    """A linear solve failed or was handed an ill-posed window."""


class CompatibilityWarning(UserWarning):
    """Gradient data was not integrable; a least-squares answer is returned."""


# ----------------------------------------------------------------------
# solve window bookkeeping
# ----------------------------------------------------------------------


@dataclass(frozen=True)
class _Window:
    sx: slice
    sy: slice
    shape: tuple[int, int]
    periodic: tuple[bool, bool]
    hx: float
    hy: float

    def embed(self, vals: np.ndarray, trailing: tuple[int, ...], nx: int, ny: int):
        full = np.full((nx, ny) + trailing, np.nan)
        full[self.sx, self.sy] = vals.reshape(self.shape + trailing)
        return full


def _window(cache: ig.GeometryCache, margin: int) -> _Window:
    p = cache.patch
    if margin < p.margin:
        raise ig.MarginError(
            f"window margin {margin} is inside the patch margin {p.margin}"
        )
    sx = slice(0, p.nx) if p.periodic[0] else slice(margin, p.nx - margin)
    sy = slice(0, p.ny) if p.periodic[1] else slice(margin, p.ny - margin)
    Nx, Ny = sx.stop - sx.start, sy.stop - sy.start
    if (not p.periodic[0] and Nx < 5) or (not p.periodic[1] and Ny < 5):
        raise ig.MarginError(
            f"window {Nx}x{Ny} at margin {margin} leaves no interior to solve on"
        )
    return _Window(sx, sy, (Nx, Ny), p.periodic, p.hx, p.hy)


def _gauge_node(cache: ig.GeometryCache, win: _Window) -> tuple[int, int]:
    p = cache.patch
    gi, gj = (p.nx - 1) // 2, (p.ny - 1) // 2
    if not (win.sx.start <= gi < win.sx.stop and win.sy.start <= gj < win.sy.stop):
        raise ig.MarginError("window does not contain the center gauge node")
    return gi, gj


def _edge_families(win: _Window, a00, a11, a12):
    """Half-node averaged edge weights of the divergence-form operator.

    Axis edges carry (a_avg / h^2); the cross coefficient a12 turns into
    fluxes along the two grid diagonals with weight +-a_avg / (2 hx hy),
    the exact rewriting used by `laplace_beltrami`.
    """
    fams = [((1, 0), a00, 1.0 / win.hx**2), ((0, 1), a11, 1.0 / win.hy**2)]
    if a12 is not None and np.abs(a12).max() > 0:
        c = 1.0 / (2.0 * win.hx * win.hy)
        fams.append(((1, 1), a12, c))
        fams.append(((1, -1), a12, -c))
    Nx, Ny = win.shape
    ii, jj = np.meshgrid(np.arange(Nx), np.arange(Ny), indexing="ij")
    for (dx, dy), coef, scale in fams:
        keep = np.ones(win.shape, dtype=bool)
        if not win.periodic[0]:
            if dx > 0:
                keep[Nx - dx :, :] = False
            elif dx < 0:
                keep[: -dx, :] = False
        if not win.periodic[1]:
            if dy > 0:
                keep[:, Ny - dy :] = False
            elif dy < 0:
                keep[:, : -dy] = False
        pi, pj = ii[keep], jj[keep]
        qi, qj = (pi + dx) % Nx, (pj + dy) % Ny
        w = scale * 0.5 * (coef[pi, pj] + coef[qi, qj])
        yield pi * Ny + pj, qi * Ny + qj, w


def assemble_weighted_laplacian(cache: ig.GeometryCache, margin: int):
    """Matrix of -d_j(|g|^{1/2} g^{jk} d_k .) on the window's unknown nodes.

    Unknowns exclude the one-layer Dirichlet frame on non-periodic axes; on a
    fully periodic window the constant nullspace is removed by pinning node
    (0, 0) instead.  Returns (A, unknown_ids, window) with unknown_ids the
    window-local flat index of each unknown, and A symmetric positive
    definite up to the pinned/indefinite cross-term caveats of the stencil.
    """
    win = _window(cache, margin)
    Nx, Ny = win.shape
    a = cache.acoef[win.sx, win.sy]
    a12 = a[..., 0, 1]

    unknown = np.ones(win.shape, dtype=bool)
    if not win.periodic[0]:
        unknown[0, :] = unknown[-1, :] = False
    if not win.periodic[1]:
        unknown[:, 0] = unknown[:, -1] = False
    if unknown.all():
        unknown[0, 0] = False  # pin one node on a closed chart
    uid = -np.ones(Nx * Ny, dtype=np.int64)
    uid[unknown.ravel()] = np.arange(int(unknown.sum()))
    n = int(unknown.sum())
    if n == 0:
        raise ig.MarginError("no unknown nodes in the solve window")

    rows, cols, vals = [], [], []
    for p_, q_, w in _edge_families(win, a[..., 0, 0], a[..., 1, 1], a12):
        up, uq = uid[p_], uid[q_]
        pm, qm = up >= 0, uq >= 0
        rows += [up[pm], uq[qm]]
        cols += [up[pm], uq[qm]]
        vals += [w[pm], w[qm]]
        both = pm & qm
        rows += [up[both], uq[both]]
        cols += [uq[both], up[both]]
        vals += [-w[both], -w[both]]
    A = coo_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
        shape=(n, n),
    ).tocsr()
    return A, uid, win


def _linear_solve(A, B: np.ndarray, method: str, stage: str):
    """Solve A x = b columnwise; one factorization serves every column."""
    n = A.shape[0]
    use_direct = method == "direct" or (method == "auto" and n <= DIRECT_NODE_LIMIT)
    X = np.zeros_like(B)
    live = [k for k in range(B.shape[1]) if np.abs(B[:, k]).max() > 0.0]
    residual = 0.0
    if use_direct:
        lu = splu(A.tocsc()) if live else None
        for k in live:
            X[:, k] = lu.solve(B[:, k])
    else:
        d = A.diagonal()
        if np.any(d <= 0):
            raise PotentialSolverError(f"{stage}: non-positive diagonal, cannot precondition")
        M = diags(1.0 / d)
        for k in live:
            x, info = cg(A, B[:, k], rtol=CG_RTOL, atol=0.0,
                         maxiter=int(CG_MAXITER_PER_NODE * n), M=M)
            if info != 0:
                ach = np.linalg.norm(A @ x - B[:, k]) / np.linalg.norm(B[:, k])
                raise PotentialSolverError(
                    f"{stage}: conjugate gradients stalled at relative "
                    f"residual {ach:.3e} (component {k})"
                )
            X[:, k] = x
    for k in live:
        residual = max(
            residual,
            float(np.linalg.norm(A @ X[:, k] - B[:, k]) / np.linalg.norm(B[:, k])),
        )
    return X, residual, ("direct" if use_direct else "cg")


# ----------------------------------------------------------------------
# weighted Poisson solve
# ----------------------------------------------------------------------


@dataclass
class PoissonSolution:
    u: np.ndarray
    margin: int
    residual: float      # relative algebraic residual of the linear system
    method: str


def solve_weighted_poisson(
    cache: ig.GeometryCache,
    rhs: np.ndarray,
    margin: int | None = None,
    method: str = "auto",
) -> PoissonSolution:
    """Solve d_j(|g|^{1/2} g^{jk} d_k u) = |g|^{1/2} rhs, u = 0 on the frame.

    rhs is the Laplace-Beltrami right-hand side (lap_g u = rhs); the metric
    weight is applied internally.  The window is the valid region at
    `margin`; its outermost layer on each non-periodic axis carries the zero
    Dirichlet data.  Trailing component axes of rhs are solved one at a time
    against a single factorization.  Output keeps the input margin.
    """
    p = cache.patch
    if margin is None:
        margin = p.margin
    if rhs.shape[:2] != (p.nx, p.ny):
        raise ValueError("rhs must cover the full grid")
    if method not in ("auto", "direct", "cg"):
        raise ValueError(f"unknown method {method!r}")
    A, uid, win = assemble_weighted_laplacian(cache, margin)
    trailing = rhs.shape[2:]
    w_rhs = (ig._bcast(cache.sqrtg, rhs) * rhs)[win.sx, win.sy]
    flat = w_rhs.reshape(-1, int(np.prod(trailing)) if trailing else 1)
    mask = uid >= 0
    B = -flat[mask]
    if not np.isfinite(B).all():
        raise ValueError("rhs contains non-finite values inside the solve window")
    X, residual, used = _linear_solve(A, B, method, "weighted Poisson solve")
    vals = np.zeros_like(flat)
    vals[mask] = X
    u = win.embed(vals, trailing, p.nx, p.ny)
    return PoissonSolution(u=u, margin=margin, residual=residual, method=used)


# ----------------------------------------------------------------------
# gradient-field recovery
# ----------------------------------------------------------------------


@dataclass
class ScalarRecovery:
    u: np.ndarray
    margin: int
    curl_defect: float   # sup of the discrete curl of the input data
    misfit: float        # sup gradient mismatch of the least-squares answer
    gauge: tuple[int, int]


def recover_scalar_potential(
    cache: ig.GeometryCache,
    grad: np.ndarray,
    margin: int | None = None,
    gauge: tuple[int, int] | None = None,
    method: str = "auto",
) -> ScalarRecovery:
    """Integrate covariant gradient data d_k u back to u, least squares.

    `grad` is indexed (nx, ny, k, ...) with k the coordinate direction.  Each
    window edge contributes the midpoint-rule equation
    (u_q - u_p) = h (P_p + P_q)/2, and the normal equations (a flat
    five-point Poisson problem) are solved with the gauge node pinned, so
    u(gauge) = 0 exactly.  Obstructions to integrability are reported rather
    than hidden: `curl_defect` is the pointwise curl of the data and
    `misfit` the sup-norm gradient mismatch of the returned answer; a
    CompatibilityWarning fires when either exceeds 1e-2 of sup|grad|.  The
    chart metric never enters: this is integration in chart coordinates.
    """
    p = cache.patch
    if margin is None:
        margin = p.margin
    if grad.shape[:3] != (p.nx, p.ny, 2):
        raise ValueError("grad must be indexed (nx, ny, direction, ...)")
    win = _window(cache, margin)
    gi, gj = gauge if gauge is not None else _gauge_node(cache, win)
    if not (win.sx.start <= gi < win.sx.stop and win.sy.start <= gj < win.sy.stop):
        raise ig.MarginError("gauge node lies outside the recovery window")
    trailing = grad.shape[3:]
    K = int(np.prod(trailing)) if trailing else 1
    Pw = grad[win.sx, win.sy].reshape(win.shape + (2, K))
    if not np.isfinite(Pw).all():
        raise ValueError("grad contains non-finite values inside the recovery window")
    Nx, Ny = win.shape
    nW = Nx * Ny

    rows, cols, vals = [], [], []
    rhs = np.zeros((nW, K))
    ii, jj = np.meshgrid(np.arange(Nx), np.arange(Ny), indexing="ij")
    Pflat = Pw.reshape(nW, 2, K)
    for axis, h in ((0, win.hx), (1, win.hy)):
        keep = np.ones(win.shape, dtype=bool)
        if not win.periodic[axis]:
            if axis == 0:
                keep[-1, :] = False
            else:
                keep[:, -1] = False
        pi, pj = ii[keep], jj[keep]
        pid = pi * Ny + pj
        qid = ((pi + (1 - axis)) % Nx) * Ny + (pj + axis) % Ny
        w = np.full(pid.shape, 1.0 / h**2)
        rows += [pid, qid, pid, qid]
        cols += [pid, qid, qid, pid]
        vals += [w, w, -w, -w]
        # edge equation (u_q - u_p) = h * (P_p + P_q)/2, weighted by 1/h^2
        wd = 0.5 * (Pflat[pid, axis] + Pflat[qid, axis]) / h
        np.add.at(rhs, qid, wd)
        np.add.at(rhs, pid, -wd)
    L = coo_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
        shape=(nW, nW),
    ).tocsr()

    gauge_flat = (gi - win.sx.start) * Ny + (gj - win.sy.start)
    keep = np.ones(nW, dtype=bool)
    keep[gauge_flat] = False
    idx = np.where(keep)[0]
    Lr = L[idx][:, idx]
    X, _, _ = _linear_solve(Lr, rhs[idx], method, "gradient recovery")
    vals_full = np.zeros((nW, K))
    vals_full[idx] = X
    u = win.embed(vals_full, trailing, p.nx, p.ny)

    # obstruction report: pointwise curl of the data, and the gradient
    # mismatch actually achieved by the least-squares answer
    P1, P2 = Pw[:, :, 0, :], Pw[:, :, 1, :]
    c = _win_cdiff(P2, 0, win) / win.hx - _win_cdiff(P1, 1, win) / win.hy
    curl_defect = float(np.sqrt(np.nansum(np.square(c), axis=-1)).max()) if c.size else 0.0
    uw = vals_full.reshape(win.shape + (K,))
    mis = 0.0
    for axis, h in ((0, win.hx), (1, win.hy)):
        du = _win_fdiff(uw, axis, win) / h
        mid = 0.5 * (Pw[..., axis, :] + _win_shift(Pw[..., axis, :], axis, win))
        mis = max(mis, float(np.nanmax(np.abs(du - mid), initial=0.0)))
    scale = float(np.sqrt(np.sum(np.square(Pw), axis=(2, 3))).max())
    worst = max(curl_defect, mis)
    if scale > 0 and worst > COMPAT_WARN_FRACTION * scale:
        warnings.warn(
            f"gradient data is not integrable on this window "
            f"(defect {worst:.3e} vs field scale {scale:.3e}); "
            f"returning the least-squares potential",
            CompatibilityWarning,
            stacklevel=2,
        )
    return ScalarRecovery(
        u=u, margin=margin, curl_defect=curl_defect, misfit=mis, gauge=(gi, gj)
    )


def _win_shift(F: np.ndarray, axis: int, win: _Window) -> np.ndarray:
    if win.periodic[axis]:
        return np.roll(F, -1, axis)
    out = np.full_like(F, np.nan)
    src = np.moveaxis(F, axis, 0)
    dst = np.moveaxis(out, axis, 0)
    dst[:-1] = src[1:]
    return out


def _win_fdiff(F: np.ndarray, axis: int, win: _Window) -> np.ndarray:
    return _win_shift(F, axis, win) - F


def _win_cdiff(F: np.ndarray, axis: int, win: _Window) -> np.ndarray:
    if win.periodic[axis]:
        return 0.5 * (np.roll(F, -1, axis) - np.roll(F, 1, axis))
    out = np.full_like(F, np.nan)
    src = np.moveaxis(F, axis, 0)
    dst = np.moveaxis(out, axis, 0)
    dst[1:-1] = 0.5 * (src[2:] - src[:-2])
    return out


# ----------------------------------------------------------------------
# the potential chain
# ----------------------------------------------------------------------


@dataclass
class PotentialSet:
    """Discrete potential chain of one current set on one chart window.

    Gradient fields are contravariant (index j of grad^j up).  S, Y, L and R
    vanish at the gauge node; V keeps its Dirichlet normalization.  `margins`
    records the valid margin of every field, `solves` the relative algebraic
    residual of each Poisson stage, `compat` the integrability defects of
    each recovery stage, and `supplied` which fields came from caller-side
    closed forms instead of solves.
    """

    V: np.ndarray
    grad_V: np.ndarray
    L: np.ndarray
    X: np.ndarray
    grad_X: np.ndarray
    Y: np.ndarray
    grad_Y: np.ndarray
    R: np.ndarray
    S: np.ndarray
    gauge: tuple[int, int]
    margins: dict = field(default_factory=dict)
    solves: dict = field(default_factory=dict)
    compat: dict = field(default_factory=dict)
    supplied: tuple = ()

    def summary(self) -> dict:
        out = {f"margin_{k}": v for k, v in self.margins.items()}
        out.update({f"solve_res_{k}": v for k, v in self.solves.items()})
        out.update({f"compat_{k}": v for k, v in self.compat.items()})
        return dict(sorted(out.items()))


def _lower(cache: ig.GeometryCache, U: np.ndarray) -> np.ndarray:
    return np.einsum("xykj,xyj...->xyk...", cache.g, U)


@contextmanager
def _stage(label: str):
    """Re-raise solver failures with the chain stage that hit them."""
    try:
        yield
    except PotentialSolverError as e:
        raise PotentialSolverError(f"stage {label!r}: {e}") from None


def build_potential_set(
    cache: ig.GeometryCache,
    W: np.ndarray | None = None,
    T: np.ndarray | None = None,
    margin_W: int | None = None,
    margin_T: int | None = None,
    overrides: dict | None = None,
    method: str = "auto",
) -> PotentialSet:
    """Run the whole potential chain on one chart window.

    Stages: V from lap_g V = -W (or a supplied closed-form grad V), the
    Hodge partner L of F = T - grad V, the secondary pair X, Y from
    lap_g X = grad^j V wedge d_j Phi and lap_g Y = grad^j V . d_j Phi (or
    their supplied closed forms), and finally (R, S) integrated from their
    defining first-order data.  Every solve failure is re-raised with its
    stage label; every recovery's integrability defect lands in `compat`.

    overrides keys: "grad_V", "grad_X" (contravariant), "Y", and optionally
    "margin" for the margin those closed forms are valid at.  Scalars
    broadcast, so `{"grad_V": 0.0, "grad_X": 0.0, "Y": 0.0}` requests the
    zero-potential reduction valid wherever W vanishes identically.
    """
    p = cache.patch
    m = cache.m
    K = grade_dim(m, 2)
    ov = dict(overrides or {})
    m_ov = int(ov.pop("margin", p.margin))
    for key in ov:
        if key not in ("grad_V", "grad_X", "Y"):
            raise ValueError(f"unknown override {key!r}")

    if W is None:
        if margin_W is not None:
            raise ValueError("margin_W given without W")
        with _stage("willmore operator"):
            W, margin_W = nc.willmore_operator(cache)
    elif margin_W is None:
        raise ValueError("W given without margin_W")
    if T is None:
        if margin_T is not None:
            raise ValueError("margin_T given without T")
        with _stage("stress tensor"):
            T, margin_T = nc.stress_tensor(cache)
    elif margin_T is None:
        raise ValueError("T given without margin_T")

    margins: dict = {"W": margin_W, "T": margin_T}
    solves: dict = {}
    compat: dict = {}
    supplied = tuple(sorted(ov))
    win0 = _window(cache, max(margin_W, m_ov))
    gauge = _gauge_node(cache, win0)

    # -- V ---------------------------------------------------------------
    if "grad_V" in ov:
        grad_V = np.broadcast_to(
            np.asarray(ov["grad_V"], dtype=float), (p.nx, p.ny, 2, m)
        ).copy()
        margins["grad_V"] = m_ov
        with _stage("V recovery"):
            rec = recover_scalar_potential(
                cache, _lower(cache, grad_V), m_ov, gauge, method
            )
        V, margins["V"] = rec.u, rec.margin
        compat["V_curl"], compat["V_misfit"] = rec.curl_defect, rec.misfit
    else:
        with _stage("V solve"):
            sol = solve_weighted_poisson(cache, -W, margin_W, method)
        V, margins["V"] = sol.u, sol.margin
        solves["V"] = sol.residual
        dV, mgV = ig.partials(cache, V, margins["V"])
        grad_V = ig.raise_index(cache, dV)
        margins["grad_V"] = mgV

    # -- L ---------------------------------------------------------------
    mF = max(margins["T"], margins["grad_V"])
    F = T - grad_V
    sg = cache.sqrtg[..., None]
    dL_target = np.stack([sg * F[:, :, 1], -sg * F[:, :, 0]], axis=2)
    with _stage("L recovery"):
        recL = recover_scalar_potential(cache, dL_target, mF, gauge, method)
    L, margins["L"] = recL.u, recL.margin
    compat["L_curl"], compat["L_misfit"] = recL.curl_defect, recL.misfit

    # -- X, Y ------------------------------------------------------------
    gradPhi = ig.raise_index(cache, p.d1)
    if "grad_X" in ov:
        grad_X = np.broadcast_to(
            np.asarray(ov["grad_X"], dtype=float), (p.nx, p.ny, 2, K)
        ).copy()
        margins["grad_X"] = m_ov
        with _stage("X recovery"):
            recX = recover_scalar_potential(
                cache, _lower(cache, grad_X), m_ov, gauge, method
            )
        X, margins["X"] = recX.u, recX.margin
        compat["X_curl"], compat["X_misfit"] = recX.curl_defect, recX.misfit
    else:
        rhs_X = sum(
            wedge_field(m, 1, 1, grad_V[:, :, j], p.d1[:, :, j]) for j in (0, 1)
        )
        with _stage("X solve"):
            solX = solve_weighted_poisson(cache, rhs_X, margins["grad_V"], method)
        X, margins["X"] = solX.u, solX.margin
        solves["X"] = solX.residual
        dX, mgX = ig.partials(cache, X, margins["X"])
        grad_X = ig.raise_index(cache, dX)
        margins["grad_X"] = mgX

    if "Y" in ov:
        Y = np.broadcast_to(np.asarray(ov["Y"], dtype=float), (p.nx, p.ny)).copy()
        Y = Y - Y[gauge]
        margins["Y"] = m_ov
    else:
        rhs_Y = np.einsum("xyjm,xyjm->xy", grad_V, p.d1)
        with _stage("Y solve"):
            solY = solve_weighted_poisson(cache, rhs_Y, margins["grad_V"], method)
        solves["Y"] = solY.residual
        # additive normalization only; every later use is through grad Y
        Y = solY.u - solY.u[gauge]
        margins["Y"] = solY.margin
    dY, mgY = ig.partials(cache, Y, margins["Y"])
    grad_Y = ig.raise_index(cache, dY)
    margins["grad_Y"] = mgY

    # -- R, S ------------------------------------------------------------
    mRS = max(margins["L"], margins["grad_X"], margins["grad_Y"], p.margin)
    sgg = cache.sqrtg
    dS_target = np.stack(
        [
            np.einsum("xym,xym->xy", L, p.d1[:, :, 0]) - sgg * grad_Y[:, :, 1],
            np.einsum("xym,xym->xy", L, p.d1[:, :, 1]) + sgg * grad_Y[:, :, 0],
        ],
        axis=2,
    )
    HwedgeGPhi = np.stack(
        [wedge_field(m, 1, 1, cache.Hvec, gradPhi[:, :, j]) for j in (0, 1)], axis=2
    )
    Aj = HwedgeGPhi + grad_X
    dR_target = np.stack(
        [
            wedge_field(m, 1, 1, L, p.d1[:, :, 0]) - sg * Aj[:, :, 1],
            wedge_field(m, 1, 1, L, p.d1[:, :, 1]) + sg * Aj[:, :, 0],
        ],
        axis=2,
    )
    with _stage("S recovery"):
        recS = recover_scalar_potential(cache, dS_target, mRS, gauge, method)
    with _stage("R recovery"):
        recR = recover_scalar_potential(cache, dR_target, mRS, gauge, method)
    S, margins["S"] = recS.u, recS.margin
    R, margins["R"] = recR.u, recR.margin
    compat["S_curl"], compat["S_misfit"] = recS.curl_defect, recS.misfit
    compat["R_curl"], compat["R_misfit"] = recR.curl_defect, recR.misfit

    return PotentialSet(
        V=V, grad_V=grad_V, L=L, X=X, grad_X=grad_X, Y=Y, grad_Y=grad_Y,
        R=R, S=S, gauge=gauge, margins=margins, solves=solves, compat=compat,
        supplied=supplied,
    )


# ----------------------------------------------------------------------
# residuals of the coupled system
# ----------------------------------------------------------------------


def system_residuals(
    cache: ig.GeometryCache, pot: PotentialSet, margin: int | None = None
) -> dict:
    """Residuals of the three coupled second-order equations.

    The equations are the divergences of the two gradient identities (see
    `gradient_identity_residuals`) plus the one feeding back into the
    immersion.  In weighted form, with *n the unit tangent 2-vector,
    eps^{12} = +1 and * the first-order multivector contraction:

      |g|^{1/2} lap_g S   = eps^{jk} d_j(*n) . d_k R
                            - d_j(|g|^{1/2} (*n) . grad^j X)
      |g|^{1/2} lap_g R   = eps^{kj} [d_j(*n) d_k S + d_j(*n) * d_k R]
                            + d_j(|g|^{1/2} [(*n) grad^j Y + (*n) * grad^j X])
      |g|^{1/2} lap_g Phi = eps^{jk} [d_j S d_k Phi + d_j R * d_k Phi]
                            + |g|^{1/2} [grad^j Y d_j Phi + grad^j X * d_j Phi]

    (On a round sphere the chain collapses to R = -star(Phi) and the three
    reduce to exact identities; that closed form pins every sign here.)
    S and R enter through fresh stencil passes on the stored fields, so the
    report measures the whole chain, not the recovery targets echoed back.
    Returns sup and L2 norms per equation plus the margin they were taken
    over.  `margin` widens the evaluation window beyond the stencil minimum;
    Dirichlet stages put weak corner layers into fourth derivatives, so
    convergence studies on cut charts should pin the window in coordinate
    units rather than node counts.
    """
    p = cache.patch
    m = cache.m
    sg = cache.sqrtg
    dS, mdS = ig.partials(cache, pot.S, pot.margins["S"])
    dR, mdR = ig.partials(cache, pot.R, pot.margins["R"])
    dN, mdN = ig.partials(cache, cache.star_n, p.margin)
    lapS, mlS = ig.laplace_beltrami(cache, pot.S, pot.margins["S"])
    lapR, mlR = ig.laplace_beltrami(cache, pot.R, pot.margins["R"])
    lapPhi, mlP = ig.laplace_beltrami(cache, p.phi, p.margin)

    # eq (S)
    Uj = np.einsum("xyjK,xyK->xyj", pot.grad_X, cache.star_n)
    divUw, mdU = ig.flat_divergence(cache, sg[:, :, None] * Uj, pot.margins["grad_X"])
    rS = (
        sg * lapS
        - np.einsum("xyK,xyK->xy", dN[:, :, 0], dR[:, :, 1])
        + np.einsum("xyK,xyK->xy", dN[:, :, 1], dR[:, :, 0])
        + divUw
    )

    # eq (R)
    tS = dN[:, :, 0] * dS[:, :, 1, None] - dN[:, :, 1] * dS[:, :, 0, None]
    tR = bullet_field(m, 2, 2, dN[:, :, 0], dR[:, :, 1]) - bullet_field(
        m, 2, 2, dN[:, :, 1], dR[:, :, 0]
    )
    Gj = cache.star_n[:, :, None, :] * pot.grad_Y[..., None] + np.stack(
        [bullet_field(m, 2, 2, cache.star_n, pot.grad_X[:, :, j]) for j in (0, 1)],
        axis=2,
    )
    divGw, mdG = ig.flat_divergence(
        cache, sg[:, :, None, None] * Gj, max(pot.margins["grad_X"], pot.margins["grad_Y"])
    )
    rR = sg[..., None] * lapR + tS + tR - divGw

    # eq (Phi)
    cS = dS[:, :, 0, None] * p.d1[:, :, 1] - dS[:, :, 1, None] * p.d1[:, :, 0]
    cR = bullet_field(m, 2, 1, dR[:, :, 0], p.d1[:, :, 1]) - bullet_field(
        m, 2, 1, dR[:, :, 1], p.d1[:, :, 0]
    )
    feed = np.einsum("xyj,xyjm->xym", pot.grad_Y, p.d1) + sum(
        bullet_field(m, 2, 1, pot.grad_X[:, :, j], p.d1[:, :, j]) for j in (0, 1)
    )
    rPhi = sg[..., None] * lapPhi - cS - cR - sg[..., None] * feed

    margin = max(mdS, mdR, mdN, mlS, mlR, mlP, mdU, mdG, margin or 0)
    return {
        "eq_S_sup": ig.sup_norm(cache, rS, margin),
        "eq_S_l2": ig.l2_norm(cache, rS, margin),
        "eq_R_sup": ig.sup_norm(cache, rR, margin),
        "eq_R_l2": ig.l2_norm(cache, rR, margin),
        "eq_phi_sup": ig.sup_norm(cache, rPhi, margin),
        "eq_phi_l2": ig.l2_norm(cache, rPhi, margin),
        "margin": margin,
    }


def gradient_identity_residuals(
    cache: ig.GeometryCache, pot: PotentialSet, margin: int | None = None
) -> dict:
    """Pointwise first-order identities tying grad S and grad R to the rest.

    With eps^{12} = +1 and *n the unit tangent 2-vector:

      grad^j S = |g|^{-1/2} eps^{jk} [(*n) . d_k R - d_k Y] - (*n) . grad^j X
      grad^j R = |g|^{-1/2} eps^{kj} [(*n) d_k S + (*n) * d_k R + d_k X]
                 + (*n) grad^j Y + (*n) * grad^j X

    Note the transposed eps in the second identity.  Both follow from
    contracting *n into the first-order data defining S and R; expanding
    d_k R pairs each X/Y term with one epsilon contraction, which is what
    settles their signs.  Covariant data for X and Y comes from lowering
    their stored contravariant gradients, so supplied closed forms are
    honored exactly.
    """
    m = cache.m
    sg = cache.sqrtg
    dS, mdS = ig.partials(cache, pot.S, pot.margins["S"])
    dR, mdR = ig.partials(cache, pot.R, pot.margins["R"])
    gS = ig.raise_index(cache, dS)
    gR = ig.raise_index(cache, dR)
    dY = _lower(cache, pot.grad_Y)
    dX = _lower(cache, pot.grad_X)
    sn = cache.star_n

    brk = np.stack(
        [np.einsum("xyK,xyK->xy", sn, dR[:, :, k]) - dY[:, :, k] for k in (0, 1)],
        axis=2,
    )
    nX = np.stack(
        [np.einsum("xyK,xyK->xy", sn, pot.grad_X[:, :, j]) for j in (0, 1)], axis=2
    )
    resS = np.empty_like(gS)
    resS[:, :, 0] = gS[:, :, 0] - brk[:, :, 1] / sg + nX[:, :, 0]
    resS[:, :, 1] = gS[:, :, 1] + brk[:, :, 0] / sg + nX[:, :, 1]

    brkR = np.stack(
        [
            sn * dS[:, :, k, None]
            + bullet_field(m, 2, 2, sn, dR[:, :, k])
            + dX[:, :, k]
            for k in (0, 1)
        ],
        axis=2,
    )
    tail = sn[:, :, None, :] * pot.grad_Y[..., None] + np.stack(
        [bullet_field(m, 2, 2, sn, pot.grad_X[:, :, j]) for j in (0, 1)], axis=2
    )
    resR = np.empty_like(gR)
    resR[:, :, 0] = gR[:, :, 0] + brkR[:, :, 1] / sg[..., None] - tail[:, :, 0]
    resR[:, :, 1] = gR[:, :, 1] - brkR[:, :, 0] / sg[..., None] - tail[:, :, 1]

    margin = max(
        mdS, mdR, pot.margins["grad_X"], pot.margins["grad_Y"],
        cache.patch.margin, margin or 0,
    )
    return {
        "nabla_S_sup": ig.sup_norm(cache, resS, margin),
        "nabla_S_l2": ig.l2_norm(cache, resS, margin),
        "nabla_R_sup": ig.sup_norm(cache, resR, margin),
        "nabla_R_l2": ig.l2_norm(cache, resR, margin),
        "margin": margin,
    }
