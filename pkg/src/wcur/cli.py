"""Command-line front end: run one pipeline stage on a catalog chart.

Commands
    energy       Willmore energy (closed-surface weights when they apply)
    geometry     window norms of the metric and curvature; csv: H field
    laws         conservation-law residual norms; csv: translation residual
    potentials   potential chain summary; csv: primary potential field
    willmore     plain criticality report; csv: operator field
    constrained  traceless transverse multiplier report (needs --q); csv: field
    helfrich     vesicle multiplier report; csv: Euler-Lagrange field
    chen         biharmonicity diagnostics; csv: biharmonic defect field
    flow         explicit descent run; csv: energy trace
    residue      puncture flux scan; csv: flux-by-radius table
    surfaces     catalog listing

Field dumps are CSV with header `i,j,u,v,c1,...,ck`, row-major node
order, 17 significant digits, LF endings.  Summaries are `key: value`
lines with the keys sorted; output is byte-identical for identical
configurations.  Exit codes: 0 success, 2 configuration or usage error,
3 solver failure or degeneration.
"""

import argparse
import os
import sys

import numpy as np

from . import immersion_geometry as ig
from . import noether_currents as nc
from . import potential_solver as ps
from . import problem_library as pl
from . import singularity_residue as sr

COMMANDS = (
    "energy", "geometry", "laws", "potentials", "willmore", "constrained",
    "helfrich", "chen", "flow", "residue", "surfaces",
)
GRID_MIN, GRID_MAX = 17, 513


class UsageError(ValueError):
    """Configuration rejected before any compute starts."""


# serialization


def _fmt(value) -> str:
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    return format(float(value), ".17g")


def field_dump_text(field: np.ndarray, grid) -> str:
    """CSV dump of a nodewise field; grid is the pair of axis coordinates."""
    us, vs = (np.asarray(a, dtype=float) for a in grid)
    F = np.asarray(field, dtype=float)
    if F.ndim == 2:
        F = F[..., None]
    if F.ndim != 3 or F.shape[:2] != (us.size, vs.size):
        raise UsageError("field dump needs a (nx, ny) or (nx, ny, k) array")
    k = F.shape[2]
    lines = ["i,j,u,v," + ",".join(f"c{c + 1}" for c in range(k))]
    for i in range(us.size):
        ustr = _fmt(us[i])
        for j in range(vs.size):
            comps = ",".join(_fmt(F[i, j, c]) for c in range(k))
            lines.append(f"{i},{j},{ustr},{_fmt(vs[j])},{comps}")
    return "\n".join(lines) + "\n"


def summary_text(report: dict) -> str:
    return "".join(f"{key}: {_fmt(val)}\n" for key, val in sorted(report.items()))


def write_field_dump(field: np.ndarray, grid, path: str) -> None:
    _write(path, field_dump_text(field, grid))


def write_summary(report: dict, path: str) -> None:
    _write(path, summary_text(report))


def _write(path: str, text: str) -> None:
    try:
        with open(path, "w", newline="") as fh:
            fh.write(text)
    except OSError as exc:
        raise UsageError(f"cannot write {path}: {exc}") from exc


# configuration


def _parse_surface(spec: str):
    name, _, rest = spec.partition(":")
    if not name:
        raise UsageError("empty surface name")
    params = tuple(float(tok) for tok in rest.split(",")) if rest else ()
    return name, params


def _parse_radii(spec: str):
    try:
        return tuple(float(tok) for tok in spec.split(","))
    except ValueError as exc:
        raise UsageError(f"bad --radii list {spec!r}") from exc


def _load_q(path: str, nx: int, ny: int) -> np.ndarray:
    """Symmetric multiplier components q^{uu} q^{uv} q^{vv} from a text file.

    One row of three numbers gives a constant tensor; nx*ny rows give one
    tensor per node in row-major order.
    """
    try:
        raw = np.loadtxt(path, dtype=float, ndmin=2)
    except OSError as exc:
        raise UsageError(f"cannot read --q file {path}: {exc}") from exc
    if raw.shape[1] != 3 or raw.shape[0] not in (1, nx * ny):
        raise UsageError(
            f"--q file needs rows `q_uu q_uv q_vv`, one or {nx}*{ny} of them"
        )
    comp = np.broadcast_to(raw.reshape(-1, 1, 3), (nx, ny, 3)) \
        if raw.shape[0] == 1 else raw.reshape(nx, ny, 3)
    q = np.empty((nx, ny, 2, 2))
    q[..., 0, 0] = comp[..., 0]
    q[..., 0, 1] = comp[..., 1]
    q[..., 1, 0] = comp[..., 1]
    q[..., 1, 1] = comp[..., 2]
    return q


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(
        prog="wcur",
        description="conservation-law laboratory for curvature functionals",
    )
    ap.add_argument("command", choices=COMMANDS)
    ap.add_argument("--surface", default="sphere_stereo",
                    metavar="NAME[:p1,p2]",
                    help="catalog chart, optionally with parameters")
    ap.add_argument("--grid", type=int, default=65,
                    help=f"nodes per axis, {GRID_MIN}..{GRID_MAX}")
    ap.add_argument("--q", dest="q_file", default=None, metavar="FILE",
                    help="multiplier tensor file for `constrained`")
    ap.add_argument("--alpha", type=float, default=1.0)
    ap.add_argument("--beta", type=float, default=2.0)
    ap.add_argument("--gamma", type=float, default=0.0)
    ap.add_argument("--tau", type=float, default=1e-4)
    ap.add_argument("--steps", type=int, default=10)
    ap.add_argument("--radii", default="0.3,0.5,0.7",
                    help="comma-separated circle radii for `residue`")
    ap.add_argument("--out", default=None, metavar="DIR")
    ap.add_argument("--format", dest="fmt", choices=("csv", "summary"),
                    default="summary")
    return ap


# command bodies; each returns (summary dict, csv text)


def _surfaces_listing() -> str:
    lines = []
    for name in sorted(ig.catalog_names()):
        patch = ig.build_catalog_patch(name, GRID_MIN)
        us, vs = patch.axis_coords(0), patch.axis_coords(1)
        lines.append(
            f"{name}: m={patch.phi.shape[2]}"
            f" periodic={int(patch.periodic[0])},{int(patch.periodic[1])}"
            f" u=[{us[0]:.6g},{us[-1]:.6g}] v=[{vs[0]:.6g},{vs[-1]:.6g}]"
        )
    return "\n".join(lines) + "\n"


def _run_energy(cache, args):
    p = cache.patch
    H2 = np.einsum("xym,xym->xy", cache.Hvec, cache.Hvec)
    try:
        energy = pl.closed_quadrature(cache, H2)
    except ValueError:
        energy = ig.willmore_energy(cache, p.margin)
    return {"energy": energy}, field_dump_text(H2 * cache.sqrtg, (p.axis_coords(0), p.axis_coords(1)))


def _run_geometry(cache, args):
    p = cache.patch
    sl = cache.valid_slice(p.margin)
    rep = {
        "area": float(cache.sqrtg[sl].sum() * p.hx * p.hy),
        "det_g_min": float(cache.detg[sl].min()),
        "det_g_max": float(cache.detg[sl].max()),
        "energy": ig.willmore_energy(cache, p.margin),
        "sup_mean_curvature": ig.sup_norm(cache, cache.Hvec, p.margin),
    }
    return rep, field_dump_text(cache.Hvec, (p.axis_coords(0), p.axis_coords(1)))


def _run_laws(cache, args):
    cs = nc.conservation_residuals(cache)
    return cs.summary(), field_dump_text(cs.res_trans, (cache.patch.axis_coords(0), cache.patch.axis_coords(1)))


def _run_potentials(cache, args):
    W, mW = nc.willmore_operator(cache)
    pot = ps.build_potential_set(cache, W=W, margin_W=mW)
    return pot.summary(), field_dump_text(pot.V, (cache.patch.axis_coords(0), cache.patch.axis_coords(1)))


def _run_willmore(cache, args):
    W, _, rep = pl.willmore_problem(cache)
    return rep, field_dump_text(W, (cache.patch.axis_coords(0), cache.patch.axis_coords(1)))


def _run_constrained(cache, args):
    if args.q_file is None:
        raise UsageError("constrained needs --q FILE")
    q = _load_q(args.q_file, cache.patch.nx, cache.patch.ny)
    W, _, rep = pl.constrained_problem(cache, q)
    return rep, field_dump_text(W, (cache.patch.axis_coords(0), cache.patch.axis_coords(1)))


def _run_helfrich(cache, args):
    el, _, rep = pl.helfrich_problem(cache, args.alpha, args.beta, args.gamma)
    rep = {("el_residual_sup" if k == "el_sup" else k): v for k, v in rep.items()}
    return rep, field_dump_text(el, (cache.patch.axis_coords(0), cache.patch.axis_coords(1)))


def _run_chen(cache, args):
    biharm, _, _, rep = pl.chen_problem(cache)
    return rep, field_dump_text(biharm, (cache.patch.axis_coords(0), cache.patch.axis_coords(1)))


def _run_flow(patch, args):
    _, trace = pl.willmore_flow_step(patch, args.tau, args.steps)
    rep = {
        "det_g_min": float(trace[:, 3].min()),
        "energy_first": float(trace[0, 1]),
        "energy_last": float(trace[-1, 1]),
        "steps": int(trace.shape[0] - 1),
        "sup_W_first": float(trace[0, 2]),
        "sup_W_last": float(trace[-1, 2]),
    }
    return rep, pl.energy_trace_csv(trace)


def _run_residue(cache, args, radii):
    T, _ = sr.contour_stress(cache)
    rep = sr.radius_independence_scan(cache, T, None, radii)
    summary = {f"beta_res_{k + 1}": float(b) for k, b in enumerate(rep.beta_res)}
    summary["spread"] = rep.spread
    summary["green_defect"] = rep.green_defect
    return summary, sr.residue_csv(rep)


def _run(args) -> int:
    name, params = _parse_surface(args.surface)
    if not GRID_MIN <= args.grid <= GRID_MAX:
        raise UsageError(f"--grid must lie in [{GRID_MIN}, {GRID_MAX}]")
    radii = _parse_radii(args.radii)
    if args.q_file is not None and not os.path.isfile(args.q_file):
        raise UsageError(f"--q file not found: {args.q_file}")
    if args.out is not None:
        try:
            os.makedirs(args.out, exist_ok=True)
        except OSError as exc:
            raise UsageError(f"cannot create --out {args.out}: {exc}") from exc
        if not os.access(args.out, os.W_OK):
            raise UsageError(f"--out {args.out} is not writable")

    if args.command == "surfaces":
        text = _surfaces_listing()
    else:
        patch = ig.build_catalog_patch(name, args.grid, params=params)
        if args.command == "flow":
            summary, csv = _run_flow(patch, args)
        else:
            cache = ig.compute_geometry(patch)
            if args.command == "residue":
                summary, csv = _run_residue(cache, args, radii)
            else:
                summary, csv = {
                    "energy": _run_energy,
                    "geometry": _run_geometry,
                    "laws": _run_laws,
                    "potentials": _run_potentials,
                    "willmore": _run_willmore,
                    "constrained": _run_constrained,
                    "helfrich": _run_helfrich,
                    "chen": _run_chen,
                }[args.command](cache, args)
        text = csv if args.fmt == "csv" else summary_text(summary)

    if args.out is not None:
        ext = "csv" if (args.fmt == "csv" and args.command != "surfaces") else "txt"
        _write(os.path.join(args.out, f"{args.command}.{ext}"), text)
    else:
        sys.stdout.write(text)
    return 0


def run_command(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return _run(args)
    except ig.ImmersionDegenerate as exc:
        print(f"wcur: {exc}", file=sys.stderr)
        return 3
    except ps.PotentialSolverError as exc:
        print(f"wcur: {exc}", file=sys.stderr)
        return 3
    except (ValueError, KeyError, OSError) as exc:
        print(f"wcur: {exc}", file=sys.stderr)
        return 2


def main() -> None:
    sys.exit(run_command(sys.argv[1:]))


if __name__ == "__main__":
    main()
