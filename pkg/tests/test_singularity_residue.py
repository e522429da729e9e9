"""Tests for the puncture flux machinery: Green functions and residues.

Oracles behind the frozen numbers:

* The log split makes the Green flux exact up to the numerical remainder.
  On charts whose metric pullback is a multiple of the identity at every
  node (flat plane, recentred stereographic sphere, both annulus charts)
  the remainder vanishes identically, so enclosing fluxes equal 1 to
  rounding; on graph_bump the remainder solve leaves an O(h^2) error.
* The inverted catenoid end carries residue 4*pi*e_z: its stress flux
  converges to that value at fourth order and is radius independent.
* The cylinder stress has constant flux -(pi/2)*e_z at every radius: the
  pointwise source is nonzero but rotationally symmetric, so full-circle
  integrals of it cancel vectorially.  Radius dependence is therefore
  exercised with a manufactured term S^v = v*e_z of unit divergence,
  whose flux is -(pi/2) - 2*pi*v(r) in closed form.
* Rigid translation leaves stress fluxes bit-identical (the field is
  built from derivatives only).
"""

import io

import numpy as np
import pytest

from wcur import immersion_geometry as ig
from wcur import singularity_residue as sr

pytestmark = pytest.mark.filterwarnings(
    "ignore::wcur.potential_solver.CompatibilityWarning")


def geom(name, n, **kw):
    return ig.compute_geometry(ig.build_catalog_patch(name, n, **kw))


def order(coarse, fine):
    return np.log2(coarse / fine)


# Green function


def test_green_flat_window_fluxes_certify_unit_source():
    c = geom("flat", 129)
    gf = sr.green_function(c)
    assert gf.kind == "planar"
    assert gf.defect <= 1e-13
    f03 = float(sr.circle_flux(c, gf.weighted_grad, 0.3))
    f06 = float(sr.circle_flux(c, gf.weighted_grad, 0.6))
    assert abs(f03 - 1.0) <= 1.15 * 3.2687e-05
    assert abs(f06 - 1.0) <= 1.15 * 1.4363e-06
    assert abs(f03 - f06) <= 1e-3
    box_in = float(sr.box_flux(c, gf.weighted_grad, (32, 96, 32, 96)))
    box_out = float(sr.box_flux(c, gf.weighted_grad, (70, 120, 70, 120)))
    assert abs(box_in - 1.0) <= 1.15 * 5.1808e-05
    assert abs(box_out) <= 1.15 * 3.6910e-04


def test_green_conformal_chart_reproduces_flat_fluxes():
    # the recentred stereographic chart is conformal, so the weighted
    # gradient problem collapses to the flat one node for node
    c = geom("sphere_stereo", 129, params=(0.35, -0.2))
    gf = sr.green_function(c)
    assert gf.defect <= 1e-13
    for r, err in ((0.3, 3.2687e-05), (0.6, 1.4363e-06)):
        assert abs(float(sr.circle_flux(c, gf.weighted_grad, r)) - 1.0) \
            <= 1.15 * err


def test_green_nonconformal_chart_flux_error_is_second_order():
    errs = {}
    for n in (65, 129):
        c = geom("graph_bump", n)
        gf = sr.green_function(c)
        assert gf.defect <= 1e-12
        errs[n] = abs(float(sr.circle_flux(c, gf.weighted_grad, 0.3)) - 1.0)
    assert errs[65] <= 1.15 * 3.1375e-03
    assert errs[129] <= 1.15 * 7.0249e-04
    assert 1.4 <= order(errs[65], errs[129]) <= 2.7


def test_green_annulus_charts_are_exact():
    for name, radii in (("inverted_catenoid_end", (0.3, 0.5, 0.7)),
                        ("cylinder", (0.45, 0.6, 0.8))):
        c = geom(name, 65)
        gf = sr.green_function(c)
        assert gf.kind == "annulus"
        assert gf.defect <= 1e-12
        for r in radii:
            assert abs(float(sr.circle_flux(c, gf.weighted_grad, r)) - 1.0) \
                <= 1e-12


def test_green_rejects_charts_that_cannot_surround_the_puncture():
    # closed torus, annulus-shaped chart without a radius map, and a
    # planar window that misses the origin
    for name, dom in (("torus_Rr", None), ("catenoid", None),
                      ("flat", (0.2, 1.2, 0.3, 1.1))):
        with pytest.raises(ValueError, match="surround the puncture"):
            sr.green_function(geom(name, 33, domain=dom))


# contour sampling


def test_circle_flux_rejects_radii_outside_the_chart():
    c = geom("inverted_catenoid_end", 33)
    T, _ = sr.contour_stress(c)
    for r in (0.9, 0.05):
        with pytest.raises(ValueError, match="circle exits valid region"):
            sr.residue_flux(c, T, None, r)
    cf = geom("flat", 33)
    Tf, _ = sr.contour_stress(cf)
    with pytest.raises(ValueError, match="circle exits valid region"):
        sr.residue_flux(cf, Tf, None, 0.99)


def test_box_flux_rejects_degenerate_rectangles():
    c = geom("flat", 33)
    gf = sr.green_function(c)
    for box in ((10, 10, 5, 20), (5, 20, 20, 5), (-1, 20, 5, 20),
                (5, 20, 5, 40)):
        with pytest.raises(ValueError, match="box exits valid region"):
            sr.box_flux(c, gf.weighted_grad, box)


def test_residue_flux_is_linear_in_the_fields():
    c = geom("cylinder", 65)
    T, _ = sr.contour_stress(c)
    grad_V = np.zeros_like(T)
    grad_V[..., 1, :] = 0.25 * T[..., 1, :]
    f1 = sr.residue_flux(c, T, None, 0.6)
    assert np.abs(sr.residue_flux(c, 2.0 * T, None, 0.6) - 2.0 * f1).max() \
        <= 1e-14
    fv = sr.residue_flux(c, grad_V, None, 0.6)
    assert np.abs(sr.residue_flux(c, T, grad_V, 0.6) - (f1 - fv)).max() \
        <= 1e-12


# residue scans


def test_scan_smooth_chart_reports_no_residue():
    c = geom("sphere_stereo", 65, params=(0.35, -0.2))
    T, _ = sr.contour_stress(c)
    rep = sr.radius_independence_scan(c, T, None, (0.3, 0.5, 0.7))
    assert np.linalg.norm(rep.beta_res) <= 1e-5
    assert rep.green_defect <= 1e-13


def test_scan_zero_field_defines_spread_zero():
    c = geom("flat", 65)
    T, _ = sr.contour_stress(c)
    rep = sr.radius_independence_scan(c, T, None, (0.3, 0.5, 0.7))
    assert np.all(rep.beta_res == 0.0)
    assert rep.spread == 0.0


def test_scan_inverted_catenoid_end_finds_vertical_residue():
    c = geom("inverted_catenoid_end", 65)
    T, _ = sr.contour_stress(c)
    rep = sr.radius_independence_scan(c, T, None, (0.3, 0.5, 0.7))
    assert abs(rep.beta_res[2] - 4.0 * np.pi) <= 1.15 * 2.2027e-04
    assert np.abs(rep.beta_res[:2]).max() <= 1e-12
    assert rep.spread <= 1.15 * 3.303e-05
    assert len(rep.flux_by_radius) == 3
    assert [r for r, _ in rep.flux_by_radius] == [0.3, 0.5, 0.7]


def test_scan_residue_is_translation_invariant():
    base = ig.build_catalog_patch("inverted_catenoid_end", 65)
    moved = ig.transform_patch(base, ("translation", np.array([0.3, -1.1, 0.7])))
    betas = []
    for patch in (base, moved):
        c = ig.compute_geometry(patch)
        T, _ = sr.contour_stress(c)
        betas.append(sr.radius_independence_scan(c, T, None,
                                                 (0.3, 0.5, 0.7)).beta_res)
    assert np.abs(betas[1] - betas[0]).max() <= 1e-10


def test_scan_cylinder_stress_flux_is_constant_by_symmetry():
    # the source -nu/4 is nonzero pointwise but integrates to zero over
    # every full circle, so the flux sits at -(pi/2)*e_z independent of
    # radius and the scan does not flag it
    c = geom("cylinder", 65)
    T, _ = sr.contour_stress(c)
    rep = sr.radius_independence_scan(c, T, None, (0.45, 0.6, 0.8))
    assert abs(rep.beta_res[2] + np.pi / 2) <= 1e-12
    assert np.abs(rep.beta_res[:2]).max() <= 1e-14
    assert rep.spread <= 1e-12


def test_scan_flags_a_field_with_uncancelled_divergence():
    # S^v = v*e_z has divergence e_z, so each flux picks up the enclosed
    # coordinate area: flux_z(r) = -(pi/2) - 2*pi*v(r) exactly
    c = geom("cylinder", 129)
    T, _ = sr.contour_stress(c)
    S = np.zeros((129, 129, 2, 3))
    S[..., 1, 2] = c.patch.grid_uv()[1]
    rep = sr.radius_independence_scan(c, T + S, None, (0.45, 0.6, 0.8))
    assert rep.spread > 1e-2
    for r, flux in rep.flux_by_radius:
        assert abs(flux[2] - (-np.pi / 2 - 2.0 * np.pi * (-np.log(r)))) \
            <= 1e-9


def test_scan_rejects_bad_radius_lists():
    c = geom("flat", 33)
    T, _ = sr.contour_stress(c)
    for radii in ((0.3, 0.5), (0.5, 0.3, 0.7), (0.3, 0.3, 0.5)):
        with pytest.raises(ValueError, match="strictly increasing radii"):
            sr.radius_independence_scan(c, T, None, radii)


def test_residue_csv_round_trips():
    c = geom("cylinder", 33)
    T, _ = sr.contour_stress(c)
    rep = sr.radius_independence_scan(c, T, None, (0.5, 0.65, 0.8))
    text = sr.residue_csv(rep)
    assert text.endswith("\n") and "\r" not in text
    rows = text.strip().split("\n")
    assert rows[0] == "radius,flux_1,flux_2,flux_3"
    data = np.loadtxt(io.StringIO(text), delimiter=",", skiprows=1)
    assert data.shape == (3, 4)
    for k, (r, flux) in enumerate(rep.flux_by_radius):
        assert data[k, 0] == r
        assert np.abs(data[k, 1:] - flux).max() <= 1e-16
