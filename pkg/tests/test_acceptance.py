"""Acceptance criteria 1 to 9, one recorded PASS/FAIL line each."""

import dataclasses
import time
from pathlib import Path

import numpy as np
import pytest

from surfeit import experiments as ex
from surfeit import forward_models as fm
from surfeit.argument_principle import (
    MOBIUS_DIRECTION,
    build_cylinder_cover,
    evaluate,
    mobius_cover_spec,
    mobius_w,
    reconstruct_near_boundary,
    reconstruct_surface,
)
from surfeit.boundary_calculus import BoundaryFunction, DNMatrix, cl_norm, fourier_basis, op_norm_h1_l2
from surfeit.trace_equations import (
    AdmissibleMapHandle,
    default_tol_null,
    frak_D,
    frak_N,
    frak_Q,
    g1_linearization,
    g2_term,
    g_map,
    null_space,
    transfer_Y,
)

CONFIGS = Path(__file__).resolve().parent.parent / "configs"
EPSILONS = [0.001, 0.00193, 0.00373, 0.0072, 0.0139, 0.0268, 0.0518, 0.1]


def _random(grid, k_max, seed):
    B, *_ = fourier_basis(grid, k_max, include_constant=False)
    return BoundaryFunction(grid, B @ np.random.default_rng(seed).standard_normal(B.shape[1]))


def _rel(a, b):
    return float(np.abs(a - b).max() / np.abs(b).max())


@pytest.fixture(scope="module")
def holed():
    h = 0.04
    mesh = fm.build_mesh("mobius-with-hole", h)
    dn = dataclasses.replace(fm.dn_fem(mesh, 16), mesh_error=fm.mesh_error_estimate("mobius-with-hole", h, 16))
    return mesh, dn, null_space(dn, k_max=4, starts=4)


def test_criterion_1_forward_accuracy(criterion):
    errs = []
    t0 = time.perf_counter()
    for h in (0.03, 0.015):
        dn = fm.dn_fem(fm.build_mesh("disk", h), 16)
        errs.append(fm.spectral_error(dn, fm.dn_disk(dn.grid.sizes[0]), 8))
        if h == 0.03:
            elapsed = time.perf_counter() - t0
    drop = 1 - errs[1] / errs[0]
    ok = errs[0] <= 0.02 and drop >= 0.40 and elapsed <= 120
    assert criterion(1, ok, f"rel error {errs[0]:.2e} at h=0.03, halving h cuts it by {drop:.0%}, {elapsed:.2f} s")


def test_criterion_2_orientable_trace(criterion):
    dn = fm.dn_disk(256)
    f = _random(dn.grid, 8, 0)
    r_an = np.abs(frak_D(dn, f).values).max() / cl_norm(f, 3)
    h = 0.03
    fem = fm.dn_fem(fm.build_mesh("disk", h), 16)
    me = fm.mesh_error_estimate("disk", h, 16)
    g = _random(fem.grid, 8, 0)
    r_fem = np.abs(frak_D(fem, g).values).max() / cl_norm(g, 3)
    ok = r_an <= 1e-8 and r_fem <= 3 * me
    assert criterion(2, ok, f"analytic {r_an:.1e} (<= 1e-8), FEM {r_fem:.1e} (<= 3 x {me:.1e})")


def test_criterion_3_homogeneity_and_algebra(criterion):
    # symmetric, annihilates constants, and is no DN map, so nothing vanishes identically
    base = fm.dn_disk(128)
    B, *_ = fourier_basis(base.grid, 6, include_constant=False)
    C = np.random.default_rng(0).standard_normal((B.shape[1], B.shape[1]))
    dn = DNMatrix(base.grid, base.matrix + 0.3 * B @ (C + C.T) @ (B.T * base.grid.weights))
    f, h = _random(dn.grid, 6, 1), _random(dn.grid, 6, 2)
    G = g_map(dn, f).values
    homog = max(_rel(g_map(dn, c * f).values, c**3 * G) for c in (2.0, -1.5, 0.3))
    quad = _rel(frak_Q(dn, f, f).values, 2 * frak_N(dn, f).values)
    split = _rel(G + g1_linearization(dn, f)(h).values + g2_term(dn, f, h).values + g_map(dn, h).values,
                 g_map(dn, f + h).values)
    ok = homog <= 1e-9 and quad <= 1e-9 and split <= 1e-10
    assert criterion(3, ok, f"homogeneity {homog:.1e}, Q(f,f)=2N(f) {quad:.1e}, splitting {split:.1e}")


def test_criterion_4_null_set_dimension(criterion, holed):
    dn = fm.dn_mobius(2.0, 256)
    nb = null_space(dn, k_max=4, starts=4)
    G = AdmissibleMapHandle(dn, 3)
    tol = default_tol_null(dn)
    worst = max(G.relative_residual(_random(dn.grid, 8, s).values) for s in range(5))
    _, _, hb = holed
    ok = nb.codim == 0 and worst <= tol and hb.codim == 1 and hb.gap_ratio >= 1e2
    assert criterion(4, ok, f"Mobius codim {nb.codim}, max |G f| {worst:.1e} (<= {tol:.0e}); "
                            f"holed FEM codim {hb.codim}, gap {hb.gap_ratio:.0f}")


@pytest.mark.filterwarnings("ignore::surfeit.trace_equations.CRatioWarning")
def test_criterion_5_topology_probes(criterion, tmp_path):
    cases = {
        "disk": ({"family": "disk", "model": "fem", "h": 0.03}, (True, 1)),
        "annulus": ({"family": "annulus", "model": "fem", "h": 0.05}, (True, 0)),
        "mobius": ({"family": "mobius", "model": "analytic", "n": 256}, (False, 0)),
        "mobius-with-hole": ({"family": "mobius-with-hole", "model": "fem", "h": 0.04}, (False, -1)),
    }
    ok, parts = True, []
    for name, (raw, want) in cases.items():
        rep = ex.run_topology_probe(ex.ExperimentConfig(**raw), tmp_path / name)
        got = (rep["orientable"], rep["chi"])
        margin = rep["probe"]["margin"]
        ok &= got == want and margin >= 10
        parts.append(f"{name} {'+' if got[0] else '-'}{got[1]} x{margin:.3g}")
    assert criterion(5, ok, ", ".join(parts))


def test_criterion_6_gap_reconstruction(criterion):
    spec = mobius_cover_spec(2.0, 256)
    rng = np.random.default_rng(0)
    r = np.sqrt(rng.uniform(0.25, 4.0, 4000))
    zc = r * np.exp(1j * rng.uniform(0, 2 * np.pi, 4000))
    # the projected curve is sqrt(2) times the cover boundary circles
    zc = zc[np.sqrt(2) * np.minimum(2.0 - r, r - 0.5) >= 0.1][:400]
    interior = np.abs(evaluate(spec, MOBIUS_DIRECTION, mobius_w(zc) @ MOBIUS_DIRECTION) - mobius_w(zc)).max()
    cover = build_cylinder_cover(spec, MOBIUS_DIRECTION)
    near = max(np.abs(ch.points - mobius_w(ch.zeta / np.sqrt(2))).max()
               for ch in (reconstruct_near_boundary(spec, c, rhos=np.array([0.02]))
                          for c in cover if c.kind == "boundary"))
    closure = reconstruct_surface(spec, cover).symmetry_closure()
    ok = interior <= 1e-6 and near <= 1e-5 and closure <= 1e-7
    assert criterion(6, ok, f"interior {interior:.1e}, rho=0.02 {near:.1e}, closure {closure:.1e}")


@pytest.fixture(scope="module")
def sweeps(tmp_path_factory):
    out, wall = {}, 0.0
    for name in ("mobius", "annulus"):
        cfg = ex.load_config(CONFIGS / f"{name}_sweep.yaml")
        t0 = time.perf_counter()
        out[name] = ex.run_stability_sweep(cfg, tmp_path_factory.mktemp(name))
        wall += time.perf_counter() - t0
    return out, wall


def test_criterion_7_null_test(criterion, sweeps, tmp_path):
    res, _ = sweeps
    null = res["mobius"].null_level
    cfg = ex.load_config(CONFIGS / "mobius_sweep.yaml")
    me = ex.build_model(cfg)[1].mesh_error
    cfg.sweep = ex.SweepSpec("conformal", (0.1,))
    conf = ex.run_stability_sweep(cfg, tmp_path)
    dT_conf = conf.reports[0].dT_estimate
    ok = (null["sup_logK"] <= 5e-3 and null["d_H"] <= 1e-5 and null["t_conformal"] <= 3 * me
          and conf.verdicts["conformal_flat"])
    assert criterion(7, ok, f"identity sup log K {null['sup_logK']:.1e}, d_H {null['d_H']:.1e}; conformal d_op "
                            f"{null['t_conformal']:.1e} (<= 3 x {me:.1e}), d_T {dT_conf:.1e}")


def test_criterion_8_scaling_laws(criterion, sweeps):
    res, wall = sweeps
    m, a = res["mobius"], res["annulus"]
    c = np.array([r.lower_bound_c for s in (m, a) for r in s.reports if np.isfinite(r.lower_bound_c)])
    failed = sum(r.status != "ok" for s in (m, a) for r in s.reports)
    ok = (m.fits["dT_vs_t"].slope >= 0.30 and a.fits["dT_vs_t"].slope >= 0.8
          and min(m.fits["dH_vs_t"].slope, a.fits["dH_vs_t"].slope) >= 0.30
          and m.verdicts["lower_bound_stable"] and a.verdicts["lower_bound_stable"]
          and wall <= 1800 and failed == 0)
    assert criterion(8, ok, f"d_T slope Mobius {m.fits['dT_vs_t'].slope:.2f}, annulus {a.fits['dT_vs_t'].slope:.2f}; "
                            f"d_H slopes {m.fits['dH_vs_t'].slope:.2f}/{a.fits['dH_vs_t'].slope:.2f}; "
                            f"c spread x{c.max() / c.min():.2f}; {failed} failed rows; {wall / 60:.1f} min")


def test_criterion_9_transfer_map(criterion, holed):
    mesh, dn, nb = holed
    f = BoundaryFunction(dn.grid, nb.anchor)
    G = AdmissibleMapHandle(dn, 3)
    identity = np.array_equal(transfer_Y(G, G, nb, f).values, f.values)
    ts, ys = [], []
    for eps in EPSILONS:
        # the skew profile breaks the mirror symmetry shared by the hole and the default profile
        m2 = fm.perturb_metric(mesh, fm.PerturbationSpec(eps, "shear", "skew"))
        dn2 = dataclasses.replace(fm.dn_fem(m2, 16), mesh_error=dn.mesh_error)
        y = transfer_Y(G, AdmissibleMapHandle(dn2, 3), nb, f)
        ts.append(op_norm_h1_l2(dn2 - dn))
        ys.append(cl_norm(BoundaryFunction(dn.grid, y.values - f.values), 4))
    fit = ex.fit_loglog(ts, ys)
    monotone = bool(np.all(np.diff(ys) > 0))
    ok = identity and monotone and fit.slope >= 0.30
    assert criterion(9, ok, f"identity exact {identity}, monotone {monotone}, slope {fit.slope:.2f} vs d_op")
