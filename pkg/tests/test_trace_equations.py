import numpy as np
import pytest

from surfeit.boundary_calculus import BoundaryFunction, BoundaryGrid, DNMatrix, fourier_basis
from surfeit.errors import DenominatorDegenerate, RankAmbiguous
from surfeit.forward_models import dn_annulus, dn_disk, dn_mobius, dn_mobius_hole
from surfeit.trace_equations import (
    AdmissibleMapHandle,
    NullSpaceBasis,
    c_ratio,
    euler_characteristic,
    frak_D,
    frak_N,
    frak_Q,
    g1_linearization,
    g2_term,
    g_map,
    null_space,
    orientability_probe,
    orientable_trace,
    read_codim,
    symmetric_trace,
    transfer_trace,
)


def _random(grid, k_max, rng):
    B, *_ = fourier_basis(grid, k_max, include_constant=False)
    return BoundaryFunction(grid, B @ rng.standard_normal(B.shape[1]))


@pytest.fixture(scope="module")
def mobius():
    return dn_mobius(2.0, 128)


@pytest.fixture(scope="module")
def hole():
    return dn_mobius_hole()


def _rel(a, b):
    return np.abs(a - b).max() / np.abs(b).max()


@pytest.fixture(scope="module")
def generic():
    # a symmetric matrix annihilating constants that is no DN map, so N, D, G do not vanish
    dn = dn_disk(128)
    rng = np.random.default_rng(0)
    B, *_ = fourier_basis(dn.grid, 6, include_constant=False)
    C = rng.standard_normal((B.shape[1], B.shape[1]))
    E = B @ (C + C.T) @ (B.T * dn.grid.weights)
    return DNMatrix(dn.grid, dn.matrix + 0.3 * E)


def test_q_is_twice_n_and_symmetric(generic):
    rng = np.random.default_rng(1)
    f, h = _random(generic.grid, 6, rng), _random(generic.grid, 6, rng)
    assert _rel(frak_Q(generic, f, f).values, 2 * frak_N(generic, f).values) < 1e-9
    q = frak_Q(generic, f, h).values
    assert np.abs(q - frak_Q(generic, h, f).values).max() < 1e-12 * np.abs(q).max()


@pytest.mark.parametrize("name", ["disk", "annulus", "mobius"])
def test_n_vanishes_for_true_dn_maps(name):
    dn = {"disk": dn_disk(128), "annulus": dn_annulus(0.5, 128), "mobius": dn_mobius(2.0, 128)}[name]
    f = _random(dn.grid, 6, np.random.default_rng(1))
    assert np.abs(frak_N(dn, f).values).max() < 1e-10


def test_constants_are_null_for_every_operator(generic):
    rng = np.random.default_rng(2)
    one = BoundaryFunction.constant(generic.grid, 1.7)
    h = _random(generic.grid, 6, rng)
    scale = np.abs(frak_Q(generic, h, h).values).max()
    assert np.abs(frak_Q(generic, one, h).values).max() < 1e-10 * scale
    assert np.abs(frak_N(generic, one).values).max() < 1e-10
    assert np.abs(frak_D(generic, one).values).max() < 1e-10
    assert np.abs(g_map(generic, one).values).max() < 1e-10


def test_disk_cos_is_conjugate_pair():
    dn = dn_disk(128)
    f = BoundaryFunction(dn.grid, np.cos(dn.grid.arclength))
    assert np.abs(frak_D(dn, f).values).max() < 1e-10
    assert np.abs(frak_N(dn, f).values).max() < 1e-10


def test_mobius_d_nonvanishing(mobius):
    f = BoundaryFunction(mobius.grid, np.cos(mobius.grid.arclength / 2))
    assert np.abs(frak_D(mobius, f).values).max() > 1e-2


@pytest.mark.parametrize("which", ["generic", "hole"])
def test_g_homogeneity_and_splitting(which, generic, hole):
    dn = generic if which == "generic" else hole
    rng = np.random.default_rng(3)
    f, h = _random(dn.grid, 6, rng), _random(dn.grid, 6, rng)
    G = g_map(dn, f).values
    assert _rel(g_map(dn, 2 * f).values, 8 * G) < 1e-10
    lhs = g_map(dn, f + h).values
    rhs = G + g1_linearization(dn, f)(h).values + g2_term(dn, f, h).values + g_map(dn, h).values
    assert _rel(rhs, lhs) < 1e-10
    assert _rel(g1_linearization(dn, f)(f).values, 3 * G) < 1e-10
    s = 1e-5
    fd = (g_map(dn, f + s * h).values - G) / s
    assert _rel(g1_linearization(dn, f)(h).values, fd) < 1e-4


def test_c_ratio_linear(mobius):
    rng = np.random.default_rng(4)
    f = _random(mobius.grid, 3, rng)
    assert c_ratio(mobius, 2 * f) == pytest.approx(2 * c_ratio(mobius, f), rel=1e-8)
    assert c_ratio(mobius, BoundaryFunction.constant(mobius.grid, 3.0)) == 0.0


def test_c_ratio_raises_on_orientable():
    dn = dn_disk(128)
    f = BoundaryFunction(dn.grid, np.cos(dn.grid.arclength))
    with pytest.raises(DenominatorDegenerate):
        c_ratio(dn, f)


def test_orientability_probe_oracles(mobius):
    v = orientability_probe(dn_disk(128))
    assert v.orientable and max(v.residuals) <= 1e-9
    v = orientability_probe(mobius)
    assert not v.orientable and min(v.residuals) >= 1e-2
    rng = np.random.default_rng(5)
    E = rng.standard_normal(mobius.matrix.shape)
    E = 1e-6 * E / np.linalg.norm(E, 2)
    noisy = DNMatrix(mobius.grid, mobius.matrix + E)
    assert not orientability_probe(noisy).orientable


def test_euler_characteristic_orientable():
    assert euler_characteristic(dn_disk(128), True) == 1
    assert euler_characteristic(dn_annulus(0.5, 128), True) == 0


def test_read_codim_gap_rule():
    assert read_codim(np.array([1e-12, 1e-13]), 1e-11).codim == 0
    assert read_codim(np.array([0.5, 1e-9]), 1e-11).codim == 1
    with pytest.raises(RankAmbiguous):
        read_codim(np.array([0.5, 0.1, 0.05]), 1e-11)


def test_mobius_null_space_is_everything(mobius):
    nb = null_space(mobius, k_max=6, starts=4)
    assert nb.codim == 0
    rng = np.random.default_rng(6)
    for _ in range(3):
        f = _random(mobius.grid, 6, rng)
        G = AdmissibleMapHandle(mobius, 3)
        assert G.relative_residual(f.values) <= 5e-3


def test_holed_semianalytic_null_space(hole):
    nb = null_space(hole, k_max=4, starts=4)
    assert nb.codim == 1
    assert nb.gap_ratio >= 1e2
    # doubling the anchor scale leaves the null set unchanged
    f0 = BoundaryFunction(hole.grid, 2 * nb.anchor)
    G = AdmissibleMapHandle(hole, 3)
    assert G.relative_residual(f0.values) == pytest.approx(G.relative_residual(nb.anchor), rel=1e-6)


def test_null_space_round_trip(tmp_path, mobius):
    nb = null_space(mobius, k_max=4, starts=2)
    nb.save_json(tmp_path / "ns.json")
    back = NullSpaceBasis.load_json(tmp_path / "ns.json")
    assert np.array_equal(back.basis, nb.basis) and back.codim == nb.codim


def test_symmetric_trace_structure(mobius):
    f = BoundaryFunction(mobius.grid, np.cos(mobius.grid.arclength / 2))
    td = symmetric_trace(mobius, f)
    up = td.upsilon
    h = td.h.values
    assert up.is_doubled
    assert np.abs(h[up.pairing] + h).max() < 1e-12
    assert np.array_equal(td.real_part.values, f.values[up.projection])


def test_constant_trace():
    dn = dn_disk(64)
    f = BoundaryFunction.constant(dn.grid, 2.0)
    td = orientable_trace(dn, f)
    assert np.abs(td.eta.values - 2.0).max() < 1e-12


def test_disk_trace_is_boundary_of_identity():
    dn = dn_disk(128)
    s = dn.grid.arclength
    td = orientable_trace(dn, BoundaryFunction(dn.grid, np.cos(s)))
    assert np.abs(td.eta.values - np.exp(1j * s)).max() < 1e-10


def test_annulus_trace_of_identity():
    rho = 0.5
    dn = dn_annulus(rho, 128)
    g = dn.grid
    r = np.where(g.component_index == 0, 1.0, rho)
    theta = g.arclength / r
    # the inner loop is traversed clockwise as part of the oriented boundary
    z = r * np.exp(1j * np.where(g.component_index == 0, theta, -theta))
    td = orientable_trace(dn, BoundaryFunction(g, z.real))
    assert np.abs(td.eta.values - z).max() < 1e-8


def test_transfer_identity_is_exact(mobius):
    nb = null_space(mobius, k_max=4, starts=2)
    f = BoundaryFunction(mobius.grid, np.cos(mobius.grid.arclength / 2))
    td = symmetric_trace(mobius, f)
    out = transfer_trace(mobius, mobius, nb, td)
    assert np.array_equal(out.h.values, td.h.values)
    assert np.array_equal(out.f.values, td.f.values)


@pytest.mark.filterwarnings("ignore::surfeit.trace_equations.CRatioWarning")
def test_transfer_with_empty_complement_keeps_real_part(mobius):
    g = mobius.grid
    nb = NullSpaceBasis(g, 3, np.eye(g.n_nodes)[:, :1], np.zeros((g.n_nodes, 0)), np.zeros(1))
    f = BoundaryFunction(g, np.cos(g.arclength / 2))
    td = symmetric_trace(mobius, f)
    dn2 = DNMatrix(g, mobius.matrix * 1.01)
    out = transfer_trace(mobius, dn2, nb, td)
    assert np.abs(out.f.values - f.values).max() < 1e-12


def test_grid_mismatch_rejected(mobius):
    f = BoundaryFunction(BoundaryGrid.circle(64), np.zeros(64))
    with pytest.raises(Exception):
        symmetric_trace(mobius, f)
