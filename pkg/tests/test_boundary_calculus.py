import numpy as np
import pytest

from surfeit.boundary_calculus import (
    BoundaryFunction,
    BoundaryGrid,
    DNMatrix,
    cl_norm,
    diff,
    fourier_basis,
    integrate,
    op_norm_h1_l2,
)
from surfeit.errors import GridMismatch, NonZeroMean
from surfeit.forward_models import dn_disk


@pytest.fixture
def circle():
    return BoundaryGrid.circle(64)


def test_diff_sin_gives_cos(circle):
    s = circle.arclength
    assert np.abs(diff(circle, np.sin(s)) - np.cos(s)).max() < 1e-12


def test_diff_constant_vanishes(circle):
    assert np.abs(diff(circle, np.full(64, 2.5))).max() < 1e-12


def test_diff_fourier_multiplier(circle):
    s = circle.arclength
    f = np.exp(3j * s)
    assert np.abs(diff(circle, f) - 3j * f).max() < 1e-11


def test_integrate_cos_gives_sin(circle):
    s = circle.arclength
    assert np.abs(integrate(circle, np.cos(s)) - np.sin(s)).max() < 1e-12


def test_integrate_zero(circle):
    assert np.abs(integrate(circle, np.zeros(64))).max() == 0.0


def test_integrate_rejects_nonzero_mean(circle):
    with pytest.raises(NonZeroMean):
        integrate(circle, np.ones(64))


def test_integrate_on_scaled_loop():
    g = BoundaryGrid.circle(128, 4 * np.pi)
    s = g.arclength
    assert np.abs(integrate(g, np.cos(s / 2)) - 2 * np.sin(s / 2)).max() < 1e-12


def test_disk_dn_on_modes(circle):
    dn = dn_disk(64)
    s = circle.arclength
    assert np.abs(dn.matrix @ np.cos(s) - np.cos(s)).max() < 1e-12
    for k in (1, 4, 9):
        e = np.exp(1j * k * s)
        assert np.abs(dn.matrix @ e - k * e).max() < 1e-10
    assert np.abs(dn.matrix @ np.ones(64)).max() < dn.tol_dn


def test_op_norm_values(circle):
    zero = np.zeros((64, 64))
    assert op_norm_h1_l2(zero, 16, circle) == 0.0
    dn = dn_disk(64)
    expected = 16 / np.sqrt(1 + 16**2)
    assert op_norm_h1_l2(dn.matrix, 16, circle) == pytest.approx(expected, rel=1e-10)
    assert op_norm_h1_l2(-2.5 * dn.matrix, 16, circle) == pytest.approx(2.5 * expected, rel=1e-10)


def test_cl_norm_values(circle):
    s = circle.arclength
    f = BoundaryFunction(circle, np.sin(s))
    assert cl_norm(f, 0) == pytest.approx(1.0, abs=1e-3)
    assert cl_norm(f, 1) == pytest.approx(1.0, abs=1e-3)
    assert cl_norm(BoundaryFunction.constant(circle, 3.0), 2) == pytest.approx(3.0)


def test_fourier_basis_orthonormal(circle):
    B, *_ = fourier_basis(circle, 8)
    G = B.T @ (circle.weights[:, None] * B)
    assert np.abs(G - np.eye(B.shape[1])).max() < 1e-12


def test_doubled_grid_pairing():
    g = BoundaryGrid.circle(32, 3.0)
    up = g.doubled()
    assert up.is_doubled and up.n_nodes == 64
    p = up.pairing
    assert np.array_equal(p[p], np.arange(64))
    assert np.all(p != np.arange(64))
    assert up.base().same_as(g)


def test_grid_validation():
    with pytest.raises(ValueError):
        BoundaryGrid((1.0,), (15,))
    with pytest.raises(GridMismatch):
        BoundaryGrid.circle(32).require_same(BoundaryGrid.circle(64))


def test_dn_round_trip(tmp_path, circle):
    dn = dn_disk(64)
    path = tmp_path / "dn.json"
    dn.save_json(path)
    back = DNMatrix.load_json(path)
    assert np.array_equal(back.matrix, dn.matrix)
    assert back.grid.same_as(dn.grid)


def test_boundary_function_arithmetic(circle):
    s = circle.arclength
    f = BoundaryFunction(circle, np.cos(s))
    g = BoundaryFunction(circle, np.sin(s))
    assert np.allclose((f * f + g * g).values, 1.0)
    assert not f.values.flags.writeable
