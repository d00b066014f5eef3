import numpy as np
import pytest

from surfeit.argument_principle import (
    MOBIUS_DIRECTION,
    EmbeddingSpec,
    build_cylinder_cover,
    disk_identity_spec,
    evaluate,
    gap_derivative,
    gap_point,
    induced_embedding,
    mobius_cover_points,
    mobius_cover_spec,
    mobius_w,
    mobius_w_prime,
    reconstruct_near_boundary,
    reconstruct_surface,
    winding_number,
)
from surfeit.boundary_calculus import BoundaryFunction, BoundaryGrid
from surfeit.errors import ImmersionFailure, NotAdmissible, QuadratureDegraded
from surfeit.forward_models import dn_mobius
from surfeit.trace_equations import NullSpaceBasis, symmetric_trace

DISK_XI = np.array([1.0])


@pytest.fixture(scope="module")
def disk():
    return disk_identity_spec(256)


@pytest.fixture(scope="module")
def mobius():
    return mobius_cover_spec(2.0, 512)


def _curve(grid, k):
    return BoundaryFunction(grid, np.exp(1j * k * grid.arclength))


def test_winding_numbers():
    g = BoundaryGrid.circle(128)
    assert winding_number(_curve(g, 1), 0.0) == 1
    assert winding_number(_curve(g, 1), 2.0) == 0
    assert winding_number(_curve(g, 2), 0.3) == 2


def test_disk_cauchy_formula(disk):
    assert gap_point(disk, DISK_XI, 0.3)[0] == pytest.approx(0.3, abs=1e-14)
    assert gap_derivative(disk, DISK_XI, 0.3 + 0.2j, 1)[0] == pytest.approx(1.0, abs=1e-13)
    assert abs(gap_derivative(disk, DISK_XI, 0.3 + 0.2j, 2)[0]) < 1e-13


def test_constant_component_is_reproduced(disk):
    spec = EmbeddingSpec((disk.traces[0], BoundaryFunction.constant(disk.grid, 1.0 + 0j)))
    for z in (0.3 + 0.2j, -0.5j):
        assert gap_point(spec, np.array([1.0, 0.0]), z)[1] == pytest.approx(1.0, abs=1e-13)


def test_gap_refuses_bad_points(disk):
    with pytest.raises(NotAdmissible):
        gap_point(disk, DISK_XI, 2.0)
    with pytest.raises(QuadratureDegraded):
        gap_point(disk, DISK_XI, 0.999)


def test_mobius_interior_point(mobius):
    zs = np.array([1.3])
    W = mobius_w(zs)[0]
    z = MOBIUS_DIRECTION @ W
    assert np.abs(gap_point(mobius, MOBIUS_DIRECTION, z) - W).max() < 1e-8
    wp = mobius_w_prime(zs)[0]
    d1 = gap_derivative(mobius, MOBIUS_DIRECTION, z, 1)
    assert np.abs(d1 - wp / (MOBIUS_DIRECTION @ wp)).max() < 1e-6


def test_mobius_first_coordinate_is_two_to_one(mobius):
    W = mobius_w(np.array([1.3]))[0]
    with pytest.raises(NotAdmissible):
        gap_point(mobius, np.array([1.0, 0.0]), W[0])


def test_mobius_bulk_accuracy(mobius):
    rng = np.random.default_rng(0)
    r = rng.uniform(0.5 + 0.1, 2.0 - 0.1, 200)
    th = rng.uniform(0, 2 * np.pi, 200)
    zc = r * np.exp(1j * th)
    Z = mobius_w(zc) @ MOBIUS_DIRECTION
    V, D = evaluate(mobius, MOBIUS_DIRECTION, Z, (0, 1))
    assert np.abs(V - mobius_w(zc)).max() < 1e-10
    wp = mobius_w_prime(zc)
    assert np.abs(D - wp / (wp @ MOBIUS_DIRECTION)[:, None]).max() < 1e-9


@pytest.mark.parametrize("radius", [2.0 - 0.02, 0.5 + 0.02 / 4])
def test_mobius_near_boundary_taylor(mobius, radius):
    th = np.linspace(0, 2 * np.pi, 97)[:-1]
    zc = radius * np.exp(1j * th)
    Z = mobius_w(zc) @ MOBIUS_DIRECTION
    V = evaluate(mobius, MOBIUS_DIRECTION, Z)
    assert np.abs(V - mobius_w(zc)).max() < 1e-5


def test_disk_chart_beats_plain_quadrature(disk):
    cover = build_cylinder_cover(disk, DISK_XI)
    cyl = next(c for c in cover if c.kind == "boundary")
    chart = reconstruct_near_boundary(disk, cyl, rhos=np.array([0.0, 0.01, 0.05]))
    assert np.abs(chart.points[:, 0] - chart.zeta).max() < 1e-7
    row0 = chart.coords[:, 1] == 0
    assert np.array_equal(chart.points[row0, 0], disk.values[chart.coords[row0, 0].astype(int), 0])
    near = chart.zeta[chart.coords[:, 1] == 0.01]
    plain = disk.direction(DISK_XI).far(near, 0)[:, 0]
    assert np.abs(plain - near).max() > 1e-3


def test_mobius_chart_near_boundary(mobius):
    cover = build_cylinder_cover(mobius, MOBIUS_DIRECTION)
    cyl = next(c for c in cover if c.kind == "boundary")
    chart = reconstruct_near_boundary(mobius, cyl, rhos=np.array([0.0, 0.05]))
    # invert the injective projection sqrt(2) z on the cover to get the model point
    zc = chart.zeta / np.sqrt(2)
    assert np.abs(chart.points - mobius_w(zc)).max() < 1e-6


def test_disk_cover_counts(disk):
    cover = build_cylinder_cover(disk, DISK_XI)
    kinds = [c.kind for c in cover]
    n_boundary = kinds.count("boundary")
    rho0 = min(c.rho0 for c in cover if c.kind == "boundary")
    assert 2 * np.pi / rho0 / 2 <= n_boundary <= 2 * 2 * np.pi / rho0
    assert 1 <= kinds.count("interior") < n_boundary


def test_non_immersed_direction_is_rejected(disk):
    spec = EmbeddingSpec((disk.traces[0], BoundaryFunction.constant(disk.grid, 1.0 + 0j)))
    with pytest.raises(ImmersionFailure):
        spec.direction(np.array([0.0, 1.0])).speed
    cover = build_cylinder_cover(spec, preferred=[np.array([0.0, 1.0])])
    assert abs(cover[0].direction[1]) < abs(cover[0].direction[0])


def test_disk_cloud_is_the_disk(disk):
    s = reconstruct_surface(disk, build_cylinder_cover(disk, DISK_XI))
    c = s.cloud()[:, 0]
    assert np.abs(c).max() <= 1 + 1e-7
    again = reconstruct_surface(disk, build_cylinder_cover(disk, DISK_XI))
    assert np.array_equal(s.cloud(), again.cloud())


def test_mobius_symmetry_closure():
    spec = mobius_cover_spec(2.0, 256)
    s = reconstruct_surface(spec, build_cylinder_cover(spec, MOBIUS_DIRECTION))
    assert s.symmetry_closure() <= 1e-7
    assert max(o["max_diff"] for o in s.overlap) < 1e-8


def test_spec_round_trip(tmp_path, mobius):
    mobius.save_json(tmp_path / "spec.json")
    back = EmbeddingSpec.load_json(tmp_path / "spec.json")
    assert back.symmetric and np.array_equal(back.values, mobius.values)


def test_symmetric_spec_validated(mobius):
    bad = BoundaryFunction(mobius.grid, mobius.values[:, 0] + 1e-3j)
    with pytest.raises(ValueError):
        EmbeddingSpec((bad, mobius.traces[1]), symmetric=True)


def test_induced_embedding_identity():
    dn = dn_mobius(2.0, 128)
    g = dn.grid
    up = g.doubled()
    z = mobius_cover_points(up, 2.0)[: g.n_nodes]
    tds = [symmetric_trace(dn, BoundaryFunction(g, mobius_w(z)[:, k].real)) for k in range(2)]
    spec = EmbeddingSpec(tuple(td.eta for td in tds), True)
    basis = NullSpaceBasis(g, 3, np.eye(g.n_nodes)[:, :1], np.zeros((g.n_nodes, 0)), np.zeros(1))
    ie = induced_embedding(dn, dn, spec, basis)
    assert np.array_equal(ie.spec.values, spec.values)
    assert ie.trace_shift == 0.0
