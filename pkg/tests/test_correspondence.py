import numpy as np
import pytest

from surfeit.argument_principle import (
    MOBIUS_DIRECTION,
    EmbeddingSpec,
    build_cylinder_cover,
    disk_identity_spec,
    mobius_cover_spec,
    reconstruct_surface,
)
from surfeit.boundary_calculus import BoundaryFunction
from surfeit.correspondence import (
    CSV_FIELDS,
    cutoff,
    default_samples,
    descend_to_base,
    dilatation_field,
    hausdorff_distance,
    lower_bound_check,
    nearest_point_map,
    semi_geodesic_coords,
    stability_report,
    write_reports_csv,
)
from surfeit.errors import DegenerateDifferential, EquivarianceBroken
from surfeit.forward_models import dn_mobius


def _circle(r, n=4000):
    t = 2 * np.pi * np.arange(n) / n
    return np.stack([r * np.cos(t), r * np.sin(t)], axis=1)


def test_hausdorff_oracles():
    A = _circle(1.0)
    assert hausdorff_distance(A, A) == 0.0
    assert hausdorff_distance(A, _circle(1.1)) == pytest.approx(0.1, abs=1e-6)
    assert hausdorff_distance(A[::2], A, directed=True) == 0.0
    assert hausdorff_distance(A, A[::2], directed=True) > 0


def test_cutoff_plateaus():
    r0 = 0.6
    r = np.linspace(0, r0, 601)
    chi = cutoff(r, r0)
    assert np.all(chi[r <= r0 / 3] == 1.0)
    assert np.all(chi[r >= 2 * r0 / 3] == 0.0)
    assert np.all(np.diff(chi) <= 0)


def test_dilatation_oracles():
    rot = np.array([[np.cos(0.3), -np.sin(0.3)], [np.sin(0.3), np.cos(0.3)]])
    K, _ = dilatation_field(2.0 * rot)
    assert abs(K[0] - 1) < 1e-12
    K, ratio = dilatation_field(np.diag([1.0, np.exp(0.2)]))
    assert np.log(K[0]) == pytest.approx(0.4, abs=1e-14)
    assert np.log(ratio[0]) == pytest.approx(0.2, abs=1e-14)
    K, _ = dilatation_field(np.eye(2))
    assert K[0] == 1.0
    with pytest.raises(DegenerateDifferential):
        dilatation_field(np.array([[1.0, 0.0], [0.0, 0.0]]))


@pytest.fixture(scope="module")
def flat_disk():
    spec = disk_identity_spec(128)
    return reconstruct_surface(spec, build_cylinder_cover(spec, np.array([1.0])))


def test_flat_disk_semi_geodesic_chart(flat_disk):
    ch = semi_geodesic_coords(flat_disk)
    theta = flat_disk.spec.grid.arclength
    expected = (1 - ch.levels[None, :]) * np.exp(1j * theta)[:, None]
    assert np.abs(ch.zeta - expected).max() < 1e-8
    assert not ch.flagged


def test_focal_request_is_reduced(flat_disk):
    ch = semi_geodesic_coords(flat_disk, 1.5)
    assert ch.r0 < 1.5 and ch.flagged


def test_normal_translation_is_isometry():
    base = disk_identity_spec(128)
    g = base.grid
    v = 0.04j
    xi = np.array([1.0, 0.0])
    src_spec = EmbeddingSpec((base.traces[0], BoundaryFunction.constant(g, 0j)))
    tgt_spec = EmbeddingSpec((base.traces[0], BoundaryFunction.constant(g, v)))
    src = reconstruct_surface(src_spec, build_cylinder_cover(src_spec, xi))
    tgt = reconstruct_surface(tgt_spec, build_cylinder_cover(tgt_spec, xi))
    cm = nearest_point_map(src, tgt)
    assert np.abs(cm.tgt_points - cm.src_points - np.array([0.0, v])).max() < 1e-8
    assert cm.sup_log_k < 1e-8


def test_boundary_mismatch_precondition(flat_disk):
    g = flat_disk.spec.grid
    far = EmbeddingSpec((BoundaryFunction(g, flat_disk.spec.values[:, 0] + 0.5),))
    tgt = reconstruct_surface(far, build_cylinder_cover(far, np.array([1.0])))
    with pytest.raises(ValueError):
        nearest_point_map(flat_disk, tgt)


@pytest.fixture(scope="module")
def mobius_pair():
    spec = mobius_cover_spec(2.0, 128)
    src = reconstruct_surface(spec, build_cylinder_cover(spec, MOBIUS_DIRECTION))
    chart = semi_geodesic_coords(src)
    samples = default_samples(chart, 2, 16)
    return spec, src, chart, samples


def test_mobius_identity_map(mobius_pair):
    spec, src, chart, samples = mobius_pair
    cm = nearest_point_map(src, src, charts=(chart, chart), samples=samples)
    assert cm.sup_log_k < 1e-8
    assert np.abs(cm.tgt_points - cm.src_points).max() < 1e-8
    assert cm.excluded_fraction == 0.0
    base = descend_to_base(src, src, cm, charts=(chart, chart), samples=samples)
    assert base.equivariance_residual < 1e-10
    assert abs(base.sup_log_k - base.cover_sup_log_k) <= 1e-8
    rep = stability_report(0.0, 0.0, src, src, cm, 0.0)
    assert rep.d_H < 1e-8


def test_mobius_chart_is_symmetric(mobius_pair):
    spec, _, chart, _ = mobius_pair
    p = spec.grid.pairing
    assert np.abs(chart.points[p] - np.conj(chart.points)).max() < 1e-12


def test_broken_symmetry_detected(mobius_pair):
    spec, src, chart, samples = mobius_pair
    g = spec.grid
    bump = 1e-3j * np.cos(g.arclength / 2.0) ** 2
    bad = EmbeddingSpec((BoundaryFunction(g, spec.values[:, 0] + bump), spec.traces[1]), True, tol_sym=1e-2)
    tgt = reconstruct_surface(bad, build_cylinder_cover(bad, MOBIUS_DIRECTION))
    ct = semi_geodesic_coords(tgt, chart.r0)
    cm = nearest_point_map(src, tgt, charts=(chart, ct), samples=samples)
    with pytest.raises(EquivarianceBroken):
        descend_to_base(src, tgt, cm, charts=(chart, ct), samples=samples)


def test_lower_bound_identity():
    dn = dn_mobius(2.0, 128)
    rep = lower_bound_check(dn, dn, 0.1)
    assert max(rep.lhs) == 0.0
    assert rep.constant == 0.0


def test_report_csv_columns(tmp_path, mobius_pair):
    _, src, chart, samples = mobius_pair
    cm = nearest_point_map(src, src, charts=(chart, chart), samples=samples)
    rep = stability_report(0.0, 0.0, src, src, cm, 0.0)
    path = tmp_path / "r.csv"
    write_reports_csv(path, [rep])
    header = path.read_text().splitlines()[0].split(",")
    assert header == CSV_FIELDS
    assert header[:7] == ["epsilon", "t", "d_H", "sup_logK", "dT_estimate", "logK_true", "excluded_fraction"]
