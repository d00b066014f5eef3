"""Near-isometric correspondence between reconstructed surfaces.

The map ``alpha`` sends a sample of the source image to the minimizer of

    E(xi, .) = (1 - chi) |xi' - xi|^2 + chi (dist(s, s')^2 + |r - r'|^2)

over the target image, where ``(s, r)`` are semi-geodesic coordinates
(boundary arc length, induced geodesic distance to the boundary) and ``chi``
is a cutoff equal to one for ``r <= r0/3`` and zero for ``r >= 2 r0/3``.
Dilatations use the squared axis ratio of the differential in orthonormal
frames of the induced metrics; the unsquared ratio is reported alongside.
"""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from numpy.polynomial import chebyshev as C
from scipy.spatial import cKDTree

from .argument_principle import ReconstructedSurface, _lattice
from .boundary_calculus import SCHEMA_VERSION, DNMatrix, fourier_basis
from .errors import DegenerateDifferential, EquivarianceBroken, ImmediateFocusing, NewtonDiverged

N_LEVELS = 13
STEPS_PER_R0 = 64
PROBE_STEPS = 16
K_DEGENERATE = 1e-10


def hausdorff_distance(A, B, directed: bool = False) -> float:
    """Largest nearest-neighbour distance between two point clouds in ``C^n``."""
    A = np.atleast_2d(np.asarray(A))
    B = np.atleast_2d(np.asarray(B))
    if A.size == 0 or B.size == 0:
        raise ValueError("point clouds must be non-empty")
    a = np.ascontiguousarray(A).view(float) if np.iscomplexobj(A) else A
    b = np.ascontiguousarray(B).view(float) if np.iscomplexobj(B) else B
    dab = float(cKDTree(b).query(a)[0].max())
    if directed:
        return dab
    return max(dab, float(cKDTree(a).query(b)[0].max()))


def cutoff(r, r0: float) -> np.ndarray:
    """Quintic smoothstep: one on ``[0, r0/3]``, zero beyond ``2 r0/3``."""
    x = np.clip((np.asarray(r, dtype=float) - r0 / 3) / (r0 / 3), 0.0, 1.0)
    return 1.0 - x**3 * (10 - 15 * x + 6 * x**2)


# ----------------------------------------------------------------------
# semi-geodesic coordinates


def _lobatto(m: int, r0: float) -> np.ndarray:
    return r0 * (1 - np.cos(np.pi * np.arange(m) / (m - 1))) / 2


@dataclass(eq=False)
class SemiGeodesicChart:
    """Inward normal geodesics of the induced metric from every boundary node.

    ``zeta[i, j]`` is the projected position after induced distance
    ``levels[j]`` from node ``i``; ``points`` the surface points there.
    """

    surface: ReconstructedSurface
    r0: float
    r0_request: float
    levels: np.ndarray
    zeta: np.ndarray
    velocity: np.ndarray
    points: np.ndarray
    det: np.ndarray
    orth_residual: float
    flagged: bool = False
    _interp: dict = field(default_factory=dict, repr=False)

    @property
    def grid(self):
        return self.surface.spec.grid

    @property
    def G(self) -> np.ndarray:
        """``|d Xi / d s|^2`` on the sampled rectangle."""
        g = self.grid
        from .boundary_calculus import diff

        dP = diff(g, self.points.reshape(g.n_nodes, -1)).reshape(self.points.shape)
        return np.sum(np.abs(dP) ** 2, axis=-1)

    def _coeffs(self, c: int):
        if c not in self._interp:
            g = self.grid
            V = self.points[g.slice(c)]  # (m_c, levels, n)
            m_c = V.shape[0]
            a = np.fft.fft(V, axis=0) / m_c
            a[m_c // 2] = 0.0
            kappa = np.fft.fftfreq(m_c, d=g.lengths[c] / m_c) * 2 * np.pi
            x = 2 * self.levels / self.r0 - 1
            deg = len(self.levels) - 1
            flat = a.transpose(1, 0, 2).reshape(len(self.levels), -1)
            cheb = C.chebfit(x, flat, deg).reshape(deg + 1, m_c, -1).transpose(1, 0, 2)
            self._interp[c] = (kappa, cheb)
        return self._interp[c]

    def interpolate(self, comp: np.ndarray, s: np.ndarray, r: np.ndarray, derivs: bool = False):
        """Point (and ``d/ds``, ``d/dr``) at continuous ``(s, r)`` on loop ``comp``."""
        comp = np.asarray(comp, dtype=int)
        s = np.asarray(s, dtype=float)
        r = np.asarray(r, dtype=float)
        n = self.points.shape[-1]
        V = np.empty((len(s), n), dtype=complex)
        Vs = np.empty_like(V)
        Vr = np.empty_like(V)
        deg = len(self.levels) - 1
        D = C.chebder(np.eye(deg + 1), axis=0)
        for c in np.unique(comp):
            idx = np.flatnonzero(comp == c)
            kappa, cheb = self._coeffs(int(c))
            E = np.exp(1j * np.outer(s[idx], kappa))
            x = 2 * r[idx] / self.r0 - 1
            T = C.chebvander(x, deg)
            V[idx] = np.einsum("pk,pj,kjn->pn", E, T, cheb)
            if derivs:
                Vs[idx] = np.einsum("pk,pj,kjn->pn", E * (1j * kappa), T, cheb)
                Tp = C.chebvander(x, deg - 1) @ D * (2 / self.r0)
                Vr[idx] = np.einsum("pk,pj,kjn->pn", E, Tp, cheb)
        return (V, Vs, Vr) if derivs else V


def _shoot(surface: ReconstructedSurface, levels: np.ndarray, step: float, nodes=None):
    spec = surface.spec
    d = spec.direction(surface.direction)
    nodes = np.arange(spec.grid.n_nodes) if nodes is None else np.asarray(nodes)
    z = d.eta[nodes].copy()
    lam0 = np.linalg.norm(d.taylor[1][nodes], axis=1)
    v = 1j * d.deta[nodes] / np.abs(d.deta[nodes]) / lam0

    def acc(zz, vv):
        D1, D2 = surface.evaluate(zz, (1, 2), check_inside=False)
        w = np.sum(D2 * np.conj(D1), axis=1) / np.sum(np.abs(D1) ** 2, axis=1)
        return -w * vv**2

    Z = np.empty((len(z), len(levels)), dtype=complex)
    Vv = np.empty_like(Z)
    Z[:, 0], Vv[:, 0] = z, v
    for j in range(1, len(levels)):
        seg = levels[j] - levels[j - 1]
        k = max(1, int(np.ceil(seg / step)))
        h = seg / k
        for _ in range(k):
            a1 = acc(z, v)
            z2, v2 = z + h / 2 * v, v + h / 2 * a1
            a2 = acc(z2, v2)
            z3, v3 = z + h / 2 * v2, v + h / 2 * a2
            a3 = acc(z3, v3)
            z4, v4 = z + h * v3, v + h * a3
            a4 = acc(z4, v4)
            z = z + h / 6 * (v + 2 * v2 + 2 * v3 + v4)
            v = v + h / 6 * (a1 + 2 * a2 + 2 * a3 + a4)
        Z[:, j], Vv[:, j] = z, v
    return Z, Vv


def _shoot_all(surface: ReconstructedSurface, levels: np.ndarray, step: float):
    """Geodesics from every node plus the surface points along them.

    On a symmetric surface the deck involution is an isometry, so the second
    sheet's geodesics are the conjugates of the first sheet's and are
    mirrored instead of integrated.
    """
    spec = surface.spec
    g = spec.grid
    xi = surface.direction
    if not spec.symmetric:
        Z, Vv = _shoot(surface, levels, step)
        return Z, Vv, None
    half = np.arange(g.n_nodes // 2)
    mate = g.pairing[half]
    Zh, Vh = _shoot(surface, levels, step, half)
    P, D1 = surface.evaluate(Zh.ravel(), (0, 1), check_inside=False)
    P = P.reshape(Zh.shape + (spec.n,))
    dP = D1.reshape(P.shape) * Vh[..., None]
    Z = np.empty((g.n_nodes, len(levels)), dtype=complex)
    Vv = np.empty_like(Z)
    pts = np.empty((g.n_nodes, len(levels), spec.n), dtype=complex)
    Z[half], Vv[half], pts[half] = Zh, Vh, P
    Z[mate], Vv[mate], pts[mate] = np.conj(P) @ xi, np.conj(dP) @ xi, np.conj(P)
    d = spec.direction(xi)
    Z[mate, 0] = d.eta[mate]
    return Z, Vv, pts


def feature_size(surface: ReconstructedSurface) -> float:
    """Induced distance scale: ``min_i |dXi_i| * dist(eta_i, far part of the curve)``."""
    spec = surface.spec
    g = spec.grid
    d = spec.direction(surface.direction)
    lam = np.linalg.norm(d.taylor[1], axis=1)
    comp = g.component_index
    s = g.arclength
    out = np.inf
    for i in range(g.n_nodes):
        L = g.lengths[comp[i]]
        ds = np.abs(s - s[i])
        far = (comp != comp[i]) | (np.minimum(ds, L - ds) > L / 4)
        out = min(out, lam[i] * np.min(np.abs(d.eta[far] - d.eta[i])))
    return float(out)


def semi_geodesic_coords(surface: ReconstructedSurface, r0_request: float | None = None,
                         n_levels: int = N_LEVELS, min_fraction: float = 1 / 16) -> SemiGeodesicChart:
    """Shoot inward normal geodesics and keep the largest regular strip.

    Without a request the strip is half of the regularity radius found from
    ``feature_size / 2``.  Regularity means a positive Jacobian of
    ``(s, r) -> zeta`` on every sample.
    """
    from .boundary_calculus import diff

    auto = r0_request is None
    req = feature_size(surface) / 2 if auto else float(r0_request)
    g = surface.spec.grid

    def regular_radius(r0, steps):
        levels = _lobatto(n_levels, r0)
        Z, Vv, pts = _shoot_all(surface, levels, r0 / steps)
        det = np.imag(np.conj(diff(g, Z)) * Vv)
        bad = np.flatnonzero(np.any(det[:, 1:] <= 0, axis=0))
        return (None if bad.size == 0 else 0.7 * levels[bad[0] + 1]), levels, Z, Vv, det, pts

    # coarse pass to locate the regular strip, then an accurate pass on it
    r0 = req
    while True:
        r_bad = regular_radius(r0, PROBE_STEPS)[0]
        if r_bad is None:
            break
        r0 = r_bad
        if r0 < min_fraction * req:
            raise ImmediateFocusing(f"regular strip {r0:.3e} below the usable minimum")
    if auto:
        r0 = r0 / 2
    while True:
        r_bad, levels, Z, Vv, det, pts = regular_radius(r0, STEPS_PER_R0)
        if r_bad is None:
            break
        r0 = r_bad
        if r0 < min_fraction * req:
            raise ImmediateFocusing(f"regular strip {r0:.3e} below the usable minimum")
    if pts is None:
        pts = surface.evaluate(Z.ravel(), 0, check_inside=False).reshape(Z.shape + (surface.spec.n,))
    pts[:, 0] = surface.spec.values
    d = surface.spec.direction(surface.direction)
    orth = float(np.max(np.abs(np.real(np.conj(d.deta) * Vv[:, 0])) / np.abs(d.deta) / np.abs(Vv[:, 0])))
    r_req = req / 2 if auto else req
    return SemiGeodesicChart(surface, r0, r_req, levels, Z, Vv, pts, det, orth, flagged=r0 < r_req * (1 - 1e-12))


# ----------------------------------------------------------------------
# dilatation


def dilatation_field(M: np.ndarray, threshold: float = K_DEGENERATE) -> tuple:
    """``K = (s1/s2)^2`` and the unsquared ratio for a stack of 2x2 differentials."""
    M = np.asarray(M, dtype=float).reshape(-1, 2, 2)
    sv = np.linalg.svd(M, compute_uv=False)
    if np.any(sv[:, 1] <= threshold * np.maximum(sv[:, 0], 1e-300)):
        raise DegenerateDifferential("differential is singular at some sample")
    ratio = sv[:, 0] / sv[:, 1]
    return ratio**2, ratio


# ----------------------------------------------------------------------
# nearest-point map


@dataclass(eq=False)
class CorrespondenceMap:
    src_points: np.ndarray
    tgt_points: np.ndarray
    zone: np.ndarray  # 0 boundary strip, 1 blend, 2 interior
    chi: np.ndarray
    differential: np.ndarray
    K: np.ndarray
    K_unsquared: np.ndarray
    excluded: np.ndarray
    src_coords: np.ndarray
    tgt_coords: np.ndarray
    boundary_residual: float
    r0: float
    meta: dict = field(default_factory=dict)

    @property
    def sup_log_k(self) -> float:
        keep = ~self.excluded
        return float(np.log(self.K[keep]).max()) if keep.any() else float("nan")

    @property
    def excluded_fraction(self) -> float:
        return float(self.excluded.mean())


def _wrap(ds: np.ndarray, L: np.ndarray) -> np.ndarray:
    return (ds + L / 2) % L - L / 2


def _blend_solve(tgt: SemiGeodesicChart, comp, s, r, xi, chi, L, iters: int = 30, tol: float = 1e-13):
    """Gauss-Newton for ``E`` over target semi-geodesic coordinates, all samples at once."""
    sp, rp = s.copy(), r.copy()
    wa = np.sqrt(1 - chi)[:, None]
    wb = np.sqrt(chi)
    for _ in range(iters):
        V, Vs, Vr = tgt.interpolate(comp, sp, rp, derivs=True)
        res = np.concatenate([(wa * (V - xi)).view(float).reshape(len(s), -1),
                              (wb * _wrap(sp - s, L))[:, None], (wb * (rp - r))[:, None]], axis=1)
        Js = np.concatenate([(wa * Vs).view(float).reshape(len(s), -1), wb[:, None], np.zeros((len(s), 1))], axis=1)
        Jr = np.concatenate([(wa * Vr).view(float).reshape(len(s), -1), np.zeros((len(s), 1)), wb[:, None]], axis=1)
        J = np.stack([Js, Jr], axis=2)
        A = np.einsum("pai,paj->pij", J, J)
        b = np.einsum("pai,pa->pi", J, res)
        step = np.linalg.solve(A, b[..., None])[..., 0]
        sp = sp - step[:, 0]
        rn = np.clip(rp - step[:, 1], 0.0, tgt.r0)
        moved = np.maximum(np.abs(step[:, 0]), np.abs(rn - rp))
        rp = rn
        if np.max(moved) < tol * max(1.0, tgt.r0):
            return sp, rp
    if np.max(moved) > 1e-8 * max(1.0, tgt.r0):
        raise NewtonDiverged("blended minimization did not converge")
    return sp, rp


def _interior_solve(tgt: ReconstructedSurface, z0: np.ndarray, xi: np.ndarray, iters: int = 40, tol: float = 1e-14):
    """Gauss-Newton for ``|Xi'(z) - xi|^2`` in the target projection coordinate."""
    z = z0.astype(complex).copy()
    scale = max(1.0, float(np.abs(z0).max()))
    for _ in range(iters):
        P, D = tgt.evaluate(z, (0, 1), check_inside=False)
        step = np.sum(np.conj(D) * (P - xi), axis=1) / np.sum(np.abs(D) ** 2, axis=1)
        z = z - step
        if np.max(np.abs(step)) < tol * scale:
            return z
    if np.max(np.abs(step)) > 1e-9 * scale:
        raise NewtonDiverged("nearest-point iteration did not converge")
    return z


def interior_samples(chart: SemiGeodesicChart, density: int = 24) -> np.ndarray:
    """Lattice points of the projection plane lying beyond the semi-geodesic strip."""
    surf = chart.surface
    d = surf.spec.direction(surf.direction)
    Z, _ = _lattice(d.eta, density)
    strip = float(np.max(np.abs(chart.zeta[:, -1] - chart.zeta[:, 0])))
    dist = np.array([np.min(np.abs(d.eta - z)) for z in Z])
    Z = Z[dist > strip]
    return Z[d.winding(Z) == 1]


@dataclass
class SampleSet:
    nodes: np.ndarray
    level: np.ndarray
    zeta: np.ndarray  # interior lattice samples


def default_samples(chart: SemiGeodesicChart, stride: int = 1, density: int = 24) -> SampleSet:
    g = chart.grid
    nodes = np.concatenate([np.arange(g.offsets[c], g.offsets[c] + g.sizes[c], stride) for c in range(g.n_components)])
    N, L = np.meshgrid(nodes, np.arange(len(chart.levels)), indexing="ij")
    return SampleSet(N.ravel(), L.ravel(), interior_samples(chart, density))


def nearest_point_map(src: ReconstructedSurface, tgt: ReconstructedSurface, r0: float | None = None,
                      stride: int = 1, density: int = 24, fd_step: float = 1e-5,
                      charts: tuple | None = None, samples: SampleSet | None = None) -> CorrespondenceMap:
    """Minimize the blended functional for every source sample and difference the result.

    Samples are semi-geodesic grid points ``(node, level)`` and projection
    lattice points beyond the strip.  The strip ``r <= r0/3`` maps by the
    identity of semi-geodesic coordinates; the interior zone by nearest
    points; between them the blended functional is minimized by Gauss-Newton.
    """
    if charts is None:
        cs = semi_geodesic_coords(src, r0)
        ct = semi_geodesic_coords(tgt, cs.r0)
        if ct.r0 < cs.r0:
            cs = semi_geodesic_coords(src, ct.r0)
    else:
        cs, ct = charts
    r0 = cs.r0
    g = cs.grid
    gap = hausdorff_distance(src.spec.values, tgt.spec.values)
    if gap > r0 / 4:
        raise ValueError(f"boundary clouds {gap:.3e} apart, more than r0/4 = {r0 / 4:.3e}")
    smp = default_samples(cs, stride, density) if samples is None else samples
    comp = g.component_index[smp.nodes]
    Lc = np.asarray(g.lengths)[comp]
    s = g.arclength[smp.nodes]
    r = cs.levels[smp.level]
    chi = cutoff(r, r0)
    Gs = cs.G
    Gt = ct.G

    n_sg, n_in = len(s), len(smp.zeta)
    m = n_sg + n_in
    src_pts = np.empty((m, src.spec.n), dtype=complex)
    tgt_pts = np.empty_like(src_pts)
    M = np.zeros((m, 2, 2))
    src_c = np.zeros((m, 2))
    tgt_c = np.zeros((m, 2))
    zone = np.full(m, 2, dtype=int)
    chis = np.zeros(m)
    excluded = np.zeros(m, bool)
    src_pts[:n_sg] = cs.points[smp.nodes, smp.level]
    src_c[:n_sg] = np.stack([s, r], axis=1)
    chis[:n_sg] = chi

    # strip: identity in semi-geodesic coordinates
    strip = chi >= 1.0
    ids = np.flatnonzero(strip)
    zone[ids] = 0
    tgt_pts[ids] = ct.points[smp.nodes[strip], smp.level[strip]]
    tgt_c[ids] = src_c[ids]
    M[ids, 0, 0] = np.sqrt(Gt[smp.nodes[strip], smp.level[strip]] / Gs[smp.nodes[strip], smp.level[strip]])
    M[ids, 1, 1] = 1.0

    # blend: Gauss-Newton on target semi-geodesic coordinates
    blend = (chi > 0) & ~strip
    ib = np.flatnonzero(blend)
    zone[ib] = 1
    if ib.size:
        cb, sb, rb, Lb = comp[blend], s[blend], r[blend], Lc[blend]
        h = fd_step * r0

        def solve(ss, rr):
            xi = cs.interpolate(cb, ss, rr)
            return _blend_solve(ct, cb, ss, rr, xi, cutoff(rr, r0), Lb)

        sp, rp = solve(sb, rb)
        tgt_pts[ib] = ct.interpolate(cb, sp, rp)
        tgt_c[ib] = np.stack([sp, rp], axis=1)
        cols = []
        for ds, dr in ((h, 0.0), (0.0, h)):
            a = solve(sb + ds, rb + dr)
            b = solve(sb - ds, rb - dr)
            cols.append(np.stack([_wrap(a[0] - b[0], Lb), a[1] - b[1]], axis=1) / (2 * h))
        J = np.stack(cols, axis=2)
        _, Vs_s, _ = cs.interpolate(cb, sb, rb, derivs=True)
        _, Vs_t, _ = ct.interpolate(cb, sp, rp, derivs=True)
        gs = np.sqrt(np.sum(np.abs(Vs_s) ** 2, axis=1))
        gt = np.sqrt(np.sum(np.abs(Vs_t) ** 2, axis=1))
        M[ib] = J
        M[ib, 0, :] *= gt[:, None]
        M[ib, :, 0] /= gs[:, None]

    # interior: nearest points in the target projection coordinate
    inner = np.concatenate([np.flatnonzero(chi <= 0), n_sg + np.arange(n_in)])
    if inner.size:
        zsrc = np.concatenate([cs.zeta[smp.nodes[chi <= 0], smp.level[chi <= 0]], smp.zeta])
        xi_src = src.evaluate(zsrc, 0, check_inside=False)
        src_pts[inner] = xi_src
        src_c[inner] = np.stack([zsrc.real, zsrc.imag], axis=1)
        tcloud = ct.points.reshape(-1, tgt.spec.n)
        tz = ct.zeta.ravel()
        tree = cKDTree(np.ascontiguousarray(tcloud).view(float))
        _, nn = tree.query(np.ascontiguousarray(xi_src).view(float))
        z_a = _interior_solve(tgt, tz[nn], xi_src)
        z_b = _interior_solve(tgt, zsrc, xi_src)
        fa = np.sum(np.abs(tgt.evaluate(z_a, 0, check_inside=False) - xi_src) ** 2, axis=1)
        fb = np.sum(np.abs(tgt.evaluate(z_b, 0, check_inside=False) - xi_src) ** 2, axis=1)
        scale = max(1.0, float(np.abs(zsrc).max()))
        split = np.abs(z_a - z_b) > 1e-6 * scale
        close = np.abs(fa - fb) <= 0.01 * np.maximum(np.maximum(fa, fb), 1e-300)
        excluded[inner[split & close]] = True
        zt = np.where(fb < fa, z_b, z_a)
        tgt_pts[inner] = tgt.evaluate(zt, 0, check_inside=False)
        tgt_c[inner] = np.stack([zt.real, zt.imag], axis=1)
        h = fd_step * scale
        cols = []
        for dz in (h, 1j * h):
            a = _interior_solve(tgt, zt, src.evaluate(zsrc + dz, 0, check_inside=False))
            b = _interior_solve(tgt, zt, src.evaluate(zsrc - dz, 0, check_inside=False))
            dd = (a - b) / (2 * h)
            cols.append(np.stack([dd.real, dd.imag], axis=1))
        M[inner] = np.stack(cols, axis=2)

    K, Ku = dilatation_field(M)
    b_rows = np.flatnonzero(zone[:n_sg] == 0)
    b_rows = b_rows[r[b_rows] == 0]
    bres = float(np.abs(tgt_pts[b_rows] - tgt.spec.values[smp.nodes[b_rows]]).max()) if b_rows.size else 0.0
    return CorrespondenceMap(src_pts, tgt_pts, zone, chis, M, K, Ku, excluded, src_c, tgt_c, bres, r0,
                             {"samples_strip": int(strip.sum()), "samples_blend": int(ib.size),
                              "samples_interior": int(inner.size), "r0_flagged": bool(cs.flagged)})


# ----------------------------------------------------------------------
# base surfaces


@dataclass
class BaseMap:
    sup_log_k: float
    cover_sup_log_k: float
    equivariance_residual: float
    samples: int


def descend_to_base(src: ReconstructedSurface, tgt: ReconstructedSurface, cmap: CorrespondenceMap,
                    tol_sym: float = 1e-8, **kwargs) -> BaseMap:
    """Check ``alpha(conj xi) = conj alpha(xi)`` and fold samples to the base.

    The conjugate of every source sample is mapped independently; strip and
    blend samples pair through the node involution, interior samples through
    their projection coordinates.
    """
    if not (src.spec.symmetric and tgt.spec.symmetric):
        raise ValueError("descent needs symmetric source and target")
    g = src.spec.grid
    smp = kwargs.pop("samples", None)
    charts = kwargs.pop("charts", None)
    if smp is None or charts is None:
        charts = (semi_geodesic_coords(src, cmap.r0), semi_geodesic_coords(tgt, cmap.r0))
        smp = default_samples(charts[0], kwargs.pop("stride", 1), kwargs.pop("density", 24))
    xi_conj = np.conj(src.evaluate(smp.zeta, 0, check_inside=False))
    z_conj = xi_conj @ src.direction
    mirror = SampleSet(g.pairing[smp.nodes], smp.level, z_conj)
    cm = nearest_point_map(src, tgt, cmap.r0, charts=charts, samples=mirror, **kwargs)
    res = float(np.abs(cm.tgt_points - np.conj(cmap.tgt_points)).max())
    if res > 10 * tol_sym:
        raise EquivarianceBroken(f"equivariance residual {res:.3e} exceeds {10 * tol_sym:.1e}")
    n_sg = len(smp.nodes)
    half = g.n_nodes // 2
    keep = np.ones(len(cmap.K), bool)
    keep[:n_sg] = smp.nodes < half
    keep &= ~cmap.excluded
    return BaseMap(float(np.log(cmap.K[keep]).max()), cmap.sup_log_k, res, int(keep.sum()))


# ----------------------------------------------------------------------
# reports


@dataclass
class LowerBoundReport:
    constant: float
    d_t_proxy: float
    lhs: list
    rhs: list


def lower_bound_check(dn: DNMatrix, dn2: DNMatrix, true_log_k: float, k_max: int = 8) -> LowerBoundReport:
    """Empirical ``c`` in ``|((L'-L)f, f)| <= c d_T ((L'+L)f, f)`` over Fourier trials."""
    B, _, _, _ = fourier_basis(dn.grid, k_max, include_constant=False)
    w = dn.grid.weights
    A = dn2.matrix - dn.matrix
    S = dn2.matrix + dn.matrix
    lhs = np.abs(np.einsum("ij,i,ij->j", A @ B, w, B))
    rhs = np.einsum("ij,i,ij->j", S @ B, w, B)
    dT = 0.5 * true_log_k
    c = float(np.max(lhs / (dT * rhs))) if dT > 0 else float("nan")
    return LowerBoundReport(c, dT, lhs.tolist(), rhs.tolist())


CSV_FIELDS = ["epsilon", "t", "d_H", "sup_logK", "dT_estimate", "logK_true", "excluded_fraction",
              "sup_logK_unsquared", "lower_bound_c", "tol_null_test", "status"]


@dataclass
class StabilityReport:
    epsilon: float
    t: float
    d_H: float
    sup_logK: float
    dT_estimate: float
    logK_true: float = float("nan")
    excluded_fraction: float = 0.0
    sup_logK_unsquared: float = float("nan")
    lower_bound_c: float = float("nan")
    tol_null_test: float = 5e-3
    status: str = "ok"
    stages: dict = field(default_factory=dict)

    def row(self) -> dict:
        d = asdict(self)
        d.pop("stages")
        return d

    def to_json(self) -> dict:
        return {"schema": "surfeit.stability", "version": SCHEMA_VERSION, **asdict(self)}


def stability_report(epsilon: float, t: float, src: ReconstructedSurface, tgt: ReconstructedSurface,
                     cmap: CorrespondenceMap, true_log_k: float = float("nan"), **extra) -> StabilityReport:
    d_h = hausdorff_distance(cmap.src_points, cmap.tgt_points) if cmap.src_points.size else 0.0
    d_h = max(d_h, 0.0)
    sup = max(cmap.sup_log_k, 0.0)
    keep = ~cmap.excluded
    sup_u = float(np.log(cmap.K_unsquared[keep]).max()) if keep.any() else float("nan")
    return StabilityReport(float(epsilon), float(t), float(d_h), sup, sup / 2, float(true_log_k),
                           cmap.excluded_fraction, sup_u, **extra)


def write_reports_csv(path, reports: list) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=CSV_FIELDS)
        w.writeheader()
        for rep in reports:
            w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in rep.row().items()})


def write_reports_json(path, reports: list) -> None:
    Path(path).write_text(json.dumps([r.to_json() for r in reports], indent=1, default=float))
