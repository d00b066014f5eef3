"""Surface images from boundary traces via the generalized argument principle.

An embedding of a bordered Riemann surface (or of the orientable cover of a
non-orientable one) into ``C^n`` by holomorphic ``w_1..w_n`` is known here
only through the traces ``eta_k = w_k|_Upsilon``.  For a direction
``xi_hat`` put ``eta_xi = sum_k xi_hat_k eta_k``.  Where the projection
``w_xi`` takes the value ``z`` exactly once,

    Xi_k(z) = 1/(2 pi i) oint eta_k d eta_xi / (eta_xi - z)

is the ``k``-th coordinate of the unique surface point above ``z``.  The
periodic trapezoid rule makes this spectrally accurate away from the curve;
near it the Taylor polynomial of ``Xi`` at the closest boundary point
(computed from tangential derivatives of the traces) is integrated exactly
and only the remainder goes through quadrature.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Sequence

import numpy as np

from .boundary_calculus import SCHEMA_VERSION, BoundaryFunction, BoundaryGrid, diff
from .errors import (
    ChartSingular,
    CoverageGap,
    ImmersionFailure,
    NotAdmissible,
    QuadratureDegraded,
    TooCloseToCurve,
)

WIND_GUARD = 4.0
GAP_GUARD = 6.0
TAYLOR_ORDER = 3
MOBIUS_DIRECTION = np.array([1.0, -1.0j]) / np.sqrt(2.0)


# ----------------------------------------------------------------------
# specs


@dataclass(eq=False)
class EmbeddingSpec:
    """Traces ``eta_1..eta_n`` of an embedding on the boundary grid ``Upsilon``."""

    traces: tuple
    symmetric: bool = False
    provenance: str = "analytic"
    tol_sym: float = 1e-8
    _cache: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        self.traces = tuple(self.traces)
        if not self.traces:
            raise ValueError("an embedding needs at least one trace")
        g = self.traces[0].grid
        for t in self.traces[1:]:
            g.require_same(t.grid)
        if self.symmetric:
            if not g.is_doubled:
                raise ValueError("symmetric specs live on a doubled grid")
            r = self.symmetry_residual()
            if r > self.tol_sym:
                raise ValueError(f"traces are not symmetric: residual {r:.3e}")

    @property
    def grid(self) -> BoundaryGrid:
        return self.traces[0].grid

    @property
    def n(self) -> int:
        return len(self.traces)

    @cached_property
    def values(self) -> np.ndarray:
        return np.stack([np.asarray(t.values, dtype=complex) for t in self.traces], axis=1)

    @cached_property
    def derivative(self) -> np.ndarray:
        return diff(self.grid, self.values)

    def symmetry_residual(self) -> float:
        g = self.grid
        if not g.is_doubled:
            return float("nan")
        V = self.values
        return float(np.abs(V[g.pairing] - np.conj(V)).max())

    def direction_trace(self, xi) -> np.ndarray:
        return self.values @ np.asarray(xi, dtype=complex)

    def direction(self, xi, l_taylor: int = TAYLOR_ORDER) -> "_Direction":
        key = (tuple(np.round(np.asarray(xi, dtype=complex), 15)), l_taylor)
        if key not in self._cache:
            self._cache[key] = _Direction(self, np.asarray(xi, dtype=complex), l_taylor)
        return self._cache[key]

    def to_dict(self) -> dict:
        return {"schema": "surfeit.embedding", "version": SCHEMA_VERSION, "symmetric": self.symmetric,
                "provenance": self.provenance, "traces": [t.to_dict() for t in self.traces]}

    @classmethod
    def from_dict(cls, d: dict) -> "EmbeddingSpec":
        if d.get("schema") != "surfeit.embedding":
            raise ValueError("not an embedding document")
        return cls(tuple(BoundaryFunction.from_dict(t) for t in d["traces"]), bool(d["symmetric"]),
                   d.get("provenance", "analytic"))

    def save_json(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict()))

    @classmethod
    def load_json(cls, path) -> "EmbeddingSpec":
        return cls.from_dict(json.loads(Path(path).read_text()))


def spec_from_functions(grid: BoundaryGrid, points: np.ndarray, funcs: Sequence, symmetric: bool = False,
                        provenance: str = "analytic") -> EmbeddingSpec:
    """Sample holomorphic functions of a model coordinate at boundary points."""
    return EmbeddingSpec(tuple(BoundaryFunction(grid, np.asarray(fn(points), dtype=complex)) for fn in funcs),
                         symmetric, provenance)


def disk_points(n: int) -> tuple:
    grid = BoundaryGrid.circle(n)
    return grid, np.exp(1j * grid.arclength)


def disk_identity_spec(n: int = 256) -> EmbeddingSpec:
    grid, z = disk_points(n)
    return spec_from_functions(grid, z, [lambda u: u])


def annulus_points(grid: BoundaryGrid, rho: float) -> np.ndarray:
    """Model points of the two-loop annulus grid (outer counter-clockwise, inner clockwise)."""
    s = grid.arclength
    out = np.exp(1j * s[grid.slice(0)])
    inner = rho * np.exp(-1j * s[grid.slice(1)] / rho)
    return np.concatenate([out, inner])


def mobius_cover_points(grid: BoundaryGrid, R: float) -> np.ndarray:
    """Cover coordinates ``z`` of a doubled Möbius grid: ``|z| = R`` then ``|z| = 1/R``."""
    if not grid.is_doubled:
        raise ValueError("expected a doubled grid")
    n = grid.n_nodes // 2
    zp = R * np.exp(1j * grid.arclength[:n] / R)
    zm = -1.0 / np.conj(zp[grid.pairing[n:]])
    return np.concatenate([zp, zm])


def mobius_w(z: np.ndarray) -> np.ndarray:
    """The symmetric embedding ``(z - 1/z, i (z + 1/z))`` of the Möbius cover."""
    z = np.asarray(z, dtype=complex)
    return np.stack([z - 1 / z, 1j * (z + 1 / z)], axis=-1)


def mobius_w_prime(z: np.ndarray) -> np.ndarray:
    z = np.asarray(z, dtype=complex)
    return np.stack([1 + 1 / z**2, 1j * (1 - 1 / z**2)], axis=-1)


def mobius_cover_spec(R: float = 2.0, n: int = 512) -> EmbeddingSpec:
    grid = BoundaryGrid.circle(n, 2 * np.pi * R).doubled()
    z = mobius_cover_points(grid, R)
    return spec_from_functions(grid, z, [lambda u: mobius_w(u)[..., 0], lambda u: mobius_w(u)[..., 1]],
                               symmetric=True)


# ----------------------------------------------------------------------
# winding numbers


def _clearance(eta: np.ndarray, deta: np.ndarray, w: np.ndarray, Z: np.ndarray) -> np.ndarray:
    """``min_i |eta_i - z| / (h_i |eta'_i|)`` for every ``z``: distance in local node spacings."""
    step = w * np.abs(deta) + 1e-300
    out = np.empty(len(Z))
    for a in range(0, len(Z), 256):
        zz = Z[a:a + 256]
        out[a:a + 256] = np.min(np.abs(eta[:, None] - zz[None, :]) / step[:, None], axis=0)
    return out


def _winding_raw(grid: BoundaryGrid, eta: np.ndarray, Z: np.ndarray) -> np.ndarray:
    tot = np.zeros(len(Z))
    for c in range(grid.n_components):
        e = eta[grid.slice(c)]
        for a in range(0, len(Z), 256):
            zz = Z[a:a + 256]
            d = e[:, None] - zz[None, :]
            inc = np.angle(np.roll(d, -1, axis=0) / d)
            tot[a:a + 256] += inc.sum(axis=0)
    return tot / (2 * np.pi)


def winding_numbers(eta: BoundaryFunction, Z, guard: float = WIND_GUARD) -> np.ndarray:
    """Vectorized :func:`winding_number`; raises if any point is too close."""
    Z = np.atleast_1d(np.asarray(Z, dtype=complex))
    g = eta.grid
    v = np.asarray(eta.values, dtype=complex)
    cl = _clearance(v, diff(g, v), g.weights, Z)
    if np.any(cl < guard):
        raise TooCloseToCurve(f"point within {cl.min():.2f} node spacings of the curve")
    return np.rint(_winding_raw(g, v, Z)).astype(int)


def winding_number(eta: BoundaryFunction, z: complex, guard: float = WIND_GUARD) -> int:
    """Total argument increment of ``eta - z`` over all loops, divided by ``2 pi``."""
    return int(winding_numbers(eta, [z], guard)[0])


# ----------------------------------------------------------------------
# Cauchy integrals


class _Direction:
    """Per-direction quadrature data and Taylor coefficients of ``Xi`` along the curve."""

    def __init__(self, spec: EmbeddingSpec, xi: np.ndarray, l_taylor: int):
        g = spec.grid
        self.spec, self.xi, self.l_taylor = spec, xi, l_taylor
        self.eta = spec.values @ xi
        self.deta = spec.derivative @ xi
        self.speed = np.abs(self.deta)
        if self.speed.min() <= 1e-10 * max(self.speed.max(), 1e-300):
            raise ImmersionFailure("projected boundary curve is not immersed")
        self.kernel = self.deta * g.weights / (2j * np.pi)
        coeffs = [spec.values]
        cur = spec.values
        for q in range(1, l_taylor + 1):
            cur = diff(g, cur) / self.deta[:, None]
            coeffs.append(cur / math.factorial(q))
        self.taylor = np.stack(coeffs)  # (q, node, k)

    def clearance(self, Z) -> np.ndarray:
        return _clearance(self.eta, self.deta, self.spec.grid.weights, np.atleast_1d(Z))

    def winding(self, Z) -> np.ndarray:
        return np.rint(_winding_raw(self.spec.grid, self.eta, np.atleast_1d(Z))).astype(int)

    def far(self, Z: np.ndarray, order=0, chunk: int = 256):
        """Plain trapezoid Cauchy integrals; ``order`` may be a tuple of derivative orders."""
        orders = (order,) if np.isscalar(order) else tuple(order)
        E = self.spec.values
        outs = [np.empty((len(Z), E.shape[1]), dtype=complex) for _ in orders]
        for a in range(0, len(Z), chunk):
            inv = 1.0 / (self.eta[:, None] - Z[None, a:a + chunk])
            for out, l in zip(outs, orders):
                out[a:a + chunk] = math.factorial(l) * ((self.kernel[:, None] * inv ** (l + 1)).T @ E)
        return outs[0] if np.isscalar(order) else outs

    def near(self, z: complex, j: int, order: int = 0) -> np.ndarray:
        """Taylor-subtracted Cauchy integral, expanding about boundary node ``j``."""
        return self.near_many(np.array([z]), np.array([j]), order)[0]

    def near_many(self, Z: np.ndarray, J: np.ndarray, order=0, chunk: int = 64):
        orders = (order,) if np.isscalar(order) else tuple(order)
        E = self.spec.values
        q = np.arange(self.taylor.shape[0])
        outs = [np.empty((len(Z), E.shape[1]), dtype=complex) for _ in orders]
        for a in range(0, len(Z), chunk):
            zz, jj = Z[a:a + chunk], J[a:a + chunk]
            T = self.taylor[:, jj, :]  # (q, m, k)
            dmu = (self.eta[None, :] - self.eta[jj][:, None])[:, :, None]  # (m, node, 1)
            P = T[-1][:, None, :]
            for c in T[-2::-1]:
                P = P * dmu + c[:, None, :]
            Rm = E[None] - P
            dz = (zz - self.eta[jj])[:, None]
            diff_ = self.eta[None, :] - zz[:, None]
            hit = diff_ == 0
            # the subtracted numerator vanishes at the expansion node itself
            inv = np.where(hit, 0.0, 1.0 / np.where(hit, 1.0, diff_))
            for out, l in zip(outs, orders):
                fq = np.array([math.perm(int(p), l) if p >= l else 0 for p in q], dtype=float)
                pw = fq * dz ** np.maximum(q - l, 0)  # (m, q)
                K = (self.kernel[None, :] * inv ** (l + 1))[:, None, :]
                out[a:a + chunk] = np.einsum("mq,qmk->mk", pw, T) + math.factorial(l) * (K @ Rm)[:, 0, :]
        return outs[0] if np.isscalar(order) else outs

    def nearest_node(self, Z) -> np.ndarray:
        Z = np.atleast_1d(Z)
        out = np.empty(len(Z), dtype=int)
        for a in range(0, len(Z), 256):
            out[a:a + 256] = np.argmin(np.abs(self.eta[:, None] - Z[None, a:a + 256]), axis=0)
        return out


def gap_point(spec: EmbeddingSpec, xi, z: complex, guard: float = GAP_GUARD) -> np.ndarray:
    """Surface point above ``z`` for the projection ``xi``."""
    return gap_derivative(spec, xi, z, 0, guard)


def gap_derivative(spec: EmbeddingSpec, xi, z: complex, l: int = 1, guard: float = GAP_GUARD) -> np.ndarray:
    """``d^l Xi / dz^l`` at ``z`` by Cauchy's differentiation formula."""
    d = spec.direction(xi)
    z = complex(z)
    cl = d.clearance([z])[0]
    if cl < WIND_GUARD:
        raise QuadratureDegraded(f"point within {cl:.2f} node spacings of the curve; use the near-boundary path")
    wind = int(d.winding([z])[0])
    if wind != 1:
        raise NotAdmissible(f"winding number {wind} != 1")
    if cl < guard + 2 * l:
        raise QuadratureDegraded(f"clearance {cl:.2f} node spacings below {guard + 2 * l:g}")
    return d.far(np.array([z]), l)[0]


def evaluate(spec: EmbeddingSpec, xi, Z, order=0, guard: float = GAP_GUARD,
             check_inside: bool = True):
    """``d^order Xi`` at many points, routing near-curve points to Taylor subtraction.

    ``order`` may be a tuple, in which case a list is returned.  Far points
    must have winding number one; near points must lie on the interior side
    of the closest boundary node.
    """
    orders = (order,) if np.isscalar(order) else tuple(order)
    d = spec.direction(xi)
    Z = np.atleast_1d(np.asarray(Z, dtype=complex))
    cl = d.clearance(Z)
    far = cl >= guard + 2 * max(orders)
    outs = [np.empty((len(Z), spec.n), dtype=complex) for _ in orders]
    if np.any(far):
        if check_inside:
            w = d.winding(Z[far])
            if np.any(w != 1):
                raise NotAdmissible(f"{int(np.sum(w != 1))} points have winding number != 1")
        for out, v in zip(outs, d.far(Z[far], orders)):
            out[far] = v
    idx = np.flatnonzero(~far)
    if idx.size:
        nodes = d.nearest_node(Z[idx])
        if check_inside:
            side = np.imag((Z[idx] - d.eta[nodes]) / d.deta[nodes])
            if np.any(side < 0):
                raise NotAdmissible("near-boundary point lies outside the surface image")
        for out, v in zip(outs, d.near_many(Z[idx], nodes, orders)):
            out[idx] = v
    return outs[0] if np.isscalar(order) else outs


# ----------------------------------------------------------------------
# cylinders


@dataclass
class Cylinder:
    """Projective cylinder over a disk in the ``xi``-plane."""

    direction: np.ndarray
    center: complex
    radius: float
    kind: str = "interior"
    s0: int | None = None
    window: np.ndarray | None = None
    rho0: float = 0.0

    def to_dict(self) -> dict:
        d = {"direction": [[float(c.real), float(c.imag)] for c in self.direction],
             "center": [float(np.real(self.center)), float(np.imag(self.center))],
             "radius": float(self.radius), "kind": self.kind}
        if self.kind == "boundary":
            d.update({"s0": int(self.s0), "window": [int(i) for i in self.window], "rho0": float(self.rho0)})
        return d

    def theta(self, spec: EmbeddingSpec, nodes=None) -> np.ndarray:
        """``Re[(eta_xi(s) - eta_xi(s0)) / d eta_xi(s0)]`` on the window."""
        d = spec.direction(self.direction)
        nodes = self.window if nodes is None else nodes
        return np.real((d.eta[nodes] - d.eta[self.s0]) / d.deta[self.s0])

    def chart_point(self, spec: EmbeddingSpec, nodes, rho) -> np.ndarray:
        """``eta_xi(s) + i rho u0`` with ``u0`` the unit tangent at ``s0``."""
        d = spec.direction(self.direction)
        u0 = d.deta[self.s0] / abs(d.deta[self.s0])
        return d.eta[np.asarray(nodes)][:, None] + 1j * u0 * np.asarray(rho)[None, :]


def candidate_directions(n: int, extra: int = 32, seed: int = 0, preferred=()) -> list:
    dirs = [np.asarray(p, dtype=complex) / np.linalg.norm(p) for p in preferred]
    for k in range(n):
        e = np.zeros(n, dtype=complex)
        e[k] = 1.0
        dirs += [e, 1j * e]
    rng = np.random.default_rng(seed)
    for _ in range(extra):
        v = rng.standard_normal(n) + 1j * rng.standard_normal(n)
        dirs.append(v / np.linalg.norm(v))
    return dirs


def _lattice(eta: np.ndarray, m: int) -> tuple:
    lo = np.array([eta.real.min(), eta.imag.min()])
    hi = np.array([eta.real.max(), eta.imag.max()])
    step = float(np.max(hi - lo)) / m
    xs = np.arange(lo[0] - step, hi[0] + 2 * step, step)
    ys = np.arange(lo[1] - step, hi[1] + 2 * step, step)
    X, Y = np.meshgrid(xs, ys)
    return (X + 1j * Y).ravel(), step


def direction_profile(spec: EmbeddingSpec, xi, m: int = 48) -> dict:
    """Winding statistics of ``eta_xi`` on a lattice over its bounding box."""
    try:
        d = spec.direction(xi)
    except ImmersionFailure:
        return {"immersed": False, "injective": False, "area1": 0.0}
    Z, step = _lattice(d.eta, m)
    cl = d.clearance(Z)
    ok = cl >= WIND_GUARD
    w = d.winding(Z[ok])
    return {"immersed": True, "injective": bool(np.all((w == 0) | (w == 1))),
            "area1": float(np.sum(w == 1)) * step**2, "step": step}


def choose_direction(spec: EmbeddingSpec, directions=None, preferred=(), seed: int = 0):
    """First injective immersed direction with the largest winding-one area."""
    cands = list(directions) if directions is not None else candidate_directions(spec.n, 32, seed, preferred)
    best, best_area = None, -1.0
    for xi in cands:
        prof = direction_profile(spec, xi)
        if prof["injective"] and prof["area1"] > best_area * (1 + 1e-9):
            best, best_area = xi, prof["area1"]
    if best is None:
        raise CoverageGap("no candidate direction projects the surface injectively")
    return best


def _boundary_cylinder(spec, xi, c, s0, radius, c0, shrink=0.7, tries=30):
    g = spec.grid
    d = spec.direction(xi)
    sl = g.slice(c)
    for _ in range(tries):
        inside = np.abs(d.eta - d.eta[s0]) < radius
        own = np.zeros(g.n_nodes, bool)
        own[sl] = inside[sl]
        if not np.any(inside & ~own):
            loc = np.flatnonzero(own[sl])
            # contiguous arc around s0 on a periodic component
            n = g.sizes[c]
            mask = own[sl]
            runs = np.sum(mask != np.roll(mask, 1))
            if runs <= 2 and loc.size >= 3:
                window = loc + g.offsets[c]
                dtheta = np.real(d.deta[window] / d.deta[s0])
                if dtheta.min() >= c0 and loc.size < n:
                    order = np.argsort((loc - (s0 - g.offsets[c]) + n // 2) % n)
                    return Cylinder(np.asarray(xi), d.eta[s0], radius, "boundary", int(s0),
                                    window[order], radius / 2)
        radius *= shrink
    raise ChartSingular(f"no valid boundary disk at node {s0}")


def build_cylinder_cover(spec: EmbeddingSpec, xi=None, boundary_radius: float | None = None,
                         interior_radius: float | None = None, c0: float = 0.3, stride: int | None = None,
                         budget: int = 4000, preferred=(), seed: int = 0) -> list:
    """Greedy cover by boundary cylinders along every loop and interior disks.

    Boundary disks are centred at equispaced anchors and shrunk until they
    meet the curve in one arc with ``d theta >= c0``.  Interior disks sit on
    a square lattice; a disk is kept if its centre has winding number one and
    it stays clear of the curve.  Every lattice probe with winding one that
    is farther than half a boundary strip from the curve must end up in a
    disk, otherwise :class:`CoverageGap` is raised.
    """
    xi = choose_direction(spec, preferred=preferred, seed=seed) if xi is None else np.asarray(xi, dtype=complex)
    d = spec.direction(xi)
    g = spec.grid
    span = float(np.ptp(d.eta.real) + np.ptp(d.eta.imag)) / 2
    rb = 0.15 * span if boundary_radius is None else boundary_radius
    cyls = []
    for c in range(g.n_components):
        n = g.sizes[c]
        arc = np.sum(d.speed[g.slice(c)] * g.weights[g.slice(c)])
        k = max(4, int(np.ceil(2 * arc / rb))) if stride is None else max(1, n // stride)
        anchors = g.offsets[c] + (np.arange(k) * n) // k
        for s0 in anchors:
            cyls.append(_boundary_cylinder(spec, xi, c, int(s0), rb, c0))
            if len(cyls) > budget:
                raise CoverageGap("cylinder budget exhausted along the boundary")
    covered = np.zeros(g.n_nodes, bool)
    for cy in cyls:
        covered[cy.window] = True
    if not covered.all():
        raise CoverageGap(f"{int(np.sum(~covered))} boundary nodes outside every boundary cylinder")
    strip = min(cy.rho0 for cy in cyls)
    ri = max(strip, 0.35 * span) if interior_radius is None else interior_radius
    Z, step = _lattice(d.eta, 60)
    cl_abs = np.array([np.min(np.abs(d.eta - z)) for z in Z])
    probe = Z[(cl_abs >= strip / 2)]
    probe = probe[d.winding(probe) == 1]
    spacing = ri * np.sqrt(2.0)
    Zc, _ = _lattice(d.eta, max(4, int(np.ceil((np.ptp(d.eta.real) + 2 * spacing) / spacing))))
    clc = np.array([np.min(np.abs(d.eta - z)) for z in Zc])
    cand = Zc[clc > strip / 4]
    cand = cand[d.winding(cand) == 1]
    radii = np.minimum(ri, np.array([np.min(np.abs(d.eta - z)) for z in cand]) - strip / 4)
    # greedy set cover of the probes, largest disks first
    miss = probe
    for i in np.argsort(-radii, kind="stable"):
        if radii[i] <= 0 or not miss.size:
            break
        hit = np.abs(miss - cand[i]) < radii[i]
        if hit.any():
            cyls.append(Cylinder(xi, complex(cand[i]), float(radii[i])))
            miss = miss[~hit]
    if miss.size:
        for zc in miss:
            if len(cyls) > budget:
                raise CoverageGap("cylinder budget exhausted in the interior")
            r = np.min(np.abs(d.eta - zc)) - strip / 4
            if r <= 0:
                raise CoverageGap(f"interior probe {zc} cannot be covered")
            cyls.append(Cylinder(xi, complex(zc), float(min(r, ri))))
    return cyls


# ----------------------------------------------------------------------
# charts and surfaces


@dataclass
class Chart:
    cylinder: Cylinder
    coords: np.ndarray  # (m, 2): (Re z, Im z) or (node, rho)
    zeta: np.ndarray
    points: np.ndarray
    dpoints: np.ndarray
    quad_error: float = 0.0


def reconstruct_near_boundary(spec: EmbeddingSpec, cyl: Cylinder, nodes=None, rhos=None) -> Chart:
    """Chart ``Xi(s, rho)`` on the strip ``window x [0, rho0)`` of a boundary cylinder.

    Row ``rho = 0`` is the given trace; other rows use the Taylor-subtracted
    Cauchy integral about the boundary node of the row.
    """
    if cyl.kind != "boundary":
        raise ValueError("expected a boundary cylinder")
    d = spec.direction(cyl.direction)
    nodes = cyl.window if nodes is None else np.asarray(nodes)
    rhos = np.linspace(0.0, cyl.rho0, 6)[:-1] if rhos is None else np.asarray(rhos, dtype=float)
    dth = np.real(d.deta[nodes] / d.deta[cyl.s0])
    if dth.min() <= 0:
        raise ChartSingular("d theta changes sign on the chart window")
    Zs = cyl.chart_point(spec, nodes, rhos)
    pts = np.empty(Zs.shape + (spec.n,), dtype=complex)
    dpts = np.empty_like(pts)
    J = np.repeat(nodes, len(rhos))
    pts = d.near_many(Zs.ravel(), J, 0).reshape(pts.shape)
    dpts = d.near_many(Zs.ravel(), J, 1).reshape(pts.shape)
    pts[:, rhos == 0] = spec.values[nodes][:, None, :]
    S, Rh = np.meshgrid(nodes, rhos, indexing="ij")
    return Chart(cyl, np.stack([S.ravel(), Rh.ravel()], axis=1).astype(float), Zs.ravel(),
                 pts.reshape(-1, spec.n), dpts.reshape(-1, spec.n))


def _interior_chart(spec: EmbeddingSpec, cyl: Cylinder, n_r: int = 4, n_t: int = 12) -> Chart:
    d = spec.direction(cyl.direction)
    r = cyl.radius * (np.arange(n_r) + 0.5) / n_r
    t = 2 * np.pi * np.arange(n_t) / n_t
    Z = np.concatenate([[cyl.center], (cyl.center + r[:, None] * np.exp(1j * t)[None, :]).ravel()])
    pts = evaluate(spec, cyl.direction, Z, 0)
    dpts = evaluate(spec, cyl.direction, Z, 1)
    cl = d.clearance(Z)
    err = float(np.exp(-2 * np.pi * cl.min()) * np.abs(spec.values).max())
    return Chart(cyl, np.stack([Z.real, Z.imag], axis=1), Z, pts, dpts, err)


@dataclass(eq=False)
class ReconstructedSurface:
    spec: EmbeddingSpec
    direction: np.ndarray
    charts: list
    boundary_cloud: np.ndarray
    mirror: np.ndarray | None = None
    overlap: list = field(default_factory=list)

    def cloud(self, include_mirror: bool = True) -> np.ndarray:
        parts = [c.points for c in self.charts] + [self.boundary_cloud]
        if include_mirror and self.mirror is not None:
            parts.append(self.mirror)
        pts = np.vstack(parts)
        _, keep = np.unique(np.round(pts.view(float), 12), axis=0, return_index=True)
        return pts[np.sort(keep)]

    def evaluate(self, Z, order=0, check_inside: bool = True):
        return evaluate(self.spec, self.direction, Z, order, check_inside=check_inside)

    def symmetry_closure(self) -> float:
        from .correspondence import hausdorff_distance

        pts = self.cloud()
        return hausdorff_distance(pts, np.conj(pts))

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            n = self.spec.n
            w.writerow(["chart", "u", "v"] + [f"{p}{k + 1}" for k in range(n) for p in ("re", "im")])
            for ci, ch in enumerate(self.charts):
                for (u, v), p in zip(ch.coords, ch.points):
                    w.writerow([ci, repr(float(u)), repr(float(v))] + [repr(float(x)) for c in p for x in (c.real, c.imag)])
            for j, p in enumerate(self.boundary_cloud):
                w.writerow([-1, j, 0.0] + [repr(float(x)) for c in p for x in (c.real, c.imag)])

    def manifest(self) -> dict:
        return {"schema": "surfeit.reconstruction", "version": SCHEMA_VERSION, "n": self.spec.n,
                "direction": [[float(c.real), float(c.imag)] for c in self.direction],
                "charts": [{"cylinder": ch.cylinder.to_dict(), "samples": len(ch.zeta),
                            "quad_error": ch.quad_error} for ch in self.charts],
                "overlap": self.overlap, "boundary_samples": int(len(self.boundary_cloud))}

    def save_manifest(self, path) -> None:
        Path(path).write_text(json.dumps(self.manifest(), indent=1))


def _mirror_points(spec: EmbeddingSpec, xi, pts: np.ndarray) -> np.ndarray:
    """Surface points above the projections of ``conj(pts)``, evaluated independently."""
    zeta = np.conj(pts) @ np.asarray(xi, dtype=complex)
    return evaluate(spec, xi, zeta, 0, check_inside=False)


def reconstruct_surface(spec: EmbeddingSpec, cover: list | None = None, rhos=None) -> ReconstructedSurface:
    """Evaluate every chart of a cover and cross-check overlaps.

    For symmetric specs the conjugate of each sample is also evaluated as a
    surface point in its own right, so conjugation closure of the cloud
    measures the symmetry of the data rather than being true by
    construction.
    """
    cover = build_cylinder_cover(spec) if cover is None else cover
    xi = cover[0].direction
    d = spec.direction(xi)
    charts = []
    for cyl in cover:
        if cyl.kind == "boundary":
            rr = None if rhos is None else np.asarray(rhos) * cyl.rho0
            charts.append(reconstruct_near_boundary(spec, cyl, rhos=rr))
        else:
            charts.append(_interior_chart(spec, cyl))
    overlap = []
    for ci, ch in enumerate(charts):
        if ch.cylinder.kind != "boundary":
            continue
        cl = d.clearance(ch.zeta)
        ok = cl >= GAP_GUARD
        if np.any(ok):
            far = d.far(ch.zeta[ok], 0)
            overlap.append({"chart": ci, "max_diff": float(np.abs(far - ch.points[ok]).max())})
    surf = ReconstructedSurface(spec, xi, charts, spec.values.copy(), None, overlap)
    if spec.symmetric:
        pts = np.vstack([c.points for c in charts])
        surf.mirror = _mirror_points(spec, xi, pts)
    return surf


# ----------------------------------------------------------------------
# induced embeddings


def traces_to_data(dn, spec: EmbeddingSpec) -> list:
    """Split every trace into ``(f, c, h)`` form for the DN map it came from."""
    from .trace_equations import SymmetricTraceData

    out = []
    g = spec.grid
    for t in spec.traces:
        v = np.asarray(t.values, dtype=complex)
        if g.is_doubled:
            base = g.base()
            nb = base.n_nodes
            f = BoundaryFunction(base, v[:nb].real)
            c = np.array([float(np.mean(v[base.slice(k)].imag)) for k in range(base.n_components)])
            out.append(SymmetricTraceData(f, c, BoundaryFunction(g, v.imag), False))
        else:
            f = BoundaryFunction(g, v.real)
            c = np.array([float(np.mean(v[g.slice(k)].imag)) for k in range(g.n_components)])
            out.append(SymmetricTraceData(f, c, BoundaryFunction(g, v.imag), True))
    return out


@dataclass
class InducedEmbedding:
    spec: EmbeddingSpec
    trace_shift: float
    per_trace: list


def induced_embedding(dn, dn2, spec: EmbeddingSpec, basis) -> InducedEmbedding:
    """Transfer every trace from ``dn`` to ``dn2`` and record ``sum_k |eta'_k - eta_k|_C0``."""
    from .trace_equations import transfer_trace

    if np.array_equal(dn.matrix, dn2.matrix):
        return InducedEmbedding(spec, 0.0, [0.0] * spec.n)
    new, shifts = [], []
    for t, td in zip(spec.traces, traces_to_data(dn, spec)):
        td2 = transfer_trace(dn, dn2, basis, td)
        e = td2.eta
        new.append(e)
        shifts.append(float(np.abs(e.values - t.values).max()))
    spec2 = EmbeddingSpec(tuple(new), spec.symmetric, "transferred", tol_sym=max(spec.tol_sym, 1e-6))
    return InducedEmbedding(spec2, float(sum(shifts)), shifts)
