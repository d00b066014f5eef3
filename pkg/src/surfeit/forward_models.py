"""DN maps of model surfaces.

Closed-form Fourier multipliers for the disk, the round annulus and the
Möbius band, plus a piecewise-linear finite element solver on triangulated
metric surfaces.  Non-orientable surfaces are stored as their orientable
double cover together with the deck involution ``tau`` and the projection
``pi``; every solve happens on the cover with ``tau``-symmetric data.

Meshes carry, for every triangle, the chart coordinates of its corners and a
constant metric tensor in that chart.  Vertex coordinates are only used for
display and for locating points; the stiffness matrix depends on chart data
alone.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla
from scipy.spatial import Delaunay

from .boundary_calculus import BoundaryGrid, DNMatrix, fourier_basis, fourier_multiplier
from .errors import (
    BoundaryLengthChanged,
    DegenerateParameters,
    NonConvergence,
    SolverFailure,
    UnknownFamily,
)

MESH_SCHEMA = "surfeit.mesh"
MESH_VERSION = 1
FAMILIES = ("disk", "annulus", "mobius", "mobius-with-hole", "torus-with-hole")
_ALIASES = {"möbius": "mobius", "möbius-with-hole": "mobius-with-hole"}


def canonical_family(name: str) -> str:
    key = _ALIASES.get(str(name).lower(), str(name).lower())
    if key not in FAMILIES:
        raise UnknownFamily(f"unknown surface family {name!r}; expected one of {FAMILIES}")
    return key


# ----------------------------------------------------------------------
# analytic models


def dn_disk(n: int) -> DNMatrix:
    """Unit-disk DN map: the multiplier ``k -> |k|`` on the unit circle."""
    grid = BoundaryGrid.circle(n)
    return DNMatrix(grid, fourier_multiplier(grid, lambda k, m: np.abs(k).astype(complex)), "analytic",
                    meta={"family": "disk"})


def _annulus_grid(rho: float, n: int, both: bool) -> BoundaryGrid:
    if both:
        return BoundaryGrid((2 * np.pi, 2 * np.pi * rho), (n, n), (1, -1))
    return BoundaryGrid.circle(n)


def dn_annulus(rho: float, n: int, boundary_selection: str = "both") -> DNMatrix:
    """DN map of ``{rho < |z| < 1}``.

    With ``boundary_selection="both"`` the grid has two components: the outer
    circle (counter-clockwise) and the inner circle (clockwise, the boundary
    orientation).  With ``"outer-with-inner-Neumann"`` only the outer circle
    is measured and the inner circle is insulated.
    """
    if not 0 < rho < 1:
        raise DegenerateParameters(f"inner radius must lie in (0, 1), got {rho}")
    both = boundary_selection == "both"
    if not both and boundary_selection != "outer-with-inner-Neumann":
        raise DegenerateParameters(f"unknown boundary selection {boundary_selection!r}")
    grid = _annulus_grid(rho, n, both)
    k = np.fft.fftfreq(n, d=1.0 / n).astype(int)
    m = np.abs(k).astype(float)
    q = rho ** m
    logr = np.log(rho)
    eye = np.eye(grid.n_nodes)
    if not both:
        lam = np.where(m > 0, m * (1 - q**2) / (1 + q**2), 0.0)
        a = np.fft.fft(eye, axis=0)
        mat = np.fft.ifft(lam[:, None] * a, axis=0).real
        return DNMatrix(grid, mat, "analytic", meta={"family": "annulus", "rho": rho, "selection": boundary_selection})
    neg = (-k) % n
    a = np.fft.fft(eye[:n], axis=0)
    b = np.fft.fft(eye[n:], axis=0)[neg]  # angular coefficients on the inner circle
    with np.errstate(divide="ignore", invalid="ignore"):
        den = 1 - q**2
        oo = np.where(m > 0, m * (1 + q**2) / den, -1 / logr)
        oi = np.where(m > 0, -2 * m * q / den, 1 / logr)
        io = np.where(m > 0, -2 * m * q / (rho * den), 1 / (rho * logr))
        ii = np.where(m > 0, m * (1 + q**2) / (rho * den), -1 / (rho * logr))
    fo = oo[:, None] * a + oi[:, None] * b
    fi = io[:, None] * a + ii[:, None] * b
    out = np.vstack([np.fft.ifft(fo, axis=0).real, np.fft.ifft(fi[neg], axis=0).real])
    return DNMatrix(grid, out, "analytic", meta={"family": "annulus", "rho": rho, "selection": "both"})


def _mobius_profile(m: np.ndarray, x: np.ndarray, T: float) -> np.ndarray:
    """``U_m(e^x)``: tau-symmetric radial profile equal to 1 on ``|z| = R``.

    Even modes use ``cosh(m x)/cosh(m T)``, odd modes ``sinh(m x)/sinh(m T)``;
    written with decaying exponentials so large ``m`` does not overflow.
    """
    m = np.asarray(m, dtype=float)
    ax = np.abs(x)
    grow = np.exp(m * (ax - T))
    even = grow * (1 + np.exp(-2 * m * ax)) / (1 + np.exp(-2 * m * T))
    with np.errstate(invalid="ignore", divide="ignore"):
        odd = np.sign(x) * grow * (1 - np.exp(-2 * m * ax)) / (1 - np.exp(-2 * m * T))
    odd = np.where(m == 0, 1.0, odd)
    return np.where(m.astype(int) % 2 == 0, even, odd)


def mobius_multiplier(m: np.ndarray, R: float) -> np.ndarray:
    m = np.abs(np.asarray(m, dtype=float))
    T = np.log(R)
    out = np.zeros_like(m)
    nz = m > 0
    t = np.tanh(m[nz] * T)
    out[nz] = (m[nz] / R) * np.where(m[nz].astype(int) % 2 == 0, t, 1 / t)
    return out


def dn_mobius(R: float, n: int) -> DNMatrix:
    """DN map of the Möbius band ``{1/R <= |z| <= R} / (z ~ -1/conj(z))``.

    The boundary is the circle ``|z| = R`` with length element ``|dz|``.
    A datum ``f`` is lifted to ``(f, f o tau)`` on the two circles of the
    annulus, where it forces even angular modes to be even in ``log|z|`` and
    odd modes to be odd; the outward derivative is therefore
    ``(|k|/R) tanh(|k| log R)`` for even ``k`` and ``(|k|/R) coth(|k| log R)``
    for odd ``k``.
    """
    if not R > 1:
        raise DegenerateParameters(f"R must exceed 1, got {R}")
    grid = BoundaryGrid.circle(n, 2 * np.pi * R)
    mat = fourier_multiplier(grid, lambda kap, nn: mobius_multiplier(np.rint(kap * R), R).astype(complex))
    return DNMatrix(grid, mat, "analytic", meta={"family": "mobius", "R": R})


def mobius_harmonic_extension(R: float, values: np.ndarray, z: np.ndarray) -> np.ndarray:
    """Evaluate the tau-invariant harmonic extension of boundary data at ``z``.

    ``values`` are samples on the equispaced nodes ``R exp(2 pi i j / n)``.
    """
    values = np.asarray(values, dtype=float)
    n = len(values)
    c = np.fft.fft(values) / n
    k = np.fft.fftfreq(n, d=1.0 / n)
    k[n // 2] = n // 2  # Nyquist mode carried by cos only
    z = np.asarray(z, dtype=complex)
    x = np.log(np.abs(z)).ravel()
    th = np.angle(z).ravel()
    prof = _mobius_profile(np.abs(k)[:, None], x[None, :], np.log(R))
    modes = np.exp(1j * k[:, None] * th[None, :])
    modes[n // 2] = np.cos(k[n // 2] * th)[None, :]
    u = np.real(np.sum(c[:, None] * prof * modes, axis=0))
    return u.reshape(z.shape)


def mobius_tau(z):
    return -1.0 / np.conj(z)


class _HoledMobiusSeries:
    """Symmetric holomorphic series on the cover of the holed Möbius band.

    Columns are ``F_j(z) + conj(F_j(tau z))`` with ``F_j`` drawn from Laurent
    terms about the origin and about the hole center; each column is
    symmetric and holomorphic, so only the Dirichlet rows on ``|z| = R`` and
    the Neumann rows on one hole circle have to be fitted.
    """

    def __init__(self, R, hole_t, hole_theta, hole_radius, p_terms=80, q_terms=50):
        self.R = float(R)
        (self.c, self.r), _ = mobius_hole_images(R, hole_t, hole_theta, hole_radius)
        self.P, self.Q = int(p_terms), int(q_terms)

    def _cols(self, z, deriv):
        R, c, r = self.R, self.c, self.r
        z = np.asarray(z, dtype=complex)[:, None]
        k = np.arange(1, self.P + 1)[None, :]
        q = np.arange(1, self.Q + 1)[None, :]
        w = r / (z - c)
        if deriv:
            pos = k * (z / R) ** k / z
            neg = -k * (1 / (R * z)) ** k / z
            lg = 1 / (z - c)
            hw = -q * w**q / (z - c)
            one = np.zeros_like(z)
        else:
            pos, neg, lg, hw, one = (z / R) ** k, (1 / (R * z)) ** k, np.log(z - c), w**q, np.ones_like(z)
        return np.hstack([one, pos, -1j * pos, neg, -1j * neg, lg, hw, -1j * hw])

    def values(self, z):
        return self._cols(z, False) + np.conj(self._cols(mobius_tau(z), False))

    def derivative(self, z):
        z = np.asarray(z, dtype=complex)
        return self._cols(z, True) + np.conj(self._cols(mobius_tau(z), True)) / z[:, None] ** 2

    def fit(self, grid: BoundaryGrid, data: np.ndarray, m_hole: int = 300):
        th = 2 * np.pi * np.arange(grid.sizes[0]) / grid.sizes[0]
        zo = self.R * np.exp(1j * th)
        ph = 2 * np.pi * np.arange(m_hole) / m_hole
        nh = np.exp(1j * ph)
        zh = self.c + self.r * nh
        A = np.vstack([self.values(zo).real, (self.derivative(zh) * nh[:, None]).real])
        rhs = np.vstack([data, np.zeros((m_hole, data.shape[1]))])
        coef, *_ = np.linalg.lstsq(A, rhs, rcond=None)
        self.residual = float(np.abs(A @ coef - rhs).max())
        return coef, zo, zh


def dn_mobius_hole(R: float = 3.0, n: int = 256, k_max: int = 40, hole_t: float = 0.0, hole_theta: float = 0.0,
                   hole_radius: float = 0.3) -> DNMatrix:
    """Semi-analytic DN map of the Möbius band with one insulated hole.

    Uses the same model as ``build_mesh("mobius-with-hole")``: the band is
    the annulus ``1/R <= |z| <= R`` modulo ``tau`` with the disk
    ``|z - e^{hole_t + i hole_theta}| < hole_radius`` (and its image) removed;
    the hole carries a zero Neumann condition.  Boundary modes ``|k| <=
    k_max`` are extended by a least-squares fit of a symmetric holomorphic
    series, which converges geometrically for holes away from the boundary.
    """
    grid = BoundaryGrid.circle(n, 2 * np.pi * R)
    ser = _HoledMobiusSeries(R, hole_t, hole_theta, hole_radius)
    B, _, _, _ = fourier_basis(grid, k_max)
    coef, zo, _ = ser.fit(grid, B)
    flux = (ser.derivative(zo) @ coef * (zo / abs(zo[0]))[:, None]).real
    E = B.T @ (grid.weights[:, None] * flux)
    raw = float(np.linalg.norm(E - E.T) / np.linalg.norm(E))
    E = (E + E.T) / 2
    meta = {"family": "mobius-with-hole", "R": R, "hole_t": hole_t, "hole_theta": hole_theta,
            "hole_radius": hole_radius, "k_max": k_max, "fit_residual": ser.residual, "raw_asymmetry": raw}
    return DNMatrix(grid, B @ E @ B.T * grid.weights[None, :], "analytic", meta=meta)


def mobius_hole_conjugate_level(values: np.ndarray, R: float = 3.0, hole_t: float = 0.0, hole_theta: float = 0.0,
                                hole_radius: float = 0.3) -> np.ndarray:
    """Value of the antisymmetric harmonic conjugate on the hole, per data column.

    For boundary data ``f`` on ``|z| = R`` the symmetric holomorphic
    extension ``w`` has ``Im w`` constant on the insulated hole; gluing the
    hole to its image turns the cover into a closed handle, and ``Re w``
    descends to it exactly when this constant vanishes.
    """
    values = np.atleast_2d(np.asarray(values, dtype=float))
    if values.shape[0] == 1:
        values = values.T
    n = values.shape[0]
    grid = BoundaryGrid.circle(n, 2 * np.pi * R)
    ser = _HoledMobiusSeries(R, hole_t, hole_theta, hole_radius)
    coef, _, zh = ser.fit(grid, values)
    return (ser.values(zh) @ coef).imag.mean(axis=0)


# ----------------------------------------------------------------------
# meshes


@dataclass(frozen=True, eq=False)
class BoundaryLoop:
    """Ordered boundary loop of a mesh (boundary orientation: surface on the left)."""

    vertices: np.ndarray
    arclength: np.ndarray
    length: float
    kind: str = "dirichlet"
    sheet: int = 0
    partner: int = -1

    def to_dict(self) -> dict:
        return {"vertices": self.vertices.tolist(), "arclength": self.arclength.tolist(),
                "length": self.length, "kind": self.kind, "sheet": self.sheet, "partner": self.partner}

    @classmethod
    def from_dict(cls, d: dict) -> "BoundaryLoop":
        return cls(np.asarray(d["vertices"], dtype=int), np.asarray(d["arclength"], dtype=float),
                   float(d["length"]), d.get("kind", "dirichlet"), int(d.get("sheet", 0)), int(d.get("partner", -1)))


@dataclass(frozen=True, eq=False)
class SurfaceMesh:
    """Triangulated surface with per-triangle chart metric.

    ``quotient=True`` means the arrays describe the orientable double cover
    of the (non-orientable) surface of interest; ``involution`` and
    ``projection`` then hold the deck map and the 2-to-1 vertex projection.
    """

    family: str
    vertices: np.ndarray
    triangles: np.ndarray
    chart: np.ndarray
    metric: np.ndarray
    loops: tuple
    orientable: bool = True
    quotient: bool = False
    involution: np.ndarray | None = None
    projection: np.ndarray | None = None
    params: dict = field(default_factory=dict)
    true_log_k: float = 0.0
    eig_bounds: tuple = (1e-8, 1e8)

    @property
    def n_vertices(self) -> int:
        return len(self.vertices)

    @property
    def n_triangles(self) -> int:
        return len(self.triangles)

    def edges(self) -> np.ndarray:
        t = self.triangles
        e = np.sort(np.vstack([t[:, [0, 1]], t[:, [1, 2]], t[:, [2, 0]]]), axis=1)
        return np.unique(e, axis=0)

    def cover_euler(self) -> int:
        return int(self.n_vertices - len(self.edges()) + self.n_triangles)

    def euler_characteristic(self) -> int:
        """Euler characteristic of the represented surface."""
        chi = self.cover_euler()
        return chi // 2 if self.quotient else chi

    @property
    def gamma_loops(self) -> list:
        """Indices of the measured boundary components (Dirichlet, first sheet)."""
        return [i for i, lp in enumerate(self.loops) if lp.kind == "dirichlet" and lp.sheet >= 0]

    def boundary_grid(self) -> BoundaryGrid:
        lps = [self.loops[i] for i in self.gamma_loops]
        return BoundaryGrid(tuple(lp.length for lp in lps), tuple(len(lp.vertices) for lp in lps))

    def chart_areas(self) -> np.ndarray:
        e1 = self.chart[:, 1] - self.chart[:, 0]
        e2 = self.chart[:, 2] - self.chart[:, 0]
        return 0.5 * (e1[:, 0] * e2[:, 1] - e1[:, 1] * e2[:, 0])

    def centroids(self) -> np.ndarray:
        return self.chart.mean(axis=1)

    def validate(self) -> None:
        """Check the structural invariants; raises ``ValueError`` on failure."""
        ev = np.linalg.eigvalsh(self.metric)
        if np.any(ev[:, 0] <= 0):
            raise ValueError("metric tensor not positive definite")
        lo, hi = self.eig_bounds
        if ev.min() < lo or ev.max() > hi:
            raise ValueError("metric eigenvalues outside configured bounds")
        if np.any(self.chart_areas() <= 0):
            raise ValueError("triangle with non-positive chart orientation")
        edges = self.edges()
        t = self.triangles
        he = np.vstack([t[:, [0, 1]], t[:, [1, 2]], t[:, [2, 0]]])
        key = np.sort(he, axis=1)
        _, counts = np.unique(key, axis=0, return_counts=True)
        if np.any(counts > 2):
            raise ValueError("non-manifold edge")
        bnd = set(map(tuple, np.unique(key, axis=0)[counts == 1]))
        loop_edges = set()
        for lp in self.loops:
            v = lp.vertices
            for a, b in zip(v, np.roll(v, -1)):
                loop_edges.add((min(a, b), max(a, b)))
        if bnd != loop_edges:
            raise ValueError("boundary loops do not match the mesh boundary")
        directed = set(map(tuple, he))
        for lp in self.loops:
            v = lp.vertices
            for a, b in zip(v, np.roll(v, -1)):
                if (a, b) not in directed:
                    raise ValueError("boundary loop not consistently oriented")
        if self.involution is not None:
            tau = self.involution
            n = self.n_vertices
            if np.any(tau[tau] != np.arange(n)) or np.any(tau == np.arange(n)):
                raise ValueError("involution must be a fixed-point-free involution")
            if self.projection is not None and np.any(self.projection[tau] != self.projection):
                raise ValueError("projection not invariant under the involution")
            index = {tuple(sorted(tri)): j for j, tri in enumerate(t.tolist())}
            for tri in t:
                img = tau[tri]
                j = index.get(tuple(sorted(img.tolist())))
                if j is None:
                    raise ValueError("triangulation not invariant under the involution")
                # same cyclic order means orientation preserved
                stored = list(t[j])
                k0 = stored.index(img[0])
                if stored[(k0 + 1) % 3] == img[1]:
                    raise ValueError("involution does not reverse orientation")
        del edges

    def with_metric(self, metric: np.ndarray, true_log_k: float, **params) -> "SurfaceMesh":
        p = dict(self.params)
        p.update(params)
        return replace(self, metric=np.asarray(metric), true_log_k=float(true_log_k), params=p)

    def to_dict(self) -> dict:
        cover = None
        if self.involution is not None:
            cover = {"involution": self.involution.tolist(),
                     "projection": None if self.projection is None else self.projection.tolist()}
        return {
            "schema": MESH_SCHEMA,
            "version": MESH_VERSION,
            "family": self.family,
            "params": self.params,
            "orientable": self.orientable,
            "quotient": self.quotient,
            "true_log_k": self.true_log_k,
            "vertices": self.vertices.tolist(),
            "triangles": self.triangles.tolist(),
            "chart": self.chart.tolist(),
            "metric": self.metric.tolist(),
            "boundary": [lp.to_dict() for lp in self.loops],
            "cover": cover,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SurfaceMesh":
        if d.get("schema") != MESH_SCHEMA:
            raise ValueError("not a mesh document")
        cover = d.get("cover")
        return cls(
            family=d["family"],
            vertices=np.asarray(d["vertices"], dtype=float),
            triangles=np.asarray(d["triangles"], dtype=int),
            chart=np.asarray(d["chart"], dtype=float),
            metric=np.asarray(d["metric"], dtype=float),
            loops=tuple(BoundaryLoop.from_dict(x) for x in d["boundary"]),
            orientable=bool(d["orientable"]),
            quotient=bool(d.get("quotient", False)),
            involution=None if cover is None else np.asarray(cover["involution"], dtype=int),
            projection=None if cover is None or cover.get("projection") is None
            else np.asarray(cover["projection"], dtype=int),
            params=d.get("params", {}),
            true_log_k=float(d.get("true_log_k", 0.0)),
        )

    def save_json(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict()))

    @classmethod
    def load_json(cls, path) -> "SurfaceMesh":
        return cls.from_dict(json.loads(Path(path).read_text()))


def _even_count(x: float, minimum: int = 16) -> int:
    n = int(round(x / 2.0)) * 2
    return max(minimum, n)


def _orient(tri: np.ndarray, chart: np.ndarray):
    e1 = chart[:, 1] - chart[:, 0]
    e2 = chart[:, 2] - chart[:, 0]
    neg = (e1[:, 0] * e2[:, 1] - e1[:, 1] * e2[:, 0]) < 0
    tri = tri.copy()
    chart = chart.copy()
    tri[neg] = tri[neg][:, [0, 2, 1]]
    chart[neg] = chart[neg][:, [0, 2, 1]]
    return tri, chart


def _log_chart(z: np.ndarray, tri: np.ndarray) -> np.ndarray:
    """Per-triangle ``(log|z|, arg z)`` with the angle unwrapped inside each triangle."""
    t = np.log(np.abs(z))[tri]
    th = np.angle(z)[tri]
    d1 = np.angle(np.exp(1j * (th[:, 1] - th[:, 0])))
    d2 = np.angle(np.exp(1j * (th[:, 2] - th[:, 0])))
    th = np.stack([th[:, 0], th[:, 0] + d1, th[:, 0] + d2], axis=1)
    return np.stack([t, th], axis=-1)


def _cylinder_cells(n_t: int, n: int, t0: float, t1: float):
    """Structured triangulation of ``[t0, t1] x S^1`` with alternating diagonals."""
    ts = np.linspace(t0, t1, n_t + 1)
    th = 2 * np.pi * np.arange(n + 1) / n
    tris, charts = [], []
    for j in range(n_t):
        for i in range(n):
            a, b = j * n + i, j * n + (i + 1) % n
            c, d = (j + 1) * n + (i + 1) % n, (j + 1) * n + i
            pa, pb = (ts[j], th[i]), (ts[j], th[i + 1])
            pc, pd = (ts[j + 1], th[i + 1]), (ts[j + 1], th[i])
            if (i + j) % 2 == 0:
                tris += [(a, b, c), (a, c, d)]
                charts += [(pa, pb, pc), (pa, pc, pd)]
            else:
                tris += [(a, b, d), (b, c, d)]
                charts += [(pa, pb, pd), (pb, pc, pd)]
    tri, chart = _orient(np.array(tris), np.array(charts, dtype=float))
    tt, hh = np.meshgrid(ts, th[:-1], indexing="ij")
    z = np.exp(tt + 1j * hh).ravel()
    return z, tri, chart


def _mesh_disk(h: float, radius: float = 1.0) -> SurfaceMesh:
    n = _even_count(2 * np.pi * radius / h)
    dr = h * np.sqrt(3) / 2
    n_r = max(2, int(round(radius / dr)))
    pts = []
    for j in range(n_r):
        r = radius * (1 - j / n_r)
        m = n if j == 0 else max(6, int(round(2 * np.pi * r / h)))
        ang = 2 * np.pi * (np.arange(m) + (0.5 * (j % 2) if j else 0.0)) / m
        pts.append(r * np.exp(1j * ang))
    pts.append(np.array([0j]))
    z = np.concatenate(pts)
    xy = np.column_stack([z.real, z.imag])
    tri = Delaunay(xy).simplices
    chart = xy[tri]
    tri, chart = _orient(tri, chart)
    e1, e2 = chart[:, 1] - chart[:, 0], chart[:, 2] - chart[:, 0]
    keep = np.abs(0.5 * (e1[:, 0] * e2[:, 1] - e1[:, 1] * e2[:, 0])) > 1e-14
    tri, chart = tri[keep], chart[keep]
    metric = np.broadcast_to(np.eye(2), (len(tri), 2, 2)).copy()
    loop = BoundaryLoop(np.arange(n), radius * 2 * np.pi * np.arange(n) / n, 2 * np.pi * radius)
    return SurfaceMesh("disk", xy, tri, chart, metric, (loop,), params={"h": h, "radius": radius})


def _mesh_annulus(h: float, rho: float = 0.5, inner: str = "dirichlet") -> SurfaceMesh:
    if not 0 < rho < 1:
        raise DegenerateParameters(f"inner radius must lie in (0, 1), got {rho}")
    if inner not in ("dirichlet", "neumann"):
        raise DegenerateParameters(f"inner boundary kind must be dirichlet or neumann, got {inner!r}")
    n = _even_count(2 * np.pi / h)
    n_t = max(2, int(round(-np.log(rho) / (2 * np.pi / n))))
    z, tri, chart = _cylinder_cells(n_t, n, np.log(rho), 0.0)
    lam = np.exp(2 * chart[:, :, 0].mean(axis=1))
    metric = lam[:, None, None] * np.eye(2)
    i = np.arange(n)
    outer = BoundaryLoop(n_t * n + i, 2 * np.pi * i / n, 2 * np.pi)
    inner_loop = BoundaryLoop((-i) % n, 2 * np.pi * rho * i / n, 2 * np.pi * rho, kind=inner)
    xy = np.column_stack([z.real, z.imag])
    return SurfaceMesh("annulus", xy, tri, chart, metric, (outer, inner_loop),
                       params={"h": h, "rho": rho, "inner": inner})


def _mobius_metric(chart: np.ndarray, R: float) -> np.ndarray:
    T = np.log(R)
    t = chart[:, :, 0].mean(axis=1)
    lam = R**2 * (np.cosh(t) / np.cosh(T)) ** 2
    return lam[:, None, None] * np.eye(2)


def _cover_projection(tau: np.ndarray) -> np.ndarray:
    rep = np.minimum(np.arange(len(tau)), tau)
    _, proj = np.unique(rep, return_inverse=True)
    return proj


def _mesh_mobius(h: float, R: float = 2.0) -> SurfaceMesh:
    if not R > 1:
        raise DegenerateParameters(f"R must exceed 1, got {R}")
    T = np.log(R)
    n = _even_count(2 * np.pi * R / h)
    n_t = max(2, int(round(2 * T / (2 * np.pi / n))))
    if (n // 2 + n_t) % 2:
        n_t += 1
    z, tri, chart = _cylinder_cells(n_t, n, -T, T)
    j, i = np.divmod(np.arange((n_t + 1) * n), n)
    tau = (n_t - j) * n + (i + n // 2) % n
    ii = np.arange(n)
    s = 2 * np.pi * R * ii / n
    outer = BoundaryLoop(n_t * n + ii, s, 2 * np.pi * R, sheet=1, partner=1)
    inner = BoundaryLoop(tau[n_t * n + (-ii) % n], s, 2 * np.pi * R, sheet=-1, partner=0)
    xy = np.column_stack([z.real, z.imag])
    return SurfaceMesh("mobius", xy, tri, chart, _mobius_metric(chart, R), (outer, inner),
                       orientable=False, quotient=True, involution=tau, projection=_cover_projection(tau),
                       params={"h": h, "R": R})


def mobius_hole_images(R: float, hole_t: float, hole_theta: float, hole_radius: float):
    """Centers and radii of the hole ``|z - c| < r`` and of its image under ``tau``."""
    c = np.exp(hole_t + 1j * hole_theta)
    r = float(hole_radius)
    den = abs(c) ** 2 - r**2
    if den <= 0:
        raise DegenerateParameters("hole must not contain the origin")
    return (c, r), (-c / den, r / den)


def _mesh_mobius_with_hole(h: float, R: float = 3.0, hole_t: float = 0.0, hole_theta: float = 0.0,
                           hole_radius: float = 0.3, seed: int = 7) -> SurfaceMesh:
    """Möbius band with one insulated hole, built on its cover.

    The hole is the round disk ``|z - e^{hole_t + i hole_theta}| < hole_radius``
    in the annulus model; its image under the involution is removed as well.
    """
    if not R > 1:
        raise DegenerateParameters(f"R must exceed 1, got {R}")
    T = np.log(R)
    n = _even_count(2 * np.pi * R / h)
    d = 2 * np.pi / n
    holes = mobius_hole_images(R, hole_t, hole_theta, hole_radius)
    for c, r in holes:
        if abs(c) + r > R * np.exp(-3 * d) or abs(c) - r < np.exp(3 * d) / R:
            raise DegenerateParameters("hole must stay clear of the boundary circles")
    (c1, r1), (c2, r2) = holes
    if abs(c1 - c2) < (r1 + r2) * 1.05:
        raise DegenerateParameters("hole overlaps its own image")
    rng = np.random.default_rng(seed)
    nh = _even_count(2 * np.pi * r1 / (d * abs(c1)))
    phi = -2 * np.pi * np.arange(nh) / nh
    hole_z = c1 + r1 * np.exp(1j * phi)
    outer_z = R * np.exp(2j * np.pi * np.arange(n) / n)
    rows = []
    dy = d * np.sqrt(3) / 2
    t, k = dy / 2, 0
    while t < T - 0.6 * d:
        th = 2 * np.pi * (np.arange(n) + 0.5 * (k % 2)) / n
        rows.append(np.column_stack([np.full(n, t), th]))
        t += dy
        k += 1
    interior = np.vstack(rows)
    interior = interior + rng.uniform(-0.08 * d, 0.08 * d, interior.shape)
    interior = interior[(interior[:, 0] > 0) & (interior[:, 0] < T - 0.6 * d)]
    iz = np.exp(interior[:, 0] + 1j * interior[:, 1])
    keep = np.ones(len(iz), bool)
    for c, r in holes:
        keep &= np.abs(iz - c) > r + 0.6 * d * abs(iz)
    upper = np.concatenate([outer_z, hole_z, iz[keep]])
    z = np.concatenate([upper, mobius_tau(upper)])
    nu = len(upper)
    tau = np.concatenate([np.arange(nu) + nu, np.arange(nu)])
    xy = np.column_stack([z.real, z.imag])
    tri = Delaunay(xy).simplices
    is_inner = np.zeros(len(z), bool)
    is_inner[nu:nu + n] = True
    tri = tri[~np.all(is_inner[tri], axis=1)]
    cen = z[tri].mean(axis=1)
    keep = np.ones(len(tri), bool)
    for c, r in holes:
        keep &= np.abs(cen - c) > r
    tri = tri[keep]
    chart = _log_chart(z, tri)
    tri, chart = _orient(tri, chart)
    ii = np.arange(n)
    s = 2 * np.pi * R * ii / n
    jh = np.arange(nh)
    sh = 2 * np.pi * r1 * jh / nh
    loops = (
        BoundaryLoop(ii, s, 2 * np.pi * R, sheet=1, partner=1),
        BoundaryLoop(tau[(-ii) % n], s, 2 * np.pi * R, sheet=-1, partner=0),
        BoundaryLoop(n + jh, sh, 2 * np.pi * r1, kind="neumann", sheet=1, partner=3),
        BoundaryLoop(tau[n + (-jh) % nh], sh, 2 * np.pi * r1, kind="neumann", sheet=-1, partner=2),
    )
    return SurfaceMesh("mobius-with-hole", xy, tri, chart, _mobius_metric(chart, R), loops,
                       orientable=False, quotient=True, involution=tau, projection=_cover_projection(tau),
                       params={"h": h, "R": R, "hole_t": hole_t, "hole_theta": hole_theta,
                               "hole_radius": float(hole_radius)})


def _mesh_torus_with_hole(h: float, hole_radius: float = 1.0, seed: int = 11) -> SurfaceMesh:
    """Flat square torus of side ``2 pi`` with a chart disk removed around ``(pi, pi)``."""
    a = float(hole_radius)
    side = 2 * np.pi
    if not (0 < a < np.pi - 3 * h):
        raise DegenerateParameters("hole radius must leave room inside the torus")
    rng = np.random.default_rng(seed)
    nb = _even_count(2 * np.pi * a / h)
    phi = -2 * np.pi * np.arange(nb) / nb
    c = np.array([np.pi, np.pi])
    hole = c + a * np.column_stack([np.cos(phi), np.sin(phi)])
    dy = h * np.sqrt(3) / 2
    n_rows = int(round(side / dy))
    dy = side / n_rows
    n_cols = int(round(side / h))
    dx = side / n_cols
    rows = []
    for r in range(n_rows):
        x = (np.arange(n_cols) + 0.5 * (r % 2)) * dx
        rows.append(np.column_stack([x, np.full(n_cols, r * dy)]))
    grid = np.vstack(rows) + rng.uniform(-0.05 * h, 0.05 * h, (n_rows * n_cols, 2))
    grid = np.mod(grid, side)
    grid = grid[np.hypot(*(grid - c).T) > a + 0.6 * h]
    pts = np.vstack([hole, grid])
    npts = len(pts)
    shifts = np.array([(i, j) for i in (-1, 0, 1) for j in (-1, 0, 1)], dtype=float) * side
    tiled = np.vstack([pts + s for s in shifts])
    tri = Delaunay(tiled).simplices
    chart = tiled[tri]
    cen = chart.mean(axis=1)
    inside = np.all((cen >= 0) & (cen < side), axis=1)
    tri, chart, cen = tri[inside], chart[inside], cen[inside]
    keep = np.hypot(*(cen - c).T) > a
    tri, chart = tri[keep] % npts, chart[keep]
    tri, chart = _orient(tri, chart)
    u, v = pts[:, 0], pts[:, 1]
    xyz = np.column_stack([(3 + np.cos(v)) * np.cos(u), (3 + np.cos(v)) * np.sin(u), np.sin(v)])
    metric = np.broadcast_to(np.eye(2), (len(tri), 2, 2)).copy()
    loop = BoundaryLoop(np.arange(nb), 2 * np.pi * a * np.arange(nb) / nb, 2 * np.pi * a)
    return SurfaceMesh("torus-with-hole", xyz, tri, chart, metric, (loop,),
                       params={"h": h, "hole_radius": a})


def build_mesh(family: str, h: float, **params) -> SurfaceMesh:
    """Build a mesh of a named surface family with target edge length ``h``.

    Families: ``disk`` (radius), ``annulus`` (rho, inner), ``mobius`` (R),
    ``mobius-with-hole`` (R, hole_t, hole_theta, hole_radius),
    ``torus-with-hole`` (hole_radius).  For the cylinder-type families
    ``h`` is the edge length along the outer circle.
    """
    fam = canonical_family(family)
    if not h > 0:
        raise DegenerateParameters(f"h must be positive, got {h}")
    builders = {
        "disk": _mesh_disk,
        "annulus": _mesh_annulus,
        "mobius": _mesh_mobius,
        "mobius-with-hole": _mesh_mobius_with_hole,
        "torus-with-hole": _mesh_torus_with_hole,
    }
    try:
        mesh = builders[fam](h, **params)
    except TypeError as exc:
        raise DegenerateParameters(str(exc)) from exc
    return mesh


def double_cover(mesh: SurfaceMesh) -> SurfaceMesh:
    """Orientable double cover with its deck involution.

    For a non-orientable mesh (already stored as a cover) this exposes the
    cover itself.  For an orientable mesh it returns two copies, the second
    with reversed orientation, swapped by the involution.
    """
    if mesh.quotient:
        return replace(mesh, family=mesh.family + "-cover", orientable=True, quotient=False)
    nv = mesh.n_vertices
    tri2 = mesh.triangles[:, [0, 2, 1]] + nv
    # reversing corner order flips chart orientation; mirror the chart to keep it positive
    chart2 = mesh.chart[:, [0, 2, 1]] * np.array([1.0, -1.0])
    metric2 = mesh.metric * np.array([[1.0, -1.0], [-1.0, 1.0]])
    loops = []
    nl = len(mesh.loops)
    for k, lp in enumerate(mesh.loops):
        loops.append(replace(lp, sheet=1, partner=nl + k))
    for k, lp in enumerate(mesh.loops):
        m = len(lp.vertices)
        loops.append(replace(lp, vertices=lp.vertices[(-np.arange(m)) % m] + nv, sheet=-1, partner=k))
    tau = np.concatenate([np.arange(nv) + nv, np.arange(nv)])
    verts = np.vstack([mesh.vertices, mesh.vertices])
    return SurfaceMesh(mesh.family + "-cover", verts, np.vstack([mesh.triangles, tri2]),
                       np.vstack([mesh.chart, chart2]), np.vstack([mesh.metric, metric2]), tuple(loops),
                       orientable=True, quotient=False, involution=tau, projection=np.arange(2 * nv) % nv,
                       params=dict(mesh.params), true_log_k=mesh.true_log_k)


# ----------------------------------------------------------------------
# perturbations


@dataclass(frozen=True)
class PerturbationSpec:
    """Metric perturbation ``g -> e^{eps phi} g`` (conformal) or a shear.

    The shear stretches the first chart direction by ``e^{eps phi}``, which
    gives ``log K = 2 eps phi`` with ``K`` the squared axis ratio.
    """

    epsilon: float
    mode: str = "shear"
    profile: str = "default"
    interior_only: bool = True
    preserve_boundary: bool = True

    def __post_init__(self):
        if self.profile not in PROFILES:
            raise DegenerateParameters(f"unknown perturbation profile {self.profile!r}")
        if self.epsilon < 0:
            raise DegenerateParameters("epsilon must be non-negative")
        if self.mode not in ("conformal", "shear"):
            raise DegenerateParameters(f"unknown perturbation mode {self.mode!r}")


# angular phase of the cos(2 theta) factor; "skew" shares no mirror axis with a hole at theta = 0
PROFILES = {"default": 0.0, "skew": 1.0}


def _bump(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    out = np.zeros_like(x)
    inside = np.abs(x) < 1
    out[inside] = np.exp(1 - 1 / (1 - x[inside] ** 2))
    return out


def _smoothstep(x: np.ndarray) -> np.ndarray:
    x = np.clip(x, 0.0, 1.0)
    return x**3 * (10 - 15 * x + 6 * x**2)


def perturbation_profile(mesh: SurfaceMesh, interior_only: bool = True, profile: str = "default") -> np.ndarray:
    """Smooth per-triangle profile with values in ``[0, 1]``.

    With ``interior_only`` the profile vanishes near every boundary loop.  On
    non-orientable families it is invariant under the involution.  ``profile``
    shifts the phase of the angular factor on cylinder-type families.
    """
    phase = PROFILES[profile]
    c = mesh.centroids()
    fam = mesh.family.replace("-cover", "")
    p = mesh.params
    if fam == "disk":
        r = np.hypot(c[:, 0], c[:, 1]) / p.get("radius", 1.0)
        return _bump(r / 0.6) if interior_only else 0.75 + 0.25 * np.cos(np.pi * r)
    if fam in ("annulus", "mobius", "mobius-with-hole"):
        t, th = c[:, 0], c[:, 1]
        ang = 0.75 + 0.25 * np.cos(2 * th - phase)
        if not interior_only:
            return ang
        if fam == "annulus":
            lr = np.log(p["rho"])
            prof = _bump((t - lr / 2) / (0.6 * abs(lr) / 2)) * ang
        else:
            prof = _bump(t / (0.6 * np.log(p["R"]))) * ang
        if fam == "mobius-with-hole":
            z = np.exp(t + 1j * th)
            for hc, hr in mobius_hole_images(p["R"], p["hole_t"], p["hole_theta"], p["hole_radius"]):
                prof = prof * _smoothstep((np.abs(z - hc) / hr - 1.3) / 0.7)
        return prof
    if fam == "torus-with-hole":
        a = p["hole_radius"]
        dx = np.angle(np.exp(1j * c[:, 0]))
        dy = np.angle(np.exp(1j * c[:, 1]))
        d = np.hypot(dx, dy)
        return _bump(d / (np.pi - a - 0.3)) if interior_only else np.ones(len(c))
    raise UnknownFamily(fam)


def _sym_sqrt(G: np.ndarray) -> np.ndarray:
    w, V = np.linalg.eigh(G)
    return np.einsum("tij,tj,tkj->tik", V, np.sqrt(w), V)


def log_dilatation(G0: np.ndarray, G1: np.ndarray) -> np.ndarray:
    """Per-triangle ``log K`` of the identity map between two metrics (squared convention)."""
    ev = np.linalg.eigvals(np.linalg.solve(G0, G1)).real
    ev = np.sort(ev, axis=1)
    return np.log(ev[:, 1] / ev[:, 0])


def perturb_metric(mesh: SurfaceMesh, spec: PerturbationSpec) -> SurfaceMesh:
    """Return a mesh with perturbed metric and recorded ground-truth ``sup log K``."""
    if spec.epsilon == 0:
        return mesh
    phi = perturbation_profile(mesh, spec.interior_only, spec.profile)
    if spec.preserve_boundary:
        on_boundary = np.zeros(mesh.n_vertices, bool)
        for lp in mesh.loops:
            on_boundary[lp.vertices] = True
        touching = np.any(on_boundary[mesh.triangles], axis=1)
        if np.any(np.abs(phi[touching]) > 0):
            raise BoundaryLengthChanged("perturbation support reaches the boundary")
    G = mesh.metric
    if spec.mode == "conformal":
        G1 = np.exp(spec.epsilon * phi)[:, None, None] * G
    else:
        S = _sym_sqrt(G)
        F2 = np.zeros_like(G)
        F2[:, 0, 0] = np.exp(2 * spec.epsilon * phi)
        F2[:, 1, 1] = 1.0
        G1 = S @ F2 @ S
    true = float(log_dilatation(G, G1).max()) + mesh.true_log_k
    return mesh.with_metric(G1, true, perturbation={"epsilon": spec.epsilon, "mode": spec.mode})


# ----------------------------------------------------------------------
# finite elements


def stiffness_matrix(mesh: SurfaceMesh) -> sp.csr_matrix:
    """P1 stiffness matrix of the Laplace-Beltrami operator."""
    ch = mesh.chart
    E = np.stack([ch[:, 1] - ch[:, 0], ch[:, 2] - ch[:, 0]], axis=1)  # rows: edge vectors
    ref = np.array([[-1.0, 1.0, 0.0], [-1.0, 0.0, 1.0]])
    grads = np.linalg.solve(E, np.broadcast_to(ref, (len(E), 2, 3)))
    G = mesh.metric
    Ginv = np.linalg.inv(G)
    vol = np.abs(np.linalg.det(E)) / 2 * np.sqrt(np.linalg.det(G))
    K_loc = vol[:, None, None] * np.einsum("tia,tij,tjb->tab", grads, Ginv, grads)
    rows = np.repeat(mesh.triangles, 3, axis=1).ravel()
    cols = np.tile(mesh.triangles, (1, 3)).ravel()
    n = mesh.n_vertices
    return sp.csr_matrix((K_loc.ravel(), (rows, cols)), shape=(n, n))


def _gamma_values(mesh: SurfaceMesh, B: np.ndarray) -> tuple:
    """Dirichlet vertex indices and the data matrix lifted to every Dirichlet loop."""
    gl = mesh.gamma_loops
    node_of = {}
    offset = 0
    for li in gl:
        for k, v in enumerate(mesh.loops[li].vertices):
            node_of[int(v)] = offset + k
        offset += len(mesh.loops[li].vertices)
    verts, rows = [], []
    for lp in mesh.loops:
        if lp.kind != "dirichlet":
            continue
        for v in lp.vertices:
            v = int(v)
            if v in node_of:
                rows.append(node_of[v])
            else:
                if mesh.involution is None:
                    raise ValueError("second-sheet loop without involution")
                rows.append(node_of[int(mesh.involution[v])])
            verts.append(v)
    return np.array(verts), B[np.array(rows)]


def dn_fem(mesh: SurfaceMesh, k_max: int = 16, tol: float = 1e-8) -> DNMatrix:
    """Finite element DN map on the measured boundary loops.

    Each boundary Fourier mode ``|k| <= k_max`` is extended harmonically with
    P1 elements; the DN matrix in the mode basis is the Dirichlet energy
    pairing ``<Lambda f, g> = int grad u_f . grad u_g`` (halved on covers),
    which is symmetric by construction.
    """
    grid = mesh.boundary_grid()
    B, _, _, _ = fourier_basis(grid, k_max)
    dverts, UB = _gamma_values(mesh, B)
    K = stiffness_matrix(mesh)
    n = mesh.n_vertices
    free = np.ones(n, bool)
    free[dverts] = False
    fi = np.flatnonzero(free)
    U = np.zeros((n, B.shape[1]))
    U[dverts] = UB
    rhs = -(K[fi][:, dverts] @ UB)
    try:
        lu = spla.splu(K[fi][:, fi].tocsc())
        U[fi] = lu.solve(rhs)
    except RuntimeError as exc:
        raise SolverFailure(str(exc)) from exc
    res = K[fi] @ U
    scale = np.abs(K[fi][:, dverts] @ UB).max() + np.finfo(float).tiny
    if not np.all(np.isfinite(U)) or np.abs(res).max() > tol * scale * 1e4:
        raise NonConvergence(f"interior residual {np.abs(res).max():.3e}")
    E = U.T @ (K @ U)
    if mesh.quotient:
        E = E / 2
    raw = float(np.linalg.norm(E - E.T) / max(np.linalg.norm(E), np.finfo(float).tiny))
    E = (E + E.T) / 2
    mat = B @ E @ B.T * grid.weights[None, :]
    meta = {"family": mesh.family, "k_max": k_max, "raw_asymmetry": raw,
            "true_log_k": mesh.true_log_k, **{k: v for k, v in mesh.params.items() if np.isscalar(v)}}
    return DNMatrix(grid, mat, "FEM" if mesh.true_log_k == 0 else "perturbed", meta=meta)


def modal_response(dn: DNMatrix, k_max: int) -> np.ndarray:
    """Rayleigh quotients ``<Lambda e, e>`` for the cosine/sine modes of component 0."""
    B, _, comp, k = fourier_basis(dn.grid, k_max)
    sel = (comp == 0) & (k > 0)
    Bs = B[:, sel]
    return np.einsum("ia,i,ia->a", Bs, dn.grid.weights, dn.matrix @ Bs)


def spectral_error(dn: DNMatrix, ref: DNMatrix, k_max: int = 8) -> float:
    """Max relative modal error of ``dn`` against ``ref`` for ``1 <= |k| <= k_max``."""
    dn.grid.require_same(ref.grid)
    B, _, _, k = fourier_basis(dn.grid, k_max)
    sel = k > 0
    Bs = B[:, sel]
    sw = np.sqrt(dn.grid.weights)[:, None]
    diff = np.linalg.norm(sw * ((dn.matrix - ref.matrix) @ Bs), axis=0)
    base = np.linalg.norm(sw * (ref.matrix @ Bs), axis=0)
    return float(np.max(diff / base))


def mesh_error_estimate(family: str, h: float, k_max: int = 16, modes: int = 8, **params) -> float:
    """Richardson estimate of the relative modal error at resolution ``h``.

    Compares modal responses at ``h`` and ``2h`` and assumes second-order
    convergence, so the error at ``h`` is about a third of the difference.
    """
    fine = modal_response(dn_fem(build_mesh(family, h, **params), k_max), modes)
    coarse = modal_response(dn_fem(build_mesh(family, 2 * h, **params), k_max), modes)
    m = min(len(fine), len(coarse))
    return float(np.max(np.abs(fine[:m] - coarse[:m]) / np.abs(fine[:m])) / 3)
