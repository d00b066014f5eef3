"""Boundary operator algebra built from a DN map.

For real boundary data ``f`` the operators

    N(f) = 1/2 L[f^2 - (JLf)^2] - f Lf - (JLf) df
    D f  = df + L J L f
    G(f) = D f * d N(f) - N(f) * d D f

(``L`` the DN matrix, ``d`` the arc-length derivative, ``J`` its zero-mean
inverse) detect traces of holomorphic functions: on an orientable surface
``f`` is the real part of such a trace iff ``D f = 0``; on a non-orientable
surface ``f`` lifts to the real part of a symmetric holomorphic trace iff
``G(f) = 0``.  The null sets are linear spaces whose codimension is
``1 - chi`` and ``-chi`` respectively, which is what the probes below
measure.

All array-level helpers accept trailing batch axes, so a whole basis can be
pushed through an operator in one call.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
from scipy.optimize import least_squares

from .boundary_calculus import (
    SCHEMA_VERSION,
    BoundaryFunction,
    BoundaryGrid,
    DNMatrix,
    cl_norm,
    diff,
    fourier_basis,
    integrate,
)
from .errors import (
    AnchorNotFound,
    CodimMismatch,
    DenominatorDegenerate,
    Inconclusive,
    MinimizerEscaped,
    NotInKernel,
    RankAmbiguous,
)

GAP_NULL = 1e2
TOL_ZERO = 1e-7
E_NORM_ORDER = 4  # C^{l+4} with l = 0


class CRatioWarning(UserWarning):
    """Pointwise and least-squares values of ``c_f`` disagree."""


# ----------------------------------------------------------------------
# array level


def _parts(A: np.ndarray, grid: BoundaryGrid, f: np.ndarray):
    """``(df, Lf, JLf)`` for node values ``f`` (trailing batch axes allowed)."""
    Lf = A @ f
    return diff(grid, f), Lf, integrate(grid, Lf, check=False)


def n_array(A, grid, f):
    df, Lf, JLf = _parts(A, grid, f)
    return 0.5 * (A @ (f * f - JLf * JLf)) - f * Lf - JLf * df


def d_array(A, grid, f):
    df, Lf, JLf = _parts(A, grid, f)
    return df + A @ integrate(grid, Lf, check=False)


def q_array(A, grid, f, h):
    df, Lf, JLf = _parts(A, grid, f)
    dh, Lh, JLh = _parts(A, grid, h)
    return A @ (f * h - JLf * JLh) - f * Lh - h * Lf - JLf * dh - JLh * df


def g_array(A, grid, f):
    N = n_array(A, grid, f)
    D = d_array(A, grid, f)
    return D * diff(grid, N) - N * diff(grid, D)


def g_scale_array(A, grid, f):
    """Pointwise size of the terms that cancel in ``G(f)``.

    Besides the two products of ``G`` this includes ``|D f| |d(f L f)|``, the
    size ``N(f)`` would have without internal cancellation; it keeps the
    scale honest on surfaces where ``N`` vanishes identically.
    """
    N = n_array(A, grid, f)
    D = d_array(A, grid, f)
    raw = np.abs(D) * np.abs(diff(grid, f * (A @ f)))
    return np.abs(D * diff(grid, N)) + np.abs(N * diff(grid, D)) + raw


def g1_array(A, grid, f, H):
    """Linearization of ``G`` at ``f`` applied to the columns of ``H``."""
    batch = H.ndim > 1
    N = n_array(A, grid, f)
    D = d_array(A, grid, f)
    fb = f[:, None] if batch else f
    dN, dD = diff(grid, N), diff(grid, D)
    if batch:
        N, D, dN, dD = N[:, None], D[:, None], dN[:, None], dD[:, None]
    DH = d_array(A, grid, H)
    Q = q_array(A, grid, np.broadcast_to(fb, H.shape), H)
    return dN * DH - N * diff(grid, DH) + D * diff(grid, Q) - dD * Q


def g2_array(A, grid, f, h):
    D = d_array(A, grid, f)
    Dh = d_array(A, grid, h)
    Q = q_array(A, grid, f, h)
    Nh = n_array(A, grid, h)
    return Dh * diff(grid, Q) - diff(grid, Dh) * Q + D * diff(grid, Nh) - diff(grid, D) * Nh


def _flux_projector(A: np.ndarray, grid: BoundaryGrid):
    """Weighted-orthonormal basis of ``span{L 1_j}`` and the component indicators."""
    q = grid.n_components
    ind = np.zeros((grid.n_nodes, q))
    for c in range(q):
        ind[grid.slice(c), c] = 1.0
    sw = np.sqrt(grid.weights)[:, None]
    V = sw * (A @ ind)
    if q == 1 or not np.any(V):
        return np.zeros((grid.n_nodes, 0)), ind
    U, s, _ = np.linalg.svd(V, full_matrices=False)
    keep = s > 1e-10 * s[0]
    return U[:, keep], ind


def d_ext_array(A: np.ndarray, grid: BoundaryGrid, F: np.ndarray) -> np.ndarray:
    """Weighted residual rows whose joint zero set is the holomorphic-trace space.

    On one boundary component these are just ``sqrt(w) D f``.  With several
    components the conjugate function may jump by a constant between loops,
    so ``D f`` only has to vanish modulo ``span{L 1_j}``; in exchange every
    loop must carry zero net current, which adds one row per component.
    """
    F2 = F if F.ndim > 1 else F[:, None]
    sw = np.sqrt(grid.weights)[:, None]
    R = sw * d_array(A, grid, F2)
    P, ind = _flux_projector(A, grid)
    if P.shape[1]:
        R = R - P @ (P.T @ R)
        flux = ind.T @ (grid.weights[:, None] * (A @ F2))
        R = np.vstack([R, flux / np.sqrt(grid.weights.sum())])
    return R if F.ndim > 1 else R[:, 0]


def conjugate_constants(A: np.ndarray, grid: BoundaryGrid, v: np.ndarray) -> np.ndarray:
    """Per-loop constants ``c`` making ``v + sum c_j 1_j`` orthogonal to every ``L 1_j``.

    A harmonic conjugate ``v`` satisfies ``<v, L 1_j> = 0`` for each loop
    (Green's identity with the harmonic measure of the loop); the minimal
    norm solution fixes the remaining global constant.
    """
    q = grid.n_components
    if q == 1:
        return np.zeros(1)
    ind = np.zeros((grid.n_nodes, q))
    for c in range(q):
        ind[grid.slice(c), c] = 1.0
    L1 = A @ ind
    M = L1.T @ (grid.weights[:, None] * ind)
    rhs = -L1.T @ (grid.weights * v)
    c, *_ = np.linalg.lstsq(M, rhs, rcond=1e-10)
    return c


# ----------------------------------------------------------------------
# function level


def _real(f: BoundaryFunction) -> np.ndarray:
    if not f.is_real:
        raise ValueError("expected real boundary data")
    return np.asarray(f.values, dtype=float)


def frak_N(dn: DNMatrix, f: BoundaryFunction) -> BoundaryFunction:
    dn.grid.require_same(f.grid)
    return BoundaryFunction(f.grid, n_array(dn.matrix, dn.grid, _real(f)))


def frak_D(dn: DNMatrix, f: BoundaryFunction) -> BoundaryFunction:
    dn.grid.require_same(f.grid)
    return BoundaryFunction(f.grid, d_array(dn.matrix, dn.grid, _real(f)))


def frak_Q(dn: DNMatrix, f: BoundaryFunction, h: BoundaryFunction) -> BoundaryFunction:
    """Symmetric bilinear form with ``Q(f, f) = 2 N(f)``."""
    dn.grid.require_same(f.grid)
    dn.grid.require_same(h.grid)
    return BoundaryFunction(f.grid, q_array(dn.matrix, dn.grid, _real(f), _real(h)))


def g_map(dn: DNMatrix, f: BoundaryFunction) -> BoundaryFunction:
    dn.grid.require_same(f.grid)
    return BoundaryFunction(f.grid, g_array(dn.matrix, dn.grid, _real(f)))


def g1_linearization(dn: DNMatrix, f: BoundaryFunction) -> Callable[[BoundaryFunction], BoundaryFunction]:
    """The linear map ``h -> G^(1)_f(h)``; ``G(f+h) = G(f) + G1 h + G2 h + G(h)``."""
    dn.grid.require_same(f.grid)
    fv = _real(f)

    def apply(h: BoundaryFunction) -> BoundaryFunction:
        return BoundaryFunction(h.grid, g1_array(dn.matrix, dn.grid, fv, _real(h)))

    return apply


def g2_term(dn: DNMatrix, f: BoundaryFunction, h: BoundaryFunction) -> BoundaryFunction:
    """Quadratic part ``G^(2)_f(h)`` of the expansion of ``G(f+h)``."""
    return BoundaryFunction(f.grid, g2_array(dn.matrix, dn.grid, _real(f), _real(h)))


def e_norm(f: BoundaryFunction) -> float:
    return cl_norm(f, E_NORM_ORDER)


def _variation(v: np.ndarray) -> float:
    return float(np.ptp(v)) if v.size else 0.0


def c_ratio(dn: DNMatrix, f: BoundaryFunction, tol: float = 1e-10, return_flag: bool = False):
    """The constant ``c_f = N(f) / D f``, read at the node where ``|D f|`` peaks.

    Falls back to the least-squares value when the two readings differ by
    more than 10 %, emitting :class:`CRatioWarning`.  Meshed DN maps carry
    node-level noise, so they always use the least-squares value.  With ``return_flag``
    returns ``(c, used_fallback)``.
    """
    fv = _real(f)
    if _variation(fv) <= tol * max(1.0, np.abs(fv).max()):
        return (0.0, False) if return_flag else 0.0
    A, g = dn.matrix, dn.grid
    N = n_array(A, g, fv)
    D = d_array(A, g, fv)
    i = int(np.argmax(np.abs(D)))
    if abs(D[i]) <= tol * cl_norm(f, 3):
        raise DenominatorDegenerate(f"max |D f| = {abs(D[i]):.3e}; the surface looks orientable")
    pt = N[i] / D[i]
    w = g.weights
    ls = float(np.sum(w * N * D) / np.sum(w * D * D))
    if dn.mesh_error:
        return (ls, False) if return_flag else ls
    floor = 1e-9 * np.abs(N).max() / abs(D[i]) + 1e-14
    flagged = abs(pt - ls) > 0.1 * abs(ls) + floor
    if flagged:
        warnings.warn(f"c_f pointwise {pt:.6g} vs least squares {ls:.6g}", CRatioWarning, stacklevel=2)
    c = ls if flagged else float(pt)
    return (c, flagged) if return_flag else c


# ----------------------------------------------------------------------
# admissible maps


@dataclass(frozen=True, eq=False)
class AdmissibleMapHandle:
    """``G`` (degree 3) or the extended ``D`` (degree 1) bound to a DN map.

    Calling the handle returns a weighted residual vector whose Euclidean
    norm approximates the L2 norm of the map's output.
    """

    dn: DNMatrix
    alpha: int
    m: int | None = None
    l: int = 0

    def __post_init__(self):
        if self.alpha not in (1, 3):
            raise ValueError("alpha must be 1 or 3")

    @classmethod
    def for_dn(cls, dn: DNMatrix, orientable: bool, m: int | None = None) -> "AdmissibleMapHandle":
        return cls(dn, 1 if orientable else 3, m)

    @property
    def grid(self) -> BoundaryGrid:
        return self.dn.grid

    @property
    def norm_indices(self) -> tuple:
        return (self.l + 4, self.l)

    def residual(self, f: np.ndarray) -> np.ndarray:
        A, g = self.dn.matrix, self.dn.grid
        if self.alpha == 1:
            return d_ext_array(A, g, f)
        sw = np.sqrt(g.weights)
        G = g_array(A, g, f)
        return sw[:, None] * G if G.ndim > 1 else sw * G

    def scale(self, f: np.ndarray) -> float:
        """Norm of the cancelling terms, so ``|residual| / scale`` is scale free."""
        A, g = self.dn.matrix, self.dn.grid
        sw = np.sqrt(g.weights)
        if self.alpha == 1:
            df, Lf, JLf = _parts(A, g, f)
            return float(np.linalg.norm(sw * np.abs(df)) + np.linalg.norm(sw * (A @ JLf)))
        return float(np.linalg.norm(sw * g_scale_array(A, g, f)))

    def relative_residual(self, f: np.ndarray) -> float:
        if _variation(f) <= 1e-12 * max(np.abs(f).max(), 1e-300):
            return 0.0
        s = self.scale(f)
        return float(np.linalg.norm(self.residual(f)) / s) if s > 0 else 0.0

    def __call__(self, f: BoundaryFunction) -> np.ndarray:
        self.grid.require_same(f.grid)
        return self.residual(_real(f))

    def homogeneity_residual(self, rng=None, k_max: int = 6, cs=(2.0, 5.0)) -> float:
        rng = np.random.default_rng(0) if rng is None else rng
        B, *_ = fourier_basis(self.grid, k_max, include_constant=False)
        f = B @ rng.standard_normal(B.shape[1])
        r = self.residual(f)
        worst = 0.0
        for c in cs:
            rc = self.residual(c * f)
            worst = max(worst, np.linalg.norm(rc - c**self.alpha * r) / (c**self.alpha * np.linalg.norm(r) + 1e-300))
        return float(worst)


# ----------------------------------------------------------------------
# orientability and topology


@dataclass
class OrientabilityVerdict:
    orientable: bool
    residuals: list
    tol_orient: float
    margin: float
    trial_codim: int

    def to_dict(self) -> dict:
        return {"orientable": self.orientable, "residuals": [float(r) for r in self.residuals],
                "tol_orient": self.tol_orient, "margin": self.margin, "trial_codim": self.trial_codim}


def default_trials(grid: BoundaryGrid) -> list:
    """Eight nonconstant trials built from the two lowest modes on every loop.

    Low modes are used on purpose: for non-orientable surfaces ``D`` decays
    exponentially on high even modes, so high-mode trials carry little signal.
    """
    B, _, _, k = fourier_basis(grid, 2, include_constant=False)
    idx = {}
    for j, kk in enumerate(k):
        idx.setdefault(int(kk), []).append(j)
    cos1 = sum(B[:, j] for j in idx[1][0::2])
    sin1 = sum(B[:, j] for j in idx[1][1::2])
    cos2 = sum(B[:, j] for j in idx[2][0::2])
    sin2 = sum(B[:, j] for j in idx[2][1::2])
    vals = [cos1, sin1, cos2, sin2, cos1 + sin2, sin1 - cos2, cos1 + 0.5 * cos2, sin1 + 0.5 * sin2]
    return [BoundaryFunction(grid, v) for v in vals]


def default_tol_orient(dn: DNMatrix) -> float:
    return max(1e-6, 10.0 * float(dn.mesh_error or 0.0))


def orientability_probe(dn: DNMatrix, trials: Sequence[BoundaryFunction] | None = None,
                        tol_orient: float | None = None, margin_required: float = 10.0) -> OrientabilityVerdict:
    """Decide orientability from how well trials can be holomorphic real parts.

    The statistic is ``min_i |D f_i|_C0 / |f_i|_C3`` (extended ``D`` for
    several loops).  Orientable needs it below ``tol_orient / margin``,
    non-orientable above ``tol_orient * margin``; anything between raises
    :class:`Inconclusive`.
    """
    trials = default_trials(dn.grid) if trials is None else list(trials)
    if len(trials) < 8:
        raise ValueError("at least 8 trial functions are required")
    tol = default_tol_orient(dn) if tol_orient is None else float(tol_orient)
    A, g = dn.matrix, dn.grid
    F = np.stack([_real(t) for t in trials], axis=1)
    if np.any(np.ptp(F, axis=0) == 0):
        raise ValueError("trial functions must be nonconstant")
    sw = np.sqrt(g.weights)[:, None]
    R = d_ext_array(A, g, F)
    Dv = R[: g.n_nodes] / sw
    extra = R[g.n_nodes:]
    c0 = np.abs(Dv).max(axis=0)
    if extra.size:
        c0 = np.maximum(c0, np.abs(extra).max(axis=0) / np.sqrt(g.weights.mean()))
    res = c0 / np.array([cl_norm(t, 3) for t in trials])
    s = np.linalg.svd(R / np.linalg.norm(F * sw, axis=0)[None, :], compute_uv=False)
    codim = int(np.sum(s > max(tol, 1e-12)))
    best = float(res.min())
    if best <= tol / margin_required and codim < len(trials):
        return OrientabilityVerdict(True, res.tolist(), tol, tol / max(best, 1e-300), codim)
    if best >= tol * margin_required:
        return OrientabilityVerdict(False, res.tolist(), tol, best / tol, codim)
    raise Inconclusive(f"min trial residual {best:.3e} within x{margin_required:g} of tol {tol:.1e}")


@dataclass
class RankReading:
    codim: int
    singular_values: np.ndarray
    gap_ratio: float


def read_codim(s: np.ndarray, floor: float, gap_null: float = GAP_NULL) -> RankReading:
    """Codimension from the largest gap of ``[1, s_0, s_1, ...]``.

    Values below ``floor`` are clamped to it, so nothing inside the noise
    cluster can produce a gap; the leading 1 is a sentinel allowing codim 0.
    """
    s = np.sort(np.asarray(s, dtype=float))[::-1]
    c = np.maximum(np.concatenate([[1.0], s]), floor)
    ratios = c[:-1] / c[1:]
    i = int(np.argmax(ratios))
    if ratios[i] < gap_null:
        raise RankAmbiguous(f"largest singular-value gap {ratios[i]:.3g} < {gap_null:g}")
    return RankReading(i, s, float(ratios[i]))


def d_ext_singular_values(dn: DNMatrix, k_max: int = 8) -> np.ndarray:
    """Singular values of the extended ``D`` on H1-normalized modes ``|k| <= k_max``."""
    B, kappa, _, _ = fourier_basis(dn.grid, k_max)
    cols = B / np.sqrt(1.0 + kappa**2)[None, :]
    return np.linalg.svd(d_ext_array(dn.matrix, dn.grid, cols), compute_uv=False)


def orientable_codim(dn: DNMatrix, k_max: int = 8, gap_null: float = GAP_NULL) -> RankReading:
    floor = max(1e-11, 0.1 * float(dn.mesh_error or 0.0))
    return read_codim(d_ext_singular_values(dn, k_max), floor, gap_null)


def euler_characteristic(dn: DNMatrix, orientable: bool, k_max: int | None = None,
                         gap_null: float = GAP_NULL, **null_kwargs) -> int:
    """``1 - codim ker D`` (orientable) or ``-codim G^{-1}(0)`` (non-orientable)."""
    if orientable:
        return 1 - orientable_codim(dn, k_max or 8, gap_null).codim
    basis = null_space(dn, k_max=k_max or 8, gap_null=gap_null, **null_kwargs)
    return -basis.codim


# ----------------------------------------------------------------------
# null spaces


@dataclass(eq=False)
class NullSpaceBasis:
    """Orthonormal (grid-weighted) basis of a null set plus complement directions."""

    grid: BoundaryGrid
    alpha: int
    basis: np.ndarray
    complement: np.ndarray
    residuals: np.ndarray
    anchor: np.ndarray | None = None
    singular_values: np.ndarray = field(default_factory=lambda: np.zeros(0))
    gap_ratio: float = float("inf")
    anchor_residual: float = 0.0
    k_max: int = 8

    @property
    def codim(self) -> int:
        return int(self.complement.shape[1])

    @property
    def dim(self) -> int:
        return int(self.basis.shape[1])

    def basis_functions(self) -> list:
        return [BoundaryFunction(self.grid, v) for v in self.basis.T]

    def complement_functions(self) -> list:
        return [BoundaryFunction(self.grid, v) for v in self.complement.T]

    def project(self, f: BoundaryFunction) -> BoundaryFunction:
        """Weighted orthogonal projection onto the span of the basis."""
        w = self.grid.weights
        c = self.basis.T @ (w * _real(f))
        return BoundaryFunction(self.grid, self.basis @ c)

    def to_dict(self) -> dict:
        return {
            "schema": "surfeit.null_space",
            "version": SCHEMA_VERSION,
            "grid": self.grid.to_dict(),
            "alpha": self.alpha,
            "codim": self.codim,
            "basis": self.basis.T.tolist(),
            "complement": self.complement.T.tolist(),
            "residuals": np.asarray(self.residuals).tolist(),
            "anchor": None if self.anchor is None else self.anchor.tolist(),
            "singular_values": np.asarray(self.singular_values).tolist(),
            "gap_ratio": self.gap_ratio if np.isfinite(self.gap_ratio) else None,
            "anchor_residual": self.anchor_residual,
            "k_max": self.k_max,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "NullSpaceBasis":
        if d.get("schema") != "surfeit.null_space":
            raise ValueError("not a null-space document")
        grid = BoundaryGrid.from_dict(d["grid"])
        n = grid.n_nodes

        def mat(rows):
            return np.asarray(rows, dtype=float).reshape(-1, n).T if rows else np.zeros((n, 0))

        gap = d.get("gap_ratio")
        return cls(grid, int(d["alpha"]), mat(d["basis"]), mat(d["complement"]),
                   np.asarray(d["residuals"], dtype=float),
                   None if d.get("anchor") is None else np.asarray(d["anchor"], dtype=float),
                   np.asarray(d.get("singular_values", []), dtype=float),
                   float("inf") if gap is None else float(gap), float(d.get("anchor_residual", 0.0)),
                   int(d.get("k_max", 8)))

    def save_json(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict()))

    @classmethod
    def load_json(cls, path) -> "NullSpaceBasis":
        return cls.from_dict(json.loads(Path(path).read_text()))


def _weighted_orthonormal(grid: BoundaryGrid, V: np.ndarray) -> np.ndarray:
    if V.shape[1] == 0:
        return V
    sw = np.sqrt(grid.weights)[:, None]
    Q, _ = np.linalg.qr(sw * V)
    return Q / sw


def default_tol_null(dn: DNMatrix) -> float:
    return max(1e-6, 50.0 * float(dn.mesh_error or 0.0))


def find_anchor(dn: DNMatrix, k_max: int = 8, starts: int = 16, seed: int = 0, max_nfev: int = 300):
    """Multistart search for a nonconstant ``f`` with ``G(f) = 0``.

    Minimizes ``|G(f)| / |(|D f| |dN(f)| + |N(f)| |dD f|)|``, which is
    invariant under scaling and stays near 1 for generic ``f``; returns the
    unit-norm best point and its relative residual.
    """
    g, A = dn.grid, dn.matrix
    B, *_ = fourier_basis(g, k_max, include_constant=False)
    sw = np.sqrt(g.weights)
    rng = np.random.default_rng(seed)

    def rel(c):
        f = B @ c
        den = np.linalg.norm(sw * g_scale_array(A, g, f)) + 1e-300
        return sw * g_array(A, g, f) / den

    best_c, best_r = None, np.inf
    for _ in range(starts):
        c0 = rng.standard_normal(B.shape[1])
        r0 = float(np.linalg.norm(rel(c0)))
        if r0 < 1e-12:
            c, r = c0, r0
        else:
            sol = least_squares(rel, c0, method="trf", xtol=1e-15, ftol=1e-15, gtol=1e-15, max_nfev=max_nfev)
            c, r = sol.x, float(np.linalg.norm(sol.fun))
        if r < best_r:
            best_c, best_r = c, r
        if best_r < 1e-12:
            break
    best_c = best_c / np.linalg.norm(best_c)
    return B @ best_c, best_r


def _normalized_linearization(A, grid, f0, B):
    """Singular values of ``G1_{f0}`` over ``|D f0| max_j |d(f0 L b_j)|`` and right vectors."""
    sw = np.sqrt(grid.weights)[:, None]
    G1 = sw * g1_array(A, grid, f0, B)
    D0 = d_array(A, grid, f0)
    S = np.linalg.norm(sw[:, 0] * D0) * np.max(np.linalg.norm(sw * diff(grid, f0[:, None] * (A @ B)), axis=0))
    _, s, Vt = np.linalg.svd(G1, full_matrices=True)
    s = np.concatenate([s, np.zeros(B.shape[1] - len(s))])
    return (s / S if S > 0 else np.zeros_like(s)), Vt


def _best_gap(sn: np.ndarray, floor: float = 1e-13):
    c = np.maximum(sn, floor)
    ratios = c[:-1] / c[1:]
    i = int(np.argmax(ratios))
    return i + 1, float(ratios[i])


def null_space(dn: DNMatrix, m_hint: int | None = None, k_max: int = 8, starts: int = 16, seed: int = 0,
               tol_null: float | None = None, tol_zero: float = TOL_ZERO, gap_null: float = GAP_NULL,
               candidates: int = 8) -> NullSpaceBasis:
    """Discretized null set of ``G`` on zero-mean modes ``|k| <= k_max`` plus constants.

    The anchor ``f0`` from :func:`find_anchor` lies in the null set, which is
    a linear space, so the null set equals ``ker G1_{f0}``.  Singular values
    of ``G1_{f0}`` are normalized by ``|D f0| max_j |d(f0 L b_j)|``, the size
    of the individual terms.  Codim is 0 when the largest normalized value is
    below ``tol_zero``; otherwise it sits at the largest gap, which must reach
    ``gap_null``.  How far the complement directions stand out depends on the
    anchor, so random elements of the first kernel estimate are tried as
    anchors too and the one with the widest gap is kept.
    """
    g, A = dn.grid, dn.matrix
    tol = default_tol_null(dn) if tol_null is None else float(tol_null)
    f0, r0 = find_anchor(dn, k_max, starts, seed)
    if r0 > tol:
        raise AnchorNotFound(f"best relative residual {r0:.3e} exceeds {tol:.1e}")
    B, *_ = fourier_basis(g, k_max, include_constant=False)
    sn, Vt = _normalized_linearization(A, g, f0, B)
    if sn[0] <= tol_zero:
        codim, gap = 0, 1.0 / max(sn[0], 1e-300)
    else:
        cut, gap = _best_gap(sn)
        rng = np.random.default_rng(seed + 1)
        handle = AdmissibleMapHandle(dn, 3)
        for _ in range(candidates):
            f1 = B @ (Vt[cut:].T @ rng.standard_normal(B.shape[1] - cut))
            f1 /= np.sqrt(np.sum(g.weights * f1**2))
            r1 = handle.relative_residual(f1)
            if r1 > tol:
                continue
            sn1, Vt1 = _normalized_linearization(A, g, f1, B)
            cut1, gap1 = _best_gap(sn1)
            if cut1 == cut and gap1 > gap:
                f0, r0, sn, Vt, gap = f1, r1, sn1, Vt1, gap1
        codim = cut
        if gap < gap_null:
            raise RankAmbiguous(f"largest normalized singular-value gap {gap:.3g} < {gap_null:g}")
    if m_hint is not None and codim != m_hint:
        raise CodimMismatch(f"found codimension {codim}, expected {m_hint}")
    ker = B @ Vt[codim:].T
    comp = _weighted_orthonormal(g, B @ Vt[:codim].T)
    basis = _weighted_orthonormal(g, np.hstack([np.ones((g.n_nodes, 1)), ker]))
    handle = AdmissibleMapHandle(dn, 3)
    res = np.array([handle.relative_residual(v) for v in basis.T])
    if np.any(res > tol):
        raise AnchorNotFound(f"{int(np.sum(res > tol))} kernel vectors fail the direct residual check "
                             f"(worst {res.max():.3e})")
    return NullSpaceBasis(g, 3, basis, comp, res, f0, sn, float(gap), float(r0), k_max)


def kernel_basis(dn: DNMatrix, k_max: int = 8, m_hint: int | None = None, gap_null: float = GAP_NULL) -> NullSpaceBasis:
    """Null space of the extended ``D`` (orientable surfaces)."""
    g, A = dn.grid, dn.matrix
    B, kappa, _, _ = fourier_basis(g, k_max)
    cols = B / np.sqrt(1.0 + kappa**2)[None, :]
    R = d_ext_array(A, g, cols)
    _, s, Vt = np.linalg.svd(R, full_matrices=True)
    s = np.concatenate([s, np.zeros(B.shape[1] - len(s))])
    reading = read_codim(s, max(1e-11, 0.1 * float(dn.mesh_error or 0.0)), gap_null)
    codim = reading.codim
    if m_hint is not None and codim != m_hint:
        raise CodimMismatch(f"found codimension {codim}, expected {m_hint}")
    ker = _weighted_orthonormal(g, cols @ Vt[codim:].T)
    comp = _weighted_orthonormal(g, cols @ Vt[:codim].T)
    handle = AdmissibleMapHandle(dn, 1)
    res = np.array([handle.relative_residual(v) for v in ker.T])
    return NullSpaceBasis(g, 1, ker, comp, res, None, s, reading.gap_ratio, 0.0, k_max)


# ----------------------------------------------------------------------
# transfer


@dataclass
class TransferResult:
    f: np.ndarray
    d: np.ndarray
    d_base: np.ndarray
    residual: float


def _minimize_d(handle: AdmissibleMapHandle, f: np.ndarray, H: np.ndarray, d0=None, tol: float = 1e-13):
    if H.shape[1] == 0:
        return np.zeros(0), float(np.linalg.norm(handle.residual(f)))

    def fun(d):
        return handle.residual(f - H @ d)

    # fixed absolute step: the default one scales with |d|, which starts near zero
    s = 1e-4 * max(float(np.abs(f).max()), 1e-300)

    def jac(d):
        return np.stack([(fun(d + s * e) - fun(d - s * e)) / (2 * s) for e in np.eye(len(d))], axis=1)

    x0 = np.zeros(H.shape[1]) if d0 is None else d0
    sol = least_squares(fun, x0, jac=jac, method="lm", xtol=tol, ftol=tol, gtol=tol,
                        max_nfev=200 * (H.shape[1] + 1))
    return sol.x, float(np.linalg.norm(sol.fun))


def transfer_Y(G: AdmissibleMapHandle, G2: AdmissibleMapHandle, basis: NullSpaceBasis, f: BoundaryFunction,
               bound: float = 10.0, tol: float = 1e-13) -> BoundaryFunction:
    """Move ``f`` from the null set of ``G`` to that of ``G2`` along the complement.

    Returns ``f - sum_k (d_k - d0_k) h_k`` where ``d`` minimizes
    ``|G2(f - sum d_k h_k)|`` by damped Gauss-Newton and ``d0`` is the same
    minimizer for ``G``.  Subtracting ``d0`` removes the discretization
    residue shared by both maps, so ``G2 = G`` returns ``f`` exactly and
    the displacement is continuous in ``G2``.
    """
    return BoundaryFunction(f.grid, transfer_detail(G, G2, basis, f, bound, tol).f)


def transfer_detail(G, G2, basis, f, bound=10.0, tol=1e-13) -> TransferResult:
    G.grid.require_same(f.grid)
    G2.grid.require_same(f.grid)
    fv = _real(f)
    H = basis.complement
    if H.shape[1] == 0 or G2.dn is G.dn or np.array_equal(G2.dn.matrix, G.dn.matrix):
        z = np.zeros(H.shape[1])
        return TransferResult(fv.copy(), z, z, float(np.linalg.norm(G2.residual(fv))))
    d0, _ = _minimize_d(G, fv, H, tol=tol)
    d1, r1 = _minimize_d(G2, fv, H, d0=d0, tol=tol)
    delta = d1 - d0
    fn = np.sqrt(np.sum(G.grid.weights * fv**2))
    if np.linalg.norm(d1) > bound * max(fn, 1e-300):
        raise MinimizerEscaped(f"|d| = {np.linalg.norm(d1):.3e} exceeds {bound:g} |f|")
    return TransferResult(fv - H @ delta, delta, d0, r1)


# ----------------------------------------------------------------------
# traces


@dataclass(eq=False)
class SymmetricTraceData:
    """Real part ``f`` on the measured boundary and the assembled trace on ``Upsilon``.

    Non-orientable surfaces use the doubled grid: ``h = sigma ((J L f) o pi
    + c_f)``, so the imaginary part is odd under the deck involution.  For
    orientable surfaces ``Upsilon`` is the measured boundary and ``c`` holds
    one conjugate constant per loop.
    """

    f: BoundaryFunction
    c: np.ndarray
    h: BoundaryFunction
    orientable: bool = False

    @property
    def c_f(self) -> float:
        return float(self.c[0])

    @property
    def upsilon(self) -> BoundaryGrid:
        return self.h.grid

    @property
    def real_part(self) -> BoundaryFunction:
        g = self.h.grid
        return BoundaryFunction(g, self.f.values[g.projection])

    @property
    def eta(self) -> BoundaryFunction:
        return BoundaryFunction(self.h.grid, self.real_part.values + 1j * self.h.values)

    def symmetry_residual(self) -> float:
        g = self.h.grid
        if not g.is_doubled:
            return 0.0
        e = self.eta.values
        return float(np.abs(e[g.pairing] - np.conj(e)).max())

    def to_dict(self) -> dict:
        return {"schema": "surfeit.trace", "version": SCHEMA_VERSION, "orientable": self.orientable,
                "f": self.f.to_dict(), "c": np.asarray(self.c).tolist(), "h": self.h.to_dict()}

    @classmethod
    def from_dict(cls, d: dict) -> "SymmetricTraceData":
        if d.get("schema") != "surfeit.trace":
            raise ValueError("not a trace document")
        return cls(BoundaryFunction.from_dict(d["f"]), np.asarray(d["c"], dtype=float),
                   BoundaryFunction.from_dict(d["h"]), bool(d["orientable"]))

    def save_json(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict()))

    @classmethod
    def load_json(cls, path) -> "SymmetricTraceData":
        return cls.from_dict(json.loads(Path(path).read_text()))


def symmetric_trace(dn: DNMatrix, f: BoundaryFunction, c: float | None = None) -> SymmetricTraceData:
    """Assemble ``f o pi + i sigma ((J L f) o pi + c_f)`` on the doubled grid."""
    dn.grid.require_same(f.grid)
    fv = _real(f)
    cf = c_ratio(dn, f) if c is None else float(c)
    up = dn.grid.doubled()
    v = integrate(dn.grid, dn.matrix @ fv, check=False) + cf
    h = up.node_sigma * v[up.projection]
    return SymmetricTraceData(f, np.array([cf]), BoundaryFunction(up, h), False)


def orientable_trace(dn: DNMatrix, f: BoundaryFunction) -> SymmetricTraceData:
    fv = _real(f)
    v = integrate(dn.grid, dn.matrix @ fv, check=False)
    c = conjugate_constants(dn.matrix, dn.grid, v)
    h = v + c[dn.grid.component_index]
    return SymmetricTraceData(f, c, BoundaryFunction(dn.grid, h), True)


def orientable_trace_solve(dn: DNMatrix, f: BoundaryFunction, tol: float | None = None) -> BoundaryFunction:
    """``eta = f + i (J L f + c)`` for ``f`` in the kernel of the extended ``D``.

    On a single loop the imaginary part has zero mean; with several loops the
    per-loop constants come from :func:`conjugate_constants`.
    """
    dn.grid.require_same(f.grid)
    fv = _real(f)
    tol = default_tol_orient(dn) if tol is None else tol
    if _variation(fv) > 0:
        sw = np.sqrt(dn.grid.weights)
        r = np.abs(d_ext_array(dn.matrix, dn.grid, fv)).max() / sw.min() / cl_norm(f, 3)
        if r > tol:
            raise NotInKernel(f"relative D residual {r:.3e} exceeds {tol:.1e}")
    return orientable_trace(dn, f).eta


def transfer_trace(dn: DNMatrix, dn2: DNMatrix, basis: NullSpaceBasis, eta: SymmetricTraceData,
                   validate_tol: float | None = None) -> SymmetricTraceData:
    """Carry a trace for ``dn`` to one for ``dn2``: ``f' = Y(f)``, conjugate from ``dn2``."""
    orientable = eta.orientable
    G = AdmissibleMapHandle(dn, 1 if orientable else 3)
    G2 = AdmissibleMapHandle(dn2, G.alpha)
    if np.array_equal(dn.matrix, dn2.matrix):
        return SymmetricTraceData(eta.f, np.array(eta.c, copy=True), eta.h, orientable)
    f2 = transfer_Y(G, G2, basis, eta.f)
    if validate_tol is not None:
        r = G2.relative_residual(_real(f2))
        base = G.relative_residual(_real(eta.f))
        if r > max(validate_tol, 10 * base):
            raise NotInKernel(f"transferred trace has relative residual {r:.3e}")
    if orientable:
        return orientable_trace(dn2, f2)
    c2 = c_ratio(dn2, f2) if np.ptp(_real(f2)) > 0 else 0.0
    return symmetric_trace(dn2, f2, c2)
