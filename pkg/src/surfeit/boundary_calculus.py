"""Spectral calculus on periodic boundary grids.

A boundary is a finite union of closed loops, each sampled at ``N`` equispaced
arc-length nodes.  Functions on it are stored as node values; derivatives,
the inverse derivative ``J`` and Sobolev weights are applied per component in
Fourier space.  A doubled grid carries the two lifts of a boundary to an
orientable double cover together with the component sign and the node pairing
induced by the deck involution.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .errors import GridMismatch, NonZeroMean

SCHEMA_VERSION = 1
TOL_MEAN = 1e-10


@dataclass(frozen=True, eq=False)
class BoundaryGrid:
    """Equispaced arc-length sampling of one or more closed loops.

    Parameters
    ----------
    lengths, sizes
        Loop lengths and node counts, one entry per component.
    orientation
        Orientation sign of each loop relative to the boundary orientation.
        Loops are always sampled in boundary order, so this is bookkeeping.
    sigma
        Component sign on a doubled grid (``+1`` on the first half, ``-1`` on
        the second), ``None`` otherwise.
    pairing
        Node-level involution of a doubled grid.
    """

    lengths: tuple
    sizes: tuple
    orientation: tuple = ()
    sigma: tuple | None = None
    pairing: np.ndarray | None = None

    def __post_init__(self):
        lengths = tuple(float(x) for x in self.lengths)
        sizes = tuple(int(n) for n in self.sizes)
        if len(lengths) != len(sizes) or not sizes:
            raise ValueError("lengths and sizes must be non-empty and of equal length")
        for L, n in zip(lengths, sizes):
            if n < 16 or n % 2:
                raise ValueError(f"each component needs an even node count >= 16, got {n}")
            if not L > 0:
                raise ValueError(f"component length must be positive, got {L}")
        orientation = tuple(int(o) for o in self.orientation) or (1,) * len(sizes)
        object.__setattr__(self, "lengths", lengths)
        object.__setattr__(self, "sizes", sizes)
        object.__setattr__(self, "orientation", orientation)
        if self.sigma is not None:
            sigma = tuple(int(s) for s in self.sigma)
            object.__setattr__(self, "sigma", sigma)
            pairing = np.asarray(self.pairing, dtype=int)
            if pairing.shape != (self.n_nodes,):
                raise ValueError("pairing must map every node")
            if np.any(pairing[pairing] != np.arange(self.n_nodes)):
                raise ValueError("pairing is not an involution")
            if np.any(pairing == np.arange(self.n_nodes)):
                raise ValueError("pairing has fixed points")
            sig = self.node_sigma
            if np.any(sig[pairing] != -sig):
                raise ValueError("sigma must flip under the pairing")
            pairing.flags.writeable = False
            object.__setattr__(self, "pairing", pairing)

    # construction -------------------------------------------------------
    @classmethod
    def circle(cls, n: int, length: float = 2 * np.pi) -> "BoundaryGrid":
        return cls((length,), (n,))

    @classmethod
    def from_components(cls, comps: Sequence[tuple]) -> "BoundaryGrid":
        return cls(tuple(c[0] for c in comps), tuple(c[1] for c in comps))

    def doubled(self) -> "BoundaryGrid":
        """Grid of the two boundary lifts, second half traversed in reverse."""
        if self.is_doubled:
            raise ValueError("grid is already doubled")
        q = self.n_components
        n = self.n_nodes
        pairing = np.empty(2 * n, dtype=int)
        for c in range(q):
            o, m = self.offsets[c], self.sizes[c]
            i = np.arange(m)
            pairing[o + i] = n + o + (-i) % m
            pairing[n + o + i] = o + (-i) % m
        return BoundaryGrid(
            self.lengths * 2,
            self.sizes * 2,
            self.orientation + tuple(-o for o in self.orientation),
            sigma=(1,) * q + (-1,) * q,
            pairing=pairing,
        )

    def base(self) -> "BoundaryGrid":
        """The undoubled grid a doubled grid was built from."""
        if not self.is_doubled:
            return self
        q = self.n_components // 2
        return BoundaryGrid(self.lengths[:q], self.sizes[:q], self.orientation[:q])

    # geometry -----------------------------------------------------------
    @property
    def is_doubled(self) -> bool:
        return self.sigma is not None

    @property
    def n_components(self) -> int:
        return len(self.sizes)

    @cached_property
    def n_nodes(self) -> int:
        return int(sum(self.sizes))

    @cached_property
    def offsets(self) -> tuple:
        return tuple(int(x) for x in np.concatenate([[0], np.cumsum(self.sizes)[:-1]]))

    def slice(self, c: int) -> slice:
        return slice(self.offsets[c], self.offsets[c] + self.sizes[c])

    def spacing(self, c: int = 0) -> float:
        return self.lengths[c] / self.sizes[c]

    @cached_property
    def arclength(self) -> np.ndarray:
        return np.concatenate([np.arange(n) * L / n for L, n in zip(self.lengths, self.sizes)])

    @cached_property
    def weights(self) -> np.ndarray:
        return np.concatenate([np.full(n, L / n) for L, n in zip(self.lengths, self.sizes)])

    @cached_property
    def component_index(self) -> np.ndarray:
        return np.repeat(np.arange(self.n_components), self.sizes)

    @cached_property
    def node_sigma(self) -> np.ndarray:
        if self.sigma is None:
            return np.ones(self.n_nodes, dtype=int)
        return np.repeat(np.asarray(self.sigma), self.sizes)

    @cached_property
    def projection(self) -> np.ndarray:
        """Node map to the base grid (identity on undoubled grids)."""
        if not self.is_doubled:
            return np.arange(self.n_nodes)
        n = self.n_nodes // 2
        proj = np.arange(2 * n)
        proj[n:] = self.pairing[n:]
        return proj

    @property
    def total_length(self) -> float:
        return float(sum(self.lengths))

    def same_as(self, other: "BoundaryGrid") -> bool:
        if self is other:
            return True
        return (
            self.sizes == other.sizes
            and np.allclose(self.lengths, other.lengths, rtol=1e-12, atol=0)
            and self.sigma == other.sigma
        )

    def require_same(self, other: "BoundaryGrid") -> None:
        if not self.same_as(other):
            raise GridMismatch(f"grid {self.sizes}/{self.lengths} vs {other.sizes}/{other.lengths}")

    # serialization ------------------------------------------------------
    def to_dict(self) -> dict:
        d = {
            "lengths": list(self.lengths),
            "sizes": list(self.sizes),
            "orientation": list(self.orientation),
        }
        if self.is_doubled:
            d["sigma"] = list(self.sigma)
            d["pairing"] = self.pairing.tolist()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "BoundaryGrid":
        return cls(
            tuple(d["lengths"]),
            tuple(d["sizes"]),
            tuple(d.get("orientation", ())),
            sigma=tuple(d["sigma"]) if d.get("sigma") is not None else None,
            pairing=np.asarray(d["pairing"]) if d.get("pairing") is not None else None,
        )


# ----------------------------------------------------------------------
# array-level spectral kernels (values may carry trailing batch axes)


def _kappa(n: int, length: float) -> np.ndarray:
    return np.fft.fftfreq(n, d=1.0 / n) * (2 * np.pi / length)


def _apply_symbol(grid: BoundaryGrid, values: np.ndarray, symbol: Callable) -> np.ndarray:
    values = np.asarray(values)
    out = np.empty(values.shape, dtype=complex)
    for c in range(grid.n_components):
        sl = grid.slice(c)
        n = grid.sizes[c]
        mult = symbol(_kappa(n, grid.lengths[c]), n)
        mult = mult.reshape((n,) + (1,) * (values.ndim - 1))
        out[sl] = np.fft.ifft(mult * np.fft.fft(values[sl], axis=0), axis=0)
    if np.isrealobj(values):
        return out.real
    return out


def diff(grid: BoundaryGrid, values: np.ndarray, order: int = 1) -> np.ndarray:
    """Spectral arc-length derivative of node values (array level)."""
    if order == 0:
        return np.array(values, copy=True)

    def sym(k, n):
        m = (1j * k) ** order
        if order % 2:
            m[n // 2] = 0.0
        return m

    return _apply_symbol(grid, values, sym)


def component_means(grid: BoundaryGrid, values: np.ndarray) -> np.ndarray:
    values = np.asarray(values)
    return np.stack([values[grid.slice(c)].mean(axis=0) for c in range(grid.n_components)])


def remove_component_means(grid: BoundaryGrid, values: np.ndarray) -> np.ndarray:
    out = np.array(values, dtype=np.result_type(values, float), copy=True)
    for c in range(grid.n_components):
        sl = grid.slice(c)
        out[sl] = out[sl] - out[sl].mean(axis=0)
    return out


def integrate(grid: BoundaryGrid, values: np.ndarray, check: bool = True, tol: float = TOL_MEAN) -> np.ndarray:
    """Zero-mean antiderivative per component (array level)."""
    values = np.asarray(values)
    if check:
        means = np.abs(component_means(grid, values))
        scale = np.sqrt(np.mean(np.abs(values) ** 2, axis=0)) if values.size else 0.0
        if np.any(means > tol * np.maximum(scale, np.finfo(float).tiny) + 1e-300):
            raise NonZeroMean(f"component means {np.max(means):.3e} exceed tolerance")

    def sym(k, n):
        m = np.zeros(n, dtype=complex)
        nz = k != 0
        m[nz] = 1.0 / (1j * k[nz])
        m[n // 2] = 0.0
        return m

    return _apply_symbol(grid, values, sym)


def fourier_basis(grid: BoundaryGrid, k_max: int, include_constant: bool = True):
    """Real Fourier basis, orthonormal for the grid quadrature.

    Returns ``(B, kappa, comp, k)``: node values (``n_nodes x M``), physical
    wavenumber, owning component and integer mode of each basis column.
    """
    cols, kap, comp, kk = [], [], [], []
    s = grid.arclength
    for c in range(grid.n_components):
        sl = grid.slice(c)
        L, n = grid.lengths[c], grid.sizes[c]
        kc = min(int(k_max), n // 2 - 1)
        for k in range(0, kc + 1):
            kappa = 2 * np.pi * k / L
            shapes = [np.ones(n) / np.sqrt(L)] if k == 0 else [
                np.cos(kappa * s[sl]) * np.sqrt(2 / L),
                np.sin(kappa * s[sl]) * np.sqrt(2 / L),
            ]
            if k == 0 and not include_constant:
                continue
            for shp in shapes:
                col = np.zeros(grid.n_nodes)
                col[sl] = shp
                cols.append(col)
                kap.append(kappa)
                comp.append(c)
                kk.append(k)
    return np.array(cols).T, np.array(kap), np.array(comp, dtype=int), np.array(kk, dtype=int)


# ----------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class BoundaryFunction:
    """Real or complex node values on a :class:`BoundaryGrid`."""

    grid: BoundaryGrid
    values: np.ndarray

    def __post_init__(self):
        v = np.array(self.values, copy=True)
        if v.dtype.kind not in "fc":
            v = v.astype(float)
        if v.shape != (self.grid.n_nodes,):
            raise ValueError(f"expected {self.grid.n_nodes} values, got shape {v.shape}")
        v.flags.writeable = False
        object.__setattr__(self, "values", v)

    @classmethod
    def from_callable(cls, grid: BoundaryGrid, fn: Callable) -> "BoundaryFunction":
        """Sample ``fn(s, component)`` at the grid nodes."""
        return cls(grid, fn(grid.arclength, grid.component_index))

    @classmethod
    def constant(cls, grid: BoundaryGrid, c: complex = 1.0) -> "BoundaryFunction":
        return cls(grid, np.full(grid.n_nodes, c))

    @cached_property
    def coefficients(self) -> list:
        return [np.fft.fft(self.values[self.grid.slice(c)]) / self.grid.sizes[c]
                for c in range(self.grid.n_components)]

    @property
    def is_real(self) -> bool:
        return self.values.dtype.kind == "f"

    def component(self, c: int) -> np.ndarray:
        return self.values[self.grid.slice(c)]

    @property
    def real(self) -> "BoundaryFunction":
        return BoundaryFunction(self.grid, self.values.real)

    @property
    def imag(self) -> "BoundaryFunction":
        return BoundaryFunction(self.grid, np.imag(self.values))

    def conj(self) -> "BoundaryFunction":
        return BoundaryFunction(self.grid, np.conj(self.values))

    def _other(self, other):
        if isinstance(other, BoundaryFunction):
            self.grid.require_same(other.grid)
            return other.values
        return other

    def __add__(self, other):
        return BoundaryFunction(self.grid, self.values + self._other(other))

    __radd__ = __add__

    def __sub__(self, other):
        return BoundaryFunction(self.grid, self.values - self._other(other))

    def __rsub__(self, other):
        return BoundaryFunction(self.grid, self._other(other) - self.values)

    def __mul__(self, other):
        return BoundaryFunction(self.grid, self.values * self._other(other))

    __rmul__ = __mul__

    def __truediv__(self, other):
        return BoundaryFunction(self.grid, self.values / self._other(other))

    def __neg__(self):
        return BoundaryFunction(self.grid, -self.values)

    def to_dict(self) -> dict:
        d = {"schema": "surfeit.boundary_function", "version": SCHEMA_VERSION,
             "grid": self.grid.to_dict(), "real": self.values.real.tolist()}
        if not self.is_real:
            d["imag"] = self.values.imag.tolist()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "BoundaryFunction":
        v = np.asarray(d["real"], dtype=float)
        if "imag" in d:
            v = v + 1j * np.asarray(d["imag"], dtype=float)
        return cls(BoundaryGrid.from_dict(d["grid"]), v)

    def to_csv(self, path) -> None:
        write_samples_csv(path, self)


def write_samples_csv(path, f: BoundaryFunction) -> None:
    g = f.grid
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["component", "node", "s", "re", "im"])
        for c in range(g.n_components):
            sl = g.slice(c)
            for i, (s, v) in enumerate(zip(g.arclength[sl], f.values[sl])):
                w.writerow([c, i, repr(float(s)), repr(float(np.real(v))), repr(float(np.imag(v)))])


# ----------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class DNMatrix:
    """Discrete DN operator acting on node values of a boundary grid."""

    grid: BoundaryGrid
    matrix: np.ndarray
    provenance: str = "analytic"
    mesh_error: float | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        m = np.array(self.matrix, dtype=float, copy=True)
        n = self.grid.n_nodes
        if m.shape != (n, n):
            raise ValueError(f"matrix shape {m.shape} does not match grid with {n} nodes")
        m.flags.writeable = False
        object.__setattr__(self, "matrix", m)

    @property
    def tol_dn(self) -> float:
        return max(1e-10, float(self.mesh_error or 0.0))

    def __call__(self, f: BoundaryFunction) -> BoundaryFunction:
        return apply_dn(self, f)

    def _combine(self, other, sign):
        self.grid.require_same(other.grid)
        errs = [e for e in (self.mesh_error, other.mesh_error) if e is not None]
        return DNMatrix(self.grid, self.matrix + sign * other.matrix, "difference",
                        max(errs) if errs else None)

    def __sub__(self, other: "DNMatrix") -> "DNMatrix":
        return self._combine(other, -1.0)

    def __add__(self, other: "DNMatrix") -> "DNMatrix":
        return self._combine(other, 1.0)

    def __mul__(self, c: float) -> "DNMatrix":
        return DNMatrix(self.grid, c * self.matrix, self.provenance, self.mesh_error, dict(self.meta))

    __rmul__ = __mul__

    def invariant_residuals(self) -> dict:
        """Relative residuals of constant annihilation, flux balance and L2 symmetry."""
        A = self.matrix
        w = self.grid.weights
        scale = max(np.abs(A).sum(axis=1).max(), np.finfo(float).tiny)
        const = np.abs(A @ np.ones(len(w))).max() / scale
        flux = np.abs(w @ A) / np.maximum(w @ np.abs(A), np.finfo(float).tiny)
        WA = w[:, None] * A
        sym = np.linalg.norm(WA - WA.T) / max(np.linalg.norm(WA), np.finfo(float).tiny)
        return {"constants": float(const), "flux": float(flux.max()), "symmetry": float(sym)}

    def to_dict(self) -> dict:
        return {
            "schema": "surfeit.dn_matrix",
            "version": SCHEMA_VERSION,
            "grid": self.grid.to_dict(),
            "provenance": self.provenance,
            "mesh_error": self.mesh_error,
            "shape": list(self.matrix.shape),
            "data": self.matrix.ravel().tolist(),
            "meta": self.meta,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "DNMatrix":
        if d.get("schema") != "surfeit.dn_matrix":
            raise ValueError("not a DN matrix document")
        shape = tuple(d["shape"])
        return cls(BoundaryGrid.from_dict(d["grid"]), np.asarray(d["data"], dtype=float).reshape(shape),
                   d.get("provenance", "analytic"), d.get("mesh_error"), d.get("meta", {}))

    def save_json(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict()))

    @classmethod
    def load_json(cls, path) -> "DNMatrix":
        return cls.from_dict(json.loads(Path(path).read_text()))


def fourier_multiplier(grid: BoundaryGrid, symbol: Callable) -> np.ndarray:
    """Dense node matrix of a per-component Fourier multiplier ``symbol(kappa, n)``."""
    return _apply_symbol(grid, np.eye(grid.n_nodes), symbol).real


# ----------------------------------------------------------------------
# public operations


def derivative_gamma(f: BoundaryFunction, order: int = 1) -> BoundaryFunction:
    """Arc-length derivative along the boundary orientation."""
    return BoundaryFunction(f.grid, diff(f.grid, f.values, order))


def integrate_J(f: BoundaryFunction, tol: float = TOL_MEAN) -> BoundaryFunction:
    """Inverse of :func:`derivative_gamma` on zero-mean data, normalized to zero mean.

    Raises
    ------
    NonZeroMean
        If some component mean exceeds ``tol`` times the RMS of ``f``.
    """
    return BoundaryFunction(f.grid, integrate(f.grid, f.values, check=True, tol=tol))


def apply_dn(dn: DNMatrix, f: BoundaryFunction) -> BoundaryFunction:
    dn.grid.require_same(f.grid)
    return BoundaryFunction(f.grid, dn.matrix @ f.values)


def op_norm_h1_l2(A, k_max: int = 32, grid: BoundaryGrid | None = None) -> float:
    """Approximate ``||A||_{H^1 -> L^2}`` on Fourier modes ``|k| <= k_max``.

    ``A`` is a :class:`DNMatrix` (typically a difference) or a bare node
    matrix together with ``grid``.
    """
    if isinstance(A, DNMatrix):
        grid, mat = A.grid, A.matrix
    else:
        mat = np.asarray(A, dtype=float)
        if grid is None:
            raise ValueError("grid is required for a bare matrix")
    B, kappa, _, _ = fourier_basis(grid, k_max)
    sw = np.sqrt(grid.weights)[:, None]
    M = (sw * (mat @ B)) / np.sqrt(1.0 + kappa**2)[None, :]
    if not np.any(M):
        return 0.0
    return float(np.linalg.svd(M, compute_uv=False)[0])


def cl_norm(f: BoundaryFunction, l: int) -> float:
    """``max_{j <= l} sup |d^j f|`` with spectral derivatives."""
    if l < 0:
        raise ValueError("l must be non-negative")
    return float(max(np.abs(diff(f.grid, f.values, j)).max() for j in range(l + 1)))


def l2_norm(f: BoundaryFunction) -> float:
    return float(np.sqrt(np.sum(f.grid.weights * np.abs(f.values) ** 2)))


def inner(f: BoundaryFunction, g: BoundaryFunction) -> complex:
    f.grid.require_same(g.grid)
    return complex(np.sum(f.grid.weights * f.values * np.conj(g.values)))
