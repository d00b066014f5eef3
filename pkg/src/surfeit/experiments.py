"""Configuration-driven experiment runners behind the ``surf-eit`` command.

A config is a YAML mapping; unknown keys are rejected.  Example::

    family: mobius
    params: {R: 2.0}
    model: fem            # fem | analytic
    h: 0.05               # FEM edge length
    n: 256                # nodes per loop for analytic models
    k_max: 16             # FEM band limit
    sweep:
      mode: shear         # shear | conformal
      epsilons: [0.001, 0.01, 0.1]
    sampling: {stride: 2, density: 16}
    tolerances: {null_test: 5.0e-3}
    seed: 0
"""

from __future__ import annotations

import csv
import dataclasses
import json
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import yaml
from scipy import stats

from . import forward_models as fm
from .argument_principle import (
    MOBIUS_DIRECTION,
    EmbeddingSpec,
    annulus_points,
    build_cylinder_cover,
    disk_identity_spec,
    induced_embedding,
    mobius_cover_points,
    mobius_cover_spec,
    mobius_w,
    reconstruct_surface,
    spec_from_functions,
)
from .boundary_calculus import BoundaryFunction, BoundaryGrid, DNMatrix, op_norm_h1_l2
from .correspondence import (
    CSV_FIELDS,
    descend_to_base,
    default_samples,
    lower_bound_check,
    nearest_point_map,
    semi_geodesic_coords,
    stability_report,
    write_reports_csv,
)
from .errors import ConfigError, DegenerateParameters, SurfeitError, SweepFailed
from .trace_equations import (
    NullSpaceBasis,
    euler_characteristic,
    kernel_basis,
    null_space,
    orientability_probe,
    orientable_trace,
    symmetric_trace,
)

log = logging.getLogger(__name__)

DEFAULT_TOLERANCES = {
    "null_test": 5e-3,
    "tol_null": None,
    "gap_null": 1e2,
    "slope_dT": None,
    "slope_dH": 0.30,
    "lower_bound_ratio": 3.0,
    "fail_fraction": 0.2,
}
DEFAULT_PARAMS = {
    "disk": {},
    "annulus": {"rho": 0.5},
    "mobius": {"R": 2.0},
    "mobius-with-hole": {"R": 3.0, "hole_t": 0.0, "hole_theta": 0.0, "hole_radius": 0.3},
    "torus-with-hole": {"hole_radius": 1.0},
}
ORIENTABLE = {"disk": True, "annulus": True, "mobius": False, "mobius-with-hole": False, "torus-with-hole": True}
SWEEP_FAMILIES = ("disk", "annulus", "mobius")


@dataclass
class SweepSpec:
    mode: str = "shear"
    epsilons: tuple = (1e-3, 1e-1)
    profile: str = "default"


@dataclass
class ExperimentConfig:
    family: str
    params: dict = field(default_factory=dict)
    model: str = "fem"
    h: float = 0.05
    n: int = 256
    k_max: int = 16
    null_k_max: int = 4
    null_starts: int = 4
    mesh_error: bool = True
    sweep: SweepSpec = field(default_factory=SweepSpec)
    sampling: dict = field(default_factory=lambda: {"stride": 2, "density": 16})
    tolerances: dict = field(default_factory=dict)
    seed: int = 0
    out: str = "results"

    def __post_init__(self):
        self.family = fm.canonical_family(self.family)
        self.params = {**DEFAULT_PARAMS[self.family], **(self.params or {})}
        if self.model not in ("fem", "analytic"):
            raise ConfigError(f"model must be 'fem' or 'analytic', got {self.model!r}")
        if not self.h > 0:
            raise DegenerateParameters("h must be positive")
        if self.n < 16 or self.n % 2:
            raise DegenerateParameters("n must be even and at least 16")
        if isinstance(self.sweep, dict):
            unknown = set(self.sweep) - {"mode", "epsilons", "profile"}
            if unknown:
                raise ConfigError(f"unknown sweep keys {sorted(unknown)}")
            self.sweep = SweepSpec(self.sweep.get("mode", "shear"), tuple(self.sweep.get("epsilons", (1e-3, 1e-1))),
                                   self.sweep.get("profile", "default"))
        eps = np.asarray(self.sweep.epsilons, dtype=float)
        if eps.size == 0 or np.any(eps <= 0) or np.any(np.diff(eps) <= 0):
            raise ConfigError("sweep epsilons must be positive and strictly increasing")
        if self.sweep.mode not in ("shear", "conformal"):
            raise ConfigError(f"unknown sweep mode {self.sweep.mode!r}")
        if self.sweep.profile not in fm.PROFILES:
            raise ConfigError(f"unknown sweep profile {self.sweep.profile!r}")
        unknown = set(self.tolerances) - set(DEFAULT_TOLERANCES)
        if unknown:
            raise ConfigError(f"unknown tolerance keys {sorted(unknown)}")
        self.tolerances = {**DEFAULT_TOLERANCES, **self.tolerances}
        if self.tolerances["slope_dT"] is None:
            self.tolerances["slope_dT"] = 0.8 if ORIENTABLE[self.family] else 0.30
        self.sampling = {"stride": 2, "density": 16, **(self.sampling or {})}

    @property
    def orientable(self) -> bool:
        return ORIENTABLE[self.family]

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["sweep"]["epsilons"] = list(d["sweep"]["epsilons"])
        return d


def load_config(path, **overrides) -> ExperimentConfig:
    """Read a YAML config; keyword overrides replace top-level keys when not ``None``."""
    try:
        raw = yaml.safe_load(Path(path).read_text())
    except FileNotFoundError as exc:
        raise ConfigError(f"config file not found: {path}") from exc
    except yaml.YAMLError as exc:
        raise ConfigError(f"malformed config: {exc}") from exc
    if not isinstance(raw, dict) or "family" not in raw:
        raise ConfigError("config must be a mapping with a 'family' key")
    raw.update({k: v for k, v in overrides.items() if v is not None})
    names = {f.name for f in dataclasses.fields(ExperimentConfig)}
    unknown = set(raw) - names
    if unknown:
        raise ConfigError(f"unknown config keys {sorted(unknown)}")
    try:
        return ExperimentConfig(**raw)
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc


# ----------------------------------------------------------------------
# models


def analytic_dn(cfg: ExperimentConfig) -> DNMatrix:
    p, n = cfg.params, cfg.n
    if cfg.family == "disk":
        return fm.dn_disk(n)
    if cfg.family == "annulus":
        return fm.dn_annulus(p["rho"], n, "both")
    if cfg.family == "mobius":
        return fm.dn_mobius(p["R"], n)
    if cfg.family == "mobius-with-hole":
        return fm.dn_mobius_hole(p["R"], n, hole_t=p["hole_t"], hole_theta=p["hole_theta"],
                                 hole_radius=p["hole_radius"])
    raise ConfigError(f"no analytic model for {cfg.family}")


def build_model(cfg: ExperimentConfig):
    """``(mesh or None, DN map)``; FEM maps carry a Richardson mesh-error estimate."""
    if cfg.model == "analytic":
        return None, analytic_dn(cfg)
    mesh = fm.build_mesh(cfg.family, cfg.h, **cfg.params)
    dn = fm.dn_fem(mesh, cfg.k_max)
    if cfg.mesh_error:
        err = fm.mesh_error_estimate(cfg.family, cfg.h, cfg.k_max, **cfg.params)
        dn = dataclasses.replace(dn, mesh_error=err)
    return mesh, dn


def oracle_error(cfg: ExperimentConfig, dn: DNMatrix, modes: int = 8) -> float | None:
    """Relative modal error against the analytic model on the same nodes."""
    if cfg.family not in ("disk", "annulus", "mobius", "mobius-with-hole"):
        return None
    ref_cfg = dataclasses.replace(cfg, model="analytic", n=dn.grid.sizes[0])
    ref = analytic_dn(ref_cfg)
    if ref.matrix.shape != dn.matrix.shape:
        return None
    return fm.spectral_error(dn, DNMatrix(dn.grid, ref.matrix, "analytic"), modes)


def model_points(cfg: ExperimentConfig, grid: BoundaryGrid) -> np.ndarray:
    """Model coordinate ``z`` at the nodes of ``Upsilon`` for the default embedding."""
    if cfg.family == "disk":
        return np.exp(1j * grid.arclength)
    if cfg.family == "annulus":
        return annulus_points(grid, cfg.params["rho"])
    if cfg.family == "mobius":
        return mobius_cover_points(grid, cfg.params["R"])
    raise ConfigError(f"no default embedding for {cfg.family}")


def embedding_functions(cfg: ExperimentConfig) -> list:
    if cfg.family == "mobius":
        return [lambda z: mobius_w(z)[..., 0], lambda z: mobius_w(z)[..., 1]]
    return [lambda z: z]


def preferred_direction(cfg: ExperimentConfig):
    return MOBIUS_DIRECTION if cfg.family == "mobius" else None


def analytic_spec(cfg: ExperimentConfig) -> EmbeddingSpec:
    if cfg.family == "mobius":
        return mobius_cover_spec(cfg.params["R"], cfg.n)
    if cfg.family == "disk":
        return disk_identity_spec(cfg.n)
    grid = analytic_dn(cfg).grid
    return spec_from_functions(grid, model_points(cfg, grid), embedding_functions(cfg))


def trace_data(cfg: ExperimentConfig, dn: DNMatrix) -> list:
    """Traces of the default embedding built from ``dn`` and the real parts only."""
    if cfg.orientable:
        z = model_points(cfg, dn.grid)
        return [orientable_trace(dn, BoundaryFunction(dn.grid, fn(z).real)) for fn in embedding_functions(cfg)]
    up = dn.grid.doubled()
    z = model_points(cfg, up)[: dn.grid.n_nodes]
    return [symmetric_trace(dn, BoundaryFunction(dn.grid, fn(z).real)) for fn in embedding_functions(cfg)]


def dn_spec(cfg: ExperimentConfig, dn: DNMatrix) -> EmbeddingSpec:
    tds = trace_data(cfg, dn)
    return EmbeddingSpec(tuple(td.eta for td in tds), not cfg.orientable, dn.provenance)


def transfer_basis(cfg: ExperimentConfig, dn: DNMatrix) -> NullSpaceBasis:
    """Complement directions for the transfer map.

    The Möbius band has codimension zero, so its basis has no complement and
    the transfer keeps the real parts; orientable surfaces use the kernel of
    the extended ``D``.
    """
    if cfg.orientable:
        return kernel_basis(dn, 8, gap_null=cfg.tolerances["gap_null"])
    if cfg.family == "mobius":
        g = dn.grid
        return NullSpaceBasis(g, 3, np.ones((g.n_nodes, 1)) / np.sqrt(g.total_length),
                              np.zeros((g.n_nodes, 0)), np.zeros(1))
    return null_space(dn, k_max=cfg.null_k_max, starts=cfg.null_starts, seed=cfg.seed,
                      tol_null=cfg.tolerances["tol_null"], gap_null=cfg.tolerances["gap_null"])


# ----------------------------------------------------------------------
# runners


def _out(cfg: ExperimentConfig, out) -> Path:
    p = Path(out if out is not None else cfg.out)
    p.mkdir(parents=True, exist_ok=True)
    return p


def _dump(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=1, sort_keys=True, default=float) + "\n")


def run_forward(cfg: ExperimentConfig, out=None) -> dict:
    """Write the DN matrix and a self-check report."""
    out = _out(cfg, out)
    _, dn = build_model(cfg)
    dn.save_json(out / "dn.json")
    report = {"family": cfg.family, "model": cfg.model, "nodes": dn.grid.n_nodes,
              "mesh_error": dn.mesh_error, **dn.invariant_residuals()}
    if cfg.model == "fem":
        report["oracle_error"] = oracle_error(cfg, dn)
    _dump(out / "forward_report.json", report)
    return report


def run_traces(cfg: ExperimentConfig, out=None) -> dict:
    """Traces of the default embedding, plus the null-set basis for non-orientable families."""
    out = _out(cfg, out)
    _, dn = build_model(cfg)
    report = {"family": cfg.family, "orientable": cfg.orientable, "traces": []}
    if cfg.family in ("disk", "annulus", "mobius"):
        for k, td in enumerate(trace_data(cfg, dn)):
            td.save_json(out / f"trace_{k + 1}.json")
            report["traces"].append({"file": f"trace_{k + 1}.json", "c": [float(c) for c in td.c]})
    if not cfg.orientable:
        basis = null_space(dn, k_max=cfg.null_k_max, starts=cfg.null_starts, seed=cfg.seed,
                           tol_null=cfg.tolerances["tol_null"], gap_null=cfg.tolerances["gap_null"])
        basis.save_json(out / "null_space.json")
        report.update({"codim": basis.codim, "gap_ratio": basis.gap_ratio,
                       "anchor_residual": basis.anchor_residual})
    _dump(out / "traces_report.json", report)
    return report


def run_reconstruct(cfg: ExperimentConfig, out=None) -> dict:
    """Reconstruct the default embedding; analytic models also report oracle errors."""
    out = _out(cfg, out)
    if cfg.model == "analytic" and cfg.family in ("disk", "annulus", "mobius"):
        spec = analytic_spec(cfg)
    else:
        _, dn = build_model(cfg)
        spec = dn_spec(cfg, dn)
    pref = preferred_direction(cfg)
    cover = build_cylinder_cover(spec, preferred=() if pref is None else (pref,), seed=cfg.seed)
    surf = reconstruct_surface(spec, cover)
    surf.to_csv(out / "surface.csv")
    surf.save_manifest(out / "manifest.json")
    report = {"family": cfg.family, "model": cfg.model, "charts": len(surf.charts),
              "points": int(len(surf.cloud())),
              "overlap_max": max((o["max_diff"] for o in surf.overlap), default=0.0)}
    if spec.symmetric:
        report["symmetry_closure"] = surf.symmetry_closure()
    if cfg.model == "analytic" and cfg.family in ("disk", "annulus", "mobius"):
        pts = np.vstack([c.points for c in surf.charts])
        z = _model_coordinate(cfg, surf.direction, pts @ surf.direction)
        if z is not None:
            truth = np.stack([fn(z) for fn in embedding_functions(cfg)], axis=1)
            report["oracle_error"] = float(np.abs(pts - truth).max())
    _dump(out / "reconstruct_report.json", report)
    return report


def _model_coordinate(cfg: ExperimentConfig, direction: np.ndarray, zeta: np.ndarray):
    """Invert the projection to the model coordinate where it is linear."""
    if cfg.family == "mobius":
        return zeta / np.sqrt(2.0) if np.allclose(direction, MOBIUS_DIRECTION) else None
    return zeta / direction[0]


def run_topology_probe(cfg: ExperimentConfig, out=None) -> dict:
    """Orientability verdict and Euler characteristic."""
    out = _out(cfg, out)
    _, dn = build_model(cfg)
    verdict = orientability_probe(dn)
    chi = euler_characteristic(dn, verdict.orientable, k_max=None if verdict.orientable else cfg.null_k_max,
                               gap_null=cfg.tolerances["gap_null"],
                               **({} if verdict.orientable else {"starts": cfg.null_starts, "seed": cfg.seed,
                                                                 "tol_null": cfg.tolerances["tol_null"]}))
    report = {"family": cfg.family, "model": cfg.model, "orientable": verdict.orientable, "chi": chi,
              "probe": verdict.to_dict()}
    _dump(out / "topology.json", report)
    return report


# ----------------------------------------------------------------------
# sweeps


@dataclass
class SlopeFit:
    slope: float
    half_width: float
    rows: int

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def fit_loglog(x, y, x_floor: float = 0.0, y_floor: float = 0.0, level: float = 0.95) -> SlopeFit:
    """Least-squares slope of ``log y`` against ``log x`` over rows above both floors."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    keep = np.isfinite(x) & np.isfinite(y) & (x > max(x_floor, 0)) & (y > max(y_floor, 0))
    if keep.sum() < 2:
        return SlopeFit(float("nan"), float("nan"), int(keep.sum()))
    res = stats.linregress(np.log(x[keep]), np.log(y[keep]))
    hw = float("inf")
    if keep.sum() > 2:
        hw = float(stats.t.ppf(0.5 + level / 2, keep.sum() - 2) * res.stderr)
    return SlopeFit(float(res.slope), hw, int(keep.sum()))


@dataclass
class SweepResult:
    reports: list
    fits: dict
    verdicts: dict
    null_level: dict

    def to_dict(self) -> dict:
        return {"schema": "surfeit.sweep", "reports": [r.to_json() for r in self.reports],
                "fits": {k: v.to_dict() for k, v in self.fits.items()}, "verdicts": self.verdicts,
                "null_level": self.null_level}


class _Context:
    """Everything shared by the rows of one sweep."""

    def __init__(self, cfg: ExperimentConfig):
        if cfg.family not in SWEEP_FAMILIES:
            raise ConfigError(f"sweeps support {SWEEP_FAMILIES}, not {cfg.family}")
        if cfg.model != "fem":
            raise ConfigError("sweeps perturb a mesh metric and need model: fem")
        self.cfg = cfg
        self.mesh, self.dn = build_model(cfg)
        self.spec = dn_spec(cfg, self.dn)
        self.basis = transfer_basis(cfg, self.dn)
        pref = preferred_direction(cfg)
        cover = build_cylinder_cover(self.spec, preferred=() if pref is None else (pref,), seed=cfg.seed)
        self.src = reconstruct_surface(self.spec, cover)
        self.chart = semi_geodesic_coords(self.src)
        self.samples = default_samples(self.chart, cfg.sampling["stride"], cfg.sampling["density"])

    def pipeline(self, dn2: DNMatrix, eps: float, true_log_k: float):
        cfg = self.cfg
        t = op_norm_h1_l2(dn2 - self.dn)
        ie = induced_embedding(self.dn, dn2, self.spec, self.basis)
        tgt = reconstruct_surface(ie.spec, build_cylinder_cover(ie.spec, self.src.direction))
        ct = semi_geodesic_coords(tgt, self.chart.r0)
        if ct.r0 < self.chart.r0:
            cmap = nearest_point_map(self.src, tgt, ct.r0, cfg.sampling["stride"], cfg.sampling["density"])
            charts, samples = None, None
        else:
            charts, samples = (self.chart, ct), self.samples
            cmap = nearest_point_map(self.src, tgt, charts=charts, samples=samples)
        lb = lower_bound_check(self.dn, dn2, true_log_k) if true_log_k > 0 else None
        stages = {"trace_shift": ie.trace_shift, "boundary_residual": cmap.boundary_residual, "r0": cmap.r0,
                  **cmap.meta}
        if self.spec.symmetric:
            kw = {} if charts is None else {"charts": charts, "samples": samples}
            base = descend_to_base(self.src, tgt, cmap, **kw)
            stages.update({"equivariance_residual": base.equivariance_residual, "base_sup_logK": base.sup_log_k})
        return stability_report(eps, t, self.src, tgt, cmap, true_log_k,
                                lower_bound_c=float("nan") if lb is None else lb.constant,
                                tol_null_test=cfg.tolerances["null_test"], stages=stages)

    def row(self, eps: float):
        m2 = fm.perturb_metric(self.mesh, fm.PerturbationSpec(eps, self.cfg.sweep.mode, self.cfg.sweep.profile))
        # same mesh topology, so the base discretization error carries over
        dn2 = dataclasses.replace(fm.dn_fem(m2, self.cfg.k_max), mesh_error=self.dn.mesh_error)
        return self.pipeline(dn2, eps, m2.true_log_k)

    def null_level(self) -> dict:
        """Identity pipeline plus the conformal operator distance at the largest epsilon."""
        rep = self.pipeline(self.dn, 0.0, 0.0)
        eps = float(self.cfg.sweep.epsilons[-1])
        dn_c = fm.dn_fem(fm.perturb_metric(self.mesh, fm.PerturbationSpec(eps, "conformal", self.cfg.sweep.profile)), self.cfg.k_max)
        return {"sup_logK": rep.sup_logK, "d_H": rep.d_H, "dT_estimate": rep.dT_estimate,
                "t_conformal": op_norm_h1_l2(dn_c - self.dn)}


_CTX: _Context | None = None


def _init_worker(cfg_dict: dict) -> None:
    global _CTX
    _CTX = _Context(_config_from_dict(cfg_dict))


def _worker_row(eps: float):
    return _safe_row(_CTX, eps)


def _safe_row(ctx: _Context, eps: float):
    try:
        return ctx.row(eps)
    except SurfeitError as exc:
        log.warning("row eps=%g failed: %s", eps, exc)
        from .correspondence import StabilityReport

        nan = float("nan")
        return StabilityReport(eps, nan, nan, nan, nan, status=type(exc).__name__)


def _config_from_dict(d: dict) -> ExperimentConfig:
    d = dict(d)
    d["sweep"] = dict(d["sweep"])
    return ExperimentConfig(**d)


def run_stability_sweep(cfg: ExperimentConfig, out=None, jobs: int = 1) -> SweepResult:
    """Full perturb-to-dilatation pipeline per epsilon, slope fits, CSV and plot data."""
    out = _out(cfg, out)
    ctx = _Context(cfg)
    null = ctx.null_level()
    eps_list = [float(e) for e in cfg.sweep.epsilons]
    if jobs > 1:
        with ProcessPoolExecutor(jobs, initializer=_init_worker, initargs=(cfg.to_dict(),)) as pool:
            reports = list(pool.map(_worker_row, eps_list))
    else:
        reports = [_safe_row(ctx, e) for e in eps_list]
    ok = [r for r in reports if r.status == "ok"]
    t = np.array([r.t for r in ok])
    t_floor = 10 * null["t_conformal"]
    fits = {"dT_vs_t": fit_loglog(t, [r.dT_estimate for r in ok], t_floor, 10 * null["dT_estimate"]),
            "dH_vs_t": fit_loglog(t, [r.d_H for r in ok], t_floor, 10 * null["d_H"])}
    tol = cfg.tolerances
    verdicts = {"null_test": null["sup_logK"] <= tol["null_test"]}
    if cfg.sweep.mode == "shear":
        cs = np.array([r.lower_bound_c for r in ok if np.isfinite(r.lower_bound_c)])
        verdicts.update({
            "slope_dT": bool(fits["dT_vs_t"].slope >= tol["slope_dT"]),
            "slope_dH": bool(fits["dH_vs_t"].slope >= tol["slope_dH"]),
            "lower_bound_stable": bool(cs.size > 0 and cs.max() / cs.min() <= tol["lower_bound_ratio"]),
        })
    else:
        verdicts["conformal_flat"] = bool(all(r.dT_estimate <= tol["null_test"] for r in ok))
    result = SweepResult(reports, fits, verdicts, null)
    write_reports_csv(out / "sweep.csv", reports)
    _dump(out / "sweep.json", result.to_dict())
    write_plot_data(out, reports)
    failed = len(reports) - len(ok)
    if failed > tol["fail_fraction"] * len(reports):
        raise SweepFailed(f"{failed} of {len(reports)} sweep rows failed")
    return result


def write_plot_data(out: Path, reports: list) -> None:
    """Whitespace-separated data plus a gnuplot script for the log-log plots."""
    with open(out / "sweep.dat", "w", newline="") as fh:
        w = csv.writer(fh, delimiter=" ")
        fh.write("# " + " ".join(CSV_FIELDS[:7]) + "\n")
        for r in reports:
            row = r.row()
            w.writerow([repr(float(row[k])) for k in CSV_FIELDS[:7]])
    (out / "sweep.gp").write_text(
        "set logscale xy\n"
        "set xlabel 'd_op'\n"
        "set key left top\n"
        "plot 'sweep.dat' using 2:5 with linespoints title 'd_T estimate', \\\n"
        "     'sweep.dat' using 2:3 with linespoints title 'd_H'\n"
    )
