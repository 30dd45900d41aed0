"""Experiment driver: reference solves, MsFEM sweeps over coarse meshes,
homogenized comparisons, condition numbers, and CSV reporting.

Cases
-----
EX1  periodic cosine boundary, f = 1, zero flux, zero Dirichlet data
EX2  periodic cosine boundary, f = 0, oscillating flux (1-cos(2 pi x1/eps))/2,
     Dirichlet data (1-x2)/2 on the remaining sides; also solves the
     homogenized problem for comparison
EX3  random boundary (uniform knots, amplitude eps/10), f = 1
EX4  random boundary (random knots, amplitude eps), discontinuous
     f = +1 (x1 < 1/2) / -1 (x1 >= 1/2)
COND EX4 setup; records the 2-norm condition number of the MsFEM system
HOMOG_RATES  EX1 data over several eps: zeroth- and first-order
     homogenization errors (stored in the *_homog and plain error columns
     respectively)
"""

from __future__ import annotations

import json
import os
import time
from dataclasses import dataclass, field, asdict
from typing import Callable

import numpy as np

from . import geometry, femcore, msfem, homogenization as hg
from .geometry import ROUGH, DIRICHLET, BoundaryProfile, TriMesh
from .femcore import Field, SparseSystem


CSV_COLUMNS = ["case", "eps", "h", "htilde", "hfine", "err_l2", "err_h1",
               "err_l2_homog", "err_h1_homog", "cond2", "cells",
               "t_ref_s", "t_cells_s", "t_solve_s"]

CASES = ("EX1", "EX2", "EX3", "EX4", "COND", "HOMOG_RATES")


class HarnessError(Exception):
    pass


@dataclass(frozen=True)
class ExperimentConfig:
    case: str
    epsilon: float = 1.0 / 64.0
    N_list: tuple = (5, 10, 20, 40)
    htilde: float | None = None        # default epsilon / 20
    hfine: float | None = None         # default epsilon / 10
    seed: int = 1234
    tol: float = 1e-10
    out: str | None = None
    cache: str | None = None
    serial: bool = False
    threshold_constant: float = 1.0
    eps_list: tuple = (1.0 / 8.0, 1.0 / 16.0, 1.0 / 32.0)  # HOMOG_RATES only
    u0_N: int = 1024                   # HOMOG_RATES homogenized mesh
    strip_hs: float = 1.0 / 256.0      # HOMOG_RATES strip mesh size

    def __post_init__(self):
        if self.case not in CASES:
            raise HarnessError(f"unknown case {self.case!r}")
        N = list(self.N_list)
        if any(b <= a for a, b in zip(N, N[1:])):
            raise HarnessError("N list must be strictly increasing")

    @property
    def htilde_value(self) -> float:
        return self.htilde if self.htilde is not None else self.epsilon / 20.0

    @property
    def hfine_value(self) -> float:
        return self.hfine if self.hfine is not None else self.epsilon / 10.0

    def to_json(self) -> str:
        d = asdict(self)
        d["N_list"] = list(self.N_list)
        d["eps_list"] = list(self.eps_list)
        return json.dumps(d, sort_keys=True)

    @staticmethod
    def from_json(text: str) -> "ExperimentConfig":
        d = json.loads(text)
        d["N_list"] = tuple(d.get("N_list", (5, 10, 20, 40)))
        d["eps_list"] = tuple(d.get("eps_list", (1 / 8, 1 / 16, 1 / 32)))
        return ExperimentConfig(**d)


@dataclass
class ConvergenceRecord:
    case: str
    eps: float
    h: float
    htilde: float
    hfine: float
    err_l2: float | None = None
    err_h1: float | None = None
    err_l2_homog: float | None = None
    err_h1_homog: float | None = None
    cond2: float | None = None
    cells: int = 0
    t_ref_s: float = 0.0
    t_cells_s: float = 0.0
    t_solve_s: float = 0.0

    def row(self, with_timings: bool = True) -> list[str]:
        out = []
        for col in CSV_COLUMNS:
            v = getattr(self, col)
            if col.startswith("t_") and not with_timings:
                out.append("")
            elif v is None:
                out.append("")
            elif col == "case":
                out.append(str(v))
            elif isinstance(v, (int, np.integer)) or col == "cells":
                out.append(str(int(v)))
            elif col.startswith("t_"):
                out.append(f"{v:.3f}")
            else:
                out.append(repr(float(v)))
        return out


def case_label(case: str) -> str:
    """Name of the underlying problem data: COND reuses EX4, rates reuse EX1."""
    case = "EX4" if case == "COND" else case
    return "EX1" if case == "HOMOG_RATES" else case


def case_setup(config: ExperimentConfig):
    """(profile, f, g, dirichlet) for the configured case."""
    eps = config.epsilon
    case = case_label(config.case)
    if case in ("EX1", "EX2"):
        profile = geometry.cosine_profile(eps)
    elif case == "EX3":
        profile = geometry.make_random_profile(M=int(round(1.0 / eps)),
                                               seed=config.seed, scale=0.1,
                                               epsilon=eps)
    elif case == "EX4":
        profile = geometry.make_random_profile(M=int(round(1.0 / eps)),
                                               seed=config.seed, scale=1.0,
                                               random_abscissae=True, epsilon=eps)
    else:
        raise HarnessError(f"no setup for case {case}")
    if case == "EX1":
        f = lambda x, y: np.ones_like(x)
        g = None
        dirichlet = 0.0
    elif case == "EX2":
        f = None
        g = lambda x1: (1.0 - np.cos(2.0 * np.pi * x1 / eps)) / 2.0
        dirichlet = lambda x, y: (1.0 - y) / 2.0
    elif case == "EX3":
        f = lambda x, y: np.ones_like(x)
        g = None
        dirichlet = 0.0
    else:  # EX4
        f = lambda x, y: np.where(x < 0.5, 1.0, -1.0)
        g = None
        dirichlet = 0.0
    return profile, f, g, dirichlet


def _reference_field(profile: BoundaryProfile, hfine: float, f, g, dirichlet,
                     tol: float, cache: str | None, label: str = "EX1") -> Field:
    """Plain P1 solution on the boundary-conforming fine mesh (cached).

    ``label`` names the problem data (source, flux, Dirichlet values) in the
    cache key; the profile digest alone only pins down the geometry, and
    different cases can share a boundary profile.
    """
    key = f"ref_{label}_{profile.digest()}_hf{hfine:.6e}_tol{tol:.1e}"
    if cache is not None:
        meshpath = os.path.join(cache, key + ".mesh")
        fieldpath = os.path.join(cache, key + ".field")
        if os.path.exists(meshpath) and os.path.exists(fieldpath):
            mesh = geometry.read_mesh(meshpath)
            return Field.read(fieldpath, mesh)
    mesh = geometry.build_reference_mesh(profile, hfine)
    system = femcore.assemble_stiffness(mesh)
    rhs = np.zeros(mesh.num_vertices)
    if f is not None:
        rhs += femcore.assemble_load(mesh, f)
    if g is not None:
        rhs += femcore.assemble_edge_flux(mesh, ROUGH, lambda x1, x2: g(x1))
    system = SparseSystem(system.matrix, rhs)
    system = femcore.dirichlet_on_tagged(system, mesh, dirichlet, DIRICHLET)
    u = femcore.solve_cg(system, tol=tol, mesh=mesh)
    if cache is not None:
        os.makedirs(cache, exist_ok=True)
        geometry.write_mesh(mesh, meshpath)
        u.write(fieldpath)
        # round-trip so cold and warm runs consume bit-identical data
        mesh = geometry.read_mesh(meshpath)
        u = Field.read(fieldpath, mesh)
    return u


def _bases_for(profile, coarse, N, spec, htilde, cache, workers):
    if cache is not None:
        dirpath = os.path.join(cache, msfem.basis_cache_key(profile, N, htilde, spec))
        cached = msfem.load_bases(dirpath)
        if cached is not None:
            return cached
    bases = msfem.build_bases(coarse, profile, spec, htilde, workers=workers)
    if cache is not None:
        # round-trip through the on-disk form so cold and warm runs consume
        # bit-identical basis data
        msfem.save_bases(dirpath, bases)
        bases = msfem.load_bases(dirpath)
    return bases


def run_experiment(config: ExperimentConfig) -> list[ConvergenceRecord]:
    """Run one convergence / condition case and optionally write its CSV."""
    if config.case == "HOMOG_RATES":
        records = run_homog_rates(config)
        if config.out:
            write_csv(config.out, config, records)
        return records
    profile, f, g, dirichlet = case_setup(config)
    eps = config.epsilon
    htilde = config.htilde_value
    hfine = config.hfine_value
    workers = 1 if config.serial else min(8, os.cpu_count() or 1)
    spec = msfem.FluxSpec(g=g, epsilon=eps,
                          threshold_constant=config.threshold_constant)
    t0 = time.perf_counter()
    try:
        uref = _reference_field(profile, hfine, f, g, dirichlet,
                                config.tol, config.cache,
                                label=case_label(config.case))
    except Exception as exc:
        raise HarnessError(f"case {config.case} stage reference: {exc}") from exc
    t_ref = time.perf_counter() - t0

    records = []
    for N in config.N_list:
        stage = "coarse mesh"
        try:
            coarse = geometry.build_coarse_mesh(profile, N)
            stage = "cell solves"
            t0 = time.perf_counter()
            bases = _bases_for(profile, coarse, N, spec, htilde,
                               config.cache, workers)
            t_cells = time.perf_counter() - t0
            stage = "assembly/solve"
            t0 = time.perf_counter()
            system = msfem.assemble_msfem(coarse, bases, f, spec, dirichlet)
            rec = ConvergenceRecord(config.case, eps, 1.0 / N, htilde, hfine,
                                    cells=len(bases), t_ref_s=t_ref)
            if config.case == "COND":
                stage = "condition number"
                rec.cond2 = femcore.condition_number_2norm(system)
                rec.t_solve_s = time.perf_counter() - t0
            else:
                u = femcore.solve_cg(system, tol=config.tol, mesh=coarse)
                rec.t_solve_s = time.perf_counter() - t0
                stage = "error evaluation"
                ev = msfem.evaluate_solution(u, bases)
                rec.err_l2, rec.err_h1 = femcore.error_norms(uref.mesh, uref, ev)
                if config.case == "EX2":
                    stage = "homogenized comparison"
                    gamma = lambda t: (np.cos(2 * np.pi * t) - 1.0) / 10.0
                    dgamma = lambda t: -2 * np.pi * np.sin(2 * np.pi * t) / 10.0
                    gunit = lambda t: (1.0 - np.cos(2.0 * np.pi * t)) / 2.0
                    _, _, flux = hg.effective_flux(dgamma, gunit)
                    u0 = hg.solve_homogenized(
                        hg.HomogenizedCase(f=f, flux=flux, dirichlet=dirichlet, N=N),
                        tol=config.tol)
                    rec.err_l2_homog, rec.err_h1_homog = femcore.error_norms(
                        uref.mesh, uref, u0.as_evaluator())
            rec.t_cells_s = t_cells
            records.append(rec)
        except HarnessError:
            raise
        except Exception as exc:
            raise HarnessError(
                f"case {config.case} stage {stage} N={N}: {exc}") from exc
    if config.out:
        write_csv(config.out, config, records)
    return records


def run_homog_rates(config: ExperimentConfig) -> list[ConvergenceRecord]:
    """Zeroth- and first-order homogenization errors over an epsilon sweep.

    Column mapping for HOMOG_RATES rows: err_l2/err_h1 hold the first-order
    approximant errors, err_l2_homog/err_h1_homog the zeroth-order
    (homogenized-only) errors.
    """
    gamma = lambda t: (np.cos(2 * np.pi * t) - 1.0) / 10.0
    dgamma = lambda t: -2 * np.pi * np.sin(2 * np.pi * t) / 10.0
    f = lambda x, y: np.ones_like(x)
    try:
        b1 = hg.solve_strip_cached(
            hg.StripProblem(gamma, dgamma, hg.B1, hs=config.strip_hs),
            config.cache, tol=config.tol)
        b2 = hg.solve_strip_cached(
            hg.StripProblem(gamma, dgamma, hg.B2, hs=config.strip_hs),
            config.cache, tol=config.tol)
        u0 = hg.solve_homogenized(
            hg.HomogenizedCase(f=f, flux=0.0, dirichlet=0.0, N=config.u0_N),
            tol=config.tol)
    except Exception as exc:
        raise HarnessError(f"case HOMOG_RATES stage setup: {exc}") from exc
    records = []
    for eps in config.eps_list:
        try:
            hfine = (config.hfine if config.hfine is not None else eps / 20.0)
            profile = geometry.cosine_profile(eps)
            t0 = time.perf_counter()
            uref = _reference_field(profile, hfine, f, None, 0.0,
                                    config.tol, config.cache)
            t_ref = time.perf_counter() - t0
            t0 = time.perf_counter()
            l2_0, h1_0 = femcore.error_norms(uref.mesh, uref, u0.as_evaluator())
            ev1 = hg.first_order_field(u0, {hg.B1: b1, hg.B2: b2}, eps)
            l2_1, h1_1 = femcore.error_norms(uref.mesh, uref, ev1)
            records.append(ConvergenceRecord(
                "HOMOG_RATES", eps, 1.0 / config.u0_N, config.strip_hs, hfine,
                err_l2=l2_1, err_h1=h1_1, err_l2_homog=l2_0, err_h1_homog=h1_0,
                t_ref_s=t_ref, t_solve_s=time.perf_counter() - t0))
        except Exception as exc:
            raise HarnessError(
                f"case HOMOG_RATES stage errors eps={eps}: {exc}") from exc
    return records


def fit_slope(records, x: str, y: str) -> tuple[float, float]:
    """Least-squares log-log slope of column y against column x.

    Returns (slope, residual norm of the fit)."""
    xs = np.array([getattr(r, x) if not isinstance(r, dict) else r[x]
                   for r in records], dtype=float)
    ys = np.array([getattr(r, y) if not isinstance(r, dict) else r[y]
                   for r in records], dtype=float)
    if len(xs) < 3:
        raise HarnessError("slope fit needs at least 3 records")
    if np.any(xs <= 0) or np.any(ys <= 0):
        raise HarnessError("slope fit requires positive values")
    coef, res = np.polynomial.polynomial.polyfit(np.log(xs), np.log(ys), 1,
                                                 full=True)
    resid = float(np.sqrt(res[0][0])) if len(res[0]) else 0.0
    return float(coef[1]), resid


def write_csv(path: str, config: ExperimentConfig,
              records: list[ConvergenceRecord]) -> None:
    """Delimited output with the full config embedded as a header comment.

    Serial runs must reproduce bit-identically, so their rows leave the
    wall-time columns blank; the in-memory records always carry timings.
    """
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, "w") as fh:
        fh.write(f"# config: {config.to_json()}\n")
        fh.write(",".join(CSV_COLUMNS) + "\n")
        for rec in records:
            fh.write(",".join(rec.row(with_timings=not config.serial)) + "\n")


def read_csv(path: str) -> tuple[ExperimentConfig | None, list[dict]]:
    """Inverse of write_csv; numeric fields parsed, blanks become None."""
    config = None
    rows = []
    with open(path) as fh:
        header = None
        for line in fh:
            line = line.rstrip("\n")
            if line.startswith("#"):
                if "config:" in line:
                    config = ExperimentConfig.from_json(
                        line.split("config:", 1)[1].strip())
                continue
            if header is None:
                header = line.split(",")
                continue
            parts = line.split(",")
            row = {}
            for k, v in zip(header, parts):
                if v == "":
                    row[k] = None
                elif k == "case":
                    row[k] = v
                elif k == "cells":
                    row[k] = int(v)
                else:
                    row[k] = float(v)
            rows.append(row)
    return config, rows
