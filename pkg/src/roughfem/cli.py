"""Command-line entry points for meshing, solving, and the experiment suite."""

from __future__ import annotations

import argparse
import json
import sys

import numpy as np

from . import geometry, femcore, msfem, homogenization as hg, harness
from .geometry import ROUGH, DIRICHLET


def _profile_from_args(args) -> geometry.BoundaryProfile:
    if args.profile == "cosine":
        return geometry.cosine_profile(args.eps)
    if args.profile == "flat":
        return geometry.flat_profile(args.eps)
    if args.profile == "random":
        return geometry.make_random_profile(M=int(round(1.0 / args.eps)),
                                            seed=args.seed, scale=args.scale,
                                            random_abscissae=args.random_abscissae,
                                            epsilon=args.eps)
    raise SystemExit(f"unknown profile {args.profile!r}")


def _add_common(p):
    p.add_argument("--eps", type=float, default=1 / 64)
    p.add_argument("--seed", type=int, default=1234)
    p.add_argument("--tol", type=float, default=1e-10)
    p.add_argument("--out", type=str, default=None)
    p.add_argument("--cache", type=str, default=None)
    p.add_argument("--profile", choices=("cosine", "flat", "random"),
                   default="cosine")
    p.add_argument("--scale", type=float, default=0.1)
    p.add_argument("--random-abscissae", action="store_true")


def _experiment_config(args) -> harness.ExperimentConfig:
    if args.config:
        with open(args.config) as fh:
            cfg = harness.ExperimentConfig.from_json(fh.read())
        return cfg
    kwargs = dict(case=args.case, epsilon=args.eps, seed=args.seed,
                  tol=args.tol, out=args.out, cache=args.cache,
                  serial=args.serial)
    if args.N:
        kwargs["N_list"] = tuple(args.N)
    if args.htilde is not None:
        kwargs["htilde"] = args.htilde
    if args.hfine is not None:
        kwargs["hfine"] = args.hfine
    return harness.ExperimentConfig(**kwargs)


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="roughfem",
        description="P1/MsFEM solvers and experiments for Laplace problems "
                    "on rough boundaries")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("mesh", help="build and write a mesh")
    _add_common(p)
    p.add_argument("--N", type=int, default=10)
    p.add_argument("--kind", choices=("coarse", "reference"), default="coarse")
    p.add_argument("--hfine", type=float, default=None)

    p = sub.add_parser("solve-ref", help="plain P1 reference solve")
    _add_common(p)
    p.add_argument("--hfine", type=float, default=None)
    p.add_argument("--case", choices=("EX1", "EX2", "EX3", "EX4"), default="EX1")

    p = sub.add_parser("solve-msfem", help="multiscale solve on a coarse mesh")
    _add_common(p)
    p.add_argument("--N", type=int, default=10)
    p.add_argument("--htilde", type=float, default=None)
    p.add_argument("--case", choices=("EX1", "EX2", "EX3", "EX4"), default="EX1")
    p.add_argument("--serial", action="store_true")

    p = sub.add_parser("solve-homog", help="homogenized solve on the flat square")
    _add_common(p)
    p.add_argument("--N", type=int, default=64)

    p = sub.add_parser("strip", help="solve a boundary-layer strip problem")
    _add_common(p)
    p.add_argument("--data", choices=(hg.B0, hg.B1, hg.B2, hg.B0_TILDE),
                   default=hg.B1)
    p.add_argument("--L", type=float, default=5.0)
    p.add_argument("--hs", type=float, default=1 / 64)

    for name in ("convergence", "condition", "homog-rates"):
        p = sub.add_parser(name, help=f"run the {name} experiment")
        _add_common(p)
        p.add_argument("--case", default={"convergence": "EX1",
                                          "condition": "COND",
                                          "homog-rates": "HOMOG_RATES"}[name])
        p.add_argument("--N", type=int, nargs="*", default=None)
        p.add_argument("--htilde", type=float, default=None)
        p.add_argument("--hfine", type=float, default=None)
        p.add_argument("--serial", action="store_true")
        p.add_argument("--config", type=str, default=None,
                       help="JSON file overriding all other flags")

    args = parser.parse_args(argv)

    if args.command == "mesh":
        profile = _profile_from_args(args)
        if args.kind == "coarse":
            mesh = geometry.build_coarse_mesh(profile, args.N)
        else:
            hfine = args.hfine if args.hfine is not None else args.eps / 10
            mesh = geometry.build_reference_mesh(profile, hfine)
        out = args.out or "mesh.txt"
        geometry.write_mesh(mesh, out)
        print(f"wrote {out}: {mesh.num_vertices} vertices, "
              f"{mesh.num_triangles} triangles, min angle "
              f"{mesh.min_angle():.2f} deg")
        return 0

    if args.command == "solve-ref":
        cfg = harness.ExperimentConfig(case=args.case, epsilon=args.eps,
                                       seed=args.seed, tol=args.tol,
                                       hfine=args.hfine, cache=args.cache)
        profile, f, g, dirichlet = harness.case_setup(cfg)
        u = harness._reference_field(profile, cfg.hfine_value, f, g, dirichlet,
                                     cfg.tol, cfg.cache,
                                     label=harness.case_label(cfg.case))
        out = args.out or "reference.field"
        u.write(out)
        print(f"wrote {out}: {len(u.values)} dofs, "
              f"range [{u.values.min():.6g}, {u.values.max():.6g}]")
        return 0

    if args.command == "solve-msfem":
        cfg = harness.ExperimentConfig(case=args.case, epsilon=args.eps,
                                       seed=args.seed, tol=args.tol,
                                       htilde=args.htilde, cache=args.cache,
                                       serial=args.serial)
        profile, f, g, dirichlet = harness.case_setup(cfg)
        spec = msfem.FluxSpec(g=g, epsilon=cfg.epsilon)
        coarse = geometry.build_coarse_mesh(profile, args.N)
        import os
        workers = 1 if args.serial else min(8, os.cpu_count() or 1)
        bases = msfem.build_bases(coarse, profile, spec, cfg.htilde_value,
                                  workers=workers)
        system = msfem.assemble_msfem(coarse, bases, f, spec, dirichlet)
        u = femcore.solve_cg(system, tol=cfg.tol, mesh=coarse)
        out = args.out or "msfem.field"
        u.write(out)
        print(f"wrote {out}: N={args.N}, {len(bases)} cell problems, "
              f"range [{u.values.min():.6g}, {u.values.max():.6g}]")
        return 0

    if args.command == "solve-homog":
        gamma = lambda t: (np.cos(2 * np.pi * t) - 1.0) / 10.0
        dgamma = lambda t: -2 * np.pi * np.sin(2 * np.pi * t) / 10.0
        r, gbar, flux = hg.effective_flux(dgamma, None)
        case = hg.HomogenizedCase(f=lambda x, y: np.ones_like(x), flux=flux,
                                  dirichlet=0.0, N=args.N)
        u = hg.solve_homogenized(case, tol=args.tol)
        out = args.out or "homog.field"
        u.write(out)
        print(f"wrote {out}: N={args.N}, r={r:.6f}")
        return 0

    if args.command == "strip":
        gamma = lambda t: (np.cos(2 * np.pi * t) - 1.0) / 10.0
        dgamma = lambda t: -2 * np.pi * np.sin(2 * np.pi * t) / 10.0
        g = (lambda t: (1.0 - np.cos(2.0 * np.pi * t)) / 2.0) \
            if args.data in (hg.B0, hg.B0_TILDE) else None
        problem = hg.StripProblem(gamma, dgamma, args.data, L=args.L,
                                  hs=args.hs, g=g)
        beta = hg.solve_strip_cached(problem, args.cache, tol=args.tol)
        out = args.out or f"strip_{args.data.lower()}.field"
        beta.write(out)
        print(f"wrote {out}: {len(beta.values)} dofs, "
              f"max |beta| = {np.abs(beta.values).max():.6g}")
        return 0

    if args.command in ("convergence", "condition", "homog-rates"):
        cfg = _experiment_config(args)
        records = harness.run_experiment(cfg)
        for rec in records:
            print(",".join(rec.row()))
        if cfg.out:
            print(f"wrote {cfg.out}")
        return 0

    parser.error(f"unhandled command {args.command}")
    return 2


if __name__ == "__main__":
    sys.exit(main())
