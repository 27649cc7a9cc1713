"""Batch command-line driver.

Subcommands: groundstate, evolve, coupled, lodinfo.  Every flag maps to a
config key; --config loads a JSON file first and explicit flags override it.
Exit codes: 0 success, 2 non-convergence, 3 fixed-point divergence,
4 configuration error.
"""

import argparse
import json
import sys

from . import bench
from .bench import (
    ConfigError,
    DYNAMICS_COLUMNS,
    GROUNDSTATE_COLUMNS,
    ExperimentConfig,
)

__all__ = ["main", "build_parser"]

EXIT_OK = 0
EXIT_NONCONVERGENCE = 2
EXIT_FP_DIVERGENCE = 3
EXIT_CONFIG = 4


def build_parser():
    parser = argparse.ArgumentParser(
        prog="beclod",
        description="Two-level multiscale solver suite for Bose-Einstein "
        "condensates: ground states and time evolution in localized "
        "orthogonal decomposition spaces.",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name, desc in (
        ("groundstate", "minimize the energy over a sweep of spaces"),
        ("evolve", "integrate the time-dependent equation"),
        ("coupled", "ground state in one trap, then evolution in another"),
        ("lodinfo", "print space dimensions, tensor size, memory estimates"),
    ):
        p = sub.add_parser(name, help=desc)
        p.add_argument("--config", help="JSON config file (flags override)")
        p.add_argument("--domain",
                       help="box as lo,hi per axis, e.g. -6,6,-6,6")
        p.add_argument("--H", type=float, help="coarse mesh size")
        p.add_argument("--factor", type=int, help="fine refinement factor")
        p.add_argument("--ell", type=int, help="localization radius")
        p.add_argument("--form", choices=("canonical", "potential"),
                       help="bilinear form of the space")
        p.add_argument("--beta", type=float, help="interaction strength")
        p.add_argument("--potential", help="trapping potential name")
        p.add_argument("--kinetic-factor", type=float,
                       help="coefficient of the Laplacian")
        p.add_argument("--q", type=int, help="time-integration order")
        p.add_argument("--tau", type=float, help="time-step size")
        p.add_argument("--T", type=float, help="final time")
        p.add_argument("--tol", type=float,
                       help="energy tolerance of the ground-state solve")
        p.add_argument("--fp-tol", type=float,
                       help="stage fixed-point tolerance")
        p.add_argument("--fp-max", type=int,
                       help="stage fixed-point iteration cap")
        p.add_argument("--max-iters", type=int,
                       help="ground-state iteration cap")
        p.add_argument("--initial", help="initial data (soliton | gaussian)")
        p.add_argument("--gs-potential",
                       help="rough potential of the coupled ground state")
        p.add_argument("--threads", type=int,
                       help="worker threads for corrector solves")
        p.add_argument("--cache-dir", help="basis/tensor cache directory")
        p.add_argument("--out", help="output CSV path")
        p.add_argument("--text", action="store_true",
                       help="also write an aligned text table")
        p.add_argument("--manifest", action="store_true",
                       help="also write a JSON run manifest")
    return parser


def _parse_domain(text):
    vals = [float(v) for v in text.split(",")]
    if len(vals) % 2 or not 2 <= len(vals) <= 6:
        raise ConfigError(f"domain {text!r} must list lo,hi per axis")
    return {"lower": vals[0::2], "upper": vals[1::2]}


def _config_from_args(args):
    base = {}
    if args.config:
        try:
            with open(args.config) as fh:
                base = json.load(fh)
        except (OSError, json.JSONDecodeError) as err:
            raise ConfigError(f"cannot read config {args.config}: {err}")
    base["kind"] = "evolve" if args.command == "lodinfo" else args.command
    if args.domain:
        base["domain"] = _parse_domain(args.domain)
    for key in ("beta", "potential", "form", "threads", "cache_dir", "out",
                "gs_potential"):
        val = getattr(args, key)
        if val is not None:
            base[key] = val
    if args.kinetic_factor is not None:
        base["kinetic_factor"] = args.kinetic_factor

    rows = base.get("rows") or [{}]
    overrides = {k: getattr(args, k) for k in ("H", "factor", "ell")
                 if getattr(args, k) is not None}
    if overrides:
        rows = [dict(r, **overrides) for r in rows]
    base["rows"] = rows

    gs = dict(base.get("groundstate") or {})
    if args.tol is not None:
        gs["tol_energy"] = args.tol
    if args.max_iters is not None:
        gs["max_iters"] = args.max_iters
    if gs:
        base["groundstate"] = gs

    dyn = dict(base.get("dynamics") or {})
    if args.q is not None:
        dyn["qs"] = [args.q]
    if args.tau is not None:
        dyn["taus"] = [args.tau]
    if args.T is not None:
        dyn["T"] = args.T
    if args.fp_tol is not None:
        dyn["fp_tol"] = args.fp_tol
    if args.fp_max is not None:
        dyn["fp_max"] = args.fp_max
    if args.initial is not None:
        dyn["initial"] = args.initial
    if dyn:
        base["dynamics"] = dyn

    if args.command == "lodinfo":
        base["dynamics"] = dict(base.get("dynamics") or {}, taus=[], qs=[1])
    return ExperimentConfig.from_dict(base)


def _emit(rows, columns, cfg, args):
    text = bench.emit_report(rows, columns, out_csv=cfg.out, cfg=cfg,
                             text=args.text, manifest=args.manifest)
    if cfg.out:
        print(f"wrote {cfg.out}")
    else:
        sys.stdout.write(text)


def _error_tags(rows, key):
    return [str(r.get(key)) for r in rows
            if isinstance(r.get(key), str) and r[key].startswith("ERROR:")]


def _cmd_groundstate(cfg, args):
    rows = bench.run_groundstate_experiment(cfg)
    _emit(rows, GROUNDSTATE_COLUMNS, cfg, args)
    return EXIT_NONCONVERGENCE if _error_tags(rows, "E_lod") else EXIT_OK


def _cmd_evolve(cfg, args):
    if not cfg.taus:
        raise ConfigError("evolve needs at least one tau")
    rows = bench.run_dynamics_experiment(cfg)
    _emit(rows, DYNAMICS_COLUMNS, cfg, args)
    tags = _error_tags(rows, "rel_l2")
    if any("FixedPointDivergence" in t for t in tags):
        return EXIT_FP_DIVERGENCE
    return EXIT_NONCONVERGENCE if tags else EXIT_OK


def _cmd_coupled(cfg, args):
    if not cfg.taus:
        raise ConfigError("coupled needs at least one tau")
    rows, extras = bench.run_coupled_experiment(cfg)
    state = extras["groundstate"]
    print(f"ground state: E_lod={state.energy!r} "
          f"lambda={state.eigenvalue!r} iters={state.iteration}")
    if not state.converged:
        _emit(rows, DYNAMICS_COLUMNS, cfg, args)
        return EXIT_NONCONVERGENCE
    _emit(rows, DYNAMICS_COLUMNS, cfg, args)
    if cfg.out and extras["trajectory"] is not None:
        from pathlib import Path

        base = Path(cfg.out)
        trace = base.with_name(base.stem + "_trace.csv")
        bench.write_trace_csv(trace, extras["trajectory"])
        dens = base.with_name(base.stem + "_density.csv")
        bench.write_density_csv(dens, extras["space"],
                                extras["trajectory"].final)
        print(f"wrote {trace}")
        print(f"wrote {dens}")
    tags = _error_tags(rows, "rel_l2")
    if any("FixedPointDivergence" in t for t in tags):
        return EXIT_FP_DIVERGENCE
    return EXIT_OK


def _cmd_lodinfo(cfg, args):
    row = cfg.rows[0]
    space, t_basis, t_omega = bench.build_space_for_row(cfg, row)
    phi = space.Phi
    omega = space.omega
    n_fine = space.pair.fine.n_interior
    mb = 1.0 / 2**20
    phi_mb = (phi.data.nbytes + phi.indices.nbytes + phi.indptr.nbytes) * mb
    om_mb = (omega.V.nbytes + omega.J.nbytes + omega.K.nbytes
             + omega.Iptr.nbytes) * mb
    lines = [
        ("space dimension", space.n),
        ("fine dofs", n_fine),
        ("H", row["H"]),
        ("refinement factor", row["factor"]),
        ("ell", row["ell"]),
        ("form", cfg.form),
        ("basis nnz", phi.nnz),
        ("tensor triples", omega.triple_count),
        ("basis memory [MB]", round(phi_mb, 3)),
        ("tensor memory [MB]", round(om_mb, 3)),
        ("offline basis time [s]", round(t_basis, 3)),
        ("tensor assembly time [s]", round(t_omega, 3)),
    ]
    width = max(len(k) for k, _ in lines)
    for key, val in lines:
        print(f"{key.ljust(width)}  {val}")
    return EXIT_OK


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        cfg = _config_from_args(args)
        if args.command == "groundstate":
            return _cmd_groundstate(cfg, args)
        if args.command == "evolve":
            return _cmd_evolve(cfg, args)
        if args.command == "coupled":
            return _cmd_coupled(cfg, args)
        return _cmd_lodinfo(cfg, args)
    except ConfigError as err:
        print(f"config error: {err}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
