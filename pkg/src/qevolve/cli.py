"""Command-line entry point ``evolve``.

Exit codes: 0 success, 2 validation failure (bad input or failed check),
3 convergence failure.  ``QEVOLVE_LOG`` sets the log level.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys

from .exceptions import ConfigError, ConvergenceError, MeshError, ModelError, StationarityError
from .fracture import analytic_1d_oracle, build_mesh
from .io import check_trajectory, configure_logging, load_config, run_experiment

EXIT_OK, EXIT_INVALID, EXIT_CONVERGENCE = 0, 2, 3


def _cmd_run(args) -> int:
    cfg = load_config(args.config)
    manifest = run_experiment(cfg, args.out)
    print(json.dumps(manifest, indent=1, sort_keys=True))
    return EXIT_OK


def _cmd_oracle(args) -> int:
    o = analytic_1d_oracle(args.t, args.ell, args.R, args.kappa)
    print(json.dumps(o._asdict()))
    return EXIT_OK


def _cmd_refine(args) -> int:
    from .diagnostics import refinement_study

    rows = refinement_study(load_config(args.config), args.levels, mode=args.mode)
    keys = list(dict.fromkeys(k for r in rows for k in r))
    w = csv.DictWriter(sys.stdout, fieldnames=keys, lineterminator="\n")
    w.writeheader()
    w.writerows(rows)
    return EXIT_OK


def _cmd_check(args) -> int:
    result = check_trajectory(args.trajectory)
    print(json.dumps(result, indent=1))
    return EXIT_OK if result["passed"] else EXIT_INVALID


def _cmd_mesh(args) -> int:
    print(build_mesh(args.dim, args.ell, args.N).to_json())
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="evolve",
                                description="Quasistatic cohesive-fracture evolutions.")
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", help="run a configuration and write artifacts")
    r.add_argument("config")
    r.add_argument("--out", default=None, help="output directory")
    r.set_defaults(func=_cmd_run)

    o = sub.add_parser("oracle1d", help="analytic 1D evolution at one time")
    o.add_argument("--t", type=float, required=True)
    o.add_argument("--R", type=float, required=True)
    o.add_argument("--ell", type=float, default=0.5)
    o.add_argument("--kappa", type=float, default=1.0)
    o.set_defaults(func=_cmd_oracle)

    f = sub.add_parser("refine", help="h/delta refinement study")
    f.add_argument("config")
    f.add_argument("--levels", type=int, required=True)
    f.add_argument("--mode", choices=("both", "h", "delta"), default="both")
    f.set_defaults(func=_cmd_refine)

    c = sub.add_parser("check", help="re-verify a saved trajectory")
    c.add_argument("trajectory")
    c.set_defaults(func=_cmd_check)

    m = sub.add_parser("mesh", help="dump a mesh as JSON")
    m.add_argument("--dim", type=int, choices=(1, 2), required=True)
    m.add_argument("--ell", type=float, default=0.5)
    m.add_argument("--N", type=int, required=True)
    m.set_defaults(func=_cmd_mesh)
    return p


def main(argv=None) -> int:
    configure_logging()
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConvergenceError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONVERGENCE
    except (ConfigError, MeshError, ModelError, StationarityError, ValueError,
            OSError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
