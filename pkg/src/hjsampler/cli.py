"""Command line entry point: ``hjsampler run|builtin|compare``."""

from __future__ import annotations

import argparse
import json
import logging
import sys

from .experiments import (BUILTINS, ConfigError, SchemaError, builtin_experiment, compare,
                          dump_config, run, run_config)


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="hjsampler", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", help="run an experiment config (TOML)")
    r.add_argument("config")
    r.add_argument("-o", "--output", help="output directory (default: $HJSAMPLER_OUTPUT_ROOT/<name>)")

    b = sub.add_parser("builtin", help="run or print a built-in benchmark config")
    b.add_argument("name", choices=BUILTINS)
    b.add_argument("--emit-config", action="store_true", help="print the TOML config and exit")
    b.add_argument("--paper-scale", action="store_true", help="full sample counts and epochs")
    b.add_argument("--backend", choices=("analytic", "riccati", "sgm"))
    b.add_argument("--epsilon", type=float)
    b.add_argument("--case", choices=("a", "b"), default="a",
                   help="variant of ode_misspec_nonlinear")
    b.add_argument("-o", "--output")

    c = sub.add_parser("compare", help="check a metrics.json against a baseline")
    c.add_argument("baseline")
    c.add_argument("candidate")
    c.add_argument("--tol", help="'rel=R,abs=A' or a TOML tolerance file")
    return p


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "run":
            manifest = run(args.config, args.output)
        elif args.command == "builtin":
            cfg = builtin_experiment(args.name, paper_scale=args.paper_scale, backend=args.backend,
                                     epsilon=args.epsilon, case=args.case)
            if args.emit_config:
                sys.stdout.write(dump_config(cfg))
                return 0
            manifest = run_config(cfg, args.output)
        else:
            ok, lines = compare(args.baseline, args.candidate, args.tol)
            print("\n".join(lines))
            print("compare: " + ("PASS" if ok else "FAIL"))
            return 0 if ok else 1
    except (ConfigError, SchemaError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    print(f"wrote {len(manifest.files)} files to {manifest.output_dir}")
    print(json.dumps(manifest.timings, indent=2))
    return 0


if __name__ == "__main__":
    sys.exit(main())
