"""``evground`` command line: gradient fields, training runs, calibration reports.

Exit codes: 0 success, 2 invalid configuration or input, 3 runtime failure.
"""
from __future__ import annotations

import argparse
import csv
import json
import math
import os
import sys
from importlib import resources

import numpy as np

from . import calibration as cal
from . import experiments as ex
from . import svg
from .losses import Regularizer, gradient_field

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 2, 3

REG_ALIASES = {"vanilla": "vanilla", "type1": "geom1", "type2": "geom2",
               "geom1": "geom1", "geom2": "geom2", "none": "none"}


class InputError(ValueError):
    pass


def default_config(kind: str) -> dict:
    text = resources.files("evidential_grounding").joinpath("configs", f"{kind}.json").read_text()
    return json.loads(text)


def load_config(kind: str, path: str | None, seed: int | None, reg: str | None):
    if path is None:
        mapping = default_config(kind)
    else:
        try:
            with open(path) as fh:
                mapping = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ex.ConfigError([f"{path}: not valid JSON ({exc.msg}, line {exc.lineno})"])
        if not isinstance(mapping, dict):
            raise ex.ConfigError([f"{path}: top level must be an object"])
    overrides = {}
    if seed is not None:
        overrides["seed"] = seed
    if reg is not None:
        overrides["reg"] = REG_ALIASES[reg]
    return ex.config_from_mapping(kind, mapping, overrides)


def read_pairs(path: str) -> tuple[np.ndarray, np.ndarray]:
    """Read ``delta,uncertainty`` rows; ``#`` lines are comments, a header row is optional."""
    delta, unc = [], []
    with open(path, newline="") as fh:
        for lineno, row in enumerate(csv.reader(fh), start=1):
            if not row or row[0].lstrip().startswith("#"):
                continue
            if not delta and row[0].strip().lower() == "delta":
                continue
            if len(row) != 2:
                raise InputError(f"{path}:{lineno}: expected 2 columns, got {len(row)}")
            try:
                d, u = float(row[0]), float(row[1])
            except ValueError:
                raise InputError(f"{path}:{lineno}: non-numeric value in {row!r}") from None
            if not (math.isfinite(d) and math.isfinite(u)):
                raise InputError(f"{path}:{lineno}: non-finite value")
            if d < 0 or u < 0:
                raise InputError(f"{path}:{lineno}: negative value")
            delta.append(d)
            unc.append(u)
    if not delta:
        raise InputError(f"{path}: no data rows")
    return np.asarray(delta), np.asarray(unc)


# subcommands --------------------------------------------------------------------

def cmd_gradfield(args) -> int:
    reg = Regularizer(REG_ALIASES[args.reg])
    field = gradient_field(reg, args.res)
    os.makedirs(os.path.dirname(os.path.abspath(args.out)), exist_ok=True)
    ex.write_csv(args.out, ["delta_norm", "phi_norm", "neg_grad"], list(field.rows()))
    if args.svg:
        svg.write_quiver(args.svg, list(field.rows()), title=f"{reg.value} gradient field")
    print(f"wrote {args.res * args.res} rows to {args.out}")
    return EXIT_OK


def cmd_train(args) -> int:
    config = load_config(args.experiment, args.config, args.seed, args.reg)
    print(f"seed={config.seed} experiment={args.experiment} reg={config.reg} "
          f"config_hash={ex.config_hash(config)}")
    report = ex.run_experiment(args.experiment, config, args.out)
    print(json.dumps(ex._clean(report["calibration"]), indent=2, sort_keys=True))
    return EXIT_OK


def cmd_calibrate(args) -> int:
    delta, unc = read_pairs(args.input)
    reports = cal.calibration_summary(delta, unc, bins=args.bins, equalize=args.equalize)
    doc = {"input": os.path.basename(args.input), "bins": args.bins, "equalize": args.equalize,
           "reports": {k: r.to_dict() for k, r in reports.items()}}
    text = json.dumps(ex._clean(doc), indent=2, sort_keys=True) + "\n"
    if args.out:
        with open(args.out, "w") as fh:
            fh.write(text)
    else:
        sys.stdout.write(text)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="evground", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gradfield", help="sample -dL/d(evidence) over the unit square")
    g.add_argument("--reg", required=True, choices=["vanilla", "type1", "type2", "geom1", "geom2"])
    g.add_argument("--res", type=int, default=10, help="grid points per axis (>= 2)")
    g.add_argument("--out", default="gradfield.csv", help="CSV path")
    g.add_argument("--svg", default=None, help="optional quiver SVG path")
    g.set_defaults(func=cmd_gradfield)

    t = sub.add_parser("train", help="run an experiment and write its artifacts")
    t.add_argument("--experiment", required=True, choices=sorted(ex.CONFIG_TYPES))
    t.add_argument("--config", default=None, help="JSON config with every key (default: packaged)")
    t.add_argument("--out", required=True, help="output directory")
    t.add_argument("--seed", type=int, default=None, help="override the config seed")
    t.add_argument("--reg", default=None, choices=["none", "vanilla", "geom1", "geom2"],
                   help="override the regularizer")
    t.set_defaults(func=cmd_train)

    c = sub.add_parser("calibrate", help="EUCM and entropy for a delta,uncertainty CSV")
    c.add_argument("input", help="CSV with columns delta,uncertainty")
    c.add_argument("--bins", type=int, default=cal.DEFAULT_BINS)
    c.add_argument("--equalize", action="store_true", help="histogram-equalise the uncertainty")
    c.add_argument("--out", default=None, help="report path (default: stdout)")
    c.set_defaults(func=cmd_calibrate)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if getattr(args, "res", 2) < 2:
        parser.error("--res must be >= 2")
    if getattr(args, "bins", 2) < 2:
        parser.error("--bins must be >= 2")
    try:
        return args.func(args)
    except ex.ConfigError as exc:
        for problem in exc.problems:
            print(f"config error: {problem}", file=sys.stderr)
        return EXIT_CONFIG
    except InputError as exc:
        print(f"input error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (OSError, ex.DivergenceError, ArithmeticError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
