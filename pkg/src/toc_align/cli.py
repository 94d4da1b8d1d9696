"""Command line entry point: ``toc-align {run,bench,check-bounds,validate-config}``."""
from __future__ import annotations

import argparse
import json
import logging
import sys

from . import experiment
from .errors import NumericalError, ValidationError

EXIT_OK, EXIT_VALIDATION, EXIT_NUMERICAL, EXIT_VIOLATION = 0, 1, 2, 3


def _parse_override(text):
    path, sep, raw = text.partition("=")
    if not sep or not path:
        raise ValidationError(f"override {text!r} is not of the form dotted.path=value")
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    return path, value


def load_config(path, overrides=()):
    if path:
        with open(path) as fh:
            try:
                config = json.load(fh)
            except json.JSONDecodeError as exc:
                raise ValidationError(f"{path}: not valid JSON ({exc})") from None
    else:
        config = json.loads(json.dumps(experiment.DEFAULT_CONFIG))
    for item in overrides:
        experiment.set_dotted(config, *_parse_override(item))
    return config


def build_parser():
    parser = argparse.ArgumentParser(prog="toc-align", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, help_text in (("run", "train systems and evaluate the compatibility grid"),
                            ("bench", "time the server-side alignment estimators"),
                            ("check-bounds", "check the noise-gap bound across the SNR grid"),
                            ("validate-config", "validate a config without computing anything")):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("config", nargs="?", help="JSON config (defaults to the built-in desk-scale config)")
        p.add_argument("--set", dest="overrides", action="append", default=[], metavar="PATH=VALUE",
                       help="override a config field by dotted path; VALUE is parsed as JSON when possible")
        if name != "validate-config":
            p.add_argument("--out", help=f"output directory (default: config, ${experiment.OUTPUT_ENV}, ./results)")
            p.add_argument("--jobs", type=int, default=1, help="parallel grid jobs")
    sub.add_parser("schema", help="print the config JSON schema")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.command == "schema":
        print(json.dumps(experiment.CONFIG_SCHEMA, indent=2))
        return EXIT_OK
    try:
        config = load_config(args.config, args.overrides)
        if args.command == "validate-config":
            print("config ok, hash", experiment.config_hash(experiment.validate_config(config)))
            return EXIT_OK
        if args.command == "run":
            paths = experiment.run(config, args.out, args.jobs)
        elif args.command == "bench":
            paths = experiment.bench(config, args.out, args.jobs)
        else:
            paths, violations = experiment.check_bounds(config, args.out, args.jobs)
            for p in paths:
                print(p)
            if violations:
                worst = min(v.slack for v in violations)
                print(f"{len(violations)} bound violations (worst slack {worst:.3g})", file=sys.stderr)
                return EXIT_VIOLATION
            return EXIT_OK
    except (ValidationError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    for p in paths:
        print(p)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
