"""Command line entry point: ``pathkernel {run,list,describe,verify,schema}``."""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

from .experiments import BUILTINS, config_schema, run_experiment, verify

EXIT_OK, EXIT_CONFIG, EXIT_DIVERGED, EXIT_CHECK = 0, 2, 3, 4
OUT_ENV = "PATHKERNEL_OUT"


def _parser():
    p = argparse.ArgumentParser(prog="pathkernel", description="Run and verify builtin path-kernel experiments.")
    sub = p.add_subparsers(dest="verb", required=True)
    r = sub.add_parser("run", help="run a builtin experiment")
    r.add_argument("name", nargs="?", help="builtin name (optional when --config names one)")
    r.add_argument("--config", type=Path, help="JSON config; merged onto the builtin defaults")
    r.add_argument("--out", type=Path, help=f"output directory (default ${OUT_ENV}/<name> or runs/<name>)")
    r.add_argument("--threads", type=int, default=1, help="worker threads; outputs do not depend on it")
    r.add_argument("--seed-override", type=int, help="replace the global seed and any optimizer seed")
    sub.add_parser("list", help="list builtin experiments")
    d = sub.add_parser("describe", help="show an experiment's checks, budget and default config")
    d.add_argument("name")
    v = sub.add_parser("verify", help="re-checksum an output tree and confirm its recorded checks")
    v.add_argument("out", type=Path)
    sub.add_parser("schema", help="print the run-config JSON schema")
    return p


def _err(msg):
    print(msg, file=sys.stderr)


def _unknown(name):
    _err(f"unknown experiment {name!r}; valid names: {', '.join(sorted(BUILTINS))}")
    return EXIT_CONFIG


def _run(args):
    config = {}
    if args.config is not None:
        try:
            config = json.loads(args.config.read_text())
        except (OSError, json.JSONDecodeError) as e:
            _err(f"config: cannot read {args.config}: {e}")
            return EXIT_CONFIG
        if not isinstance(config, dict):
            _err("config: <root>: must be a JSON object")
            return EXIT_CONFIG
    if args.name is not None:
        if config.get("experiment", args.name) != args.name:
            _err(f"config: experiment {config['experiment']!r} does not match {args.name!r}")
            return EXIT_CONFIG
        config["experiment"] = args.name
    name = config.get("experiment")
    if name not in BUILTINS:
        return _unknown(name)
    out = args.out or Path(os.environ.get(OUT_ENV, "runs")) / name
    res = run_experiment(config, out, args.threads, args.seed_override)
    if res.status != EXIT_OK:
        _err(f"{'config' if res.status == EXIT_CONFIG else 'diverged'}: {res.message}")
        return res.status
    failed = [k for k, v in res.manifest["checks"].items() if not v]
    print(f"{name}: wrote {len(res.manifest['artifacts'])} artifacts to {out}")
    for k, v in sorted(res.manifest["checks"].items()):
        print(f"  {'PASS' if v else 'FAIL'} {k}")
    if failed:
        print(f"  ({len(failed)} check(s) failed; see {out / 'summary.json'})")
    return EXIT_OK


def main(argv=None):
    args = _parser().parse_args(argv)
    if args.verb == "run":
        return _run(args)
    if args.verb == "list":
        for n in sorted(BUILTINS):
            b = BUILTINS[n]
            print(f"{n:<18} <= {b.budget_minutes:>2} min  {b.summary}")
        return EXIT_OK
    if args.verb == "describe":
        if args.name not in BUILTINS:
            return _unknown(args.name)
        print(json.dumps(BUILTINS[args.name].describe(), indent=2, sort_keys=True))
        return EXIT_OK
    if args.verb == "schema":
        print(json.dumps(config_schema(), indent=2, sort_keys=True))
        return EXIT_OK
    ok, problems = verify(args.out)
    for p in problems:
        _err(p)
    print(f"{args.out}: {'verified' if ok else 'verification failed'}")
    return EXIT_OK if ok else EXIT_CHECK


if __name__ == "__main__":
    sys.exit(main())
