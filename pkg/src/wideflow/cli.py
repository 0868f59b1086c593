"""Command line entry point ``wideflow``.

Subcommands: ``run <config>``, ``validate <config>``,
``diagnose <trajectory> <config>``, ``compare <trajA> <trajB>``.
The output directory is ``output.directory`` from the config, overridden by
the ``WIDEFLOW_OUTPUT_DIR`` environment variable and then by ``--output``.
Exit codes: 0 success, 1 invalid input, 2 runtime failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

from .config import ConfigError, parse_config
from .constitutive import ParameterError
from .geometry import FluxMismatchError

__all__ = ["main", "EXIT_OK", "EXIT_INVALID", "EXIT_RUNTIME", "OUTPUT_ENV"]

EXIT_OK, EXIT_INVALID, EXIT_RUNTIME = 0, 1, 2
OUTPUT_ENV = "WIDEFLOW_OUTPUT_DIR"


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="wideflow", description=__doc__.splitlines()[0])
    p.add_argument("-q", "--quiet", action="store_true", help="suppress progress lines")
    sub = p.add_subparsers(dest="command", required=True)
    r = sub.add_parser("run", help="continuation ladder, reference run and diagnostics")
    r.add_argument("config")
    r.add_argument("--output", help="output directory")
    v = sub.add_parser("validate", help="check a config without solving")
    v.add_argument("config")
    v.add_argument("--no-korn", action="store_true", help="skip the Korn constant estimate")
    d = sub.add_parser("diagnose", help="diagnostics of a stored trajectory")
    d.add_argument("trajectory")
    d.add_argument("config")
    d.add_argument("--output", help="output directory")
    c = sub.add_parser("compare", help="distance between two stored trajectories")
    c.add_argument("traj_a")
    c.add_argument("traj_b")
    return p


def _output_dir(cfg, flag):
    if flag:
        return Path(flag)
    env = os.environ.get(OUTPUT_ENV)
    return Path(env) if env else Path(cfg.output.directory)


def _fail(code: int, kind: str, message: str, outdir=None) -> int:
    record = {"status": "error", "exit_code": code, "kind": kind, "message": message}
    text = json.dumps(record, sort_keys=True)
    print(text, file=sys.stderr)
    if outdir is not None:
        try:
            Path(outdir).mkdir(parents=True, exist_ok=True)
            (Path(outdir) / "failure.json").write_text(text + "\n")
        except OSError:
            pass
    return code


def _load(path):
    return parse_config(Path(path).read_text(encoding="utf-8"))


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO,
                        format="%(message)s", stream=sys.stderr, force=True)
    from . import orchestration as orch

    outdir = None
    try:
        if args.command == "compare":
            res = orch.compare_trajectories(args.traj_a, args.traj_b)
            print(json.dumps(res, sort_keys=True))
            return EXIT_OK
        cfg = _load(args.config)
        if args.command == "validate":
            res = orch.validate_scenario(cfg, korn=not args.no_korn)
            print(json.dumps(res, sort_keys=True, indent=2))
            return EXIT_OK
        outdir = _output_dir(cfg, args.output)
        if args.command == "run":
            outcome = orch.run_scenario(cfg, outdir)
            print(json.dumps(outcome.summary, sort_keys=True))
            if outcome.exit_code != EXIT_OK:
                return _fail(outcome.exit_code, "convergence",
                             "at least one eps rung did not converge", outdir)
            return EXIT_OK
        res = orch.diagnose_trajectory(args.trajectory, cfg, outdir)
        print(json.dumps(res, sort_keys=True))
        return EXIT_OK
    except (ConfigError, ParameterError, FluxMismatchError) as exc:
        return _fail(EXIT_INVALID, type(exc).__name__, str(exc), outdir)
    except (OSError, ValueError) as exc:
        return _fail(EXIT_INVALID, type(exc).__name__, str(exc), outdir)
    except Exception as exc:  # runtime failures of the numerical modules
        return _fail(EXIT_RUNTIME, type(exc).__name__, str(exc), outdir)


if __name__ == "__main__":
    sys.exit(main())
