"""Command line entry point: ``bvrlp {run,sweep,compare,certify}``."""

import argparse
import logging
import sys

from ..problems import ContractError
from . import config as cfgmod
from .runner import certify_saved, run_experiment


def build_parser():
    ap = argparse.ArgumentParser(prog="bvrlp", description="Simulated-cluster optimizer experiments.")
    sub = ap.add_subparsers(dest="command", required=True)
    for name, help_ in [
        ("run", "run every algorithm x grid point x trial"),
        ("sweep", "run the grid and report the tuning selection"),
        ("compare", "tune, then rerun each algorithm's chosen point for n_trials"),
    ]:
        p = sub.add_parser(name, help=help_)
        p.add_argument("--config", required=True, help="YAML/JSON config or a manifest.json")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                       help="override a config field, e.g. --set run.K=8 (repeatable)")
        p.add_argument("--out", help="output directory (default: output.dir from the config)")
        p.add_argument("--threads", type=int, default=1, help="concurrent runs (results do not depend on it)")
        p.add_argument("--restarts", type=int, help="independent repetitions per trial")
        p.add_argument("--certify", nargs=2, type=float, metavar=("EPS", "RHO"),
                       help="checkpoint pre-noise iterates and scan them for an eps-SOSP")
    p = sub.add_parser("certify", help="SOSP scan over checkpoints saved in an output directory")
    p.add_argument("--out", required=True)
    p.add_argument("--certify", nargs=2, type=float, metavar=("EPS", "RHO"), required=True)
    ap.add_argument("-v", "--verbose", action="store_true")
    return ap


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")

    if args.command == "certify":
        eps, rho = args.certify
        reports = certify_saved(args.out, eps, rho)
        found = sum(r["found"] for r in reports)
        print(f"certified {found}/{len(reports)} saved traces as eps-SOSP (eps={eps:g}, rho={rho:g})")
        return 0

    overrides = list(args.set)
    if args.restarts is not None:
        overrides.append(f"restarts={args.restarts}")
    try:
        exp = cfgmod.load(args.config, overrides)
    except (OSError, ContractError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    certify = None
    if args.certify:
        certify = {"eps": args.certify[0], "rho": args.certify[1]}
    out = args.out or exp.output.get("dir", "results")
    try:
        summary = run_experiment(exp, out, mode=args.command, threads=args.threads,
                                 certify=certify, command=" ".join(sys.argv[1:]) if argv is None else " ".join(argv))
    except ContractError as exc:
        print(f"error: field 'problem': {exc}", file=sys.stderr)
        return 2
    for a, sel in (summary.get("selection") or {}).items():
        print(f"{a}: eta={sel['eta']:g} r={sel['r']:g} ({sel['rule']} score {sel['score']:.6g})")
    n_fail = sum(r.status != "ok" for r in summary["results"])
    print(f"{len(summary['results'])} runs, {n_fail} failed; results in {out}")
    return summary["exit_code"]


if __name__ == "__main__":
    sys.exit(main())
