"""Command-line entry point: ``openkpz <kind> [options]``.

Values come from defaults, then the ``--config`` INI file (sections
``[common]`` and ``[<kind>]``), then flags. ``OPENKPZ_SEED`` sets the default
seed. Exit codes: 0 success, 2 input error, 3 numerical error, 4 acceptance
failure under ``--check``.
"""

from __future__ import annotations

import argparse
import sys
import warnings

from .errors import InputError, NumericalError
from .orchestrator import EXIT_INPUT, EXIT_NUMERICAL, build_config, run


def _common(p: argparse.ArgumentParser, out_help: str) -> None:
    p.add_argument("--config", help="INI file; flags override its values")
    p.add_argument("--seed", help="64-bit seed (default: $OPENKPZ_SEED or 0)")
    p.add_argument("--n-workers", dest="n_workers", help="worker processes (results do not depend on it)")
    p.add_argument("--out", help=out_help + " (default: stdout)")


def _opt(p: argparse.ArgumentParser, *names: str) -> None:
    for n in names:
        p.add_argument("--" + n.replace("_", "-"), dest=n)


def _gibbs(p: argparse.ArgumentParser) -> None:
    _opt(p, "n_sweeps", "burn_in", "thinning")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="openkpz", description="Open KPZ stationary-measure and SHE experiments.")
    sp = ap.add_subparsers(dest="kind", metavar="kind", required=True)

    p = sp.add_parser("sample", help="draw stationary two-layer profiles (JSONL)")
    _opt(p, "L", "u", "v", "dx", "n_samples")
    _gibbs(p)
    _common(p, "samples JSONL")

    p = sp.add_parser("sigma", help="estimate sigma_L^2 (CSV)")
    _opt(p, "L", "u", "v", "n", "dx")
    p.add_argument("--substream", help="comma-separated child-stream path under the seed (e.g. 2 = spawn(2))")
    _gibbs(p)
    _common(p, "CSV with L,u,v,n,mean,stderr")

    p = sp.add_parser("sigma-scaling", help="sigma_L^2 over several L plus log-log fit (JSON)")
    _opt(p, "Ls", "u", "v", "n", "dx")
    _gibbs(p)
    _common(p, "fit JSON")

    p = sp.add_parser("report", help="fit a directory of sigma CSVs (JSON)")
    _opt(p, "dir")
    _common(p, "fit JSON")

    p = sp.add_parser("she", help="evolve the SHE from stationary data; height statistics (JSON)")
    _opt(p, "L", "u", "v", "t", "dx", "dt", "replicas", "snapshots")
    _gibbs(p)
    _common(p, "stats JSON")

    p = sp.add_parser("stationarity", help="KS stationarity test of SHE heights (CSV)")
    _opt(p, "L", "u", "v", "t", "dx", "dt", "replicas")
    _gibbs(p)
    _common(p, "CSV")

    p = sp.add_parser("kernel", help="Robin heat kernel K_t(x, y) (CSV)")
    _opt(p, "L", "u", "v", "t", "x", "y", "n_modes", "basis_json")
    _common(p, "CSV")

    p = sp.add_parser("wedge", help="wedge survival, hitting tail or killed kernel (CSV)")
    p.add_argument("sub", choices=["survival", "hit-tail", "kernel"])
    _opt(p, "q", "b", "L", "Ls", "T", "t", "start", "end", "method", "n_paths", "dt", "eps", "r_min", "r_max")
    p.add_argument("--correction", action="store_const", const=True, default=None,
                   help="weight steps by the bridge non-crossing probability")
    _common(p, "CSV")

    p = sp.add_parser("acceptance", help="run the acceptance checks (CSV report)")
    _opt(p, "tier", "only")
    p.add_argument("--check", action="store_const", const=True, default=None, help="exit 4 if any check fails")
    _common(p, "CSV report")
    return ap


def main(argv: list[str] | None = None) -> int:
    args = vars(build_parser().parse_args(argv))
    kind = args.pop("kind")
    config_path = args.pop("config", None)
    try:
        cfg = build_config(kind, args, config_path)
        with warnings.catch_warnings():
            warnings.simplefilter("default")
            return run(cfg)
    except InputError as exc:
        print(f"openkpz: input error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except NumericalError as exc:
        print(f"openkpz: numerical error: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())
