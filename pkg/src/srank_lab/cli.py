"""srank-lab command-line interface.

Exit codes: 0 success, 1 usage/config error, 2 training diverged,
3 a validated bound was violated.
"""

from __future__ import annotations

import argparse
import json
import sys

from .config import load_config
from .errors import ConfigError, FitError, ManifestError
from .harness import (
    diagnose,
    fit_throughput,
    overhead_report,
    read_throughput_csv,
    run_training,
    validate_theorems,
)

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DIVERGED = 2
EXIT_VIOLATION = 3


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # argparse defaults to exit code 2
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _build_parser() -> _Parser:
    parser = _Parser(prog="srank-lab", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p_train = sub.add_parser("train", help="run one training configuration")
    p_train.add_argument("config", help="path to a run-configuration file")
    p_train.add_argument("--out", default=None, help="override run.out_dir")

    p_val = sub.add_parser("validate-theorems", help="run every bound-validation sweep")
    p_val.add_argument("--seed", type=int, default=0)
    p_val.add_argument("--trials", type=int, default=None,
                       help="override the per-sweep trial counts")

    p_over = sub.add_parser("overhead", help="amortized rewrite FLOPs ratio")
    p_over.add_argument("--b", type=int, required=True, help="batch size")
    p_over.add_argument("--t", type=int, required=True, help="sequence length")
    p_over.add_argument("--d", type=int, required=True, help="hidden dimension")
    p_over.add_argument("--p", type=int, required=True, help="application period")
    p_over.add_argument("--targets", default="attention_only",
                        choices=("attention_only", "mlp_only", "all_2d", "none"))

    p_fit = sub.add_parser("fit-throughput", help="fit T(P) = T_inf / (1 + r/P)")
    p_fit.add_argument("csv", help="CSV with header period,tokens_per_second")

    p_diag = sub.add_parser("diagnose", help="spectral timeline over checkpoints")
    p_diag.add_argument("checkpoints", nargs="+", help="checkpoint directories")
    p_diag.add_argument("--early-fraction", type=float, default=0.5)

    return parser


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        if args.command == "train":
            cfg = load_config(args.config)
            result = run_training(cfg, out_dir=args.out)
            print(json.dumps(result.summary, sort_keys=True))
            return EXIT_OK if result.status == "completed" else EXIT_DIVERGED
        if args.command == "validate-theorems":
            lines, ok = validate_theorems(seed=args.seed, trials=args.trials)
            for line in lines:
                print(line)
            return EXIT_OK if ok else EXIT_VIOLATION
        if args.command == "overhead":
            report = overhead_report(args.b, args.t, args.d, args.p, args.targets)
            print(json.dumps(report, sort_keys=True))
            return EXIT_OK
        if args.command == "fit-throughput":
            fit = fit_throughput(read_throughput_csv(args.csv))
            print(json.dumps(fit, sort_keys=True))
            return EXIT_OK
        if args.command == "diagnose":
            csv_text, warnings = diagnose(args.checkpoints, early_fraction=args.early_fraction)
            for warning in warnings:
                print(warning, file=sys.stderr)
            sys.stdout.write(csv_text)
            return EXIT_OK
    except (ConfigError, FitError, ManifestError, FileNotFoundError, ValueError) as exc:
        print(f"srank-lab: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    raise AssertionError("unreachable")


if __name__ == "__main__":
    sys.exit(main())
