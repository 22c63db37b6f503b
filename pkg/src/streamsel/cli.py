"""Command-line entry point: ``streamsel run|solve-input|oracle``.

Exit status is 0 on success, 2 when the configuration is invalid and 3 when
a run fails after the configuration was accepted.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys

from streamsel.engine import ConfigurationError
from streamsel.harness import (
    build_oracle_cache,
    default_workers,
    load_config,
    run_experiment,
    solve_input,
    write_results,
)
from streamsel.input_models import InvalidParameter

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_RUNTIME = 3

log = logging.getLogger("streamsel")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="streamsel", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run replications and write the PCS curve")
    run.add_argument("--config", required=True)
    run.add_argument("--procedure", choices=["sba", "equal", "jba"])
    run.add_argument("--seed", type=int)
    run.add_argument("--reps", type=int, help="number of replications")
    run.add_argument("--workers", type=int, default=1, help="worker processes (0 = all CPUs)")
    run.add_argument("--oracle-mode", action="store_true", help="use true parameters in the allocation rules")
    run.add_argument("--dump-stage-state", type=int, default=0, metavar="K", help="write JSON snapshots every K stages")
    run.add_argument("--out", help="output directory (defaults to the config's 'output')")

    solve = sub.add_parser("solve-input", help="solve one input allocation and print it")
    solve.add_argument("--config", required=True)
    solve.add_argument("--oracle-mode", action="store_true", help="use the true parameters instead of pilot estimates")

    oracle = sub.add_parser("oracle", help="build or refresh the inventory ground-truth cache")
    oracle.add_argument("--config", required=True)
    oracle.add_argument("--n", type=int, default=1_000_000, help="Monte Carlo replications")
    oracle.add_argument("--seed", type=int, default=0)
    return parser


def _cmd_run(args) -> int:
    config = load_config(args.config)
    config = config.replace(
        procedure=args.procedure,
        seed=args.seed,
        replications=args.reps,
        oracle_mode=True if args.oracle_mode else None,
        output=args.out,
    )
    workers = default_workers() if args.workers == 0 else args.workers
    log.info("running %d %s replications with %d worker(s)", config.replications, config.procedure, workers)
    result = run_experiment(config, workers=workers, dump_every=args.dump_stage_state, out_dir=config.output)
    paths = write_results(result, config.output)
    print(json.dumps({"final_pcs": result.manifest["final_pcs"], **paths}))
    return EXIT_OK


def _cmd_solve(args) -> int:
    config = load_config(args.config)
    out = solve_input(config, use_truth=args.oracle_mode)
    print(json.dumps({k: out[k] for k in ("source", "n_bar", "achieved_rate", "kkt_residual")}))
    return EXIT_OK


def _cmd_oracle(args) -> int:
    config = load_config(args.config)
    entry = build_oracle_cache(config, n_oracle=args.n, seed=args.seed)
    print(json.dumps({"cache": str(config.cache_path()), "best": entry["best"], "means": entry["means"]}))
    return EXIT_OK


COMMANDS = {"run": _cmd_run, "solve-input": _cmd_solve, "oracle": _cmd_oracle}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return COMMANDS[args.command](args)
    except (ConfigurationError, InvalidParameter, FileNotFoundError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as exc:  # noqa: BLE001 - any failure after validation is a runtime error
        print(f"runtime error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
