"""
Command-line entry point for the multi-server federated simulator.

    run       run one experiment and export its metrics
    compare   run the configured experiment plus a single-server baseline
              and report the relative final-loss gap
    gen-data  write the synthetic recharge events as CSV (events.csv +
              stations.csv) so they can be fed back through data.source: csv

CLI Usage:
    # Default experiment (2 servers, 9 regions, 3 rounds) -> ./results
    python -m src.main run

    # Custom config, seed and output directory
    python -m src.main run --config config.yaml --seed 7 --out results/seed7

    # Multi-server vs single-server comparison
    python -m src.main compare --config config.yaml

    # Distributed mode over TCP (servers need host:port endpoints)
    python -m src.main run --listen gs1
    python -m src.main run --join region-3

    # Verbose logging (per-dial attempts, per-epoch losses)
    python -m src.main run -v

Exit codes: 0 success, 1 configuration error, 2 runtime failure.
"""

import argparse
import asyncio
import json
import logging
import sys
from pathlib import Path
from typing import List, Optional

from pydantic import ValidationError

from src.config import ExperimentConfig, load_config
from src.data import generate_synthetic, write_csv, write_station_map
from src.errors import ConfigError, FederationError
from src.harness import (
    compare,
    export,
    join_one,
    run_experiment,
    serve_one,
    single_server_baseline,
)

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_RUNTIME = 2


def setup_logging(level: str = "INFO", verbose: bool = False) -> None:
    logging.basicConfig(
        level=logging.DEBUG if verbose else getattr(logging, level.upper(), logging.INFO),
        format="%(asctime)s [%(levelname)s] %(name)s: %(message)s",
        datefmt="%H:%M:%S",
    )


def _apply_overrides(config: ExperimentConfig, args: argparse.Namespace) -> ExperimentConfig:
    update = {}
    if args.seed is not None:
        update["seed"] = args.seed
    if args.out is not None:
        update["output_dir"] = args.out
    return config.model_copy(update=update) if update else config


# ── Subcommands ────────────────────────────────────────────────

def cmd_run(config: ExperimentConfig, args: argparse.Namespace) -> int:
    if args.listen:
        records = asyncio.run(serve_one(config, args.listen))
        for record in records:
            print(f"{record.server_id} round {record.round}: {record.status.value}, "
                  f"eval_loss={record.eval_loss:.6g}")
        return EXIT_OK

    if args.join:
        reports = asyncio.run(join_one(config, args.join))
        for report in reports:
            print(f"{report.client_id} round {report.round}: {report.delivered_to or 'FAILED'}")
        return EXIT_OK

    bundle = run_experiment(config)
    export(bundle, config.output_dir)
    for server_id in bundle.servers:
        print(f"{server_id}: final eval loss {bundle.final_loss(server_id):.6g}")
    print(f"Results written to {config.output_dir}")
    return EXIT_OK


def cmd_compare(config: ExperimentConfig, args: argparse.Namespace) -> int:
    baseline = load_config(args.baseline) if args.baseline else single_server_baseline(config)
    baseline = _apply_overrides(baseline, args)
    out = Path(config.output_dir)

    multi = run_experiment(config)
    single = run_experiment(baseline)
    export(multi, str(out / "multi"))
    export(single, str(out / "single"))

    result = compare(multi, single)
    (out / "comparison.json").write_text(
        json.dumps(result.model_dump(mode="json"), sort_keys=True, indent=2) + "\n",
        encoding="utf-8",
    )
    print(f"Best multi-server ({result.multi_server}) final loss: {result.multi_final_loss:.6g}")
    print(f"Single-server ({result.single_server}) final loss:    {result.single_final_loss:.6g}")
    print(f"Relative gap: {result.relative_final_loss_gap:.4%}")
    return EXIT_OK


def cmd_gen_data(config: ExperimentConfig, args: argparse.Namespace) -> int:
    spec = config.data.synthetic
    events = generate_synthetic(spec.rows_per_region, spec.regions, spec.noise_std, config.synthetic_seed)
    out = Path(config.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_csv(events, str(out / "events.csv"))
    write_station_map(events, str(out / "stations.csv"))
    print(f"Wrote {len(events)} events to {out / 'events.csv'} and the station map to {out / 'stations.csv'}")
    return EXIT_OK


COMMANDS = {"run": cmd_run, "compare": cmd_compare, "gen-data": cmd_gen_data}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="fedsim",
        description="Multi-server federated learning simulator for EV charging data",
        formatter_class=argparse.RawDescriptionHelpFormatter,
        epilog="""
Examples:
  python -m src.main run                       Default two-server experiment
  python -m src.main run --config exp.json     Experiment from a JSON/YAML file
  python -m src.main compare                   Multi vs single server gap
  python -m src.main gen-data --out data/      Export synthetic events as CSV
  python -m src.main run --listen gs1          Serve gs1 over TCP
  python -m src.main run --join region-1       Run one client over TCP
        """,
    )

    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", default="config.yaml", help="Path to config file (YAML or JSON)")
    common.add_argument("--seed", type=int, default=None, help="Override the experiment seed")
    common.add_argument("--out", default=None, help="Override the output directory")
    common.add_argument("-v", "--verbose", action="store_true", help="Enable debug logging")

    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", parents=[common], help="Run one experiment and export metrics")
    mode = run.add_mutually_exclusive_group()
    mode.add_argument("--listen", metavar="SERVER_ID", help="Run only this server over TCP")
    mode.add_argument("--join", metavar="CLIENT_ID", help="Run only this client over TCP")

    cmp = sub.add_parser("compare", parents=[common], help="Compare multi-server against single-server")
    cmp.add_argument("--baseline", default=None,
                     help="Config for the baseline run (default: first server only)")

    sub.add_parser("gen-data", parents=[common], help="Write synthetic events as CSV")
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    """CLI entry point."""
    args = build_parser().parse_args(argv)

    try:
        config = _apply_overrides(load_config(args.config), args)
    except (ConfigError, ValidationError) as e:
        setup_logging(verbose=args.verbose)
        logger.error("%s", e)
        print(f"Config error: {e}", file=sys.stderr)
        return EXIT_CONFIG

    setup_logging(config.log_level, args.verbose)
    try:
        return COMMANDS[args.command](config, args)
    except (ConfigError, ValidationError) as e:
        print(f"Config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (FederationError, OSError) as e:
        logger.debug("Run failed", exc_info=True)
        print(f"Error: {e}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
