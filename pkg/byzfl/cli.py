"""Command line entry point: `byzfl run|expand|list|bench-scaling|serve`."""
import argparse
import json
import logging
import sys
from typing import List, Optional

from byzfl import __version__
from byzfl.api.registry import RegistryService
from byzfl.config import settings
from byzfl.exceptions import ByzflError, ConfigurationError, ParseError
from byzfl.harness import bench_scaling, expand_grid, load_experiment, run_experiment
from byzfl.schemas import ExperimentConfig

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_RUNTIME = 2


def _load(path: str, seed: Optional[int]) -> ExperimentConfig:
    cfg = load_experiment(path)
    if seed is not None:
        cfg = cfg.model_copy(update={"seed": seed})
    return cfg


def _client_counts(value: str) -> List[int]:
    try:
        return [int(part) for part in value.split(",") if part.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {value!r}")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="byzfl", description="Byzantine-robust federated learning simulator")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("--threads", type=int, default=None, help="client worker threads (overrides BYZFL_THREADS)")
    parser.add_argument("--log-level", default=settings.log_level, help="logging level")
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run every trial of an experiment config")
    run.add_argument("config", help="experiment JSON file")
    run.add_argument("--out", default=None, help=f"output directory (default {settings.output_dir})")
    run.add_argument("--parallelism", type=int, default=settings.parallelism, help="concurrent trials")
    run.add_argument("--seed", type=int, default=None, help="override the experiment seed")

    expand = sub.add_parser("expand", help="print the resolved trials without running them")
    expand.add_argument("config", help="experiment JSON file")
    expand.add_argument("--seed", type=int, default=None)

    listing = sub.add_parser("list", help="list available components")
    listing.add_argument("kind", choices=["aggregators", "attacks", "models"])

    bench = sub.add_parser("bench-scaling", help="per-round time against client count and thread count")
    bench.add_argument("--clients", type=_client_counts, default=[16, 32, 64, 128])
    bench.add_argument("--rounds", type=int, default=10)
    bench.add_argument("--parallelism", type=_client_counts, default=[1, 2, 4], help="thread counts to sweep")
    bench.add_argument("--config", default=None, help="experiment JSON whose first trial is the bench task")
    bench.add_argument("--out", default=None, help="CSV file for the table")
    bench.add_argument("--seed", type=int, default=None)

    serve = sub.add_parser("serve", help="start the HTTP API")
    serve.add_argument("--host", default=settings.api_host)
    serve.add_argument("--port", type=int, default=settings.api_port)
    return parser


def _run(args) -> int:
    manifest = run_experiment(
        _load(args.config, args.seed), parallelism=args.parallelism, out_dir=args.out, threads=args.threads
    )
    bad = [entry for entry in manifest if entry.status != "ok"]
    for entry in bad:
        print(f"❌ trial {entry.trial_id}: {entry.status} {entry.error or ''}".rstrip(), file=sys.stderr)
    print(f"✅ {len(manifest) - len(bad)}/{len(manifest)} trial(s) ok")
    return EXIT_RUNTIME if bad else EXIT_OK


def _expand(args) -> int:
    for trial in expand_grid(_load(args.config, args.seed)):
        print(json.dumps({"trial_id": trial.trial_id, "repetition": trial.repetition, "config": trial.resolved}))
    return EXIT_OK


def _list(args) -> int:
    for entry in RegistryService.entries(args.kind):
        suffix = f"  [{entry.annotation}]" if entry.annotation else ""
        print(f"{entry.name:<20} {entry.description}{suffix}")
    return EXIT_OK


def _bench(args) -> int:
    base = _load(args.config, args.seed) if args.config else None
    if args.threads:
        settings.threads = args.threads
    rows = bench_scaling(base, args.clients, args.rounds, args.parallelism, args.out)
    print("K,parallelism,avg_s,std_s")
    for row in rows:
        print(f"{row.K},{row.parallelism},{row.avg_s!r},{row.std_s!r}")
    return EXIT_OK


def _serve(args) -> int:
    import uvicorn

    uvicorn.run("byzfl.main:app", host=args.host, port=args.port, log_level=args.log_level.lower())
    return EXIT_OK


COMMANDS = {"run": _run, "expand": _expand, "list": _list, "bench-scaling": _bench, "serve": _serve}


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=args.log_level.upper())
    try:
        return COMMANDS[args.command](args)
    except (ConfigurationError, ParseError) as exc:
        print(f"❌ invalid configuration: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except ByzflError as exc:
        print(f"❌ {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except OSError as exc:
        print(f"❌ {exc}", file=sys.stderr)
        return EXIT_CONFIG
