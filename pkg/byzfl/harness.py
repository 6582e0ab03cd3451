"""Experiment configs: grid expansion, trial scheduling, CSV/manifest output, scaling bench."""
import csv
import json
import logging
import time
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Union

import numpy as np
from pydantic import BaseModel, ValidationError

from byzfl.config import settings
from byzfl.exceptions import ConfigurationError, DivergenceError, ParameterError, ParseError
from byzfl.protocol import TrialSpec, build_trial, execute_trial, resolve_threads, run_round, save_snapshot
from byzfl.schemas import ExperimentConfig, ManifestEntry, RoundRecord, TrialConfig, to_configuration_error

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]

CSV_HEADER = ["round", "train_loss", "test_acc", "elapsed_s"]
GRID_KEY = "grid_search"

__all__ = [
    "BenchRow",
    "TrialSpec",
    "bench_scaling",
    "expand_grid",
    "load_experiment",
    "parse_experiment",
    "run_experiment",
    "write_records",
]


class BenchRow(BaseModel):
    K: int
    parallelism: int
    avg_s: float
    std_s: float


# ---------------------------------------------------------------------------- #
# Config loading / grid expansion

def parse_experiment(raw: Dict[str, Any]) -> ExperimentConfig:
    try:
        return ExperimentConfig.model_validate(raw)
    except ValidationError as exc:
        raise to_configuration_error(exc) from exc


def load_experiment(path: PathLike) -> ExperimentConfig:
    path = Path(path)
    try:
        raw = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ParseError(exc.msg, line=exc.lineno) from exc
    if not isinstance(raw, dict):
        raise ParseError(f"{path} must contain a JSON object")
    return parse_experiment(raw)


def _expand(node: Any, path: str) -> List[Any]:
    """All resolutions of `node`; earlier keys vary slowest, list order is kept."""
    if isinstance(node, dict):
        if GRID_KEY in node:
            if len(node) != 1:
                raise ConfigurationError("grid_search must be the only key of its object", path)
            values = node[GRID_KEY]
            if not isinstance(values, list) or not values:
                raise ConfigurationError("grid_search needs a non-empty list", path)
            options: List[Any] = []
            for value in values:
                options.extend(_expand(value, path))
            return options
        combos: List[Dict[str, Any]] = [{}]
        for key, value in node.items():
            choices = _expand(value, f"{path}.{key}" if path else key)
            combos = [{**combo, key: choice} for combo in combos for choice in choices]
        return combos
    if isinstance(node, list):
        items: List[List[Any]] = [[]]
        for i, value in enumerate(node):
            choices = _expand(value, f"{path}.{i}")
            items = [item + [choice] for item in items for choice in choices]
        return items
    return [node]


def expand_grid(cfg: ExperimentConfig) -> List[TrialSpec]:
    """Cartesian product of every grid_search, repetitions innermost.

    trial_id counts up in that order, so ids only depend on the config.
    """
    trials: List[TrialSpec] = []
    for resolved in _expand(cfg.config, "config"):
        try:
            trial_cfg = TrialConfig.model_validate(resolved)
        except ValidationError as exc:
            raise to_configuration_error(exc, "config") from exc
        for repetition in range(cfg.repetitions):
            trials.append(
                TrialSpec(
                    trial_id=len(trials),
                    repetition=repetition,
                    run=cfg.run,
                    rounds=cfg.stop.training_round,
                    seed=cfg.seed,
                    config=trial_cfg,
                    resolved=resolved,
                )
            )
    return trials


# ---------------------------------------------------------------------------- #
# Running

def write_records(path: PathLike, records: Sequence[RoundRecord]) -> None:
    with Path(path).open("w", encoding="utf-8", newline="") as handle:
        writer = csv.writer(handle, lineterminator="\n")
        writer.writerow(CSV_HEADER)
        for r in records:
            writer.writerow([r.round, repr(float(r.train_loss)), repr(float(r.test_acc)), repr(float(r.elapsed_s))])


def _run_one(trial: TrialSpec, out_dir: Path, threads: Optional[int]) -> ManifestEntry:
    start = time.perf_counter()
    csv_path = out_dir / f"trial_{trial.trial_id:04d}.csv"
    entry = dict(trial_id=trial.trial_id, repetition=trial.repetition, config=trial.resolved, csv_path=str(csv_path))
    try:
        outcome = execute_trial(trial, threads)
        write_records(csv_path, outcome.records)
        if trial.config.snapshot:
            save_snapshot(csv_path.with_suffix(".npz"), outcome.server, outcome.clients)
        logger.info(f"✅ trial {trial.trial_id} done")
        return ManifestEntry(
            **entry,
            status="ok",
            total_s=time.perf_counter() - start,
            partition_repairs=outcome.partition_repairs,
            divergent_rounds=outcome.server.divergent_rounds,
        )
    except DivergenceError as exc:
        logger.error(f"❌ trial {trial.trial_id} diverged: {exc}")
        write_records(csv_path, [])
        return ManifestEntry(**entry, status="diverged", total_s=time.perf_counter() - start, error=str(exc))
    except Exception as exc:
        logger.error(f"❌ trial {trial.trial_id} failed: {exc}")
        return ManifestEntry(**entry, status="failed", total_s=time.perf_counter() - start, error=str(exc))


def run_experiment(
    cfg: ExperimentConfig,
    parallelism: int = 1,
    out_dir: Optional[PathLike] = None,
    threads: Optional[int] = None,
) -> List[ManifestEntry]:
    """Run every trial, at most `parallelism` at a time, and write manifest.json."""
    if parallelism < 1:
        raise ParameterError(f"parallelism must be >= 1, got {parallelism}")
    trials = expand_grid(cfg)
    out = Path(out_dir or settings.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    logger.info(f"🚀 running {len(trials)} trial(s) into {out} (parallelism={parallelism})")

    with ThreadPoolExecutor(max_workers=parallelism) as pool:
        manifest = list(pool.map(lambda trial: _run_one(trial, out, threads), trials))

    manifest_path = out / "manifest.json"
    manifest_path.write_text(
        json.dumps([entry.model_dump() for entry in manifest], indent=2) + "\n", encoding="utf-8"
    )
    failed = sum(entry.status != "ok" for entry in manifest)
    logger.info(f"📤 manifest written to {manifest_path} ({failed} trial(s) not ok)")
    return manifest


# ---------------------------------------------------------------------------- #
# Scaling bench

BENCH_BASE: Dict[str, Any] = {
    "global_model": {"type": "logistic"},
    "data_config": {"dataset": {"type": "synthetic", "num_classes": 2, "input_dim": 10}, "batch_size": 64},
    "server_config": {"aggregator": {"type": "mean"}},
}


def _time_rounds(trial: TrialSpec, rounds: int, threads: int) -> List[float]:
    runtime, server, clients = build_trial(trial)
    times = []
    with ThreadPoolExecutor(max_workers=min(threads, len(clients))) as pool:
        for _ in range(rounds):
            start = time.perf_counter()
            server, _ = run_round(runtime, server, clients, pool, evaluate_now=False)
            times.append(time.perf_counter() - start)
    return times


def _bench_trial(base: Dict[str, Any], K: int, per_class: int, run: str, seed: int) -> TrialSpec:
    cfg = json.loads(json.dumps(base))
    cfg["num_clients"] = K
    cfg.setdefault("num_malicious_clients", 0)
    dataset = cfg.setdefault("data_config", {}).setdefault("dataset", {})
    dataset["type"] = "synthetic"
    dataset["per_class"] = max(dataset.get("per_class", 0), per_class)
    try:
        trial_cfg = TrialConfig.model_validate(cfg)
    except ValidationError as exc:
        raise to_configuration_error(exc, "config") from exc
    return TrialSpec(trial_id=0, repetition=0, run=run, rounds=0, seed=seed, config=trial_cfg, resolved=cfg)


def bench_scaling(
    base: Optional[ExperimentConfig],
    client_counts: Sequence[int],
    rounds: int,
    parallelism_levels: Sequence[int] = (1, 2, 4),
    out_path: Optional[PathLike] = None,
) -> List[BenchRow]:
    """Per-round wall time for each K, then for the largest K across thread counts."""
    counts = list(client_counts)
    if not counts or counts != sorted(counts):
        raise ParameterError(f"client_counts must be non-empty and ascending, got {counts}")
    if rounds < 1:
        raise ParameterError(f"rounds must be >= 1, got {rounds}")
    if base is not None:
        config = _expand(base.config, "config")[0]
        run, seed = base.run, base.seed
    else:
        config, run, seed = BENCH_BASE, "FEDSGD", 0
    batch = config.get("data_config", {}).get("batch_size", 64)
    # enough data that every shard holds a full batch
    per_class = batch * max(counts) + batch

    rows: List[BenchRow] = []
    threads = resolve_threads()
    for K in counts:
        times = _time_rounds(_bench_trial(config, K, per_class, run, seed), rounds, threads)
        rows.append(BenchRow(K=K, parallelism=threads, avg_s=float(np.mean(times)), std_s=float(np.std(times))))
        logger.info(f"⏱️ K={K}: {rows[-1].avg_s:.4f}s ± {rows[-1].std_s:.4f}s per round")
    for level in parallelism_levels:
        times = _time_rounds(_bench_trial(config, counts[-1], per_class, run, seed), rounds, level)
        rows.append(
            BenchRow(K=counts[-1], parallelism=level, avg_s=float(np.mean(times)), std_s=float(np.std(times)))
        )

    if out_path is not None:
        with Path(out_path).open("w", encoding="utf-8", newline="") as handle:
            writer = csv.writer(handle, lineterminator="\n")
            writer.writerow(["K", "parallelism", "avg_s", "std_s"])
            for row in rows:
                writer.writerow([row.K, row.parallelism, repr(row.avg_s), repr(row.std_s)])
        logger.info(f"📤 bench table written to {out_path}")
    return rows
