"""The federated training loop: broadcast, local training, attack, aggregation, server step.

Per-round fork-join: the K local rounds run on a thread pool with no shared
mutable state (read-only w0 and dataset, a private RNG stream and momentum
buffer per client). Adversary, aggregation and server step run on the driver.

Random streams hang off the trial root:
    data, split, partition, init               set-up
    round/<t>/client/<id>/batches              batch order of client id in round t
    round/<t>/transform/<id>                   DP noise of client id
    round/<t>/adversary                        omniscient attacks
    round/<t>/aggregator                       randomized rules and Bucketing
"""
import logging
import math
import os
import time
from concurrent.futures import Executor, ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Dict, List, NamedTuple, Optional, Sequence, Tuple, Union

import numpy as np
import numpy.typing as npt

from byzfl.aggregators import AggregationContext, aggregate, apply_transforms, check_aggregator, clip_update
from byzfl.attacks import AdversaryCallback, AdversaryView, ClientCallback, build_adversary
from byzfl.config import settings
from byzfl.data import Dataset, Partition, load_csv, partition_dirichlet, partition_iid, synth_gaussian_mixture, train_test_split
from byzfl.exceptions import DimensionError, DivergenceError, ParameterError
from byzfl.models import Batch, evaluate, init_params, loss_and_grad
from byzfl.numcore import ParamVector, RngStream, UpdateSet
from byzfl.schemas import ClientOptConfig, ModelSpec, RoundRecord, ServerOptConfig, TrialConfig

logger = logging.getLogger(__name__)

LOSS_CLAMP = 1e4


def clamp_loss(loss: float) -> float:
    """Reported losses live in [0, 1e4]; non-finite values report as 1e4."""
    if not math.isfinite(loss):
        return LOSS_CLAMP
    return min(max(loss, 0.0), LOSS_CLAMP)


# ---------------------------------------------------------------------------- #
# State

@dataclass
class ClientState:
    id: int
    shard: npt.NDArray[np.int64]
    momentum_buf: ParamVector
    is_malicious: bool = False
    callbacks: List[ClientCallback] = field(default_factory=list)
    last_loss: float = float("nan")
    divergent: bool = False


@dataclass(frozen=True)
class ServerState:
    w: ParamVector
    momentum_buf: ParamVector
    cc_memory: Optional[ParamVector] = None
    round: int = 0
    norm_history: Tuple[float, ...] = ()
    divergent_rounds: int = 0
    last_step_diverged: bool = False
    test_acc: float = float("nan")

    @classmethod
    def initial(cls, w: ParamVector) -> "ServerState":
        w = np.array(w, dtype=np.float64)
        return cls(w=w, momentum_buf=np.zeros_like(w))


@dataclass(frozen=True)
class TrialSpec:
    """One fully resolved trial of an experiment grid."""

    trial_id: int
    repetition: int
    run: str
    rounds: int
    seed: int
    config: TrialConfig
    resolved: Dict[str, Any] = field(default_factory=dict)

    @property
    def stream(self) -> RngStream:
        return RngStream(self.seed, (f"trial{self.trial_id}", f"rep{self.repetition}"))


@dataclass
class TrialRuntime:
    """Everything a trial builds once before its first round."""

    spec: TrialSpec
    model: ModelSpec
    train: Dataset
    test: Dataset
    partition: Partition
    client_cfg: ClientOptConfig
    server_cfg: ServerOptConfig
    adversary: Optional[AdversaryCallback]
    eval_interval: int

    @property
    def config(self) -> TrialConfig:
        return self.spec.config

    @property
    def stream(self) -> RngStream:
        return self.spec.stream


class TrialOutcome(NamedTuple):
    records: List[RoundRecord]
    server: ServerState
    runtime: TrialRuntime
    clients: List[ClientState]

    @property
    def partition_repairs(self) -> int:
        return self.runtime.partition.repairs


# ---------------------------------------------------------------------------- #
# Client side

class BatchSampler:
    """Batches drawn without replacement; the shard is reshuffled whenever an epoch runs out.

    A sampler lives for one local round, so every round starts from a fresh shuffle.
    """

    def __init__(self, shard: npt.NDArray[np.int64], batch_size: int, rng: RngStream):
        if len(shard) == 0:
            raise ParameterError("cannot sample from an empty shard")
        self.shard = np.asarray(shard, dtype=np.int64)
        self.batch_size = min(batch_size, len(self.shard))
        self._gen = rng.generator()
        self._reshuffle()

    def _reshuffle(self) -> None:
        self._order = self._gen.permutation(self.shard)
        self._pos = 0

    def next_indices(self) -> npt.NDArray[np.int64]:
        if self._pos + self.batch_size > len(self._order):
            self._reshuffle()
        idx = self._order[self._pos:self._pos + self.batch_size]
        self._pos += self.batch_size
        return idx


def client_local_round(
    state: ClientState,
    w0: ParamVector,
    cfg: ClientOptConfig,
    model: ModelSpec,
    data: Dataset,
    rng: RngStream,
) -> ParamVector:
    """E_l local steps from w0; returns Δ_k = w_k − w0.

    Δ is accumulated directly as the sum of the −η_l·m steps and gradients are
    taken at w0 + Δ.
    """
    if cfg.reset_momentum:
        state.momentum_buf = np.zeros_like(w0)
    sampler = BatchSampler(state.shard, cfg.batch_size, rng.derive("batches"))
    delta = np.zeros_like(w0)
    m = state.momentum_buf
    losses = []
    for _ in range(cfg.local_steps):
        idx = sampler.next_indices()
        features, labels = data.features[idx], data.labels[idx]
        for callback in state.callbacks:
            features, labels = callback.on_batch_begin(features, labels)
        loss, grad = loss_and_grad(model, w0 + delta, Batch(features, labels))
        if not math.isfinite(loss) or not np.all(np.isfinite(grad)):
            logger.warning(f"⚠️ client {state.id}: non-finite loss, update dropped for this round")
            state.divergent = True
            state.last_loss = float("inf")
            return np.zeros_like(w0)
        for callback in state.callbacks:
            grad = callback.on_backward_end(grad)
        if cfg.grad_clip is not None:
            grad = clip_update(grad, cfg.grad_clip)
        m = cfg.momentum * m + grad
        delta = delta - cfg.lr * m
        losses.append(loss)
    state.momentum_buf = m
    state.divergent = False
    state.last_loss = float(np.mean(losses))
    return delta


# ---------------------------------------------------------------------------- #
# Server side

def server_step(
    state: ServerState, agg_delta: ParamVector, cfg: ServerOptConfig, default_lr: float = 1.0
) -> ServerState:
    """p = −Δ; m ← β_s·m + p; w ← w − η_g(t)·m.

    A step that would make w non-finite is rejected: w and m keep their values
    and the round is counted as divergent.
    """
    agg_delta = np.asarray(agg_delta, dtype=np.float64)
    if agg_delta.shape != state.w.shape:
        raise DimensionError(f"aggregate has shape {agg_delta.shape}, model has {state.w.shape}")
    p = -agg_delta
    m = cfg.momentum * state.momentum_buf + p
    w = state.w - cfg.lr_at(state.round, default_lr) * m
    if not (np.all(np.isfinite(w)) and np.all(np.isfinite(m))):
        return replace(
            state,
            round=state.round + 1,
            divergent_rounds=state.divergent_rounds + 1,
            last_step_diverged=True,
        )
    return replace(state, w=w, momentum_buf=m, round=state.round + 1, last_step_diverged=False)


def resolve_threads(threads: Optional[int] = None) -> int:
    """Explicit argument, then BYZFL_THREADS, then the CPU count."""
    chosen = threads or settings.threads or os.cpu_count() or 1
    return max(1, int(chosen))


def _sanitize(rows: npt.NDArray[np.float64], ids: Sequence[int]) -> npt.NDArray[np.float64]:
    bad = ~np.isfinite(rows).all(axis=1)
    if bad.any():
        logger.warning(f"⚠️ zeroed non-finite updates of clients {[ids[i] for i in np.flatnonzero(bad)]}")
        rows = rows.copy()
        rows[bad] = 0.0
    return rows


def _collect_updates(
    runtime: TrialRuntime,
    clients: List[ClientState],
    deltas: List[ParamVector],
    round_stream: RngStream,
    t: int,
) -> UpdateSet:
    transforms = runtime.config.server_config.transforms
    active = transforms.clip_tau is not None or transforms.dp is not None
    uploaded = [
        apply_transforms(delta, transforms, round_stream.derive("transform", client.id)) if active else delta
        for client, delta in zip(clients, deltas)
    ]
    rows = np.stack(uploaded)
    mask = np.array([client.is_malicious for client in clients], dtype=bool)
    ids = [client.id for client in clients]

    if runtime.adversary is not None and mask.any():
        seen = rows if runtime.config.adversary_sees_noisy else np.stack(deltas)
        view = AdversaryView(
            benign_updates=seen[~mask],
            malicious_slots=rows[mask],
            round=t,
            num_clients=len(clients),
            rng=round_stream.derive("adversary"),
            malicious_ids=[i for i, bad in zip(ids, mask) if bad],
        )
        runtime.adversary.on_local_round_end(view)
        rows[mask] = view.malicious_slots
    return UpdateSet.from_rows(_sanitize(rows, ids), mask, ids)


def run_round(
    runtime: TrialRuntime,
    server: ServerState,
    clients: List[ClientState],
    executor: Optional[Executor] = None,
    evaluate_now: bool = True,
) -> Tuple[ServerState, RoundRecord]:
    start = time.perf_counter()
    t = server.round
    round_stream = runtime.stream.derive("round", t)
    w0 = server.w.copy()
    w0.flags.writeable = False

    def local(client: ClientState) -> ParamVector:
        return client_local_round(
            client, w0, runtime.client_cfg, runtime.model, runtime.train, round_stream.derive("client", client.id)
        )

    if executor is None:
        with ThreadPoolExecutor(max_workers=min(resolve_threads(), len(clients))) as pool:
            deltas = list(pool.map(local, clients))
    else:
        deltas = list(executor.map(local, clients))

    updates = _collect_updates(runtime, clients, deltas, round_stream, t)
    agg_cfg = runtime.config.server_config.aggregator
    norm_history = server.norm_history
    clip_radius = None
    if agg_cfg.historical:
        norm_history = norm_history + tuple(float(x) for x in np.linalg.norm(updates.rows, axis=1))
        clip_radius = float(np.median(norm_history))
    ctx = AggregationContext(
        rng=round_stream.derive("aggregator"),
        assumed_f=runtime.config.num_malicious_clients,
        v0=server.cc_memory,
        clip_radius=clip_radius,
        power_iters=settings.power_iters,
    )
    agg_delta = aggregate(updates, agg_cfg, ctx)

    if np.all(np.isfinite(agg_delta)):
        stepped = server_step(server, agg_delta, runtime.server_cfg)
    else:
        stepped = replace(
            server, round=t + 1, divergent_rounds=server.divergent_rounds + 1, last_step_diverged=True
        )
    if stepped.last_step_diverged:
        logger.warning(f"⚠️ trial {runtime.spec.trial_id}: round {t + 1} diverged, step rejected")
        if runtime.config.abort_on_divergence:
            raise DivergenceError(f"non-finite server state at round {t + 1}")
    else:
        stepped = replace(stepped, cc_memory=agg_delta)
    stepped = replace(stepped, norm_history=norm_history)

    if evaluate_now:
        stepped = replace(stepped, test_acc=evaluate(runtime.model, stepped.w, runtime.test.as_batch()).accuracy)

    benign = [c for c in clients if not c.is_malicious] or clients
    train_loss = float(np.mean([c.last_loss for c in benign]))
    if stepped.last_step_diverged:
        train_loss = LOSS_CLAMP
    record = RoundRecord(
        round=t + 1,
        train_loss=clamp_loss(train_loss),
        test_acc=stepped.test_acc,
        elapsed_s=time.perf_counter() - start if settings.record_timing else 0.0,
    )
    return stepped, record


# ---------------------------------------------------------------------------- #
# Trials

def preset_client_config(run: str, cfg: ClientOptConfig) -> ClientOptConfig:
    """FEDSGD pins E_l=1 and η_l=1; FEDAVG keeps the configured local optimizer."""
    if run == "FEDSGD" and (cfg.local_steps != 1 or cfg.lr != 1.0):
        logger.info(f"🔧 FEDSGD preset: local_steps {cfg.local_steps}→1, lr {cfg.lr}→1.0")
        return cfg.model_copy(update={"local_steps": 1, "lr": 1.0})
    return cfg


def preset_server_config(run: str, cfg: ServerOptConfig) -> ServerOptConfig:
    """FEDAVG runs at unit global rate; server momentum is left as configured."""
    if run == "FEDAVG" and cfg.resolved_schedule() != [(0, 1.0)]:
        logger.info(f"🔧 FEDAVG preset: lr_schedule {cfg.resolved_schedule()}→[(0, 1.0)]")
        return cfg.model_copy(update={"lr": None, "lr_schedule": [(0, 1.0)]})
    return cfg


def _load_dataset(cfg: TrialConfig, stream: RngStream) -> Dataset:
    dataset = cfg.data_config.dataset
    if dataset.type == "csv":
        return load_csv(dataset.path)
    return synth_gaussian_mixture(
        dataset.num_classes, dataset.input_dim, dataset.per_class, dataset.sep, stream.derive("data")
    )


def build_trial(trial: TrialSpec) -> Tuple[TrialRuntime, ServerState, List[ClientState]]:
    cfg = trial.config
    root = trial.stream
    K, M = cfg.num_clients, cfg.num_malicious_clients
    if 2 * M >= K > 0 and M > 0:
        logger.warning(f"⚠️ trial {trial.trial_id}: M={M} is not below K/2={K / 2}")
    check_aggregator(cfg.server_config.aggregator, K, M)

    data = _load_dataset(cfg, root)
    test_fraction = cfg.data_config.test_fraction or settings.test_fraction
    train, test = train_test_split(data, test_fraction, root.derive("split"))
    partition_cfg = cfg.data_config.partition
    if partition_cfg.type == "dirichlet":
        partition = partition_dirichlet(train, K, partition_cfg.alpha, root.derive("partition"))
    else:
        partition = partition_iid(train, K, root.derive("partition"))

    model = ModelSpec(
        type=cfg.global_model.kind,
        hidden_dim=cfg.global_model.hidden_dim,
        activation=cfg.global_model.activation,
        input_dim=data.input_dim,
        num_classes=max(data.num_classes, 2) if cfg.global_model.kind != "linear" else data.num_classes,
    )
    w = init_params(model, root.derive("init"))

    client_cfg = ClientOptConfig(**cfg.client_config.model_dump(), batch_size=cfg.data_config.batch_size)
    client_cfg = preset_client_config(trial.run, client_cfg)

    clients = [
        ClientState(id=k, shard=partition.assignments[k], momentum_buf=np.zeros_like(w), is_malicious=k < M)
        for k in range(K)
    ]
    adversary = None
    if cfg.adversary_config is not None and M > 0:
        adversary = build_adversary(cfg.adversary_config, model.num_classes)
        adversary.on_algorithm_begin([c for c in clients if c.is_malicious])
    elif M > 0:
        logger.warning(f"⚠️ trial {trial.trial_id}: {M} malicious clients but no adversary_config")

    runtime = TrialRuntime(
        spec=trial,
        model=model,
        train=train,
        test=test,
        partition=partition,
        client_cfg=client_cfg,
        server_cfg=preset_server_config(trial.run, cfg.server_config.optimizer),
        adversary=adversary,
        eval_interval=cfg.eval_interval or settings.eval_interval,
    )
    server = replace(ServerState.initial(w), test_acc=evaluate(model, w, test.as_batch()).accuracy)
    return runtime, server, clients


def execute_trial(trial: TrialSpec, threads: Optional[int] = None) -> TrialOutcome:
    runtime, server, clients = build_trial(trial)
    records: List[RoundRecord] = []
    logger.info(f"🚀 trial {trial.trial_id} rep {trial.repetition}: {trial.run}, {trial.rounds} rounds")
    if trial.rounds > 0:
        workers = min(resolve_threads(threads), len(clients))
        with ThreadPoolExecutor(max_workers=workers) as pool:
            for t in range(trial.rounds):
                last = t == trial.rounds - 1
                server, record = run_round(
                    runtime, server, clients, pool, evaluate_now=last or (t + 1) % runtime.eval_interval == 0
                )
                records.append(record)
    return TrialOutcome(records, server, runtime, clients)


def run_trial(trial: TrialSpec, threads: Optional[int] = None) -> List[RoundRecord]:
    return execute_trial(trial, threads).records


# ---------------------------------------------------------------------------- #
# Snapshots

def save_snapshot(path: Union[str, Path], server: ServerState, clients: Sequence[ClientState]) -> None:
    np.savez(
        path,
        w=server.w,
        server_momentum=server.momentum_buf,
        cc_memory=server.cc_memory if server.cc_memory is not None else np.empty(0),
        has_cc_memory=np.array(server.cc_memory is not None),
        round=np.array(server.round),
        norm_history=np.array(server.norm_history, dtype=np.float64),
        divergent_rounds=np.array(server.divergent_rounds),
        client_momentum=np.stack([c.momentum_buf for c in clients]) if clients else np.empty((0, server.w.size)),
    )
    logger.info(f"📤 snapshot written to {path}")


def load_snapshot(path: Union[str, Path], clients: Sequence[ClientState] = ()) -> ServerState:
    """Restore the server state; client momentum buffers are written back in place."""
    with np.load(path) as archive:
        momentum = archive["client_momentum"]
        if clients and momentum.shape[0] != len(clients):
            raise DimensionError(f"snapshot holds {momentum.shape[0]} clients, got {len(clients)}")
        for client, buf in zip(clients, momentum):
            client.momentum_buf = buf.copy()
        return ServerState(
            w=archive["w"].copy(),
            momentum_buf=archive["server_momentum"].copy(),
            cc_memory=archive["cc_memory"].copy() if bool(archive["has_cc_memory"]) else None,
            round=int(archive["round"]),
            norm_history=tuple(float(x) for x in archive["norm_history"]),
            divergent_rounds=int(archive["divergent_rounds"]),
        )
