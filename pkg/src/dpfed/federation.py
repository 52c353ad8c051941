"""Simulated federation: broadcast, local SGD, Laplace privatization, aggregation, budget update.

The server owns the global model. Clients are pure functions of their data,
the broadcast parameters, and a random stream derived from
``(master_seed, client_id, round)``, so they can run in any order or in
parallel; every reduction is done in client-id order.
"""
from __future__ import annotations

import enum
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Iterator, Sequence

import numpy as np

from dpfed import data as data_mod
from dpfed.budget import BudgetSchedule, learning_progress
from dpfed.config import FederationConfig
from dpfed.errors import DpfedError, ShapeError, TrainingAborted
from dpfed.mechanism import Clipped, PaperFaithful, PrivacySpec, release_parts
from dpfed.model import (
    EvalMetrics,
    MlpSpec,
    ParamVector,
    TrainingBatch,
    evaluate,
    init_params,
    loss,
    lr_decay,
    sgd_epoch,
)
from dpfed.seeding import derive_rng, derive_seed

TRACE_SCHEMA_VERSION = 1


class AggregationRule(str, enum.Enum):
    UNIFORM_MEAN = "uniform_mean"
    SAMPLE_WEIGHTED = "sample_weighted"


class ProgressSource(str, enum.Enum):
    VALIDATION_SPLIT = "validation_split"
    CLIENT_WEIGHTED_TRAIN_LOSS = "client_weighted_train_loss"


@dataclass(frozen=True)
class ClientState:
    client_id: int
    data: TrainingBatch
    local_epochs: int = 1
    batch_size: int = 16
    master_seed: int = 0

    def __post_init__(self):
        if len(self.data) == 0:
            raise ValueError(f"client {self.client_id} has an empty dataset")
        if self.local_epochs < 1 or self.batch_size < 1:
            raise ValueError("local_epochs and batch_size must be positive")

    def shuffle_rng(self, round_index: int) -> np.random.Generator:
        return derive_rng(self.master_seed, "shuffle", self.client_id, round_index)

    def noise_rng(self, round_index: int) -> np.random.Generator:
        return derive_rng(self.master_seed, "noise", self.client_id, round_index)


@dataclass(frozen=True)
class ClientUpdate:
    client_id: int
    delta: ParamVector
    num_samples: int
    train_loss: float
    local_params: ParamVector | None = None


@dataclass(frozen=True)
class RoundRecord:
    round: int
    epsilon_round: float | None
    progress: float
    global_loss: float
    sensitivity_per_client: tuple[float, ...]
    noise_l2_per_client: tuple[float, ...]
    metrics: EvalMetrics
    lr: float
    wall_time_ms: int
    budget_remaining: float | None

    def to_dict(self) -> dict:
        return {
            "schema_version": TRACE_SCHEMA_VERSION,
            "round": self.round,
            "epsilon_round": self.epsilon_round,
            "progress": self.progress,
            "global_loss": self.global_loss,
            "sensitivity_per_client": list(self.sensitivity_per_client),
            "noise_l2_per_client": list(self.noise_l2_per_client),
            "metrics": self.metrics.as_dict(),
            "lr": self.lr,
            "wall_time_ms": self.wall_time_ms,
            "budget_remaining": self.budget_remaining,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "RoundRecord":
        return cls(
            round=d["round"],
            epsilon_round=d["epsilon_round"],
            progress=d["progress"],
            global_loss=d["global_loss"],
            sensitivity_per_client=tuple(d["sensitivity_per_client"]),
            noise_l2_per_client=tuple(d["noise_l2_per_client"]),
            metrics=EvalMetrics(**d["metrics"]),
            lr=d["lr"],
            wall_time_ms=d["wall_time_ms"],
            budget_remaining=d["budget_remaining"],
        )


RECORD_FIELDS = frozenset(RoundRecord.__dataclass_fields__) | {"schema_version"}


@dataclass(frozen=True)
class RoundSettings:
    base_lr: float = 0.1
    decay: float = 0.0
    aggregation: AggregationRule = AggregationRule.UNIFORM_MEAN
    progress_source: ProgressSource = ProgressSource.VALIDATION_SPLIT
    master_seed: int = 0
    workers: int = 1
    record_wall_time: bool = False


@dataclass(frozen=True)
class ServerState:
    params: ParamVector
    prev_loss: float
    evaluation: TrainingBatch
    validation: TrainingBatch | None = None
    settings: RoundSettings = field(default_factory=RoundSettings)


def local_update(
    client: ClientState,
    global_params: ParamVector,
    lr: float,
    round_index: int = 1,
) -> ClientUpdate:
    """Run ``client.local_epochs`` of shuffled mini-batch SGD from ``global_params``."""
    if lr < 0:
        raise ValueError(f"learning rate must be non-negative, got {lr}")
    params = global_params
    if lr > 0:
        rng = client.shuffle_rng(round_index)
        for _ in range(client.local_epochs):
            params = sgd_epoch(params, client.data, lr, client.batch_size, rng)
    delta = params.with_values(params.values - global_params.values)
    return ClientUpdate(
        client_id=client.client_id,
        delta=delta,
        num_samples=len(client.data),
        train_loss=loss(params, client.data),
        local_params=params,
    )


def _weights(counts: Sequence[int], rule: AggregationRule) -> list[float]:
    rule = AggregationRule(rule)
    if rule is AggregationRule.UNIFORM_MEAN:
        return [1.0 / len(counts)] * len(counts)
    total = sum(counts)
    if total <= 0:
        raise ValueError("sample-weighted aggregation needs positive sample counts")
    return [c / total for c in counts]


def _combine(vectors: Sequence[ParamVector], weights: Sequence[float]) -> ParamVector:
    first = vectors[0]
    for v in vectors[1:]:
        if not first.same_layout(v):
            raise ShapeError("client updates have different layouts")
    acc = weights[0] * first.values
    for w, v in zip(weights[1:], vectors[1:]):
        acc = acc + w * v.values
    return first.with_values(acc)


def _ordered(updates: Sequence[ClientUpdate]) -> list[ClientUpdate]:
    if not updates:
        raise ValueError("nothing to aggregate")
    ordered = sorted(updates, key=lambda u: u.client_id)
    ids = [u.client_id for u in ordered]
    if len(set(ids)) != len(ids):
        raise ValueError(f"duplicate client ids {ids}")
    return ordered


def aggregate(updates: Sequence[ClientUpdate], rule: AggregationRule = AggregationRule.UNIFORM_MEAN) -> ParamVector:
    """Uniform or sample-weighted mean of the updates' deltas, reduced in client-id order."""
    ordered = _ordered(updates)
    return _combine([u.delta for u in ordered], _weights([u.num_samples for u in ordered], rule))


def aggregate_models(updates: Sequence[ClientUpdate], rule: AggregationRule = AggregationRule.UNIFORM_MEAN) -> ParamVector:
    """Same weighting as :func:`aggregate`, applied to the clients' (noisy) local models.

    Because the weights sum to one this equals ``global + aggregate(deltas)``,
    but it avoids the rounding of ``global + (local - global)``.
    """
    ordered = _ordered(updates)
    if any(u.local_params is None for u in ordered):
        raise ValueError("aggregate_models needs local_params on every update")
    return _combine([u.local_params for u in ordered], _weights([u.num_samples for u in ordered], rule))


def _global_loss(params: ParamVector, state: ServerState, clients: Sequence[ClientState]) -> float:
    source = ProgressSource(state.settings.progress_source)
    if source is ProgressSource.VALIDATION_SPLIT:
        if state.validation is None or len(state.validation) == 0:
            raise ValueError("validation split is empty")
        return loss(params, state.validation)
    total = sum(len(c.data) for c in clients)
    return math.fsum(len(c.data) * loss(params, c.data) for c in clients) / total


def _run_clients(clients, params, lr, round_index, workers) -> list[ClientUpdate]:
    if workers <= 1 or len(clients) == 1:
        return [local_update(c, params, lr, round_index) for c in clients]
    with ThreadPoolExecutor(max_workers=min(workers, len(clients))) as pool:
        return list(pool.map(lambda c: local_update(c, params, lr, round_index), clients))


def run_round(
    state: ServerState,
    clients: Sequence[ClientState],
    schedule: BudgetSchedule | None,
    privacy: PrivacySpec,
    round_index: int,
) -> tuple[ParamVector, RoundRecord]:
    """One communication round; ``schedule`` is updated in place."""
    started = time.perf_counter()
    settings = state.settings
    clients = sorted(clients, key=lambda c: c.client_id)
    if len({c.client_id for c in clients}) != len(clients):
        raise ValueError("client ids must be unique")

    eps_t = None
    if privacy.enabled:
        if schedule is None:
            raise ValueError("privacy is enabled but no budget schedule was given")
        eps_t = schedule.allocate(round_index)

    lr = lr_decay(settings.base_lr, settings.decay, round_index - 1)
    updates = _run_clients(clients, state.params, lr, round_index, settings.workers)

    released, sensitivities, noise_norms = [], [], []
    for client, upd in zip(clients, updates):
        base, noise, receipt = release_parts(upd.delta, eps_t, privacy, client.noise_rng(round_index))
        model = upd.local_params if base is upd.delta else state.params.with_values(state.params.values + base.values)
        if noise is not None:
            model = model.with_values(model.values + noise)
        released.append(ClientUpdate(upd.client_id, base, upd.num_samples, upd.train_loss, model))
        sensitivities.append(receipt.sensitivity)
        noise_norms.append(receipt.noise_l2)

    new_params = aggregate_models(released, settings.aggregation)
    new_loss = _global_loss(new_params, state, clients)
    progress = learning_progress(state.prev_loss, new_loss) if state.prev_loss > 0 else 0.0
    if schedule is not None:
        schedule.observe(progress)
    metrics = evaluate(new_params, state.evaluation)
    elapsed = int((time.perf_counter() - started) * 1000) if settings.record_wall_time else 0
    record = RoundRecord(
        round=round_index,
        epsilon_round=eps_t,
        progress=progress,
        global_loss=new_loss,
        sensitivity_per_client=tuple(sensitivities),
        noise_l2_per_client=tuple(noise_norms),
        metrics=metrics,
        lr=lr,
        wall_time_ms=elapsed,
        budget_remaining=schedule.remaining if schedule is not None else None,
    )
    return new_params, record


@dataclass
class Federation:
    """Everything a run needs, prepared deterministically from a config."""

    config: FederationConfig
    dataset: data_mod.Dataset
    spec: MlpSpec
    clients: list[ClientState]
    shards: list[np.ndarray]
    client_indices: list[np.ndarray]
    client_pool: np.ndarray
    evaluation: TrainingBatch
    validation: TrainingBatch | None
    warm_start: TrainingBatch | None
    privacy: PrivacySpec
    settings: RoundSettings


def privacy_spec(config: FederationConfig) -> PrivacySpec:
    p = config.privacy
    policy = Clipped(p.clip_norm) if p.policy == "clipped" else PaperFaithful()
    return PrivacySpec(p.epsilon, p.delta, policy, p.enabled)


def load_dataset(config: FederationConfig) -> data_mod.Dataset:
    d = config.data
    if d.source == "blobs":
        seed = d.seed if d.seed is not None else derive_seed(config.master_seed, "data")
        return data_mod.generate_blobs(d.classes, d.samples_per_class, d.feature_dim, d.spread, seed)
    if d.source == "csv":
        return data_mod.load_csv(config.resolve(d.path), d.label_column)
    labels = config.resolve(d.labels_path).read_text().split()
    return data_mod.load_gray8(config.resolve(d.path), labels, equalize=d.equalize)


def _split(indices: np.ndarray, fraction: float, rng: np.random.Generator, keep_min: int = 0):
    """(held-out, rest), both sorted; ``rest`` keeps at least ``keep_min`` items."""
    n_out = min(int(math.floor(fraction * indices.size)), max(indices.size - keep_min, 0))
    perm = rng.permutation(indices)
    return np.sort(perm[:n_out]), np.sort(perm[n_out:])


def prepare_federation(config: FederationConfig, dataset: data_mod.Dataset | None = None) -> Federation:
    seed = config.master_seed
    if dataset is None:
        dataset = load_dataset(config)
    all_idx = np.arange(len(dataset))
    test_idx, pool = _split(all_idx, config.data.test_fraction, derive_rng(seed, "test_split"), keep_min=1)
    if config.data.normalize:
        fitted = data_mod.normalize(dataset.subset(pool))
        dataset = data_mod.normalize(dataset, fitted.standardizer)

    warm_idx, client_pool = _split(pool, config.warm_start.fraction, derive_rng(seed, "warm_split"), keep_min=1)
    plan = data_mod.PartitionPlan(
        config.partition.mode,
        config.partition.clients,
        derive_seed(seed, "partition"),
        config.partition.concentration,
    )
    shards = [client_pool[s] for s in data_mod.partition(dataset.labels[client_pool], plan)]

    t = config.training
    source = ProgressSource(t.progress_source)
    clients, client_indices, val_parts = [], [], []
    for cid, shard in enumerate(shards):
        train = shard
        if source is ProgressSource.VALIDATION_SPLIT:
            val, train = _split(shard, t.validation_fraction, derive_rng(seed, "validation_split", cid), keep_min=1)
            val_parts.append(val)
        clients.append(ClientState(cid, dataset.batch(train), t.local_epochs, t.batch_size, seed))
        client_indices.append(train)

    validation = None
    if val_parts:
        validation = dataset.batch(np.concatenate(val_parts))
        if len(validation) == 0:
            raise ValueError("validation split is empty; raise training.validation_fraction or add data")
    evaluation = dataset.batch(test_idx) if test_idx.size else dataset.batch(np.concatenate(client_indices))
    spec = MlpSpec((dataset.feature_dim, *config.model.hidden, dataset.class_count))
    settings = RoundSettings(
        base_lr=t.base_lr,
        decay=t.decay,
        aggregation=AggregationRule(t.aggregation),
        progress_source=source,
        master_seed=seed,
        workers=t.workers,
        record_wall_time=config.output.record_wall_time,
    )
    return Federation(
        config=config,
        dataset=dataset,
        spec=spec,
        clients=clients,
        shards=shards,
        client_indices=client_indices,
        client_pool=client_pool,
        evaluation=evaluation,
        validation=validation,
        warm_start=dataset.batch(warm_idx) if warm_idx.size else None,
        privacy=privacy_spec(config),
        settings=settings,
    )


@dataclass
class TrainingResult:
    params: ParamVector
    trace: list[RoundRecord]
    schedule: BudgetSchedule | None
    federation: Federation

    def __iter__(self) -> Iterator:
        return iter((self.params, self.trace))


def initial_params(fed: Federation) -> ParamVector:
    cfg = fed.config
    params = init_params(fed.spec, derive_seed(cfg.master_seed, "init"))
    if fed.warm_start is not None:
        for epoch in range(cfg.warm_start.epochs):
            rng = derive_rng(cfg.master_seed, "warm_start", epoch)
            params = sgd_epoch(params, fed.warm_start, cfg.training.base_lr, cfg.training.batch_size, rng)
    return params


def run_training(
    config: FederationConfig,
    on_round: Callable[[RoundRecord, ParamVector], None] | None = None,
    federation: Federation | None = None,
) -> TrainingResult:
    """Run all rounds (or until early stopping) and return final parameters and the trace.

    On any failure a :class:`TrainingAborted` carrying the completed records is raised.
    """
    fed = federation if federation is not None else prepare_federation(config)
    t = config.training
    params = initial_params(fed)
    state = ServerState(params, 0.0, fed.evaluation, fed.validation, fed.settings)
    state = ServerState(params, _global_loss(params, state, fed.clients), fed.evaluation, fed.validation, fed.settings)
    schedule = None
    if fed.privacy.enabled:
        schedule = BudgetSchedule(config.privacy.epsilon, t.rounds, config.privacy.progress_floor)

    trace: list[RoundRecord] = []
    quiet = 0
    for round_index in range(1, t.rounds + 1):
        try:
            params, record = run_round(state, fed.clients, schedule, fed.privacy, round_index)
        except (DpfedError, ValueError, ArithmeticError) as exc:
            raise TrainingAborted(f"round {round_index} failed: {exc}", trace, round_index) from exc
        trace.append(record)
        if on_round is not None:
            on_round(record, params)
        state = ServerState(params, record.global_loss, fed.evaluation, fed.validation, fed.settings)
        if t.early_stop_threshold is not None:
            quiet = quiet + 1 if abs(record.progress) < t.early_stop_threshold else 0
            if quiet >= t.early_stop_patience:
                break
    return TrainingResult(params, trace, schedule, fed)
