"""
Federated averaging: client sampling, local training, weight aggregation
and the server round loop.

Aggregation uses the Strategy pattern so alternative rules can be plugged
in through AggregatorFactory; only FedAvg ships.
"""

from __future__ import annotations

import logging
import time
from abc import ABC, abstractmethod
from enum import Enum
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict

from core import nn
from core.arch import ArchDescriptor, build
from core.data import Dataset, PartitionPlan, plan_partition
from core.errors import ArchitectureError, ConfigError, FederationError
from core.metrics import confusion, metrics_from_cm
from core.models import (
    ClientShard,
    ClientUpdateResult,
    ConfusionMatrix,
    FedConfig,
    FederationResult,
    ModelParams,
    RoundPlan,
    RoundRecord,
    TrafficSnapshot,
)

logger = logging.getLogger(__name__)

SAMPLE_STREAM = 10
BATCH_STREAM = 11

Clock = Callable[[], float]
EVAL_BATCH_SIZE = 256


def sample_clients(cfg: FedConfig, round_: int, seed: Optional[int] = None) -> RoundPlan:
    """m = max(floor(C*K), 1) distinct ranks drawn uniformly, deterministic in (seed, round)."""
    seed = cfg.seed if seed is None else seed
    ranks = np.arange(1, cfg.num_clients + 1)
    m = cfg.clients_per_round
    if m == cfg.num_clients:
        chosen = ranks
    else:
        rng = np.random.default_rng([seed, SAMPLE_STREAM, round_])
        chosen = np.sort(rng.choice(ranks, size=m, replace=False))
    return RoundPlan(round=round_, client_ids=[int(k) for k in chosen])


def make_batches(num_samples: int, batch_size: int, seed: int, round_: int, client_id: int) -> List[np.ndarray]:
    """
    Shuffled minibatches of local positions; the last batch may be smaller.

    Drawn once per round and replayed for every local epoch.
    """
    rng = np.random.default_rng([seed, BATCH_STREAM, round_, client_id])
    order = rng.permutation(num_samples)
    return [order[i:i + batch_size] for i in range(0, num_samples, batch_size)]


def train_epochs(
    model: nn.Sequential,
    optimizer: nn.SgdMomentum,
    features: np.ndarray,
    labels: np.ndarray,
    batches: Sequence[np.ndarray],
    epochs: int,
) -> float:
    """Run `epochs` passes over `batches`; returns the final epoch's sample-weighted mean loss."""
    epoch_loss = 0.0
    for _ in range(epochs):
        total = 0.0
        for batch in batches:
            y = labels[batch]
            logits = model.forward(features[batch], training=True)
            total += nn.cross_entropy(logits, y) * batch.size
            model.backward(y)
            optimizer.step(model)
        epoch_loss = total / max(sum(b.size for b in batches), 1)
    return epoch_loss


def client_update(
    model: nn.Sequential,
    dataset: Dataset,
    shard: ClientShard,
    w_global: ModelParams,
    cfg: FedConfig,
    round_: int,
    clock: Clock = time.perf_counter,
) -> ClientUpdateResult:
    """
    Local update of one client: load w_global, then E epochs of momentum SGD
    over minibatches of the shard. Velocity starts from zero every round.
    A zero learning rate also freezes batchnorm running statistics, so the
    returned weights equal w_global.

    Raises:
        FederationError: empty shard.
        ArchitectureError: w_global belongs to another architecture.
    """
    if shard.n_k == 0:
        raise FederationError(f"client {shard.client_id} has an empty shard")
    if w_global.arch_name != model.name or w_global.param_count != model.transmitted_count:
        raise ArchitectureError(
            f"client {shard.client_id} runs {model.name} ({model.transmitted_count} values), "
            f"received {w_global.arch_name} ({w_global.param_count} values)"
        )
    plan = cfg.plan_for(shard.client_id)
    start = clock()

    model.set_params(w_global)
    model.set_track_running_stats(plan.learning_rate > 0)
    optimizer = nn.SgdMomentum(plan.learning_rate, plan.momentum)
    features = dataset.features[shard.indices]
    labels = dataset.labels[shard.indices]
    batches = make_batches(shard.n_k, plan.batch_size, cfg.seed, round_, shard.client_id)
    loss = train_epochs(model, optimizer, features, labels, batches, plan.local_epochs)

    result = ClientUpdateResult(
        client_id=shard.client_id,
        round=round_,
        n_k=shard.n_k,
        params=model.get_params(),
        local_loss=loss,
        wall_time_s=max(clock() - start, 0.0),
    )
    logger.debug("Local update complete", extra=result.to_log_dict())
    return result


def evaluate(model: nn.Sequential, dataset: Dataset, batch_size: int = EVAL_BATCH_SIZE) -> Tuple[ConfusionMatrix, float]:
    """Inference-mode confusion matrix and mean cross-entropy over a dataset."""
    preds = np.zeros(dataset.num_samples, dtype=np.int64)
    total_loss = 0.0
    for start in range(0, dataset.num_samples, batch_size):
        x = dataset.features[start:start + batch_size]
        y = dataset.labels[start:start + batch_size]
        logits = model.forward(x, training=False)
        preds[start:start + batch_size] = logits.argmax(axis=1)
        total_loss += nn.cross_entropy(logits, y) * y.size
    cm = confusion(dataset.labels, preds, dataset.num_classes, dataset.class_names)
    return cm, total_loss / max(dataset.num_samples, 1)


class Aggregator(ABC):
    """Combines the client results of one round into the next global model."""

    @abstractmethod
    def aggregate(self, results: Sequence[ClientUpdateResult]) -> ModelParams:
        pass


class FedAvgAggregator(Aggregator):
    """w_{t+1} = sum_k (n_k / n) w_k, accumulated in float64 in client-id order."""

    def aggregate(self, results: Sequence[ClientUpdateResult]) -> ModelParams:
        if not results:
            raise FederationError("cannot aggregate an empty round")
        first = results[0].params
        for r in results[1:]:
            p = r.params
            if (p.arch_name, p.dtype, p.param_count) != (first.arch_name, first.dtype, first.param_count):
                raise FederationError(
                    "mixed architectures in one round",
                    {"expected": str(first), "client": r.client_id, "got": str(p)},
                )
        n = sum(r.n_k for r in results)
        if n <= 0:
            raise FederationError("total sample count is zero")

        acc = np.zeros(first.param_count, dtype=np.float64)
        for r in sorted(results, key=lambda r: r.client_id):
            acc += (r.n_k / n) * r.params.values.astype(np.float64)
        return ModelParams(arch_name=first.arch_name, dtype=first.dtype, values=acc)


class AggregatorType(str, Enum):
    """Available aggregation rules."""
    FEDAVG = "fedavg"


AGGREGATOR_MAP: Dict[AggregatorType, type[Aggregator]] = {
    AggregatorType.FEDAVG: FedAvgAggregator,
}


class AggregatorFactory:
    """Factory for creating aggregators."""

    @staticmethod
    def create_aggregator(aggregator_type: AggregatorType = AggregatorType.FEDAVG) -> Aggregator:
        implementation_class = AGGREGATOR_MAP.get(aggregator_type)
        if implementation_class:
            return implementation_class()
        raise ConfigError(f"Unknown aggregator: {aggregator_type}")

    @staticmethod
    def from_name(name: str) -> Aggregator:
        try:
            aggregator_type = AggregatorType(name.lower())
        except ValueError as e:
            raise ConfigError(
                f"Unknown aggregator: {name!r}", {"known": [a.value for a in AggregatorType]}
            ) from e
        return AggregatorFactory.create_aggregator(aggregator_type)


def aggregate(results: Sequence[ClientUpdateResult]) -> ModelParams:
    """FedAvg over one round's results."""
    return FedAvgAggregator().aggregate(results)


class FederationSession(BaseModel):
    """What a transport needs to bring clients up for a run."""

    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    cfg: FedConfig
    arch: ArchDescriptor
    dataset: Dataset
    partition: PartitionPlan


class Transport(ABC):
    """
    Server side of the weight exchange.

    open() admits all K clients and returns each rank's shard size from
    its JOIN; dispatch() broadcasts the global model to the sampled ranks
    and waits for every update (synchronous barrier); close() shuts the
    clients down.
    """

    @abstractmethod
    async def open(self, session: FederationSession) -> Dict[int, int]:
        pass

    @abstractmethod
    async def dispatch(self, round_: int, client_ids: Sequence[int], w_global: ModelParams) -> List[ClientUpdateResult]:
        pass

    @abstractmethod
    async def close(self) -> None:
        pass

    @abstractmethod
    def traffic(self) -> TrafficSnapshot:
        pass


RoundCallback = Callable[[RoundRecord], None]


def prepare_dataset(cfg: FedConfig, dataset: Dataset, arch: ArchDescriptor) -> Dataset:
    """Check class counts line up and reshape features to the architecture input."""
    if not arch.trainable:
        raise ArchitectureError(f"{arch.name} is a catalog-only descriptor and cannot be trained")
    if not cfg.num_classes == dataset.num_classes == arch.num_classes:
        raise ConfigError(
            "class count mismatch",
            {"config": cfg.num_classes, "dataset": dataset.num_classes, "arch": arch.num_classes},
        )
    return dataset.with_feature_shape(arch.input_shape)


def select_eval_split(dataset: Dataset, partition: PartitionPlan) -> Tuple[str, Dataset]:
    """Test split, else validation, else training data."""
    for name, indices in (("test", partition.split.test), ("val", partition.split.val), ("train", partition.split.train)):
        if indices.size:
            if name != "test":
                logger.warning("Test split is empty; evaluating on fallback split", extra={"eval_split": name})
            return name, dataset.subset(indices)
    raise FederationError("no samples to evaluate")


async def run_federation(
    cfg: FedConfig,
    dataset: Dataset,
    arch: ArchDescriptor,
    transport: Transport,
    clock: Clock = time.perf_counter,
    on_round: Optional[RoundCallback] = None,
) -> FederationResult:
    """
    Server loop: initialise W_0, then for each round sample, dispatch,
    collect, aggregate and validate. The final model is evaluated once.

    A failing client aborts the run; rounds are never partially aggregated.
    """
    dataset = prepare_dataset(cfg, dataset, arch)
    aggregator = AggregatorFactory.from_name(cfg.aggregator)
    partition = plan_partition(dataset, cfg.num_clients, cfg.split, cfg.seed)
    shard_sizes = {s.client_id: s.n_k for s in partition.shards}
    val_set = dataset.subset(partition.split.val) if partition.split.val.size else None

    model = build(arch, seed=cfg.seed, dtype=cfg.compute_dtype)
    w_global = model.get_params()
    session = FederationSession(cfg=cfg, arch=arch, dataset=dataset, partition=partition)

    logger.info(
        "Federation starting",
        extra={
            "arch": arch.name,
            "clients": cfg.num_clients,
            "clients_per_round": cfg.clients_per_round,
            "rounds": cfg.rounds,
            "compute_dtype": cfg.compute_dtype.value,
            "wire_dtype": cfg.wire_dtype.value,
            **partition.split.sizes(),
        },
    )
    if cfg.lossy_wire:
        logger.warning("Weights are narrowed to the wire dtype on every exchange")

    history: List[RoundRecord] = []
    try:
        joined = await transport.open(session)
        if joined != shard_sizes:
            raise FederationError(
                "joined clients do not match the partition",
                {"joined": joined, "expected": shard_sizes},
            )

        start = clock()
        for t in range(1, cfg.rounds + 1):
            round_start = clock()
            plan = sample_clients(cfg, t)
            logger.debug("Round planned", extra=plan.to_log_dict())

            results = await transport.dispatch(t, plan.client_ids, w_global)
            returned = sorted(r.client_id for r in results)
            if returned != sorted(plan.client_ids):
                raise FederationError(f"round {t}: expected updates from {plan.client_ids}, got {returned}")
            for r in results:
                if r.round != t or r.n_k != shard_sizes[r.client_id]:
                    raise FederationError(
                        f"round {t}: inconsistent update from client {r.client_id}",
                        r.to_log_dict(),
                    )

            w_global = aggregator.aggregate(results).astype(cfg.compute_dtype)
            n = sum(r.n_k for r in results)
            global_loss = sum(r.n_k * r.local_loss for r in results) / n

            val_loss = val_accuracy = None
            if val_set is not None:
                model.set_params(w_global)
                val_cm, val_loss = evaluate(model, val_set)
                val_accuracy = float(np.trace(val_cm.counts)) / max(val_cm.total, 1)

            record = RoundRecord(
                round=t,
                sampled=plan.client_ids,
                n_samples=n,
                global_loss=global_loss,
                val_loss=val_loss,
                val_accuracy=val_accuracy,
                traffic_bytes=transport.traffic().round_bytes(t),
                wall_time_s=max(clock() - round_start, 0.0),
            )
            history.append(record)
            logger.info("Round complete", extra=record.to_log_dict())
            if on_round is not None:
                on_round(record)
        training_time = max(clock() - start, 0.0)
    finally:
        await transport.close()

    eval_split, eval_set = select_eval_split(dataset, partition)
    model.set_params(w_global)
    cm, eval_loss = evaluate(model, eval_set)
    metrics = metrics_from_cm(
        cm,
        loss=history[-1].global_loss,
        training_time_min=training_time / 60.0,
        eval_loss=eval_loss,
    )
    logger.info("Federation finished", extra={"eval_split": eval_split, **metrics.to_log_dict()})

    return FederationResult(
        arch_name=arch.name,
        rounds=history,
        final_params=w_global,
        confusion=cm,
        metrics=metrics,
        eval_split=eval_split,
        traffic=transport.traffic(),
        training_time_s=training_time,
    )


__all__ = [
    "sample_clients",
    "make_batches",
    "train_epochs",
    "client_update",
    "evaluate",
    "aggregate",
    "Aggregator",
    "FedAvgAggregator",
    "AggregatorType",
    "AggregatorFactory",
    "FederationSession",
    "Transport",
    "run_federation",
    "prepare_dataset",
    "select_eval_split",
]
