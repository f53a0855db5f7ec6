"""
Orchestration service: turns a RunConfig into federation runs and reports.

One FederationService backs one process role. simulate runs the seeded
repetitions over the in-process transport, serve and join run the two
halves of a TCP federation, and partition writes shard manifests only.
The service also keeps the live status the monitor API reports.
"""

import asyncio
import json
import logging
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from contextlib import AsyncExitStack
from pathlib import Path
from typing import List, Optional, Tuple

from pydantic import BaseModel

from app.__version__ import __version__
from app.api.schemas import FederationPhase, RunManifest, StatusResponse
from app.config import DatasetSource, RunConfig
from app.services.client import FederatedClient
from app.services.observability import rank_ctx, run_id_ctx, track_final_metrics, track_round_metrics
from app.services.reporting import RunSummary, summarize_result, write_run_report, write_summary
from app.services.transport import ServerTransport, SimulatedTransport, TcpServerTransport, run_tcp_client
from app.services.wire import run_traffic
from core.arch import ArchDescriptor, resolve_arch
from core.data import Dataset, generate_blobs, load_csv, plan_partition
from core.errors import FedLeafError
from core.federation import Clock, prepare_dataset, run_federation
from core.models import FedConfig, FederationResult, RoundRecord, TrafficSnapshot

logger = logging.getLogger(__name__)


class ExperimentResult(BaseModel):
    """Where a simulate call left its files."""
    experiment_dir: Path
    run_dirs: List[Path]
    runs: List[RunSummary]


class FederationService:
    """
    Runs federations for one RunConfig.

    Args:
        run_cfg: Validated run configuration.
        clock: Time source for training and wall-time fields; a fixed clock
            makes reports byte-identical.
    """

    def __init__(self, run_cfg: RunConfig, clock: Optional[Clock] = None):
        self.run_cfg = run_cfg
        self.clock: Clock = clock or time.perf_counter
        self._lock = threading.Lock()
        self._status = StatusResponse(
            arch=run_cfg.arch,
            total_rounds=run_cfg.rounds,
            expected_clients=run_cfg.num_clients,
        )
        self._transport: Optional[ServerTransport] = None

    # ------------------------------------------------------------------
    # Status
    # ------------------------------------------------------------------

    def status(self) -> StatusResponse:
        with self._lock:
            current = self._status
            transport = self._transport
        if transport is None:
            return current
        update = {"connected_clients": len(transport.admitted)}
        if current.phase == FederationPhase.WAITING_FOR_CLIENTS and len(transport.admitted) >= current.expected_clients:
            update["phase"] = FederationPhase.TRAINING
        return current.model_copy(update=update)

    def _set_status(self, **fields) -> None:
        with self._lock:
            self._status = self._status.model_copy(update=fields)

    def _round_hook(self, transport: ServerTransport):
        def on_round(record: RoundRecord) -> None:
            track_round_metrics(record)
            self._set_status(
                phase=FederationPhase.TRAINING,
                current_round=record.round,
                last_val_accuracy=record.val_accuracy,
                last_global_loss=record.global_loss,
                traffic_bytes=transport.traffic().total_bytes,
            )

        return on_round

    # ------------------------------------------------------------------
    # Inputs
    # ------------------------------------------------------------------

    def load_inputs(self, seed: Optional[int] = None) -> Tuple[Dataset, ArchDescriptor]:
        """
        Dataset and architecture for this run.

        Blobs take their dimension from the architecture input for image
        models and from blob_dim for the MLP; CSV data sets the MLP input
        width from the file.
        """
        cfg = self.run_cfg
        seed = cfg.seed if seed is None else seed

        if cfg.dataset == DatasetSource.CSV:
            dataset = load_csv(cfg.csv_path)
            input_shape = dataset.feature_shape if cfg.arch == "tiny_mlp" else None
            arch = resolve_arch(cfg.arch, num_classes=cfg.num_classes, input_shape=input_shape)
            return dataset, arch

        if cfg.arch == "tiny_mlp":
            arch = resolve_arch(cfg.arch, num_classes=cfg.num_classes, input_shape=(cfg.blob_dim,))
        else:
            arch = resolve_arch(cfg.arch, num_classes=cfg.num_classes)
        dataset = generate_blobs(
            num_classes=cfg.num_classes,
            counts=cfg.blob_counts,
            dim=arch.input_size,
            separation=cfg.blob_separation,
            seed=seed,
        )
        return dataset, arch

    # ------------------------------------------------------------------
    # Reports
    # ------------------------------------------------------------------

    def experiment_dir(self, arch: ArchDescriptor) -> Path:
        cfg = self.run_cfg
        return Path(cfg.output_dir) / f"{arch.name}-k{cfg.num_clients}-seed{cfg.seed}"

    def _manifest(
        self,
        run_id: str,
        repetition: int,
        cfg: FedConfig,
        arch: ArchDescriptor,
        dataset: Dataset,
        result: FederationResult,
    ) -> RunManifest:
        plan = plan_partition(prepare_dataset(cfg, dataset, arch), cfg.num_clients, cfg.split, cfg.seed)
        config = self.run_cfg.to_manifest()
        config["seed"] = cfg.seed
        predicted = run_traffic(arch, cfg)
        if predicted != result.traffic.total_bytes:
            logger.warning(
                "Metered traffic differs from prediction",
                extra={"predicted": predicted, "metered": result.traffic.total_bytes},
            )
        return RunManifest(
            run_id=run_id,
            version=__version__,
            seed=cfg.seed,
            repetition=repetition,
            config=config,
            arch=arch.to_manifest(),
            class_names=list(dataset.class_names),
            partition=plan.to_manifest(include_indices=False),
            compute_dtype=cfg.compute_dtype.value,
            wire_dtype=cfg.wire_dtype.value,
            lossy_wire=cfg.lossy_wire,
            eval_split=result.eval_split,
            predicted_traffic_bytes=predicted,
            metered_traffic_bytes=result.traffic.total_bytes,
        )

    def _finish_run(
        self,
        run_dir: Path,
        run_id: str,
        repetition: int,
        cfg: FedConfig,
        arch: ArchDescriptor,
        dataset: Dataset,
        result: FederationResult,
    ) -> RunSummary:
        track_final_metrics(result.metrics)
        manifest = self._manifest(run_id, repetition, cfg, arch, dataset, result)
        write_run_report(run_dir, manifest, result)
        return summarize_result(run_id, cfg.seed, result)

    # ------------------------------------------------------------------
    # simulate
    # ------------------------------------------------------------------

    async def _simulate_once(self, repetition: int, seed: int, experiment_dir: Path) -> Tuple[Path, RunSummary]:
        dataset, arch = self.load_inputs(seed)
        cfg = self.run_cfg.fed_config(seed=seed)
        run_id = f"run{repetition:02d}-seed{seed}"
        run_id_ctx.set(f"{arch.name}-{run_id}")
        rank_ctx.set(0)

        transport = SimulatedTransport(clock=self.clock)
        with self._lock:
            self._transport = transport
        self._set_status(run_id=run_id, phase=FederationPhase.WAITING_FOR_CLIENTS, arch=arch.name, current_round=0)

        result = await run_federation(
            cfg, dataset, arch, transport, clock=self.clock, on_round=self._round_hook(transport)
        )
        self._set_status(phase=FederationPhase.EVALUATING)
        run_dir = experiment_dir / run_id
        summary = self._finish_run(run_dir, run_id, repetition, cfg, arch, dataset, result)
        return run_dir, summary

    def _simulate_in_thread(self, repetition: int, seed: int, experiment_dir: Path) -> Tuple[Path, RunSummary]:
        return asyncio.run(self._simulate_once(repetition, seed, experiment_dir))

    async def simulate_async(self) -> ExperimentResult:
        """Run every repetition (seed + i) and write per-run and summary reports."""
        cfg = self.run_cfg
        _, arch = self.load_inputs()
        experiment_dir = self.experiment_dir(arch)
        seeds = cfg.repetition_seeds()
        logger.info(
            "Simulation starting",
            extra={"arch": arch.name, "repetitions": cfg.repetitions, "workers": cfg.workers},
        )

        async with AsyncExitStack() as stack:
            if cfg.monitor_port is not None:
                from app.monitor import MonitorServer

                await stack.enter_async_context(MonitorServer(self, cfg.monitor_port))
            try:
                if cfg.workers == 1:
                    outcomes = [await self._simulate_once(i, s, experiment_dir) for i, s in enumerate(seeds)]
                else:
                    loop = asyncio.get_running_loop()
                    with ThreadPoolExecutor(max_workers=cfg.workers, thread_name_prefix="fedleaf-rep") as pool:
                        outcomes = await asyncio.gather(
                            *(
                                loop.run_in_executor(pool, self._simulate_in_thread, i, s, experiment_dir)
                                for i, s in enumerate(seeds)
                            )
                        )
            except FedLeafError as e:
                self._set_status(phase=FederationPhase.FAILED, error=e.message)
                raise

        run_dirs = [d for d, _ in outcomes]
        runs = [r for _, r in outcomes]
        write_summary(experiment_dir, runs)
        self._set_status(phase=FederationPhase.FINISHED)
        logger.info("Simulation finished", extra={"experiment_dir": str(experiment_dir), "runs": len(runs)})
        return ExperimentResult(experiment_dir=experiment_dir, run_dirs=run_dirs, runs=runs)

    def simulate(self) -> ExperimentResult:
        return asyncio.run(self.simulate_async())

    # ------------------------------------------------------------------
    # TCP server / client
    # ------------------------------------------------------------------

    async def serve(self, transport: Optional[TcpServerTransport] = None) -> Path:
        """Rank 0 of a TCP federation: wait for K clients, train, write the run report."""
        cfg = self.run_cfg.fed_config()
        dataset, arch = self.load_inputs()
        run_id = f"run00-seed{cfg.seed}"
        run_id_ctx.set(f"{arch.name}-{run_id}")
        rank_ctx.set(0)

        transport = transport or TcpServerTransport(self.run_cfg.host, self.run_cfg.port)
        with self._lock:
            self._transport = transport
        self._set_status(run_id=run_id, phase=FederationPhase.WAITING_FOR_CLIENTS, arch=arch.name)

        async with AsyncExitStack() as stack:
            if self.run_cfg.monitor_port is not None:
                from app.monitor import MonitorServer

                await stack.enter_async_context(MonitorServer(self, self.run_cfg.monitor_port))
            try:
                result = await run_federation(
                    cfg, dataset, arch, transport, clock=self.clock, on_round=self._round_hook(transport)
                )
            except FedLeafError as e:
                self._set_status(phase=FederationPhase.FAILED, error=e.message)
                raise

        self._set_status(phase=FederationPhase.EVALUATING)
        experiment_dir = self.experiment_dir(arch)
        run_dir = experiment_dir / run_id
        summary = self._finish_run(run_dir, run_id, 0, cfg, arch, dataset, result)
        write_summary(experiment_dir, [summary])
        self._set_status(phase=FederationPhase.FINISHED)
        return run_dir

    def build_client(self) -> FederatedClient:
        """The FederatedClient for this process's rank, holding shard rank-1."""
        cfg = self.run_cfg.fed_config()
        dataset, arch = self.load_inputs()
        dataset = prepare_dataset(cfg, dataset, arch)
        plan = plan_partition(dataset, cfg.num_clients, cfg.split, cfg.seed)
        rank = self.run_cfg.rank
        return FederatedClient(rank, cfg, arch, dataset, plan.shards[rank - 1], clock=self.clock)

    async def join(self) -> TrafficSnapshot:
        """Rank k of a TCP federation: connect, train until SHUTDOWN."""
        rank = self.run_cfg.rank
        rank_ctx.set(rank)
        client = self.build_client()
        run_id_ctx.set(f"{client.arch.name}-run00-seed{client.cfg.seed}")
        logger.info("Client connecting", extra={"client_rank": rank, "host": self.run_cfg.host, "port": self.run_cfg.port})
        snapshot = await run_tcp_client(client, self.run_cfg.host, self.run_cfg.port)
        logger.info(
            "Client finished",
            extra={"client_rank": rank, "rounds_trained": client.rounds_trained, "traffic_bytes": snapshot.total_bytes},
        )
        return snapshot

    # ------------------------------------------------------------------
    # partition
    # ------------------------------------------------------------------

    def partition(self) -> Path:
        """Write partition.json (split sizes, class order, shard indices) without training."""
        cfg = self.run_cfg.fed_config()
        dataset, arch = self.load_inputs()
        plan = plan_partition(prepare_dataset(cfg, dataset, arch), cfg.num_clients, cfg.split, cfg.seed)
        out_dir = self.experiment_dir(arch)
        out_dir.mkdir(parents=True, exist_ok=True)
        path = out_dir / "partition.json"
        path.write_text(json.dumps(plan.to_manifest(include_indices=True), indent=2, sort_keys=True) + "\n", encoding="utf-8")
        logger.info("Partition written", extra={"path": str(path), **plan.split.sizes()})
        return path


__all__ = ["FederationService", "ExperimentResult"]
