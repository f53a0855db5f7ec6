"""
Client-side protocol handler, shared by the simulated and TCP backends.
"""

import logging
import time
from typing import List, Optional

from app.services.wire import (
    Frame,
    MsgType,
    deserialize_params,
    error_frame,
    eval_report_frame,
    join_frame,
    model_frame,
    parse_error,
)
from core.arch import ArchDescriptor, build
from core.data import Dataset
from core.errors import FedLeafError, FederationError, ProtocolError
from core.federation import Clock, client_update
from core.models import ClientShard, FedConfig

logger = logging.getLogger(__name__)


class FederatedClient:
    """
    Holds one shard and a local model; turns each GLOBAL_MODEL frame into a
    LOCAL_UPDATE plus an EVAL_REPORT.

    A local training failure is answered with an ERROR frame and ends the
    client's session.
    """

    def __init__(
        self,
        rank: int,
        cfg: FedConfig,
        arch: ArchDescriptor,
        dataset: Dataset,
        shard: ClientShard,
        clock: Optional[Clock] = None,
    ):
        if shard.client_id != rank:
            raise FederationError(f"rank {rank} was handed shard {shard.client_id}")
        self.rank = rank
        self.cfg = cfg
        self.arch = arch
        self.dataset = dataset
        self.shard = shard
        self.clock = clock or time.perf_counter
        self.model = build(arch, seed=cfg.seed, dtype=cfg.compute_dtype)
        self.finished = False
        self.rounds_trained = 0

    def join_frame(self) -> Frame:
        return join_frame(self.rank, self.cfg.world_size, self.shard.n_k)

    def handle(self, frame: Frame) -> List[Frame]:
        """Process one server frame; returns the frames to send back."""
        if frame.msg_type == MsgType.GLOBAL_MODEL:
            return self._train(frame)
        if frame.msg_type == MsgType.SHUTDOWN:
            self.finished = True
            logger.info("Shutdown received", extra={"client_rank": self.rank, "rounds_trained": self.rounds_trained})
            return []
        if frame.msg_type == MsgType.ERROR:
            self.finished = True
            raise FederationError(f"server rejected client {self.rank}: {parse_error(frame)}")
        raise ProtocolError(f"client {self.rank} cannot handle {frame.msg_type.name}")

    def _train(self, frame: Frame) -> List[Frame]:
        try:
            w_global = deserialize_params(
                frame.payload, frame.dtype, self.arch.name, expected_count=self.arch.transmitted_count
            )
            result = client_update(
                self.model, self.dataset, self.shard, w_global, self.cfg, frame.round, clock=self.clock
            )
        except FedLeafError as e:
            self.finished = True
            logger.error(
                "Local update failed",
                extra={"client_rank": self.rank, "error_code": e.code, "reason": e.message},
            )
            return [error_frame(f"{e.code}: {e.message}")]

        self.rounds_trained += 1
        return [
            model_frame(MsgType.LOCAL_UPDATE, frame.round, result.params, self.cfg.wire_dtype, result.n_k),
            eval_report_frame(frame.round, result.local_loss, result.wall_time_s, result.n_k),
        ]


__all__ = ["FederatedClient"]
