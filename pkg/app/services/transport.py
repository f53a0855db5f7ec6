"""
Weight-exchange backends.

Both backends implement core.federation.Transport over the same frames and
share JOIN admission, the per-round exchange and the client protocol code:

- SimulatedTransport: in-process and strictly sequential. Every frame is
  encoded to bytes and decoded on the far side, so both endpoints meter
  exactly what a socket would carry.
- TcpServerTransport: asyncio streams, one handler per client, rounds
  dispatched concurrently with asyncio.gather.

Frames are metered only after they decode cleanly; a rejected frame never
touches the counters.
"""

import asyncio
import logging
import threading
from abc import abstractmethod
from collections import defaultdict, deque
from enum import Enum
from typing import Deque, Dict, List, Optional, Sequence

from app.config import settings
from app.services import observability
from app.services.client import FederatedClient
from app.services.wire import (
    HEADER_SIZE,
    Frame,
    MsgType,
    decode_header,
    deserialize_params,
    error_frame,
    model_frame,
    parse_error,
    parse_eval_report,
    parse_join,
    shutdown_frame,
)
from core.errors import FederationError, ProtocolError
from core.federation import Clock, FederationSession, Transport
from core.models import ClientUpdateResult, ModelParams, TrafficSnapshot

logger = logging.getLogger(__name__)

MAX_PAYLOAD_BYTES = 2**31


class Direction(str, Enum):
    DOWNLINK = "downlink"  # server -> client
    UPLINK = "uplink"      # client -> server


class TrafficMeter:
    """Per-round, per-direction byte counters for one endpoint; updates are atomic."""

    def __init__(self, role: str = "server"):
        self.role = role
        self._lock = threading.Lock()
        self._per_round: Dict[int, int] = defaultdict(int)
        self._by_direction: Dict[Direction, int] = defaultdict(int)
        self._messages: List[int] = []

    def record(self, frame: Frame, direction: Direction) -> None:
        nbytes = frame.size
        with self._lock:
            self._per_round[frame.meter_round] += nbytes
            self._by_direction[direction] += nbytes
            self._messages.append(nbytes)
        observability.track_frame(self.role, direction.value, frame.msg_type.name, nbytes)
        logger.debug(
            "Frame metered",
            extra={"role": self.role, "direction": direction.value, "frame": str(frame), "bytes": nbytes},
        )

    @property
    def message_sizes(self) -> List[int]:
        with self._lock:
            return list(self._messages)

    def snapshot(self) -> TrafficSnapshot:
        with self._lock:
            down = self._by_direction[Direction.DOWNLINK]
            up = self._by_direction[Direction.UPLINK]
            return TrafficSnapshot(
                total_bytes=down + up,
                downlink_bytes=down,
                uplink_bytes=up,
                frames=len(self._messages),
                per_round=dict(sorted(self._per_round.items())),
            )


def receive_bytes(data: bytes, meter: TrafficMeter, direction: Direction) -> Frame:
    """Decode a complete frame, then meter it."""
    frame = Frame.decode(data)
    meter.record(frame, direction)
    return frame


class ServerTransport(Transport):
    """
    Shared server logic: JOIN admission and the GLOBAL_MODEL ->
    LOCAL_UPDATE + EVAL_REPORT exchange. Backends supply frame I/O.
    """

    def __init__(self):
        self.meter = TrafficMeter("server")
        self.session: Optional[FederationSession] = None
        self.admitted: Dict[int, int] = {}

    @abstractmethod
    async def _send(self, rank: int, frame: Frame) -> None:
        pass

    @abstractmethod
    async def _recv(self, rank: int) -> Frame:
        pass

    async def _gather(self, frame: Frame, client_ids: Sequence[int]) -> List[ClientUpdateResult]:
        """Concurrent exchanges; the first failure cancels and awaits the rest before re-raising."""
        tasks = [asyncio.ensure_future(self._counted_exchange(rank, frame)) for rank in client_ids]
        try:
            return list(await asyncio.gather(*tasks))
        except BaseException:
            for task in tasks:
                task.cancel()
            await asyncio.gather(*tasks, return_exceptions=True)
            raise

    def traffic(self) -> TrafficSnapshot:
        return self.meter.snapshot()

    @property
    def expected_clients(self) -> int:
        return self.session.cfg.num_clients if self.session else 0

    def _admit(self, frame: Frame) -> Optional[str]:
        """Register a JOIN; returns a rejection reason, or None when admitted."""
        if frame.msg_type != MsgType.JOIN:
            return f"expected JOIN, got {frame.msg_type.name}"
        try:
            rank, world_size, n_k = parse_join(frame)
        except ProtocolError as e:
            return e.message
        cfg = self.session.cfg
        if world_size != cfg.world_size:
            return f"world size mismatch: server runs {cfg.world_size}, client declared {world_size}"
        if len(self.admitted) >= cfg.num_clients:
            return "federation is full"
        if not 1 <= rank <= cfg.num_clients:
            return f"rank {rank} outside [1, {cfg.num_clients}]"
        if rank in self.admitted:
            return f"duplicate rank {rank}"
        self.admitted[rank] = n_k
        observability.fed_connected_clients.set(len(self.admitted))
        logger.info("Client joined", extra={"client_rank": rank, "n_k": n_k})
        return None

    async def dispatch(self, round_: int, client_ids: Sequence[int], w_global: ModelParams) -> List[ClientUpdateResult]:
        cfg = self.session.cfg
        frame = model_frame(MsgType.GLOBAL_MODEL, round_, w_global, cfg.wire_dtype)
        with observability.RoundTimer():
            return await self._gather(frame, client_ids)

    async def _counted_exchange(self, rank: int, frame: Frame) -> ClientUpdateResult:
        try:
            result = await self._exchange(rank, frame)
        except Exception:
            observability.fed_client_updates_total.labels(status="error").inc()
            raise
        observability.fed_client_updates_total.labels(status="ok").inc()
        return result

    async def _exchange(self, rank: int, frame: Frame) -> ClientUpdateResult:
        await self._send(rank, frame)
        update = await self._expect(rank, MsgType.LOCAL_UPDATE)
        report = await self._expect(rank, MsgType.EVAL_REPORT)
        params = deserialize_params(
            update.payload,
            update.dtype,
            self.session.arch.name,
            expected_count=self.session.arch.transmitted_count,
        )
        loss, wall_time = parse_eval_report(report)
        return ClientUpdateResult(
            client_id=rank,
            round=update.round,
            n_k=update.sample_count,
            params=params,
            local_loss=loss,
            wall_time_s=wall_time,
        )

    async def _expect(self, rank: int, msg_type: MsgType) -> Frame:
        frame = await self._recv(rank)
        if frame.msg_type == MsgType.ERROR:
            raise FederationError(f"client {rank} failed: {parse_error(frame)}", {"client_rank": rank})
        if frame.msg_type != msg_type:
            raise ProtocolError(f"client {rank}: expected {msg_type.name}, got {frame.msg_type.name}")
        return frame


class SimulatedLink:
    """
    One in-process connection. Delivering a frame to the client runs its
    protocol handler synchronously; its replies land in the server inbox.
    """

    def __init__(self, client: FederatedClient, server_meter: TrafficMeter):
        self.client = client
        self.server_meter = server_meter
        self.client_meter = TrafficMeter("client")
        self.inbox: Deque[Frame] = deque()

    def to_client(self, frame: Frame) -> None:
        data = frame.encode()
        self.server_meter.record(frame, Direction.DOWNLINK)
        received = receive_bytes(data, self.client_meter, Direction.DOWNLINK)
        for reply in self.client.handle(received):
            self.to_server(reply)

    def to_server(self, frame: Frame) -> Frame:
        data = frame.encode()
        self.client_meter.record(frame, Direction.UPLINK)
        received = receive_bytes(data, self.server_meter, Direction.UPLINK)
        self.inbox.append(received)
        return received


class SimulatedTransport(ServerTransport):
    """Deterministic in-process network; clients are built from the session's partition."""

    def __init__(self, clock: Optional[Clock] = None):
        super().__init__()
        self.clock = clock
        self.links: Dict[int, SimulatedLink] = {}

    async def open(self, session: FederationSession) -> Dict[int, int]:
        self.session = session
        for shard in session.partition.shards:
            client = FederatedClient(
                rank=shard.client_id,
                cfg=session.cfg,
                arch=session.arch,
                dataset=session.dataset,
                shard=shard,
                clock=self.clock,
            )
            link = SimulatedLink(client, self.meter)
            self.links[shard.client_id] = link
            join = link.to_server(client.join_frame())
            link.inbox.clear()
            reason = self._admit(join)
            if reason is not None:
                logger.warning("JOIN rejected", extra={"reason": reason})
                link.to_client(error_frame(reason))
        return dict(sorted(self.admitted.items()))

    async def _gather(self, frame: Frame, client_ids: Sequence[int]) -> List[ClientUpdateResult]:
        return [await self._counted_exchange(rank, frame) for rank in client_ids]

    async def _send(self, rank: int, frame: Frame) -> None:
        self.links[rank].to_client(frame)

    async def _recv(self, rank: int) -> Frame:
        inbox = self.links[rank].inbox
        if not inbox:
            raise ProtocolError(f"client {rank} sent nothing")
        return inbox.popleft()

    async def close(self) -> None:
        for rank in sorted(self.links):
            if rank in self.admitted and not self.links[rank].client.finished:
                self.links[rank].to_client(shutdown_frame())
        observability.fed_connected_clients.set(0)

    def client_traffic(self, rank: int) -> TrafficSnapshot:
        return self.links[rank].client_meter.snapshot()


class StreamEndpoint:
    """Framed, metered reads and writes over an asyncio stream pair."""

    def __init__(
        self,
        reader: asyncio.StreamReader,
        writer: asyncio.StreamWriter,
        meter: TrafficMeter,
        outgoing: Direction,
        max_payload: int = MAX_PAYLOAD_BYTES,
    ):
        self.reader = reader
        self.writer = writer
        self.meter = meter
        self.outgoing = outgoing
        self.incoming = Direction.UPLINK if outgoing == Direction.DOWNLINK else Direction.DOWNLINK
        self.max_payload = max_payload
        self._write_lock = asyncio.Lock()

    async def send(self, frame: Frame) -> None:
        data = frame.encode()
        async with self._write_lock:
            try:
                self.writer.write(data)
                await self.writer.drain()
            except (ConnectionError, OSError) as e:
                raise ProtocolError(f"connection lost while sending {frame.msg_type.name}") from e
        self.meter.record(frame, self.outgoing)

    async def recv(self, record: bool = True) -> Frame:
        try:
            header = decode_header(await self.reader.readexactly(HEADER_SIZE))
            if header.payload_len > self.max_payload:
                raise ProtocolError(f"payload of {header.payload_len} bytes exceeds the limit")
            payload = await self.reader.readexactly(header.payload_len)
        except asyncio.IncompleteReadError as e:
            raise ProtocolError("connection lost") from e
        except (ConnectionError, OSError) as e:
            raise ProtocolError(f"connection lost: {e}") from e
        frame = Frame.from_header(header, payload)
        if record:
            self.meter.record(frame, self.incoming)
        return frame

    async def close(self) -> None:
        self.writer.close()
        try:
            await self.writer.wait_closed()
        except (ConnectionError, OSError):
            pass


class TcpServerTransport(ServerTransport):
    """
    Listens on host:port, admits K clients by JOIN, then serves rounds.

    Late or conflicting JOINs are answered with an ERROR frame and closed
    while the run continues.
    """

    def __init__(self, host: Optional[str] = None, port: Optional[int] = None, join_timeout_s: Optional[float] = None):
        super().__init__()
        self.host = host or settings.server_host
        self.port = settings.server_port if port is None else port
        self.join_timeout_s = join_timeout_s or settings.join_timeout_s
        self.endpoints: Dict[int, StreamEndpoint] = {}
        self._server: Optional[asyncio.AbstractServer] = None
        self._all_joined = asyncio.Event()

    async def start(self) -> int:
        """Bind the listening socket; returns the bound port."""
        if self._server is None:
            self._server = await asyncio.start_server(self._handle_connection, self.host, self.port)
            self.port = self._server.sockets[0].getsockname()[1]
            logger.info("Federation server listening", extra={"host": self.host, "port": self.port})
        return self.port

    async def open(self, session: FederationSession) -> Dict[int, int]:
        self.session = session
        await self.start()
        try:
            await asyncio.wait_for(self._all_joined.wait(), timeout=self.join_timeout_s)
        except asyncio.TimeoutError as e:
            raise FederationError(
                f"only {len(self.admitted)} of {session.cfg.num_clients} clients joined "
                f"within {self.join_timeout_s}s"
            ) from e
        return dict(sorted(self.admitted.items()))

    async def _handle_connection(self, reader: asyncio.StreamReader, writer: asyncio.StreamWriter) -> None:
        endpoint = StreamEndpoint(reader, writer, self.meter, Direction.DOWNLINK)
        try:
            frame = await endpoint.recv(record=False)
        except ProtocolError as e:
            logger.warning("Connection dropped before JOIN", extra={"reason": e.message})
            await endpoint.close()
            return

        reason = "server is not ready" if self.session is None else self._admit(frame)
        if reason is not None:
            logger.warning("JOIN rejected", extra={"reason": reason})
            # rejected connections stay off the run's meter
            endpoint.meter = TrafficMeter("rejected")
            endpoint.meter.record(frame, endpoint.incoming)
            try:
                await endpoint.send(error_frame(reason))
            except ProtocolError:
                pass
            await endpoint.close()
            return

        endpoint.meter.record(frame, endpoint.incoming)
        rank, _, _ = parse_join(frame)
        self.endpoints[rank] = endpoint
        if len(self.admitted) == self.expected_clients:
            self._all_joined.set()

    async def _send(self, rank: int, frame: Frame) -> None:
        await self.endpoints[rank].send(frame)

    async def _recv(self, rank: int) -> Frame:
        return await self.endpoints[rank].recv()

    async def close(self) -> None:
        for rank in sorted(self.endpoints):
            endpoint = self.endpoints[rank]
            try:
                await endpoint.send(shutdown_frame())
            except ProtocolError:
                logger.warning("Could not deliver SHUTDOWN", extra={"client_rank": rank})
            await endpoint.close()
        self.endpoints.clear()
        if self._server is not None:
            self._server.close()
            await self._server.wait_closed()
            self._server = None
        observability.fed_connected_clients.set(0)


async def connect_with_retry(host: str, port: int, retries: Optional[int] = None, delay_s: float = 0.25):
    """Open a stream, retrying while the server is not up yet."""
    retries = settings.connect_retries if retries is None else retries
    last: Optional[Exception] = None
    for attempt in range(retries + 1):
        try:
            return await asyncio.wait_for(
                asyncio.open_connection(host, port), timeout=settings.connect_timeout_s
            )
        except (ConnectionError, OSError, asyncio.TimeoutError) as e:
            last = e
            logger.debug("Connect attempt failed", extra={"attempt": attempt + 1, "error": str(e)})
            await asyncio.sleep(delay_s)
    raise ProtocolError(f"could not connect to {host}:{port}: {last}")


async def run_tcp_client(client: FederatedClient, host: str, port: int, retries: Optional[int] = None) -> TrafficSnapshot:
    """
    Client side of a TCP federation: JOIN, then answer GLOBAL_MODEL frames
    until SHUTDOWN. Local training runs in a worker thread.

    Raises:
        FederationError: the server rejected the JOIN.
        ProtocolError: connection failure or malformed frame.
    """
    reader, writer = await connect_with_retry(host, port, retries)
    endpoint = StreamEndpoint(reader, writer, TrafficMeter("client"), Direction.UPLINK)
    try:
        await endpoint.send(client.join_frame())
        while not client.finished:
            frame = await endpoint.recv()
            replies = await asyncio.to_thread(client.handle, frame)
            for reply in replies:
                await endpoint.send(reply)
    finally:
        await endpoint.close()
    return endpoint.meter.snapshot()


__all__ = [
    "Direction",
    "TrafficMeter",
    "receive_bytes",
    "ServerTransport",
    "SimulatedTransport",
    "SimulatedLink",
    "StreamEndpoint",
    "TcpServerTransport",
    "connect_with_retry",
    "run_tcp_client",
]
