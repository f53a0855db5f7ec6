import asyncio
import time

import numpy as np
import pytest

from app.services.client import FederatedClient
from app.services.observability import metrics_registry
from app.services.transport import (
    Direction,
    SimulatedTransport,
    StreamEndpoint,
    TcpServerTransport,
    TrafficMeter,
    connect_with_retry,
    receive_bytes,
    run_tcp_client,
)
from app.services.wire import (
    MsgType,
    error_frame,
    join_frame,
    parse_error,
    round_traffic,
    run_traffic,
    shutdown_frame,
)
from conftest import fixed_clock
from core.arch import tiny_cnn, tiny_cnn_bn, tiny_mlp
from core.data import generate_blobs, plan_partition
from core.errors import FederationError, ProtocolError
from core.federation import FederationSession, prepare_dataset, run_federation
from core.models import DType, FedConfig

HOST = "127.0.0.1"


def _dataset(arch):
    return generate_blobs(counts=[20, 20, 20, 20], dim=arch.input_size, separation=5.0, seed=2)


def _session(cfg, arch, dataset) -> FederationSession:
    dataset = prepare_dataset(cfg, dataset, arch)
    return FederationSession(
        cfg=cfg,
        arch=arch,
        dataset=dataset,
        partition=plan_partition(dataset, cfg.num_clients, cfg.split, cfg.seed),
    )


@pytest.mark.parametrize("make_arch", [tiny_mlp, tiny_cnn, tiny_cnn_bn], ids=["mlp", "cnn", "cnn_bn"])
@pytest.mark.parametrize("k,c", [(1, 1.0), (3, 1.0), (4, 0.5)])
def test_metered_bytes_match_prediction(make_arch, k, c):
    arch = make_arch()
    cfg = FedConfig(num_clients=k, participation=c, rounds=2, batch_size=16, seed=1)
    transport = SimulatedTransport(clock=fixed_clock)
    result = asyncio.run(run_federation(cfg, _dataset(arch), arch, transport, clock=fixed_clock))

    assert result.traffic.total_bytes == run_traffic(arch, cfg)
    per_round = round_traffic(arch, cfg, include_control=True)
    assert all(result.traffic.round_bytes(t) == per_round for t in (1, 2))
    assert result.traffic.round_bytes(0) == k * 36 + k * 28
    assert result.traffic.downlink_bytes + result.traffic.uplink_bytes == result.traffic.total_bytes

    client_total = sum(transport.client_traffic(r).total_bytes for r in range(1, k + 1))
    assert client_total == result.traffic.total_bytes


def test_corrupt_frame_is_not_metered():
    meter = TrafficMeter()
    data = bytearray(shutdown_frame().encode())
    data[:4] = b"XXXX"
    with pytest.raises(ProtocolError):
        receive_bytes(bytes(data), meter, Direction.UPLINK)
    assert meter.snapshot().total_bytes == 0
    assert meter.message_sizes == []

    receive_bytes(shutdown_frame().encode(), meter, Direction.UPLINK)
    snapshot = meter.snapshot()
    assert snapshot.total_bytes == snapshot.uplink_bytes == 28
    assert snapshot.per_round == {0: 28}


@pytest.fixture
def admission(small_blobs):
    cfg = FedConfig(num_clients=2, seed=0)
    transport = SimulatedTransport()
    transport.session = _session(cfg, tiny_mlp(), small_blobs)
    return transport


def test_admission_accepts_each_rank_once(admission):
    assert admission._admit(join_frame(1, 3, 96)) is None
    assert admission._admit(join_frame(1, 3, 96)) == "duplicate rank 1"
    assert admission._admit(join_frame(2, 3, 96)) is None
    assert admission.admitted == {1: 96, 2: 96}


def test_admission_rejects_when_full(admission):
    admission._admit(join_frame(1, 3, 96))
    admission._admit(join_frame(2, 3, 96))
    assert admission._admit(join_frame(3, 3, 96)) == "federation is full"


@pytest.mark.parametrize(
    "frame,fragment",
    [
        (join_frame(1, 4, 96), "world size mismatch"),
        (join_frame(0, 3, 96), "outside"),
        (join_frame(5, 3, 96), "outside"),
        (shutdown_frame(), "expected JOIN"),
    ],
)
def test_admission_rejections(admission, frame, fragment):
    assert fragment in admission._admit(frame)
    assert admission.admitted == {}


def _tcp_clients(cfg, arch, dataset, port):
    session = _session(cfg, arch, dataset)
    clients = [
        FederatedClient(shard.client_id, cfg, arch, session.dataset, shard, clock=fixed_clock)
        for shard in session.partition.shards
    ]
    return [run_tcp_client(c, HOST, port, retries=5) for c in clients]


def test_tcp_and_simulated_runs_agree():
    arch = tiny_mlp()
    dataset = _dataset(arch)
    cfg = FedConfig(
        num_clients=2,
        rounds=3,
        batch_size=16,
        learning_rate=0.01,
        seed=5,
        compute_dtype=DType.FLOAT64,
        wire_dtype=DType.FLOAT64,
    )

    simulated = asyncio.run(
        run_federation(cfg, dataset, arch, SimulatedTransport(clock=fixed_clock), clock=fixed_clock)
    )

    async def over_tcp():
        transport = TcpServerTransport(host=HOST, port=0, join_timeout_s=30)
        port = await transport.start()
        outcome = await asyncio.gather(
            run_federation(cfg, dataset, arch, transport, clock=fixed_clock),
            *_tcp_clients(cfg, arch, dataset, port),
        )
        return outcome[0], outcome[1:]

    tcp, client_snapshots = asyncio.run(over_tcp())

    np.testing.assert_array_equal(tcp.final_params.values, simulated.final_params.values)
    assert tcp.metrics == simulated.metrics
    assert tcp.rounds == simulated.rounds
    assert tcp.traffic == simulated.traffic
    assert sum(s.total_bytes for s in client_snapshots) == tcp.traffic.total_bytes


def _raw_endpoint(reader, writer) -> StreamEndpoint:
    return StreamEndpoint(reader, writer, TrafficMeter("client"), Direction.UPLINK)


def test_tcp_duplicate_rank_gets_error(small_blobs):
    cfg = FedConfig(num_clients=2, seed=0)

    async def scenario():
        transport = TcpServerTransport(host=HOST, port=0)
        port = await transport.start()
        transport.session = _session(cfg, tiny_mlp(), small_blobs)

        first = _raw_endpoint(*await connect_with_retry(HOST, port, retries=0))
        await first.send(join_frame(1, 3, 96))
        while 1 not in transport.admitted:
            await asyncio.sleep(0.01)

        second = _raw_endpoint(*await connect_with_retry(HOST, port, retries=0))
        await second.send(join_frame(1, 3, 96))
        reply = await asyncio.wait_for(second.recv(), timeout=5)

        await transport.close()
        shutdown = await asyncio.wait_for(first.recv(), timeout=5)
        await first.close()
        await second.close()
        return reply, shutdown

    reply, shutdown = asyncio.run(scenario())
    assert reply.msg_type == MsgType.ERROR
    assert parse_error(reply) == "duplicate rank 1"
    assert shutdown.msg_type == MsgType.SHUTDOWN


def test_tcp_join_before_session_is_refused():
    async def scenario():
        transport = TcpServerTransport(host=HOST, port=0)
        port = await transport.start()
        client = _raw_endpoint(*await connect_with_retry(HOST, port, retries=0))
        await client.send(join_frame(1, 3, 10))
        reply = await asyncio.wait_for(client.recv(), timeout=5)
        await client.close()
        await transport.close()
        return reply

    reply = asyncio.run(scenario())
    assert parse_error(reply) == "server is not ready"


class _FailingClient(FederatedClient):
    def _train(self, frame):
        self.finished = True
        return [error_frame("non_finite: local loss diverged")]


class _SlowClient(FederatedClient):
    def handle(self, frame):
        if frame.msg_type == MsgType.GLOBAL_MODEL:
            time.sleep(0.5)
        return super().handle(frame)


def _updates(status: str) -> float:
    return metrics_registry.get_sample_value("fed_client_updates_total", {"status": status}) or 0.0


def test_tcp_client_failure_cancels_pending_exchanges():
    arch = tiny_mlp()
    dataset = _dataset(arch)
    cfg = FedConfig(num_clients=2, rounds=1, batch_size=16, seed=5)
    session = _session(cfg, arch, dataset)
    failing, slow = (
        kind(shard.client_id, cfg, arch, session.dataset, shard, clock=fixed_clock)
        for kind, shard in zip((_FailingClient, _SlowClient), session.partition.shards)
    )
    ok_before, errors_before = _updates("ok"), _updates("error")

    async def scenario():
        transport = TcpServerTransport(host=HOST, port=0, join_timeout_s=30)
        port = await transport.start()
        clients = [asyncio.ensure_future(run_tcp_client(c, HOST, port, retries=5)) for c in (failing, slow)]
        with pytest.raises(FederationError) as exc:
            await run_federation(cfg, dataset, arch, transport, clock=fixed_clock)
        lingering = [
            t for t in asyncio.all_tasks() if not t.done() and "_counted_exchange" in repr(t.get_coro())
        ]
        await asyncio.wait_for(asyncio.gather(*clients, return_exceptions=True), timeout=10)
        return exc.value, lingering

    error, lingering = asyncio.run(scenario())
    assert "client 1 failed" in error.message
    assert lingering == []
    assert _updates("error") - errors_before == 1
    assert _updates("ok") - ok_before == 0


def test_tcp_rejected_join_stays_off_the_meter(small_blobs):
    cfg = FedConfig(num_clients=2, seed=0)

    async def scenario():
        transport = TcpServerTransport(host=HOST, port=0)
        port = await transport.start()
        transport.session = _session(cfg, tiny_mlp(), small_blobs)

        stray = _raw_endpoint(*await connect_with_retry(HOST, port, retries=0))
        await stray.send(join_frame(1, 4, 96))
        reply = await asyncio.wait_for(stray.recv(), timeout=5)
        after_stray = transport.traffic()

        member = _raw_endpoint(*await connect_with_retry(HOST, port, retries=0))
        await member.send(join_frame(1, 3, 96))
        while 1 not in transport.admitted:
            await asyncio.sleep(0.01)
        after_member = transport.traffic()

        await transport.close()
        await asyncio.wait_for(member.recv(), timeout=5)
        await member.close()
        await stray.close()
        return reply, after_stray, after_member

    reply, after_stray, after_member = asyncio.run(scenario())
    assert parse_error(reply).startswith("world size mismatch")
    assert after_stray.total_bytes == 0
    assert after_member.total_bytes == after_member.uplink_bytes == 36
