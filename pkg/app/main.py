"""
Command-line entry point.

    python -m app.main simulate --arch tiny_mlp --rounds 50 --repetitions 10
    python -m app.main server --world-size 3 --port 3002
    python -m app.main client --world-size 3 --rank 1 --port 3002
    python -m app.main params alexnet
    python -m app.main report runs/
    python -m app.main partition --world-size 5

Exit code 0 on success, 2 for configuration errors, 1 for any other
failure. Failures print one JSON error record to stderr.
"""

import argparse
import asyncio
import json
import logging
import sys
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence

from app.__version__ import __version__
from app.api.schemas import ErrorDetail, ErrorResponse
from app.config import RunConfig, Role, load_run_config
from app.services.federation_service import FederationService
from app.services.observability import setup_logging
from app.services.reporting import analyze, discover_runs, format_table, load_run, write_analysis
from core.arch import layer_breakdown, resolve_arch
from core.errors import ConfigError, FedLeafError

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_CONFIG = 2

# flag dest -> RunConfig field
RUN_FLAGS = (
    "world_size", "rank", "rounds", "learning_rate", "batch_size", "momentum", "num_classes", "host", "port",
    "arch", "dataset", "csv_path", "blob_counts", "blob_dim", "blob_separation", "seed", "repetitions", "workers",
    "output_dir", "participation", "local_epochs", "train_frac", "val_frac", "test_frac", "compute_dtype",
    "wire_dtype", "allow_lossy_wire", "aggregator", "monitor_port", "log_level",
)


def _add_run_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="KEY=value configuration file; flags override it")
    p.add_argument("--world-size", dest="world_size", type=int, help="clients + 1 server")
    p.add_argument("--rank", type=int, help="process rank (server is 0)")
    p.add_argument("--rounds", type=int, help="global rounds T")
    p.add_argument("--lr", dest="learning_rate", type=float, help="client learning rate")
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--momentum", type=float)
    p.add_argument("--classes", dest="num_classes", type=int)
    p.add_argument("--host")
    p.add_argument("--port", type=int)
    p.add_argument("--arch", help="catalog name or architecture file")
    p.add_argument("--dataset", choices=["blobs", "csv"])
    p.add_argument("--csv", dest="csv_path", help="labelled CSV (label,v1,...,vD)")
    p.add_argument("--blob-counts", dest="blob_counts", help="per-class sample counts, comma-separated")
    p.add_argument("--blob-dim", dest="blob_dim", type=int)
    p.add_argument("--blob-separation", dest="blob_separation", type=float)
    p.add_argument("--seed", type=int)
    p.add_argument("--repetitions", type=int)
    p.add_argument("--workers", type=int, help="parallel repetition threads")
    p.add_argument("--out", dest="output_dir")
    p.add_argument("--participation", type=float, help="fraction C of clients sampled per round")
    p.add_argument("--epochs", dest="local_epochs", type=int, help="local epochs E")
    p.add_argument("--train-frac", dest="train_frac", type=float)
    p.add_argument("--val-frac", dest="val_frac", type=float)
    p.add_argument("--test-frac", dest="test_frac", type=float)
    p.add_argument("--compute-dtype", dest="compute_dtype", choices=["float32", "float64"])
    p.add_argument("--wire-dtype", dest="wire_dtype", choices=["float32", "float64"])
    p.add_argument("--allow-lossy-wire", dest="allow_lossy_wire", action="store_const", const=True)
    p.add_argument("--aggregator")
    p.add_argument(
        "--override",
        action="append",
        default=[],
        metavar="RANK:key=value",
        help="per-client override, e.g. 2:lr=0.01,epochs=2 (repeatable)",
    )
    p.add_argument("--monitor-port", dest="monitor_port", type=int, help="serve /status and /metrics")
    p.add_argument("--log-level", dest="log_level")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fedleaf", description="Federated averaging framework and simulator.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    for name, help_text in (
        ("simulate", "run seeded repetitions over the in-process transport"),
        ("server", "rank 0 of a TCP federation"),
        ("client", "rank k of a TCP federation"),
        ("partition", "write shard manifests without training"),
    ):
        _add_run_flags(sub.add_parser(name, help=help_text))

    p = sub.add_parser("params", help="parameter counts of an architecture")
    p.add_argument("arch", help="catalog name or architecture file")
    p.add_argument("--classes", dest="num_classes", type=int, default=4)
    p.add_argument("--json", action="store_true", help="machine-readable output")
    p.add_argument("--log-level", dest="log_level")

    p = sub.add_parser("report", help="cross-run analysis of finished run directories")
    p.add_argument("runs", nargs="+", help="run or experiment directories")
    p.add_argument("--out", dest="output_dir", help="where analysis.* is written (default: first directory)")
    p.add_argument("--log-level", dest="log_level")
    return parser


def run_config_from_args(args: argparse.Namespace, role: Role) -> RunConfig:
    overrides: Dict[str, Any] = {k: getattr(args, k) for k in RUN_FLAGS if getattr(args, k, None) is not None}
    overrides["role"] = role.value
    if role != Role.CLIENT:
        overrides.setdefault("rank", 0)
    return load_run_config(args.config, overrides=overrides, client_overrides=args.override)


def cmd_simulate(args: argparse.Namespace) -> int:
    cfg = run_config_from_args(args, Role.SIMULATE)
    setup_logging(cfg.log_level)
    outcome = FederationService(cfg).simulate()
    print((outcome.experiment_dir / "summary.txt").read_text(encoding="utf-8"), end="")
    print(f"reports: {outcome.experiment_dir}")
    return EXIT_OK


def cmd_server(args: argparse.Namespace) -> int:
    cfg = run_config_from_args(args, Role.SERVER)
    setup_logging(cfg.log_level)
    run_dir = asyncio.run(FederationService(cfg).serve())
    print((run_dir / "report.txt").read_text(encoding="utf-8"), end="")
    print(f"reports: {run_dir}")
    return EXIT_OK


def cmd_client(args: argparse.Namespace) -> int:
    cfg = run_config_from_args(args, Role.CLIENT)
    setup_logging(cfg.log_level)
    snapshot = asyncio.run(FederationService(cfg).join())
    print(f"rank {cfg.rank}: {snapshot.total_bytes} bytes in {snapshot.frames} frames")
    return EXIT_OK


def cmd_partition(args: argparse.Namespace) -> int:
    cfg = run_config_from_args(args, Role.SIMULATE)
    setup_logging(cfg.log_level)
    path = FederationService(cfg).partition()
    print(path)
    return EXIT_OK


def format_params(arch_name: str, rows: List[Dict[str, Any]], trainable: int, transmitted: int) -> str:
    lines = [
        f"{arch_name}: {trainable:,} trainable parameters, {transmitted:,} transmitted values",
        "",
        f"{'#':>3}  {'kind':<20}{'output':<18}{'trainable':>14}{'buffers':>10}  config",
    ]
    for r in rows:
        shape = "x".join(str(d) for d in r["output_shape"])
        lines.append(
            f"{r['index']:>3}  {r['kind']:<20}{shape:<18}{r['trainable']:>14,}{r['buffers']:>10,}  {r['config']}"
        )
    return "\n".join(lines) + "\n"


def cmd_params(args: argparse.Namespace) -> int:
    setup_logging(args.log_level)
    arch = resolve_arch(args.arch, num_classes=args.num_classes)
    rows = layer_breakdown(arch)
    if args.json:
        print(json.dumps({**arch.to_manifest(), "layers": rows}, indent=2))
    else:
        print(format_params(arch.name, rows, arch.trainable_count, arch.transmitted_count), end="")
    return EXIT_OK


def cmd_report(args: argparse.Namespace) -> int:
    setup_logging(args.log_level)
    run_dirs = discover_runs([Path(p) for p in args.runs])
    analysis = analyze([load_run(d) for d in run_dirs])
    out_dir = Path(args.output_dir) if args.output_dir else Path(args.runs[0])
    write_analysis(out_dir, analysis)
    print(format_table(analysis.archs), end="")
    print(analysis.note)
    return EXIT_OK


COMMANDS = {
    "simulate": cmd_simulate,
    "server": cmd_server,
    "client": cmd_client,
    "partition": cmd_partition,
    "params": cmd_params,
    "report": cmd_report,
}


def error_record(exc: Exception) -> ErrorResponse:
    if isinstance(exc, FedLeafError):
        return ErrorResponse(error=ErrorDetail(**exc.to_record()))
    return ErrorResponse(error=ErrorDetail(message=str(exc) or type(exc).__name__, type=type(exc).__name__, code="internal"))


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return COMMANDS[args.command](args)
    except ConfigError as e:
        print(error_record(e).model_dump_json(exclude_none=True), file=sys.stderr)
        return EXIT_CONFIG
    except FedLeafError as e:
        logger.error(f"{args.command} failed", extra={"error_code": e.code})
        print(error_record(e).model_dump_json(exclude_none=True), file=sys.stderr)
        return EXIT_FAILURE
    except Exception as e:
        logger.exception(f"{args.command} crashed")
        print(error_record(e).model_dump_json(exclude_none=True), file=sys.stderr)
        return EXIT_FAILURE


if __name__ == "__main__":
    sys.exit(main())
