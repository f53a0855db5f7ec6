"""
Run and experiment reports.

Per run directory:
    manifest.json  - reproduction record (RunManifest)
    metrics.json   - final metrics, confusion matrix, traffic
    history.csv    - one row per round
    confusion.csv  - rows true class, columns predicted class
    report.txt     - human-readable summary

Per experiment: summary.json / summary.csv / summary.txt with mean ± sample
standard deviation for every results-table column. Cross-run analysis adds
analysis.json / analysis.csv / analysis.txt with the Pearson correlation
between mean training time and mean accuracy per architecture.

All writers produce byte-identical files for identical inputs.
"""

import csv
import json
import logging
from pathlib import Path
from typing import Any, Dict, Iterable, List, Optional, Sequence, Tuple

from pydantic import BaseModel, ValidationError

from app.api.schemas import RunManifest
from core.errors import DataError, StatisticsError
from core.metrics import format_mean_std, pearson, run_stats
from core.models import FederationResult, RoundRecord

logger = logging.getLogger(__name__)

# Correlation between training time and accuracy stated alongside the published results.
REFERENCE_PEARSON_R = -0.2

# (header, RunSummary field, scale)
TABLE_COLUMNS: Tuple[Tuple[str, str, float], ...] = (
    ("Accuracy (%)", "accuracy", 100.0),
    ("Precision (%)", "precision", 100.0),
    ("Recall (%)", "recall", 100.0),
    ("F1-Score (%)", "f1", 100.0),
    ("Loss", "loss", 1.0),
    ("Training Time (min)", "training_time_min", 1.0),
)

HISTORY_FIELDS = [
    "round", "sampled", "n_samples", "global_loss", "val_loss", "val_accuracy", "traffic_bytes", "wall_time_s",
]


class RunSummary(BaseModel):
    """The table-relevant numbers of one finished run."""
    run_id: str
    arch: str
    seed: int = 0
    accuracy: float
    precision: float
    recall: float
    f1: float
    loss: Optional[float] = None
    training_time_min: Optional[float] = None
    traffic_bytes: int = 0


class ArchSummary(BaseModel):
    """Mean and spread of every table column over one architecture's runs."""
    arch: str
    runs: int
    means: Dict[str, Optional[float]]
    stds: Dict[str, Optional[float]]
    formatted: Dict[str, str]


class Analysis(BaseModel):
    archs: List[ArchSummary]
    pearson_r: Optional[float] = None
    reference_r: float = REFERENCE_PEARSON_R
    agrees_with_reference: Optional[bool] = None
    note: str = ""


def _dump_json(path: Path, data: Any) -> None:
    path.write_text(json.dumps(data, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _write_csv(path: Path, header: Sequence[str], rows: Iterable[Sequence[Any]]) -> None:
    with path.open("w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(header)
        writer.writerows(rows)


def summarize_result(run_id: str, seed: int, result: FederationResult) -> RunSummary:
    m = result.metrics
    return RunSummary(
        run_id=run_id,
        arch=result.arch_name,
        seed=seed,
        accuracy=m.accuracy,
        precision=m.precision,
        recall=m.recall,
        f1=m.f1,
        loss=m.loss,
        training_time_min=m.training_time_min,
        traffic_bytes=result.traffic.total_bytes,
    )


def _history_rows(history: Sequence[RoundRecord]) -> List[List[Any]]:
    return [[r.to_row()[f] for f in HISTORY_FIELDS] for r in history]


def render_run_report(manifest: RunManifest, result: FederationResult) -> str:
    m = result.metrics
    lines = [
        f"run {manifest.run_id} ({result.arch_name}, seed {manifest.seed})",
        f"evaluated on: {result.eval_split} ({result.confusion.total} samples)",
        "",
        f"{'Accuracy':<12}{m.accuracy * 100:>8.2f} %",
        f"{'Precision':<12}{m.precision * 100:>8.2f} %",
        f"{'Recall':<12}{m.recall * 100:>8.2f} %",
        f"{'F1-Score':<12}{m.f1 * 100:>8.2f} %",
        f"{'Loss':<12}{m.loss if m.loss is not None else float('nan'):>8.4f}",
        f"{'Eval loss':<12}{m.eval_loss if m.eval_loss is not None else float('nan'):>8.4f}",
        f"{'Time':<12}{(m.training_time_min or 0.0):>8.4f} min",
        "",
        f"{'class':<24}{'P':>8}{'R':>8}{'F1':>8}{'support':>9}",
    ]
    for c in m.per_class:
        flag = " (excluded)" if c.degenerate else ""
        lines.append(f"{c.class_name:<24}{c.precision:>8.4f}{c.recall:>8.4f}{c.f1:>8.4f}{c.support:>9}{flag}")
    lines += [
        "",
        f"traffic: {result.traffic.total_bytes} bytes metered, {manifest.predicted_traffic_bytes} predicted "
        f"({result.traffic.downlink_bytes} down / {result.traffic.uplink_bytes} up, {result.traffic.frames} frames)",
        f"rounds: {len(result.rounds)}, wire dtype {manifest.wire_dtype}, compute dtype {manifest.compute_dtype}",
    ]
    lines += [f"warning: {w}" for w in m.warnings]
    return "\n".join(lines) + "\n"


def write_run_report(run_dir: Path, manifest: RunManifest, result: FederationResult) -> Path:
    """Write the five per-run files into run_dir."""
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)

    _dump_json(run_dir / "manifest.json", manifest.model_dump(mode="json"))
    _dump_json(
        run_dir / "metrics.json",
        {
            "run_id": manifest.run_id,
            "arch": result.arch_name,
            "seed": manifest.seed,
            "eval_split": result.eval_split,
            "metrics": result.metrics.model_dump(mode="json"),
            "confusion": result.confusion.to_dict(),
            "traffic": result.traffic.model_dump(mode="json"),
            "training_time_s": result.training_time_s,
        },
    )
    _write_csv(run_dir / "history.csv", HISTORY_FIELDS, _history_rows(result.rounds))
    cm = result.confusion
    _write_csv(
        run_dir / "confusion.csv",
        ["true\\pred", *cm.class_names],
        ([name, *row] for name, row in zip(cm.class_names, cm.counts.tolist())),
    )
    (run_dir / "report.txt").write_text(render_run_report(manifest, result), encoding="utf-8")
    logger.info("Run report written", extra={"run_dir": str(run_dir)})
    return run_dir


def load_run(run_dir: Path) -> RunSummary:
    """Read metrics.json of one run directory."""
    path = Path(run_dir) / "metrics.json"
    if not path.is_file():
        raise DataError(f"missing metrics.json in {run_dir}")
    try:
        data = json.loads(path.read_text(encoding="utf-8"))
        metrics = data["metrics"]
        return RunSummary(
            run_id=data.get("run_id", Path(run_dir).name),
            arch=data["arch"],
            seed=data.get("seed", 0),
            accuracy=metrics["accuracy"],
            precision=metrics["precision"],
            recall=metrics["recall"],
            f1=metrics["f1"],
            loss=metrics.get("loss"),
            training_time_min=metrics.get("training_time_min"),
            traffic_bytes=data.get("traffic", {}).get("total_bytes", 0),
        )
    except (ValueError, KeyError, TypeError, ValidationError) as e:
        raise DataError(f"corrupt run file {path}: {e}") from e


def discover_runs(paths: Sequence[Path]) -> List[Path]:
    """Run directories under the given paths (a run directory holds metrics.json)."""
    found: List[Path] = []
    for p in map(Path, paths):
        if not p.exists():
            raise DataError(f"no such run directory: {p}")
        if (p / "metrics.json").is_file():
            found.append(p)
        else:
            found.extend(sorted(m.parent for m in p.rglob("metrics.json")))
    if not found:
        raise DataError("no run directories found", {"paths": [str(p) for p in paths]})
    return found


def summarize(runs: Sequence[RunSummary]) -> List[ArchSummary]:
    """Group runs by architecture (first-appearance order) and aggregate each column."""
    groups: Dict[str, List[RunSummary]] = {}
    for run in runs:
        groups.setdefault(run.arch, []).append(run)

    summaries = []
    for arch, members in groups.items():
        means: Dict[str, Optional[float]] = {}
        stds: Dict[str, Optional[float]] = {}
        formatted: Dict[str, str] = {}
        for header, field, scale in TABLE_COLUMNS:
            values = [getattr(r, field) for r in members if getattr(r, field) is not None]
            if not values:
                means[field], stds[field], formatted[field] = None, None, "n/a"
                continue
            if len(values) >= 2:
                means[field], stds[field] = run_stats(values)
            else:
                means[field], stds[field] = float(values[0]), None
            formatted[field] = format_mean_std(values, scale=scale)
        summaries.append(ArchSummary(arch=arch, runs=len(members), means=means, stds=stds, formatted=formatted))
    return summaries


def format_table(summaries: Sequence[ArchSummary]) -> str:
    """Aligned text table: one row per architecture, one column per metric."""
    header = ["CNN", "Runs", *(h for h, _, _ in TABLE_COLUMNS)]
    rows = [[s.arch, str(s.runs), *(s.formatted[f] for _, f, _ in TABLE_COLUMNS)] for s in summaries]
    widths = [max(len(row[i]) for row in [header, *rows]) for i in range(len(header))]
    rule = "-" * (sum(widths) + 2 * (len(widths) - 1))

    def line(cells: Sequence[str]) -> str:
        first = cells[0].ljust(widths[0])
        rest = [c.rjust(w) for c, w in zip(cells[1:], widths[1:])]
        return "  ".join([first, *rest]).rstrip()

    return "\n".join([line(header), rule, *(line(r) for r in rows)]) + "\n"


def _summary_rows(summaries: Sequence[ArchSummary]) -> List[List[Any]]:
    rows = []
    for s in summaries:
        row: List[Any] = [s.arch, s.runs]
        for _, field, _ in TABLE_COLUMNS:
            mean, std = s.means[field], s.stds[field]
            row += ["" if mean is None else repr(mean), "" if std is None else repr(std)]
        rows.append(row)
    return rows


def _summary_header() -> List[str]:
    header = ["arch", "runs"]
    for _, field, _ in TABLE_COLUMNS:
        header += [f"{field}_mean", f"{field}_std"]
    return header


def write_summary(out_dir: Path, runs: Sequence[RunSummary]) -> List[ArchSummary]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    summaries = summarize(runs)
    _dump_json(
        out_dir / "summary.json",
        {
            "runs": [r.model_dump(mode="json") for r in runs],
            "archs": [s.model_dump(mode="json") for s in summaries],
        },
    )
    _write_csv(out_dir / "summary.csv", _summary_header(), _summary_rows(summaries))
    (out_dir / "summary.txt").write_text(format_table(summaries), encoding="utf-8")
    return summaries


def analyze(runs: Sequence[RunSummary]) -> Analysis:
    """
    Summaries plus Pearson r between per-architecture mean training time and
    mean accuracy. r is left unset, with a note, when it is undefined.
    """
    summaries = summarize(runs)
    points = [
        (s.means["training_time_min"], s.means["accuracy"])
        for s in summaries
        if s.means["training_time_min"] is not None
    ]
    if len(points) < 2:
        return Analysis(archs=summaries, note="Pearson r unavailable: needs at least two architectures")
    try:
        r = pearson([p[0] for p in points], [p[1] for p in points])
    except StatisticsError as e:
        return Analysis(archs=summaries, note=f"Pearson r unavailable: {e.message}")

    agrees = round(r, 1) == REFERENCE_PEARSON_R
    verdict = "agrees with" if agrees else "disagrees with"
    note = f"Pearson r = {r:.4f} over {len(points)} architectures; {verdict} the reference r = {REFERENCE_PEARSON_R}"
    if not agrees:
        logger.warning("Pearson r differs from the reference value", extra={"pearson_r": r})
    return Analysis(archs=summaries, pearson_r=r, agrees_with_reference=agrees, note=note)


def write_analysis(out_dir: Path, analysis: Analysis) -> Path:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    _dump_json(out_dir / "analysis.json", analysis.model_dump(mode="json"))
    _write_csv(
        out_dir / "analysis.csv",
        ["arch", "runs", "training_time_min_mean", "accuracy_mean", "accuracy_std"],
        (
            [
                s.arch,
                s.runs,
                "" if s.means["training_time_min"] is None else repr(s.means["training_time_min"]),
                repr(s.means["accuracy"]),
                "" if s.stds["accuracy"] is None else repr(s.stds["accuracy"]),
            ]
            for s in analysis.archs
        ),
    )
    text = format_table(analysis.archs) + "\n" + analysis.note + "\n"
    (out_dir / "analysis.txt").write_text(text, encoding="utf-8")
    return out_dir


__all__ = [
    "RunSummary",
    "ArchSummary",
    "Analysis",
    "write_run_report",
    "render_run_report",
    "summarize_result",
    "load_run",
    "discover_runs",
    "summarize",
    "format_table",
    "write_summary",
    "analyze",
    "write_analysis",
    "REFERENCE_PEARSON_R",
]
