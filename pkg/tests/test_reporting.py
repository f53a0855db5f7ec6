import json

import pytest

from app.services.reporting import (
    RunSummary,
    analyze,
    discover_runs,
    format_table,
    load_run,
    summarize,
    write_analysis,
    write_summary,
)
from core.errors import DataError


def _run(arch, accuracy, minutes=1.0, run_id="r") -> RunSummary:
    return RunSummary(
        run_id=run_id, arch=arch, accuracy=accuracy, precision=accuracy, recall=accuracy, f1=accuracy,
        loss=0.5, training_time_min=minutes,
    )


def test_published_pairs_do_not_reproduce_the_reference_correlation(published_runs):
    runs = [load_run(d) for d in discover_runs([published_runs])]
    assert len(runs) == 5
    analysis = analyze(runs)
    assert analysis.pearson_r == pytest.approx(0.3393, abs=5e-4)
    assert analysis.reference_r == -0.2
    assert analysis.agrees_with_reference is False
    assert "disagrees" in analysis.note


def test_write_analysis_files(published_runs, tmp_path):
    analysis = analyze([load_run(d) for d in discover_runs([published_runs])])
    out = write_analysis(tmp_path / "analysis", analysis)
    saved = json.loads((out / "analysis.json").read_text())
    assert saved["pearson_r"] == pytest.approx(analysis.pearson_r)
    rows = (out / "analysis.csv").read_text().splitlines()
    assert rows[0] == "arch,runs,training_time_min_mean,accuracy_mean,accuracy_std"
    assert len(rows) == 6
    assert rows[1].startswith("alexnet,1,16.23,0.9687,")
    assert analysis.note in (out / "analysis.txt").read_text()


def test_single_run_has_no_spread():
    [summary] = summarize([_run("tiny_mlp", 0.9704, minutes=16.23)])
    assert summary.formatted["accuracy"] == "97.04"
    assert summary.stds["accuracy"] is None
    assert "±" not in format_table([summary])


def test_repetitions_report_mean_and_sample_deviation():
    [summary] = summarize([_run("tiny_mlp", 0.9687, run_id="a"), _run("tiny_mlp", 0.9721, run_id="b")])
    assert summary.runs == 2
    assert summary.formatted["accuracy"] == "97.04 ± 0.24"
    assert summary.means["accuracy"] == pytest.approx(0.9704)


def test_missing_column_is_not_available():
    run = RunSummary(run_id="r", arch="m", accuracy=0.5, precision=0.5, recall=0.5, f1=0.5)
    [summary] = summarize([run])
    assert summary.formatted["loss"] == "n/a"
    assert summary.means["training_time_min"] is None


def test_groups_keep_first_appearance_order():
    runs = [_run("b", 0.5), _run("a", 0.6), _run("b", 0.7)]
    assert [s.arch for s in summarize(runs)] == ["b", "a"]


def test_single_architecture_has_no_correlation():
    analysis = analyze([_run("tiny_mlp", 0.9, run_id="a"), _run("tiny_mlp", 0.8, run_id="b")])
    assert analysis.pearson_r is None
    assert analysis.agrees_with_reference is None
    assert "unavailable" in analysis.note


def test_constant_times_have_no_correlation():
    analysis = analyze([_run("a", 0.9, minutes=2.0), _run("b", 0.8, minutes=2.0)])
    assert analysis.pearson_r is None
    assert "unavailable" in analysis.note


def test_table_layout():
    table = format_table(summarize([_run("alexnet", 0.9687, minutes=16.23)]))
    header, rule, row = table.splitlines()
    assert header.startswith("CNN")
    assert "Accuracy (%)" in header and "Training Time (min)" in header
    assert set(rule) == {"-"}
    assert row.split() == ["alexnet", "1", "96.87", "96.87", "96.87", "96.87", "0.50", "16.23"]


def test_write_summary(tmp_path):
    write_summary(tmp_path, [_run("tiny_mlp", 0.9, run_id="a"), _run("tiny_mlp", 0.8, run_id="b")])
    assert {p.name for p in tmp_path.iterdir()} == {"summary.json", "summary.csv", "summary.txt"}
    saved = json.loads((tmp_path / "summary.json").read_text())
    assert [r["run_id"] for r in saved["runs"]] == ["a", "b"]


def test_discover_errors(tmp_path):
    with pytest.raises(DataError):
        discover_runs([tmp_path])
    with pytest.raises(DataError):
        discover_runs([tmp_path / "absent"])


def test_load_run_errors(tmp_path):
    with pytest.raises(DataError):
        load_run(tmp_path)
    (tmp_path / "metrics.json").write_text("{not json")
    with pytest.raises(DataError):
        load_run(tmp_path)
    (tmp_path / "metrics.json").write_text(json.dumps({"arch": "m"}))
    with pytest.raises(DataError):
        load_run(tmp_path)
