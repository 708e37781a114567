from __future__ import annotations

import json
import os
import subprocess
import sys
from pathlib import Path

import psutil
import pytest

from analysis.experiment import ExperimentOptions, extreme_samples, run_idiom_experiment
from conftest import make_samples
from report import records
from report.markdown_report import build_report, render_markdown, write_report
from report.writers import RunLock, RunLockedError, RunManifest, manifest_id_for, write_csv, write_manifest
from util.paths import LOCK_FILENAME


@pytest.fixture
def result(text_bundle, tokenizer):
    samples = make_samples(text_bundle, tokenizer)
    return run_idiom_experiment(text_bundle, tokenizer, samples, ExperimentOptions(progress=False))


class TestRecords:
    def test_check_record_rejects_extra_fields(self) -> None:
        with pytest.raises(records.SchemaError):
            records.check_record({"layer": 0, "extra": 1}, ("layer",))

    def test_aggregate_rows_cover_groups(self, result) -> None:
        rows = records.aggregate_rows(result.aggregates)
        assert {r["group"] for r in rows} == {"correct", "incorrect", "all"}
        assert all(tuple(r) == records.AGGREGATE_FIELDS for r in rows)
        assert all(r["n_outliers"] == len(r["outliers"].split()) for r in rows)

    def test_roc_rows_start_without_cutoff(self, result) -> None:
        rows = records.roc_rows(result.roc)
        assert rows[0]["threshold"] is None
        assert (rows[0]["fpr"], rows[0]["tpr"]) == (0.0, 0.0)
        assert (rows[-1]["fpr"], rows[-1]["tpr"]) == (1.0, 1.0)

    def test_extreme_rows(self, result, tokenizer) -> None:
        lowest, highest = extreme_samples(result.outcomes, 2)
        rows = records.extreme_rows(lowest, highest, tokenizer)
        n_rows = len(result.outcomes[0].profile.top_token)
        assert len(rows) == 4 * n_rows
        assert {r["kind"] for r in rows} == {"lowest", "highest"}

    def test_metric_series(self) -> None:
        assert records.metric_series("ce") == ("ce_vs_sampled", "ce_vs_gold")
        assert len(records.metric_series("all")) == 6


class TestMarkdownReport:
    def test_report_contents(self, result, tokenizer, tmp_path: Path) -> None:
        summary = records.build_summary(result, "abc123")
        lowest, highest = extreme_samples(result.outcomes, 2)
        text = build_report(result, summary, lowest, highest, tokenizer)
        assert "`abc123`" in text
        assert "| sum |" in text
        md_path, html_path = write_report(tmp_path, text)
        assert md_path.read_text(encoding="utf-8") == text
        assert "<table>" in html_path.read_text(encoding="utf-8")

    def test_render_html(self) -> None:
        assert "<h1>" in render_markdown("# title")


class TestWriters:
    def test_csv_floats_round_trip(self, tmp_path: Path) -> None:
        path = write_csv(tmp_path / "t.csv", [{"a": 0.1 + 0.2, "b": None}], ("a", "b"))
        assert path.read_text(encoding="utf-8") == "a,b\n0.30000000000000004,\n"

    def test_manifest_id_is_stable(self) -> None:
        assert manifest_id_for({"a": 1, "b": 2}) == manifest_id_for({"b": 2, "a": 1})
        assert manifest_id_for({"a": 1}) != manifest_id_for({"a": 2})

    def test_manifest_lists_outputs(self, tmp_path: Path) -> None:
        data = tmp_path / "x.csv"
        data.write_text("a\n", encoding="utf-8")
        manifest = RunManifest("id", "idioms", "m", None, None, None, 42, 0.8, "gold", "t0")
        manifest.add_outputs([data])
        raw = json.loads(write_manifest(tmp_path, manifest).read_text(encoding="utf-8"))
        assert raw["outputs"][0]["file"] == "x.csv"
        assert len(raw["outputs"][0]["sha256"]) == 64

    def test_lock_is_exclusive(self, tmp_path: Path) -> None:
        with RunLock(tmp_path):
            assert (tmp_path / LOCK_FILENAME).exists()
            with pytest.raises(RunLockedError):
                with RunLock(tmp_path):
                    pass
            assert (tmp_path / LOCK_FILENAME).exists()
        assert not (tmp_path / LOCK_FILENAME).exists()

    def test_lock_left_by_dead_process_is_replaced(self, tmp_path: Path) -> None:
        child = subprocess.Popen([sys.executable, "-c", "pass"])
        child.wait()
        lock = tmp_path / LOCK_FILENAME
        lock.write_text(f"{child.pid}\n", encoding="utf-8")
        with RunLock(tmp_path):
            assert lock.read_text(encoding="utf-8") == f"{os.getpid()}\n"
        assert not lock.exists()

    def test_lock_of_live_process_is_kept(self, tmp_path: Path) -> None:
        lock = tmp_path / LOCK_FILENAME
        lock.write_text(f"{os.getppid()}\n", encoding="utf-8")
        with pytest.raises(RunLockedError):
            with RunLock(tmp_path):
                pass
        assert lock.read_text(encoding="utf-8") == f"{os.getppid()}\n"

    def test_unreadable_lock_is_kept(self, tmp_path: Path, monkeypatch: pytest.MonkeyPatch) -> None:
        monkeypatch.setattr(psutil, "pid_exists", lambda pid: False)
        lock = tmp_path / LOCK_FILENAME
        lock.write_text("", encoding="utf-8")
        with pytest.raises(RunLockedError):
            with RunLock(tmp_path):
                pass
        assert lock.exists()
