from __future__ import annotations

import json
import os
from pathlib import Path

import pandas as pd
import pytest

from analysis.idiom_dataset import write_dataset
from conftest import IDIOMS, make_samples
from engine.checkpoint_io import CheckpointBundle
from engine.tokenizer import BpeTokenizer
from main import EXIT_OK, EXIT_RUNTIME, EXIT_USAGE, EXIT_VALIDATION, main
from report import records
from util.filehash import sha256_file
from util.jsonl import read_jsonl
from util.paths import LOCK_FILENAME

IDIOM_OUTPUTS = (
    "profiles.jsonl",
    "aggregates.csv",
    "delta_loss.csv",
    "roc.csv",
    "extremes.csv",
    "summary.json",
    "report.md",
    "report.html",
    "manifest.json",
)


@pytest.fixture
def dataset(tmp_path: Path, text_bundle: CheckpointBundle, tokenizer: BpeTokenizer) -> Path:
    path = tmp_path / "dataset.jsonl"
    write_dataset(make_samples(text_bundle, tokenizer), path)
    return path


def _idioms(model_dir: Path, dataset: Path, out: Path, *extra: str) -> int:
    return main(["idioms", "--model-dir", str(model_dir), "--dataset", str(dataset), "--out", str(out), "--quiet", *extra])


def _header(path: Path) -> tuple[str, ...]:
    return tuple(path.read_text(encoding="utf-8").splitlines()[0].split(","))


class TestBuildDataset:
    def test_writes_dataset_and_report(self, model_dir: Path, idiom_file: Path, tmp_path: Path) -> None:
        out = tmp_path / "built"
        code = main(["build-dataset", "--model-dir", str(model_dir), "--idioms", str(idiom_file), "--out", str(out), "--quiet"])
        assert code == EXIT_OK
        rows = read_jsonl(out / "dataset.jsonl")
        assert [r["target_word"] for r in rows] == ["words", "words"]
        report = json.loads((out / "build_report.json").read_text(encoding="utf-8"))
        assert report["source_count"] == len(IDIOMS)
        assert report["accepted"] + report["excluded_multitoken"] + report["excluded_other"] == len(IDIOMS)
        assert (out / "manifest.json").exists()
        assert not (out / LOCK_FILENAME).exists()


class TestIdioms:
    def test_all_outputs_and_schemas(self, model_dir: Path, dataset: Path, tmp_path: Path) -> None:
        out = tmp_path / "run"
        assert _idioms(model_dir, dataset, out) == EXIT_OK
        for name in IDIOM_OUTPUTS:
            assert (out / name).exists(), name
        assert not (out / LOCK_FILENAME).exists()
        profiles = read_jsonl(out / "profiles.jsonl")
        assert len(profiles) == 10
        assert all(tuple(p) == records.PROFILE_FIELDS for p in profiles)
        assert _header(out / "aggregates.csv") == records.AGGREGATE_FIELDS
        assert _header(out / "delta_loss.csv") == records.DELTA_FIELDS
        assert _header(out / "roc.csv") == records.ROC_FIELDS
        assert _header(out / "extremes.csv") == records.EXTREME_FIELDS
        summary = json.loads((out / "summary.json").read_text(encoding="utf-8"))
        assert tuple(summary) == records.SUMMARY_FIELDS
        assert summary["counts"] == {"samples": 10, "correct": 5, "incorrect": 5, "failed": 0}
        assert {p["manifest_id"] for p in profiles} == {summary["manifest_id"]}

    def test_auc_recomputes_from_roc_points(self, model_dir: Path, dataset: Path, tmp_path: Path) -> None:
        out = tmp_path / "run"
        assert _idioms(model_dir, dataset, out) == EXIT_OK
        roc = pd.read_csv(out / "roc.csv", float_precision="round_trip")
        fpr, tpr = roc["fpr"].tolist(), roc["tpr"].tolist()
        area = sum((fpr[i] - fpr[i - 1]) * (tpr[i] + tpr[i - 1]) / 2 for i in range(1, len(fpr)))
        summary = json.loads((out / "summary.json").read_text(encoding="utf-8"))
        assert summary["auc"] == pytest.approx(area, abs=1e-9)
        assert summary["auc"] == pytest.approx(summary["u_statistic"] / 25, abs=1e-9)

    def test_rerun_is_byte_identical(self, model_dir: Path, dataset: Path, tmp_path: Path) -> None:
        assert _idioms(model_dir, dataset, tmp_path / "a") == EXIT_OK
        assert _idioms(model_dir, dataset, tmp_path / "b", "--workers", "1") == EXIT_OK
        for name in IDIOM_OUTPUTS:
            if name == "manifest.json":
                continue
            assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes(), name
        manifest = json.loads((tmp_path / "a" / "manifest.json").read_text(encoding="utf-8"))
        listed = {o["file"]: o["sha256"] for o in manifest["outputs"]}
        assert listed["profiles.jsonl"] == sha256_file(tmp_path / "a" / "profiles.jsonl")

    def test_json_format(self, model_dir: Path, dataset: Path, tmp_path: Path) -> None:
        out = tmp_path / "run"
        assert _idioms(model_dir, dataset, out, "--format", "json", "--metric", "kl") == EXIT_OK
        rows = json.loads((out / "aggregates.json").read_text(encoding="utf-8"))
        assert {r["metric"] for r in rows} == {"kl_vs_output_logits", "kl_vs_sampled_onehot"}
        assert not (out / "aggregates.csv").exists()

    def test_raw_idioms_are_built_on_the_fly(self, model_dir: Path, idiom_file: Path, tmp_path: Path) -> None:
        out = tmp_path / "run"
        assert _idioms(model_dir, idiom_file, out) == EXIT_OK
        assert len(read_jsonl(out / "profiles.jsonl")) == 2

    def test_sampled_delta_target(self, model_dir: Path, dataset: Path, tmp_path: Path) -> None:
        out = tmp_path / "run"
        assert _idioms(model_dir, dataset, out, "--target", "sampled") == EXIT_OK
        assert set(pd.read_csv(out / "delta_loss.csv")["target"]) == {"sampled"}


class TestGenerate:
    def _run(self, model_dir: Path, out: Path, *extra: str) -> int:
        return main(["generate", "--model-dir", str(model_dir), "--prompt", "Alan Turing", "--out", str(out), "--quiet", *extra])

    def test_zero_tokens(self, model_dir: Path, tmp_path: Path) -> None:
        out = tmp_path / "gen"
        assert self._run(model_dir, out, "--max-tokens", "0") == EXIT_OK
        assert (out / "tokens.jsonl").read_text(encoding="utf-8") == ""

    def test_greedy_columns_identical(self, model_dir: Path, tmp_path: Path) -> None:
        out = tmp_path / "gen"
        assert self._run(model_dir, out, "--greedy", "--max-tokens", "6") == EXIT_OK
        rows = read_jsonl(out / "tokens.jsonl")
        assert len(rows) == 6
        assert all(tuple(r) == records.TOKEN_FIELDS for r in rows)
        assert all(r["ce_vs_argmax"] == r["ce_vs_sampled"] for r in rows)
        assert _header(out / "tokens.csv") == records.TOKEN_FIELDS

    def test_seeded_rerun_is_byte_identical(self, model_dir: Path, tmp_path: Path) -> None:
        args = ("--seed", "42", "--temperature", "0.8", "--max-tokens", "10")
        assert self._run(model_dir, tmp_path / "a", *args) == EXIT_OK
        assert self._run(model_dir, tmp_path / "b", *args) == EXIT_OK
        for name in ("tokens.jsonl", "tokens.csv"):
            assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()

    def test_render(self, model_dir: Path, tmp_path: Path) -> None:
        pytest.importorskip("PIL")
        out = tmp_path / "gen"
        assert self._run(model_dir, out, "--max-tokens", "4", "--render") == EXIT_OK
        assert (out / "tokens.png").read_bytes()[:8] == b"\x89PNG\r\n\x1a\n"


class TestTrace:
    def _run(self, model_dir: Path, out: Path, prompt: str, *extra: str) -> int:
        return main(["trace", "--model-dir", str(model_dir), "--prompt", prompt, "--out", str(out), "--quiet", *extra])

    def test_rows_and_final_token(self, model_dir: Path, tmp_path: Path, text_bundle: CheckpointBundle) -> None:
        out = tmp_path / "trace"
        assert self._run(model_dir, out, "Actions speak louder than", "--gold", "words", "--format", "json") == EXIT_OK
        rows = json.loads((out / "trace.json").read_text(encoding="utf-8"))
        assert len(rows) == text_bundle.config.n_layer + 1
        assert tuple(rows[0]) == records.trace_fields("all")
        assert all(r["ce_vs_gold"] is not None for r in rows)
        assert rows[-1]["kl_vs_output_logits"] <= 1e-6

    def test_matches_idiom_profiles(self, model_dir: Path, dataset: Path, tmp_path: Path) -> None:
        assert _idioms(model_dir, dataset, tmp_path / "run") == EXIT_OK
        profile = read_jsonl(tmp_path / "run" / "profiles.jsonl")[0]
        assert self._run(model_dir, tmp_path / "trace", profile["prompt"], "--format", "json") == EXIT_OK
        rows = json.loads((tmp_path / "trace" / "trace.json").read_text(encoding="utf-8"))
        assert [r["ce_vs_sampled"] for r in rows] == profile["ce_vs_sampled"]
        assert [r["top_token"] for r in rows] == profile["top_token"]
        assert rows[-1]["top_token"] == profile["sampled_token"]

    def test_metric_narrows_columns(self, model_dir: Path, tmp_path: Path) -> None:
        out = tmp_path / "trace"
        assert self._run(model_dir, out, "Alan", "--metric", "cosine") == EXIT_OK
        assert _header(out / "trace.csv") == records.TRACE_BASE_FIELDS + ("cosine_vs_sampled", "cosine_vs_gold")

    def test_multitoken_gold(self, model_dir: Path, tmp_path: Path) -> None:
        assert self._run(model_dir, tmp_path / "trace", "Be", "--gold", "helpful") == EXIT_VALIDATION


class TestExitCodes:
    def test_unknown_flag(self, tmp_path: Path) -> None:
        assert main(["idioms", "--bogus"]) == EXIT_USAGE

    def test_missing_command(self) -> None:
        assert main([]) == EXIT_USAGE

    def test_bad_workers(self, model_dir: Path, dataset: Path, tmp_path: Path) -> None:
        assert _idioms(model_dir, dataset, tmp_path / "run", "--workers", "0") == EXIT_USAGE

    @pytest.mark.parametrize(
        "flags",
        [
            ("--temperature", "0"),
            ("--temperature", "-1.5"),
            ("--max-tokens", "-3"),
            ("--seed", "-1"),
        ],
    )
    def test_bad_sampler_flags(self, model_dir: Path, tmp_path: Path, flags: tuple[str, str]) -> None:
        out = tmp_path / "gen"
        argv = ["generate", "--model-dir", str(model_dir), "--prompt", "Alan Turing", "--out", str(out), "--quiet"]
        assert main([*argv, *flags]) == EXIT_USAGE
        assert not out.exists()

    def test_sampler_flags_checked_before_model_load(self, tmp_path: Path) -> None:
        argv = ["generate", "--model-dir", str(tmp_path / "nowhere"), "--prompt", "x", "--out", str(tmp_path / "gen")]
        assert main([*argv, "--temperature", "0"]) == EXIT_USAGE

    def test_greedy_ignores_temperature(self, model_dir: Path, tmp_path: Path) -> None:
        argv = ["generate", "--model-dir", str(model_dir), "--prompt", "Alan Turing", "--out", str(tmp_path / "gen")]
        assert main([*argv, "--quiet", "--greedy", "--temperature", "0", "--max-tokens", "2"]) == EXIT_OK

    def test_missing_model(self, dataset: Path, tmp_path: Path) -> None:
        assert _idioms(tmp_path / "nowhere", dataset, tmp_path / "run") == EXIT_VALIDATION

    def test_missing_dataset(self, model_dir: Path, tmp_path: Path) -> None:
        assert _idioms(model_dir, tmp_path / "missing.txt", tmp_path / "run") == EXIT_VALIDATION

    def test_locked_output(self, model_dir: Path, dataset: Path, tmp_path: Path) -> None:
        out = tmp_path / "run"
        out.mkdir()
        (out / LOCK_FILENAME).write_text(f"{os.getpid()}\n", encoding="utf-8")
        assert _idioms(model_dir, dataset, out) == EXIT_RUNTIME
        assert not (out / "summary.json").exists()
