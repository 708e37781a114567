from __future__ import annotations

import argparse
import logging
import math
import sys
from dataclasses import asdict
from logging.handlers import RotatingFileHandler
from pathlib import Path
from typing import Any, Sequence

from analysis.experiment import ExperimentOptions, extreme_samples, generation_scan, run_idiom_experiment
from analysis.idiom_dataset import (
    DatasetError,
    build_dataset,
    is_built_dataset,
    load_dataset,
    load_epie,
    write_build_report,
    write_dataset,
)
from analysis.lens_metrics import build_profile
from app_info import APP_NAME, APP_SLUG, VERSION
from config_store import FORMAT_CHOICES, METRIC_CHOICES, TARGET_KINDS, ConfigStore, RunConfig
from engine.checkpoint_io import CheckpointBundle, CheckpointError, checkpoint_digest, load_checkpoint
from engine.model_runtime import SamplerConfig, forward
from engine.tensor_ops import ContractError
from engine.tokenizer import BpeTokenizer, VocabError, load_vocab
from report import records
from report.markdown_report import build_report, write_report
from report.render import render_token_chart
from report.writers import (
    RunLock,
    RunLockedError,
    RunManifest,
    manifest_id_for,
    source_revision,
    write_json,
    write_manifest,
    write_records,
    write_table,
)
from util.filehash import sha256_file
from util.i18n import set_language, t
from util.paths import ensure_dirs, logs_dir, output_path
from util.timefmt import now_iso

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_VALIDATION = 2
EXIT_RUNTIME = 3

_log = logging.getLogger(APP_SLUG)

# config fields that never change a data file
_ECHO_EXCLUDED = ("language", "log_level", "workers", "output_format")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message: str) -> None:  # type: ignore[override]
        raise UsageError(message)


def setup_logging(level: str = "INFO", console_level: int = logging.WARNING) -> None:
    ensure_dirs()
    log_file = logs_dir() / "app.log"
    handler = RotatingFileHandler(log_file, maxBytes=1_000_000, backupCount=3, encoding="utf-8")
    formatter = logging.Formatter("%(asctime)s [%(levelname)s] %(name)s: %(message)s")
    handler.setFormatter(formatter)
    console = logging.StreamHandler(sys.stderr)
    console.setFormatter(logging.Formatter("%(levelname)s: %(message)s"))
    console.setLevel(console_level)

    root = logging.getLogger()
    for old in [h for h in root.handlers if getattr(h, "_lens_harness", False)]:
        root.removeHandler(old)
        old.close()
    for new in (handler, console):
        new._lens_harness = True  # type: ignore[attr-defined]
        root.addHandler(new)
    root.setLevel(getattr(logging, level.upper(), logging.INFO))


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog=APP_SLUG, description=t("cli.description", app=APP_NAME))
    parser.add_argument("--version", action="version", version=f"{APP_NAME} {VERSION}")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(p: argparse.ArgumentParser) -> None:
        p.add_argument("--model-dir", required=True, type=Path, help=t("cli.help.model_dir"))
        p.add_argument("--out", required=True, type=Path, help=t("cli.help.out"))
        p.add_argument("--quiet", action="store_true", help=t("cli.help.quiet"))
        p.add_argument("--verbose", action="store_true", help=t("cli.help.verbose"))

    build = sub.add_parser("build-dataset", help=t("cli.help.build_dataset"))
    common(build)
    build.add_argument("--idioms", required=True, type=Path, help=t("cli.help.idioms"))

    idioms = sub.add_parser("idioms", help=t("cli.help.idioms_cmd"))
    common(idioms)
    idioms.add_argument("--dataset", required=True, type=Path, help=t("cli.help.dataset"))
    idioms.add_argument("--target", choices=TARGET_KINDS, help=t("cli.help.target"))
    idioms.add_argument("--metric", choices=METRIC_CHOICES, help=t("cli.help.metric"))
    idioms.add_argument("--threshold", type=float, help=t("cli.help.threshold"))
    idioms.add_argument("--format", dest="output_format", choices=FORMAT_CHOICES, help=t("cli.help.format"))
    idioms.add_argument("--workers", type=int, help=t("cli.help.workers"))
    idioms.add_argument("--extremes", dest="extremes_count", type=int, help=t("cli.help.extremes"))

    gen = sub.add_parser("generate", help=t("cli.help.generate"))
    common(gen)
    gen.add_argument("--prompt", required=True, help=t("cli.help.prompt"))
    gen.add_argument("--seed", type=int, help=t("cli.help.seed"))
    gen.add_argument("--temperature", type=float, help=t("cli.help.temperature"))
    gen.add_argument("--max-tokens", dest="max_tokens", type=int, help=t("cli.help.max_tokens"))
    gen.add_argument("--greedy", action="store_true", help=t("cli.help.greedy"))
    gen.add_argument("--threshold", type=float, help=t("cli.help.threshold"))
    gen.add_argument("--flag-target", choices=("argmax", "drawn"), default="argmax", help=t("cli.help.flag_target"))
    gen.add_argument("--format", dest="output_format", choices=FORMAT_CHOICES, help=t("cli.help.format"))
    gen.add_argument("--render", action="store_true", help=t("cli.help.render"))

    trace = sub.add_parser("trace", help=t("cli.help.trace"))
    common(trace)
    trace.add_argument("--prompt", required=True, help=t("cli.help.prompt"))
    trace.add_argument("--gold", help=t("cli.help.gold"))
    trace.add_argument("--metric", choices=METRIC_CHOICES, help=t("cli.help.metric"))
    trace.add_argument("--format", dest="output_format", choices=FORMAT_CHOICES, help=t("cli.help.format"))
    return parser


def _run_config(store: ConfigStore, args: argparse.Namespace) -> RunConfig:
    keys = ("target", "metric", "threshold", "output_format", "workers", "extremes_count", "seed", "temperature", "max_tokens")
    cfg = store.with_overrides(**{k: getattr(args, k, None) for k in keys})
    if cfg.workers < 1:
        raise UsageError(t("cli.error.workers", value=cfg.workers))
    if cfg.seed < 0:
        raise UsageError(t("cli.error.seed", value=cfg.seed))
    if cfg.max_tokens < 0:
        raise UsageError(t("cli.error.max_tokens", value=cfg.max_tokens))
    if cfg.extremes_count < 0:
        raise UsageError(t("cli.error.extremes", value=cfg.extremes_count))
    if not math.isfinite(cfg.threshold):
        raise UsageError(t("cli.error.threshold", value=cfg.threshold))
    if not getattr(args, "greedy", False) and not (cfg.temperature > 0 and math.isfinite(cfg.temperature)):
        raise UsageError(t("cli.error.temperature", value=cfg.temperature))
    return cfg


def _config_echo(cfg: RunConfig, command: str, **extra: Any) -> dict[str, Any]:
    echo = {k: v for k, v in asdict(cfg).items() if k not in _ECHO_EXCLUDED}
    return {"command": command, **echo, **extra}


def _load_model(model_dir: Path) -> tuple[CheckpointBundle, BpeTokenizer]:
    bundle = load_checkpoint(model_dir)
    tokenizer = load_vocab(model_dir)
    if tokenizer.vocab_size > bundle.config.vocab_size:
        raise VocabError(
            f"tokenizer has {tokenizer.vocab_size} tokens but the model only embeds {bundle.config.vocab_size}"
        )
    return bundle, tokenizer


def _manifest(
    command: str,
    args: argparse.Namespace,
    cfg: RunConfig,
    echo: dict[str, Any],
    dataset: Path | None = None,
) -> RunManifest:
    return RunManifest(
        manifest_id=manifest_id_for(echo),
        command=command,
        model_dir=str(args.model_dir),
        dataset=str(dataset) if dataset else None,
        source_revision=source_revision(),
        weights_digest=echo.get("weights_digest"),
        seed=cfg.seed,
        temperature=cfg.temperature,
        target_kind=cfg.target,
        started_at=now_iso(),
        config=echo,
    )


def _finish(out: Path, manifest: RunManifest, written: Sequence[Path]) -> None:
    manifest.add_outputs(written)
    manifest.finished_at = now_iso()
    write_manifest(out, manifest)


def cmd_build_dataset(args: argparse.Namespace, store: ConfigStore) -> int:
    cfg = _run_config(store, args)
    tokenizer = load_vocab(args.model_dir)
    source = load_epie(args.idioms)
    samples, report = build_dataset(source, tokenizer, instruction=cfg.instruction, joiner=cfg.joiner)
    echo = _config_echo(cfg, "build-dataset", idioms_digest=sha256_file(args.idioms))
    manifest = _manifest("build-dataset", args, cfg, echo, dataset=args.idioms)
    with RunLock(args.out):
        dataset_file = output_path(args.out, "dataset.jsonl")
        report_file = output_path(args.out, "build_report.json")
        write_dataset(samples, dataset_file)
        write_build_report(report, report_file)
        _finish(args.out, manifest, [dataset_file, report_file])
    if not args.quiet:
        print(
            t(
                "cli.done.build_dataset",
                accepted=report.accepted,
                multitoken=report.excluded_multitoken,
                other=report.excluded_other,
                out=args.out,
            )
        )
    return EXIT_OK


def cmd_idioms(args: argparse.Namespace, store: ConfigStore) -> int:
    cfg = _run_config(store, args)
    bundle, tokenizer = _load_model(args.model_dir)
    if is_built_dataset(args.dataset):
        samples = load_dataset(args.dataset)
    else:
        samples, _ = build_dataset(load_epie(args.dataset), tokenizer, instruction=cfg.instruction, joiner=cfg.joiner)
    if not samples:
        raise DatasetError(t("cli.error.empty_dataset", path=args.dataset))

    echo = _config_echo(
        cfg,
        "idioms",
        weights_digest=checkpoint_digest(args.model_dir),
        dataset_digest=sha256_file(args.dataset),
    )
    manifest = _manifest("idioms", args, cfg, echo, dataset=args.dataset)
    options = ExperimentOptions(
        workers=cfg.workers,
        threshold=cfg.threshold,
        delta_target=cfg.target,
        metrics=records.metric_series(cfg.metric),
        progress=not args.quiet,
    )
    with RunLock(args.out):
        result = run_idiom_experiment(bundle, tokenizer, samples, options)
        mid = manifest.manifest_id
        summary = records.build_summary(result, mid)
        lowest, highest = extreme_samples(result.outcomes, cfg.extremes_count)
        out = args.out
        fmt = cfg.output_format
        written = [
            write_records(
                output_path(out, "profiles.jsonl"),
                (records.build_profile_record(o, mid) for o in result.outcomes),
            ),
            write_table(out, "aggregates", records.aggregate_rows(result.aggregates), records.AGGREGATE_FIELDS, fmt),
            write_table(out, "delta_loss", records.delta_rows(result.delta_table), records.DELTA_FIELDS, fmt),
            write_table(out, "roc", records.roc_rows(result.roc), records.ROC_FIELDS, fmt),
            write_table(
                out, "extremes", records.extreme_rows(lowest, highest, tokenizer), records.EXTREME_FIELDS, fmt
            ),
            write_json(output_path(out, "summary.json"), summary),
        ]
        written += write_report(out, build_report(result, summary, lowest, highest, tokenizer))
        _finish(out, manifest, written)
    if not args.quiet:
        auc = summary["auc"]
        print(
            t(
                "cli.done.idioms",
                samples=len(result.outcomes),
                correct=summary["counts"]["correct"],
                incorrect=summary["counts"]["incorrect"],
                auc="n/a" if auc is None else f"{auc:.4f}",
                out=out,
            )
        )
    return EXIT_OK


def cmd_generate(args: argparse.Namespace, store: ConfigStore) -> int:
    cfg = _run_config(store, args)
    if not args.prompt:
        raise UsageError(t("cli.error.empty_prompt"))
    bundle, tokenizer = _load_model(args.model_dir)
    sampler = SamplerConfig(
        seed=cfg.seed,
        temperature=cfg.temperature,
        max_tokens=cfg.max_tokens,
        mode="greedy" if args.greedy else "temperature",
    )
    echo = _config_echo(
        cfg,
        "generate",
        weights_digest=checkpoint_digest(args.model_dir),
        prompt=args.prompt,
        mode=sampler.mode,
        flag_target=args.flag_target,
    )
    manifest = _manifest("generate", args, cfg, echo)
    with RunLock(args.out):
        scan = generation_scan(bundle, tokenizer, args.prompt, sampler, cfg.threshold, args.flag_target)
        rows = records.token_records(scan)
        written = [write_records(output_path(args.out, "tokens.jsonl"), rows)]
        if cfg.output_format == "csv":
            written.append(write_table(args.out, "tokens", rows, records.TOKEN_FIELDS, "csv"))
        if args.render:
            png = output_path(args.out, "tokens.png")
            if render_token_chart(scan.records, png, cfg.threshold, use_drawn=args.flag_target == "drawn"):
                written.append(png)
            else:
                _log.warning(t("cli.warn.render_skipped"))
        _finish(args.out, manifest, written)
    if scan.truncated:
        _log.warning(t("cli.warn.truncated", count=len(scan.records)))
    if not args.quiet:
        flagged = sum(r.flagged for r in scan.records)
        print(t("cli.done.generate", tokens=len(scan.records), flagged=flagged, out=args.out))
    return EXIT_OK


def cmd_trace(args: argparse.Namespace, store: ConfigStore) -> int:
    cfg = _run_config(store, args)
    if not args.prompt:
        raise UsageError(t("cli.error.empty_prompt"))
    bundle, tokenizer = _load_model(args.model_dir)
    gold: int | None = None
    if args.gold:
        gold = tokenizer.as_single_token(args.gold, with_leading_space=True)
        if gold is None:
            raise ContractError(t("cli.error.gold_multitoken", word=args.gold))
    echo = _config_echo(
        cfg,
        "trace",
        weights_digest=checkpoint_digest(args.model_dir),
        prompt=args.prompt,
        gold=args.gold,
    )
    manifest = _manifest("trace", args, cfg, echo)
    with RunLock(args.out):
        result = forward(bundle, tokenizer.encode(args.prompt))
        profile = build_profile(bundle, result.trace, gold=gold)
        rows = records.trace_rows(profile, tokenizer, cfg.metric)
        written = [write_table(args.out, "trace", rows, records.trace_fields(cfg.metric), cfg.output_format)]
        _finish(args.out, manifest, written)
    if not args.quiet:
        print(
            t(
                "cli.done.trace",
                layers=len(rows),
                token=tokenizer.token_text(profile.sampled_token),
                out=args.out,
            )
        )
    return EXIT_OK


COMMANDS = {
    "build-dataset": cmd_build_dataset,
    "idioms": cmd_idioms,
    "generate": cmd_generate,
    "trace": cmd_trace,
}


def main(argv: Sequence[str] | None = None) -> int:
    store = ConfigStore()
    store.load()
    set_language(store.config.language)
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        print(t("cli.error.usage", detail=exc), file=sys.stderr)
        return EXIT_USAGE

    console = logging.ERROR if args.quiet else logging.INFO if args.verbose else logging.WARNING
    setup_logging(store.config.log_level, console)
    _log.info("%s %s: %s", APP_NAME, VERSION, args.command)
    try:
        return COMMANDS[args.command](args, store)
    except UsageError as exc:
        _log.error(t("cli.error.usage", detail=exc))
        return EXIT_USAGE
    except CheckpointError as exc:
        _log.error(t("cli.error.checkpoint", detail=exc))
        return EXIT_VALIDATION
    except VocabError as exc:
        _log.error(t("cli.error.vocab", detail=exc))
        return EXIT_VALIDATION
    except DatasetError as exc:
        _log.error(t("cli.error.dataset", detail=exc))
        return EXIT_VALIDATION
    except (ContractError, records.SchemaError) as exc:
        _log.error(t("cli.error.contract", detail=exc))
        return EXIT_VALIDATION
    except RunLockedError as exc:
        _log.error(t("cli.error.locked", detail=exc))
        return EXIT_RUNTIME
    except OSError as exc:
        _log.error(t("cli.error.io", detail=exc))
        return EXIT_RUNTIME
    except Exception as exc:
        _log.exception(t("cli.error.unexpected", detail=exc))
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
