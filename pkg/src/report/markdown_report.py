from __future__ import annotations

import html
from pathlib import Path
from typing import Any, Sequence

import markdown

from analysis.experiment import IdiomRunResult, SampleOutcome
from app_info import APP_NAME, VERSION
from engine.tokenizer import BpeTokenizer

_HTML_HEAD = '<!DOCTYPE html>\n<html>\n<head>\n<meta charset="utf-8">\n<title>{title}</title>\n</head>\n<body>\n'
_HTML_TAIL = "</body>\n</html>\n"


def _cell(text: str) -> str:
    # leading spaces and newlines carry meaning in token texts
    return text.replace("|", "\\|").replace("\n", "\\n").replace(" ", "\u2423") or "\u2205"


def _fmt(value: float | None, digits: int = 4) -> str:
    return "n/a" if value is None else f"{value:.{digits}f}"


def _token_table(outcomes: Sequence[SampleOutcome], tokenizer: BpeTokenizer) -> list[str]:
    if not outcomes:
        return ["_none_", ""]
    n_rows = outcomes[0].profile.n_layer + 1
    header = "| layer | " + " | ".join(_cell(o.sample.target_word) for o in outcomes) + " |"
    lines = [header, "|---:|" + "---|" * len(outcomes)]
    for layer in range(n_rows):
        cells = [_cell(tokenizer.token_text(o.profile.top_token[layer])) for o in outcomes]
        lines.append(f"| {layer} | " + " | ".join(cells) + " |")
    lines.append("| output CE | " + " | ".join(_fmt(o.profile.output_ce) for o in outcomes) + " |")
    lines.append("")
    return lines


def build_report(
    result: IdiomRunResult,
    summary: dict[str, Any],
    lowest: Sequence[SampleOutcome],
    highest: Sequence[SampleOutcome],
    tokenizer: BpeTokenizer,
) -> str:
    counts = summary["counts"]
    fits = summary["fits"]
    thr = summary["threshold_report"]
    lines = [
        f"# {APP_NAME} idiom run",
        "",
        f"Run `{summary['manifest_id']}`, {APP_NAME} {VERSION}.",
        "",
        "## Summary",
        "",
        "| quantity | value |",
        "|---|---:|",
        f"| samples | {counts['samples']} |",
        f"| correct | {counts['correct']} |",
        f"| incorrect | {counts['incorrect']} |",
        f"| failed | {counts['failed']} |",
        f"| AUC (output CE) | {_fmt(summary['auc'])} |",
        f"| Mann-Whitney U | {_fmt(summary['u_statistic'], 1)} |",
        f"| correct: exponential mean | {_fmt(fits['correct_exponential_mean'])} |",
        f"| incorrect: normal mean | {_fmt(fits['incorrect_normal_mean'])} |",
        f"| incorrect: normal std | {_fmt(fits['incorrect_normal_std'])} |",
        f"| threshold | {_fmt(thr['threshold'], 2)} |",
        f"| flagged precision | {_fmt(thr['precision'])} |",
        f"| flagged recall | {_fmt(thr['recall'])} |",
        "",
    ]
    if summary["roc_undefined"]:
        lines += [f"ROC not computed: {summary['roc_undefined']}", ""]

    table = result.delta_table
    lines += [f"## Per-layer change in cross-entropy vs {table.target} token", ""]
    lines += ["| layer | correct | incorrect | all |", "|---:|---:|---:|---:|"]
    for row in table.rows:
        lines.append(f"| {row.layer} | {_fmt(row.correct)} | {_fmt(row.incorrect)} | {_fmt(row.all)} |")
    lines.append(
        f"| sum | {_fmt(table.column_sum('correct'))} | {_fmt(table.column_sum('incorrect'))} | {_fmt(table.column_sum('all'))} |"
    )
    lines.append("")

    lines += ["## Top residual-prediction token per layer, lowest output CE", ""]
    lines += _token_table(lowest, tokenizer)
    lines += ["## Top residual-prediction token per layer, highest output CE", ""]
    lines += _token_table(highest, tokenizer)

    if result.failures:
        lines += ["## Failed samples", ""]
        lines += [f"- {f.source_index}: {f.reason}" for f in result.failures]
        lines.append("")
    return "\n".join(lines)


def render_markdown(text: str) -> str:
    try:
        return markdown.markdown(text, extensions=["tables", "sane_lists"], output_format="html5")
    except Exception:
        return "<pre>" + html.escape(text) + "</pre>"


def write_report(out_dir: str | Path, text: str) -> tuple[Path, Path]:
    out = Path(out_dir)
    md_path = out / "report.md"
    html_path = out / "report.html"
    md_path.write_text(text, encoding="utf-8", newline="\n")
    body = render_markdown(text)
    html_path.write_text(
        _HTML_HEAD.format(title=html.escape(APP_NAME)) + body + "\n" + _HTML_TAIL,
        encoding="utf-8",
        newline="\n",
    )
    return md_path, html_path
