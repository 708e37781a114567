from __future__ import annotations

import json
import logging
import re
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Iterable, Sequence

from config_store import DEFAULT_INSTRUCTION
from engine.tokenizer import BpeTokenizer
from util.jsonl import read_jsonl, write_jsonl

_log = logging.getLogger(__name__)

_LAST_WORD_RE = re.compile(r"^(?P<head>.*?)\s+(?P<tail>\S+)$", re.S)

DATASET_FIELDS = ("idiom_text", "prompt", "target_word", "target_token", "source_index")


class DatasetError(Exception):
    pass


@dataclass(frozen=True)
class IdiomSample:
    idiom_text: str
    prompt: str
    target_word: str
    target_token: int
    source_index: int

    def to_record(self) -> dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_record(cls, raw: dict[str, Any]) -> "IdiomSample":
        missing = [k for k in DATASET_FIELDS if k not in raw]
        if missing:
            raise DatasetError(f"dataset record lacks {', '.join(missing)}")
        try:
            return cls(
                idiom_text=str(raw["idiom_text"]),
                prompt=str(raw["prompt"]),
                target_word=str(raw["target_word"]),
                target_token=int(raw["target_token"]),
                source_index=int(raw["source_index"]),
            )
        except (TypeError, ValueError) as exc:
            raise DatasetError(f"dataset record has a malformed field: {exc}") from exc


@dataclass
class DatasetBuildReport:
    source_count: int = 0
    accepted: int = 0
    excluded_multitoken: int = 0
    excluded_other: int = 0
    reasons: list[tuple[int, str]] = field(default_factory=list)

    @property
    def excluded(self) -> int:
        return self.excluded_multitoken + self.excluded_other

    def to_dict(self) -> dict[str, Any]:
        return {
            "source_count": self.source_count,
            "accepted": self.accepted,
            "excluded_multitoken": self.excluded_multitoken,
            "excluded_other": self.excluded_other,
            # the two readings of a published corpus size: after and before the multi-token exclusions
            "count_after_exclusions": self.accepted,
            "count_before_multitoken_exclusions": self.accepted + self.excluded_multitoken,
            "reasons": [{"source_index": i, "reason": r} for i, r in self.reasons],
        }


def split_idiom(idiom: str) -> tuple[str, str] | None:
    match = _LAST_WORD_RE.match(idiom.strip())
    if match is None or not match.group("head").strip():
        return None
    return match.group("head"), match.group("tail")


def build_prompt(instruction: str, head: str, joiner: str = " ") -> str:
    return f"{instruction}{joiner}{head}"


def build_dataset(
    source: Sequence[str],
    tokenizer: BpeTokenizer,
    instruction: str = DEFAULT_INSTRUCTION,
    joiner: str = " ",
) -> tuple[list[IdiomSample], DatasetBuildReport]:
    report = DatasetBuildReport(source_count=len(source))
    samples: list[IdiomSample] = []
    for index, idiom in enumerate(source):
        parts = split_idiom(idiom)
        if parts is None:
            report.excluded_other += 1
            report.reasons.append((index, "fewer than two words"))
            continue
        head, target_word = parts
        token = tokenizer.as_single_token(target_word, with_leading_space=True)
        if token is None:
            report.excluded_multitoken += 1
            pieces = [tokenizer.token_text(t) for t in tokenizer.encode(" " + target_word)]
            report.reasons.append((index, f"multi-token target {pieces!r}"))
            continue
        samples.append(
            IdiomSample(
                idiom_text=f"{head} {target_word}",
                prompt=build_prompt(instruction, head, joiner),
                target_word=target_word,
                target_token=token,
                source_index=index,
            )
        )
        report.accepted += 1
    _log.info(
        "Built idiom dataset: %d accepted, %d multi-token, %d other",
        report.accepted,
        report.excluded_multitoken,
        report.excluded_other,
    )
    return samples, report


def load_epie(path: str | Path) -> list[str]:
    """Idioms in source order from a one-per-line text file or a JSONL file of {"idiom": ...}."""
    path = Path(path)
    try:
        if path.suffix.lower() == ".jsonl":
            idioms: list[str] = []
            for record in read_jsonl(path):
                if "idiom" not in record:
                    raise DatasetError(f"{path}: record without an 'idiom' field")
                idioms.append(str(record["idiom"]))
            return idioms
        text = path.read_text(encoding="utf-8")
    except (OSError, ValueError) as exc:
        raise DatasetError(f"cannot read idioms from {path}: {exc}") from exc
    return [line.rstrip("\r") for line in text.split("\n") if line.strip()]


def export_jsonl(idioms: Iterable[str], path: str | Path) -> int:
    return write_jsonl(path, ({"idiom": idiom} for idiom in idioms))


def write_dataset(samples: Iterable[IdiomSample], path: str | Path) -> int:
    return write_jsonl(path, (s.to_record() for s in samples))


def load_dataset(path: str | Path) -> list[IdiomSample]:
    try:
        records = read_jsonl(path)
    except (OSError, ValueError) as exc:
        raise DatasetError(f"cannot read dataset {path}: {exc}") from exc
    return [IdiomSample.from_record(r) for r in records]


def is_built_dataset(path: str | Path) -> bool:
    path = Path(path)
    if path.suffix.lower() != ".jsonl":
        return False
    try:
        with open(path, "r", encoding="utf-8") as f:
            for line in f:
                if line.strip():
                    first = json.loads(line)
                    return isinstance(first, dict) and "prompt" in first
    except (OSError, json.JSONDecodeError):
        return False
    return False


def write_build_report(report: DatasetBuildReport, path: str | Path) -> None:
    Path(path).write_text(json.dumps(report.to_dict(), indent=2, ensure_ascii=False) + "\n", encoding="utf-8")
