from __future__ import annotations

import json
import logging
import os
import subprocess
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Iterable, Sequence

import pandas as pd
import psutil

from util.filehash import sha256_file, sha256_text
from util.jsonl import write_jsonl
from util.paths import MANIFEST_FILENAME, lock_path, output_path

_log = logging.getLogger(__name__)

MANIFEST_VERSION = 1


class RunLockedError(RuntimeError):
    pass


def write_csv(path: str | Path, rows: Sequence[dict[str, Any]], columns: Sequence[str]) -> Path:
    target = Path(path)
    target.parent.mkdir(parents=True, exist_ok=True)
    frame = pd.DataFrame(list(rows), columns=list(columns))
    # pandas writes floats with repr(), which round-trips exactly
    frame.to_csv(target, index=False, lineterminator="\n", encoding="utf-8")
    return target


def write_json(path: str | Path, payload: Any) -> Path:
    target = Path(path)
    target.parent.mkdir(parents=True, exist_ok=True)
    target.write_text(json.dumps(payload, indent=2, ensure_ascii=False, allow_nan=False) + "\n", encoding="utf-8")
    return target


def write_records(path: str | Path, records: Iterable[dict[str, Any]]) -> Path:
    target = Path(path)
    write_jsonl(target, records)
    return target


def write_table(
    out_dir: str | Path,
    stem: str,
    rows: Sequence[dict[str, Any]],
    columns: Sequence[str],
    output_format: str = "csv",
) -> Path:
    if output_format == "json":
        return write_json(output_path(out_dir, f"{stem}.json"), [{c: row.get(c) for c in columns} for row in rows])
    return write_csv(output_path(out_dir, f"{stem}.csv"), rows, columns)


def source_revision() -> str | None:
    try:
        proc = subprocess.run(
            ["git", "rev-parse", "HEAD"],
            cwd=Path(__file__).resolve().parent,
            capture_output=True,
            text=True,
            timeout=5,
            check=False,
        )
    except (OSError, subprocess.SubprocessError):
        return None
    rev = proc.stdout.strip()
    return rev if proc.returncode == 0 and rev else None


def manifest_id_for(config_echo: dict[str, Any]) -> str:
    return sha256_text(json.dumps(config_echo, sort_keys=True, ensure_ascii=False))[:16]


@dataclass
class RunManifest:
    manifest_id: str
    command: str
    model_dir: str
    dataset: str | None
    source_revision: str | None
    weights_digest: str | None
    seed: int
    temperature: float
    target_kind: str
    started_at: str
    finished_at: str | None = None
    config: dict[str, Any] = field(default_factory=dict)
    outputs: list[dict[str, str]] = field(default_factory=list)

    def add_outputs(self, paths: Iterable[Path]) -> None:
        for path in paths:
            self.outputs.append({"file": path.name, "sha256": sha256_file(path)})

    def to_dict(self) -> dict[str, Any]:
        return {"v": MANIFEST_VERSION, **asdict(self)}


def write_manifest(out_dir: str | Path, manifest: RunManifest) -> Path:
    return write_json(output_path(out_dir, MANIFEST_FILENAME), manifest.to_dict())


def _lock_owner(path: Path) -> int | None:
    try:
        return int(path.read_text(encoding="utf-8").strip())
    except (OSError, ValueError):
        return None


class RunLock:
    def __init__(self, out_dir: str | Path) -> None:
        self.path = lock_path(out_dir)
        self._held = False

    def _create(self) -> None:
        fd = os.open(self.path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
        with os.fdopen(fd, "w", encoding="utf-8") as f:
            f.write(f"{os.getpid()}\n")

    def _break_stale(self) -> bool:
        # unreadable owner counts as live: another run may not have written its pid yet
        owner = _lock_owner(self.path)
        if owner is None or psutil.pid_exists(owner):
            return False
        _log.warning("Removing stale lock %s left by process %d", self.path, owner)
        try:
            self.path.unlink()
        except FileNotFoundError:
            pass
        return True

    def __enter__(self) -> "RunLock":
        self.path.parent.mkdir(parents=True, exist_ok=True)
        try:
            self._create()
        except FileExistsError as exc:
            if not self._break_stale():
                raise RunLockedError(f"output directory is in use: {self.path} exists") from exc
            try:
                self._create()
            except FileExistsError as again:
                raise RunLockedError(f"output directory is in use: {self.path} exists") from again
        self._held = True
        return self

    def __exit__(self, *exc_info: object) -> None:
        if self._held:
            try:
                self.path.unlink()
            except OSError:
                _log.warning("Could not remove lock file %s", self.path)
            self._held = False
