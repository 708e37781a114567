from __future__ import annotations

import os
from pathlib import Path

DOT_DIRNAME = ".lens-harness"
HOME_ENV = "LENS_HARNESS_HOME"

CONFIG_FILENAME = "config.json"
WEIGHTS_FILENAME = "model.safetensors"
VOCAB_FILENAME = "vocab.json"
MERGES_FILENAME = "merges.txt"
LOCK_FILENAME = ".run.lock"
MANIFEST_FILENAME = "manifest.json"


def app_data_dir() -> Path:
    override = os.getenv(HOME_ENV)
    if override:
        return Path(override)
    return Path.home() / DOT_DIRNAME


def config_path() -> Path:
    return app_data_dir() / "config.json"


def logs_dir() -> Path:
    return app_data_dir() / "logs"


def model_config_path(model_dir: str | Path) -> Path:
    return Path(model_dir) / CONFIG_FILENAME


def model_weights_path(model_dir: str | Path) -> Path:
    return Path(model_dir) / WEIGHTS_FILENAME


def vocab_path(model_dir: str | Path) -> Path:
    return Path(model_dir) / VOCAB_FILENAME


def merges_path(model_dir: str | Path) -> Path:
    return Path(model_dir) / MERGES_FILENAME


def output_path(out_dir: str | Path, name: str) -> Path:
    return Path(out_dir) / name


def lock_path(out_dir: str | Path) -> Path:
    return Path(out_dir) / LOCK_FILENAME


def ensure_dirs() -> None:
    app_data_dir().mkdir(parents=True, exist_ok=True)
    logs_dir().mkdir(parents=True, exist_ok=True)
