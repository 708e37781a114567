from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, fields, replace
from typing import Any

from util.i18n import DEFAULT_LANGUAGE, available_languages
from util.paths import config_path, ensure_dirs

DEFAULT_INSTRUCTION = (
    "The following prompt is the beginning of a popular English idiom, "
    "please respond with a single word to complete the phrase."
)

TARGET_KINDS = ("sampled", "gold")
METRIC_CHOICES = ("ce", "kl", "cosine", "all")
FORMAT_CHOICES = ("csv", "json")
JOINER_CHOICES = (" ", "\n")

_log = logging.getLogger(__name__)


@dataclass(frozen=True)
class RunConfig:
    language: str
    instruction: str
    joiner: str
    threshold: float
    seed: int
    temperature: float
    max_tokens: int
    workers: int
    extremes_count: int
    metric: str
    target: str
    output_format: str
    log_level: str


def default_config() -> RunConfig:
    return RunConfig(
        language=DEFAULT_LANGUAGE,
        instruction=DEFAULT_INSTRUCTION,
        joiner=" ",
        threshold=1.5,
        seed=42,
        temperature=0.8,
        max_tokens=50,
        workers=4,
        extremes_count=5,
        metric="all",
        target="gold",
        output_format="csv",
        log_level="INFO",
    )


def _pick(raw: dict[str, Any], key: str, default: Any, allowed: tuple[str, ...] | None = None) -> Any:
    value = raw.get(key, default)
    if value is None:
        return default
    try:
        if isinstance(default, bool):
            value = bool(value)
        elif isinstance(default, int):
            value = int(value)
        elif isinstance(default, float):
            value = float(value)
        else:
            value = str(value)
    except (TypeError, ValueError):
        _log.warning("Ignoring invalid config value for %s: %r", key, value)
        return default
    if allowed is not None and value not in allowed:
        _log.warning("Ignoring unsupported config value for %s: %r", key, value)
        return default
    return value


class ConfigStore:
    def __init__(self) -> None:
        self.path = config_path()
        self.config = default_config()

    def load(self) -> RunConfig:
        ensure_dirs()
        base = default_config()
        if not self.path.exists():
            self.config = base
            return self.config
        try:
            raw = json.loads(self.path.read_text(encoding="utf-8"))
            if not isinstance(raw, dict):
                raise ValueError("config root must be an object")
            self.config = RunConfig(
                language=_pick(raw, "language", base.language, tuple(code for code, _ in available_languages())),
                instruction=_pick(raw, "instruction", base.instruction),
                joiner=_pick(raw, "joiner", base.joiner, JOINER_CHOICES),
                threshold=_pick(raw, "threshold", base.threshold),
                seed=max(0, _pick(raw, "seed", base.seed)),
                temperature=_pick(raw, "temperature", base.temperature),
                max_tokens=max(0, _pick(raw, "max_tokens", base.max_tokens)),
                workers=max(1, _pick(raw, "workers", base.workers)),
                extremes_count=max(0, _pick(raw, "extremes_count", base.extremes_count)),
                metric=_pick(raw, "metric", base.metric, METRIC_CHOICES),
                target=_pick(raw, "target", base.target, TARGET_KINDS),
                output_format=_pick(raw, "output_format", base.output_format, FORMAT_CHOICES),
                log_level=_pick(raw, "log_level", base.log_level).upper(),
            )
        except Exception:
            _log.warning("Config file %s unreadable, using defaults.", self.path)
            self.config = base
        return self.config

    def save(self) -> None:
        ensure_dirs()
        self.path.write_text(json.dumps(asdict(self.config), indent=2, ensure_ascii=False), encoding="utf-8")

    def with_overrides(self, **overrides: Any) -> RunConfig:
        known = {f.name for f in fields(RunConfig)}
        applied = {k: v for k, v in overrides.items() if k in known and v is not None}
        return replace(self.config, **applied)
