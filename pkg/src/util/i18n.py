from __future__ import annotations

import json
import logging
import sys
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path
from typing import Any

DEFAULT_LANGUAGE = "en-EN"

_ALIASES = {"en": "en-EN", "en_EN": "en-EN", "en_US": "en-EN", "de": "de-DE", "de_DE": "de-DE"}

_log = logging.getLogger(__name__)


@dataclass(frozen=True)
class Catalog:
    code: str
    name: str
    messages: dict[str, str] = field(default_factory=dict)


def _lang_dir() -> Path:
    base = Path(getattr(sys, "_MEIPASS", Path(__file__).resolve().parents[1]))
    return base / "lang"


def canonical_code(code: str | None) -> str:
    if not code:
        return DEFAULT_LANGUAGE
    code = code.split(".")[0]
    return _ALIASES.get(code, code)


@lru_cache(maxsize=None)
def _read_catalog(code: str) -> Catalog | None:
    path = _lang_dir() / f"{code}.json"
    try:
        raw = json.loads(path.read_text(encoding="utf-8"))
    except FileNotFoundError:
        return None
    except (OSError, ValueError):
        _log.warning("Message catalog %s unreadable", path)
        return None
    if not isinstance(raw, dict):
        return None
    meta = raw.get("_meta") if isinstance(raw.get("_meta"), dict) else {}
    messages = {k: v for k, v in raw.items() if not k.startswith("_") and isinstance(v, str)}
    return Catalog(code=meta.get("code") or code, name=meta.get("name") or code, messages=messages)


def available_languages() -> list[tuple[str, str]]:
    found = [_read_catalog(p.stem) for p in sorted(_lang_dir().glob("*.json"))]
    langs = [(c.code, c.name) for c in found if c is not None]
    return langs or [(DEFAULT_LANGUAGE, "English")]


_active: Catalog = Catalog(DEFAULT_LANGUAGE, "English")


def language_code() -> str:
    return _active.code


def set_language(code: str | None) -> None:
    global _active
    wanted = canonical_code(code)
    catalog = _read_catalog(wanted)
    if catalog is None:
        if wanted != DEFAULT_LANGUAGE:
            _log.warning("No message catalog for %s, using %s", wanted, DEFAULT_LANGUAGE)
        catalog = _read_catalog(DEFAULT_LANGUAGE) or Catalog(DEFAULT_LANGUAGE, "English")
    _active = catalog


def t(key: str, **kwargs: Any) -> str:
    text = _active.messages.get(key)
    if text is None:
        fallback = _read_catalog(DEFAULT_LANGUAGE)
        text = fallback.messages.get(key, key) if fallback else key
    if not kwargs:
        return text
    try:
        return text.format(**kwargs)
    except (KeyError, IndexError, ValueError):
        return text
