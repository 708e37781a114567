from __future__ import annotations

import time
from datetime import datetime, timezone


def now_iso() -> str:
    return fmt_iso(time.time())


def fmt_iso(ts_seconds: float) -> str:
    try:
        return datetime.fromtimestamp(ts_seconds, tz=timezone.utc).isoformat(timespec="seconds")
    except Exception:
        return "1970-01-01T00:00:00+00:00"


def fmt_duration(seconds: float) -> str:
    if seconds < 60:
        return f"{seconds:.1f}s"
    minutes, rest = divmod(int(seconds), 60)
    if minutes < 60:
        return f"{minutes}m{rest:02d}s"
    hours, minutes = divmod(minutes, 60)
    return f"{hours}h{minutes:02d}m"
