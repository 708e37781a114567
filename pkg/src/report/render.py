from __future__ import annotations

import logging
from pathlib import Path
from typing import Sequence

try:
    from PIL import Image, ImageDraw
except Exception:  # pragma: no cover - pillow missing
    Image = None
    ImageDraw = None

from analysis.experiment import TokenRecord

_log = logging.getLogger(__name__)

BAR_WIDTH = 14
BAR_GAP = 4
CHART_HEIGHT = 240
MARGIN = 24

BACKGROUND = (255, 255, 255)
BAR_COLOR = (70, 110, 200)
FLAG_COLOR = (220, 60, 50)
AXIS_COLOR = (40, 40, 40)
THRESHOLD_COLOR = (120, 120, 120)


def pillow_available() -> bool:
    return Image is not None and ImageDraw is not None


def render_token_chart(
    records: Sequence[TokenRecord],
    path: str | Path,
    threshold: float,
    use_drawn: bool = False,
) -> bool:
    """Bar chart of per-token output CE with the flagging threshold as a dashed line."""
    if not pillow_available():
        _log.warning("Pillow not installed, skipping %s", path)
        return False
    values = [r.ce_vs_sampled if use_drawn else r.ce_vs_argmax for r in records]
    top = max([threshold, *values]) * 1.1 or 1.0
    width = 2 * MARGIN + max(1, len(values)) * (BAR_WIDTH + BAR_GAP)
    height = CHART_HEIGHT + 2 * MARGIN
    image = Image.new("RGB", (width, height), BACKGROUND)
    draw = ImageDraw.Draw(image)
    base_y = MARGIN + CHART_HEIGHT

    def y_of(value: float) -> int:
        return base_y - int(round(CHART_HEIGHT * value / top))

    for i, (record, value) in enumerate(zip(records, values)):
        x0 = MARGIN + i * (BAR_WIDTH + BAR_GAP)
        color = FLAG_COLOR if record.flagged else BAR_COLOR
        draw.rectangle((x0, y_of(value), x0 + BAR_WIDTH, base_y), fill=color)

    ty = y_of(threshold)
    for x in range(MARGIN, width - MARGIN, 8):
        draw.line((x, ty, min(x + 4, width - MARGIN), ty), fill=THRESHOLD_COLOR, width=1)
    draw.line((MARGIN, base_y, width - MARGIN, base_y), fill=AXIS_COLOR, width=1)
    draw.line((MARGIN, MARGIN, MARGIN, base_y), fill=AXIS_COLOR, width=1)
    draw.text((MARGIN + 2, MARGIN - 16), f"max {top / 1.1:.2f} nats, threshold {threshold:.2f}", fill=AXIS_COLOR)

    target = Path(path)
    target.parent.mkdir(parents=True, exist_ok=True)
    image.save(target, format="PNG")
    return True
