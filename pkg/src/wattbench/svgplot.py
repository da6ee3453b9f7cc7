"""Self-rendered SVG power plots and a CSV series export.

The SVG is a plain polyline plus one shaded band per batch interval, built
by hand so output is deterministic and structurally assertable (no plotting
toolkit in the loop).  ``csv-series`` serves anyone who prefers an external
plotter; band boundaries ride along as comments so the payload stays a
two-column series.
"""

from __future__ import annotations

import datetime
from dataclasses import dataclass
from typing import Optional, Sequence
from xml.sax.saxutils import escape

from .model import BatchInterval, PowerSample, format_timestamp

WIDTH = 960
HEIGHT = 360
MARGIN_LEFT = 64
MARGIN_RIGHT = 16
MARGIN_TOP = 20
MARGIN_BOTTOM = 44
PLOT_W = WIDTH - MARGIN_LEFT - MARGIN_RIGHT
PLOT_H = HEIGHT - MARGIN_TOP - MARGIN_BOTTOM
Y_HEADROOM = 1.05


class EmptyTrace(ValueError):
    pass


@dataclass
class PlotSpec:
    """Inputs for one plot command."""

    power_file: str
    events_file: Optional[str]
    out: str
    format: str = "svg"
    annotate: bool = True
    timestamp: bool = True

    def __post_init__(self):
        if self.format not in ("svg", "csv-series"):
            raise ValueError(f"format must be svg or csv-series, got {self.format!r}")


def x_to_px(t: float, t0: float, t1: float) -> float:
    span = (t1 - t0) or 1.0
    return MARGIN_LEFT + (t - t0) / span * PLOT_W


def y_to_px(w: float, w_max: float) -> float:
    scale = (w_max * Y_HEADROOM) or 1.0
    return MARGIN_TOP + PLOT_H - (w / scale) * PLOT_H


def _domain(
    samples: Sequence[PowerSample],
    intervals: Sequence[BatchInterval],
    window: Optional[tuple[float, float]],
) -> tuple[float, float, float]:
    if not samples:
        raise EmptyTrace("no power samples to plot")
    times = [s.t for s in samples]
    times += [iv.start for iv in intervals] + [iv.end for iv in intervals]
    if window is not None:
        times += list(window)
    return min(times), max(times), max(s.power for s in samples)


def render_svg(
    samples: Sequence[PowerSample],
    intervals: Sequence[BatchInterval] = (),
    window: Optional[tuple[float, float]] = None,
    *,
    annotate: bool = True,
    timestamp: Optional[str] = "auto",
) -> str:
    """Render the trace to an SVG document string.

    ``timestamp`` embeds one generation-time metadata field; pass None to
    suppress it, which makes the output a pure function of its inputs.
    """
    t0, t1, w_max = _domain(samples, intervals, window)
    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" '
        f'viewBox="0 0 {WIDTH} {HEIGHT}">',
    ]
    if timestamp is not None:
        stamp = (
            datetime.datetime.now(datetime.timezone.utc).isoformat()
            if timestamp == "auto"
            else timestamp
        )
        parts.append(f"<metadata>generated {escape(stamp)}</metadata>")
    parts.append(f'<rect width="{WIDTH}" height="{HEIGHT}" fill="white"/>')

    for iv in intervals:
        x_start = x_to_px(iv.start, t0, t1)
        x_end = x_to_px(iv.end, t0, t1)
        parts.append(
            f'<rect class="band" x="{x_start:.2f}" y="{MARGIN_TOP}" '
            f'width="{max(x_end - x_start, 0.5):.2f}" height="{PLOT_H}" '
            f'fill="#ffb000" fill-opacity="0.25">'
            f"<title>batch {iv.index}: {iv.start:.6f}..{iv.end:.6f}</title></rect>"
        )

    if window is not None and annotate:
        for label, t in zip(("test_start", "test_end"), window):
            x = x_to_px(t, t0, t1)
            parts.append(
                f'<line class="window" x1="{x:.2f}" y1="{MARGIN_TOP}" x2="{x:.2f}" '
                f'y2="{MARGIN_TOP + PLOT_H}" stroke="#808080" stroke-dasharray="4 3"/>'
            )
            parts.append(
                f'<text x="{x + 3:.2f}" y="{MARGIN_TOP + 12}" font-size="10" '
                f'fill="#606060">{label}</text>'
            )

    points = " ".join(
        f"{x_to_px(s.t, t0, t1):.2f},{y_to_px(s.power, w_max):.2f}" for s in samples
    )
    parts.append(
        f'<polyline class="power" points="{points}" fill="none" '
        f'stroke="#1f77b4" stroke-width="1.2"/>'
    )

    # axes with a handful of ticks
    x_axis_y = MARGIN_TOP + PLOT_H
    parts.append(
        f'<line x1="{MARGIN_LEFT}" y1="{x_axis_y}" x2="{MARGIN_LEFT + PLOT_W}" '
        f'y2="{x_axis_y}" stroke="black"/>'
    )
    parts.append(
        f'<line x1="{MARGIN_LEFT}" y1="{MARGIN_TOP}" x2="{MARGIN_LEFT}" '
        f'y2="{x_axis_y}" stroke="black"/>'
    )
    for frac in (0.0, 0.25, 0.5, 0.75, 1.0):
        t = t0 + frac * (t1 - t0)
        x = x_to_px(t, t0, t1)
        parts.append(
            f'<text x="{x:.2f}" y="{x_axis_y + 14}" font-size="10" '
            f'text-anchor="middle">{t:.6g}</text>'
        )
        w = frac * w_max * Y_HEADROOM
        y = y_to_px(w, w_max)
        parts.append(
            f'<text x="{MARGIN_LEFT - 6}" y="{y + 3:.2f}" font-size="10" '
            f'text-anchor="end">{w:.4g}</text>'
        )
    parts.append(
        f'<text x="{MARGIN_LEFT + PLOT_W / 2}" y="{HEIGHT - 6}" font-size="11" '
        f'text-anchor="middle">time [s]</text>'
    )
    parts.append(
        f'<text x="14" y="{MARGIN_TOP + PLOT_H / 2}" font-size="11" '
        f'text-anchor="middle" transform="rotate(-90 14 {MARGIN_TOP + PLOT_H / 2})">'
        f"power [W]</text>"
    )

    if annotate and intervals:
        indexes = sorted(iv.index for iv in intervals)
        label = (
            f"batches {indexes[0]}..{indexes[-1]} ({len(intervals)} intervals)"
            if len(indexes) > 1
            else f"batch {indexes[0]}"
        )
        parts.append(
            f'<text class="band-label" x="{MARGIN_LEFT + PLOT_W - 4}" y="{MARGIN_TOP + 12}" '
            f'font-size="10" text-anchor="end" fill="#a06000">{escape(label)}</text>'
        )

    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def render_csv_series(
    samples: Sequence[PowerSample],
    intervals: Sequence[BatchInterval] = (),
    window: Optional[tuple[float, float]] = None,
) -> str:
    """Two-column time/power series; band edges travel as comments."""
    if not samples:
        raise EmptyTrace("no power samples to export")
    lines = ["# wattbench csv-series: time_s,power_w"]
    if window is not None:
        lines.append(f"# window {format_timestamp(window[0])} {format_timestamp(window[1])}")
    for iv in intervals:
        lines.append(
            f"# band {iv.index} {format_timestamp(iv.start)} {format_timestamp(iv.end)}"
        )
    for s in samples:
        lines.append(f"{format_timestamp(s.t)},{s.power:.6f}")
    return "\n".join(lines) + "\n"


def parse_csv_series(text: str) -> list[tuple[float, float]]:
    """Parse a csv-series file back into (time, value) pairs.

    Shares the power-file conventions: headerless CSV, ``#`` comments,
    decimal seconds.
    """
    rows = []
    for line_no, raw in enumerate(text.split("\n"), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split(",")
        if len(parts) != 2:
            raise ValueError(f"line {line_no}: expected 2 fields, got {len(parts)}")
        rows.append((float(parts[0]), float(parts[1])))
    return rows
