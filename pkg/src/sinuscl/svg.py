"""Minimal SVG line charts (rect, line, polyline, text only)."""
from __future__ import annotations

from typing import Mapping, Sequence, Tuple
from xml.sax.saxutils import escape, quoteattr

PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b", "#17becf")

WIDTH, HEIGHT = 480, 360
LEFT, RIGHT, TOP, BOTTOM = 56, 120, 32, 48


def line_chart(series: Mapping[str, Sequence[Tuple[float, float]]], title: str = "",
               xlabel: str = "", ylabel: str = "",
               xlim: Tuple[float, float] = (0.0, 1.0), ylim: Tuple[float, float] = (0.0, 1.0),
               ticks: int = 5) -> str:
    """Render one polyline per named series on fixed axes; returns the SVG text."""
    (x0, x1), (y0, y1) = xlim, ylim
    if x1 <= x0 or y1 <= y0:
        raise ValueError("axis limits must be increasing")
    pw, ph = WIDTH - LEFT - RIGHT, HEIGHT - TOP - BOTTOM

    def px(x):
        return LEFT + (min(max(x, x0), x1) - x0) / (x1 - x0) * pw

    def py(y):
        return TOP + ph - (min(max(y, y0), y1) - y0) / (y1 - y0) * ph

    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" '
           f'viewBox="0 0 {WIDTH} {HEIGHT}">',
           f'<rect x="0" y="0" width="{WIDTH}" height="{HEIGHT}" fill="white"/>',
           f'<rect x="{LEFT}" y="{TOP}" width="{pw}" height="{ph}" fill="none" stroke="black"/>']
    for k in range(ticks + 1):
        fx = x0 + (x1 - x0) * k / ticks
        fy = y0 + (y1 - y0) * k / ticks
        out.append(f'<line x1="{px(fx):.2f}" y1="{TOP + ph}" x2="{px(fx):.2f}" y2="{TOP + ph + 4}" stroke="black"/>')
        out.append(f'<text x="{px(fx):.2f}" y="{TOP + ph + 16}" font-size="10" text-anchor="middle">{fx:g}</text>')
        out.append(f'<line x1="{LEFT - 4}" y1="{py(fy):.2f}" x2="{LEFT}" y2="{py(fy):.2f}" stroke="black"/>')
        out.append(f'<text x="{LEFT - 6}" y="{py(fy) + 3:.2f}" font-size="10" text-anchor="end">{fy:g}</text>')
    if title:
        out.append(f'<text x="{LEFT + pw / 2:.2f}" y="{TOP - 12}" font-size="13" text-anchor="middle">{escape(title)}</text>')
    if xlabel:
        out.append(f'<text x="{LEFT + pw / 2:.2f}" y="{HEIGHT - 10}" font-size="11" text-anchor="middle">{escape(xlabel)}</text>')
    if ylabel:
        out.append(f'<text x="14" y="{TOP + ph / 2:.2f}" font-size="11" text-anchor="middle" '
                   f'transform="rotate(-90 14 {TOP + ph / 2:.2f})">{escape(ylabel)}</text>')
    for k, (name, pts) in enumerate(series.items()):
        colour = PALETTE[k % len(PALETTE)]
        coords = " ".join(f"{px(x):.2f},{py(y):.2f}" for x, y in pts)
        out.append(f'<polyline fill="none" stroke="{colour}" stroke-width="1.5" points="{coords}" '
                   f'data-series={quoteattr(name)}/>')
        ly = TOP + 14 + 16 * k
        out.append(f'<line x1="{WIDTH - RIGHT + 10}" y1="{ly}" x2="{WIDTH - RIGHT + 28}" y2="{ly}" stroke="{colour}" stroke-width="2"/>')
        out.append(f'<text x="{WIDTH - RIGHT + 32}" y="{ly + 4}" font-size="11">{escape(name)}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def pr_curve_chart(curves: Mapping[str, Sequence[Tuple[float, float, float]]], title="Precision-recall") -> str:
    """Curves are (threshold, recall, precision) rows; each starts at recall 0, precision 1."""
    series = {name: [(0.0, 1.0)] + [(r, p) for _, r, p in rows] for name, rows in curves.items()}
    return line_chart(series, title, "recall", "precision")


def efficiency_chart(table: Mapping[str, Sequence[Tuple[float, float]]]) -> str:
    """``table`` maps regime to (fraction, AUPRC mean) points."""
    series = {name: sorted(pts) for name, pts in table.items()}
    return line_chart(series, "Label efficiency", "training fraction", "AUPRC")
