"""Dependency-free, byte-deterministic SVG line charts."""

from __future__ import annotations

import math
from pathlib import Path
from typing import Iterable, Sequence
from xml.sax.saxutils import escape

WIDTH, HEIGHT = 800, 600
LEFT, RIGHT, TOP, BOTTOM = 90, 170, 40, 70
PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd",
           "#8c564b", "#e377c2", "#7f7f7f", "#bcbd22", "#17becf")


class PlotError(ValueError):
    pass


def _q(v: float) -> str:
    """Coordinates quantized to 6 significant digits."""
    out = f"{v:.6g}"
    return "0" if out == "-0" else out


def _usable(v, log: bool) -> bool:
    return v is not None and math.isfinite(v) and (v > 0 or not log)


def _ticks(lo: float, hi: float, log: bool) -> list[float]:
    if log:
        a, b = math.floor(math.log10(lo)), math.ceil(math.log10(hi))
        step = max(1, (b - a) // 8)
        return [10.0 ** e for e in range(a, b + 1, step) if lo <= 10.0 ** e <= hi]
    return [lo + (hi - lo) * i / 5 for i in range(6)]


def line_chart(series: Sequence[tuple[str, Sequence[float], Sequence[float]]], x_label: str,
               y_label: str, logx: bool = False, logy: bool = False, title: str = "") -> str:
    """One polyline per ``(label, xs, ys)``; points unusable on the axes are dropped."""
    cleaned = []
    for label, xs, ys in series:
        pts = [(float(x), float(y)) for x, y in zip(xs, ys)
               if _usable(x, logx) and _usable(y, logy)]
        cleaned.append((label, pts))
    allpts = [p for _, pts in cleaned for p in pts]
    if not allpts:
        raise PlotError("no plottable points")

    def axis(vals, log):
        vals = [math.log10(v) if log else v for v in vals]
        lo, hi = min(vals), max(vals)
        if lo == hi:
            lo, hi = lo - 0.5, hi + 0.5
        return lo, hi

    xlo, xhi = axis([p[0] for p in allpts], logx)
    ylo, yhi = axis([p[1] for p in allpts], logy)
    pw, ph = WIDTH - LEFT - RIGHT, HEIGHT - TOP - BOTTOM

    def sx(x):
        v = math.log10(x) if logx else x
        return LEFT + (v - xlo) / (xhi - xlo) * pw

    def sy(y):
        v = math.log10(y) if logy else y
        return TOP + ph - (v - ylo) / (yhi - ylo) * ph

    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" viewBox="0 0 {WIDTH} {HEIGHT}" '
        f'width="{WIDTH}" height="{HEIGHT}" font-family="sans-serif" font-size="12">',
        f'<rect x="0" y="0" width="{WIDTH}" height="{HEIGHT}" fill="white"/>',
        f'<rect x="{LEFT}" y="{TOP}" width="{pw}" height="{ph}" fill="none" stroke="black"/>',
    ]
    for t in _ticks(10 ** xlo if logx else xlo, 10 ** xhi if logx else xhi, logx):
        x = sx(t)
        out.append(f'<line x1="{_q(x)}" y1="{TOP + ph}" x2="{_q(x)}" y2="{TOP + ph + 5}" stroke="black"/>')
        out.append(f'<text x="{_q(x)}" y="{TOP + ph + 20}" text-anchor="middle">{_q(t)}</text>')
    for t in _ticks(10 ** ylo if logy else ylo, 10 ** yhi if logy else yhi, logy):
        y = sy(t)
        out.append(f'<line x1="{LEFT - 5}" y1="{_q(y)}" x2="{LEFT}" y2="{_q(y)}" stroke="black"/>')
        out.append(f'<text x="{LEFT - 8}" y="{_q(y + 4)}" text-anchor="end">{_q(t)}</text>')
    out.append(f'<text x="{LEFT + pw / 2:g}" y="{HEIGHT - 20}" text-anchor="middle">{escape(x_label)}</text>')
    out.append(f'<text x="20" y="{TOP + ph / 2:g}" text-anchor="middle" '
               f'transform="rotate(-90 20 {TOP + ph / 2:g})">{escape(y_label)}</text>')
    if title:
        out.append(f'<text x="{WIDTH / 2:g}" y="24" text-anchor="middle">{escape(title)}</text>')
    for i, (label, pts) in enumerate(cleaned):
        color = PALETTE[i % len(PALETTE)]
        coords = " ".join(f"{_q(sx(x))},{_q(sy(y))}" for x, y in pts)
        out.append(f'<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{coords}"/>')
        ly = TOP + 10 + 18 * i
        out.append(f'<line x1="{WIDTH - RIGHT + 15}" y1="{ly}" x2="{WIDTH - RIGHT + 35}" y2="{ly}" '
                   f'stroke="{color}" stroke-width="2"/>')
        out.append(f'<text class="legend" x="{WIDTH - RIGHT + 40}" y="{ly + 4}">{escape(label)}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def series_from_rows(rows: list[dict], x: str, y: str, group: str | None = None,
                     default_label: str = "series"):
    if rows:
        for col in (x, y) + ((group,) if group else ()):
            if col not in rows[0]:
                raise PlotError(f"missing column '{col}'")
    groups: dict[str, tuple[list, list]] = {}
    for r in rows:
        key = str(r[group]) if group else default_label
        xs, ys = groups.setdefault(key, ([], []))
        xs.append(r[x])
        ys.append(r[y])
    return [(k, *groups[k]) for k in sorted(groups)]


def plot_csv(paths: Iterable, x: str, y: str, out, group: str | None = None,
             logx: bool = False, logy: bool = False, title: str = "") -> str:
    from .harness import read_csv

    series = []
    for path in paths:
        series.extend(series_from_rows(read_csv(path), x, y, group, default_label=Path(path).stem))
    svg = line_chart(series, x, y, logx, logy, title)
    Path(out).write_text(svg)
    return svg
