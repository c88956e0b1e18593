"""Tiny static SVG charts: lines, shaded bands and scatter points."""

from __future__ import annotations

from pathlib import Path
from typing import Sequence
from xml.sax.saxutils import escape

import numpy as np

W, H = 640, 420
ML, MR, MT, MB = 70, 20, 40, 55
PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b")


def _fmt(v: float) -> str:
    return f"{v:.4g}"


class _Frame:
    def __init__(self, xs, ys):
        xs = np.asarray([v for v in xs if np.isfinite(v)], float)
        ys = np.asarray([v for v in ys if np.isfinite(v)], float)
        self.x0, self.x1 = (xs.min(), xs.max()) if len(xs) else (0.0, 1.0)
        self.y0, self.y1 = (ys.min(), ys.max()) if len(ys) else (0.0, 1.0)
        if self.x1 == self.x0:
            self.x0, self.x1 = self.x0 - 0.5, self.x1 + 0.5
        if self.y1 == self.y0:
            self.y0, self.y1 = self.y0 - 0.5, self.y1 + 0.5
        pad = 0.05 * (self.y1 - self.y0)
        self.y0 -= pad
        self.y1 += pad

    def px(self, x):
        return ML + (np.asarray(x, float) - self.x0) / (self.x1 - self.x0) * (W - ML - MR)

    def py(self, y):
        return H - MB - (np.asarray(y, float) - self.y0) / (self.y1 - self.y0) * (H - MT - MB)

    def axes(self, title: str, xlabel: str, ylabel: str) -> list[str]:
        out = [f'<rect x="{ML}" y="{MT}" width="{W - ML - MR}" height="{H - MT - MB}" fill="none" stroke="#333"/>']
        for k in range(5):
            fx = self.x0 + k * (self.x1 - self.x0) / 4
            fy = self.y0 + k * (self.y1 - self.y0) / 4
            out.append(f'<text x="{self.px(fx):.1f}" y="{H - MB + 18}" font-size="11" text-anchor="middle">{_fmt(fx)}</text>')
            out.append(f'<text x="{ML - 6}" y="{self.py(fy) + 4:.1f}" font-size="11" text-anchor="end">{_fmt(fy)}</text>')
        out.append(f'<text x="{W / 2}" y="{MT - 14}" font-size="14" text-anchor="middle">{escape(title)}</text>')
        out.append(f'<text x="{W / 2}" y="{H - 12}" font-size="12" text-anchor="middle">{escape(xlabel)}</text>')
        out.append(f'<text x="16" y="{H / 2}" font-size="12" text-anchor="middle" '
                   f'transform="rotate(-90 16 {H / 2})">{escape(ylabel)}</text>')
        return out


def _legend(names: Sequence[str]) -> list[str]:
    out = []
    for k, name in enumerate(names):
        y = MT + 14 + 16 * k
        out.append(f'<line x1="{W - MR - 150}" y1="{y}" x2="{W - MR - 130}" y2="{y}" stroke="{PALETTE[k % len(PALETTE)]}" stroke-width="2"/>')
        out.append(f'<text x="{W - MR - 125}" y="{y + 4}" font-size="11">{escape(name)}</text>')
    return out


def _doc(body: list[str]) -> str:
    head = f'<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}">'
    return "\n".join([head, f'<rect width="{W}" height="{H}" fill="white"/>', *body, "</svg>"]) + "\n"


def line_chart(path, series: dict[str, tuple], title: str = "", xlabel: str = "", ylabel: str = "",
               bands: dict[str, tuple] | None = None) -> None:
    """``series`` maps a name to ``(x, y)``; ``bands`` maps a name to ``(x, lo, hi)``."""
    bands = bands or {}
    xs = [v for x, _ in series.values() for v in x] + [v for x, _, _ in bands.values() for v in x]
    ys = [v for _, y in series.values() for v in y] + [v for _, lo, hi in bands.values() for v in (*lo, *hi)]
    fr = _Frame(xs, ys)
    body = fr.axes(title, xlabel, ylabel)
    for k, (x, lo, hi) in enumerate(bands.values()):
        pts = list(zip(fr.px(x), fr.py(hi))) + list(zip(fr.px(x[::-1]), fr.py(lo[::-1])))
        d = " ".join(f"{a:.1f},{b:.1f}" for a, b in pts)
        body.append(f'<polygon points="{d}" fill="{PALETTE[k % len(PALETTE)]}" fill-opacity="0.2" stroke="none"/>')
    for k, (x, y) in enumerate(series.values()):
        d = " ".join(f"{a:.1f},{b:.1f}" for a, b in zip(fr.px(x), fr.py(y)) if np.isfinite(a) and np.isfinite(b))
        body.append(f'<polyline points="{d}" fill="none" stroke="{PALETTE[k % len(PALETTE)]}" stroke-width="1.5"/>')
    body += _legend(list(series))
    Path(path).write_text(_doc(body))


def scatter_chart(path, points: dict[str, tuple], title: str = "", xlabel: str = "", ylabel: str = "",
                  diagonal: bool = True) -> None:
    xs = [v for x, _ in points.values() for v in x]
    ys = [v for _, y in points.values() for v in y]
    if diagonal:
        xs, ys = xs + ys, ys + xs
    fr = _Frame(xs, ys)
    body = fr.axes(title, xlabel, ylabel)
    if diagonal:
        lo, hi = max(fr.x0, fr.y0), min(fr.x1, fr.y1)
        body.append(f'<line x1="{fr.px(lo):.1f}" y1="{fr.py(lo):.1f}" x2="{fr.px(hi):.1f}" y2="{fr.py(hi):.1f}" '
                    'stroke="#888" stroke-dasharray="4 3"/>')
    for k, (x, y) in enumerate(points.values()):
        for a, b in zip(fr.px(x), fr.py(y)):
            body.append(f'<circle cx="{a:.1f}" cy="{b:.1f}" r="3" fill="{PALETTE[k % len(PALETTE)]}"/>')
    body += _legend(list(points))
    Path(path).write_text(_doc(body))
