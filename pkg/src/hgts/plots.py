"""Dependency-free SVG line charts and heatmaps."""

from __future__ import annotations

from typing import Sequence
from xml.sax.saxutils import escape

import numpy as np

PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b")
_W, _H, _M = 640, 320, 48


def _scale(lo: float, hi: float, a: float, b: float):
    span = hi - lo if hi > lo else 1.0
    return lambda v: a + (v - lo) / span * (b - a)


def _finite_range(arrays) -> tuple[float, float]:
    vals = np.concatenate([np.asarray(a, dtype=float).ravel() for a in arrays if np.size(a)])
    vals = vals[np.isfinite(vals)]
    if vals.size == 0:
        return 0.0, 1.0
    lo, hi = float(vals.min()), float(vals.max())
    if hi == lo:
        lo, hi = lo - 0.5, hi + 0.5
    return lo, hi


def line_chart(
    series: Sequence[tuple[str, np.ndarray, np.ndarray]],
    title: str = "",
    xlabel: str = "",
    ylabel: str = "",
    shade: tuple[float, float] | None = None,
    markers: tuple[np.ndarray, np.ndarray] | None = None,
) -> str:
    """``series`` holds ``(label, x, y)`` triples; ``shade`` greys an x interval;
    ``markers`` draws hollow points (e.g. masked positions)."""
    xs = [s[1] for s in series]
    ys = [s[2] for s in series] + ([markers[1]] if markers is not None else [])
    x0, x1 = _finite_range(xs)
    y0, y1 = _finite_range(ys)
    fx = _scale(x0, x1, _M, _W - _M / 2)
    fy = _scale(y0, y1, _H - _M, _M / 2)
    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{_W}" height="{_H}" viewBox="0 0 {_W} {_H}">',
        '<rect width="100%" height="100%" fill="white"/>',
    ]
    if shade is not None:
        a, b = fx(shade[0]), fx(shade[1])
        out.append(f'<rect x="{a:.1f}" y="{_M / 2}" width="{b - a:.1f}" height="{_H - 1.5 * _M}" fill="#eeeeee"/>')
    out.append(
        f'<polyline points="{_M},{_M / 2} {_M},{_H - _M} {_W - _M / 2},{_H - _M}" fill="none" stroke="black"/>'
    )
    for v, anchor in ((y0, _H - _M), (y1, _M / 2)):
        out.append(f'<text x="{_M - 4}" y="{anchor + 4}" font-size="10" text-anchor="end">{v:.3g}</text>')
    for v in (x0, x1):
        out.append(f'<text x="{fx(v):.1f}" y="{_H - _M + 14}" font-size="10" text-anchor="middle">{v:.4g}</text>')
    for i, (label, x, y) in enumerate(series):
        color = PALETTE[i % len(PALETTE)]
        pts = " ".join(
            f"{fx(a):.1f},{fy(b):.1f}" for a, b in zip(np.asarray(x, float), np.asarray(y, float)) if np.isfinite(b)
        )
        out.append(f'<polyline points="{pts}" fill="none" stroke="{color}" stroke-width="1.2"/>')
        out.append(
            f'<text x="{_W - _M / 2}" y="{_M / 2 + 12 * (i + 1)}" font-size="11" text-anchor="end" '
            f'fill="{color}">{escape(label)}</text>'
        )
    if markers is not None:
        for a, b in zip(np.asarray(markers[0], float), np.asarray(markers[1], float)):
            out.append(f'<circle cx="{fx(a):.1f}" cy="{fy(b):.1f}" r="1.8" fill="none" stroke="#444"/>')
    if title:
        out.append(f'<text x="{_W / 2}" y="16" font-size="13" text-anchor="middle">{escape(title)}</text>')
    if xlabel:
        out.append(f'<text x="{_W / 2}" y="{_H - 10}" font-size="11" text-anchor="middle">{escape(xlabel)}</text>')
    if ylabel:
        out.append(
            f'<text x="12" y="{_H / 2}" font-size="11" text-anchor="middle" '
            f'transform="rotate(-90 12 {_H / 2})">{escape(ylabel)}</text>'
        )
    out.append("</svg>")
    return "\n".join(out)


def heatmap(matrix: np.ndarray, title: str = "", cell: int = 18) -> str:
    """Rows x columns grid, white (min) to dark blue (max)."""
    m = np.asarray(matrix, dtype=float)
    rows, cols = m.shape
    lo, hi = _finite_range([m])
    left, top = 36, 28
    w, h = left + cols * cell + 8, top + rows * cell + 8
    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}">',
        '<rect width="100%" height="100%" fill="white"/>',
    ]
    for i in range(rows):
        for j in range(cols):
            t = (m[i, j] - lo) / (hi - lo)
            r, g, b = (int(255 - t * (255 - c)) for c in (8, 48, 107))
            out.append(
                f'<rect x="{left + j * cell}" y="{top + i * cell}" width="{cell}" height="{cell}" '
                f'fill="rgb({r},{g},{b})"><title>{m[i, j]:.4g}</title></rect>'
            )
        out.append(f'<text x="{left - 4}" y="{top + i * cell + cell * 0.7:.1f}" font-size="9" text-anchor="end">{i}</text>')
    if title:
        out.append(f'<text x="{left}" y="16" font-size="12">{escape(title)}</text>')
    out.append("</svg>")
    return "\n".join(out)


def write(path: str, svg: str) -> str:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(svg)
    return path
