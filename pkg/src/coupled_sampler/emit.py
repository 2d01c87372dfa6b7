"""Deterministic CSV, JSON, and SVG emitters.

Floats are written with shortest round-trip repr so a rerun of the same
(config, seed) reproduces every file byte for byte. SVG figures are built
from raw circle/line/polyline primitives; no plotting dependency.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np


def fmt_cell(v) -> str:
    if v is None:
        return ""
    if isinstance(v, (bool, np.bool_)):
        return "true" if v else "false"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return repr(float(v))


def write_csv(path, header, rows) -> Path:
    path = Path(path)
    lines = [",".join(header)]
    for row in rows:
        lines.append(",".join(fmt_cell(v) for v in row))
    path.write_text("\n".join(lines) + "\n")
    return path


def write_json(path, obj) -> Path:
    path = Path(path)
    path.write_text(json.dumps(obj, sort_keys=True, indent=2) + "\n")
    return path


def _bounds(points: np.ndarray, pad: float = 0.05):
    lo = points.min(axis=0)
    hi = points.max(axis=0)
    span = np.maximum(hi - lo, 1e-9)
    return lo - pad * span, hi + pad * span


class _Canvas:
    def __init__(self, lo, hi, size: int):
        self.lo, self.hi, self.size = lo, hi, size
        self.span = hi - lo

    def map(self, p):
        x = (p[0] - self.lo[0]) / self.span[0] * self.size
        y = self.size - (p[1] - self.lo[1]) / self.span[1] * self.size
        return x, y


def _svg_doc(size_w: int, size_h: int, body: list) -> str:
    head = (
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{size_w}" height="{size_h}" '
        f'viewBox="0 0 {size_w} {size_h}">'
    )
    return "\n".join([head, f'<rect width="{size_w}" height="{size_h}" fill="#ffffff"/>']
                     + body + ["</svg>"]) + "\n"


def scatter_svg(groups, segments=None, size: int = 640) -> str:
    """Scatter plot of one or more (points, color) groups.

    groups: iterable of (points(n, >=2), fill color). Only the first two
    coordinates are drawn. segments, when given, is a pair of equally sized
    point arrays; a light line joins each row.
    """
    pts = [np.asarray(p, dtype=float)[:, :2] for p, _ in groups]
    stack = np.vstack(pts + ([np.asarray(s, dtype=float)[:, :2] for s in segments]
                             if segments else []))
    lo, hi = _bounds(stack)
    cv = _Canvas(lo, hi, size)
    body = []
    if segments is not None:
        a, b = (np.asarray(s, dtype=float)[:, :2] for s in segments)
        for pa, pb in zip(a, b):
            xa, ya = cv.map(pa)
            xb, yb = cv.map(pb)
            body.append(
                f'<line x1="{xa:.2f}" y1="{ya:.2f}" x2="{xb:.2f}" y2="{yb:.2f}" '
                f'stroke="#cccccc" stroke-width="0.4"/>'
            )
    for points, color in zip(pts, (c for _, c in groups)):
        for p in points:
            x, y = cv.map(p)
            body.append(f'<circle cx="{x:.2f}" cy="{y:.2f}" r="1.6" fill="{color}"/>')
    return _svg_doc(size, size, body)


def curves_svg(xs, series, width: int = 640, height: int = 420) -> str:
    """Polyline chart; each named series is normalized to its own range.

    series: iterable of (name, values, color). The per-series value range is
    printed in the legend so the curves stay readable without shared axes.
    """
    xs = np.asarray(xs, dtype=float)
    margin = 50.0
    plot_w, plot_h = width - 2 * margin, height - 2 * margin
    x_lo, x_hi = float(xs.min()), float(xs.max())
    x_span = max(x_hi - x_lo, 1e-9)
    body = [
        f'<rect x="{margin:.1f}" y="{margin:.1f}" width="{plot_w:.1f}" '
        f'height="{plot_h:.1f}" fill="none" stroke="#444444"/>'
    ]
    for i, xv in enumerate(xs):
        px = margin + (xv - x_lo) / x_span * plot_w
        body.append(
            f'<text x="{px:.1f}" y="{height - margin + 16:.1f}" font-size="11" '
            f'text-anchor="middle" fill="#333333">{xv:g}</text>'
        )
    legend_y = 18.0
    for name, values, color in series:
        vals = np.asarray(values, dtype=float)
        v_lo, v_hi = float(vals.min()), float(vals.max())
        v_span = max(v_hi - v_lo, 1e-9)
        pts = []
        for xv, v in zip(xs, vals):
            px = margin + (xv - x_lo) / x_span * plot_w
            py = margin + plot_h - (v - v_lo) / v_span * plot_h
            pts.append(f"{px:.2f},{py:.2f}")
        body.append(
            f'<polyline points="{" ".join(pts)}" fill="none" stroke="{color}" '
            f'stroke-width="1.5"/>'
        )
        for p in pts:
            px, py = p.split(",")
            body.append(f'<circle cx="{px}" cy="{py}" r="2.5" fill="{color}"/>')
        body.append(
            f'<text x="{margin:.1f}" y="{legend_y:.1f}" font-size="12" fill="{color}">'
            f"{name} [{v_lo:.4g} .. {v_hi:.4g}]</text>"
        )
        legend_y += 15.0
    return _svg_doc(width, height, body)
