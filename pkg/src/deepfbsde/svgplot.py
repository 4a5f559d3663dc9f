"""Minimal SVG line charts for training reports (no plotting dependency)."""

import math
from xml.sax.saxutils import escape

import numpy as np

WIDTH, PANEL_H, MARGIN = 720, 260, 56
MAX_POINTS = 2000
COLORS = {"train": "#9aa7b8", "val": "#1f5fa8", "price": "#c0392b", "oracle": "#2c3e50"}


def _fmt(v):
    if v == 0:
        return "0"
    if abs(v) >= 1e4 or abs(v) < 1e-2:
        return f"{v:.1e}"
    return f"{v:.3g}"


def _ticks(lo, hi, n=5):
    if hi <= lo:
        return [lo]
    return list(np.linspace(lo, hi, n))


def _polyline(xs, ys, sx, sy, color, width=1.2, dash=None):
    pts = [f"{sx(x):.1f},{sy(y):.1f}" for x, y in zip(xs, ys) if math.isfinite(y)]
    if len(pts) < 2:
        return ""
    d = f' stroke-dasharray="{dash}"' if dash else ""
    return (f'<polyline fill="none" stroke="{color}" stroke-width="{width}"{d} '
            f'points="{" ".join(pts)}"/>')


def _panel(top, title, xs, series, log_y=False, hline=None):
    """One chart; ``series`` is a list of ``(label, ys, color)``."""
    x0, x1 = MARGIN, WIDTH - 16
    y0, y1 = top + 28, top + PANEL_H - 30
    ally = [v for _, ys, _ in series for v in ys if math.isfinite(v) and (v > 0 or not log_y)]
    if hline is not None and math.isfinite(hline):
        ally.append(hline)
    parts = [f'<text x="{x0}" y="{top + 16}" font-size="13" font-weight="bold">'
             f'{escape(title)}</text>']
    if not ally or len(xs) == 0:
        parts.append(f'<text x="{x0}" y="{y0 + 20}" font-size="12">no data</text>')
        return parts
    lo, hi = min(ally), max(ally)
    if log_y:
        lo, hi = math.log10(lo), math.log10(hi)
    if hi - lo < 1e-12:
        lo, hi = lo - 0.5, hi + 0.5
    xlo, xhi = float(min(xs)), float(max(xs))
    if xhi <= xlo:
        xhi = xlo + 1.0

    def sx(x):
        return x0 + (x - xlo) / (xhi - xlo) * (x1 - x0)

    def sy(y):
        v = math.log10(y) if log_y else y
        return y1 - (v - lo) / (hi - lo) * (y1 - y0)

    parts.append(f'<rect x="{x0}" y="{y0}" width="{x1 - x0}" height="{y1 - y0}" '
                 f'fill="none" stroke="#bbb"/>')
    for t in _ticks(lo, hi):
        yy = y1 - (t - lo) / (hi - lo) * (y1 - y0)
        label = _fmt(10**t) if log_y else _fmt(t)
        parts.append(f'<text x="{x0 - 4}" y="{yy + 4:.1f}" font-size="10" '
                     f'text-anchor="end">{label}</text>')
    for t in _ticks(xlo, xhi):
        parts.append(f'<text x="{sx(t):.1f}" y="{y1 + 14}" font-size="10" '
                     f'text-anchor="middle">{int(round(t))}</text>')
    for label, ys, color in series:
        ys = [y if (math.isfinite(y) and (y > 0 or not log_y)) else math.nan for y in ys]
        parts.append(_polyline(xs, ys, sx, sy, color))
    if hline is not None and math.isfinite(hline):
        parts.append(_polyline([xlo, xhi], [hline, hline], sx, sy, COLORS["oracle"], 1.0, "5,4"))
    lx = x1 - 150
    for k, (label, _, color) in enumerate(series + ([("oracle", None, COLORS["oracle"])]
                                                   if hline is not None else [])):
        ly = y0 + 14 + 14 * k
        parts.append(f'<line x1="{lx}" y1="{ly - 4}" x2="{lx + 18}" y2="{ly - 4}" '
                     f'stroke="{color}" stroke-width="2"/>')
        parts.append(f'<text x="{lx + 24}" y="{ly}" font-size="11">{escape(label)}</text>')
    return parts


def training_plot(report, oracle_price=None, title="training"):
    """Loss panel (log scale) above a price panel with the oracle as a dashed line."""
    it = report.column("iter")
    tr = report.column("train_loss")
    va = report.column("val_loss")
    pr = report.column("price")
    # thin dense columns to at most MAX_POINTS, keeping every validation row
    stride = max(1, it.size // MAX_POINTS)
    keep = (np.arange(it.size) % stride == 0) | np.isfinite(va)
    keep[-1:] = True
    it, tr, va, pr = it[keep], tr[keep], va[keep], pr[keep]
    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" '
             f'height="{2 * PANEL_H}" font-family="sans-serif">',
             f'<rect width="{WIDTH}" height="{2 * PANEL_H}" fill="white"/>']
    # validation is sparse; its NaN gaps are skipped, so the points join up
    loss_series = [("train loss", list(tr), COLORS["train"]),
                   ("validation loss", list(va), COLORS["val"])]
    parts += _panel(0, f"{title}: loss", list(it), loss_series, log_y=True)
    parts += _panel(PANEL_H, f"{title}: price", list(it),
                    [("price estimate", list(pr), COLORS["price"])],
                    hline=oracle_price)
    parts.append("</svg>")
    return "\n".join(p for p in parts if p) + "\n"
