"""Minimal deterministic SVG charts (scatter, lines, interval plots)."""

from __future__ import annotations

from xml.sax.saxutils import escape

import numpy as np

PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b")


def _fmt(v: float) -> str:
    return f"{v:.2f}"


class Panel:
    """One set of axes mapped onto a rectangle of the canvas."""

    def __init__(self, x0, y0, w, h, xlim, ylim, title="", xlabel="", ylabel=""):
        self.x0, self.y0, self.w, self.h = x0, y0, w, h
        self.xlim = self._pad(xlim)
        self.ylim = self._pad(ylim)
        self.parts: list[str] = []
        self.title, self.xlabel, self.ylabel = title, xlabel, ylabel

    @staticmethod
    def _pad(lim):
        lo, hi = float(lim[0]), float(lim[1])
        if not np.isfinite(lo) or not np.isfinite(hi):
            lo, hi = 0.0, 1.0
        if hi <= lo:
            lo, hi = lo - 0.5, hi + 0.5
        pad = 0.04 * (hi - lo)
        return lo - pad, hi + pad

    def sx(self, x):
        a, b = self.xlim
        return self.x0 + (np.asarray(x, float) - a) / (b - a) * self.w

    def sy(self, y):
        a, b = self.ylim
        return self.y0 + self.h - (np.asarray(y, float) - a) / (b - a) * self.h

    def points(self, x, y, color=PALETTE[0], r=2.0, opacity=0.6):
        for px, py in zip(self.sx(x), self.sy(y)):
            self.parts.append(f'<circle cx="{_fmt(px)}" cy="{_fmt(py)}" r="{r}" '
                              f'fill="{color}" fill-opacity="{opacity}"/>')

    def line(self, x, y, color=PALETTE[0], width=1.5, dash=None, label=None):
        pts = " ".join(f"{_fmt(a)},{_fmt(b)}" for a, b in zip(self.sx(x), self.sy(y)))
        d = f' stroke-dasharray="{dash}"' if dash else ""
        self.parts.append(f'<polyline points="{pts}" fill="none" stroke="{color}" '
                          f'stroke-width="{width}"{d}/>')

    def band(self, x, lo, hi, color=PALETTE[0], opacity=0.2):
        xs = np.concatenate([self.sx(x), self.sx(x)[::-1]])
        ys = np.concatenate([self.sy(hi), self.sy(lo)[::-1]])
        pts = " ".join(f"{_fmt(a)},{_fmt(b)}" for a, b in zip(xs, ys))
        self.parts.append(f'<polygon points="{pts}" fill="{color}" fill-opacity="{opacity}" '
                          f'stroke="none"/>')

    def errorbars(self, x, mean, lo, hi, color=PALETTE[0]):
        for px, m, a, b in zip(self.sx(x), self.sy(mean), self.sy(lo), self.sy(hi)):
            self.parts.append(f'<line x1="{_fmt(px)}" y1="{_fmt(a)}" x2="{_fmt(px)}" '
                              f'y2="{_fmt(b)}" stroke="{color}" stroke-opacity="0.5"/>')
            self.parts.append(f'<circle cx="{_fmt(px)}" cy="{_fmt(m)}" r="1.5" fill="{color}"/>')

    def hline(self, y, color="#555555"):
        py = float(self.sy(y))
        self.parts.append(f'<line x1="{_fmt(self.x0)}" y1="{_fmt(py)}" '
                          f'x2="{_fmt(self.x0 + self.w)}" y2="{_fmt(py)}" stroke="{color}" '
                          f'stroke-dasharray="4,3"/>')

    def legend(self, entries):
        for k, (label, color) in enumerate(entries):
            y = self.y0 + 12 + 14 * k
            x = self.x0 + self.w - 110
            self.parts.append(f'<rect x="{_fmt(x)}" y="{_fmt(y - 8)}" width="10" height="10" '
                              f'fill="{color}"/>')
            self.parts.append(f'<text x="{_fmt(x + 14)}" y="{_fmt(y)}" font-size="10">'
                              f'{escape(label)}</text>')

    def render(self) -> str:
        out = [f'<rect x="{_fmt(self.x0)}" y="{_fmt(self.y0)}" width="{_fmt(self.w)}" '
               f'height="{_fmt(self.h)}" fill="none" stroke="#333333"/>']
        for v in np.linspace(*self.xlim, 5)[1:-1]:
            px = float(self.sx(v))
            out.append(f'<text x="{_fmt(px)}" y="{_fmt(self.y0 + self.h + 12)}" font-size="9" '
                       f'text-anchor="middle">{v:.3g}</text>')
        for v in np.linspace(*self.ylim, 5)[1:-1]:
            py = float(self.sy(v))
            out.append(f'<text x="{_fmt(self.x0 - 4)}" y="{_fmt(py + 3)}" font-size="9" '
                       f'text-anchor="end">{v:.3g}</text>')
        out.append(f'<text x="{_fmt(self.x0 + self.w / 2)}" y="{_fmt(self.y0 - 6)}" '
                   f'font-size="12" text-anchor="middle">{escape(self.title)}</text>')
        out.append(f'<text x="{_fmt(self.x0 + self.w / 2)}" y="{_fmt(self.y0 + self.h + 26)}" '
                   f'font-size="10" text-anchor="middle">{escape(self.xlabel)}</text>')
        cx, cy = self.x0 - 34, self.y0 + self.h / 2
        out.append(f'<text x="{_fmt(cx)}" y="{_fmt(cy)}" font-size="10" text-anchor="middle" '
                   f'transform="rotate(-90 {_fmt(cx)} {_fmt(cy)})">{escape(self.ylabel)}</text>')
        return "\n".join(out + self.parts)


def figure(panels, width, height) -> str:
    body = "\n".join(p.render() for p in panels)
    return (f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
            f'viewBox="0 0 {width} {height}">\n<rect width="100%" height="100%" fill="white"/>\n'
            f"{body}\n</svg>\n")


def _lim(*arrays):
    v = np.concatenate([np.ravel(a) for a in arrays])
    v = v[np.isfinite(v)]
    return (v.min(), v.max()) if len(v) else (0.0, 1.0)


def scatter_pair(x, y1, y2, titles, xlabel, ylabel) -> str:
    """Two side-by-side scatter panels sharing the y-range, each with an LS line."""
    ylim = _lim(y1, y2)
    panels = []
    for k, (y, title) in enumerate(zip((y1, y2), titles)):
        p = Panel(60 + 330 * k, 30, 270, 240, _lim(x), ylim, title, xlabel, ylabel)
        p.points(x, y, PALETTE[k])
        xc = np.asarray(x) - np.mean(x)
        den = xc @ xc
        b = float(xc @ (np.asarray(y) - np.mean(y)) / den) if den > 0 else 0.0
        xs = np.array(_lim(x))
        p.line(xs, np.mean(y) + b * (xs - np.mean(x)), "#000000")
        panels.append(p)
    return figure(panels, 680, 310)


def trajectories(times, groups: dict, title, xlabel, ylabel) -> str:
    """Mean lines with shaded 95% bands; ``groups`` maps label -> (mean, lo, hi)."""
    allv = [v for g in groups.values() for v in g]
    p = Panel(60, 30, 480, 260, _lim(times), _lim(*allv), title, xlabel, ylabel)
    entries = []
    for k, (label, (m, lo, hi)) in enumerate(groups.items()):
        c = PALETTE[k % len(PALETTE)]
        p.band(times, lo, hi, c)
        p.line(times, m, c)
        entries.append((label, c))
    p.legend(entries)
    return figure([p], 580, 330)


def interval_plot(mean, lo, hi, labels, title, ylabel) -> str:
    """Sorted per-unit intervals, coloured by a categorical label."""
    n = len(mean)
    x = np.arange(n)
    p = Panel(60, 30, 600, 260, (0, max(n - 1, 1)), _lim(lo, hi), title, "rank", ylabel)
    cats = sorted(set(labels))
    entries = []
    for k, c in enumerate(cats):
        sel = np.asarray(labels) == c
        color = PALETTE[k % len(PALETTE)]
        p.errorbars(x[sel], np.asarray(mean)[sel], np.asarray(lo)[sel], np.asarray(hi)[sel], color)
        entries.append((str(c), color))
    p.hline(0.0)
    p.legend(entries)
    return figure([p], 700, 330)


def trace_plot(series: dict, title="") -> str:
    """Stacked trace panels, one per named series."""
    panels = []
    for k, (name, v) in enumerate(series.items()):
        v = np.asarray(v, float)
        p = Panel(70, 30 + 150 * k, 520, 110, (0, max(len(v) - 1, 1)), _lim(v),
                  title if k == 0 else "", "draw" if k == len(series) - 1 else "", name)
        p.line(np.arange(len(v)), v, PALETTE[k % len(PALETTE)], width=0.8)
        panels.append(p)
    return figure(panels, 620, 60 + 150 * len(series))
