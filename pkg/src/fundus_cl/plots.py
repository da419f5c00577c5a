"""Minimal deterministic SVG plots (no timestamps, no external renderer)."""
from __future__ import annotations

import math
from pathlib import Path
from typing import Sequence
from xml.sax.saxutils import escape

W, H = 480, 400
LEFT, RIGHT, TOP, BOTTOM = 60, 20, 30, 50
COLOURS = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e")


class _Canvas:
    def __init__(self, title: str, xlabel: str, ylabel: str, xlim, ylim):
        self.xlim, self.ylim = xlim, ylim
        self.parts = [
            f'<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}">',
            f'<rect width="{W}" height="{H}" fill="white"/>',
            f'<text x="{W / 2}" y="18" text-anchor="middle" font-size="14">{escape(title)}</text>',
            f'<text x="{W / 2}" y="{H - 10}" text-anchor="middle" font-size="12">{escape(xlabel)}</text>',
            f'<text x="15" y="{H / 2}" text-anchor="middle" font-size="12" '
            f'transform="rotate(-90 15 {H / 2})">{escape(ylabel)}</text>',
        ]
        x0, y0, x1, y1 = self.px(xlim[0], ylim[0]) + self.px(xlim[1], ylim[1])
        self.parts.append(f'<rect x="{x0:.2f}" y="{y1:.2f}" width="{x1 - x0:.2f}" height="{y0 - y1:.2f}" '
                          'fill="none" stroke="black"/>')

    def px(self, x: float, y: float) -> tuple[float, float]:
        fx = (x - self.xlim[0]) / (self.xlim[1] - self.xlim[0])
        fy = (y - self.ylim[0]) / (self.ylim[1] - self.ylim[0])
        return LEFT + fx * (W - LEFT - RIGHT), H - BOTTOM - fy * (H - TOP - BOTTOM)

    def ticks(self, xs: Sequence[float], ys: Sequence[float], xlabels: Sequence[str] | None = None):
        xlabels = xlabels or [f"{x:g}" for x in xs]
        for x, label in zip(xs, xlabels):
            px, py = self.px(x, self.ylim[0])
            self.parts.append(f'<line x1="{px:.2f}" y1="{py:.2f}" x2="{px:.2f}" y2="{py + 5:.2f}" stroke="black"/>')
            self.parts.append(f'<text x="{px:.2f}" y="{py + 18:.2f}" text-anchor="middle" font-size="10">'
                              f'{escape(label)}</text>')
        for y in ys:
            px, py = self.px(self.xlim[0], y)
            self.parts.append(f'<line x1="{px - 5:.2f}" y1="{py:.2f}" x2="{px:.2f}" y2="{py:.2f}" stroke="black"/>')
            self.parts.append(f'<text x="{px - 8:.2f}" y="{py + 3:.2f}" text-anchor="end" font-size="10">'
                              f'{y:g}</text>')

    def polyline(self, xs, ys, colour: str, dash: bool = False, width: float = 2.0):
        pts = " ".join("{:.2f},{:.2f}".format(*self.px(x, y)) for x, y in zip(xs, ys))
        extra = ' stroke-dasharray="5,4"' if dash else ""
        self.parts.append(f'<polyline points="{pts}" fill="none" stroke="{colour}" stroke-width="{width}"{extra}/>')

    def errorbar(self, x, lo, hi, colour: str):
        px, plo = self.px(x, lo)
        _, phi = self.px(x, hi)
        self.parts.append(f'<line x1="{px:.2f}" y1="{plo:.2f}" x2="{px:.2f}" y2="{phi:.2f}" stroke="{colour}"/>')

    def legend(self, labels: Sequence[str]):
        for i, label in enumerate(labels):
            y = TOP + 15 + 16 * i
            x = W - RIGHT - 140
            self.parts.append(f'<line x1="{x}" y1="{y}" x2="{x + 20}" y2="{y}" stroke="{COLOURS[i % len(COLOURS)]}" '
                              'stroke-width="2"/>')
            self.parts.append(f'<text x="{x + 25}" y="{y + 4}" font-size="11">{escape(label)}</text>')

    def save(self, path: str | Path):
        Path(path).write_text("\n".join(self.parts + ["</svg>"]) + "\n")


def roc_svg(fpr: Sequence[float], tpr: Sequence[float], auc_value: float, path) -> None:
    c = _Canvas(f"ROC (AUC = {auc_value:.3f})", "1 - specificity (FPR)", "sensitivity (TPR)", (0, 1), (0, 1))
    grid = [0, 0.2, 0.4, 0.6, 0.8, 1.0]
    c.ticks(grid, grid)
    c.polyline([0, 1], [0, 1], "#888888", dash=True, width=1)
    c.polyline(fpr, tpr, COLOURS[0])
    c.save(path)


def sweep_svg(summary: list[dict], key: str, xlabel: str, path, log_x: bool = False) -> None:
    """Mean AUC vs ``key`` per init with +-1 sd error bars."""
    def tx(v):
        return math.log2(v) if log_x else v

    xs_all = sorted({s[key] for s in summary})
    lo_x, hi_x = tx(xs_all[0]), tx(xs_all[-1])
    if lo_x == hi_x:
        lo_x, hi_x = lo_x - 1, hi_x + 1
    c = _Canvas("Downstream test AUC", xlabel, "mean AUC", (lo_x, hi_x), (0, 1))
    c.ticks([tx(v) for v in xs_all], [0, 0.25, 0.5, 0.75, 1.0], [f"{v:g}" for v in xs_all])
    inits = sorted({s["init"] for s in summary})
    for i, init in enumerate(inits):
        colour = COLOURS[i % len(COLOURS)]
        pts = sorted((s[key], s["mean_auc"], s["sd_auc"]) for s in summary
                     if s["init"] == init and s["mean_auc"] == s["mean_auc"])
        c.polyline([tx(p[0]) for p in pts], [p[1] for p in pts], colour)
        for x, m, sd in pts:
            c.errorbar(tx(x), max(0.0, m - sd), min(1.0, m + sd), colour)
    c.legend(inits)
    c.save(path)
