"""CSV and SVG renderings of cross-validation results."""
from __future__ import annotations

import csv
from typing import Sequence

from .cv import AblationConfig, AblationResult, CvReport


def _fmt(v) -> str:
    return "" if v is None else repr(float(v))


def write_cv_report(path, reports: Sequence[CvReport]) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("config", "fold", "accuracy"))
        for r in reports:
            for f, acc in enumerate(r.fold_accuracies):
                w.writerow((r.config, f, _fmt(acc)))


def write_summary(path, reports: Sequence[CvReport], p_vs_prev: Sequence[float | None] | None = None) -> None:
    p_vs_prev = p_vs_prev or [None] * len(reports)
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("config", "mean", "std", "p_vs_prev"))
        for r, p in zip(reports, p_vs_prev):
            w.writerow((r.config, _fmt(r.mean), _fmt(r.std), _fmt(p)))


def write_ablation(cv_path, summary_path, result: AblationResult) -> None:
    write_cv_report(cv_path, result.reports)
    write_summary(summary_path, result.reports, result.p_vs_prev)


def render_svg(reports: Sequence[CvReport], title: str = "Test accuracy per configuration") -> str:
    """Bar chart of mean accuracy with ±1 std whiskers."""
    width, height = 120 + 110 * len(reports), 360
    left, top, plot_h = 60, 40, 240
    base = top + plot_h

    def y(v: float) -> float:
        return base - plot_h * max(0.0, min(1.0, v))

    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
             f'viewBox="0 0 {width} {height}" font-family="sans-serif" font-size="12">',
             f'<text x="{width / 2:.1f}" y="22" text-anchor="middle" font-size="14">{title}</text>',
             f'<line x1="{left}" y1="{top}" x2="{left}" y2="{base}" stroke="black"/>',
             f'<line x1="{left}" y1="{base}" x2="{width - 20}" y2="{base}" stroke="black"/>']
    for tick in (0.0, 0.25, 0.5, 0.75, 1.0):
        parts.append(f'<text x="{left - 6}" y="{y(tick) + 4:.1f}" text-anchor="end">{tick:.2f}</text>')
        parts.append(f'<line x1="{left - 3}" y1="{y(tick):.1f}" x2="{left}" y2="{y(tick):.1f}" stroke="black"/>')
    for i, r in enumerate(reports):
        x0 = left + 30 + 110 * i
        parts.append(f'<rect x="{x0}" y="{y(r.mean):.2f}" width="60" height="{base - y(r.mean):.2f}" '
                     f'fill="#4c72b0"/>')
        cx = x0 + 30
        lo, hi = y(r.mean - r.std), y(r.mean + r.std)
        parts.append(f'<line x1="{cx}" y1="{lo:.2f}" x2="{cx}" y2="{hi:.2f}" stroke="black"/>')
        parts.append(f'<line x1="{cx - 8}" y1="{hi:.2f}" x2="{cx + 8}" y2="{hi:.2f}" stroke="black"/>')
        parts.append(f'<line x1="{cx - 8}" y1="{lo:.2f}" x2="{cx + 8}" y2="{lo:.2f}" stroke="black"/>')
        try:
            label = f"({r.config}) {AblationConfig(int(r.config)).label}"
        except ValueError:
            label = r.config
        parts.append(f'<text x="{cx}" y="{base + 18}" text-anchor="middle">{label}</text>')
        parts.append(f'<text x="{cx}" y="{base + 34}" text-anchor="middle">{r.mean:.3f}</text>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def write_svg(path, reports: Sequence[CvReport]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(render_svg(reports))
