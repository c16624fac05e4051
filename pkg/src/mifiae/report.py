"""CSV and SVG writers for evaluation outputs.  No plotting library needed."""

from __future__ import annotations

import csv
import io
from pathlib import Path
from xml.sax.saxutils import escape

from .survival import GROUP_NAMES, SurvivalCurve

COLOURS = ("#2a7ab0", "#e0a020", "#c0392b")


def write_csv(path: Path, header, rows) -> None:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([repr(float(v)) if isinstance(v, float) else v for v in row])
    Path(path).write_text(buf.getvalue())


def read_csv(path: Path) -> list[dict[str, str]]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def write_km_csv(path: Path, curve: SurvivalCurve) -> None:
    """One row per distinct event time: time, S(t), number at risk, events."""
    rows = [(float(t), float(s), int(n), int(d)) for t, s, n, d in
            zip(curve.event_times, curve.survival, curve.at_risk, curve.n_events)]
    write_csv(path, ("time", "survival", "at_risk", "events"), rows)


def _step_path(curve: SurvivalCurve, t_max: float, sx, sy) -> str:
    pts = [(0.0, 1.0)]
    s_prev = 1.0
    for t, s in zip(curve.event_times, curve.survival):
        pts.append((float(t), s_prev))
        pts.append((float(t), float(s)))
        s_prev = float(s)
    pts.append((t_max, s_prev))
    return " ".join(f"{'M' if i == 0 else 'L'}{sx(t):.2f},{sy(s):.2f}" for i, (t, s) in enumerate(pts))


def render_km_svg(curves: list[SurvivalCurve], p_value: float, t_max: float,
                  labels=GROUP_NAMES, title: str = "Kaplan-Meier by risk group") -> str:
    width, height = 480, 340
    left, right, top, bottom = 56, 16, 36, 48
    pw, ph = width - left - right, height - top - bottom
    t_max = t_max if t_max > 0 else 1.0

    def sx(t):
        return left + pw * t / t_max

    def sy(s):
        return top + ph * (1.0 - s)

    out = [
        '<?xml version="1.0" encoding="UTF-8"?>',
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
        f'viewBox="0 0 {width} {height}" font-family="sans-serif" font-size="11">',
        f'<text x="{width / 2:.1f}" y="20" text-anchor="middle" font-size="13">{escape(title)}</text>',
        f'<rect x="{left}" y="{top}" width="{pw}" height="{ph}" fill="none" stroke="#444"/>',
    ]
    for i in range(6):
        s = i / 5
        out.append(f'<line x1="{left - 4}" y1="{sy(s):.2f}" x2="{left}" y2="{sy(s):.2f}" stroke="#444"/>')
        out.append(f'<text x="{left - 7}" y="{sy(s) + 4:.2f}" text-anchor="end">{s:.1f}</text>')
        t = t_max * i / 5
        out.append(f'<line x1="{sx(t):.2f}" y1="{top + ph}" x2="{sx(t):.2f}" y2="{top + ph + 4}" stroke="#444"/>')
        out.append(f'<text x="{sx(t):.2f}" y="{top + ph + 16}" text-anchor="middle">{t:.0f}</text>')
    out.append(f'<text x="{left + pw / 2:.1f}" y="{height - 10}" text-anchor="middle">Time (months)</text>')
    out.append(f'<text x="14" y="{top + ph / 2:.1f}" text-anchor="middle" '
               f'transform="rotate(-90 14 {top + ph / 2:.1f})">Survival probability</text>')
    for g, (curve, label) in enumerate(zip(curves, labels)):
        colour = COLOURS[g % len(COLOURS)]
        out.append(f'<path d="{_step_path(curve, t_max, sx, sy)}" fill="none" '
                   f'stroke="{colour}" stroke-width="1.6"><title>{escape(label)}</title></path>')
        ly = top + 14 + 15 * g
        out.append(f'<line x1="{left + pw - 90}" y1="{ly}" x2="{left + pw - 70}" y2="{ly}" '
                   f'stroke="{colour}" stroke-width="2"/>')
        out.append(f'<text x="{left + pw - 64}" y="{ly + 4}">{escape(label)}</text>')
    out.append(f'<text x="{left + 8}" y="{top + ph - 8}">log-rank p = {p_value:.3g}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"
