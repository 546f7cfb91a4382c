"""SVG trajectory overlays; hand-written markup, no plotting dependency."""

from __future__ import annotations

from pathlib import Path
from xml.sax.saxutils import escape

import numpy as np

OBSERVED_COLOR = "#ffffff"
TRUTH_COLOR = "#e0282e"
METHOD_COLORS = ("#22c7d6", "#f2b701", "#7bd148", "#c774e8", "#ff8c42", "#5c9dff")


def _polyline(pts: np.ndarray, color: str, width: float, dash: str | None = None) -> str:
    coords = " ".join(f"{u:.2f},{v:.2f}" for u, v in pts)
    extra = f' stroke-dasharray="{dash}"' if dash else ""
    return (f'<polyline points="{coords}" fill="none" stroke="{color}" '
            f'stroke-width="{width}"{extra} />')


def _markers(pts: np.ndarray, color: str, r: float) -> list[str]:
    return [f'<circle cx="{u:.2f}" cy="{v:.2f}" r="{r}" fill="{color}" />' for u, v in pts]


def emit_svg(path, observed: np.ndarray, gt: np.ndarray, estimates: dict, width: float, height: float,
             title: str = "") -> str:
    """Write one clip as SVG and return the markup.

    ``observed`` is ``[No, T, 2]``, ``gt`` is ``[Nt, T, 2]`` and ``estimates``
    maps a method name to an ``[Nt, T, 2]`` array, all in pixels.
    """
    observed = np.asarray(observed, dtype=float)
    gt = np.asarray(gt, dtype=float)
    if gt.ndim != 3 or observed.ndim != 3:
        raise ValueError("observed and gt must be [rows, T, 2]")
    for name, est in estimates.items():
        if np.shape(est) != gt.shape:
            raise ValueError(f"estimate {name!r} has shape {np.shape(est)}, expected {gt.shape}")
    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width:g}" height="{height:g}" '
             f'viewBox="0 0 {width:g} {height:g}">',
             f'<rect width="{width:g}" height="{height:g}" fill="#1b1f27" />']
    if title:
        parts.append(f'<text x="8" y="18" fill="#dddddd" font-size="13" font-family="sans-serif">'
                     f'{escape(title)}</text>')
    for track in observed:
        parts.append(_polyline(track, OBSERVED_COLOR, 1.5))
        parts.extend(_markers(track, OBSERVED_COLOR, 2))
    for track in gt:
        parts.append(_polyline(track, TRUTH_COLOR, 2.0))
        parts.extend(_markers(track, TRUTH_COLOR, 2.5))
    legend = [("observed", OBSERVED_COLOR), ("ground truth", TRUTH_COLOR)]
    for i, (name, est) in enumerate(estimates.items()):
        color = METHOD_COLORS[i % len(METHOD_COLORS)]
        for track in np.asarray(est, dtype=float):
            parts.append(_polyline(track, color, 1.5, "5,3"))
            parts.extend(_markers(track, color, 2))
        legend.append((str(name), color))
    y = height - 12 - 16 * (len(legend) - 1)
    for label, color in legend:
        parts.append(f'<line x1="10" y1="{y - 4:.0f}" x2="30" y2="{y - 4:.0f}" stroke="{color}" stroke-width="3" />')
        parts.append(f'<text x="36" y="{y:.0f}" fill="#dddddd" font-size="12" font-family="sans-serif">'
                     f'{escape(label)}</text>')
        y += 16
    parts.append("</svg>")
    svg = "\n".join(parts) + "\n"
    if path is not None:
        Path(path).write_text(svg, encoding="utf-8")
    return svg
