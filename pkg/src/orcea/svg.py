"""SVG rendering of evidence sets and 2D posterior slices.

Output is plain text built with fixed number formatting, so the same input
always yields the same bytes.
"""

from __future__ import annotations

import math
from pathlib import Path
from typing import Sequence
from xml.sax.saxutils import escape

import numpy as np

from .mixture import Mixture
from .scene import AE, EE, EvidenceSet, Label

CLASS_COLORS = ("#4a78c2", "#e0b030", "#5aa05a", "#a05aa0")
NOISE_COLOR = "#d62020"
MARGIN = 8.0


def _f(v: float) -> str:
    s = f"{v:.3f}".rstrip("0").rstrip(".")
    return "0" if s in ("-0", "") else s


def _header(x0, y0, x1, y1) -> list[str]:
    w, h = x1 - x0 + 2 * MARGIN, y1 - y0 + 2 * MARGIN
    return [
        '<?xml version="1.0" encoding="UTF-8"?>',
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{_f(w)}" height="{_f(h)}" '
        f'viewBox="{_f(x0 - MARGIN)} {_f(y0 - MARGIN)} {_f(w)} {_f(h)}">',
        f'<rect class="frame" x="{_f(x0)}" y="{_f(y0)}" width="{_f(x1 - x0)}" '
        f'height="{_f(y1 - y0)}" fill="white" stroke="#999" stroke-width="0.5"/>',
    ]


def _noise_mark(x, y) -> str:
    # A small red corner bracket at the item's upper-left.
    return (f'<path class="noise" d="M{_f(x - 3)} {_f(y)} L{_f(x - 3)} {_f(y - 3)} '
            f'L{_f(x)} {_f(y - 3)}" fill="none" stroke="{NOISE_COLOR}" stroke-width="0.8"/>')


def _ee(e: EE, length: float) -> list[str]:
    c, s = math.cos(e.theta), math.sin(e.theta)
    hx, hy = 0.5 * length * c, 0.5 * length * s
    deg = math.degrees(e.theta)
    return [
        f'<rect class="ee-width" x="{_f(-0.5 * length)}" y="{_f(-0.5 * e.w)}" width="{_f(length)}" '
        f'height="{_f(e.w)}" transform="translate({_f(e.x)} {_f(e.y)}) rotate({_f(deg)})" '
        f'fill="#888" fill-opacity="0.25" stroke="none"/>',
        f'<line class="ee" x1="{_f(e.x - hx)}" y1="{_f(e.y - hy)}" x2="{_f(e.x + hx)}" '
        f'y2="{_f(e.y + hy)}" stroke="black" stroke-width="0.6"/>',
    ]


def _ae(e: AE) -> str:
    color = CLASS_COLORS[e.c % len(CLASS_COLORS)]
    return (f'<rect class="ae" x="{_f(e.x - 0.5 * e.w)}" y="{_f(e.y - 0.5 * e.w)}" '
            f'width="{_f(e.w)}" height="{_f(e.w)}" fill="{color}" fill-opacity="0.6" stroke="none"/>')


def evidence_svg(es: EvidenceSet, ee_length: float = 4.0, title: str | None = None) -> str:
    x0, y0, x1, y1 = es.domain
    out = _header(x0, y0, x1, y1)
    if title:
        out.append(f"<title>{escape(title)}</title>")
    labels = es.labels or (None,) * len(es.items)
    for e, lab in zip(es.items, labels):
        out += _ee(e, ee_length) if isinstance(e, EE) else [_ae(e)]
        if lab is Label.NOISE:
            out.append(_noise_mark(e.x, e.y))
    out.append("</svg>")
    return "\n".join(out) + "\n"


def _ellipse(mean, cov, k, opacity) -> str:
    vals, vecs = np.linalg.eigh(cov)
    vals = np.maximum(vals, 0.0)
    ang = math.degrees(math.atan2(vecs[1, 1], vecs[0, 1]))
    return (f'<ellipse class="sigma{k}" cx="0" cy="0" rx="{_f(k * math.sqrt(vals[1]))}" '
            f'ry="{_f(k * math.sqrt(vals[0]))}" '
            f'transform="translate({_f(mean[0])} {_f(mean[1])}) rotate({_f(ang)})" fill="none" '
            f'stroke="#1f4e9a" stroke-opacity="{_f(opacity)}" stroke-width="0.6"/>')


def posterior_svg(mix: Mixture, axes: Sequence[int] = (0, 1), bounds=None,
                  title: str | None = None) -> str:
    """1 and 2 sigma ellipses of every component over two chosen axes.

    Stroke opacity follows the component weight relative to the heaviest.
    """
    i, j = axes
    means = mix.means[:, [i, j]]
    covs = mix.covs[:, [i, j]][:, :, [i, j]]
    if bounds is None:
        sd = np.sqrt(np.maximum(np.einsum("kii->ki", covs), 0.0))
        lo = (means - 2.5 * sd).min(axis=0)
        hi = (means + 2.5 * sd).max(axis=0)
        pad = np.maximum(0.05 * (hi - lo), 1e-6)
        bounds = (lo[0] - pad[0], lo[1] - pad[1], hi[0] + pad[0], hi[1] + pad[1])
    out = _header(*bounds)
    if title:
        out.append(f"<title>{escape(title)}</title>")
    rel = np.exp(mix.log_weights - mix.log_weights.max())
    for m, c, w in zip(means, covs, rel):
        op = 0.15 + 0.85 * w
        out.append(_ellipse(m, c, 1, op))
        out.append(_ellipse(m, c, 2, 0.5 * op))
    out.append("</svg>")
    return "\n".join(out) + "\n"


def render_svg(item, path, **kw) -> Path:
    """Write an evidence set or a posterior slice to ``path``."""
    text = evidence_svg(item, **kw) if isinstance(item, EvidenceSet) else posterior_svg(item, **kw)
    path = Path(path)
    path.write_text(text)
    return path
