"""CSV and SVG emission.  No plotting library: the SVG is assembled by hand."""

import csv
import os
from pathlib import Path
from xml.sax.saxutils import escape

PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#17becf")


def output_dir(requested=None):
    """Resolve the output directory; ``COEFFLAB_OUT`` overrides ``requested``."""
    env = os.environ.get("COEFFLAB_OUT")
    path = Path(env if env else (requested or "out")).expanduser().resolve()
    path.mkdir(parents=True, exist_ok=True)
    return path


def _cell(v):
    if hasattr(v, "item") and not isinstance(v, (str, bytes)):
        v = v.item()  # numpy scalar -> python number
    if isinstance(v, float):
        return repr(v)
    return v


def write_csv(path, header, rows):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for r in rows:
            w.writerow([_cell(v) for v in r])
    return path


def read_csv(path):
    with open(path, newline="", encoding="utf-8") as fh:
        r = csv.reader(fh)
        header = next(r)
        return header, list(r)


def scatter_svg(series, title="", width=480, height=480, margin=40):
    """SVG 1.1 scatter plot.

    ``series`` is a list of ``(label, points)`` with ``points`` an
    iterable of (x, y).  Axes share one scale so shapes are not
    distorted.
    """
    pts = [(float(x), float(y)) for _, ps in series for x, y in ps]
    if not pts:
        raise ValueError("scatter_svg needs at least one point")
    xs, ys = [p[0] for p in pts], [p[1] for p in pts]
    lo = min(min(xs), min(ys))
    hi = max(max(xs), max(ys))
    pad = 0.1 * (hi - lo) if hi > lo else 1.0
    lo, hi = lo - pad, hi + pad
    span = hi - lo
    inner_w, inner_h = width - 2 * margin, height - 2 * margin

    def sx(x):
        return margin + (x - lo) / span * inner_w

    def sy(y):
        return height - margin - (y - lo) / span * inner_h

    out = [
        '<?xml version="1.0" encoding="UTF-8"?>',
        f'<svg xmlns="http://www.w3.org/2000/svg" version="1.1" width="{width}" height="{height}" '
        f'viewBox="0 0 {width} {height}">',
        f'<rect x="0" y="0" width="{width}" height="{height}" fill="white"/>',
        f'<rect x="{margin}" y="{margin}" width="{inner_w}" height="{inner_h}" fill="none" stroke="#888"/>',
    ]
    if lo < 0 < hi:
        out.append(f'<line x1="{sx(0):.2f}" y1="{margin}" x2="{sx(0):.2f}" y2="{height - margin}" stroke="#ddd"/>')
        out.append(f'<line x1="{margin}" y1="{sy(0):.2f}" x2="{width - margin}" y2="{sy(0):.2f}" stroke="#ddd"/>')
    if title:
        out.append(f'<text x="{width / 2}" y="{margin / 2 + 5}" text-anchor="middle" font-size="14">'
                   f'{escape(title)}</text>')
    for k, (label, ps) in enumerate(series):
        color = PALETTE[k % len(PALETTE)]
        out.append(f'<g fill="{color}">')
        for x, y in ps:
            out.append(f'<circle cx="{sx(x):.2f}" cy="{sy(y):.2f}" r="4"/>')
        out.append("</g>")
        ly = margin + 16 + 16 * k
        out.append(f'<circle cx="{margin + 10}" cy="{ly - 4}" r="4" fill="{color}"/>')
        out.append(f'<text x="{margin + 20}" y="{ly}" font-size="12">{escape(str(label))}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def write_svg(path, text):
    Path(path).write_text(text, encoding="utf-8")
    return path
