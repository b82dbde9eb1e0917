"""CSV, JSON and SVG emission with byte-deterministic output."""

from __future__ import annotations

import csv
import io
import json
import math
import os
from typing import Iterable, Sequence
from xml.sax.saxutils import escape

import numpy as np

from .errors import IOFailure
from .grid import Histogram


def fmt(v) -> str:
    """Shortest round-trip text for numbers; empty for NaN/None."""
    if v is None:
        return ""
    if isinstance(v, (bool, np.bool_)):
        return "true" if v else "false"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        f = float(v)
        return "" if math.isnan(f) else repr(f)
    return str(v)


def write_text(path, text: str) -> None:
    """Atomic write through a sibling temporary file."""
    path = os.fspath(path)
    tmp = path + ".tmp"
    try:
        with open(tmp, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except OSError as exc:
        raise IOFailure(f"cannot write {path}: {exc.strerror or exc}", path=path) from exc


def csv_text(rows: Iterable[dict], columns: Sequence[str]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for row in rows:
        w.writerow([fmt(row.get(c)) for c in columns])
    return buf.getvalue()


def write_csv(path, rows: Iterable[dict], columns: Sequence[str]) -> None:
    write_text(path, csv_text(rows, columns))


def read_csv(path) -> list[dict]:
    with open(path, encoding="utf-8", newline="") as fh:
        return list(csv.DictReader(fh))


def _jsonable(v):
    if isinstance(v, dict):
        return {str(k): _jsonable(x) for k, x in v.items()}
    if isinstance(v, (list, tuple, np.ndarray)):
        return [_jsonable(x) for x in v]
    if isinstance(v, (np.integer,)):
        return int(v)
    if isinstance(v, (float, np.floating)):
        f = float(v)
        return None if not math.isfinite(f) else f
    return v


def json_text(obj) -> str:
    return json.dumps(_jsonable(obj), indent=2, sort_keys=True, allow_nan=False) + "\n"


def write_json(path, obj) -> None:
    write_text(path, json_text(obj))


# ---------------------------------------------------------------------------
# SVG

W, H = 480, 320
ML, MR, MT, MB = 60, 20, 30, 50


def _n(v: float) -> str:
    return f"{v:.3f}".rstrip("0").rstrip(".")


def _tick(v: float) -> str:
    return f"{v:.4g}"


def _frame(title: str, xlabel: str, ylabel: str, x0: float, x1: float, y1: float) -> list[str]:
    pw, ph = W - ML - MR, H - MT - MB
    out = [
        '<?xml version="1.0" encoding="UTF-8" standalone="no"?>',
        f'<svg xmlns="http://www.w3.org/2000/svg" version="1.1" width="{W}" height="{H}" viewBox="0 0 {W} {H}">',
        f'<rect x="0" y="0" width="{W}" height="{H}" fill="white"/>',
        f'<text x="{W / 2}" y="18" text-anchor="middle" font-size="13">{escape(title)}</text>',
        f'<line class="axis" x1="{ML}" y1="{MT + ph}" x2="{ML + pw}" y2="{MT + ph}" stroke="black"/>',
        f'<line class="axis" x1="{ML}" y1="{MT}" x2="{ML}" y2="{MT + ph}" stroke="black"/>',
        f'<text x="{ML + pw / 2}" y="{H - 10}" text-anchor="middle" font-size="12">{escape(xlabel)}</text>',
        f'<text x="14" y="{MT + ph / 2}" text-anchor="middle" font-size="12" '
        f'transform="rotate(-90 14 {MT + ph / 2})">{escape(ylabel)}</text>',
    ]
    for k in range(5):
        fx = x0 + (x1 - x0) * k / 4
        px = ML + pw * k / 4
        out.append(f'<text x="{_n(px)}" y="{MT + ph + 16}" text-anchor="middle" font-size="10">{_tick(fx)}</text>')
        fy = y1 * k / 4
        py = MT + ph - ph * k / 4
        out.append(f'<text x="{ML - 4}" y="{_n(py + 3)}" text-anchor="end" font-size="10">{_tick(fy)}</text>')
    return out


def histogram_svg(
    hist: Histogram | None,
    reference_lines: Sequence[tuple[str, float]] = (),
    *,
    title: str = "",
    xlabel: str = "value",
    ylabel: str = "count",
) -> str:
    """Bars with ``class="bin"`` plus labelled vertical reference lines.

    Bar heights are proportional to counts.  ``hist=None`` or an empty
    histogram yields the axes alone.
    """
    pw, ph = W - ML - MR, H - MT - MB
    if hist is None:
        x0, x1, cmax = 0.0, 1.0, 1.0
    else:
        x0, x1 = float(hist.bin_edges[0]), float(hist.bin_edges[-1])
        cmax = float(hist.counts.max()) if hist.counts.size and hist.counts.max() > 0 else 1.0
    out = _frame(title, xlabel, ylabel, x0, x1, cmax)

    def sx(v):
        return ML + (v - x0) / (x1 - x0) * pw

    if hist is not None:
        for k, c in enumerate(hist.counts):
            if c <= 0:
                continue
            a, b = sx(hist.bin_edges[k]), sx(hist.bin_edges[k + 1])
            h = c / cmax * ph
            out.append(
                f'<rect class="bin" x="{_n(a)}" y="{_n(MT + ph - h)}" width="{_n(b - a)}" '
                f'height="{_n(h)}" data-count="{fmt(float(c))}" fill="#7a9cc6" stroke="#334"/>'
            )
    for name, v in reference_lines:
        if not (math.isfinite(v) and x0 <= v <= x1):
            continue
        px = _n(sx(v))
        out.append(
            f'<line class="ref" x1="{px}" y1="{MT}" x2="{px}" y2="{MT + ph}" stroke="#c33" stroke-dasharray="4 3"/>'
        )
        out.append(f'<text x="{px}" y="{MT - 4}" text-anchor="middle" font-size="10" fill="#c33">{escape(name)}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def emit_histogram_svg(hist: Histogram | None, reference_lines, path, **labels) -> None:
    write_text(path, histogram_svg(hist, reference_lines, **labels))


def curve_svg(x: Sequence[float], y: Sequence[float], *, title: str = "", xlabel: str = "x", ylabel: str = "y") -> str:
    """Polyline plot, used for the KL-vs-U curve."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    pw, ph = W - ML - MR, H - MT - MB
    x0, x1 = (float(x.min()), float(x.max())) if x.size else (0.0, 1.0)
    if x1 <= x0:
        x1 = x0 + 1.0
    ymax = float(np.nanmax(y)) if y.size and np.nanmax(y) > 0 else 1.0
    out = _frame(title, xlabel, ylabel, x0, x1, ymax)
    pts = " ".join(f"{_n(ML + (a - x0) / (x1 - x0) * pw)},{_n(MT + ph - b / ymax * ph)}" for a, b in zip(x, y))
    out.append(f'<polyline class="curve" points="{pts}" fill="none" stroke="#246"/>')
    out.append("</svg>")
    return "\n".join(out) + "\n"
