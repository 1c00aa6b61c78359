"""Plot-data export for loss logs and per-epoch metric series."""

from __future__ import annotations

import csv
import json
from pathlib import Path

import numpy as np

LOSS_HEADER = ["step", "epoch", "d_loss", "g_loss"]


def fit_line(x, y) -> tuple[float, float]:
    """Least-squares (slope, intercept); a single point gives slope 0."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape or x.size == 0:
        raise ValueError("x and y must be non-empty and equally long")
    if x.size == 1 or np.ptp(x) == 0:
        return 0.0, float(y.mean())
    A = np.column_stack([x, np.ones_like(x)])
    (slope, intercept), *_ = np.linalg.lstsq(A, y, rcond=None)
    return float(slope), float(intercept)


def read_series(path: str | Path) -> tuple[str, np.ndarray, dict[str, np.ndarray]]:
    """Return (x name, x values, {series: values}) from a numeric CSV.

    A loss log uses ``step`` as x and its two loss columns as series; any
    other CSV uses its first column as x and the rest as series.
    """
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise ValueError(f"{path}: empty file")
    header = rows[0]
    if len(header) < 2:
        raise ValueError(f"{path}:1: need an x column and at least one series")
    data = []
    for lineno, row in enumerate(rows[1:], start=2):
        if len(row) != len(header):
            raise ValueError(f"{path}:{lineno}: expected {len(header)} fields, got {len(row)}")
        try:
            data.append([float(v) for v in row])
        except ValueError:
            raise ValueError(f"{path}:{lineno}: non-numeric value in {row!r}") from None
    if not data:
        raise ValueError(f"{path}: no data rows")
    table = np.array(data)
    if header == LOSS_HEADER:
        return "step", table[:, 0], {"d_loss": table[:, 2], "g_loss": table[:, 3]}
    return header[0], table[:, 0], {name: table[:, i] for i, name in enumerate(header[1:], start=1)}


def _svg(x_name: str, x: np.ndarray, series: dict[str, np.ndarray], fits: dict[str, tuple[float, float]]) -> str:
    width, panel_h, margin = 640, 200, 40
    height = panel_h * len(series) + margin
    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" viewBox="0 0 {width} {height}">',
        f'<rect width="{width}" height="{height}" fill="white"/>',
    ]
    x0, x1 = float(x.min()), float(x.max())
    xs = (x1 - x0) or 1.0
    for k, (name, y) in enumerate(series.items()):
        top = margin / 2 + k * panel_h
        y0, y1 = float(y.min()), float(y.max())
        ys = (y1 - y0) or 1.0

        def px(v):
            return margin + (v - x0) / xs * (width - 2 * margin)

        def py(v):
            return top + panel_h - margin / 2 - (v - y0) / ys * (panel_h - margin)

        pts = " ".join(f"{px(a):.2f},{py(b):.2f}" for a, b in zip(x, y))
        slope, icpt = fits[name]
        parts.append(f'<text x="{margin}" y="{top + 12:.0f}" font-size="12" font-family="sans-serif">{name} vs {x_name}</text>')
        parts.append(f'<polyline fill="none" stroke="#1f4e9c" stroke-width="1.5" points="{pts}"/>')
        parts.append(
            f'<line x1="{px(x0):.2f}" y1="{py(slope * x0 + icpt):.2f}" x2="{px(x1):.2f}" y2="{py(slope * x1 + icpt):.2f}" '
            'stroke="#c0392b" stroke-dasharray="4 3"/>'
        )
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def emit_curves(path: str | Path, out_dir: str | Path) -> dict[str, tuple[float, float]]:
    """Write ``<series>.csv``, ``curves.svg`` and ``fit.json``; return the fits."""
    x_name, x, series = read_series(path)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    fits = {name: fit_line(x, y) for name, y in series.items()}
    for name, y in series.items():
        with open(out / f"{name}.csv", "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow([x_name, "value", "fit"])
            slope, icpt = fits[name]
            for a, b in zip(x, y):
                w.writerow([repr(float(a)), repr(float(b)), repr(slope * float(a) + icpt)])
    (out / "curves.svg").write_text(_svg(x_name, x, series, fits))
    payload = {name: {"slope": s, "intercept": i} for name, (s, i) in fits.items()}
    (out / "fit.json").write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")
    return fits
