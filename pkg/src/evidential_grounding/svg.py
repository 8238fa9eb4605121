"""Minimal SVG emitters for scatter, quiver and heatmap figures."""
from __future__ import annotations

import math

import numpy as np

SIZE = 320
PAD = 30


def _doc(body: list[str], title: str) -> str:
    head = (f'<svg xmlns="http://www.w3.org/2000/svg" width="{SIZE}" height="{SIZE}" '
            f'viewBox="0 0 {SIZE} {SIZE}">')
    frame = (f'<rect x="{PAD}" y="{PAD}" width="{SIZE - 2 * PAD}" height="{SIZE - 2 * PAD}" '
             'fill="none" stroke="black"/>')
    text = f'<text x="{SIZE / 2:.1f}" y="18" text-anchor="middle" font-size="12">{_esc(title)}</text>'
    return "\n".join([head, f"<title>{_esc(title)}</title>", frame, text, *body, "</svg>"]) + "\n"


def _esc(s: str) -> str:
    return s.replace("&", "&amp;").replace("<", "&lt;").replace(">", "&gt;")


def _xy(u: float, v: float) -> tuple[float, float]:
    """Unit-square coordinates to pixels (v grows upward)."""
    span = SIZE - 2 * PAD
    return PAD + u * span, SIZE - PAD - v * span


def scatter_svg(points, title: str = "normalised error vs evidence") -> str:
    body = []
    for u, v in np.asarray(points, dtype=np.float64).reshape(-1, 2):
        if not (math.isfinite(u) and math.isfinite(v)):
            continue
        x, y = _xy(float(np.clip(u, 0, 1)), float(np.clip(v, 0, 1)))
        body.append(f'<circle cx="{x:.2f}" cy="{y:.2f}" r="1.5" fill="steelblue"/>')
    return _doc(body, title)


def quiver_svg(rows, title: str = "gradient field") -> str:
    """Arrows along the evidence axis; ``rows`` are (delta_norm, phi_norm, neg_grad)."""
    rows = np.asarray(rows, dtype=np.float64).reshape(-1, 3)
    scale = np.max(np.abs(rows[:, 2])) if rows.size else 0.0
    n = max(2, int(round(math.sqrt(len(rows)))))
    step = 0.4 / (n - 1) / scale if scale > 0 else 0.0
    body = []
    for d, p, g in rows:
        x0, y0 = _xy(d, p)
        x1, y1 = _xy(d, p + g * step)
        colour = "firebrick" if g < 0 else "seagreen"
        body.append(f'<line x1="{x0:.2f}" y1="{y0:.2f}" x2="{x1:.2f}" y2="{y1:.2f}" '
                    f'stroke="{colour}"/>')
        body.append(f'<circle cx="{x1:.2f}" cy="{y1:.2f}" r="1.2" fill="{colour}"/>')
    return _doc(body, title)


def heatmap_svg(grid, title: str = "epistemic uncertainty") -> str:
    """Cell (i, j) of ``grid`` is drawn at column j (end), row i (start); NaN cells stay blank."""
    grid = np.asarray(grid, dtype=np.float64)
    finite = grid[np.isfinite(grid)]
    lo, hi = (finite.min(), finite.max()) if finite.size else (0.0, 1.0)
    rows, cols = grid.shape
    cw = (SIZE - 2 * PAD) / cols
    ch = (SIZE - 2 * PAD) / rows
    body = []
    for i in range(rows):
        for j in range(cols):
            val = grid[i, j]
            if not math.isfinite(val):
                continue
            t = 0.0 if hi == lo else (val - lo) / (hi - lo)
            r, g, b = int(255 * t), int(80 + 100 * (1 - t)), int(255 * (1 - t))
            x = PAD + j * cw
            y = SIZE - PAD - (i + 1) * ch
            body.append(f'<rect x="{x:.2f}" y="{y:.2f}" width="{cw:.2f}" height="{ch:.2f}" '
                        f'fill="rgb({r},{g},{b})"/>')
    return _doc(body, title)


def _write(path, text: str) -> None:
    with open(path, "w") as fh:
        fh.write(text)


def write_scatter(path, points, title: str = "normalised error vs evidence") -> None:
    _write(path, scatter_svg(points, title))


def write_quiver(path, rows, title: str = "gradient field") -> None:
    _write(path, quiver_svg(rows, title))


def write_heatmap(path, grid, title: str = "epistemic uncertainty") -> None:
    _write(path, heatmap_svg(grid, title))
