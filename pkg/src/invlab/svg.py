"""Hand-rolled SVG output: scatter panels and tradeoff curves.

No raster or plotting dependencies; elements are emitted in a fixed order
with fixed number formatting, so identical inputs produce byte-identical
files.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

DEFAULT_LAYER_COLORS = {
    "posterior": "#2b6cb0",
    "prior": "#90cdf4",
    "inverted": "#90cdf4",
    "reconstructed": "#38a169",
    "edited": "#dd6b20",
}
_FALLBACK_COLORS = ("#2b6cb0", "#90cdf4", "#38a169", "#dd6b20", "#805ad5", "#718096")


@dataclass(frozen=True)
class SvgStyle:
    width: int = 640
    height: int = 560
    margin: float = 48.0
    point_radius: float = 2.0
    trajectory_color: str = "#4a5568"
    offset_color: str = "#e53e3e"
    layer_colors: dict = field(default_factory=dict)
    title: str = ""


def _fmt(v: float) -> str:
    return f"{v:.3f}"


def _nice_ticks(lo: float, hi: float, n: int = 5) -> list[float]:
    span = hi - lo
    if span <= 0:
        return [lo]
    raw = span / (n - 1)
    mag = 10.0 ** np.floor(np.log10(raw))
    step = min((m for m in (1.0, 2.0, 2.5, 5.0, 10.0)), key=lambda m: abs(m * mag - raw)) * mag
    start = np.ceil(lo / step) * step
    ticks = []
    v = start
    while v <= hi + 1e-9 * span:
        ticks.append(round(v, 10))
        v += step
    return ticks


class _Canvas:
    """Affine data-to-pixel mapping plus an ordered element buffer."""

    def __init__(self, style: SvgStyle, x_range, y_range):
        self.style = style
        self.x0, self.x1 = x_range
        self.y0, self.y1 = y_range
        self.elements: list[str] = []

    def px(self, x: float) -> float:
        m, w = self.style.margin, self.style.width
        return m + (x - self.x0) / (self.x1 - self.x0) * (w - 2 * m)

    def py(self, y: float) -> float:
        m, h = self.style.margin, self.style.height
        return h - m - (y - self.y0) / (self.y1 - self.y0) * (h - 2 * m)

    def add(self, element: str) -> None:
        self.elements.append(element)

    def axes(self) -> None:
        s = self.style
        self.add(f'<rect x="{_fmt(s.margin)}" y="{_fmt(s.margin)}" '
                 f'width="{_fmt(s.width - 2 * s.margin)}" height="{_fmt(s.height - 2 * s.margin)}" '
                 f'fill="none" stroke="#000000" stroke-width="1"/>')
        for tx in _nice_ticks(self.x0, self.x1):
            px = self.px(tx)
            self.add(f'<line x1="{_fmt(px)}" y1="{_fmt(s.height - s.margin)}" '
                     f'x2="{_fmt(px)}" y2="{_fmt(s.height - s.margin + 5)}" stroke="#000000"/>')
            self.add(f'<text x="{_fmt(px)}" y="{_fmt(s.height - s.margin + 18)}" '
                     f'font-size="11" text-anchor="middle">{tx:g}</text>')
        for ty in _nice_ticks(self.y0, self.y1):
            py = self.py(ty)
            self.add(f'<line x1="{_fmt(s.margin - 5)}" y1="{_fmt(py)}" '
                     f'x2="{_fmt(s.margin)}" y2="{_fmt(py)}" stroke="#000000"/>')
            self.add(f'<text x="{_fmt(s.margin - 8)}" y="{_fmt(py + 4)}" '
                     f'font-size="11" text-anchor="end">{ty:g}</text>')
        if s.title:
            self.add(f'<text x="{_fmt(s.width / 2)}" y="{_fmt(s.margin - 14)}" '
                     f'font-size="14" text-anchor="middle">{s.title}</text>')

    def render(self) -> str:
        s = self.style
        head = (f'<svg xmlns="http://www.w3.org/2000/svg" width="{s.width}" '
                f'height="{s.height}" viewBox="0 0 {s.width} {s.height}">')
        return "\n".join([head, '<rect width="100%" height="100%" fill="#ffffff"/>']
                         + self.elements + ["</svg>"]) + "\n"


def _data_range(arrays, pad: float = 0.05) -> tuple[tuple[float, float], tuple[float, float]]:
    pts = [np.atleast_2d(np.asarray(a, dtype=np.float64)) for a in arrays if a is not None and len(a)]
    if not pts:
        return (-1.0, 1.0), (-1.0, 1.0)
    allpts = np.concatenate([p.reshape(-1, p.shape[-1])[:, :2] for p in pts], axis=0)
    lo = allpts.min(axis=0)
    hi = allpts.max(axis=0)
    span = np.maximum(hi - lo, 1e-9)
    lo = lo - pad * span
    hi = hi + pad * span
    return (float(lo[0]), float(hi[0])), (float(lo[1]), float(hi[1]))


def emit_svg_scatter(points: dict[str, np.ndarray], trajectories, offsets,
                     style: SvgStyle | None, path) -> Path:
    """Scatter panel: point layers, trajectory polylines, offset segments.

    ``points`` maps layer name to an (n, 2) array; ``trajectories`` is an
    iterable of (m, 2) polylines; ``offsets`` an iterable of segment pairs
    ((x, y), (x, y)).  Layers are drawn in dict order, then trajectories,
    then offsets, so identical inputs render byte-identically.
    """
    style = style or SvgStyle()
    trajectories = list(trajectories or [])
    offsets = list(offsets or [])
    ranges = _data_range(list(points.values()) + trajectories
                         + [np.asarray(seg).reshape(-1, 2) for seg in offsets])
    canvas = _Canvas(style, *ranges)
    canvas.axes()
    for seg in offsets:
        (ax, ay), (bx, by) = np.asarray(seg, dtype=np.float64)
        canvas.add(f'<line x1="{_fmt(canvas.px(ax))}" y1="{_fmt(canvas.py(ay))}" '
                   f'x2="{_fmt(canvas.px(bx))}" y2="{_fmt(canvas.py(by))}" '
                   f'stroke="{style.offset_color}" stroke-width="0.6" opacity="0.6"/>')
    for traj in trajectories:
        traj = np.atleast_2d(np.asarray(traj, dtype=np.float64))
        pts = " ".join(f"{_fmt(canvas.px(p[0]))},{_fmt(canvas.py(p[1]))}" for p in traj)
        canvas.add(f'<polyline points="{pts}" fill="none" '
                   f'stroke="{style.trajectory_color}" stroke-width="0.8" opacity="0.7"/>')
    palette = {**DEFAULT_LAYER_COLORS, **style.layer_colors}
    for i, (name, layer) in enumerate(points.items()):
        color = palette.get(name, _FALLBACK_COLORS[i % len(_FALLBACK_COLORS)])
        layer = np.atleast_2d(np.asarray(layer, dtype=np.float64))
        for p in layer:
            canvas.add(f'<circle cx="{_fmt(canvas.px(p[0]))}" cy="{_fmt(canvas.py(p[1]))}" '
                       f'r="{_fmt(style.point_radius)}" fill="{color}" opacity="0.8"/>')
    out = Path(path)
    out.write_text(canvas.render())
    return out


def emit_svg_curve(xs, series: dict[str, np.ndarray], style: SvgStyle | None, path,
                   x_label: str = "", y_label: str = "") -> Path:
    """Line chart with markers, one polyline per named series."""
    style = style or SvgStyle(height=480)
    xs = np.asarray(xs, dtype=np.float64)
    ys = [np.asarray(v, dtype=np.float64) for v in series.values()]
    x_range = (float(xs.min()), float(xs.max())) if len(xs) else (0.0, 1.0)
    if x_range[0] == x_range[1]:
        x_range = (x_range[0] - 0.5, x_range[1] + 0.5)
    lo = min((float(v.min()) for v in ys), default=0.0)
    hi = max((float(v.max()) for v in ys), default=1.0)
    pad = 0.05 * max(hi - lo, 1e-9)
    canvas = _Canvas(style, x_range, (lo - pad, hi + pad))
    canvas.axes()
    if x_label:
        canvas.add(f'<text x="{_fmt(style.width / 2)}" y="{_fmt(style.height - 8)}" '
                   f'font-size="12" text-anchor="middle">{x_label}</text>')
    if y_label:
        canvas.add(f'<text x="14" y="{_fmt(style.height / 2)}" font-size="12" '
                   f'text-anchor="middle" transform="rotate(-90 14 {_fmt(style.height / 2)})">'
                   f'{y_label}</text>')
    for i, (name, yv) in enumerate(series.items()):
        color = _FALLBACK_COLORS[i % len(_FALLBACK_COLORS)]
        pts = " ".join(f"{_fmt(canvas.px(x))},{_fmt(canvas.py(y))}" for x, y in zip(xs, yv))
        canvas.add(f'<polyline points="{pts}" fill="none" stroke="{color}" stroke-width="1.5"/>')
        for x, y in zip(xs, yv):
            canvas.add(f'<circle cx="{_fmt(canvas.px(x))}" cy="{_fmt(canvas.py(y))}" r="3" '
                       f'fill="{color}"/>')
        canvas.add(f'<text x="{_fmt(style.width - style.margin - 6)}" '
                   f'y="{_fmt(style.margin + 16 + 16 * i)}" font-size="12" '
                   f'text-anchor="end" fill="{color}">{name}</text>')
    out = Path(path)
    out.write_text(canvas.render())
    return out
