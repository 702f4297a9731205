"""SVG rendering of exported episodes.

Robots are green with a dashed sensor-range circle and a dashed line to a
star at their goal; humans seen by some robot at the final frame are orange,
the rest black.  Trails fade toward the past and each entity shows five
constant-velocity predicted poses.
"""
from __future__ import annotations

import math
from collections import defaultdict
from dataclasses import dataclass
from pathlib import Path
from xml.sax.saxutils import quoteattr

from .sim import read_episode_csv

ROBOT_COLOR = "#2ca02c"
VISIBLE_HUMAN_COLOR = "#ff7f0e"
HIDDEN_HUMAN_COLOR = "#000000"
PREDICTIONS = 5
TRAIL_SEGMENTS = 20


@dataclass(frozen=True)
class Transform:
    """World metres to SVG pixels; the y axis points up in the world and down in SVG."""
    xmin: float
    ymax: float
    scale: float
    pad: float

    def __call__(self, x: float, y: float) -> tuple[float, float]:
        return (x - self.xmin) * self.scale + self.pad, (self.ymax - y) * self.scale + self.pad


def fit_transform(points, scale: float = 40.0, pad: float = 20.0) -> tuple[Transform, float, float]:
    """Transform that fits ``points`` plus ``pad`` pixels; returns (transform, width, height)."""
    xs = [p[0] for p in points]
    ys = [p[1] for p in points]
    if not xs:
        return Transform(0.0, 0.0, scale, pad), 2 * pad, 2 * pad
    xmin, xmax, ymin, ymax = min(xs), max(xs), min(ys), max(ys)
    tr = Transform(xmin, ymax, scale, pad)
    return tr, (xmax - xmin) * scale + 2 * pad, (ymax - ymin) * scale + 2 * pad


def _star(cx: float, cy: float, r: float) -> str:
    pts = []
    for k in range(10):
        rad = r if k % 2 == 0 else r * 0.45
        a = -math.pi / 2 + k * math.pi / 5
        pts.append(f"{cx + rad * math.cos(a):.3f},{cy + rad * math.sin(a):.3f}")
    return " ".join(pts)


def _fmt(x: float) -> str:
    return f"{x:.3f}"


def render_rows(meta: dict, rows: list[dict], scale: float = 40.0) -> str:
    """SVG document for parsed episode rows (see :func:`multisoc.sim.read_episode_csv`)."""
    by_entity: dict[int, list[dict]] = defaultdict(list)
    for r in rows:
        by_entity[r["entity_id"]].append(r)
    for track in by_entity.values():
        track.sort(key=lambda r: r["t"])
    sensor = float(meta.get("sensor_range", 0.0) or 0.0)
    if not math.isfinite(sensor):
        sensor = 0.0

    pts = []
    for track in by_entity.values():
        for r in track:
            pts.append((r["x"], r["y"]))
            if r["kind"] == "robot" and "gx" in r:
                pts.append((r["gx"], r["gy"]))
    tr, width, height = fit_transform(pts, scale)

    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{_fmt(width)}" height="{_fmt(height)}" '
           f'viewBox="0 0 {_fmt(width)} {_fmt(height)}">',
           f'<rect class="background" x="0" y="0" width="{_fmt(width)}" height="{_fmt(height)}" '
           f'fill="white"/>']
    for eid in sorted(by_entity):
        track = by_entity[eid]
        last = track[-1]
        robot = last["kind"] == "robot"
        if robot:
            color = ROBOT_COLOR
        else:
            color = VISIBLE_HUMAN_COLOR if last.get("visible", False) else HIDDEN_HUMAN_COLOR
        radius = float(last.get("radius", 0.3)) * tr.scale
        out.append(f'<g class="entity {last["kind"]}" data-id="{eid}">')
        xy = [tr(r["x"], r["y"]) for r in track]
        if len(xy) > 1:
            out.append(f'<polyline class="trail" fill="none" stroke={quoteattr(color)} '
                       f'stroke-opacity="0.25" stroke-width="1" points="'
                       + " ".join(f"{_fmt(a)},{_fmt(b)}" for a, b in xy) + '"/>')
            recent = xy[-(TRAIL_SEGMENTS + 1):]
            for k in range(1, len(recent)):
                alpha = k / (len(recent) - 1)
                (x0, y0), (x1, y1) = recent[k - 1], recent[k]
                out.append(f'<line class="fade" x1="{_fmt(x0)}" y1="{_fmt(y0)}" x2="{_fmt(x1)}" '
                           f'y2="{_fmt(y1)}" stroke={quoteattr(color)} stroke-width="2" '
                           f'stroke-opacity="{alpha:.3f}"/>')
        cx, cy = xy[-1]
        if len(track) > 1:
            dx = track[-1]["x"] - track[-2]["x"]
            dy = track[-1]["y"] - track[-2]["y"]
        else:
            dx = dy = 0.0
        for k in range(1, PREDICTIONS + 1):
            px, py = tr(last["x"] + k * dx, last["y"] + k * dy)
            out.append(f'<circle class="prediction" cx="{_fmt(px)}" cy="{_fmt(py)}" r="{_fmt(radius)}" '
                       f'fill="none" stroke={quoteattr(color)} stroke-opacity="{0.6 / k:.3f}"/>')
        if robot:
            if sensor > 0:
                out.append(f'<circle class="fov" cx="{_fmt(cx)}" cy="{_fmt(cy)}" '
                           f'r="{_fmt(sensor * tr.scale)}" fill="none" stroke={quoteattr(color)} '
                           f'stroke-dasharray="6,4"/>')
            if "gx" in last:
                gx, gy = tr(last["gx"], last["gy"])
                out.append(f'<line class="goal-line" x1="{_fmt(cx)}" y1="{_fmt(cy)}" x2="{_fmt(gx)}" '
                           f'y2="{_fmt(gy)}" stroke={quoteattr(color)} stroke-dasharray="4,4"/>')
                out.append(f'<polygon class="goal" points="{_star(gx, gy, 8.0)}" '
                           f'fill={quoteattr(color)}/>')
        out.append(f'<circle class="body" cx="{_fmt(cx)}" cy="{_fmt(cy)}" r="{_fmt(radius)}" '
                   f'fill={quoteattr(color)}/>')
        out.append(f'<text x="{_fmt(cx)}" y="{_fmt(cy - radius - 2)}" font-size="10" '
                   f'text-anchor="middle">{eid}</text>')
        out.append("</g>")
    out.append("</svg>")
    return "\n".join(out) + "\n"


def render_episode(csv_path, svg_path, scale: float = 40.0) -> int:
    """Render an exported episode CSV to ``svg_path``; returns the number of entities drawn."""
    meta, rows = read_episode_csv(csv_path)
    Path(svg_path).write_text(render_rows(meta, rows, scale))
    return len({r["entity_id"] for r in rows})
