"""Deterministic static SVG rendering of rollout frames.

Map polylines in grey, agent boxes colored by origin class: initial agents
blue, inserted agents green, the ego agent red.
"""

from __future__ import annotations

import math

import numpy as np

ORIGIN_COLORS = {"initial": "#4878cf", "inserted": "#59a14f", "ego": "#d1342f"}
KIND_STYLE = {
    "lane_center": ("#b0b0b0", 0.4),
    "road_edge": ("#606060", 0.8),
    "crosswalk": ("#c8a2c8", 0.6),
    "stop_line": ("#cc6666", 0.6),
    "other": ("#d0d0d0", 0.4),
}


def _fmt(v: float) -> str:
    return f"{v:.3f}"


def _box_points(x, y, heading, length, width):
    c, s = math.cos(heading), math.sin(heading)
    pts = []
    for dx, dy in ((length / 2, width / 2), (length / 2, -width / 2),
                   (-length / 2, -width / 2), (-length / 2, width / 2)):
        pts.append((x + dx * c - dy * s, y + dx * s + dy * c))
    return pts


def render_svg(map_polylines, agents, raw_step: int, view_half: float = 90.0) -> str:
    """One frame as an SVG string; coordinates are centered on the ego.

    agents: list of dicts with keys id, origin, shape, states ([n, 4]).
    """
    ego = next(a for a in agents if a["origin"] == "ego")
    st = np.asarray(ego["states"])
    if not (0 <= raw_step < st.shape[0]):
        raise ValueError(f"step {raw_step} out of range (0..{st.shape[0] - 1})")
    cx, cy = st[raw_step, 0], st[raw_step, 1]
    size = 720.0
    scale = size / (2 * view_half)

    def sx(x):
        return (x - cx) * scale + size / 2

    def sy(y):
        return size / 2 - (y - cy) * scale  # svg y grows downward

    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{int(size)}" height="{int(size)}" '
        f'viewBox="0 0 {int(size)} {int(size)}">',
        f'<rect width="{int(size)}" height="{int(size)}" fill="#fbfbf8"/>',
    ]
    for pl in map_polylines:
        color, w = KIND_STYLE.get(pl.kind, KIND_STYLE["other"])
        pts = " ".join(f"{_fmt(sx(p[0]))},{_fmt(sy(p[1]))}" for p in pl.points)
        parts.append(
            f'<polyline points="{pts}" fill="none" stroke="{color}" '
            f'stroke-width="{_fmt(w * scale)}"/>'
        )
    for a in agents:
        states = np.asarray(a["states"])
        if raw_step >= states.shape[0] or states[raw_step, 3] <= 0.5:
            continue
        x, y, h = states[raw_step, 0:3]
        length, width = a["shape"][0], a["shape"][1]
        box = _box_points(x, y, h, length, width)
        pts = " ".join(f"{_fmt(sx(px))},{_fmt(sy(py))}" for px, py in box)
        color = ORIGIN_COLORS.get(a["origin"], "#888888")
        parts.append(
            f'<polygon points="{pts}" fill="{color}" fill-opacity="0.85" '
            f'stroke="#202020" stroke-width="0.8" data-origin="{a["origin"]}" '
            f'data-id="{a["id"]}"/>'
        )
        # heading tick
        hx, hy = x + (length / 2) * math.cos(h), y + (length / 2) * math.sin(h)
        parts.append(
            f'<line x1="{_fmt(sx(x))}" y1="{_fmt(sy(y))}" x2="{_fmt(sx(hx))}" '
            f'y2="{_fmt(sy(hy))}" stroke="#202020" stroke-width="0.8"/>'
        )
    parts.append(f'<text x="10" y="20" font-size="14" fill="#404040">step {raw_step}</text>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"
