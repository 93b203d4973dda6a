"""Static SVG rendering of run traces over the shape field.

Cells are shaded by gray level, robot trajectories are polylines colored by
the mode in which each segment was executed, and final positions are dots.
Output is plain SVG 1.1 text with no external dependencies.
"""
from __future__ import annotations

import csv
from pathlib import Path
from xml.sax.saxutils import escape

import numpy as np

from .shapefield import ShapeField

MODE_COLORS = {
    "localizing": "#d62728",
    "agreeing": "#1f77b4",
    "forming": "#2ca02c",
    "idle": "#7f7f7f",
}
_SCALE = 40.0  # pixels per meter


class TraceError(ValueError):
    pass


def read_trace(path) -> dict[int, list[dict]]:
    """Parse a trace CSV into per-robot row lists ordered by time."""
    per_robot: dict[int, list[dict]] = {}
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        needed = {"t", "id", "mode", "px", "py"}
        if reader.fieldnames is None or not needed <= set(reader.fieldnames):
            raise TraceError(f"trace header missing columns {sorted(needed)}")
        for row in reader:
            try:
                rid = int(row["id"])
                rec = {"t": float(row["t"]), "mode": row["mode"],
                       "x": float(row["px"]), "y": float(row["py"])}
            except (KeyError, ValueError) as exc:
                raise TraceError(f"malformed trace row: {row}") from exc
            per_robot.setdefault(rid, []).append(rec)
    return per_robot


def _bounds(per_robot: dict, field: ShapeField | None):
    xs, ys = [], []
    if field is not None:
        half = field.l_cell / 2.0
        for c in field.gray_centers:
            xs += [c[0] - half, c[0] + half]
            ys += [c[1] - half, c[1] + half]
    for rows in per_robot.values():
        xs += [r["x"] for r in rows]
        ys += [r["y"] for r in rows]
    if not xs:
        xs, ys = [0.0, 1.0], [0.0, 1.0]
    pad = 1.0
    return min(xs) - pad, max(xs) + pad, min(ys) - pad, max(ys) + pad


def render_svg(per_robot: dict[int, list[dict]],
               field: ShapeField | None = None,
               origin: np.ndarray | None = None) -> str:
    """Build the SVG document text for one run.

    origin shifts the field (drawn in seed-anchored meters) into the trace's
    world frame; defaults to the seed robot's first trace position.
    """
    if origin is None:
        rows0 = per_robot.get(0)
        origin = np.array([rows0[0]["x"], rows0[0]["y"]]) if rows0 \
            else np.zeros(2)

    shifted = dict(per_robot)
    x0, x1, y0, y1 = _bounds(per_robot, None)
    if field is not None:
        fx0, fx1, fy0, fy1 = _bounds({}, field)
        x0 = min(x0, fx0 + origin[0])
        x1 = max(x1, fx1 + origin[0])
        y0 = min(y0, fy0 + origin[1])
        y1 = max(y1, fy1 + origin[1])

    w = (x1 - x0) * _SCALE
    h = (y1 - y0) * _SCALE

    def px(x: float) -> float:
        return (x - x0) * _SCALE

    def py(y: float) -> float:
        return (y1 - y) * _SCALE  # flip: SVG y grows downward

    parts = [
        '<?xml version="1.0" encoding="UTF-8"?>',
        f'<svg xmlns="http://www.w3.org/2000/svg" version="1.1" '
        f'width="{w:.1f}" height="{h:.1f}" '
        f'viewBox="0 0 {w:.1f} {h:.1f}">',
        f'<rect width="{w:.1f}" height="{h:.1f}" fill="white"/>',
    ]

    if field is not None:
        half = field.l_cell / 2.0
        side = field.l_cell * _SCALE
        for center, xi in zip(field.gray_centers, field.gray_values):
            shade = int(round(40 + 200 * xi))
            color = f"rgb({shade},{shade},{shade})"
            cx = px(center[0] + origin[0] - half)
            cy = py(center[1] + origin[1] + half)
            parts.append(f'<rect x="{cx:.1f}" y="{cy:.1f}" '
                         f'width="{side:.1f}" height="{side:.1f}" '
                         f'fill="{color}" stroke="none"/>')

    for rid in sorted(shifted):
        rows = shifted[rid]
        if not rows:
            continue
        # one polyline per contiguous same-mode run of the trajectory
        seg = [rows[0]]
        for rec in rows[1:] + [None]:
            if rec is not None and rec["mode"] == seg[-1]["mode"]:
                seg.append(rec)
                continue
            color = MODE_COLORS.get(seg[-1]["mode"], "#000000")
            pts = " ".join(f"{px(r['x']):.1f},{py(r['y']):.1f}" for r in seg)
            parts.append(f'<polyline points="{pts}" fill="none" '
                         f'stroke="{escape(color)}" stroke-width="1.2" '
                         f'stroke-opacity="0.8"/>')
            if rec is not None:
                seg = [seg[-1], rec]  # keep segments connected
        last = rows[-1]
        parts.append(f'<circle cx="{px(last["x"]):.1f}" '
                     f'cy="{py(last["y"]):.1f}" r="4" '
                     f'fill="{MODE_COLORS.get(last["mode"], "#000000")}" '
                     f'stroke="black" stroke-width="0.8"/>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def render_file(trace_path, out_path, field: ShapeField | None = None) -> Path:
    svg = render_svg(read_trace(trace_path), field)
    out = Path(out_path)
    out.write_text(svg)
    return out
