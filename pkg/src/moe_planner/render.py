"""Static top-down SVG rendering of scenes, rollouts, and expert usage."""

from __future__ import annotations

from xml.sax.saxutils import escape

import numpy as np

from .geometry import box_corners
from .scene.types import PolylineKind, Scenario

COLORS = {
    PolylineKind.LANE_CENTER: "#b0b0b0",
    PolylineKind.ROAD_BOUNDARY: "#404040",
    PolylineKind.CROSSWALK: "#d0a000",
}
GT_COLOR = "#1f77b4"
PRED_COLOR = "#d62728"
AGENT_COLOR = "#7f7f7f"
EGO_COLOR = "#2ca02c"
HIT_COLOR = "#ff00ff"
SCALE = 4.0  # px per meter


class _Canvas:
    def __init__(self, bounds: tuple[float, float, float, float], extra_height: float = 0.0):
        self.x0, self.y0, self.x1, self.y1 = bounds
        self.w = (self.x1 - self.x0) * SCALE
        self.h = (self.y1 - self.y0) * SCALE
        self.extra = extra_height
        self.items: list[str] = []

    def pt(self, p) -> str:
        # y axis points up in the scene, down in SVG
        return f"{(p[0] - self.x0) * SCALE:.2f},{(self.y1 - p[1]) * SCALE:.2f}"

    def polyline(self, pts, color, width=1.0, cls="", dash=None):
        d = f' stroke-dasharray="{dash}"' if dash else ""
        self.items.append(
            f'<polyline class="{cls}" points="{" ".join(self.pt(p) for p in pts)}" fill="none" '
            f'stroke="{color}" stroke-width="{width}"{d}/>'
        )

    def polygon(self, pts, color, cls="", opacity=0.8):
        self.items.append(
            f'<polygon class="{cls}" points="{" ".join(self.pt(p) for p in pts)}" fill="{color}" '
            f'fill-opacity="{opacity}" stroke="black" stroke-width="0.5"/>'
        )

    def raw(self, s: str):
        self.items.append(s)

    def svg(self) -> str:
        body = "\n".join(self.items)
        return (
            f'<svg xmlns="http://www.w3.org/2000/svg" width="{self.w:.0f}" height="{self.h + self.extra:.0f}" '
            f'data-x0="{self.x0!r}" data-y1="{self.y1!r}" data-scale="{SCALE!r}">\n'
            f'<rect width="100%" height="100%" fill="white"/>\n{body}\n</svg>\n'
        )


def _bounds(scn: Scenario, extra_points: list[np.ndarray], margin: float = 10.0):
    pts = [p.points for p in scn.map_polylines] + [scn.av.position[scn.av.valid]] + extra_points
    pts = [p for p in pts if len(p)]
    allp = np.concatenate(pts) if pts else np.zeros((1, 2))
    lo, hi = allp.min(0) - margin, allp.max(0) + margin
    return float(lo[0]), float(lo[1]), float(hi[0]), float(hi[1])


def _expert_panel(canvas: _Canvas, histograms: list[list[int]], top: float) -> None:
    """One row of bars per MoE layer, one bar per routed expert."""
    row_h, bar_w, gap = 60.0, 10.0, 2.0
    for layer, counts in enumerate(histograms):
        y_base = top + (layer + 1) * row_h
        peak = max(max(counts), 1)
        canvas.raw(f'<text class="layer-label" x="4" y="{y_base - row_h + 12:.1f}" font-size="10">layer {layer + 2}</text>')
        for i, c in enumerate(counts):
            h = (row_h - 20) * c / peak
            x = 40 + i * (bar_w + gap)
            canvas.raw(
                f'<rect class="expert-bar" data-layer="{layer}" data-expert="{i}" data-count="{c}" '
                f'x="{x:.1f}" y="{y_base - h:.1f}" width="{bar_w}" height="{h:.1f}" fill="#9467bd"/>'
            )


def render_scene(
    scn: Scenario,
    predicted: np.ndarray | None = None,
    ego_path: np.ndarray | None = None,
    agent_states: np.ndarray | None = None,
    colliding: set[int] | None = None,
    histograms: list[list[int]] | None = None,
    title: str | None = None,
) -> str:
    """SVG of the map, agents at t = 0 (or ``agent_states``), the logged AV future, and a plan.

    ``colliding`` holds agent indices drawn in the highlight color, and
    ``histograms`` adds per-layer expert-usage bars beneath the scene.
    """
    gt = scn.gt_future()[:, :2]
    extra = [gt] + ([predicted[:, :2]] if predicted is not None else []) + ([ego_path[:, :2]] if ego_path is not None else [])
    panel = 60.0 * len(histograms) + 10 if histograms else 0.0
    c = _Canvas(_bounds(scn, extra), panel)
    colliding = colliding or set()
    if title:
        c.raw(f'<title>{escape(title)}</title>')
    for poly in scn.map_polylines:
        c.polyline(poly.points, COLORS[poly.kind], 1.0, cls=f"map {poly.kind.name.lower()}")
    if agent_states is None:
        agent_states = np.array(
            [[*a.position[scn.t0], a.heading[scn.t0]] for a in scn.agents]
        ).reshape(-1, 3)
    for k, a in enumerate(scn.agents):
        corners = box_corners(agent_states[k, :2], float(agent_states[k, 2]), *a.size)
        c.polygon(corners, HIT_COLOR if k in colliding else AGENT_COLOR, cls="agent collision" if k in colliding else "agent")
    ego = ego_path[-1] if ego_path is not None else np.array([*scn.av.position[scn.t0], scn.av.heading[scn.t0]])
    c.polygon(box_corners(ego[:2], float(ego[2]), *scn.av.size), EGO_COLOR, cls="ego")
    c.polyline(gt, GT_COLOR, 1.5, cls="gt")
    if predicted is not None:
        c.polyline(predicted[:, :2], PRED_COLOR, 1.5, cls="pred", dash="4,2")
    if ego_path is not None:
        c.polyline(ego_path[:, :2], EGO_COLOR, 1.0, cls="ego-path")
    if histograms:
        _expert_panel(c, histograms, c.h)
    return c.svg()


def render_trace(scn: Scenario, records: list[dict], histograms: list[list[int]] | None = None) -> str:
    """Final frame of a rollout read from its JSON Lines records."""
    if not records:
        raise ValueError("trace has no records")
    try:
        ego_path = np.array([r["ego"][:3] for r in records], dtype=np.float64)
        last = records[-1]
        agents = np.array([a[:3] for a in last["agents"]], dtype=np.float64).reshape(-1, 3)
        colliding = {i for r in records for e in r["events"] if e["type"] == "collision" for i in e["agents"]}
        plans = [r["plan"]["trajectory"] for r in records if "plan" in r]
    except (KeyError, TypeError, IndexError) as exc:
        raise ValueError(f"malformed trace record: {exc}") from exc
    if len(agents) != len(scn.agents):
        raise ValueError("trace does not match the scenario's agent count")
    if histograms is None:
        routing = [r["plan"].get("routing") for r in records if "plan" in r and r["plan"].get("routing")]
        if routing:
            histograms = [list(map(int, np.sum([r[layer] for r in routing], axis=0))) for layer in range(len(routing[0]))]
    predicted = np.array(plans[-1]) if plans else None
    return render_scene(scn, predicted, ego_path, agents, colliding, histograms)
