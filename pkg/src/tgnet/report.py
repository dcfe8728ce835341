"""Origin-destination transport lines (TG-OTM), hotspots and rendered outputs."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Mapping, Sequence

from .network import RoadNetwork, StudyFrame
from .raster import Cell, GridSpec, TGDistribution
from .uot import TransportPlan, UOTResult

REPORT_VERSION = 1


class ReportError(OSError):
    pass


@dataclass(frozen=True)
class OtmLine:
    start: tuple[float, float]
    end: tuple[float, float]
    mass: float
    distance: float
    cost_contribution: float

    @classmethod
    def between(cls, start, end, mass: float) -> "OtmLine":
        d = math.hypot(end[0] - start[0], end[1] - start[1])
        return cls((float(start[0]), float(start[1])), (float(end[0]), float(end[1])),
                   float(mass), d, float(mass) * d)


@dataclass(frozen=True)
class HotspotSummary:
    cell: Cell
    outgoing_mass: float
    mean_distance: float
    aggregate_cost: float
    rank: int


def default_thresholds(plan: TransportPlan, cell_size: float) -> tuple[float, float]:
    """``(1e-4 * transported mass, 2 cells)``."""
    return 1e-4 * float(math.fsum(plan.mass.tolist())), 2.0 * cell_size


def otm_lines(plan: TransportPlan, min_mass: float = 0.0,
              min_distance: float = 0.0) -> list[OtmLine]:
    """One line per plan entry passing both thresholds, in plan order."""
    dist = plan.distances
    out = []
    for k in range(len(plan)):
        m, d = float(plan.mass[k]), float(dist[k])
        if m <= 0 or m < min_mass or d < min_distance:
            continue
        if min_distance > 0 and d == 0:
            continue
        a = plan.source_xy[plan.rows[k]]
        b = plan.target_xy[plan.cols[k]]
        out.append(OtmLine((float(a[0]), float(a[1])), (float(b[0]), float(b[1])), m, d, m * d))
    return out


def _source_cell(pt, grid: GridSpec) -> Cell:
    f, C = grid.frame, grid.cell_size
    p = min(max(int(math.floor((pt[0] - f.x0) / C)), 0), grid.m - 1)
    q = min(max(int(math.floor((pt[1] - f.y0) / C)), 0), grid.n - 1)
    return p, q


def hotspots(lines: Iterable[OtmLine], grid: GridSpec, top_k: int = 10) -> list[HotspotSummary]:
    """Source cells ranked by outgoing ``mass * distance``; ties row-major."""
    agg: dict[Cell, list[float]] = {}
    for ln in lines:
        acc = agg.setdefault(_source_cell(ln.start, grid), [0.0, 0.0])
        acc[0] += ln.mass
        acc[1] += ln.cost_contribution
    ranked = sorted(agg.items(), key=lambda kv: (-kv[1][1], kv[0][1], kv[0][0]))
    out = []
    for rank, (cell, (mass, cost)) in enumerate(ranked[:max(top_k, 0)], start=1):
        out.append(HotspotSummary(cell, mass, cost / mass if mass > 0 else 0.0, cost, rank))
    return out


def write_geojson(lines: Sequence[OtmLine]) -> str:
    features = [{"type": "Feature",
                 "geometry": {"type": "LineString",
                              "coordinates": [list(ln.start), list(ln.end)]},
                 "properties": {"mass": ln.mass, "distance": ln.distance,
                                "cost": ln.cost_contribution}}
                for ln in lines]
    return json.dumps({"type": "FeatureCollection", "features": features}, indent=1) + "\n"


def read_geojson_lines(text: str) -> list[OtmLine]:
    obj = json.loads(text)
    out = []
    for feat in obj.get("features", []):
        (x0, y0), (x1, y1) = feat["geometry"]["coordinates"]
        p = feat["properties"]
        out.append(OtmLine((x0, y0), (x1, y1), p["mass"], p["distance"], p["cost"]))
    return out


class _Canvas:
    """Affine map from frame km to a ``size`` px viewbox (y up -> y down)."""

    def __init__(self, frame: StudyFrame, size: int = 1000):
        self.frame = frame
        self.scale = size / max(frame.width, frame.height)
        self.w = frame.width * self.scale
        self.h = frame.height * self.scale

    def xy(self, x: float, y: float) -> tuple[float, float]:
        return ((x - self.frame.x0) * self.scale, self.h - (y - self.frame.y0) * self.scale)


def _heat(canvas: _Canvas, D: TGDistribution, color: str) -> list[str]:
    if not D.mass:
        return []
    peak = max(D.mass.values())
    g = D.grid
    side = g.cell_size * canvas.scale
    out = []
    for (p, q), v in D.mass.items():
        x, y = canvas.xy(g.frame.x0 + p * g.cell_size, g.frame.y0 + (q + 1) * g.cell_size)
        out.append(f'<rect x="{x:.3f}" y="{y:.3f}" width="{side:.3f}" height="{side:.3f}" '
                   f'fill="{color}" fill-opacity="{0.6 * v / peak:.4f}"/>')
    return out


def _net(canvas: _Canvas, net: RoadNetwork, color: str) -> list[str]:
    out = []
    for lk in net.links.values():
        pts = " ".join("{:.3f},{:.3f}".format(*canvas.xy(x, y)) for x, y in lk.geometry)
        out.append(f'<polyline points="{pts}" fill="none" stroke="{color}" '
                   f'stroke-width="0.5"/>')
    return out


def write_svg(net_a: RoadNetwork | None, net_b: RoadNetwork | None, lines: Sequence[OtmLine],
              D_a: TGDistribution | None = None, D_b: TGDistribution | None = None,
              frame: StudyFrame | None = None, size_px: int = 1000) -> str:
    """Overlay: both networks in gray, the two TG heatmaps (red / blue) and
    the transport lines with opacity proportional to mass."""
    frame = frame or next((x.frame for x in (net_a, net_b) if x is not None), None) \
        or next((d.grid.frame for d in (D_a, D_b) if d is not None), None)
    if frame is None:
        raise ValueError("write_svg needs a frame, a network or a distribution")
    cv = _Canvas(frame, size_px)
    out = [f'<svg xmlns="http://www.w3.org/2000/svg" version="1.1" width="{cv.w:.3f}" '
           f'height="{cv.h:.3f}" viewBox="0 0 {cv.w:.3f} {cv.h:.3f}">',
           f'<rect x="0" y="0" width="{cv.w:.3f}" height="{cv.h:.3f}" fill="white"/>']
    if D_a is not None:
        out += _heat(cv, D_a, "#d62728")
    if D_b is not None:
        out += _heat(cv, D_b, "#1f77b4")
    for net, color in ((net_a, "#888888"), (net_b, "#bbbbbb")):
        if net is not None:
            out += _net(cv, net, color)
    peak = max((ln.mass for ln in lines), default=0.0)
    for ln in lines:
        (x0, y0), (x1, y1) = cv.xy(*ln.start), cv.xy(*ln.end)
        out.append(f'<line x1="{x0:.3f}" y1="{y0:.3f}" x2="{x1:.3f}" y2="{y1:.3f}" '
                   f'stroke="black" stroke-width="1" stroke-opacity="{ln.mass / peak:.4f}"/>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def network_stats(net: RoadNetwork) -> dict:
    by_class: dict[str, float] = {}
    for lk in net.links.values():
        by_class[lk.road_class.value] = by_class.get(lk.road_class.value, 0.0) + lk.length
    return {"nodes": len(net.nodes), "links": len(net.links),
            "total_length_km": net.total_length,
            "length_by_class_km": dict(sorted(by_class.items()))}


def write_report(metadata: Mapping, result: UOTResult, stats: Mapping,
                 hotspot_table: Sequence[HotspotSummary] = ()) -> str:
    """Comparison report as JSON text (keys sorted, stable float repr)."""
    obj = {"report_version": REPORT_VERSION,
           "run": dict(metadata),
           "tgw": result.to_json(),
           "networks": dict(stats),
           "hotspots": [{"rank": h.rank, "p": h.cell[0], "q": h.cell[1],
                         "outgoing_mass": h.outgoing_mass, "mean_distance_km": h.mean_distance,
                         "aggregate_cost": h.aggregate_cost} for h in hotspot_table]}
    return json.dumps(obj, indent=1, sort_keys=True) + "\n"


def write_text(path, text: str) -> Path:
    """Write ``text`` to ``path`` (parents created); errors carry the path."""
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(text, encoding="utf-8")
    except OSError as exc:
        raise ReportError(f"cannot write {path}: {exc.strerror or exc}") from exc
    return path


def total_cost(lines: Iterable[OtmLine]) -> float:
    return math.fsum(ln.cost_contribution for ln in lines)


def plan_cost(plan: TransportPlan) -> float:
    return float(math.fsum((plan.mass * plan.distances).tolist()))


__all__ = ["OtmLine", "HotspotSummary", "ReportError", "default_thresholds", "otm_lines",
           "hotspots", "write_geojson", "read_geojson_lines", "write_svg", "write_report",
           "network_stats", "write_text", "total_cost", "plan_cost"]
