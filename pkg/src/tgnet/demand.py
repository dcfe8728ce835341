"""Zones, centroid nodes, inter-zone costs and gravity-model OD demand."""
from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field, replace
from typing import Iterable, Mapping, Sequence

import numpy as np

from .graph import all_pairs_times, compile_graph
from .network import RoadClass, RoadNetwork, StudyFrame

ZoneId = tuple[int, int]  # (row, col); row counts along y, col along x

DEFAULT_BOOST_PER_ROAD = 5000.0


class DemandError(ValueError):
    pass


@dataclass(frozen=True)
class Zone:
    id: ZoneId
    centroid: tuple[float, float]
    generation: float = 0.0
    attraction: float = 0.0
    external_boost: float = 0.0

    def __post_init__(self):
        if min(self.generation, self.attraction, self.external_boost) < 0:
            raise DemandError(f"zone {self.id}: volumes must be nonnegative")

    @property
    def total_generation(self) -> float:
        return self.generation + self.external_boost

    @property
    def total_attraction(self) -> float:
        return self.attraction + self.external_boost


@dataclass(frozen=True)
class ZoneGrid:
    frame: StudyFrame
    zone_size: float
    rows: int
    cols: int
    zones: tuple[Zone, ...]

    def index(self, zid: ZoneId) -> int:
        r, c = zid
        if not (0 <= r < self.rows and 0 <= c < self.cols):
            raise DemandError(f"unknown zone id {zid}")
        return r * self.cols + c

    def __getitem__(self, zid: ZoneId) -> Zone:
        return self.zones[self.index(zid)]

    def zone_of(self, x: float, y: float) -> ZoneId:
        """Zone containing a point of the closed frame (upper edges clamp)."""
        f = self.frame
        c = min(max(int(math.floor((x - f.x0) / self.zone_size)), 0), self.cols - 1)
        r = min(max(int(math.floor((y - f.y0) / self.zone_size)), 0), self.rows - 1)
        return (r, c)

    def with_volumes(self, generation: float, attraction: float) -> "ZoneGrid":
        return replace(self, zones=tuple(replace(z, generation=generation, attraction=attraction)
                                         for z in self.zones))


@dataclass(frozen=True)
class GravityParams:
    k: float = 0.1
    alpha: float = 0.5
    beta: float = 0.5
    gamma: float = -0.5

    def __post_init__(self):
        if not self.k > 0:
            raise DemandError("gravity k must be positive")


@dataclass(frozen=True)
class ODMatrix:
    """Zone-to-zone demand (veh/h) plus the centroid nodes of one network."""

    demand: Mapping[tuple[ZoneId, ZoneId], float]
    centroid_of: Mapping[ZoneId, str] = field(default_factory=dict)

    def __post_init__(self):
        for (r, s), q in self.demand.items():
            if r == s:
                raise DemandError(f"diagonal OD entry for zone {r}")
            if not q >= 0:
                raise DemandError(f"negative demand for pair {r}->{s}")

    @property
    def total(self) -> float:
        return math.fsum(self.demand.values())

    def with_centroids(self, centroid_of: Mapping[ZoneId, str]) -> "ODMatrix":
        return ODMatrix(self.demand, dict(centroid_of))

    def node_pairs(self) -> list[tuple[str, str, float]]:
        """Nonzero demands as (origin node, destination node, veh/h)."""
        out = []
        for (r, s), q in self.demand.items():
            if q > 0:
                out.append((self.centroid_of[r], self.centroid_of[s], q))
        return out


def _divides(total: float, size: float) -> int | None:
    ratio = total / size
    n = round(ratio)
    if n >= 1 and abs(ratio - n) <= 1e-9 * max(1.0, ratio):
        return int(n)
    return None


def build_zones(frame: StudyFrame, zone_size: float = 1.0) -> ZoneGrid:
    if not zone_size > 0:
        raise DemandError("zone size must be positive")
    cols = _divides(frame.width, zone_size)
    rows = _divides(frame.height, zone_size)
    if cols is None or rows is None:
        raise DemandError(f"zone size {zone_size} km does not divide the "
                          f"{frame.width} x {frame.height} km frame")
    zones = tuple(Zone((r, c), (frame.x0 + (c + 0.5) * zone_size,
                                frame.y0 + (r + 0.5) * zone_size))
                  for r in range(rows) for c in range(cols))
    return ZoneGrid(frame, zone_size, rows, cols, zones)


def select_centroid_nodes(net: RoadNetwork, zones: ZoneGrid) -> dict[ZoneId, str]:
    """Nearest node to each zone centre; ties go to the smaller node id."""
    if not net.nodes:
        raise DemandError("network has no nodes")
    ids = sorted(net.nodes)
    xy = np.array([(net.nodes[i].x, net.nodes[i].y) for i in ids])
    out = {}
    for z in zones.zones:
        d2 = (xy[:, 0] - z.centroid[0]) ** 2 + (xy[:, 1] - z.centroid[1]) ** 2
        out[z.id] = ids[int(np.argmin(d2))]  # argmin returns the first minimum
    return out


def boost_external_zones(zones: ZoneGrid, external: Iterable[tuple[ZoneId, int]],
                         boost_per_road: float = DEFAULT_BOOST_PER_ROAD) -> ZoneGrid:
    """Add ``boost_per_road * major_roads`` to generation and attraction."""
    zl = list(zones.zones)
    for zid, count in external:
        zid = tuple(zid)
        if count < 0:
            raise DemandError(f"zone {zid}: negative major road count")
        i = zones.index(zid)
        zl[i] = replace(zl[i], external_boost=zl[i].external_boost + boost_per_road * count)
    return replace(zones, zones=tuple(zl))


def detect_external_zones(net: RoadNetwork, zones: ZoneGrid,
                          classes: Sequence[RoadClass] = (RoadClass.MOTORWAY, RoadClass.TRUNK),
                          tol: float = 1e-9) -> list[tuple[ZoneId, int]]:
    """Zones holding frame-boundary nodes of major links, with node counts.

    A two-way road entering the frame shares one boundary node, so distinct
    nodes are counted rather than links.
    """
    f = net.frame
    major = set(classes)
    hits: set[str] = set()
    for lk in net.links.values():
        if lk.road_class not in major:
            continue
        for nid in (lk.source, lk.target):
            n = net.nodes[nid]
            if (abs(n.x - f.x0) <= tol or abs(n.x - f.x0 - f.width) <= tol
                    or abs(n.y - f.y0) <= tol or abs(n.y - f.y0 - f.height) <= tol):
                hits.add(nid)
    counts: dict[ZoneId, int] = {}
    for nid in sorted(hits):
        zid = zones.zone_of(net.nodes[nid].x, net.nodes[nid].y)
        counts[zid] = counts.get(zid, 0) + 1
    return sorted(counts.items())


def zone_travel_costs(net: RoadNetwork, centroids: Mapping[ZoneId, str],
                      zones: ZoneGrid) -> np.ndarray:
    """Free-flow shortest travel times (h) between zone centroids.

    Returns a dense matrix indexed in ``zones.zones`` order; unreachable
    pairs are ``inf`` and the diagonal is 0.
    """
    g = compile_graph(net)
    if np.any(np.isnan(g.free_flow_time)):
        raise DemandError("free-flow times missing; run assign_class_params first")
    cnodes = np.array([g.node_index[centroids[z.id]] for z in zones.zones], dtype=np.int64)
    uniq, inv = np.unique(cnodes, return_inverse=True)
    full = all_pairs_times(uniq, g.out_ptr, g.out_links, g.head, g.rank,
                           g.free_flow_time, g.n_nodes)
    costs = full[inv][:, cnodes]
    np.fill_diagonal(costs, 0.0)
    return costs


def gravity_od(zones: ZoneGrid, costs: np.ndarray, params: GravityParams = GravityParams(),
               centroid_of: Mapping[ZoneId, str] | None = None) -> ODMatrix:
    """Unconstrained gravity model ``q = k G^alpha A^beta c^gamma``."""
    nz = len(zones.zones)
    costs = np.asarray(costs, dtype=np.float64)
    if costs.shape != (nz, nz):
        raise DemandError(f"cost matrix shape {costs.shape} != ({nz}, {nz})")
    off = ~np.eye(nz, dtype=bool)
    if not np.any(np.isfinite(costs[off])):
        raise DemandError("no finite inter-zone cost")
    demand = {}
    for i, zr in enumerate(zones.zones):
        g = zr.total_generation
        for j, zs in enumerate(zones.zones):
            if i == j:
                continue
            c = costs[i, j]
            if not math.isfinite(c):
                demand[(zr.id, zs.id)] = 0.0
                continue
            if c <= 0:
                if params.gamma < 0:
                    raise DemandError(f"zero travel cost between distinct zones "
                                      f"{zr.id} and {zs.id} (coincident centroids)")
                c_term = 1.0 if params.gamma == 0 else 0.0
            else:
                c_term = c ** params.gamma
            a = zs.total_attraction
            if g == 0 or a == 0:
                q = 0.0
            else:
                q = params.k * g ** params.alpha * a ** params.beta * c_term
            demand[(zr.id, zs.id)] = q
    return ODMatrix(demand, dict(centroid_of or {}))


def od_to_csv(od: ODMatrix) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["origin_row", "origin_col", "dest_row", "dest_col", "demand_vph"])
    for (r, s) in sorted(od.demand):
        w.writerow([r[0], r[1], s[0], s[1], repr(float(od.demand[(r, s)]))])
    return buf.getvalue()


def od_from_csv(text: str) -> ODMatrix:
    rows = csv.DictReader(io.StringIO(text))
    demand = {}
    for row in rows:
        r = (int(row["origin_row"]), int(row["origin_col"]))
        s = (int(row["dest_row"]), int(row["dest_col"]))
        demand[(r, s)] = float(row["demand_vph"])
    return ODMatrix(demand)


@dataclass(frozen=True)
class DemandConfig:
    zone_size_km: float = 1.0
    base_generation_vph: float = 1000.0
    base_attraction_vph: float = 1000.0
    gravity: GravityParams = GravityParams()
    external_zones: tuple[tuple[ZoneId, int], ...] = ()
    boost_per_road_vph: float = DEFAULT_BOOST_PER_ROAD

    @classmethod
    def from_json(cls, obj: Mapping | None) -> "DemandConfig":
        obj = dict(obj or {})
        grav = obj.pop("gravity", None) or {}
        ext = obj.pop("external_zones", None) or []
        unknown = set(obj) - {"zone_size_km", "base_generation_vph",
                              "base_attraction_vph", "boost_per_road_vph"}
        if unknown:
            raise DemandError(f"unknown demand config keys: {sorted(unknown)}")
        return cls(gravity=GravityParams(**grav),
                   external_zones=tuple(((int(e["row"]), int(e["col"])), int(e["major_roads"]))
                                        for e in ext),
                   **{k: float(v) for k, v in obj.items()})

    def to_json(self) -> dict:
        return {"zone_size_km": self.zone_size_km,
                "base_generation_vph": self.base_generation_vph,
                "base_attraction_vph": self.base_attraction_vph,
                "gravity": {"k": self.gravity.k, "alpha": self.gravity.alpha,
                            "beta": self.gravity.beta, "gamma": self.gravity.gamma},
                "external_zones": [{"row": z[0], "col": z[1], "major_roads": n}
                                   for z, n in self.external_zones],
                "boost_per_road_vph": self.boost_per_road_vph}


def synthesize_demand(net: RoadNetwork, cfg: DemandConfig = DemandConfig()):
    """Zones + gravity OD on ``net`` (which must carry class parameters).

    Returns ``(zones, od)``; ``od.centroid_of`` refers to ``net``.
    """
    zones = build_zones(net.frame, cfg.zone_size_km).with_volumes(
        cfg.base_generation_vph, cfg.base_attraction_vph)
    zones = boost_external_zones(zones, cfg.external_zones, cfg.boost_per_road_vph)
    centroids = select_centroid_nodes(net, zones)
    costs = zone_travel_costs(net, centroids, zones)
    return zones, gravity_od(zones, costs, cfg.gravity, centroids)
