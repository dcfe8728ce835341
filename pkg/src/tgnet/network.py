"""Road-network data model, interchange I/O and extraction operators.

Coordinates are planar kilometres in a local study frame.  Networks are
immutable once built; every operation returns a new :class:`RoadNetwork`.
"""
from __future__ import annotations

import enum
import json
import math
import re
from dataclasses import dataclass, field, replace
from types import MappingProxyType
from typing import Iterable, Mapping, Sequence

from .rng import SplitMix64

ENDPOINT_TOL_KM = 1e-9
SNAP_TOL_KM = 1e-6
EARTH_RADIUS_KM = 6371.0088


class NetworkError(ValueError):
    """Invalid network content (schema, references or geometry)."""


class RoadClass(enum.Enum):
    MOTORWAY = "motorway"
    TRUNK = "trunk"
    PRIMARY = "primary"
    SECONDARY = "secondary"
    TERTIARY = "tertiary"
    RESIDENTIAL = "residential"

    @property
    def rank(self) -> int:
        """0 for motorway (highest) through 5 for residential."""
        return _RANK[self]

    @classmethod
    def parse(cls, label: "str | RoadClass") -> "RoadClass":
        if isinstance(label, RoadClass):
            return label
        try:
            return cls(str(label).strip().lower())
        except ValueError:
            raise NetworkError(f"unknown road class {label!r}") from None


_RANK = {c: i for i, c in enumerate(RoadClass)}


@dataclass(frozen=True)
class StudyFrame:
    x0: float
    y0: float
    width: float
    height: float

    def __post_init__(self):
        for name in ("x0", "y0", "width", "height"):
            if not math.isfinite(getattr(self, name)):
                raise NetworkError(f"frame {name} must be finite")
        if self.width <= 0 or self.height <= 0:
            raise NetworkError("frame width and height must be positive")

    @property
    def diameter(self) -> float:
        return math.hypot(self.width, self.height)

    def contains(self, x: float, y: float, tol: float = ENDPOINT_TOL_KM) -> bool:
        """Closed-rectangle membership."""
        return (self.x0 - tol <= x <= self.x0 + self.width + tol
                and self.y0 - tol <= y <= self.y0 + self.height + tol)

    def to_json(self) -> dict:
        return {"x0": self.x0, "y0": self.y0, "width": self.width,
                "height": self.height, "units": "km"}


@dataclass(frozen=True)
class Node:
    id: str
    x: float
    y: float

    def __post_init__(self):
        if not (math.isfinite(self.x) and math.isfinite(self.y)):
            raise NetworkError(f"node {self.id!r}: coordinates must be finite")


@dataclass(frozen=True)
class ClassParams:
    road_class: RoadClass
    limit_speed: float
    capacity: float

    def __post_init__(self):
        if not (self.limit_speed > 0 and self.capacity > 0):
            raise NetworkError(
                f"class {self.road_class.value}: limit speed and capacity must be > 0")


#: Limit speed (km/h) and capacity (veh/h) per road class.
DEFAULT_CLASS_TABLE: tuple[ClassParams, ...] = (
    ClassParams(RoadClass.MOTORWAY, 100.0, 10000.0),
    ClassParams(RoadClass.TRUNK, 60.0, 7500.0),
    ClassParams(RoadClass.PRIMARY, 60.0, 2500.0),
    ClassParams(RoadClass.SECONDARY, 60.0, 1500.0),
    ClassParams(RoadClass.TERTIARY, 40.0, 500.0),
    ClassParams(RoadClass.RESIDENTIAL, 40.0, 250.0),
)


def polyline_length(vertices: Sequence[tuple[float, float]]) -> float:
    return sum(math.hypot(b[0] - a[0], b[1] - a[1])
               for a, b in zip(vertices[:-1], vertices[1:]))


@dataclass(frozen=True)
class Link:
    """Directed link ``source -> target`` with polyline geometry.

    ``capacity`` (veh/h) and ``free_flow_time`` (h) stay ``None`` until
    :func:`assign_class_params` runs.
    """

    id: str
    source: str
    target: str
    geometry: tuple[tuple[float, float], ...]
    road_class: RoadClass
    length: float = field(default=-1.0)
    capacity: float | None = None
    free_flow_time: float | None = None

    def __post_init__(self):
        geom = tuple((float(x), float(y)) for x, y in self.geometry)
        object.__setattr__(self, "geometry", geom)
        if len(geom) < 2:
            raise NetworkError(f"link {self.id!r}: geometry needs at least 2 vertices")
        for x, y in geom:
            if not (math.isfinite(x) and math.isfinite(y)):
                raise NetworkError(f"link {self.id!r}: non-finite vertex")
        for k, (a, b) in enumerate(zip(geom[:-1], geom[1:])):
            if a == b:
                raise NetworkError(
                    f"link {self.id!r}: zero-length segment at vertex {k}")
        length = polyline_length(geom)
        if self.length < 0:
            object.__setattr__(self, "length", length)
        elif abs(self.length - length) > ENDPOINT_TOL_KM:
            raise NetworkError(f"link {self.id!r}: length {self.length} does not "
                               f"match geometry arclength {length}")
        if self.length <= 0:
            raise NetworkError(f"link {self.id!r}: zero-length link")


@dataclass(frozen=True)
class RoadNetwork:
    """Directed road graph.  Insertion order of nodes and links is kept."""

    nodes: Mapping[str, Node]
    links: Mapping[str, Link]
    frame: StudyFrame

    def __post_init__(self):
        object.__setattr__(self, "nodes", MappingProxyType(dict(self.nodes)))
        object.__setattr__(self, "links", MappingProxyType(dict(self.links)))
        for lk in self.links.values():
            for end, nid in (("from", lk.source), ("to", lk.target)):
                if nid not in self.nodes:
                    raise NetworkError(
                        f"link {lk.id!r}: dangling {end}-node reference {nid!r}")
            a, b = self.nodes[lk.source], self.nodes[lk.target]
            (x0, y0), (x1, y1) = lk.geometry[0], lk.geometry[-1]
            if (math.hypot(x0 - a.x, y0 - a.y) > ENDPOINT_TOL_KM
                    or math.hypot(x1 - b.x, y1 - b.y) > ENDPOINT_TOL_KM):
                raise NetworkError(
                    f"link {lk.id!r}: geometry endpoints do not match its nodes")

    @classmethod
    def build(cls, nodes: Iterable[Node], links: Iterable[Link],
              frame: StudyFrame) -> "RoadNetwork":
        node_map: dict[str, Node] = {}
        for n in nodes:
            if n.id in node_map:
                raise NetworkError(f"duplicate node id {n.id!r}")
            node_map[n.id] = n
        link_map: dict[str, Link] = {}
        for lk in links:
            if lk.id in link_map:
                raise NetworkError(f"duplicate link id {lk.id!r}")
            link_map[lk.id] = lk
        return cls(node_map, link_map, frame)

    @property
    def total_length(self) -> float:
        return math.fsum(lk.length for lk in self.links.values())

    def with_links(self, links: Iterable[Link]) -> "RoadNetwork":
        """Subnetwork over ``links``; nodes with no incident link are dropped."""
        links = list(links)
        used = {lk.source for lk in links} | {lk.target for lk in links}
        nodes = [n for nid, n in self.nodes.items() if nid in used]
        return RoadNetwork.build(nodes, links, self.frame)

    def classes(self) -> set[RoadClass]:
        return {lk.road_class for lk in self.links.values()}


# --------------------------------------------------------------------------
# interchange format

def _line_of(text: str, key: str, value: str) -> int | None:
    m = re.search(r'"%s"\s*:\s*%s' % (re.escape(key), re.escape(json.dumps(value))), text)
    if m is None:
        return None
    return text.count("\n", 0, m.start()) + 1


def _ctx(text: str | None, kind: str, ident) -> str:
    where = f"{kind} {ident!r}"
    if text is not None and isinstance(ident, str):
        line = _line_of(text, "id", ident)
        if line is not None:
            where += f" (line {line})"
    return where


def _require(obj: Mapping, key: str, types, where: str):
    if not isinstance(obj, Mapping) or key not in obj:
        raise NetworkError(f"{where}: missing field {key!r}")
    val = obj[key]
    if isinstance(val, bool) or not isinstance(val, types):
        raise NetworkError(f"{where}: field {key!r} has wrong type "
                           f"{type(val).__name__}")
    return val


def _frame_from_json(obj, where="frame") -> StudyFrame:
    if not isinstance(obj, Mapping):
        raise NetworkError(f"{where}: expected an object")
    units = obj.get("units", "km")
    if units != "km":
        raise NetworkError(f"{where}: units must be 'km', got {units!r}")
    vals = [float(_require(obj, k, (int, float), where))
            for k in ("x0", "y0", "width", "height")]
    return StudyFrame(*vals)


def _snap(geom: list[tuple[float, float]], a: Node, b: Node, where: str):
    for idx, node in ((0, a), (-1, b)):
        x, y = geom[idx]
        d = math.hypot(x - node.x, y - node.y)
        if d > SNAP_TOL_KM:
            end = "first" if idx == 0 else "last"
            raise NetworkError(f"{where}: {end} vertex is {d:.3g} km from node "
                               f"{node.id!r} (tolerance {SNAP_TOL_KM} km)")
        geom[idx] = (node.x, node.y)
    return geom


def parse_network(text: str) -> RoadNetwork:
    """Parse and validate a network interchange document (JSON)."""
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise NetworkError(f"invalid JSON at line {exc.lineno}: {exc.msg}") from None
    if not isinstance(doc, Mapping):
        raise NetworkError("document root must be an object")
    frame = _frame_from_json(_require(doc, "frame", Mapping, "document"))

    nodes: dict[str, Node] = {}
    for k, raw in enumerate(_require(doc, "nodes", list, "document")):
        where = f"nodes[{k}]"
        nid = _require(raw, "id", str, where)
        where = _ctx(text, "node", nid)
        if nid in nodes:
            raise NetworkError(f"{where}: duplicate node id")
        x = float(_require(raw, "x", (int, float), where))
        y = float(_require(raw, "y", (int, float), where))
        try:
            nodes[nid] = Node(nid, x, y)
        except NetworkError as exc:
            raise NetworkError(f"{where}: {exc}") from None

    links: dict[str, Link] = {}
    for k, raw in enumerate(_require(doc, "links", list, "document")):
        where = f"links[{k}]"
        lid = _require(raw, "id", str, where)
        where = _ctx(text, "link", lid)
        if lid in links:
            raise NetworkError(f"{where}: duplicate link id")
        src = _require(raw, "from", str, where)
        dst = _require(raw, "to", str, where)
        for nid in (src, dst):
            if nid not in nodes:
                raise NetworkError(f"{where}: dangling node reference {nid!r}")
        cls = RoadClass.parse(_require(raw, "class", str, where))
        geom_raw = _require(raw, "geometry", list, where)
        geom = []
        for v in geom_raw:
            if (not isinstance(v, list) or len(v) != 2
                    or not all(isinstance(c, (int, float)) and not isinstance(c, bool)
                               for c in v)):
                raise NetworkError(f"{where}: geometry vertices must be [x, y] pairs")
            geom.append((float(v[0]), float(v[1])))
        if len(geom) < 2:
            raise NetworkError(f"{where}: geometry needs at least 2 vertices")
        geom = _snap(geom, nodes[src], nodes[dst], where)
        cap = raw.get("capacity_vph")
        t0 = raw.get("free_flow_time_h")
        try:
            links[lid] = Link(lid, src, dst, tuple(geom), cls,
                              capacity=None if cap is None else float(cap),
                              free_flow_time=None if t0 is None else float(t0))
        except NetworkError as exc:
            raise NetworkError(f"{where}: {exc}") from None
    return RoadNetwork(nodes, links, frame)


def network_to_json(net: RoadNetwork) -> dict:
    links = []
    for lk in net.links.values():
        item = {"id": lk.id, "from": lk.source, "to": lk.target,
                "class": lk.road_class.value,
                "geometry": [[x, y] for x, y in lk.geometry]}
        if lk.capacity is not None:
            item["capacity_vph"] = lk.capacity
        if lk.free_flow_time is not None:
            item["free_flow_time_h"] = lk.free_flow_time
        links.append(item)
    return {"frame": net.frame.to_json(),
            "nodes": [{"id": n.id, "x": n.x, "y": n.y} for n in net.nodes.values()],
            "links": links}


def serialize_network(net: RoadNetwork) -> str:
    return json.dumps(network_to_json(net), indent=1) + "\n"


def load_network(path) -> RoadNetwork:
    with open(path, encoding="utf-8") as fh:
        text = fh.read()
    if _looks_like_geojson(text):
        return parse_geojson(text)
    return parse_network(text)


def _looks_like_geojson(text: str) -> bool:
    return re.search(r'"type"\s*:\s*"FeatureCollection"', text[:4096]) is not None


def project_lonlat(lon: float, lat: float, lon0: float, lat0: float) -> tuple[float, float]:
    """Equirectangular projection about ``(lon0, lat0)``; returns km."""
    x = math.radians(lon - lon0) * math.cos(math.radians(lat0)) * EARTH_RADIUS_KM
    y = math.radians(lat - lat0) * EARTH_RADIUS_KM
    return x, y


def parse_geojson(text: str, frame: StudyFrame | None = None,
                  lonlat: bool = False) -> RoadNetwork:
    """Import a GeoJSON FeatureCollection of LineString links.

    Features carry properties ``id``, ``from``, ``to`` and ``class``.  Nodes
    are taken from the line endpoints.  The frame comes from the argument,
    a top-level ``frame`` member, or the bounding box of all vertices.  With
    ``lonlat=True`` coordinates are projected about the bounding-box centre.
    """
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise NetworkError(f"invalid JSON at line {exc.lineno}: {exc.msg}") from None
    if not isinstance(doc, Mapping) or doc.get("type") != "FeatureCollection":
        raise NetworkError("expected a GeoJSON FeatureCollection")
    feats = _require(doc, "features", list, "FeatureCollection")

    raw_links = []
    for k, feat in enumerate(feats):
        where = f"features[{k}]"
        geom = _require(feat, "geometry", Mapping, where)
        if geom.get("type") != "LineString":
            raise NetworkError(f"{where}: only LineString geometries are accepted")
        props = _require(feat, "properties", Mapping, where)
        lid = str(_require(props, "id", (str, int), where))
        src = str(_require(props, "from", (str, int), where))
        dst = str(_require(props, "to", (str, int), where))
        cls = RoadClass.parse(_require(props, "class", str, where))
        coords = [(float(c[0]), float(c[1]))
                  for c in _require(geom, "coordinates", list, where)]
        raw_links.append((lid, src, dst, cls, coords))

    if lonlat:
        allc = [c for *_, cs in raw_links for c in cs]
        lon0 = (min(c[0] for c in allc) + max(c[0] for c in allc)) / 2
        lat0 = (min(c[1] for c in allc) + max(c[1] for c in allc)) / 2
        raw_links = [(a, b, c, d, [project_lonlat(x, y, lon0, lat0) for x, y in cs])
                     for a, b, c, d, cs in raw_links]

    if frame is None and "frame" in doc:
        frame = _frame_from_json(doc["frame"])
    if frame is None:
        xs = [x for *_, cs in raw_links for x, _ in cs]
        ys = [y for *_, cs in raw_links for _, y in cs]
        if not xs:
            raise NetworkError("empty FeatureCollection and no frame given")
        frame = StudyFrame(min(xs), min(ys), max(xs) - min(xs), max(ys) - min(ys))

    nodes: dict[str, Node] = {}
    links = []
    for lid, src, dst, cls, coords in raw_links:
        for nid, (x, y) in ((src, coords[0]), (dst, coords[-1])):
            prev = nodes.get(nid)
            if prev is None:
                nodes[nid] = Node(nid, x, y)
            elif math.hypot(prev.x - x, prev.y - y) > SNAP_TOL_KM:
                raise NetworkError(f"link {lid!r}: node {nid!r} has inconsistent "
                                   "coordinates across features")
        coords = _snap(list(coords), nodes[src], nodes[dst], f"link {lid!r}")
        links.append(Link(lid, src, dst, tuple(coords), cls))
    return RoadNetwork.build(nodes.values(), links, frame)


# --------------------------------------------------------------------------
# class parameters

def parse_class_table(text: str) -> list[ClassParams]:
    """Parse ``[{class, limit_speed_kph, capacity_vph}, ...]``."""
    try:
        rows = json.loads(text)
    except json.JSONDecodeError as exc:
        raise NetworkError(f"class table: invalid JSON at line {exc.lineno}") from None
    if not isinstance(rows, list):
        raise NetworkError("class table must be a JSON list")
    table = []
    for k, row in enumerate(rows):
        where = f"class table[{k}]"
        table.append(ClassParams(
            RoadClass.parse(_require(row, "class", str, where)),
            float(_require(row, "limit_speed_kph", (int, float), where)),
            float(_require(row, "capacity_vph", (int, float), where))))
    return table


def class_table_to_json(table: Sequence[ClassParams]) -> list[dict]:
    return [{"class": p.road_class.value, "limit_speed_kph": p.limit_speed,
             "capacity_vph": p.capacity} for p in table]


def assign_class_params(net: RoadNetwork,
                        table: Sequence[ClassParams] = DEFAULT_CLASS_TABLE) -> RoadNetwork:
    """Set capacity and free-flow time (length / limit speed) on every link."""
    by_class = {p.road_class: p for p in table}
    missing = sorted((c for c in net.classes() if c not in by_class), key=lambda c: c.rank)
    if missing:
        raise NetworkError("class table lacks entries for: "
                           + ", ".join(c.value for c in missing))
    links = []
    for lk in net.links.values():
        p = by_class[lk.road_class]
        links.append(replace(lk, capacity=p.capacity,
                             free_flow_time=lk.length / p.limit_speed))
    return RoadNetwork(dict(net.nodes), {lk.id: lk for lk in links}, net.frame)


# --------------------------------------------------------------------------
# extraction

def extract_by_class(net: RoadNetwork, lowest_retained: RoadClass | str) -> RoadNetwork:
    """Keep links whose class ranks at or above ``lowest_retained``."""
    cutoff = RoadClass.parse(lowest_retained).rank
    return net.with_links(lk for lk in net.links.values() if lk.road_class.rank <= cutoff)


def reduce_links_random(net: RoadNetwork, k: float, seed: int) -> RoadNetwork:
    """Remove ``round(k * |links|)`` links chosen uniformly at random.

    Links are ordered by id (code-point order) and the removal set is drawn
    with :meth:`SplitMix64.sample_indices`; rounding is half-up.
    """
    if not 0.0 <= k <= 1.0:
        raise ValueError(f"k must lie in [0, 1], got {k}")
    ids = sorted(net.links)
    r = math.floor(k * len(ids) + 0.5)
    removed = {ids[i] for i in SplitMix64(seed).sample_indices(len(ids), r)}
    return net.with_links(lk for lid, lk in net.links.items() if lid not in removed)


def length_reduction_rate(reference: RoadNetwork, target: RoadNetwork) -> float:
    ref = reference.total_length
    if ref <= 0:
        raise NetworkError("reference network has zero total length")
    return 1.0 - target.total_length / ref


def clip_to_frame(net: RoadNetwork, tol: float = ENDPOINT_TOL_KM) -> RoadNetwork:
    """Drop links whose geometry leaves the (closed) study frame."""
    f = net.frame
    return net.with_links(lk for lk in net.links.values()
                          if all(f.contains(x, y, tol) for x, y in lk.geometry))


# --------------------------------------------------------------------------
# synthetic networks

def synth_grid_city(rows: int, cols: int, spacing: float, arterial_every: int,
                    secondary_every: int | None = None,
                    origin: tuple[float, float] = (0.0, 0.0)) -> RoadNetwork:
    """Bidirectional lattice city.

    Every ``arterial_every``-th row and column (counting from 0) is trunk.
    With ``secondary_every`` set, remaining lines whose index is a multiple
    of it are secondary; everything else is residential.  The frame is the
    lattice's bounding box.
    """
    if rows < 2 or cols < 2:
        raise ValueError("rows and cols must be >= 2")
    if spacing <= 0:
        raise ValueError("spacing must be positive")
    if arterial_every < 1 or (secondary_every is not None and secondary_every < 1):
        raise ValueError("line periods must be >= 1")
    ox, oy = origin
    w = len(str(max(rows, cols) - 1))

    def nid(r, c):
        return f"n{r:0{w}d}_{c:0{w}d}"

    def line_class(i):
        if i % arterial_every == 0:
            return RoadClass.TRUNK
        if secondary_every is not None and i % secondary_every == 0:
            return RoadClass.SECONDARY
        return RoadClass.RESIDENTIAL

    nodes = [Node(nid(r, c), ox + c * spacing, oy + r * spacing)
             for r in range(rows) for c in range(cols)]
    pos = {n.id: (n.x, n.y) for n in nodes}
    links = []
    for r in range(rows):
        for c in range(cols):
            if c + 1 < cols:
                a, b = nid(r, c), nid(r, c + 1)
                cls = line_class(r)
                links.append(Link(f"h{r:0{w}d}_{c:0{w}d}f", a, b, (pos[a], pos[b]), cls))
                links.append(Link(f"h{r:0{w}d}_{c:0{w}d}r", b, a, (pos[b], pos[a]), cls))
            if r + 1 < rows:
                a, b = nid(r, c), nid(r + 1, c)
                cls = line_class(c)
                links.append(Link(f"v{r:0{w}d}_{c:0{w}d}f", a, b, (pos[a], pos[b]), cls))
                links.append(Link(f"v{r:0{w}d}_{c:0{w}d}r", b, a, (pos[b], pos[a]), cls))
    frame = StudyFrame(ox, oy, (cols - 1) * spacing, (rows - 1) * spacing)
    return RoadNetwork.build(nodes, links, frame)
