"""Grid rasterization of assigned link flows into TG distributions.

Cells are indexed ``(p, q)`` with ``p`` counting columns along x and ``q``
rows along y.  A link deposits ``flow * cell_size`` (veh*km) on every cell
its geometry touches, so mass is additive across links.
"""
from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from typing import Mapping, Sequence

from .network import ENDPOINT_TOL_KM, Link, RoadNetwork, StudyFrame

Cell = tuple[int, int]

_SNAP = 1e-9  # in cell widths


class RasterError(ValueError):
    pass


@dataclass(frozen=True)
class GridSpec:
    frame: StudyFrame
    cell_size: float
    m: int = field(init=False)
    n: int = field(init=False)

    def __post_init__(self):
        if not self.cell_size > 0:
            raise RasterError("cell size must be positive")
        dims = []
        for total in (self.frame.width, self.frame.height):
            ratio = total / self.cell_size
            k = round(ratio)
            if k < 1 or abs(ratio - k) > 1e-9 * max(1.0, ratio):
                raise RasterError(f"cell size {self.cell_size} km does not divide "
                                  f"frame dimension {total} km")
            dims.append(int(k))
        object.__setattr__(self, "m", dims[0])
        object.__setattr__(self, "n", dims[1])

    def center(self, cell: Cell) -> tuple[float, float]:
        p, q = cell
        return (self.frame.x0 + (p + 0.5) * self.cell_size,
                self.frame.y0 + (q + 0.5) * self.cell_size)


def _snap(v: float) -> float:
    r = round(v)
    return float(r) if abs(v - r) <= _SNAP else v


def locate_cell(x: float, y: float, grid: GridSpec) -> Cell:
    """Cell of a point in the half-open frame ``[x0, x0+M) x [y0, y0+N)``."""
    u = _snap((x - grid.frame.x0) / grid.cell_size)
    v = _snap((y - grid.frame.y0) / grid.cell_size)
    p, q = math.floor(u), math.floor(v)
    if not (0 <= p < grid.m and 0 <= q < grid.n):
        raise RasterError(f"point ({x}, {y}) lies outside the frame")
    return p, q


def _check_inside(pt, grid: GridSpec, what="endpoint"):
    if not grid.frame.contains(pt[0], pt[1], ENDPOINT_TOL_KM):
        raise RasterError(f"{what} ({pt[0]}, {pt[1]}) lies outside the frame")


def supercover_cells(a: tuple[float, float], b: tuple[float, float],
                     grid: GridSpec) -> list[Cell]:
    """Every cell whose closed square meets segment ``ab``, in traversal order.

    Cells sharing an entry point (corner crossings) are ordered row-major.
    Cells beyond the frame, touched only along its outer edge, are dropped.
    """
    _check_inside(a, grid)
    _check_inside(b, grid)
    C = grid.cell_size
    x0 = _snap((a[0] - grid.frame.x0) / C)
    y0 = _snap((a[1] - grid.frame.y0) / C)
    x1 = _snap((b[0] - grid.frame.x0) / C)
    y1 = _snap((b[1] - grid.frame.y0) / C)
    dx, dy = x1 - x0, y1 - y0
    xmin, xmax = min(x0, x1), max(x0, x1)

    found: list[tuple[float, int, int]] = []
    for p in range(math.ceil(xmin) - 1, math.floor(xmax) + 1):
        if not 0 <= p < grid.m:
            continue
        if dx == 0:
            ylo, yhi = min(y0, y1), max(y0, y1)
        else:
            xl, xr = max(p, xmin), min(p + 1, xmax)
            ya = _snap(y0 + (xl - x0) * dy / dx)
            yb = _snap(y0 + (xr - x0) * dy / dx)
            ylo, yhi = min(ya, yb), max(ya, yb)
        for q in range(math.ceil(ylo) - 1, math.floor(yhi) + 1):
            if not 0 <= q < grid.n:
                continue
            found.append((_entry_param(p, q, x0, y0, dx, dy), q, p))
    found.sort()
    return [(p, q) for _, q, p in found]


def _entry_param(p, q, x0, y0, dx, dy) -> float:
    t = 0.0
    for lo, start, d in ((p, x0, dx), (q, y0, dy)):
        if d > 0:
            t = max(t, (lo - start) / d)
        elif d < 0:
            t = max(t, (lo + 1 - start) / d)
    return round(t, 12)


def link_cells(link: Link, grid: GridSpec) -> list[Cell]:
    """Union of the supercover cells of every segment, first-visit order."""
    seen: dict[Cell, None] = {}
    geom = link.geometry
    for a, b in zip(geom[:-1], geom[1:]):
        for c in supercover_cells(a, b, grid):
            seen.setdefault(c, None)
    return list(seen)


def rasterize_link(link: Link, flow: float, grid: GridSpec) -> dict[Cell, float]:
    """Cell masses contributed by one link: ``flow * cell_size`` per cell."""
    if flow < 0:
        raise RasterError(f"link {link.id!r}: negative flow")
    try:
        cells = link_cells(link, grid)
    except RasterError as exc:
        raise RasterError(f"link {link.id!r}: {exc}") from None
    if flow == 0:
        return {}
    w = flow * grid.cell_size
    return {c: w for c in cells}


def _row_major(cell: Cell):
    return cell[1], cell[0]


@dataclass(frozen=True)
class TGDistribution:
    """Sparse nonnegative mass field over a grid (veh*km per cell)."""

    grid: GridSpec
    mass: Mapping[Cell, float]
    provenance: Mapping[Cell, tuple[str, ...]] | None = None

    def __post_init__(self):
        for (p, q), v in self.mass.items():
            if not (0 <= p < self.grid.m and 0 <= q < self.grid.n):
                raise RasterError(f"cell {(p, q)} outside the grid")
            if not v >= 0:
                raise RasterError(f"cell {(p, q)}: negative mass")
        ordered = {c: self.mass[c] for c in sorted(self.mass, key=_row_major)
                   if self.mass[c] > 0}
        object.__setattr__(self, "mass", ordered)

    @property
    def total_mass(self) -> float:
        return math.fsum(self.mass.values())

    def __len__(self):
        return len(self.mass)

    def scaled(self, factor: float) -> "TGDistribution":
        return TGDistribution(self.grid, {c: v * factor for c, v in self.mass.items()})

    def shifted(self, dp: int, dq: int) -> "TGDistribution":
        """Translate by whole cells; mass shifted off the grid is dropped."""
        out = {}
        for (p, q), v in self.mass.items():
            if 0 <= p + dp < self.grid.m and 0 <= q + dq < self.grid.n:
                out[(p + dp, q + dq)] = v
        return TGDistribution(self.grid, out)

    def __add__(self, other: "TGDistribution") -> "TGDistribution":
        if other.grid != self.grid:
            raise RasterError("cannot add distributions on different grids")
        out = dict(self.mass)
        for c, v in other.mass.items():
            out[c] = out.get(c, 0.0) + v
        return TGDistribution(self.grid, out)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["p", "q", "mass_veh_km"])
        for (p, q), v in self.mass.items():
            w.writerow([p, q, repr(v)])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str, grid: GridSpec) -> "TGDistribution":
        rows = csv.DictReader(io.StringIO(text))
        return cls(grid, {(int(r["p"]), int(r["q"])): float(r["mass_veh_km"]) for r in rows})

    def to_svg(self, size_px: int = 1000) -> str:
        """Grayscale heatmap: one rect per nonzero cell, opacity ~ mass / max."""
        g = self.grid
        scale = size_px / max(g.m, g.n)
        w, h = g.m * scale, g.n * scale
        peak = max(self.mass.values(), default=0.0)
        out = [f'<svg xmlns="http://www.w3.org/2000/svg" version="1.1" '
               f'width="{w:.3f}" height="{h:.3f}" viewBox="0 0 {w:.3f} {h:.3f}">',
               f'<rect x="0" y="0" width="{w:.3f}" height="{h:.3f}" fill="white"/>']
        for (p, q), v in self.mass.items():
            out.append(f'<rect x="{p * scale:.3f}" y="{h - (q + 1) * scale:.3f}" '
                       f'width="{scale:.3f}" height="{scale:.3f}" fill="black" '
                       f'fill-opacity="{v / peak:.4f}"/>')
        out.append("</svg>")
        return "\n".join(out) + "\n"


def build_tg(net: RoadNetwork, flows: Mapping[str, float], grid: GridSpec,
             provenance: bool = False) -> TGDistribution:
    """Sum of :func:`rasterize_link` over every link of ``net``."""
    acc: dict[Cell, float] = {}
    prov: dict[Cell, list[str]] = {}
    for lid, link in net.links.items():
        if lid not in flows:
            raise RasterError(f"link {lid!r}: no flow entry")
        for c, v in rasterize_link(link, flows[lid], grid).items():
            acc[c] = acc.get(c, 0.0) + v
            if provenance:
                prov.setdefault(c, []).append(lid)
    return TGDistribution(grid, acc,
                          {c: tuple(v) for c, v in prov.items()} if provenance else None)
