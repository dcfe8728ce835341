"""Static user-equilibrium assignment with BPR link costs (Frank-Wolfe)."""
from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from .demand import ODMatrix
from .graph import CompiledGraph, aon_load, compile_graph, path_times
from .network import RoadNetwork


class AssignmentError(ValueError):
    pass


@dataclass(frozen=True)
class BPRParams:
    alpha: float = 0.48
    beta: float = 2.82

    def __post_init__(self):
        if not (self.alpha >= 0 and self.beta >= 1):
            raise AssignmentError("BPR parameters need alpha >= 0 and beta >= 1")


@dataclass(frozen=True)
class FWConfig:
    max_iterations: int = 500
    gap_tolerance: float = 1e-4
    line_search_tolerance: float = 1e-10

    def __post_init__(self):
        if self.max_iterations < 1:
            raise AssignmentError("max_iterations must be >= 1")
        for name in ("gap_tolerance", "line_search_tolerance"):
            if not 0 < getattr(self, name) < 1:
                raise AssignmentError(f"{name} must lie in (0, 1)")


@dataclass
class AssignmentResult:
    link_ids: tuple[str, ...]
    flows: np.ndarray
    times: np.ndarray
    objective: float
    relative_gap: float
    iterations: int
    lost_demand: float
    converged: bool
    objective_history: list[float] = field(default_factory=list)
    gap_history: list[float] = field(default_factory=list)
    # (weight of the tree set in the final flow, per-origin predecessor trees)
    path_samples: list[tuple[float, np.ndarray]] = field(default_factory=list, repr=False)

    @property
    def flow(self) -> dict[str, float]:
        return dict(zip(self.link_ids, self.flows.tolist()))

    @property
    def time(self) -> dict[str, float]:
        return dict(zip(self.link_ids, self.times.tolist()))

    def summary(self) -> dict:
        return {"objective": self.objective, "relative_gap": self.relative_gap,
                "iterations": self.iterations, "lost_demand_vph": self.lost_demand,
                "converged": self.converged}

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["link_id", "flow_vph", "time_h"])
        for lid, q, t in zip(self.link_ids, self.flows.tolist(), self.times.tolist()):
            w.writerow([lid, repr(q), repr(t)])
        return buf.getvalue()

    def summary_json(self) -> str:
        return json.dumps(self.summary(), indent=1, sort_keys=True) + "\n"


def flows_from_csv(text: str) -> dict[str, float]:
    return {row["link_id"]: float(row["flow_vph"]) for row in csv.DictReader(io.StringIO(text))}


def bpr_time(t0, q, cap, p: BPRParams = BPRParams()):
    """Congested travel time ``t0 * (1 + alpha * (q / cap) ** beta)``.

    Works on scalars and numpy arrays alike.
    """
    if np.any(np.asarray(q) < 0):
        raise AssignmentError("negative flow")
    return t0 * (1.0 + p.alpha * (q / cap) ** p.beta)


def _beckmann(t0, cap, q, p: BPRParams) -> float:
    terms = t0 * (q + p.alpha * q * (q / cap) ** p.beta / (p.beta + 1.0))
    return float(math.fsum(terms.tolist()))


def beckmann_objective(net: RoadNetwork, flow: Mapping[str, float],
                       p: BPRParams = BPRParams()) -> float:
    """Sum over links of the integral of the BPR curve from 0 to the flow."""
    g = _graph_with_params(net)
    q = np.array([flow.get(lid, 0.0) for lid in g.link_ids], dtype=np.float64)
    if np.any(q < 0):
        raise AssignmentError("negative flow")
    return _beckmann(g.free_flow_time, g.capacity, q, p)


def _graph_with_params(net: RoadNetwork) -> CompiledGraph:
    g = compile_graph(net)
    if np.any(np.isnan(g.free_flow_time)) or np.any(np.isnan(g.capacity)):
        raise AssignmentError("links lack capacity/free-flow time; "
                              "run assign_class_params first")
    return g


@dataclass(frozen=True)
class _ODArrays:
    o_nodes: np.ndarray
    o_ptr: np.ndarray
    d_nodes: np.ndarray
    demand: np.ndarray


def _od_arrays(g: CompiledGraph, od: ODMatrix) -> _ODArrays:
    agg: dict[tuple[int, int], float] = {}
    for o, d, q in od.node_pairs():
        key = (g.node_index[o], g.node_index[d])
        agg[key] = agg.get(key, 0.0) + q
    keys = sorted(agg)
    origins = sorted({o for o, _ in keys})
    o_ptr = np.zeros(len(origins) + 1, dtype=np.int64)
    pos = {o: i for i, o in enumerate(origins)}
    for o, _ in keys:
        o_ptr[pos[o] + 1] += 1
    return _ODArrays(np.array(origins, dtype=np.int64), np.cumsum(o_ptr),
                     np.array([d for _, d in keys], dtype=np.int64),
                     np.array([agg[k] for k in keys], dtype=np.float64))


def _aon(g: CompiledGraph, oda: _ODArrays, times: np.ndarray, keep_trees=False):
    return aon_load(oda.o_nodes, oda.o_ptr, oda.d_nodes, oda.demand, g.out_ptr,
                    g.out_links, g.tail, g.head, g.rank, times, g.n_nodes, keep_trees)


def _check_times(g: CompiledGraph, times: np.ndarray):
    bad = ~(times > 0)
    if np.any(bad):
        raise AssignmentError(f"link {g.link_ids[int(np.argmax(bad))]!r}: "
                              "travel time must be positive")


def all_or_nothing(net: RoadNetwork, time: Mapping[str, float], od: ODMatrix):
    """Load each OD demand onto its shortest path.  Returns (flows, lost)."""
    g = compile_graph(net)
    times = np.array([time[lid] for lid in g.link_ids], dtype=np.float64)
    _check_times(g, times)
    flow, lost, _ = _aon(g, _od_arrays(g, od), times)
    return dict(zip(g.link_ids, flow.tolist())), float(lost)


def _gap(times, q, y) -> float:
    ty = float(np.dot(times, y))
    if ty <= 0:
        return 0.0
    return max((float(np.dot(times, q)) - ty) / ty, 0.0)


def relative_gap(net: RoadNetwork, flow: Mapping[str, float], time: Mapping[str, float],
                 od: ODMatrix) -> float:
    """``(sum t q - sum t y) / sum t y`` with ``y`` all-or-nothing at ``time``."""
    g = compile_graph(net)
    times = np.array([time[lid] for lid in g.link_ids], dtype=np.float64)
    q = np.array([flow[lid] for lid in g.link_ids], dtype=np.float64)
    _check_times(g, times)
    y, _, _ = _aon(g, _od_arrays(g, od), times)
    return _gap(times, q, y)


def _slope(t0, cap, q, d, theta, p: BPRParams) -> float:
    x = np.maximum(q + theta * d, 0.0)
    return float(np.dot(t0 * (1.0 + p.alpha * (x / cap) ** p.beta), d))


def beckmann_slope(net: RoadNetwork, flow: Mapping[str, float], direction: Mapping[str, float],
                   theta: float, p: BPRParams = BPRParams()) -> float:
    """``dZ/dtheta`` of ``Z(flow + theta * direction)``: the BPR times at the
    moved point dotted with the direction."""
    g = _graph_with_params(net)
    q = np.array([flow.get(lid, 0.0) for lid in g.link_ids], dtype=np.float64)
    d = np.array([direction.get(lid, 0.0) for lid in g.link_ids], dtype=np.float64)
    return _slope(g.free_flow_time, g.capacity, q, d, theta, p)


def _line_search(t0, cap, q, d, p: BPRParams, tol: float) -> float:
    """Step in [0, 1] minimising Z(q + theta d), by bisection on dZ/dtheta."""
    def slope(theta):
        return _slope(t0, cap, q, d, theta, p)

    if slope(0.0) >= 0.0:
        return 0.0
    if slope(1.0) <= 0.0:
        return 1.0
    lo, hi = 0.0, 1.0
    while hi - lo > tol:
        mid = 0.5 * (lo + hi)
        if slope(mid) < 0.0:
            lo = mid
        else:
            hi = mid
    mid = 0.5 * (lo + hi)
    z0 = _beckmann(t0, cap, q, p)
    if _beckmann(t0, cap, np.maximum(q + mid * d, 0.0), p) <= z0:
        return mid
    return lo


def frank_wolfe(net: RoadNetwork, od: ODMatrix, p: BPRParams = BPRParams(),
                cfg: FWConfig = FWConfig(), keep_paths: int = 8) -> AssignmentResult:
    """User-equilibrium link flows by the Frank-Wolfe method.

    Starts from all-or-nothing on free-flow times.  Each iteration solves the
    linearised subproblem (all-or-nothing at current times) and takes an
    exact line-search step.  The predecessor trees of the last
    ``keep_paths`` subproblems are retained for :func:`wardrop_violation`.
    """
    g = _graph_with_params(net)
    if g.n_links == 0:
        raise AssignmentError("network has no links")
    oda = _od_arrays(g, od)
    t0, cap = g.free_flow_time, g.capacity

    q, lost, tree = _aon(g, oda, t0, keep_paths > 0)
    samples: list[tuple[float, np.ndarray]] = [(1.0, tree)] if keep_paths > 0 else []
    z_hist, gap_hist = [], []
    iterations = 1
    while True:
        times = t0 * (1.0 + p.alpha * (q / cap) ** p.beta)
        y, _, tree = _aon(g, oda, times, keep_paths > 0)
        gap = _gap(times, q, y)
        z_hist.append(_beckmann(t0, cap, q, p))
        gap_hist.append(gap)
        if gap <= cfg.gap_tolerance or iterations >= cfg.max_iterations:
            break
        theta = _line_search(t0, cap, q, y - q, p, cfg.line_search_tolerance)
        q = np.maximum(q + theta * (y - q), 0.0)
        if keep_paths > 0:
            samples = [(w * (1.0 - theta), tr) for w, tr in samples]
            samples.append((theta, tree))
            samples = samples[-keep_paths:]
        iterations += 1

    return AssignmentResult(g.link_ids, q, times, z_hist[-1], gap, iterations,
                            float(lost), gap <= cfg.gap_tolerance, z_hist, gap_hist,
                            samples)


def wardrop_violation(net: RoadNetwork, result: AssignmentResult, od: ODMatrix,
                      sample_paths: int = 8) -> float:
    """Largest relative excess of a used path's time over the shortest time.

    Used paths come from the retained all-or-nothing trees that still carry
    positive weight in the final flow; times are the equilibrium times.
    """
    g = compile_graph(net)
    oda = _od_arrays(g, od)
    if oda.d_nodes.size == 0:
        return 0.0
    times = result.times
    _, _, best_tree = _aon(g, oda, times, True)
    shortest = path_times(best_tree, oda.o_nodes, oda.o_ptr, oda.d_nodes, g.tail, times)
    worst = 0.0
    for w, trees in result.path_samples[-sample_paths:]:
        if not w > 0:
            continue
        used = path_times(trees, oda.o_nodes, oda.o_ptr, oda.d_nodes, g.tail, times)
        ok = np.isfinite(shortest) & (shortest > 0)
        if np.any(ok):
            worst = max(worst, float(np.max((used[ok] - shortest[ok]) / shortest[ok])))
    return max(worst, 0.0)
