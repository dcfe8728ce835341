"""Array form of a RoadNetwork and compiled shortest-path kernels.

Dijkstra here is exact and deterministic: when two links reach a node at
exactly the same distance, the link whose id sorts first wins.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numba import njit

from .network import RoadNetwork


@dataclass(frozen=True)
class CompiledGraph:
    node_ids: tuple[str, ...]
    node_index: dict
    link_ids: tuple[str, ...]
    link_index: dict
    tail: np.ndarray
    head: np.ndarray
    rank: np.ndarray        # position of each link id in sorted id order
    out_ptr: np.ndarray
    out_links: np.ndarray
    length: np.ndarray
    free_flow_time: np.ndarray
    capacity: np.ndarray

    @property
    def n_nodes(self) -> int:
        return len(self.node_ids)

    @property
    def n_links(self) -> int:
        return len(self.link_ids)


def compile_graph(net: RoadNetwork) -> CompiledGraph:
    node_ids = tuple(net.nodes)
    node_index = {nid: i for i, nid in enumerate(node_ids)}
    links = list(net.links.values())
    link_ids = tuple(lk.id for lk in links)
    tail = np.array([node_index[lk.source] for lk in links], dtype=np.int64)
    head = np.array([node_index[lk.target] for lk in links], dtype=np.int64)
    order = sorted(range(len(links)), key=lambda i: link_ids[i])
    rank = np.empty(len(links), dtype=np.int64)
    rank[order] = np.arange(len(links))
    # outgoing adjacency grouped by tail, ties inside a group in id order
    perm = sorted(range(len(links)), key=lambda i: (tail[i], rank[i]))
    out_links = np.array(perm, dtype=np.int64)
    out_ptr = np.zeros(len(node_ids) + 1, dtype=np.int64)
    np.add.at(out_ptr, tail + 1, 1)
    out_ptr = np.cumsum(out_ptr)

    def attr(name):
        vals = [getattr(lk, name) for lk in links]
        return np.array([np.nan if v is None else v for v in vals], dtype=np.float64)

    return CompiledGraph(node_ids, node_index, link_ids,
                         {lid: i for i, lid in enumerate(link_ids)},
                         tail, head, rank, out_ptr, out_links,
                         attr("length"), attr("free_flow_time"), attr("capacity"))


@njit(cache=True)
def _heap_push(keys, vals, size, key, val):
    i = size
    keys[i] = key
    vals[i] = val
    while i > 0:
        parent = (i - 1) >> 1
        if keys[parent] <= keys[i]:
            break
        keys[parent], keys[i] = keys[i], keys[parent]
        vals[parent], vals[i] = vals[i], vals[parent]
        i = parent
    return size + 1


@njit(cache=True)
def _heap_pop(keys, vals, size):
    key = keys[0]
    val = vals[0]
    size -= 1
    keys[0] = keys[size]
    vals[0] = vals[size]
    i = 0
    while True:
        left = 2 * i + 1
        if left >= size:
            break
        child = left
        if left + 1 < size and keys[left + 1] < keys[left]:
            child = left + 1
        if keys[i] <= keys[child]:
            break
        keys[child], keys[i] = keys[i], keys[child]
        vals[child], vals[i] = vals[i], vals[child]
        i = child
    return key, val, size


@njit(cache=True)
def dijkstra(origin, out_ptr, out_links, head, rank, times, dist, pred, order):
    """One-to-all shortest paths.  Returns the number of settled nodes.

    ``dist``/``pred``/``order`` are caller-owned output buffers; ``order``
    receives nodes in settle order (nondecreasing distance).
    """
    n = dist.shape[0]
    for v in range(n):
        dist[v] = np.inf
        pred[v] = -1
    done = np.zeros(n, dtype=np.bool_)
    cap = head.shape[0] + 1
    keys = np.empty(cap, dtype=np.float64)
    vals = np.empty(cap, dtype=np.int64)
    size = 0
    dist[origin] = 0.0
    size = _heap_push(keys, vals, size, 0.0, origin)
    settled = 0
    while size > 0:
        d, u, size = _heap_pop(keys, vals, size)
        if done[u] or d > dist[u]:
            continue
        done[u] = True
        order[settled] = u
        settled += 1
        for k in range(out_ptr[u], out_ptr[u + 1]):
            e = out_links[k]
            v = head[e]
            if done[v]:
                continue
            nd = d + times[e]
            if nd < dist[v]:
                dist[v] = nd
                pred[v] = e
                size = _heap_push(keys, vals, size, nd, v)
            elif nd == dist[v] and rank[e] < rank[pred[v]]:
                pred[v] = e
    return settled


@njit(cache=True)
def all_pairs_times(origins, out_ptr, out_links, head, rank, times, n_nodes):
    """Shortest times from each origin node to every node, shape (k, n)."""
    k = origins.shape[0]
    out = np.empty((k, n_nodes), dtype=np.float64)
    pred = np.empty(n_nodes, dtype=np.int64)
    order = np.empty(n_nodes, dtype=np.int64)
    dist = np.empty(n_nodes, dtype=np.float64)
    for a in range(k):
        dijkstra(origins[a], out_ptr, out_links, head, rank, times, dist, pred, order)
        out[a, :] = dist
    return out


@njit(cache=True)
def aon_load(o_nodes, o_ptr, d_nodes, demand, out_ptr, out_links, tail, head,
             rank, times, n_nodes, keep_trees):
    """All-or-nothing loading of every OD pair onto current shortest paths.

    Pairs are grouped by origin: pairs ``o_ptr[a]:o_ptr[a+1]`` start at node
    ``o_nodes[a]`` and end at ``d_nodes``.  Returns (link flows, lost demand,
    predecessor trees or an empty array).
    """
    n_links = head.shape[0]
    flow = np.zeros(n_links, dtype=np.float64)
    lost = 0.0
    n_orig = o_nodes.shape[0]
    if keep_trees:
        trees = np.empty((n_orig, n_nodes), dtype=np.int32)
    else:
        trees = np.empty((0, n_nodes), dtype=np.int32)
    dist = np.empty(n_nodes, dtype=np.float64)
    pred = np.empty(n_nodes, dtype=np.int64)
    order = np.empty(n_nodes, dtype=np.int64)
    acc = np.zeros(n_nodes, dtype=np.float64)
    for a in range(n_orig):
        o = o_nodes[a]
        settled = dijkstra(o, out_ptr, out_links, head, rank, times, dist, pred, order)
        if keep_trees:
            for v in range(n_nodes):
                trees[a, v] = pred[v]
        any_load = False
        for p in range(o_ptr[a], o_ptr[a + 1]):
            d = d_nodes[p]
            q = demand[p]
            if q == 0.0 or d == o:
                continue
            if dist[d] == np.inf:
                lost += q
            else:
                acc[d] += q
                any_load = True
        if not any_load:
            continue
        for s in range(settled - 1, 0, -1):
            v = order[s]
            if acc[v] != 0.0:
                e = pred[v]
                flow[e] += acc[v]
                acc[tail[e]] += acc[v]
                acc[v] = 0.0
        acc[o] = 0.0
    return flow, lost, trees


@njit(cache=True)
def path_times(trees, o_nodes, o_ptr, d_nodes, tail, times):
    """Travel time of each pair's tree path (inf when unreachable)."""
    out = np.empty(d_nodes.shape[0], dtype=np.float64)
    for a in range(o_nodes.shape[0]):
        o = o_nodes[a]
        for p in range(o_ptr[a], o_ptr[a + 1]):
            v = d_nodes[p]
            t = 0.0
            ok = True
            while v != o:
                e = trees[a, v]
                if e < 0:
                    ok = False
                    break
                t += times[e]
                v = tail[e]
            out[p] = t if ok else np.inf
    return out


def shortest_path_tree(net: RoadNetwork, time: dict, origin: str):
    """Predecessor links and distances from ``origin`` under ``time``.

    Returns ``(pred, dist)`` as dicts keyed by node id; ``pred`` maps each
    reached node other than the origin to its incoming tree link id.
    """
    g = compile_graph(net)
    times = np.array([time[lid] for lid in g.link_ids], dtype=np.float64)
    if np.any(~(times > 0)):
        bad = g.link_ids[int(np.argmax(~(times > 0)))]
        raise ValueError(f"link {bad!r}: travel time must be positive")
    if origin not in g.node_index:
        raise KeyError(origin)
    n = g.n_nodes
    dist = np.empty(n)
    pred = np.empty(n, dtype=np.int64)
    order = np.empty(n, dtype=np.int64)
    dijkstra(g.node_index[origin], g.out_ptr, g.out_links, g.head, g.rank, times,
             dist, pred, order)
    dists = {nid: float(dist[i]) for i, nid in enumerate(g.node_ids)}
    preds = {nid: g.link_ids[pred[i]] for i, nid in enumerate(g.node_ids) if pred[i] >= 0}
    return preds, dists
