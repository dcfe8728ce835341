"""Unbalanced optimal transport between TG distributions (the TGW distance).

The objective over couplings ``J >= 0`` is::

    sum_ij c_ij J_ij + lam * GKL(J 1 | a) + lam * GKL(J^T 1 | b)

with ``c`` the Euclidean distance in km.  The scaling solver adds an
entropic term ``eps * KL(J | sqrt(a) x sqrt(b))``; the square-root reference
keeps the self-coupling of a measure exactly diagonal at every ``eps``.
The reported value always excludes the entropic term.
"""
from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from ._uot_kernels import bin_width, lse_rows, make_bins, plan_entries
from .raster import GridSpec, TGDistribution


class UOTError(ValueError):
    pass


@dataclass(frozen=True)
class SupportMeasure:
    """Point masses at cell centres (km) with positive masses (veh*km)."""

    positions: np.ndarray
    masses: np.ndarray
    grid: GridSpec | None = None

    def __post_init__(self):
        pos = np.asarray(self.positions, dtype=np.float64).reshape(-1, 2)
        m = np.asarray(self.masses, dtype=np.float64).reshape(-1)
        if pos.shape[0] != m.shape[0]:
            raise UOTError("positions and masses differ in length")
        if np.any(~(m > 0)):
            raise UOTError("support masses must be positive")
        object.__setattr__(self, "positions", pos)
        object.__setattr__(self, "masses", m)

    def __len__(self):
        return self.masses.shape[0]

    @property
    def total(self) -> float:
        return math.fsum(self.masses.tolist())


def to_support(D: TGDistribution) -> SupportMeasure:
    cells = list(D.mass)
    if not cells:
        return SupportMeasure(np.empty((0, 2)), np.empty(0), D.grid)
    pos = np.array([D.grid.center(c) for c in cells])
    return SupportMeasure(pos, np.array([D.mass[c] for c in cells]), D.grid)


def ground_cost(a: Sequence[float], b: Sequence[float]) -> float:
    return math.hypot(a[0] - b[0], a[1] - b[1])


def generalized_kl(mu, nu) -> float:
    """``sum mu log(mu/nu) - mu + nu``; a zero ``mu`` entry contributes ``nu``.

    Returns ``math.inf`` when some ``mu > 0`` sits on ``nu == 0``.
    """
    mu = np.atleast_1d(np.asarray(mu, dtype=np.float64))
    nu = np.atleast_1d(np.asarray(nu, dtype=np.float64))
    if mu.shape != nu.shape:
        raise UOTError("generalized_kl: shape mismatch")
    if np.any(mu < 0) or np.any(nu < 0):
        raise UOTError("generalized_kl: negative entries")
    pos = mu > 0
    if np.any(pos & (nu == 0)):
        return math.inf
    terms = nu.copy()
    mp, np_ = mu[pos], nu[pos]
    terms[pos] = mp * np.log(mp / np_) - mp + np_
    return max(float(math.fsum(terms.tolist())), 0.0)  # rounding can dip below 0


@dataclass(frozen=True)
class UOTConfig:
    """Solver settings.  ``lam`` is the marginal penalty weight (km).

    The annealing schedule is ``epsilon_anneal`` if given, else
    ``anneal_factors`` times the grid cell size; a smaller ``epsilon`` is
    appended as the final stage.  ``max_iterations`` applies per stage.
    A stage ends once the per-iteration change of the dual potentials,
    divided by the current ``eps``, drops below ``stage_tol`` (warm-start
    stages) or ``convergence_tol`` (final stage).
    """

    lam: float = 0.05
    epsilon: float | None = None
    epsilon_anneal: tuple[float, ...] | None = None
    anneal_factors: tuple[float, ...] = (0.5, 0.1, 0.02)
    max_iterations: int = 5000
    convergence_tol: float = 1e-6
    stage_tol: float = 1e-3
    prune_rel: float = 1e-12

    def __post_init__(self):
        if not self.lam > 0:
            raise UOTError("lambda must be positive")
        if self.epsilon is not None and not self.epsilon > 0:
            raise UOTError("epsilon must be positive")
        if self.epsilon_anneal is not None:
            sched = tuple(float(e) for e in self.epsilon_anneal)
            if not sched or any(not e > 0 for e in sched) or any(
                    b > a for a, b in zip(sched[:-1], sched[1:])):
                raise UOTError("epsilon_anneal must be positive and descending")
            object.__setattr__(self, "epsilon_anneal", sched)

    def schedule(self, cell_size: float | None) -> tuple[float, ...]:
        if self.epsilon_anneal is not None:
            sched = list(self.epsilon_anneal)
        elif cell_size is not None:
            sched = [f * cell_size for f in self.anneal_factors]
        elif self.epsilon is not None:
            sched = [self.epsilon]
        else:
            raise UOTError("no epsilon: give epsilon, epsilon_anneal or a grid")
        if self.epsilon is not None and self.epsilon < sched[-1]:
            sched.append(self.epsilon)
        return tuple(sched)

    @classmethod
    def from_json(cls, obj) -> "UOTConfig":
        obj = dict(obj or {})
        if "lambda" in obj:
            obj["lam"] = obj.pop("lambda")
        for key in ("epsilon_anneal", "anneal_factors"):
            if obj.get(key) is not None:
                obj[key] = tuple(obj[key])
        return cls(**obj)

    def to_json(self) -> dict:
        return {"lambda": self.lam, "epsilon": self.epsilon,
                "epsilon_anneal": None if self.epsilon_anneal is None
                else list(self.epsilon_anneal),
                "anneal_factors": list(self.anneal_factors),
                "max_iterations": self.max_iterations,
                "convergence_tol": self.convergence_tol, "stage_tol": self.stage_tol,
                "prune_rel": self.prune_rel}


@dataclass(frozen=True)
class TransportPlan:
    rows: np.ndarray
    cols: np.ndarray
    mass: np.ndarray
    source_xy: np.ndarray
    target_xy: np.ndarray
    marginal_a: np.ndarray = field(init=False)
    marginal_b: np.ndarray = field(init=False)

    def __post_init__(self):
        if np.any(self.mass < 0):
            raise UOTError("plan entries must be nonnegative")
        ra = np.zeros(self.source_xy.shape[0])
        rb = np.zeros(self.target_xy.shape[0])
        np.add.at(ra, self.rows, self.mass)
        np.add.at(rb, self.cols, self.mass)
        object.__setattr__(self, "marginal_a", ra)
        object.__setattr__(self, "marginal_b", rb)

    def __len__(self):
        return self.mass.shape[0]

    @property
    def distances(self) -> np.ndarray:
        d = self.source_xy[self.rows] - self.target_xy[self.cols]
        return np.hypot(d[:, 0], d[:, 1])

    @classmethod
    def empty(cls, source_xy=None, target_xy=None) -> "TransportPlan":
        z = np.empty(0, dtype=np.int64)
        return cls(z, z.copy(), np.empty(0),
                   np.empty((0, 2)) if source_xy is None else source_xy,
                   np.empty((0, 2)) if target_xy is None else target_xy)

    @classmethod
    def from_dense(cls, J: np.ndarray, source_xy, target_xy, thr: float = 0.0):
        r, c = np.nonzero(J > thr)
        return cls(r.astype(np.int64), c.astype(np.int64), J[r, c].astype(np.float64),
                   np.asarray(source_xy, dtype=np.float64).reshape(-1, 2),
                   np.asarray(target_xy, dtype=np.float64).reshape(-1, 2))

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["ax_km", "ay_km", "bx_km", "by_km", "mass_veh_km", "distance_km"])
        dist = self.distances
        for k in range(len(self)):
            (ax, ay), (bx, by) = self.source_xy[self.rows[k]], self.target_xy[self.cols[k]]
            w.writerow([repr(float(ax)), repr(float(ay)), repr(float(bx)), repr(float(by)),
                        repr(float(self.mass[k])), repr(float(dist[k]))])
        return buf.getvalue()


@dataclass(frozen=True)
class UOTResult:
    tgw: float
    transport_cost: float
    kl_penalty: float
    plan: TransportPlan
    created_mass: float
    destroyed_mass: float
    converged: bool = True
    iterations: int = 0
    epsilon_final: float = 0.0
    lam: float = 0.0
    stage_iterations: tuple[int, ...] = ()

    def to_json(self) -> dict:
        return {"tgw_veh_km2": self.tgw, "transport_cost": self.transport_cost,
                "kl_penalty": self.kl_penalty, "created_mass": self.created_mass,
                "destroyed_mass": self.destroyed_mass, "converged": self.converged,
                "iterations": self.iterations, "epsilon_final": self.epsilon_final,
                "lambda": self.lam, "stage_iterations": list(self.stage_iterations)}

    def json_text(self) -> str:
        return json.dumps(self.to_json(), indent=1, sort_keys=True) + "\n"


def _evaluate(plan: TransportPlan, a: np.ndarray, b: np.ndarray, lam: float, **kw) -> UOTResult:
    transport = float(math.fsum((plan.mass * plan.distances).tolist()))
    kl = lam * (generalized_kl(plan.marginal_a, a) + generalized_kl(plan.marginal_b, b))
    return UOTResult(transport + kl, transport, kl, plan,
                     max(math.fsum(b.tolist()) - math.fsum(plan.marginal_b.tolist()), 0.0),
                     max(math.fsum(a.tolist()) - math.fsum(plan.marginal_a.tolist()), 0.0),
                     lam=lam, **kw)


def _one_sided(A: SupportMeasure, B: SupportMeasure, lam: float, eps: float = 0.0) -> UOTResult:
    plan = TransportPlan.empty(A.positions, B.positions)
    return _evaluate(plan, A.masses, B.masses, lam, converged=True, iterations=0,
                     epsilon_final=eps)


def _logsumexp(v: np.ndarray) -> float:
    m = float(np.max(v))
    return m + math.log(float(np.sum(np.exp(v - m))))


def sinkhorn_unbalanced(A: SupportMeasure, B: SupportMeasure,
                        cfg: UOTConfig = UOTConfig()) -> UOTResult:
    """Entropic unbalanced OT by log-domain scaling with eps-annealing.

    Each stage alternates the two damped dual updates (exponent
    ``lam / (lam + eps)``) and then moves both potentials by the closed-form
    shift that maximises the dual along the total-mass direction.  The
    returned plan drops entries below ``prune_rel`` times the larger total
    mass, and the objective is evaluated on that plan without the entropic
    term.
    """
    if len(A) == 0 or len(B) == 0:
        return _one_sided(A, B, cfg.lam)
    cells = [m.grid.cell_size for m in (A, B) if m.grid is not None]
    sched = cfg.schedule(max(cells) if cells else None)
    lam = cfg.lam
    X, Y = A.positions, B.positions
    la, lb = np.log(A.masses), np.log(B.masses)
    f = np.zeros(len(A))
    g = np.zeros(len(B))
    converged = False
    per_stage = []
    for stage, eps in enumerate(sched):
        tau = lam / (lam + eps)
        tol = cfg.convergence_tol if stage == len(sched) - 1 else max(cfg.stage_tol,
                                                                      cfg.convergence_tol)
        bins_x, bins_y = make_bins(X, bin_width(eps, X)), make_bins(Y, bin_width(eps, Y))
        converged = False
        per_stage.append(0)
        for _ in range(cfg.max_iterations):
            per_stage[-1] += 1
            lse_r = lse_rows(X, Y, g / eps + 0.5 * lb, eps, bins_y)
            f_new = tau * (0.5 * eps * la - eps * lse_r)
            lse_c = lse_rows(Y, X, f_new / eps + 0.5 * la, eps, bins_x)
            g_new = tau * (0.5 * eps * lb - eps * lse_c)
            log_p = _logsumexp(0.5 * lb + g_new / eps + lse_c)
            log_ab = _logsumexp(np.concatenate([la - f_new / lam, lb - g_new / lam]))
            shift = (log_ab - math.log(2.0) - log_p) / (1.0 / lam + 2.0 / eps)
            f_new += shift
            g_new += shift
            err = max(float(np.max(np.abs(f_new - f))), float(np.max(np.abs(g_new - g)))) / eps
            f, g = f_new, g_new
            if not np.isfinite(err):
                raise UOTError("non-finite dual potentials")
            if err <= tol:
                converged = True
                break
    eps = sched[-1]
    thr = cfg.prune_rel * max(A.total, B.total)
    rows, cols, mass = plan_entries(X, Y, f / eps + 0.5 * la, g / eps + 0.5 * lb, eps,
                                    bins_y, math.log(thr))
    plan = TransportPlan(rows, cols, mass, X, Y)
    return _evaluate(plan, A.masses, B.masses, lam, converged=converged,
                     iterations=sum(per_stage), epsilon_final=eps,
                     stage_iterations=tuple(per_stage))


# --------------------------------------------------------------------------
# exact (unregularised) oracle for small instances

def _uot_objective(J, C, a, b, lam) -> float:
    return float(np.sum(C * J)) + lam * (generalized_kl(J.sum(1), a)
                                         + generalized_kl(J.sum(0), b))


def uot_dual_bound(J, C, a, b, lam) -> float:
    """Dual objective at a feasible point built from the coupling ``J``.

    Potentials ``f = -lam log(r/a)`` and ``g = -lam log(s/b)`` are taken
    where the marginals are positive; ``g`` is then clipped to ``c - f``,
    ``f`` is replaced by the c-transform of ``g`` and vice versa, which
    makes the pair feasible.  Any primal value minus this bound is a
    certified optimality gap.
    """
    r, s = J.sum(1), J.sum(0)
    with np.errstate(divide="ignore"):
        f = np.where(r > 0, -lam * np.log(r / a), np.inf)
        g = np.where(s > 0, -lam * np.log(s / b), np.inf)
    if np.all(np.isinf(f)):
        f = np.zeros_like(f)
    g = np.minimum(g, np.min(C - f[:, None], axis=0))
    f = np.min(C - g[None, :], axis=1)
    g = np.min(C - f[:, None], axis=0)
    return float(lam * np.sum(a * -np.expm1(-f / lam)) + lam * np.sum(b * -np.expm1(-g / lam)))


def _uot_grad(J, C, a, b, lam):
    r = np.maximum(J.sum(1), 1e-300)
    s = np.maximum(J.sum(0), 1e-300)
    return C + lam * np.log(r / a)[:, None] + lam * np.log(s / b)[None, :]


def _lbfgs(J, C, a, b, lam):
    from scipy.optimize import minimize

    scale = max(a.sum(), b.sum())

    def fg(x):
        Z = x.reshape(C.shape)
        return _uot_objective(Z, C, a, b, lam) / scale, _uot_grad(Z, C, a, b, lam).ravel() / scale

    res = minimize(fg, J.ravel(), jac=True, method="L-BFGS-B",
                   bounds=[(0.0, None)] * C.size,
                   options={"maxiter": 100000, "maxfun": 200000, "ftol": 1e-16,
                            "gtol": 1e-14, "maxcor": 30})
    return res.x.reshape(C.shape), int(res.nit)


def _revive(J, C, a, b, lam):
    """Give empty rows/columns their optimal mass on the cheapest entry.

    The optimum never has an empty marginal (the penalty slope is infinite
    at zero), but a bound-constrained solver can land on one.
    """
    J = J.copy()
    for _ in range(2):
        s = J.sum(0)
        s_eff = np.where(s > 0, s, b)
        for i in np.nonzero(J.sum(1) == 0)[0]:
            h = C[i] + lam * np.log(s_eff / b)
            j = int(np.argmin(h))
            J[i, j] = a[i] * math.exp(-h[j] / lam)
        r = J.sum(1)
        r_eff = np.where(r > 0, r, a)
        for j in np.nonzero(J.sum(0) == 0)[0]:
            h = C[:, j] + lam * np.log(r_eff / a)
            i = int(np.argmin(h))
            J[i, j] = b[j] * math.exp(-h[i] / lam)
    return J


def _forest_polish(J, C, a, b, lam):
    """Refine ``J`` to the basic solution on its heaviest spanning forest.

    Tight dual constraints ``f_i + g_j = c_ij`` on the forest fix the
    potentials up to one shift per component; that shift balances the
    penalised marginals in closed form, and the coupling on a tree is then
    unique (leaf elimination).  Returns ``None`` when the forest yields a
    negative entry, i.e. the support guess was wrong.
    """
    na, nb = C.shape
    ii, jj = np.nonzero(J > 0)
    order = np.argsort(-J[ii, jj], kind="stable")
    parent = list(range(na + nb))

    def find(x):
        while parent[x] != x:
            parent[x] = parent[parent[x]]
            x = parent[x]
        return x

    adj: list[list[int]] = [[] for _ in range(na + nb)]
    for k in order:
        u, v = int(ii[k]), na + int(jj[k])
        ru, rv = find(u), find(v)
        if ru != rv:
            parent[ru] = rv
            adj[u].append(v)
            adj[v].append(u)
    pot = np.zeros(na + nb)
    mass = np.concatenate([a, b])
    seen = np.zeros(na + nb, dtype=bool)
    out = np.zeros_like(J)
    for root in range(na + nb):
        if seen[root]:
            continue
        seen[root] = True
        bfs, up = [root], {root: -1}
        for node in bfs:
            for nxt in adj[node]:
                if not seen[nxt]:
                    seen[nxt] = True
                    up[nxt] = node
                    i, j = (node, nxt - na) if node < na else (nxt, node - na)
                    pot[nxt] = C[i, j] - pot[node]
                    bfs.append(nxt)
        if len(bfs) == 1:
            return None  # isolated atom: no finite optimum on this support
        comp = np.array(bfs)
        rows, cols = comp[comp < na], comp[comp >= na]
        log_a = _logsumexp(np.log(mass[rows]) - pot[rows] / lam)
        log_b = _logsumexp(np.log(mass[cols]) - pot[cols] / lam)
        t = 0.5 * lam * (log_a - log_b)
        pot[rows] += t
        pot[cols] -= t
        resid = {n: mass[n] * math.exp(-pot[n] / lam) for n in bfs}
        for node in reversed(bfs[1:]):
            par = up[node]
            i, j = (node, par - na) if node < na else (par, node - na)
            out[i, j] = resid[node]
            resid[par] -= resid[node]
    if np.any(out < 0):
        return None
    return out


def kkt_residual(J, G) -> float:
    """Largest violation of the optimality conditions at ``J``.

    ``G`` is the objective gradient; it must vanish where ``J > 0`` and be
    nonnegative where ``J == 0``.
    """
    pos = J > 0
    on = float(np.max(np.abs(G[pos]))) if np.any(pos) else 0.0
    off = float(max(-np.min(G[~pos]), 0.0)) if np.any(~pos) else 0.0
    return max(on, off)


def exact_uot_small(A: SupportMeasure, B: SupportMeasure, lam: float,
                    gap_tol: float = 1e-8) -> UOTResult:
    """Unregularised UOT on small dense instances (oracle use).

    Starts from ``outer(a, b) / max(sum a, sum b)`` and runs bound-constrained
    L-BFGS twice (the warm restart clears stale curvature pairs), then
    snaps to the basic solution on the heaviest spanning forest of the
    support when that lowers the objective.  ``converged`` means
    the certified duality gap from :func:`uot_dual_bound` is at most
    ``gap_tol`` times the objective.
    """
    if len(A) * len(B) > 2500:
        raise UOTError(f"instance too large for the exact solver "
                       f"({len(A)} x {len(B)} > 2500)")
    if not lam > 0:
        raise UOTError("lambda must be positive")
    if len(A) == 0 or len(B) == 0:
        return _one_sided(A, B, lam)
    a, b = A.masses, B.masses
    X, Y = A.positions, B.positions
    C = np.hypot(X[:, None, 0] - Y[None, :, 0], X[:, None, 1] - Y[None, :, 1])
    J = np.outer(a, b) / max(a.sum(), b.sum())
    J, n1 = _lbfgs(J, C, a, b, lam)
    J, n2 = _lbfgs(J, C, a, b, lam)
    J = _revive(J, C, a, b, lam)
    obj = _uot_objective(J, C, a, b, lam)
    Jf = _forest_polish(J, C, a, b, lam)
    if Jf is not None:
        of = _uot_objective(Jf, C, a, b, lam)
        if of <= obj:
            J, obj = Jf, of
    gap = obj - uot_dual_bound(J, C, a, b, lam)
    plan = TransportPlan.from_dense(J, X, Y)
    return _evaluate(plan, a, b, lam, converged=bool(gap <= gap_tol * max(obj, 1e-300)),
                     iterations=n1 + n2, epsilon_final=0.0)


def tgw_distance(DA: TGDistribution, DB: TGDistribution,
                 cfg: UOTConfig = UOTConfig()) -> UOTResult:
    """TGW distance between two TG distributions on the same frame."""
    if DA.grid.frame != DB.grid.frame:
        raise UOTError("distributions live on different study frames")
    return sinkhorn_unbalanced(to_support(DA), to_support(DB), cfg)
