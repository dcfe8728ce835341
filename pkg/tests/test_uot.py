import json
import math

import numpy as np
import pytest
from scipy.special import logsumexp

from oracles import random_plans, two_atom_scan, two_atom_uot, uot_objective
from tgnet._uot_kernels import bin_width, lse_rows, make_bins, plan_entries
from tgnet.network import StudyFrame
from tgnet.raster import GridSpec, TGDistribution
from tgnet.uot import (SupportMeasure, TransportPlan, UOTConfig, UOTError, exact_uot_small,
                       generalized_kl, ground_cost, kkt_residual, sinkhorn_unbalanced,
                       tgw_distance, to_support, uot_dual_bound)

GRID = GridSpec(StudyFrame(0, 0, 1, 1), 0.05)


def atoms(points, masses):
    return SupportMeasure(np.array(points, dtype=float), np.array(masses, dtype=float))


def test_ground_cost_examples():
    assert ground_cost((1, 2), (1, 2)) == 0
    assert ground_cost((0, 0), (3, 4)) == 5
    assert ground_cost((0.3, 0.1), (2, 5)) == ground_cost((2, 5), (0.3, 0.1))


def test_generalized_kl_examples():
    assert generalized_kl([1.0, 2.0], [1.0, 2.0]) == 0
    assert generalized_kl([0.0, 0.0], [1.5, 2.5]) == 4.0
    assert generalized_kl(2.0, 1.0) == pytest.approx(2 * math.log(2) - 1, rel=1e-15)
    assert generalized_kl(1.0, 0.0) == math.inf
    with pytest.raises(UOTError):
        generalized_kl([1.0], [1.0, 2.0])


def test_to_support_examples():
    assert len(to_support(TGDistribution(GRID, {}))) == 0
    s = to_support(TGDistribution(GRID, {(0, 0): 5.0}))
    assert s.positions.tolist() == [[0.025, 0.025]] and s.masses.tolist() == [5.0]
    D = TGDistribution(GRID, {(3, 4): 1.25, (7, 1): 2.5, (0, 19): 0.75})
    assert to_support(D).total == D.total_mass


def test_support_validation():
    with pytest.raises(UOTError):
        atoms([[0, 0]], [0.0])
    with pytest.raises(UOTError):
        atoms([[0, 0], [1, 1]], [1.0])


def test_config_json_and_schedule():
    cfg = UOTConfig.from_json({"lambda": 2.0, "epsilon": 1e-4})
    assert cfg.lam == 2.0
    assert UOTConfig.from_json(cfg.to_json()) == cfg
    assert cfg.schedule(0.05) == pytest.approx((0.025, 0.005, 0.001, 1e-4))
    assert UOTConfig().schedule(0.05) == pytest.approx((0.025, 0.005, 0.001))
    with pytest.raises(UOTError):
        UOTConfig(lam=0)
    with pytest.raises(UOTError):
        UOTConfig(epsilon_anneal=(0.1, 0.2))
    with pytest.raises(UOTError):
        UOTConfig().schedule(None)


def test_lse_rows_matches_dense():
    rng = np.random.default_rng(1)
    X, Y = rng.uniform(0, 2, (60, 2)), rng.uniform(0, 2, (80, 2))
    w = rng.normal(0, 3, 80)
    C = np.hypot(X[:, None, 0] - Y[None, :, 0], X[:, None, 1] - Y[None, :, 1])
    for eps in (0.5, 0.05, 0.004):
        got = lse_rows(X, Y, w, eps, make_bins(Y, bin_width(eps, Y)))
        ref = logsumexp(w[None, :] - C / eps, axis=1)
        assert np.allclose(got, ref, rtol=0, atol=1e-12 * np.abs(ref).max())


def test_plan_entries_match_dense():
    rng = np.random.default_rng(2)
    X, Y = rng.uniform(0, 1, (30, 2)), rng.uniform(0, 1, (40, 2))
    u, w = rng.normal(0, 1, 30), rng.normal(0, 1, 40)
    eps = 0.05
    C = np.hypot(X[:, None, 0] - Y[None, :, 0], X[:, None, 1] - Y[None, :, 1])
    dense = np.exp(u[:, None] + w[None, :] - C / eps)
    thr = 1e-6
    rows, cols, mass = plan_entries(X, Y, u, w, eps, make_bins(Y, 0.1), math.log(thr))
    r, c = np.nonzero(dense >= thr)
    assert rows.tolist() == r.tolist() and cols.tolist() == c.tolist()
    assert np.allclose(mass, dense[r, c], rtol=1e-12)


def test_identity_near_zero_and_diagonal():
    rng = np.random.default_rng(3)
    cells = {(int(p), int(q)): float(v) for p, q, v in
             zip(rng.integers(0, 20, 60), rng.integers(0, 20, 60), rng.uniform(1, 50, 60))}
    D = TGDistribution(GRID, cells)
    res = tgw_distance(D, D)
    assert res.converged
    assert res.tgw <= 1e-6 * D.total_mass * GRID.cell_size
    diag = res.plan.mass[res.plan.rows == res.plan.cols].sum()
    assert diag >= (1 - 1e-6) * res.plan.mass.sum()


@pytest.mark.parametrize("m, d, lam", [(3.0, 0.2, 5.0), (1.0, 0.05, 0.05), (10.0, 0.5, 0.3)])
def test_two_atoms_against_closed_form(m, d, lam):
    A, B = atoms([[0, 0]], [m]), atoms([[d, 0]], [m])
    t, obj = two_atom_uot(m, d, lam)
    assert two_atom_scan(m, d, lam) == pytest.approx(obj, rel=1e-8)
    ex = exact_uot_small(A, B, lam)
    assert ex.converged
    assert ex.tgw == pytest.approx(obj, rel=1e-6)
    assert ex.plan.mass.sum() == pytest.approx(t, rel=1e-6)
    sk = sinkhorn_unbalanced(A, B, UOTConfig(lam=lam, epsilon_anneal=(0.02, 0.005, 0.001)))
    assert sk.tgw == pytest.approx(obj, rel=2e-2)


def test_full_transport_limit():
    # lam >> d: nearly all mass moves and the value tends to m * d
    m, d = 2.0, 0.1
    res = exact_uot_small(atoms([[0, 0]], [m]), atoms([[d, 0]], [m]), lam=1e4)
    assert res.tgw == pytest.approx(m * d, rel=1e-4)


def test_far_negligible_atom_costs_destruction():
    m, lam = 4.0, 0.05
    A, B = atoms([[0, 0]], [m]), atoms([[5.0, 0]], [1e-9])
    res = exact_uot_small(A, B, lam)
    assert res.tgw == pytest.approx(lam * m, rel=1e-6)
    assert res.destroyed_mass == pytest.approx(m, rel=1e-6)


def test_empty_side():
    A = atoms([[0, 0], [1, 0]], [2.0, 3.0])
    E = atoms(np.empty((0, 2)), [])
    for solver in (lambda a, b: exact_uot_small(a, b, 0.5),
                   lambda a, b: sinkhorn_unbalanced(a, b, UOTConfig(lam=0.5, epsilon=0.01))):
        assert solver(A, E).tgw == pytest.approx(2.5)
        assert solver(E, A).tgw == pytest.approx(2.5)
        assert solver(E, A).created_mass == pytest.approx(5.0)


def test_exact_identical_atoms():
    A = atoms([[0.3, 0.4]], [7.0])
    res = exact_uot_small(A, A, 0.5)
    assert res.tgw == pytest.approx(0.0, abs=1e-12)
    assert res.plan.rows.tolist() == [0] and res.plan.mass[0] == pytest.approx(7.0)


@pytest.mark.parametrize("seed", range(5))
def test_exact_beats_random_plans(seed):
    rng = np.random.default_rng(seed)
    A = atoms(rng.uniform(0, 1, (5, 2)), rng.uniform(0.5, 3, 5))
    B = atoms(rng.uniform(0, 1, (5, 2)), rng.uniform(0.5, 3, 5))
    C = np.hypot(A.positions[:, None, 0] - B.positions[None, :, 0],
                 A.positions[:, None, 1] - B.positions[None, :, 1])
    for lam in (0.05, 0.5, 5.0):
        res = exact_uot_small(A, B, lam)
        assert res.converged
        best = min(uot_objective(J, C, A.masses, B.masses, lam)
                   for J in random_plans(rng, 5, 5, A.total, 1000))
        assert res.tgw <= best


def test_dual_bound_is_a_lower_bound():
    rng = np.random.default_rng(11)
    A = atoms(rng.uniform(0, 1, (6, 2)), rng.uniform(0.5, 2, 6))
    B = atoms(rng.uniform(0, 1, (7, 2)), rng.uniform(0.5, 2, 7))
    a, b, lam = A.masses, B.masses, 0.3
    C = np.hypot(A.positions[:, None, 0] - B.positions[None, :, 0],
                 A.positions[:, None, 1] - B.positions[None, :, 1])
    opt = exact_uot_small(A, B, lam).tgw
    for J in random_plans(rng, 6, 7, 5.0, 30):
        J[0, :] = 0.0  # a zero row forces the infinite-potential branch
        bound = uot_dual_bound(J, C, a, b, lam)
        assert bound <= opt + 1e-12
        assert bound <= uot_objective(J, C, a, b, lam) + 1e-12


def test_kkt_residual_at_exact_solution():
    rng = np.random.default_rng(4)
    A = atoms(rng.uniform(0, 1, (6, 2)), rng.uniform(1, 2, 6))
    B = atoms(rng.uniform(0, 1, (6, 2)), rng.uniform(1, 2, 6))
    lam = 0.5
    res = exact_uot_small(A, B, lam)
    J = np.zeros((6, 6))
    J[res.plan.rows, res.plan.cols] = res.plan.mass
    C = np.hypot(A.positions[:, None, 0] - B.positions[None, :, 0],
                 A.positions[:, None, 1] - B.positions[None, :, 1])
    r, s = J.sum(1), J.sum(0)
    G = C + lam * np.log(r / A.masses)[:, None] + lam * np.log(s / B.masses)[None, :]
    assert kkt_residual(J, G) <= 1e-6


def test_exact_size_limit():
    A = atoms(np.zeros((51, 2)) + np.arange(51)[:, None], np.ones(51))
    with pytest.raises(UOTError, match="too large"):
        exact_uot_small(A, A, 1.0)


def test_symmetry_of_distance():
    rng = np.random.default_rng(6)
    D1 = TGDistribution(GRID, {(int(p), int(q)): float(v) for p, q, v in
                               zip(rng.integers(0, 20, 30), rng.integers(0, 20, 30),
                                   rng.uniform(1, 5, 30))})
    D2 = TGDistribution(GRID, {(int(p), int(q)): float(v) for p, q, v in
                               zip(rng.integers(0, 20, 25), rng.integers(0, 20, 25),
                                   rng.uniform(1, 5, 25))})
    ab, ba = tgw_distance(D1, D2), tgw_distance(D2, D1)
    assert ab.tgw == pytest.approx(ba.tgw, rel=1e-5)
    assert ab.created_mass == pytest.approx(ba.destroyed_mass, rel=1e-5)


def test_result_accounting():
    rng = np.random.default_rng(8)
    D1 = TGDistribution(GRID, {(int(p), 3): 2.0 for p in rng.integers(0, 20, 10)})
    D2 = TGDistribution(GRID, {(int(p), 4): 1.0 for p in rng.integers(0, 20, 12)})
    res = tgw_distance(D1, D2)
    assert res.tgw == pytest.approx(res.transport_cost + res.kl_penalty, rel=1e-12)
    assert res.transport_cost == pytest.approx(float(np.sum(res.plan.mass * res.plan.distances)))
    assert res.destroyed_mass == pytest.approx(D1.total_mass - res.plan.mass.sum())
    doc = json.loads(res.json_text())
    assert doc["tgw_veh_km2"] == res.tgw and doc["lambda"] == 0.05


def test_frames_must_match():
    other = GridSpec(StudyFrame(0, 0, 2, 1), 0.05)
    with pytest.raises(UOTError, match="frames"):
        tgw_distance(TGDistribution(GRID, {(0, 0): 1.0}), TGDistribution(other, {(0, 0): 1.0}))


def test_iteration_cap_flags_non_convergence():
    A, B = atoms([[0, 0], [0.3, 0]], [1.0, 2.0]), atoms([[0.1, 0]], [2.0])
    res = sinkhorn_unbalanced(A, B, UOTConfig(lam=5.0, epsilon=0.001, epsilon_anneal=(0.01,),
                                              max_iterations=1))
    assert not res.converged and math.isfinite(res.tgw)


def test_plan_csv_and_dense():
    J = np.array([[0.0, 2.0], [1.5, 0.0]])
    plan = TransportPlan.from_dense(J, [[0, 0], [1, 0]], [[0, 3], [1, 1]])
    lines = plan.to_csv().splitlines()
    assert lines[0] == "ax_km,ay_km,bx_km,by_km,mass_veh_km,distance_km"
    assert lines[1].split(",")[4:] == ["2.0", "1.4142135623730951"]
    assert plan.marginal_a.tolist() == [2.0, 1.5] and plan.marginal_b.tolist() == [1.5, 2.0]
