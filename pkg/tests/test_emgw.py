import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from multimot import emgw
from multimot.core import MarginalDataset, build_cost_graph
from multimot.errors import BudgetExceededError, InnerSolverError
from multimot.neural import TrainConfig

from oracles import central_diff, emot_by_lbfgs, rel_err


def rand_data(seed, n, k, d=1, scale=0.3):
    rng = np.random.default_rng(seed)
    return MarginalDataset(tuple(scale * rng.normal(size=(n, d)) for _ in range(k)))


def product_plan(n, k):
    return np.full((n,) * k, float(n) ** -k)


def random_coupling(rng, n, k):
    # a mixture of permutation plans is feasible for every marginal
    w = rng.dirichlet(np.ones(3))
    plan = np.zeros((n,) * k)
    for wi in w:
        idx = [np.arange(n)] + [rng.permutation(n) for _ in range(k - 1)]
        plan[tuple(idx)] += wi / n
    return plan


# -- centering and S1 ----------------------------------------------------------------


def test_center_examples():
    data = rand_data(0, 6, 3, 2)
    mm = emgw.center_dataset(data)
    assert mm.centered
    assert all(np.linalg.norm(x.mean(axis=0)) <= 1e-10 for x in mm.data.samples)
    again = emgw.center_dataset(mm.data)
    for a, b in zip(mm.data.samples, again.data.samples):
        np.testing.assert_allclose(a, b, atol=1e-15)
    flat = emgw.center_dataset(MarginalDataset((np.full((3, 2), 4.0), np.full((3, 1), -1.0))))
    assert all(np.all(x == 0) for x in flat.data.samples)
    shifted = MarginalDataset(tuple(x + s for x, s in zip(data.samples, ([1.0, -2.0], [0.5, 0.5], [3.0, 0.0]))))
    for a, b in zip(mm.data.samples, emgw.center_dataset(shifted).data.samples):
        np.testing.assert_allclose(a, b, atol=1e-14)


def test_s1_examples():
    x = np.array([[-1.0], [1.0]])
    mm = emgw.center_dataset(MarginalDataset((x, x)))
    assert emgw.s1_estimate(mm, [(0, 1)]) == pytest.approx(12.0, abs=1e-12)
    zero = emgw.center_dataset(MarginalDataset((np.zeros((3, 2)), np.zeros((3, 1)))))
    assert emgw.s1_estimate(zero, [(0, 1)]) == 0.0


def brute_s1(samples, edges):
    total = 0.0
    for i, j in edges:
        for v in (i, j):
            x = samples[v]
            total += np.mean([np.sum((a - b) ** 2) ** 2 for a in x for b in x])
        total -= 4 * np.mean([np.sum(a * a) * np.sum(b * b) for a in samples[i] for b in samples[j]])
    return total


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 10_000), st.sampled_from(["circle", "full", "tree"]))
def test_s1_matches_pair_enumeration(seed, kind):
    rng = np.random.default_rng(seed)
    data = MarginalDataset(tuple(rng.normal(size=(5, int(rng.integers(1, 4)))) for _ in range(3)))
    mm = emgw.center_dataset(data)
    g = build_cost_graph(kind, 3)
    assert emgw.s1_estimate(mm, g) == pytest.approx(brute_s1(mm.data.samples, g.edges), rel=1e-10, abs=1e-12)
    shifted = MarginalDataset(tuple(x + rng.normal(size=x.shape[1]) * 5 for x in data.samples))
    assert emgw.s1_estimate(emgw.center_dataset(shifted), g) == pytest.approx(emgw.s1_estimate(mm, g), abs=1e-10)


# -- alignment cost ----------------------------------------------------------------------


def test_cost_from_A_examples():
    g = build_cost_graph("full", 2)
    zero = emgw.cost_from_A({(0, 1): np.zeros((1, 1))}, g)
    assert zero([[2.0], [3.0]]) == pytest.approx(-4 * 4 * 9)
    a = 0.7
    cost = emgw.cost_from_A({(0, 1): np.array([[a]])}, g)
    x, y = 1.3, -0.4
    assert cost([[x], [y]]) == pytest.approx(-4 * x * x * y * y - 32 * a * x * y, rel=1e-14)
    assert cost([[0.0], [0.0]]) == 0.0
    with pytest.raises(ValueError):
        emgw.cost_from_A({(0, 1): np.zeros((2, 1))}, g, dims=[1, 1])
    with pytest.raises(ValueError):
        emgw.cost_from_A({}, g)


def test_alignment_cost_reverse_edge_uses_transpose():
    g = build_cost_graph("circle", 3)
    rng = np.random.default_rng(0)
    A = {(0, 1): rng.normal(size=(2, 1)), (1, 2): rng.normal(size=(1, 3)), (0, 2): rng.normal(size=(2, 3))}
    cost = emgw.cost_from_A(A, g)
    x, z = rng.normal(size=(4, 2)), rng.normal(size=(5, 3))
    np.testing.assert_allclose(cost.pair_matrix(2, 0, z, x), cost.pair_matrix(0, 2, x, z).T, rtol=1e-14)


# -- gradient and objective ------------------------------------------------------------


def phi_discrete(A, plan, mm, g):
    return emgw.emgw_objective_at(A, plan, mm, 0.0, g)


def gradient_case(seed):
    rng = np.random.default_rng(seed)
    k = int(rng.integers(2, 4))
    n = int(rng.integers(2, 5))
    data = MarginalDataset(tuple(rng.normal(size=(n, int(rng.integers(1, 4)))) for _ in range(k)))
    mm = emgw.center_dataset(data)
    g = build_cost_graph("full", k)
    A = {e: rng.normal(size=(mm.data.dims[e[0]], mm.data.dims[e[1]])) for e in g.edges}
    plan = random_coupling(rng, n, k)
    pw = {e: emgw.pairwise_marginal(plan, *e) for e in g.edges}
    grads = emgw.phi_gradient(A, pw, mm)
    return max(rel_err(grads[e], central_diff(lambda: phi_discrete(A, plan, mm, g), A[e], h=1e-4)) for e in g.edges)


def test_phi_gradient_matches_finite_differences():
    errs = [gradient_case(s) for s in range(60)]
    assert max(errs) < 1e-6


def test_phi_gradient_examples():
    rng = np.random.default_rng(1)
    mm = emgw.center_dataset(rand_data(1, 5, 2, 2))
    p = random_coupling(rng, 5, 2)
    star = {(0, 1): 0.5 * mm.data[0].T @ p @ mm.data[1]}
    np.testing.assert_allclose(emgw.phi_gradient(star, {(0, 1): p}, mm)[(0, 1)], 0.0, atol=1e-13)
    indep = {(0, 1): np.full((5, 5), 1 / 25)}
    np.testing.assert_allclose(emgw.phi_gradient({(0, 1): np.zeros((2, 2))}, indep, mm)[(0, 1)], 0.0, atol=1e-13)
    with pytest.raises(ValueError):
        emgw.phi_gradient({(0, 1): np.zeros((2, 2))}, {(0, 1): np.eye(5) / 4}, mm)


def test_objective_examples():
    mm = emgw.center_dataset(rand_data(2, 4, 3, 2))
    g = build_cost_graph("circle", 3)
    A = emgw.zero_alignment(mm, g)
    prod = product_plan(4, 3)
    lin = emgw.emgw_objective_at(A, prod, mm, 0.0, g)
    assert emgw.emgw_objective_at(A, prod, mm, 0.7, g) == pytest.approx(lin, abs=1e-15)
    sq = [np.sum(x * x, axis=1) for x in mm.data.samples]
    want = sum(-4 * sq[i].mean() * sq[j].mean() for i, j in g.edges)
    assert lin == pytest.approx(want, rel=1e-12)
    bad = prod.copy()
    bad[0, 0, 0] += 0.1
    with pytest.raises(ValueError):
        emgw.emgw_objective_at(A, bad, mm, 0.1, g)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 10_000), st.sampled_from(["circle", "full"]))
def test_variational_identity(seed, kind):
    # at the minimizing A the linearized objective recovers the distortion integral
    rng = np.random.default_rng(seed)
    mm = emgw.center_dataset(MarginalDataset(tuple(rng.normal(size=(4, int(rng.integers(1, 3)))) for _ in range(3))))
    g = build_cost_graph(kind, 3)
    plan = random_coupling(rng, 4, 3)
    A = {e: 0.5 * mm.data[e[0]].T @ emgw.pairwise_marginal(plan, *e) @ mm.data[e[1]] for e in g.edges}
    lhs = emgw.s1_estimate(mm, g) + phi_discrete(A, plan, mm, g)
    assert lhs == pytest.approx(emgw.distortion_objective(plan, mm, g), rel=1e-10, abs=1e-12)


def test_one_step_reaches_closed_form():
    rng = np.random.default_rng(3)
    mm = emgw.center_dataset(rand_data(3, 6, 3, 2, scale=1.0))
    g = build_cost_graph("circle", 3)
    plan = random_coupling(rng, 6, 3)
    pw = {e: emgw.pairwise_marginal(plan, *e) for e in g.edges}
    A0 = emgw.zero_alignment(mm, g)
    grads = emgw.phi_gradient(A0, pw, mm)
    A1 = emgw.project({e: A0[e] - grads[e] / 64 for e in A0}, emgw.projection_radii(mm, g))
    for e in g.edges:
        np.testing.assert_allclose(A1[e], 0.5 * mm.data[e[0]].T @ pw[e] @ mm.data[e[1]], atol=1e-10)


@given(st.integers(0, 10_000))
def test_projection(seed):
    rng = np.random.default_rng(seed)
    A = {(0, 1): rng.normal(scale=3, size=(2, 3))}
    radii = {(0, 1): float(rng.uniform(0.1, 2.0))}
    out = emgw.project(A, radii)
    assert np.linalg.norm(out[(0, 1)]) <= radii[(0, 1)] + 1e-12
    small = {(0, 1): A[(0, 1)] * 1e-3}
    np.testing.assert_array_equal(emgw.project(small, {(0, 1): 10.0})[(0, 1)], small[(0, 1)])


@given(st.integers(0, 10_000))
def test_round_coupling(seed):
    rng = np.random.default_rng(seed)
    p = rng.uniform(size=(4, 4))
    p[0] *= 1e-6
    q = emgw.round_coupling(p)
    assert np.all(q >= 0)
    np.testing.assert_allclose(q.sum(axis=1), 0.25, atol=1e-14)
    np.testing.assert_allclose(q.sum(axis=0), 0.25, atol=1e-14)
    feas = random_coupling(rng, 4, 2)
    np.testing.assert_allclose(emgw.round_coupling(feas), feas, atol=1e-14)


# -- alternating solver ----------------------------------------------------------------


def sinkhorn_config(**kw):
    return emgw.EmgwConfig(**{"epsilon": 0.1, "edges": "full", "outer_iters": 10, "sinkhorn_tol": 1e-10, "sinkhorn_max_iter": 50_000, **kw})


def test_all_zero_dataset():
    data = MarginalDataset(tuple(np.zeros((4, 2)) for _ in range(3)))
    res = emgw.nemgw_alternating(data, sinkhorn_config(edges="circle"))
    assert res.value == pytest.approx(0.0, abs=1e-12)
    assert all(np.all(a == 0) for a in res.A.values())


def test_alternation_monotone_and_feasible():
    data = rand_data(4, 8, 2, 1)
    res = emgw.nemgw_alternating(data, sinkhorn_config(a_tol=0.0))
    objs = [t["objective"] for t in res.trace]
    assert len(objs) == 11
    assert np.all(np.diff(objs) <= 1e-6)
    radii = emgw.projection_radii(emgw.center_dataset(data), build_cost_graph("full", 2))
    assert all(np.linalg.norm(res.A[e]) <= radii[e] + 1e-12 for e in res.A)
    assert res.value == pytest.approx(res.s1 + res.penalty + res.inner_value)


def test_translation_invariance():
    data = rand_data(5, 5, 3, 2)
    shifted = MarginalDataset(tuple(x + s for x, s in zip(data.samples, ([3.0, -1.0], [0.2, 7.0], [-5.0, 0.0]))))
    cfg = sinkhorn_config(edges="circle", outer_iters=3)
    a = emgw.nemgw_alternating(data, cfg).value
    b = emgw.nemgw_alternating(shifted, cfg).value
    assert b == pytest.approx(a, abs=1e-8)


def closed_form_alternation(data, eps, rounds):
    mm = emgw.center_dataset(data)
    x, y = mm.data.samples
    n = mm.n
    a = np.zeros((x.shape[1], y.shape[1]))
    sx, sy = np.sum(x * x, axis=1), np.sum(y * y, axis=1)
    for _ in range(rounds + 1):
        c = -4 * np.outer(sx, sy) - 32 * x @ a @ y.T
        value, plan = emot_by_lbfgs(c, eps)
        obj = 32 * np.sum(a * a) + value
        a = 0.5 * x.T @ plan @ y
    assert plan.shape == (n, n)
    return emgw.s1_estimate(mm, [(0, 1)]) + obj


@pytest.mark.parametrize("seed,d", [(6, 1), (7, 1), (8, 2)])
def test_k2_matches_closed_form_oracle(seed, d):
    data = rand_data(seed, 6, 2, d)
    res = emgw.nemgw_alternating(data, sinkhorn_config())
    assert res.value == pytest.approx(closed_form_alternation(data, 0.1, 10), abs=1e-3)


def test_inner_failure_carries_round():
    data = rand_data(9, 4, 4)
    with pytest.raises(InnerSolverError) as info:
        emgw.nemgw_alternating(data, sinkhorn_config(max_tuples=10))
    assert info.value.outer_round == 0
    assert isinstance(info.value.__cause__, BudgetExceededError)


def test_nemot_inner_solver_runs():
    data = rand_data(10, 32, 3, 2)
    cfg = emgw.EmgwConfig(
        epsilon=0.5, edges="circle", outer_iters=2, inner="nemot", nemot_loss="ustat",
        nemot=TrainConfig(hidden=[8, 8], batch_size=8, epochs=2, lr=1e-3),
    )
    res = emgw.nemgw_alternating(data, cfg)
    assert np.isfinite(res.value) and len(res.trace) == 3
    for p in res.pairwise.values():
        np.testing.assert_allclose(p.sum(axis=1), 1 / 32, atol=1e-12)


def test_config_validation():
    with pytest.raises(ValueError):
        emgw.EmgwConfig(epsilon=0.0)
    with pytest.raises(ValueError):
        emgw.EmgwConfig(inner="greedy")


# -- permutation baseline ------------------------------------------------------------------


def test_permutation_bound_matches_enumeration():
    mm = emgw.center_dataset(rand_data(11, 3, 3, 2, scale=1.0))
    g = build_cost_graph("circle", 3)
    best, arg = emgw.mgw_permutation_upper_bound(mm, g)
    vals = []
    for s1, s2 in itertools.product(itertools.permutations(range(3)), repeat=2):
        plan = np.zeros((3, 3, 3))
        plan[np.arange(3), list(s1), list(s2)] = 1 / 3
        vals.append(emgw.distortion_objective(plan, mm, g))
    assert best == pytest.approx(min(vals), rel=1e-12)
    plan = np.zeros((3, 3, 3))
    plan[np.arange(3), list(arg[0]), list(arg[1])] = 1 / 3
    assert emgw.distortion_objective(plan, mm, g) == pytest.approx(best, rel=1e-12)
    with pytest.raises(BudgetExceededError):
        emgw.mgw_permutation_upper_bound(mm, g, max_couplings=10)
