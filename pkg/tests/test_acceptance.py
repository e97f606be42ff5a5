"""End-to-end acceptance checks.

Each test prints one ``criterion N: PASS|FAIL`` line (also collected into the
pytest terminal summary). Several of them train networks on thousands of
samples and take many minutes on a single core.

Run only these with ``pytest tests/test_acceptance.py -v -s``.
"""

import time

import numpy as np
import pytest

from multimot import bench, emgw, nemot, sinkhorn
from multimot.core import MarginalDataset, PairwiseCost, build_cost_graph
from multimot.datagen import GenSpec, generate, load_dataset, save_dataset
from multimot.errors import CorruptDataError, DatasetFormatError
from multimot.neural import TrainConfig

from oracles import dense_marginal, loop_cost_tensor

RESULTS = []
SEEDS = range(5)
FULL3 = build_cost_graph("full", 3)


def verdict(num, ok, detail):
    line = f"criterion {num}: {'PASS' if ok else 'FAIL'} | {detail}"
    RESULTS.append(line)
    print(line, flush=True)
    assert ok, line


def oracle_value(data, graph, eps, tol=1e-8):
    return sinkhorn.solve(data, graph, epsilon=eps, tol=tol, max_iter=50_000)[1].value


def train(data, graph, eps, seed, loss, **cfg):
    model = nemot.init_model(data, graph, eps, config=TrainConfig(seed=seed, **cfg))
    return nemot.train_nemot(data, model, loss=loss), model


def improved(est):
    return np.median(est.trace[-1]) >= np.median(est.trace[0])


# -- 1 -----------------------------------------------------------------------------


def dense_plan(phis, c, eps):
    k, n = c.ndim, c.shape[0]
    z = -c / eps
    for i, p in enumerate(phis):
        shape = [1] * k
        shape[i] = n
        z = z + p.reshape(shape) / eps
    w = np.exp(z - z.max())
    return w / w.sum(), float(np.exp(z).mean())


def test_criterion_1_oracle_equivalence():
    t0 = time.perf_counter()
    rng = np.random.default_rng(2024)
    worst = {"a": 0.0, "b": 0.0, "c": 0.0, "d": 0.0}
    for case in range(20):
        n, k, d = int(rng.integers(2, 7)), int(rng.choice([3, 4])), int(rng.integers(1, 4))
        eps = (0.1, 1.0)[case % 2]
        data = generate(GenSpec("uniform-cube", n, k, d, seed=case))
        g = build_cost_graph("circle", k)
        _, full = sinkhorn.sinkhorn_full(data, g, epsilon=eps, tol=1e-12, max_iter=50_000)
        pots, circ = sinkhorn.sinkhorn_circle(data, epsilon=eps, tol=1e-12, max_iter=50_000)
        worst["a"] = max(worst["a"], abs(full.value - circ.value))

        # a generic (off-optimum) set of potentials exercises every formula
        phis = [p + rng.normal(scale=0.1, size=n) for p in pots.phis]
        L = nemot.build_L_matrices(phis, data, eps, g)
        c = loop_cost_tensor(data.samples, g.edges, 1.0 / k)
        plan, mean_exp = dense_plan(phis, c, eps)
        tr = nemot.ustat_exponential_circle(L)
        worst["b"] = max(worst["b"], abs(tr - (mean_exp + eps)) / (mean_exp + eps))
        for u in range(k):
            for v in range(u + 1, k):
                m = nemot.pairwise_plan_marginal_circle(L, u, v, normalize=True)
                worst["c"] = max(worst["c"], float(np.max(np.abs(m - dense_marginal(plan, [u, v])))))
        C = nemot.circle_cost_matrices(data, g, PairwiseCost())
        dense_cost = float(np.sum(c * plan))
        worst["d"] = max(worst["d"], abs(nemot.unregularized_cost_circle(C, L) - dense_cost) / abs(dense_cost))
    elapsed = time.perf_counter() - t0
    ok = worst["a"] <= 1e-8 and worst["b"] <= 1e-10 and worst["c"] <= 1e-12 and worst["d"] <= 1e-10 and elapsed < 60
    verdict(1, ok, "20 instances; worst (a) {a:.1e} (b) {b:.1e} (c) {c:.1e} (d) {d:.1e}; ".format(**worst) + f"{elapsed:.1f}s")


# -- 2 -----------------------------------------------------------------------------


def test_criterion_2_nemot_vs_sinkhorn():
    cells, ok = [], True
    for family in ("uniform-cube", "isotropic-gaussian"):
        for d in (1, 5, 25, 100):
            errs, better = [], True
            for seed in SEEDS:
                data = generate(GenSpec(family, 2000, 3, d, seed=seed))
                ref = oracle_value(data, FULL3, 0.1)
                est, _ = train(data, FULL3, 0.1, seed, "ustat")
                errs.append(abs(est.value - ref) / abs(ref))
                better &= improved(est)
            med = float(np.median(errs))
            ok &= med <= 0.05 and better
            cells.append(f"{family[:4]} d={d}: {100 * med:.2f}%")
    plateau = {}
    for family, target, tol in (("isotropic-gaussian", 2.00, 0.05), ("uniform-cube", 0.66, 0.02)):
        data = generate(GenSpec(family, 2000, 3, 1000, seed=0))
        est, _ = train(data, FULL3, 0.1, 0, "aligned")
        plateau[family] = est.value
        ok &= abs(est.value - target) <= tol
    verdict(
        2,
        ok,
        "median rel. err " + ", ".join(cells)
        + f"; d=1000 plateaus gaussian {plateau['isotropic-gaussian']:.4f}, uniform {plateau['uniform-cube']:.4f}",
    )


# -- 3 -----------------------------------------------------------------------------


def test_criterion_3_linear_in_k():
    n, d = 1000, 100
    base = float(np.median([oracle_value(generate(GenSpec("uniform-cube", n, 3, d, seed=s)), FULL3, 0.1) for s in SEEDS]))
    parts, ok = [], True
    for k in (3, 5, 10):
        g = build_cost_graph("full", k)
        vals = []
        for seed in SEEDS:
            est, _ = train(generate(GenSpec("uniform-cube", n, k, d, seed=seed)), g, 0.1, seed, "aligned")
            vals.append(est.value)
        med, target = float(np.median(vals)), base * (k - 1) / 2
        ok &= abs(med - target) / target <= 0.05
        parts.append(f"k={k}: {med:.4f} vs {target:.4f}")
    verdict(3, ok, f"k=3 oracle {base:.4f}; " + ", ".join(parts))


# -- 4 -----------------------------------------------------------------------------


def test_criterion_4_runtime_scaling():
    nem = bench.run_grid({"solver": ["nemot"], "n": [500, 1000, 5000, 10_000], "k": [4], "d": [2], "epochs": 5}, repeats=3)
    snk = bench.run_grid(
        {"solver": ["sinkhorn"], "n": [50, 100, 150, 200], "k": [4], "d": [2], "max_tuples": 2e9, "sinkhorn_sweeps": 1}
    )
    feas = bench.run_grid({"solver": ["sinkhorn", "nemot"], "n": [1000], "k": [4], "d": [2], "epochs": 1})
    slope_n = nem["slopes"][0]["slope"] if nem["slopes"] else float("nan")
    slope_s = snk["slopes"][0]["slope"] if snk["slopes"] else float("nan")
    status = {c["solver"]: c["status"] for c in feas["cells"]}
    ok = abs(slope_n - 1.0) <= 0.3 and slope_s >= 3.0 and status == {"sinkhorn": "skipped", "nemot": "ok"}
    verdict(4, ok, f"NEMOT slope {slope_n:.2f}; dense Sinkhorn slope {slope_s:.2f}; n=1000,k=4: {status}")


# -- 5 -----------------------------------------------------------------------------


def test_criterion_5_gradient_suites():
    from test_emgw import gradient_case
    from test_nemot import objective_gradient_error
    from test_neural import check_mlp_gradients

    mlp = [check_mlp_gradients(s) for s in range(60)]
    obj = [objective_gradient_error(s, u) for s in range(25) for u in (False, True)]
    agr = [gradient_case(s) for s in range(60)]
    ok = max(mlp) < 1e-4 and max(obj) < 1e-4 and max(agr) < 1e-6
    verdict(
        5, ok, f"MLP {len(mlp)} cases max {max(mlp):.1e}; NEMOT objective {len(obj)} cases max {max(obj):.1e}; "
        f"A-gradient {len(agr)} cases max {max(agr):.1e}"
    )


# -- 6 -----------------------------------------------------------------------------


def test_criterion_6_estimation_and_plan():
    eps = 0.5
    ref = float(np.mean([oracle_value(generate(GenSpec("isotropic-gaussian", 4000, 3, 5, seed=s)), FULL3, eps) for s in (100, 101, 102)]))
    meds = []
    for n in (250, 1000, 4000):
        errs = []
        for seed in SEEDS:
            est, _ = train(generate(GenSpec("isotropic-gaussian", n, 3, 5, seed=seed)), FULL3, eps, seed, "ustat")
            errs.append(abs(est.value - ref))
        meds.append(float(np.median(errs)))
    decay = all(b <= a for a, b in zip(meds, meds[1:]))

    data = generate(GenSpec("isotropic-gaussian", 6, 3, 2, seed=0))
    pots, rep = sinkhorn.sinkhorn_full(data, FULL3, epsilon=eps, tol=1e-12)
    star = sinkhorn.plan_from_potentials(pots, data, FULL3).dense
    est, model = train(data, FULL3, eps, 0, "ustat", batch_size=6, epochs=100, lr=1e-3)
    q = nemot.neural_plan_tensor(model, data)
    kl = float(np.sum(star * np.log(star / q)))
    gap = abs(rep.value - est.value)
    bound = 10 * gap / eps
    ok = decay and kl < bound
    verdict(
        6, ok, f"median |err| at n=250/1000/4000: {meds[0]:.4f}/{meds[1]:.4f}/{meds[2]:.4f} (ref {ref:.4f}); "
        f"n=6 plan KL {kl:.2e} < {bound:.2e}"
    )


# -- 7 -----------------------------------------------------------------------------


def small(seed, n, k, d=1, scale=0.3):
    rng = np.random.default_rng(seed)
    return MarginalDataset(tuple(scale * rng.normal(size=(n, d)) for _ in range(k)))


def test_criterion_7_emgw():
    # (a) one projected step of size 1/64 lands on the closed form
    mm = emgw.center_dataset(small(0, 6, 3, 2))
    g = build_cost_graph("circle", 3)
    cost = emgw.cost_from_A(emgw.zero_alignment(mm, g), g)
    pots, _ = sinkhorn.sinkhorn_circle(mm.data, cost, 0.1, tol=1e-12, graph=g)
    plan = sinkhorn.plan_from_potentials(pots, mm.data, g, cost).dense
    pw = {e: emgw.pairwise_marginal(plan, *e) for e in g.edges}
    radii = emgw.projection_radii(mm, g)
    err_a = 0.0
    rng = np.random.default_rng(1)
    for A in (emgw.zero_alignment(mm, g), {e: 0.01 * rng.normal(size=a.shape) for e, a in emgw.zero_alignment(mm, g).items()}):
        grads = emgw.phi_gradient(A, pw, mm)
        step = emgw.project({e: A[e] - grads[e] / 64 for e in A}, radii)
        for e in g.edges:
            err_a = max(err_a, float(np.max(np.abs(step[e] - 0.5 * mm.data[e[0]].T @ pw[e] @ mm.data[e[1]]))))

    # (b) monotone alternation with exact inner solves
    rise = -np.inf
    for seed, n in ((1, 6), (2, 8), (3, 10)):
        cfg = emgw.EmgwConfig(epsilon=0.1, edges="full", outer_iters=10, a_tol=0.0, sinkhorn_tol=1e-10, sinkhorn_max_iter=50_000)
        objs = [t["objective"] for t in emgw.nemgw_alternating(small(seed, n, 2), cfg).trace]
        rise = max(rise, float(np.max(np.diff(objs))))

    # (c) translation invariance
    base = small(4, 5, 3, 2)
    moved = MarginalDataset(tuple(x + s for x, s in zip(base.samples, ([2.0, -1.0], [0.0, 5.0], [-3.0, 0.5]))))
    cfg = emgw.EmgwConfig(epsilon=0.1, edges="circle", outer_iters=5)
    shift = abs(emgw.nemgw_alternating(base, cfg).value - emgw.nemgw_alternating(moved, cfg).value)

    # (d) entropic gap against the permutation-restricted MGW bound
    data = small(0, 5, 3, 2)
    bound, _ = emgw.mgw_permutation_upper_bound(emgw.center_dataset(data), g)
    vals = [emgw.nemgw_alternating(data, emgw.EmgwConfig(epsilon=e, edges="circle", outer_iters=200)).value for e in (0.5, 0.1, 0.02)]
    gaps = [v - bound for v in vals]
    prop1 = all(gp >= 0 for gp in gaps) and all(b <= a for a, b in zip(gaps, gaps[1:]))

    ok = err_a <= 1e-10 and rise <= 1e-6 and shift <= 1e-8 and prop1
    verdict(
        7, ok, f"(a) {err_a:.1e} (b) max rise {rise:.1e} (c) {shift:.1e} "
        f"(d) bound {bound:.4f}, EMGW at eps 0.5/0.1/0.02 = {vals[0]:.4f}/{vals[1]:.4f}/{vals[2]:.4f}"
    )


# -- 8 -----------------------------------------------------------------------------


def test_criterion_8_determinism_and_format(tmp_path):
    spec = GenSpec("gmm", 200, 3, 4, seed=11)
    a, b = generate(spec), generate(spec)
    same_data = all(x.tobytes() == y.tobytes() for x, y in zip(a.samples, b.samples))
    r1, _ = train(a, FULL3, 0.2, 3, "aligned", batch_size=32, epochs=3, hidden=[16, 16])
    r2, _ = train(b, FULL3, 0.2, 3, "aligned", batch_size=32, epochs=3, hidden=[16, 16])
    s1, s2 = oracle_value(a, FULL3, 0.2), oracle_value(b, FULL3, 0.2)
    repro = abs(r1.value - r2.value) <= 1e-9 and abs(s1 - s2) <= 1e-9

    save_dataset(a, tmp_path / "D")
    back = load_dataset(tmp_path / "D")
    round_trip = all(x.tobytes() == y.tobytes() for x, y in zip(a.samples, back.samples))
    f = tmp_path / "D" / "marginal_1.csv"
    raw = f.read_text()
    rejected = 0
    pos = next(i for i, ch in enumerate(raw) if i > 4 and ch.isdigit())
    f.write_text(raw[:pos] + ("7" if raw[pos] != "7" else "3") + raw[pos + 1:])
    try:
        load_dataset(tmp_path / "D")
    except CorruptDataError:
        rejected += 1
    f.write_text(raw[: len(raw) // 2])
    try:
        load_dataset(tmp_path / "D")
    except DatasetFormatError:
        rejected += 1
    ok = same_data and repro and round_trip and rejected == 2
    verdict(8, ok, f"seeded data bitwise {same_data}; NEMOT/Sinkhorn rerun {repro}; round trip {round_trip}; corrupt rejected {rejected}/2")


if __name__ == "__main__":
    raise SystemExit(pytest.main([__file__, "-v", "-s"]))
