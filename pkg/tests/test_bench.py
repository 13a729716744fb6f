import csv
import math
import random

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from drpolicy import bench
from drpolicy.bench import (BenchSettings, DgpConfig, ReplicationRecord, aggregate_stats,
                            best_in_class, context_moments, dgp_coefficients, dump_csv,
                            expect_zbar, generate, generate_pricing_data, generate_quadratic_data,
                            generate_resource_data, run_evaluation_experiment, sim_seeds,
                            true_policy_value)
from drpolicy.core import InvalidInputError, Policy


# coefficient functions

def test_coefficients_examples():
    assert tuple(map(float, dgp_coefficients("quadratic", 1.0))) == pytest.approx((2.0, 0.6))
    assert tuple(map(float, dgp_coefficients("step", 1.4))) == (5.0, 0.7)
    assert tuple(map(float, dgp_coefficients("step", 1.5))) == (6.0, 1.2)
    assert tuple(map(float, dgp_coefficients("linear", 1.5))) == (9.0, 1.5)
    a, b = dgp_coefficients("sigmoid", 0.0)
    assert (float(a), float(b)) == (3.5, 1.1)


def test_config_validation():
    with pytest.raises(InvalidInputError):
        DgpConfig(form="cubic")
    with pytest.raises(InvalidInputError):
        DgpConfig(n=0)
    assert (DgpConfig(regime="high").k, DgpConfig(regime="high").l) == (10, 3)


# generators

@pytest.mark.parametrize("gen", [generate_pricing_data, generate_quadratic_data,
                                 generate_resource_data])
def test_generators_deterministic(gen):
    cfg = DgpConfig(form="sigmoid", regime="high", n=300, seed=77)
    d1, _ = gen(cfg)
    d2, _ = gen(cfg)
    for x, y in ((d1.y, d2.y), (d1.a, d2.a), (d1.z, d2.z)):
        assert np.array_equal(x, y)
    d3, _ = gen(DgpConfig(form="sigmoid", regime="high", n=300, seed=78))
    assert not np.array_equal(d1.y, d3.y)


def test_price_moments():
    data, truth = generate_pricing_data(DgpConfig(n=10 ** 6, seed=2))
    resid = data.a[:, 0] - truth.summary(data.z)
    n = resid.size
    assert abs(resid.mean()) <= 0.004
    assert abs(resid.mean()) <= 3 / math.sqrt(n)
    assert abs(resid.var() - 1.0) <= 3 * math.sqrt(2.0 / n)


def test_pricing_outcome_matches_model():
    cfg = DgpConfig(form="step", n=2000, seed=4, noise=0.0)
    data, truth = generate_pricing_data(cfg)
    theta = truth.theta(data.z)
    assert np.max(np.abs(data.y - theta[:, 0] - theta[:, 1] * data.a[:, 0])) <= 1e-12
    assert np.all(truth.sigma2 == 1.0)


def test_quadratic_noiseless_pinned():
    a, b = dgp_coefficients("quadratic", 1.0)
    assert float(a) * 2 - float(b) * 4 == pytest.approx(1.6, abs=1e-12)
    data, truth = generate_quadratic_data(DgpConfig(n=500, seed=1, noise=0.0))
    th = truth.theta(data.z)
    p = data.a[:, 0]
    assert np.max(np.abs(data.y - (th[:, 0] * p + th[:, 1] * p ** 2))) <= 1e-12


def test_quadratic_shares_prices_with_demand_dgp():
    cfg = DgpConfig(n=200, seed=9)
    assert np.array_equal(generate_pricing_data(cfg).data.a, generate_quadratic_data(cfg).data.a)


def test_resource_sigma_matches_gaussian_moments():
    data, truth = generate_resource_data(DgpConfig(n=10 ** 6, seed=3))
    zbar = truth.summary(data.z)
    pin = (zbar > 1.45) & (zbar < 1.55)
    a = data.a[pin]
    emp = a.T @ a / a.shape[0]
    m = 1.5
    np.testing.assert_allclose(emp, [[1 + m * m, m * m], [m * m, 1 + m * m]], atol=0.05)
    S = truth.sigma(np.array([[1.2, 1.9]]))[0]
    assert S.tolist() == [[1 + 1.44, 1.44], [1.44, 1 + 1.44]]


def test_dump_csv_roundtrip(tmp_path):
    data, _ = generate_resource_data(DgpConfig(n=20, seed=5))
    path = tmp_path / "d.csv"
    dump_csv(data, path)
    with open(path) as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == ["y", "a_1", "a_2", "z_1", "z_2"]
    back = np.array(rows[1:], dtype=float)
    assert np.array_equal(back[:, 0], data.y)
    assert np.array_equal(back[:, 1:3], data.a)
    assert np.array_equal(back[:, 3:], data.z)


def test_sim_seeds_independent_of_order():
    a = [sim_seeds(42, m, 3) for m in range(5)]
    b = [sim_seeds(42, m, 3) for m in reversed(range(5))][::-1]
    assert a == b
    assert len({s for row in a for s in row}) == 15


# ground truth

def test_true_value_quadratic_constant():
    v = true_policy_value(DgpConfig(), Policy.constant(1.0))
    assert v == pytest.approx(2 * 7 / 3 - 0.6 * 1.5, abs=1e-4)
    assert v == pytest.approx(3.7667, abs=1e-4)


def test_true_value_zero_price():
    for form in bench.FORMS:
        assert true_policy_value(DgpConfig(form=form), Policy.constant(0.0)) == 0.0


def test_true_value_linear_identity_policy():
    # 6 E[z^2] - E[z^3] for z ~ U(1, 2)
    expected = 6 * 7 / 3 - 15 / 4
    cfg = DgpConfig(form="linear")
    assert true_policy_value(cfg, Policy.summary_linear(1.0)) == pytest.approx(expected, abs=1e-10)
    assert true_policy_value(cfg, Policy.linear([1.0, 0.0])) == pytest.approx(expected, abs=1e-10)
    mc = bench._mc_value(cfg, Policy.summary_linear(1.0), 10 ** 6, 1.0)
    assert mc == pytest.approx(expected, abs=0.01)


def test_high_dim_quadrature_matches_monte_carlo():
    cfg = DgpConfig(form="quadratic", regime="high")
    pi = Policy.sin(n_active=3)
    exact = true_policy_value(cfg, pi)
    mc = bench._mc_value(cfg, pi, 10 ** 6, 1.0)
    assert exact == pytest.approx(mc, abs=5e-3)
    assert expect_zbar(lambda t: 1.0, 3) == pytest.approx(1.0, abs=1e-10)
    assert expect_zbar(lambda t: t, 3) == pytest.approx(1.5, abs=1e-10)


def test_context_moments_low_dim():
    Eaz, Ebz, Ebzz, Ezz = context_moments(DgpConfig(form="linear"))
    # a = 6 z1, b = z1, z1 and z2 independent U(1, 2)
    np.testing.assert_allclose(Eaz, [6 * 7 / 3, 6 * 1.5 * 1.5], atol=1e-10)
    np.testing.assert_allclose(Ebz, [7 / 3, 2.25], atol=1e-10)
    np.testing.assert_allclose(Ezz, [[7 / 3, 2.25], [2.25, 7 / 3]], atol=1e-10)
    np.testing.assert_allclose(Ebzz[0, 0], 15 / 4, atol=1e-10)


@pytest.mark.parametrize("form", bench.FORMS)
def test_best_in_class_constant_beats_grid(form):
    cfg = DgpConfig(form=form)
    pi, val = best_in_class(cfg, "constant")
    for g in np.linspace(0.1, 5.0, 50):
        assert val >= true_policy_value(cfg, Policy.constant(g)) - 1e-9


def test_best_in_class_linear_is_stationary():
    cfg = DgpConfig(form="quadratic")
    pi, val = best_in_class(cfg, "linear")
    for d in np.eye(2) * 1e-3:
        for s in (1, -1):
            alt = Policy.linear(pi.params + s * d, action_low=0.1, action_high=5.0)
            assert val >= true_policy_value(cfg, alt, mc_draws=0) - 1e-9


def test_resource_best_in_class_is_closed_form():
    cfg = DgpConfig(application="resource-allocation", form="linear")
    pi, val = best_in_class(cfg, "multitask")
    Eaz, Ebz, _, Ezz = context_moments(cfg)
    T = np.vstack([Eaz, Ebz])
    assert val == pytest.approx(0.5 * np.trace(T @ np.linalg.solve(Ezz, T.T)), rel=1e-10)
    with pytest.raises(InvalidInputError):
        best_in_class(cfg, "constant")


# aggregation

def rec(sim, value, regret=None, policy="constant"):
    return ReplicationRecord(sim, "step", "low", policy, "dr", 1000, value, 1.0, regret)


def test_aggregate_example():
    stats = aggregate_stats([rec(i, v) for i, v in enumerate([1.0, 2.0, 3.0])])
    (cell,) = stats.values()
    assert (cell.mean, cell.std, cell.sims, cell.single) == (2.0, 1.0, 3, False)
    assert cell.mean_regret is None


def test_aggregate_single_record():
    (cell,) = aggregate_stats([rec(0, 4.5, 0.25)]).values()
    assert (cell.mean, cell.std, cell.single, cell.mean_regret, cell.std_regret) == (4.5, 0.0, True,
                                                                                      0.25, 0.0)


@given(st.lists(st.floats(-1e6, 1e6), min_size=2, max_size=40), st.randoms())
def test_aggregate_permutation_invariant(values, rnd):
    recs = [rec(i, v, v / 3) for i, v in enumerate(values)]
    shuffled = recs[:]
    rnd.shuffle(shuffled)
    assert aggregate_stats(recs) == aggregate_stats(shuffled)


def test_aggregate_matches_records():
    rng = random.Random(3)
    recs = [rec(i, rng.gauss(0, 1), policy=p) for p in ("a", "b") for i in range(30)]
    stats = aggregate_stats(recs)
    for key, cell in stats.items():
        vals = np.array([r.value for r in recs if r.cell == key])
        assert abs(cell.mean - vals.mean()) <= 1e-12
        assert abs(cell.std - vals.std(ddof=1)) <= 1e-12


# experiments

def test_evaluation_single_sim_cells_equal_records():
    res = run_evaluation_experiment(DgpConfig(form="step", n=400), sims=1, seed=3)
    assert len(res.cells) == 16 and not res.failures
    for r in res.records:
        cell = res.cells[r.cell]
        assert (cell.mean, cell.std, cell.single) == (r.value, 0.0, True)


def test_evaluation_oracle_unbiased():
    cfg = DgpConfig(form="sigmoid", n=2000)
    res = run_evaluation_experiment(cfg, estimators=["oracle"], sims=100, seed=11)
    for key, cell in res.cells.items():
        assert abs(cell.mean - cell.true_value) <= 3 * cell.std / math.sqrt(cell.sims), key


def test_evaluation_rejects_resource():
    with pytest.raises(InvalidInputError):
        run_evaluation_experiment(DgpConfig(application="resource-allocation"), sims=1)
    with pytest.raises(InvalidInputError):
        run_evaluation_experiment(DgpConfig(), sims=0)


def failing(every):
    real = bench._eval_sim

    def fn(task):
        if task[1] % every == 0:
            raise RuntimeError("injected")
        return real(task)
    return fn


def test_failures_below_threshold_keep_cells(monkeypatch):
    monkeypatch.setattr(bench, "_eval_sim", failing(20))
    res = run_evaluation_experiment(DgpConfig(n=300), estimators=["dr"], sims=20, seed=1)
    assert [f[1] for f in res.failures] == [0]
    assert res.partial_failure and not res.dropped
    assert all(c.sims == 19 for c in res.cells.values())


def test_failures_above_threshold_drop_cells(monkeypatch):
    monkeypatch.setattr(bench, "_eval_sim", failing(4))
    res = run_evaluation_experiment(DgpConfig(n=300), estimators=["dr"], sims=8, seed=1)
    assert len(res.failures) == 2
    assert res.cells == {} and len(res.dropped) == 4


def test_regret_reference_row_and_best_learner():
    cfg = DgpConfig(form="linear", n=2000)
    res = bench.run_regret_experiment(cfg, ["constant", "linear"], ["oracle"], sims=3, seed=2)
    for fam in ("constant", "linear"):
        ref = res.cells[("linear", "low", f"erm-{fam}", "best-in-class", 2000)]
        assert (ref.sims, ref.mean_regret) == (0, 0.0)
        assert ref.mean == best_in_class(cfg, fam)[1]
    pi, val = best_in_class(cfg, "constant")
    assert val - true_policy_value(cfg, pi) == 0.0


def test_regret_nonnegative_up_to_mc_error():
    cfg = DgpConfig(form="step", n=1000)
    res = bench.run_regret_experiment(cfg, "constant", ["dr", "direct"], sims=5, seed=4)
    assert all(r.regret >= -1e-9 for r in res.records)


def test_worker_count_env(monkeypatch):
    monkeypatch.setenv(bench.WORKERS_ENV, "3")
    assert bench.worker_count(BenchSettings()) == 3
    assert bench.worker_count(BenchSettings(workers=1)) == 1


def test_parallel_matches_serial():
    cfg = DgpConfig(form="quadratic", n=300)
    one = run_evaluation_experiment(cfg, estimators=["dr", "ips"], sims=4, seed=6,
                                    settings=BenchSettings(workers=1))
    two = run_evaluation_experiment(cfg, estimators=["dr", "ips"], sims=4, seed=6,
                                    settings=BenchSettings(workers=2))
    assert one.records == two.records and one.cells == two.cells


def test_generate_dispatch():
    syn = generate(DgpConfig(application="pricing-quadratic-revenue", n=10))
    assert syn.truth.cfg.application == "pricing-quadratic-revenue"
