import csv
import math

import numpy as np
import pytest

from seqrecourse import autodiff as ad
from seqrecourse.actions import catalog_from_json, check_feasible, sequence_cost
from seqrecourse.cwopt import (CWConfig, build_objective, hinge, optimize, update_schedule)
from seqrecourse.nnmodel import model_from_json

CFG = CWConfig()

SCHEDULE_TABLE = [
    # (c, t, h_now, ever_reached) -> (c', t')
    ((1e5, 100, 0.0, False), (1e4, 200)),
    ((1e5, 100, 0.0, True), (1e4, 200)),
    ((1e5, 100, 0.3, False), (2e5, 100)),
    ((1e5, 100, 0.3, True), (2e5, 50)),
    ((1e10, 100, 0.3, True), (1e10, 50)),
    ((6e9, 7, 1.0, False), (1e10, 7)),
    ((1e-5, 100, 0.0, True), (1e-5, 200)),
    ((5e-5, 3, 0.0, False), (1e-5, 6)),
    ((1.0, 1, 2.0, True), (2.0, 1)),
    ((1.0, 3, 2.0, True), (2.0, 1)),
    ((1.0, 5, 2.0, True), (2.0, 2)),
]


@pytest.mark.parametrize("state, expected", SCHEDULE_TABLE)
def test_update_schedule_table(state, expected):
    assert update_schedule(*state, CFG) == expected


def test_config_validation():
    with pytest.raises(ValueError):
        CWConfig(c_init=1e11)
    with pytest.raises(ValueError):
        CWConfig(lr=0)
    with pytest.raises(ValueError):
        CWConfig(beta1=1.0)


def fixed_logit_model(g0, g1):
    return model_from_json({"schema": {"features": [
        {"name": "x", "kind": "numeric", "domain": [0, 10], "norm": {"mean": 0, "std": 1}}]},
        "layers": [{"shape": [2, 1], "weights": [[0.0], [0.0]], "bias": [g0, g1], "activation": "linear"}]})


def test_hinge_examples():
    assert hinge(fixed_logit_model(3.0, 1.0), [1.0]) == 2.0
    assert hinge(fixed_logit_model(1.0, 3.0), [1.0]) == 0.0


def test_objective_equals_relaxed_cost_when_flipped():
    m = fixed_logit_model(1.0, 3.0)
    cat = catalog_from_json([{"name": "Shift", "params": 1, "transforms": [{"feature": "x", "expr": "x[x] + p[0]"}],
                              "cost_expr": "abs(p[0])", "precondition_expr": "x[x] + p[0] < 10"}], m.schema)
    obj = build_objective(m, cat, [0], [3.0])
    obj.evaluate(1e5, [1.5])
    ok, flipped, cost, h, val = obj.status()
    assert h == 0.0 and flipped and ok and cost == 1.5
    assert val == sequence_cost(cat, cat.sequence([0], [(1.5,)]), [3.0]).relaxed_cost


def test_build_objective_requires_actions(toy1):
    m, cat, x0 = toy1
    with pytest.raises(ValueError):
        build_objective(m, cat, [], x0)


def test_full_objective_gradient_check(toy3):
    m, cat, x0 = toy3
    rng = np.random.default_rng(0)
    obj = build_objective(m, cat, [0, 2, 1], x0)
    for _ in range(20):
        b = {"c": rng.uniform(0.1, 50), "0.0": rng.uniform(-1, 4), "2.0": rng.uniform(-1, 3)}
        rep = ad.grad_check(obj.tape, obj.root, b, step=1e-6, tol=1e-4)
        assert rep.passed, rep.failures()


def test_toy_optimum_close_to_oracle(toy1):
    m, cat, x0 = toy1
    res = optimize(m, cat, [0], x0)
    assert res.feasible and res.flipped and res.preconds_ok
    assert 2.0 < res.rho_star[0][0] < 2.0 * 1.05
    assert res.exact_cost == abs(res.rho_star[0][0])
    assert res.objective == pytest.approx(res.c * res.h_value + res.relaxed_cost, abs=1e-9)


def test_capped_domain_never_flips():
    m = model_from_json({"schema": {"features": [
        {"name": "x", "kind": "numeric", "domain": [0, 10], "norm": {"mean": 0, "std": 1}}]},
        "layers": [{"shape": [2, 1], "weights": [[0.0], [1.0]], "bias": [0.0, -5.0], "activation": "linear"}]})
    cat = catalog_from_json([{"name": "Shift", "params": 1, "transforms": [{"feature": "x", "expr": "x[x] + p[0]"}],
                              "cost_expr": "abs(p[0])",
                              "precondition_expr": "x[x] + p[0] > 0 && x[x] + p[0] < 4"}], m.schema)
    res = optimize(m, cat, [0], [3.0], CWConfig(max_iters=2000))
    assert not res.feasible
    assert res.h_value > 0 or not res.preconds_ok


def test_best_seen_trace_is_monotone(toy3):
    m, cat, x0 = toy3
    res = optimize(m, cat, [1, 0], x0, rho_init=[(3.9,), (1.2,)])
    keys = [k for _, k in res.best_trace]
    assert all(b < a for a, b in zip(keys, keys[1:]))
    assert res.best_trace[0][1][0] == 0  # initial point already flips
    assert res.feasible


def test_determinism_bitwise(toy3):
    m, cat, x0 = toy3
    a = optimize(m, cat, [0, 1], x0, CWConfig(seed=3, init_jitter=0.1))
    b = optimize(m, cat, [0, 1], x0, CWConfig(seed=3, init_jitter=0.1))
    assert a.rho_star == b.rho_star and a.trace == b.trace and a.best_trace == b.best_trace


def test_flipped_results_reevaluate(toy3):
    m, cat, x0 = toy3
    for sigma in ([1], [0, 1], [2, 1], [1, 0]):
        res = optimize(m, cat, sigma, x0)
        if res.flipped:
            seq = cat.sequence(sigma, res.rho_star)
            fz = check_feasible(cat, seq, x0, m)
            assert fz.flipped == res.flipped and fz.feasible == res.feasible


def test_larger_fixed_c_never_raises_h(toy1):
    m, cat, x0 = toy1
    hs = []
    for c in (0.05, 0.5, 2.0, 10.0, 100.0):
        res = optimize(m, cat, [0], x0, CWConfig(c_init=c, c_min=c, c_max=c, max_iters=3000))
        hs.append(res.h_value)
    assert all(b <= a + 1e-9 for a, b in zip(hs, hs[1:])), hs


def test_categorical_only_sequence(toy3):
    m, cat, x0 = toy3
    res = optimize(m, cat, [2], x0)
    assert res.iterations == 0 and res.rho_star == ((),)
    assert not res.flipped and res.exact_cost == 1.5


def test_abort_keeps_best_so_far(toy1):
    m, _, x0 = toy1
    # the hinge pulls p towards 2, where the cost leaves the log domain
    cat = catalog_from_json([{"name": "Risky", "params": 1, "transforms": [{"feature": "x", "expr": "x[x] + p[0]"}],
                              "cost_expr": "log(2 - p[0]) + 1"}], m.schema, probe=False)
    res = optimize(m, cat, [0], x0, CWConfig(lr=0.5))
    assert res.aborted and "log" in res.diagnostic
    assert 1.0 < res.rho_star[0][0] < 2.0
    assert math.isfinite(res.exact_cost) and not res.flipped


def test_first_evaluation_failure_raises(toy1):
    m, _, x0 = toy1
    cat = catalog_from_json([{"name": "Bad", "params": 1, "transforms": [{"feature": "x", "expr": "x[x] + p[0]"}],
                              "cost_expr": "log(p[0])"}], m.schema, probe=False)
    with pytest.raises(ArithmeticError):
        optimize(m, cat, [0], x0)


def test_trace_csv(tmp_path, toy1):
    m, cat, x0 = toy1
    res = optimize(m, cat, [0], x0)
    p = tmp_path / "trace.csv"
    res.write_trace_csv(p)
    rows = list(csv.DictReader(open(p)))
    assert rows[0]["iter"] == "0" and len(rows) == len(res.trace)
    assert float(rows[0]["c"]) == CFG.c_init


def test_rho_init_shape_checked(toy3):
    m, cat, x0 = toy3
    with pytest.raises(ValueError):
        optimize(m, cat, [0, 1], x0, rho_init=[(1.0,)])
