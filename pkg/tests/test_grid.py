import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from flowdispatch.grid import (
    DisconnectedGridError,
    Generator,
    GridError,
    Line,
    PowerSystem,
    build_case30,
    compute_ptdf,
    cost,
    line_flows,
    load_case,
    marginal_cost,
)

# Generator table as printed: bus, p_min, p_max, c2, c1.
TABLE = [
    (1, 50.0, 200.0, 0.002, 2.00),
    (2, 20.0, 80.0, 0.0175, 1.75),
    (5, 15.0, 50.0, 0.0625, 1.00),
    (8, 10.0, 35.0, 0.00834, 3.25),
    (11, 10.0, 30.0, 0.025, 3.00),
    (13, 12.0, 40.0, 0.025, 3.00),
]


def table_cost(p):
    total = 0.0
    for (_, _, _, c2, c1), x in zip(TABLE, p):
        total += c2 * x * x + c1 * x
    return total


@pytest.fixture(scope="module")
def case30():
    return build_case30()


def test_case30_dimensions(case30):
    assert case30.n_buses == 30
    assert case30.n_lines == 41
    assert case30.n_generators == 6
    assert case30.slack_bus == 0
    assert case30.is_connected()
    assert case30.base_load.sum() == pytest.approx(283.4)


def test_case30_generators_match_table(case30):
    for g, (bus, lo, hi, c2, c1) in zip(case30.generators, TABLE):
        assert (g.bus + 1, g.p_min, g.p_max, g.c2, g.c1, g.c0) == (bus, lo, hi, c2, c1, 0.0)
    g3 = case30.generators[2]
    assert (g3.bus + 1, g3.p_min, g3.p_max, g3.c2, g3.c1) == (5, 15.0, 50.0, 0.0625, 1.00)


def test_capacity_sums(case30):
    assert case30.p_max.sum() == pytest.approx(435.0)
    assert case30.p_min.sum() == pytest.approx(117.0)
    assert case30.p_min.sum() <= 0.70 * case30.base_load.sum()
    assert case30.p_max.sum() >= 1.30 * case30.base_load.sum()


def test_cost_examples(case30):
    assert cost(case30, case30.p_min) == pytest.approx(281.4965, abs=1e-9)
    assert cost(case30, case30.p_min) == pytest.approx(table_cost([t[1] for t in TABLE]), rel=1e-14)
    assert cost(case30, case30.p_max) == pytest.approx(table_cost([t[2] for t in TABLE]), rel=1e-14)
    assert cost(case30, np.zeros(6)) == 0.0


def test_cost_batched(case30):
    p = np.stack([case30.p_min, case30.p_max])
    np.testing.assert_allclose(cost(case30, p), [cost(case30, case30.p_min), cost(case30, case30.p_max)])


def test_length_mismatch(case30):
    with pytest.raises(GridError):
        cost(case30, np.zeros(5))
    with pytest.raises(GridError):
        marginal_cost(case30, np.zeros(7))


def test_marginal_cost_examples(case30):
    assert marginal_cost(case30, np.array([100.0, 0, 0, 0, 0, 0]))[0] == pytest.approx(2.40)
    assert marginal_cost(case30, np.zeros(6))[2] == pytest.approx(1.00)
    assert marginal_cost(case30, np.full(6, 12.0))[5] == pytest.approx(3.60)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-300, 300), min_size=6, max_size=6))
def test_marginal_cost_is_derivative(p):
    system = build_case30()
    p = np.array(p)
    mc = marginal_cost(system, p)
    for i in range(6):
        # Central differences are exact for quadratics; a wide step keeps roundoff small.
        h = 1.0
        e = np.zeros(6)
        e[i] = h
        fd = (cost(system, p + e) - cost(system, p - e)) / (2 * h)
        assert abs(fd - mc[i]) <= 1e-10 * max(1.0, abs(mc[i]))


@settings(max_examples=50, deadline=None)
@given(
    st.lists(st.floats(-500, 500), min_size=6, max_size=6),
    st.lists(st.floats(-500, 500), min_size=6, max_size=6),
)
def test_cost_strictly_convex(a, b):
    system = build_case30()
    a, b = np.array(a), np.array(b)
    if np.allclose(a, b, atol=1e-3):
        return
    mid = cost(system, 0.5 * (a + b))
    assert mid < 0.5 * (cost(system, a) + cost(system, b))


def _two_bus():
    return PowerSystem(
        2, (Generator(1, 0, 0.0, 10.0, 1.0, 1.0),), (Line(0, 1, 0.1),), np.zeros(2), slack_bus=0
    )


def _triangle():
    return PowerSystem(
        3,
        (Generator(1, 0, 0.0, 10.0, 1.0, 1.0),),
        (Line(0, 1, 0.2), Line(1, 2, 0.2), Line(0, 2, 0.2)),
        np.zeros(3),
        slack_bus=0,
    )


def test_ptdf_two_bus():
    ptdf = compute_ptdf(_two_bus())
    np.testing.assert_allclose(ptdf, [[0.0, -1.0]])


def test_ptdf_triangle_split():
    ptdf = compute_ptdf(_triangle())
    # Brute force: angles from the reduced Laplacian with unit injection at bus 2.
    b = 1 / 0.2
    lap = np.array([[2 * b, -b, -b], [-b, 2 * b, -b], [-b, -b, 2 * b]])
    theta = np.zeros(3)
    theta[1:] = np.linalg.solve(lap[1:, 1:], np.array([1.0, 0.0]))
    flows = [b * (theta[0] - theta[1]), b * (theta[1] - theta[2]), b * (theta[0] - theta[2])]
    np.testing.assert_allclose(ptdf[:, 1], flows, atol=1e-12)
    np.testing.assert_allclose(ptdf[:, 1], [-2 / 3, 1 / 3, -1 / 3], atol=1e-12)


def test_ptdf_slack_column_zero(case30):
    ptdf = compute_ptdf(case30)
    assert ptdf.shape == (41, 30)
    assert np.all(ptdf[:, case30.slack_bus] == 0)


def test_ptdf_disconnected():
    system = PowerSystem(
        3, (Generator(1, 0, 0.0, 1.0, 1.0, 1.0),), (Line(0, 1, 0.1),), np.zeros(3), slack_bus=0
    )
    with pytest.raises(DisconnectedGridError):
        compute_ptdf(system)


def test_line_flows_trivial(case30):
    ptdf = compute_ptdf(case30)
    np.testing.assert_array_equal(line_flows(ptdf, case30, np.zeros(6), np.zeros(30)), np.zeros(41))
    # Injection only at the slack bus (generator 1 sits on bus 1).
    only_slack = np.array([100.0, 0, 0, 0, 0, 0])
    np.testing.assert_allclose(line_flows(ptdf, case30, only_slack, np.zeros(30)), 0.0, atol=1e-12)
    with pytest.raises(GridError):
        line_flows(ptdf, case30, np.zeros(6), np.zeros(29))


def test_line_flows_kirchhoff(case30):
    # Net flow out of every non-slack bus equals its injection.
    from flowdispatch.oracle import solve_economic_dispatch

    ptdf = compute_ptdf(case30)
    sol = solve_economic_dispatch(case30, case30.base_load)
    flows = line_flows(ptdf, case30, sol.dispatch, case30.base_load)
    assert np.all(np.isfinite(flows))
    inj = case30.gen_incidence @ sol.dispatch - case30.base_load
    out = case30.branch_incidence.T @ flows
    np.testing.assert_allclose(out[1:], inj[1:], atol=1e-9)


@settings(max_examples=25, deadline=None)
@given(st.floats(-3, 3), st.floats(-3, 3), st.integers(0, 10_000))
def test_flows_are_linear(alpha, beta, seed):
    system = build_case30()
    ptdf = compute_ptdf(system)
    rng = np.random.default_rng(seed)
    x = rng.normal(size=30)
    y = rng.normal(size=30)
    zero = np.zeros(6)
    lhs = line_flows(ptdf, system, zero, -(alpha * x + beta * y))
    rhs = alpha * line_flows(ptdf, system, zero, -x) + beta * line_flows(ptdf, system, zero, -y)
    np.testing.assert_allclose(lhs, rhs, atol=1e-10)


def test_invalid_components():
    with pytest.raises(GridError):
        Generator(1, 0, 10.0, 10.0, 1.0, 1.0)
    with pytest.raises(GridError):
        Generator(1, 0, 0.0, 10.0, 0.0, 1.0)
    with pytest.raises(GridError):
        Line(1, 1, 0.1)
    with pytest.raises(GridError):
        Line(0, 1, 0.0)


def test_case_file_roundtrip(tmp_path, case30):
    doc = {
        "name": "tiny",
        "slack_bus": 10,
        "buses": [{"id": 10, "load_mw": 0.0}, {"id": 20, "load_mw": 5.0}],
        "lines": [{"from": 10, "to": 20, "x": 0.1, "limit_mw": 50.0}],
        "generators": [{"bus": 20, "p_min": 1, "p_max": 9, "c2": 0.1, "c1": 1.0}],
    }
    path = tmp_path / "tiny.json"
    path.write_text(json.dumps(doc))
    system = load_case(path)
    assert system.n_buses == 2 and system.slack_bus == 0
    assert system.generators[0].bus == 1
    assert system.lines[0].flow_limit == 50.0
    doc["lines"][0]["to"] = 99
    path.write_text(json.dumps(doc))
    with pytest.raises(GridError):
        load_case(path)
