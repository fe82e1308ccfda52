import csv
import math
import os
import subprocess
import sys

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from layeredsim import _pykernel
from layeredsim import pipeline as pl
from layeredsim.dp import value_iteration
from layeredsim.refine import (BACKENDS, RefinedController, check_relation_containment,
                               coupling_failure_rate, monte_carlo_satisfaction, sample_coupled_noise,
                               step_closed_loop, tv_gaussian_shift, write_summary)
from layeredsim.scltl import formula_to_dfa, parse_scltl

compiled = pytest.mark.skipif("compiled" not in BACKENDS, reason="compiled kernel not built")


@pytest.fixture(scope="module")
def controller(parking):
    syn = parking["runs"]["layered"]
    return RefinedController(parking["model"], syn.problem, syn.result, pl.shifts_from(parking["certs"]), syn.D)


def test_zero_shift_always_couples(rng):
    for _ in range(500):
        w, wh, c = sample_coupled_noise([0.0], rng)
        assert c and np.array_equal(w, wh)


def test_huge_shift_never_couples():
    p, se = coupling_failure_rate([20.0], 20_000, seed=3)
    assert p > 0.999
    assert tv_gaussian_shift(20.0) == pytest.approx(1.0)


@pytest.mark.parametrize("gamma", [[0.7], [0.3, -0.4]])
def test_coupling_marginals(gamma):
    n = 40_000
    for name in BACKENDS:
        fails, sw, sww, sh, shh = BACKENDS[name].coupling_failures(np.array(gamma), n, 11)
        se = 1 / math.sqrt(n)
        assert np.all(np.abs(sw / n) < 4 * se)
        assert np.all(np.abs(sh / n - gamma) < 4 * se)
        # variance of a unit normal estimate has SE about sqrt(2/n)
        assert np.all(np.abs(sww / n - (sw / n) ** 2 - 1) < 4 * math.sqrt(2 / n))
        assert np.all(np.abs(shh / n - (sh / n) ** 2 - 1) < 4 * math.sqrt(2 / n))
        tv = tv_gaussian_shift(float(np.linalg.norm(gamma)))
        assert abs(fails / n - tv) < 4 * math.sqrt(tv * (1 - tv) / n)


def test_uncoupled_draws_differ(rng):
    seen = 0
    for _ in range(300):
        w, wh, c = sample_coupled_noise([1.5], rng)
        if not c:
            seen += 1
            assert not np.array_equal(w, wh)
    assert seen > 0
    with pytest.raises(ValueError):
        sample_coupled_noise([math.nan], rng)


def test_containment_examples():
    assert check_relation_containment([4.0], [4.05], [[1.0]], 0.1984)
    assert not check_relation_containment([4.0], [4.51], [[1.0]], 0.5)
    assert check_relation_containment([4.0], [4.5], [[1.0]], 0.5)


@settings(max_examples=300, deadline=None)
@given(st.floats(-10, 10))
def test_snap_within_half_cell(controller, x):
    center = [0.0]
    s = _pykernel.cell_of(controller.data, [x], center)
    assert s != controller.data.sink
    # half a cell, plus the edge-snap tolerance of 1e-9 cell widths
    assert abs(x - center[0]) <= 0.05 + 1e-9 * 0.1 + 1e-15
    assert s == controller.problem.abstract.grid.cell_index([x])


def test_outside_box_is_sink(controller):
    assert _pykernel.cell_of(controller.data, [10.2], [0.0]) == controller.data.sink
    assert _pykernel.cell_of(controller.data, [-10.0001], [0.0]) == controller.data.sink


def _error_residuals(controller, x0, seed, horizon=60):
    """|e+ - (A + Bw F_ij) e| along a trace, for steps without resynchronisation."""
    m = controller.model
    rng = _pykernel.trace_rng(seed, 0)
    prev = controller.reset(x0)
    out = []
    for _ in range(horizon):
        st_ = controller.state
        if controller.data.accepting[st_.q] or controller.data.dead[st_.q]:
            break
        s, q, i = st_.s, st_.q, st_.i
        j = int(controller.result.policy_s[s, q, i])
        x, rec = step_closed_loop(controller, rng)
        if rec.violated:
            break
        e = np.subtract(prev.x, prev.x_hat)
        e_next = np.subtract(rec.x, rec.x_hat)
        if rec.coupled:
            Acl = m.A + m.Bw @ controller.F[i, j]
            out.append(float(np.linalg.norm(e_next - Acl @ e)))
        prev = rec
    return out


def test_coupled_error_contracts(controller):
    res = []
    for seed in range(20):
        res += _error_residuals(controller, [-6.0], seed)
    assert len(res) > 100
    assert max(res) <= 0.05 + 1e-9   # only the snap to the cell center remains


def test_zero_shift_error_dynamics(parking):
    syn = parking["runs"]["layered"]
    ctl = RefinedController(parking["model"], syn.problem, syn.result,
                            {pq: np.zeros((1, 1)) for pq in parking["certs"]}, syn.D)
    res = []
    for seed in range(10):
        res += _error_residuals(ctl, [-3.0], seed)
    assert len(res) > 50 and max(res) <= 0.05 + 1e-9


def test_records_track_relation(controller, rng):
    tr = controller.trace([-4.0], rng, 200)
    assert tr.records[0].t == 0 and tr.records[0].u is None
    assert [r.t for r in tr.records] == list(range(len(tr.records)))
    assert all(r.in_relation for r in tr.records if not r.violated)
    assert tr.verdict in {"accepted", "rejected", "horizon-exhausted", "relation-violated"}


@compiled
def test_backends_bit_identical(controller):
    for x0 in ([-9.0], [4.0], [0.3]):
        a = BACKENDS["python"].simulate_batch(controller.data, np.array(x0), 150, 200, 42)
        b = BACKENDS["compiled"].simulate_batch(controller.data, np.array(x0), 150, 200, 42)
        for u, v in zip(a, b):
            assert np.array_equal(u, v)
    ga = BACKENDS["python"].coupling_failures(np.array([0.4]), 5000, 9)
    gb = BACKENDS["compiled"].coupling_failures(np.array([0.4]), 5000, 9)
    assert ga[0] == gb[0] and all(np.array_equal(u, v) for u, v in zip(ga[1:], gb[1:]))


def test_stateful_trace_matches_batch(controller):
    verdicts = []
    for r in range(30):
        tr = controller.trace([-2.0], _pykernel.trace_rng(5, r), 200)
        verdicts.append(tr.accepted)
    v, steps, *_ = BACKENDS["python"].simulate_batch(controller.data, np.array([-2.0]), 30, 200, 5)
    assert verdicts == list(v == _pykernel.ACCEPTED)


def test_terminal_initial_states(controller):
    assert monte_carlo_satisfaction(controller, [5.5], 200, 50, 0).p_hat == 1.0
    assert monte_carlo_satisfaction(controller, [8.0], 200, 50, 0).p_hat == 0.0


def test_trivial_formula_always_accepted(parking):
    cfg = parking["cfg"]
    dfa = formula_to_dfa(parse_scltl("true", ("P1", "P2")), ("P1", "P2"))
    prob = pl.layered_problem(cfg, parking["abstract"], dfa, parking["labeling"], parking["relation"])
    res = value_iteration(prob, pl.strategy_for(cfg, prob))
    ctl = RefinedController(parking["model"], prob, res, pl.shifts_from(parking["certs"]), parking["relation"].D)
    out = monte_carlo_satisfaction(ctl, [-9.0], 500, 10, 1)
    assert out.p_hat == 1.0 and out.ci_halfwidth == 0.0 and out.mean_steps == 0.0


def test_bound_holds_statistically(controller, parking):
    syn = parking["runs"]["layered"]
    from layeredsim.dp import robust_satisfaction
    bound = robust_satisfaction(syn.problem, syn.result.V, [4.0], parking["model"].C, syn.D)
    out = monte_carlo_satisfaction(controller, [4.0], 3000, 200, 77)
    assert out.p_hat + 3 * out.std_error >= bound
    assert out.runs == 3000 and out.horizon == 200 and out.seed == 77


def test_reproducible_and_seed_sensitive(controller):
    a = monte_carlo_satisfaction(controller, [-1.0], 400, 200, 123)
    b = monte_carlo_satisfaction(controller, [-1.0], 400, 200, 123)
    c = monte_carlo_satisfaction(controller, [-1.0], 400, 200, 124)
    assert a == b and c.seed == 124
    assert (a.p_hat, a.mean_steps) != (c.p_hat, c.mean_steps)
    with pytest.raises(ValueError):
        monte_carlo_satisfaction(controller, [-1.0], 0, 200, 0)


def test_missing_shift_matrix(parking):
    syn = parking["runs"]["layered"]
    with pytest.raises(ValueError, match="no shift matrix"):
        RefinedController(parking["model"], syn.problem, syn.result, {}, syn.D)


def test_trace_csv(controller, tmp_path):
    tr = controller.trace([-4.0], _pykernel.trace_rng(0, 0), 200)
    path = tmp_path / "trace.csv"
    tr.write_csv(path)
    rows = list(csv.reader(path.open()))
    assert rows[0] == ["t", "x", "x_hat", "q", "layer", "u", "coupled", "in_relation"]
    assert rows[-1] == ["# verdict", tr.verdict]
    assert len(rows) == len(tr.records) + 2
    assert {r[4] for r in rows[1:-1]} <= {"1", "2"}
    assert float(rows[1][1]) == -4.0


def test_summary_file(controller, tmp_path):
    res = monte_carlo_satisfaction(controller, [0.0], 100, 200, 2)
    path = tmp_path / "s.csv"
    write_summary(path, [(np.array([0.0]), 0.25, res)])
    rows = list(csv.reader(path.open()))
    assert rows[0] == ["x0", "robust_lower_bound", "p_hat", "ci_halfwidth", "runs", "horizon", "seed"]
    assert rows[1][0] == "0.0" and float(rows[1][2]) == res.p_hat and rows[1][4:] == ["100", "200", "2"]


def _backend_in_subprocess(value):
    env = dict(os.environ, LAYEREDSIM_BACKEND=value)
    return subprocess.run([sys.executable, "-c", "from layeredsim.refine import default_backend as d; print(d())"],
                          env=env, capture_output=True, text=True)


def test_backend_override():
    out = _backend_in_subprocess("python")
    assert out.returncode == 0 and out.stdout.strip() == "python"
    bad = _backend_in_subprocess("fortran")
    assert bad.returncode != 0 and "unavailable" in bad.stderr


def test_benchmark_script_runs(capsys):
    import runpy
    mod = runpy.run_path(os.path.join(os.path.dirname(__file__), "..", "benchmarks", "bench_mc.py"))
    mod["main"](["--runs", "50", "--repeat", "1"])
    out = capsys.readouterr().out
    assert "python" in out
    if "compiled" in BACKENDS:
        assert "traces identical: True" in out
