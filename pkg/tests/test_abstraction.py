import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from layeredsim.abstraction import (ConfigurationError, build_partition, compute_transitions,
                                    load_or_compute, map_to_representative)
from layeredsim.model import Box, LtiModel


def _phi(z):
    return 0.5 * (1 + math.erf(z / math.sqrt(2)))


def parking_model(bw=1.0):
    return LtiModel([[0.9]], [[0.5]], [[bw]], [[1.0]], Box([-10.0], [10.0]), Box([-1.0], [1.0]))


INPUTS = np.linspace(-1, 1, 7)[:, None]


@pytest.fixture(scope="module")
def parking_abstract():
    m = parking_model()
    return compute_transitions(m, build_partition(m.state_box, 0.1), INPUTS)


def test_partition_examples():
    g = build_partition(Box([-10.0], [10.0]), 0.1)
    assert g.size == 200
    np.testing.assert_allclose(g.deviation_vertices(), [[-0.05], [0.05]])
    one = build_partition(Box([0.0], [1.0]), 1.0)
    assert one.size == 1 and one.center(0).tolist() == [0.5]
    two = build_partition(Box([0.0, 0.0], [1.0, 1.0]), 0.5)
    assert two.size == 4 and len(two.deviation_vertices()) == 4


def test_non_dividing_width():
    with pytest.raises(ConfigurationError):
        build_partition(Box([-10.0], [10.0]), 0.3)
    with pytest.raises(ConfigurationError):
        build_partition(Box([0.0], [1.0]), 0.0)


def test_projection_examples():
    g = build_partition(Box([-10.0], [10.0]), 0.1)
    assert map_to_representative(g, [-9.97])[0] == pytest.approx(-9.95)
    assert map_to_representative(g, [10.3]) is None
    assert g.cell_index([10.3]) == g.sink
    # shared faces belong to the upper cell, the top face to the last cell
    assert map_to_representative(g, [0.0])[0] == pytest.approx(0.05)
    assert map_to_representative(g, [10.0])[0] == pytest.approx(9.95)
    assert map_to_representative(g, [-10.0])[0] == pytest.approx(-9.95)
    for c in g.centers()[::17]:
        assert map_to_representative(g, c)[0] == pytest.approx(c[0])


@settings(max_examples=300, deadline=None)
@given(st.floats(-10, 10))
def test_snap_error_in_deviation_box(x):
    g = build_partition(Box([-10.0], [10.0]), 0.1)
    xh = g.project([x])
    assert xh is not None
    assert abs(xh[0] - x) <= 0.05 + 1e-12


def test_rows_are_distributions(parking_abstract):
    P = parking_abstract.P
    assert P.shape == (7, 201, 201)
    assert np.all(P >= 0) and np.all(P <= 1)
    np.testing.assert_allclose(P.sum(axis=2), 1.0, atol=1e-9)
    sink = parking_abstract.sink
    assert np.all(P[:, sink, sink] == 1.0)


def test_own_cell_oracle():
    m = parking_model(math.sqrt(0.5))
    g = build_partition(m.state_box, 0.1)
    s = g.cell_index([0.05])
    u = (0.05 - 0.9 * 0.05) / 0.5  # mean lands on the cell center
    ab = compute_transitions(m, g, [[u]])
    expect = _phi(0.05 / math.sqrt(0.5)) - _phi(-0.05 / math.sqrt(0.5))
    assert ab.P[0, s, s] == pytest.approx(expect, abs=1e-12)
    assert expect == pytest.approx(0.0564, abs=1e-4)


def test_cdf_matches_erf_oracle(parking_abstract):
    g = parking_abstract.grid
    rng = np.random.default_rng(1)
    for _ in range(20):
        s, k = int(rng.integers(200)), int(rng.integers(7))
        mean = 0.9 * g.center(s)[0] + 0.5 * INPUTS[k, 0]
        row = parking_abstract.P[k, s]
        for t in rng.integers(0, 200, 5):
            lo, hi = g.edges(0)[t], g.edges(0)[t + 1]
            assert row[t] == pytest.approx(_phi(hi - mean) - _phi(lo - mean), abs=1e-12)


def test_cdf_matches_monte_carlo(parking_abstract):
    g = parking_abstract.grid
    rng = np.random.default_rng(2)
    n = 1_000_000
    for _ in range(20):
        s, k = int(rng.integers(200)), int(rng.integers(7))
        x = 0.9 * g.center(s)[0] + 0.5 * INPUTS[k, 0] + rng.standard_normal(n)
        freq = np.bincount(g.cell_indices(x[:, None]), minlength=201) / n
        p = parking_abstract.P[k, s]
        t = int(np.argmax(p))
        se = math.sqrt(p[t] * (1 - p[t]) / n)
        assert abs(freq[t] - p[t]) <= 3 * se
        assert 0.5 * np.abs(freq - p).sum() < 0.01


def test_shift_equivariance():
    # identity dynamics: moving the start by one cell moves the row by one index
    m = LtiModel([[1.0]], [[1.0]], [[0.3]], [[1.0]], Box([0.0], [10.0]), Box([-1.0], [1.0]))
    g = build_partition(m.state_box, 0.5)
    P = compute_transitions(m, g, [[0.0]]).P[0]
    for s in range(5, 14):
        np.testing.assert_allclose(P[s + 1, 1:20], P[s, 0:19], atol=1e-12)


def test_deterministic_limit():
    m = LtiModel([[0.9]], [[0.5]], [[0.0]], [[1.0]], Box([-10.0], [10.0]), Box([-1.0], [1.0]))
    g = build_partition(m.state_box, 0.1)
    ab = compute_transitions(m, g, INPUTS)
    assert np.all((ab.P == 0) | (ab.P == 1))
    s = g.cell_index([3.05])
    t = g.cell_index([0.9 * 3.05 + 0.5])
    assert ab.P[6, s, t] == 1.0


def test_correlated_noise_uses_monte_carlo():
    m = LtiModel(np.eye(2) * 0.5, np.eye(2), [[0.3, 0.1], [0.1, 0.3]], np.eye(2),
                 Box([0.0, 0.0], [2.0, 2.0]), Box([-1.0, -1.0], [1.0, 1.0]))
    g = build_partition(m.state_box, 0.5)
    with pytest.warns(RuntimeWarning):
        ab = compute_transitions(m, g, [[0.5, 0.5]], mc_samples=20_000)
    assert ab.method == "monte-carlo"
    np.testing.assert_allclose(ab.P.sum(axis=2), 1.0, atol=1e-9)


def test_two_dimensional_rows():
    m = LtiModel(np.eye(2) * 0.5, np.eye(2), np.eye(2) * 0.4, np.eye(2),
                 Box([0.0, 0.0], [2.0, 2.0]), Box([-1.0, -1.0], [1.0, 1.0]))
    g = build_partition(m.state_box, 0.5)
    ab = compute_transitions(m, g, [[0.5, 0.5], [0.0, 0.0]])
    np.testing.assert_allclose(ab.P.sum(axis=2), 1.0, atol=1e-9)
    # product structure: row factorizes over the two axes
    c = g.center(5)
    mean = 0.5 * c + 0.5
    e0, e1 = g.edges(0), g.edges(1)
    px = [_phi((e0[i + 1] - mean[0]) / 0.4) - _phi((e0[i] - mean[0]) / 0.4) for i in range(4)]
    py = [_phi((e1[j + 1] - mean[1]) / 0.4) - _phi((e1[j] - mean[1]) / 0.4) for j in range(4)]
    np.testing.assert_allclose(ab.P[0, 5, :16], np.outer(px, py).ravel(), atol=1e-12)


def test_cache_roundtrip(tmp_path):
    m = parking_model()
    g = build_partition(m.state_box, 0.1)
    path = tmp_path / "transitions.npz"
    first, hit = load_or_compute(m, g, INPUTS, path)
    assert not hit and path.exists()
    second, hit = load_or_compute(m, g, INPUTS, path)
    assert hit and second.checksum() == first.checksum()
    # different model invalidates the cache
    third, hit = load_or_compute(parking_model(0.5), g, INPUTS, path)
    assert not hit and third.checksum() != first.checksum()
