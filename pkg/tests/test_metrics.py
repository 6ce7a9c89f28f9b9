import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from csaddle.errors import IncomparableTraces, InsufficientData
from csaddle.graph import spectral
from csaddle.metrics import (
    COLUMNS, RunTrace, comm_savings, conservation_check, consensus_decomposition, fit_linear_rate, median_trace,
    residual_sq,
)

from conftest import random_graph


def trace_of(values, **extra):
    rows = []
    for k, v in enumerate(values):
        row = dict.fromkeys(COLUMNS)
        row.update(k=k, residual_sq=float(v), comm_entries_cum=0, comm_bits_cum=0)
        row.update({key: val[k] if hasattr(val, "__len__") else val for key, val in extra.items()})
        rows.append(row)
    return RunTrace(rows)


def test_residual_examples():
    assert residual_sq(np.tile([1.0, 2.0], (3, 1)), [1.0, 2.0]) == 0.0
    assert residual_sq([1.0, 3.0], [2.0]) == 2.0


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 10**6))
def test_residual_matches_loop(seed):
    rng = np.random.default_rng(seed)
    n, d = rng.integers(1, 8, size=2)
    X, xs = rng.standard_normal((n, d)), rng.standard_normal(d)
    total = 0.0
    for i in range(n):
        for j in range(d):
            total += (X[i, j] - xs[j]) ** 2
    assert residual_sq(X.reshape(-1), xs) == pytest.approx(total, abs=1e-12)


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 10**6), n=st.integers(2, 9), d=st.integers(1, 5))
def test_pythagoras(seed, n, d):
    rng = np.random.default_rng(seed)
    sd = spectral(random_graph(seed, n))
    X, xs = rng.standard_normal((n, d)), rng.standard_normal(d)
    parts = consensus_decomposition(X, xs, sd)
    assert parts["perp_norm"] ** 2 + parts["par_norm"] ** 2 == pytest.approx(residual_sq(X, xs), abs=1e-10)


def test_decomposition_edge_cases():
    sd = spectral(random_graph(1, 5))
    xs = np.array([1.0, -2.0])
    assert consensus_decomposition(np.tile([3.0, 4.0], (5, 1)), xs, sd)["perp_norm"] <= 1e-12
    E = sd.basis_S @ np.random.default_rng(0).standard_normal((4, 2))
    assert consensus_decomposition(E + xs, xs, sd)["par_norm"] <= 1e-12


def test_fit_exact_geometric():
    rep = fit_linear_rate(trace_of(0.9 ** np.arange(200)))
    assert rep.beta_hat == pytest.approx(0.9, abs=1e-6)
    assert rep.r_squared == pytest.approx(1.0)
    assert not rep.floor_detected


def test_fit_constant_trace():
    rep = fit_linear_rate(trace_of(np.full(100, 3.0)))
    assert rep.beta_hat == pytest.approx(1.0) and not rep.converging


def test_fit_noisy_trace_within_two_percent():
    rng = np.random.default_rng(3)
    vals = 0.95 ** np.arange(400) * (1 + 1e-3 * rng.standard_normal(400))
    assert fit_linear_rate(trace_of(vals)).beta_hat == pytest.approx(0.95, rel=0.02)


def test_fit_stops_at_floor():
    vals = np.maximum(0.5 ** np.arange(300), 1e-40)
    rep = fit_linear_rate(trace_of(vals))
    assert rep.floor_detected
    assert rep.beta_hat == pytest.approx(0.5, rel=1e-9)
    # floor = 1e3 eps^2: first record below it ends the window
    assert rep.window[1] < np.flatnonzero(vals < 1e3 * np.finfo(float).eps ** 2)[0]


def test_fit_window_starts_at_ten_percent():
    rep = fit_linear_rate(trace_of(0.99 ** np.arange(1000)))
    assert rep.window[0] == 100


def test_fit_needs_enough_points():
    with pytest.raises(InsufficientData):
        fit_linear_rate(trace_of(0.9 ** np.arange(20)))


def test_conservation_detects_bump():
    drift = np.zeros(20)
    drift[5:] = 0.3
    check = conservation_check(trace_of(np.ones(20), sum_lambda_drift=drift))
    assert check["max_lambda_drift"] == pytest.approx(0.3)
    assert check["max_z_drift"] is None


def cum_trace(per_round, rounds):
    return trace_of(np.ones(rounds + 1), comm_entries_cum=per_round * np.arange(rounds + 1),
                    comm_bits_cum=64 * per_round * np.arange(rounds + 1))


def test_comm_savings_examples():
    ident = cum_trace(2 * 5, 50)
    assert comm_savings(ident, ident) == {"entries": 1.0, "bits": 1.0}
    assert comm_savings(cum_trace(2 * 1, 50), ident)["entries"] == pytest.approx(0.2)
    assert comm_savings(cum_trace(2 * 2, 50), cum_trace(2 * 4, 50))["entries"] == pytest.approx(0.5)


def test_comm_savings_needs_equal_length():
    with pytest.raises(IncomparableTraces):
        comm_savings(cum_trace(1, 10), cum_trace(1, 11))


def test_median_trace():
    a, b, c = (trace_of(v * 0.9 ** np.arange(60)) for v in (1.0, 2.0, 5.0))
    np.testing.assert_allclose(median_trace([a, b, c]).column("residual_sq"), 2.0 * 0.9 ** np.arange(60))
