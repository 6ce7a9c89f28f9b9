from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from csaddle import compressors as comp
from csaddle.compressors import (
    BUILTIN_KINDS, CompressorSpec, compress, compress_rows, documented_bound, new_state, parse_spec,
    transmit_size, verify_st_contract,
)
from csaddle.errors import InvalidSpec, NumericalError

SPECS = [CompressorSpec(kind, k=2) if kind == "top_k" else CompressorSpec(kind) for kind in BUILTIN_KINDS]
IDS = [s.label() for s in SPECS]

finite = st.floats(-1e6, 1e6, allow_nan=False)


def test_identity_passes_through():
    x = np.array([3.0, -1.0, 2.0])
    y, _ = compress(CompressorSpec("identity"), new_state(CompressorSpec("identity"), 3), x)
    np.testing.assert_array_equal(y, x)


def test_top1_keeps_largest():
    spec = CompressorSpec("top_k", k=1)
    y, _ = compress(spec, new_state(spec, 3), [3.0, -1.0, 2.0])
    np.testing.assert_array_equal(y, [3.0, 0.0, 0.0])


def test_top_k_ties_go_to_lowest_index():
    spec = CompressorSpec("top_k", k=2)
    y, _ = compress(spec, new_state(spec, 4), [1.0, -2.0, 2.0, 2.0])
    np.testing.assert_array_equal(y, [0.0, -2.0, 2.0, 0.0])


def test_scalarized_first_round_picks_first_coordinate():
    spec = CompressorSpec("scalarized")
    state = new_state(spec, 3)
    outs = []
    for _ in range(4):
        y, state = compress(spec, state, [3.0, -1.0, 2.0])
        outs.append(y)
    np.testing.assert_array_equal(outs, [[3, 0, 0], [0, -1, 0], [0, 0, 2], [3, 0, 0]])


def test_norm_quantizer_example():
    spec = CompressorSpec("norm_quantizer", levels=2)
    y, _ = compress(spec, new_state(spec, 3), [4.0, -1.0, 1.2])
    # grid of half-steps of the max magnitude 4
    np.testing.assert_allclose(y, [4.0, 0.0, 2.0])


@pytest.mark.parametrize("spec", SPECS, ids=IDS)
def test_zero_maps_to_zero(spec):
    state = new_state(spec, 5)
    for _ in range(50):
        y, state = compress(spec, state, np.zeros(5))
        assert np.array_equal(y, np.zeros(5))


@pytest.mark.parametrize("spec", SPECS, ids=IDS)
def test_boundedness_on_10k_samples(spec):
    rng = np.random.default_rng(123)
    d = 5
    X = rng.standard_normal((10_000, d)) * 10.0 ** rng.uniform(-4, 4, size=(10_000, 1))
    rounds = rng.integers(1, 10_000, size=10_000)
    state = new_state(spec, d, labels=[f"s{r}" for r in range(10_000)])
    ratios = np.empty(10_000)
    # the round index is shared per call; sample distinct rounds in batches
    for r in np.unique(rounds % 97):
        rows = np.flatnonzero(rounds % 97 == r)
        sub = replace(state, round=int(r) + 1,
                      keys=None if state.keys is None else tuple(state.keys[i] for i in rows),
                      last_sent=None if state.last_sent is None else rng.standard_normal((rows.size, d)),
                      triggered=None if state.triggered is None else state.triggered[rows])
        Y, _ = compress_rows(spec, sub, X[rows])
        ratios[rows] = np.linalg.norm(Y, axis=1) / np.linalg.norm(X[rows], axis=1)
    assert ratios.max() <= documented_bound(spec, d) + 1e-12


@pytest.mark.parametrize("spec", SPECS, ids=IDS)
def test_contract_passes_at_default_kappa0(spec):
    rep = verify_st_contract(spec, 4)
    assert rep.passed and rep.gamma_hat < 1
    assert rep.L_c_hat <= rep.L_c_bound + 1e-12


@pytest.mark.parametrize("spec", SPECS, ids=IDS)
def test_deterministic_sequence(spec):
    rng = np.random.default_rng(5)
    xs = rng.standard_normal((40, 6))

    def seq():
        state = new_state(spec, 6, master_seed=99)
        out = []
        for x in xs:
            y, state = compress(spec, state, x)
            out.append(y)
        return np.array(out)

    assert seq().tobytes() == seq().tobytes()


@pytest.mark.parametrize("spec", SPECS, ids=IDS)
def test_batched_equals_per_stream(spec):
    rng = np.random.default_rng(8)
    labels = [f"agent={i}" for i in range(4)]
    batch = new_state(spec, 3, master_seed=4, labels=labels)
    singles = [new_state(spec, 3, master_seed=4, labels=lab) for lab in labels]
    for _ in range(30):
        X = rng.standard_normal((4, 3))
        Y, batch = compress_rows(spec, batch, X)
        for i in range(4):
            y, singles[i] = compress(spec, singles[i], X[i])
            np.testing.assert_array_equal(Y[i], y)


def test_stochastic_quantizer_unbiased_and_seeded():
    spec = CompressorSpec("stochastic_quantizer", levels=2)
    x = np.array([0.3, -0.7, 1.0, 0.05])
    labels = [f"s{i}" for i in range(20_000)]
    Y, _ = compress_rows(spec, new_state(spec, 4, master_seed=1, labels=labels), np.tile(x, (20_000, 1)))
    np.testing.assert_allclose(Y.mean(axis=0), x, atol=0.02)
    Y2, _ = compress_rows(spec, new_state(spec, 4, master_seed=2, labels=labels), np.tile(x, (20_000, 1)))
    assert not np.array_equal(Y, Y2)


def test_event_triggered_silent_below_threshold():
    spec = CompressorSpec("event_triggered", theta0=1.0, rho=0.5)
    state = new_state(spec, 2)
    y, state = compress(spec, state, [0.1, 0.0])  # threshold 0.5
    assert np.array_equal(y, [0.0, 0.0]) and not state.triggered[0]
    y, state = compress(spec, state, [1.0, 0.0])  # threshold 0.25
    assert np.array_equal(y, [1.0, 0.0]) and state.triggered[0]


def test_non_finite_input_rejected():
    spec = CompressorSpec("identity")
    with pytest.raises(NumericalError):
        compress(spec, new_state(spec, 2), [np.nan, 1.0])


@settings(max_examples=200, deadline=None)
@given(x=arrays(float, st.integers(1, 8), elements=finite), k=st.integers(1, 8), rnd=st.integers(1, 1000))
def test_top_k_properties(x, k, rnd):
    k = min(k, x.size)
    spec = CompressorSpec("top_k", k=k)
    y, _ = compress(spec, replace(new_state(spec, x.size), round=rnd), x)
    kept = np.flatnonzero(y)
    assert kept.size <= k
    np.testing.assert_array_equal(y[kept], x[kept])
    # every kept magnitude dominates every dropped one
    dropped = np.setdiff1d(np.arange(x.size), np.argsort(-np.abs(x), kind="stable")[:k])
    if dropped.size and kept.size:
        assert np.abs(x[kept]).min() >= np.abs(x[dropped]).max()
    assert np.linalg.norm(y) <= np.linalg.norm(x)


@settings(max_examples=200, deadline=None)
@given(x=arrays(float, st.integers(1, 8), elements=finite), levels=st.integers(1, 16))
def test_norm_quantizer_properties(x, levels):
    spec = CompressorSpec("norm_quantizer", levels=levels)
    y, _ = compress(spec, new_state(spec, x.size), x)
    scale = np.abs(x).max()
    if scale == 0:
        assert not y.any()
        return
    assert np.abs(y - x).max() <= scale / (2 * levels) * (1 + 1e-12)
    assert np.linalg.norm(y) <= 2 * np.linalg.norm(x)


def test_transmit_size_examples():
    assert transmit_size(CompressorSpec("identity"), 5) == 5
    assert transmit_size(CompressorSpec("top_k", k=2), 5) == 4
    assert transmit_size(CompressorSpec("scalarized"), 5) == 1
    assert transmit_size(CompressorSpec("norm_quantizer"), 5) == 5
    assert comp.payload_bits(CompressorSpec("norm_quantizer"), 5) < comp.payload_bits(CompressorSpec("identity"), 5)


def test_contract_identity_closed_form():
    assert verify_st_contract(CompressorSpec("identity", kappa0=1.0), 3).gamma_hat == 0.0
    rep = verify_st_contract(CompressorSpec("identity", kappa0=0.5), 3)
    assert rep.passed and rep.gamma_hat == pytest.approx(0.5, abs=1e-12)


def test_contract_top1_d3():
    rep = verify_st_contract(CompressorSpec("top_k", k=1, kappa0=0.5), 3, horizon=300)
    assert rep.passed and rep.gamma_hat < 1


def test_contract_rejects_amplifier():
    rep = verify_st_contract(CompressorSpec("scaled", factor=2.0, kappa0=2.0), 3)
    assert not rep.passed and rep.diagnostic


def test_contract_preconditions():
    with pytest.raises(InvalidSpec):
        verify_st_contract(CompressorSpec(), 3, horizon=99)
    with pytest.raises(InvalidSpec):
        verify_st_contract(CompressorSpec(), 3, trials=9)


def test_parse_spec_shorthand():
    assert parse_spec("top_k(2)") == CompressorSpec("top_k", k=2)
    assert parse_spec("scaled(2)", kappa0=2.0) == CompressorSpec("scaled", factor=2.0, kappa0=2.0)
    with pytest.raises(InvalidSpec):
        parse_spec("identity(3)")
    with pytest.raises(InvalidSpec):
        parse_spec("gzip")
