import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from neuronflow.errors import ConstraintError, PartitionError
from neuronflow.model import FFNWeights, ModelSpec, extract_bundle, make_synthetic_model
from neuronflow.sparse_ffn import (
    Activation, IOPhase, Predictor, SplitRatio, blocked_sum, calibrate_silu_threshold, ffn_dense,
    ffn_hybrid, ffn_sparse, ffn_sparse_with_work, neuron_coefficients, oracle_activated, predict,
    silu_predicted, two_phase_eval,
)

from oracles import ffn_triple_loop


def model(d_model=16, d_ffn=64, seed=0) -> FFNWeights:
    return make_synthetic_model(ModelSpec(1, d_model, d_ffn, seed=seed))[0]


def vec(d, seed):
    return np.random.default_rng(seed).normal(size=d).astype(np.float32)


# -- blocked reduction -----------------------------------------------------

def test_blocked_sum_is_independent_of_trailing_zero_padding():
    a = np.random.default_rng(0).normal(size=37).astype(np.float32)
    padded = np.concatenate([a, np.zeros(27, np.float32)])
    assert blocked_sum(a) == blocked_sum(padded)


def test_blocked_sum_matches_fsum_closely():
    import math
    a = np.random.default_rng(1).normal(size=1000)
    assert abs(blocked_sum(a) - math.fsum(a)) < 1e-12


# -- dense -----------------------------------------------------------------

def test_dense_zero_input():
    w = model()
    assert not np.any(ffn_dense(w, np.zeros(16, np.float32)))


def test_dense_single_negative_gate_neuron():
    w = FFNWeights(np.array([[-1.0, 0.0]], np.float32), np.array([[1.0, 1.0]], np.float32),
                   np.array([[1.0], [2.0]], np.float32))
    np.testing.assert_array_equal(ffn_dense(w, np.array([1.0, 0.0], np.float32)), [0.0, 0.0])


def test_dense_matches_extended_precision_loop():
    w = model(8, 16, seed=3)
    for s in range(5):
        x = vec(8, s)
        ref = ffn_triple_loop(w.gate, w.up, w.down, x)
        assert np.max(np.abs(ffn_dense(w, x) - ref)) < 1e-5


def test_dense_shape_mismatch():
    with pytest.raises(ConstraintError):
        ffn_dense(model(), np.zeros(3, np.float32))


# -- sparse ----------------------------------------------------------------

def test_sparse_all_and_empty():
    w, x = model(), vec(16, 0)
    assert np.array_equal(ffn_sparse(w, x, range(w.d_ffn)), ffn_dense(w, x))
    assert not np.any(ffn_sparse(w, x, []))


def test_sparse_out_of_range():
    with pytest.raises(IndexError):
        ffn_sparse(model(), vec(16, 0), [64])


def test_sparse_work_is_predicted_neurons_only():
    w, x = model(), vec(16, 1)
    pred = oracle_activated(w, x)
    _, work = ffn_sparse_with_work(w, x, pred)
    assert work.neurons == pred.size and work.elements == pred.size * 3 * 16


@settings(max_examples=60, deadline=None)
@given(seed=st.integers(0, 2**31), d_model=st.integers(1, 64), d_ffn=st.integers(1, 256))
def test_oracle_sparse_equals_dense_bit_exact(seed, d_model, d_ffn):
    w = model(d_model, d_ffn, seed)
    x = vec(d_model, seed + 1)
    assert np.array_equal(ffn_sparse(w, x, oracle_activated(w, x)), ffn_dense(w, x))


# -- predictor -------------------------------------------------------------

def test_oracle_predictor_identity():
    assert predict(Predictor(), {1, 5}, 8, 0).tolist() == [1, 5]


def test_predictor_full_false_negative():
    p = Predictor("noisy", false_negative_rate=1.0)
    assert predict(p, range(10), 10, 3).size == 0


def test_predictor_drop_rate_monte_carlo():
    p = Predictor("noisy", false_negative_rate=0.1, seed=7)
    kept = sum(predict(p, range(100), 100, k).size for k in range(100))
    assert abs(1 - kept / 10_000 - 0.1) <= 0.01


def test_predictor_false_positive_rate_and_determinism():
    p = Predictor("noisy", false_positive_rate=0.2, seed=1)
    added = [predict(p, [], 1000, k).size for k in range(20)]
    assert abs(np.mean(added) / 1000 - 0.2) < 0.02
    assert np.array_equal(predict(p, [3], 1000, 5), predict(p, [3], 1000, 5))


def test_predictor_validation():
    with pytest.raises(ConstraintError):
        Predictor("oracle", false_negative_rate=0.1)
    with pytest.raises(ConstraintError):
        Predictor("noisy", false_positive_rate=2.0)


# -- hybrid ----------------------------------------------------------------

def test_half_split_of_full_size_matrix():
    assert SplitRatio(0.5).hot_rows(14336) == 7168


def test_hybrid_full_npu_equals_dense():
    w, x = model(), vec(16, 2)
    r = ffn_hybrid(w, x, SplitRatio(1.0), list(range(64)))
    assert np.array_equal(r.output, ffn_dense(w, x))
    assert r.cold_work.neurons == 0


@pytest.mark.parametrize("seed", range(50))
def test_hybrid_30_percent_equals_dense(seed):
    w, x = model(16, 64, seed), vec(16, seed + 100)
    hot = np.random.default_rng(seed).permutation(64)[: SplitRatio(0.3).hot_rows(64)]
    r = ffn_hybrid(w, x, SplitRatio(0.3), hot.tolist())
    assert np.array_equal(r.output, ffn_dense(w, x))
    assert r.hot_work.elements == hot.size * 3 * 16


def test_hybrid_size_and_overlap_errors():
    w, x = model(), vec(16, 0)
    with pytest.raises(ConstraintError):
        ffn_hybrid(w, x, SplitRatio(0.5), [0, 1])
    with pytest.raises(PartitionError):
        ffn_hybrid(w, x, SplitRatio(1 / 64), [3], cold_predicted=[3, 4])
    with pytest.raises(ConstraintError):
        SplitRatio(1.2)


# -- two-phase -------------------------------------------------------------

def test_two_phase_inactive_and_zero_input():
    w = model()
    b = extract_bundle(w, 0)
    contrib, plan = two_phase_eval(b, np.zeros(16, np.float32))
    assert plan == [IOPhase.GATE_ONLY] and not np.any(contrib)
    x = -np.sign(b.gate_row).astype(np.float32)
    contrib, plan = two_phase_eval(b, x)
    assert plan == [IOPhase.GATE_ONLY]


def test_two_phase_active_matches_dense_term():
    w, x = model(), vec(16, 4)
    for i in oracle_activated(w, x)[:10]:
        contrib, plan = two_phase_eval(extract_bundle(w, int(i)), x)
        assert plan == [IOPhase.GATE, IOPhase.UP_DOWN]
        coeff = neuron_coefficients(w, x, np.array([i]))[0]
        np.testing.assert_array_equal(contrib, coeff * w.down[:, i])


# -- SiLU mode ---------------------------------------------------------------

def test_silu_threshold_keeps_about_half_and_approximates_dense():
    w = model(32, 256, seed=9)
    xs = [vec(32, s) for s in range(20)]
    tau = calibrate_silu_threshold(w, xs, 0.5)
    frac = np.mean([silu_predicted(w, x, tau).size / 256 for x in xs])
    assert abs(frac - 0.5) < 0.05
    x = xs[0]
    dense = ffn_sparse(w, x, range(256), Activation.SILU)
    approx = ffn_sparse(w, x, silu_predicted(w, x, tau), Activation.SILU)
    assert np.linalg.norm(approx - dense) < 0.5 * np.linalg.norm(dense)
