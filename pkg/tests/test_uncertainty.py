import inspect

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from umix_bench import uncertainty as unc
from umix_bench.data import FourMoonsSpec, generate_four_moons, make_blobs
from umix_bench.training import ConfigError, TrainConfig
from umix_bench.uncertainty import (FingerprintMismatch, ImportanceWeights, PredictionTrace,
                                    UncertaintyScores, WindowError, compute_uncertainty,
                                    compute_uncertainty_ensemble, compute_weights,
                                    train_erm_with_trace, weights_pipeline)


def brute_force_u(preds, labels, T_s, T):
    out = []
    for i in range(preds.shape[1]):
        wrong = 0
        for t in range(T_s, T_s + T):
            if preds[t, i] != labels[i]:
                wrong += 1
        out.append(wrong / T)
    return np.array(out)


def trace(preds, fp="fp"):
    return PredictionTrace(preds, np.arange(preds.shape[0]), fp)


def test_uncertainty_matches_brute_force_on_random_traces():
    gen = np.random.default_rng(0)
    for _ in range(200):
        E, n, C = gen.integers(1, 12), gen.integers(1, 15), gen.integers(2, 4)
        preds = gen.integers(0, C, size=(E, n))
        labels = gen.integers(0, C, size=n)
        T_s = int(gen.integers(0, E))
        T = int(gen.integers(1, E - T_s + 1))
        got = compute_uncertainty(trace(preds), labels, T_s, T).u
        np.testing.assert_array_equal(got, brute_force_u(preds, labels, T_s, T))


def test_uncertainty_small_example():
    # sample 0 wrong in epochs 1, 2; sample 1 never wrong; window [1, 4)
    preds = np.array([[1, 0], [1, 0], [1, 0], [0, 0], [1, 1]])
    s = compute_uncertainty(trace(preds), np.array([0, 0]), 1, 3)
    np.testing.assert_array_equal(s.u, [2 / 3, 0.0])
    assert s.window == (1, 3)


def test_uncertainty_ignores_epochs_outside_window():
    preds = np.zeros((6, 3), dtype=int)
    preds[0] = 1
    preds[5] = 1
    assert not compute_uncertainty(trace(preds), np.zeros(3, int), 1, 4).u.any()


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 10), st.integers(0, 5), st.integers(0, 10_000))
def test_uncertainty_granularity(T, T_s, seed):
    gen = np.random.default_rng(seed)
    preds = gen.integers(0, 3, size=(T_s + T, 20))
    u = compute_uncertainty(trace(preds), gen.integers(0, 3, 20), T_s, T).u
    assert np.all((u >= 0) & (u <= 1))
    np.testing.assert_array_equal(u * T, np.round(u * T))


def test_window_past_trace_end_raises():
    with pytest.raises(WindowError, match="trace has 5 epochs"):
        compute_uncertainty(trace(np.zeros((5, 3), int)), np.zeros(3, int), 3, 3)


def test_window_bad_parameters():
    with pytest.raises(WindowError):
        compute_uncertainty(trace(np.zeros((5, 3), int)), np.zeros(3, int), 0, 0)


def test_trace_label_length_checked():
    with pytest.raises(ValueError):
        compute_uncertainty(trace(np.zeros((5, 3), int)), np.zeros(4, int), 0, 2)


def test_uncertainty_is_pure_function_of_trace_and_labels():
    params = list(inspect.signature(compute_uncertainty).parameters)
    assert params == ["trace", "labels", "T_s", "T"]
    src = inspect.getsource(compute_uncertainty)
    for forbidden in ("features", "forward", "noise", "random"):
        assert forbidden not in src


def test_weights_arithmetic():
    w = compute_weights(UncertaintyScores(np.array([0.0, 0.5, 1.0]), (0, 2)), 80.0, 1.0)
    np.testing.assert_array_equal(w.w, [1.0, 41.0, 81.0])


@settings(max_examples=50, deadline=None)
@given(st.lists(st.integers(0, 10), min_size=1, max_size=30), st.floats(0, 200), st.floats(0.01, 5))
def test_weights_exact_affine(counts, eta, c):
    u = np.array(counts) / 10
    w = compute_weights(UncertaintyScores(u, (0, 10)), eta, c)
    assert np.array_equal(w.w, eta * u + c)
    assert np.all(w.w > 0)


def test_weights_zero_eta_constant():
    w = compute_weights(UncertaintyScores(np.array([0.0, 0.3, 1.0]), (0, 10)), 0.0, 2.0)
    np.testing.assert_array_equal(w.w, [2.0, 2.0, 2.0])


def test_weights_reject_nonpositive_c():
    with pytest.raises(ValueError):
        compute_weights(UncertaintyScores(np.zeros(2), (0, 1)), 1.0, 0.0)


def test_epochs_shorter_than_window_rejected_before_training():
    ds = make_blobs(20, seed=0)
    with pytest.raises(ConfigError):
        train_erm_with_trace(ds, TrainConfig(epochs=4, T_s=3, T=2))


def test_trace_shape_and_fingerprint():
    ds = make_blobs(40, seed=1)
    _, tr = train_erm_with_trace(ds, TrainConfig(epochs=6, T_s=1, T=5, hidden=(8,)))
    assert tr.shape == (6, 40)
    assert tr.dataset_fingerprint == ds.fingerprint()


def test_trace_and_weights_round_trip(tmp_path):
    ds = make_blobs(30, seed=2)
    cfg = TrainConfig(epochs=4, T_s=0, T=4, hidden=(8,))
    w, tr = weights_pipeline(ds, cfg)
    tr.save(tmp_path / "trace")
    back = PredictionTrace.load(tmp_path / "trace")
    np.testing.assert_array_equal(back.preds, tr.preds)
    assert back.dataset_fingerprint == tr.dataset_fingerprint
    w.save(tmp_path / "weights")
    wb = ImportanceWeights.load(tmp_path / "weights")
    np.testing.assert_array_equal(wb.w, w.w)
    np.testing.assert_array_equal(wb.u, w.u)
    assert (wb.eta, wb.c, tuple(wb.window)) == (cfg.eta, cfg.c, (0, 4))


def test_weights_fingerprint_mismatch():
    a, b = make_blobs(30, seed=2), make_blobs(30, seed=3)
    w, _ = weights_pipeline(a, TrainConfig(epochs=3, T_s=0, T=3, hidden=(8,)))
    w.check_dataset(a)
    with pytest.raises(FingerprintMismatch):
        w.check_dataset(b)


def test_minority_groups_more_uncertain_on_four_moons():
    ds = generate_four_moons(FourMoonsSpec((300, 300, 15, 15), 0.1, seed=0))
    w, _ = weights_pipeline(ds, TrainConfig(epochs=13, seed=0))
    u = w.u
    assert min(u[ds.groups == 2].mean(), u[ds.groups == 3].mean()) > \
        max(u[ds.groups == 0].mean(), u[ds.groups == 1].mean())


def test_ensemble_single_model_is_binary():
    ds = make_blobs(30, seed=4)
    s = compute_uncertainty_ensemble(ds, TrainConfig(epochs=2, hidden=(8,)), 1)
    assert set(np.unique(s.u)) <= {0.0, 1.0}


def test_ensemble_granularity_and_window():
    ds = generate_four_moons(FourMoonsSpec((40, 40, 5, 5), 0.2, seed=1))
    s = compute_uncertainty_ensemble(ds, TrainConfig(epochs=3, hidden=(8,)), 4)
    np.testing.assert_array_equal(s.u * 4, np.round(s.u * 4))
    assert s.window == (0, 4)


def test_module_has_no_feature_noise_term():
    assert "noise" not in inspect.getsource(unc.compute_weights)
