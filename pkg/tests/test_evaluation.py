import numpy as np
import pytest

from data_models import SyntheticConfig
from evaluation import (EvalReport, KalmanBaseline, LinearBaseline, MLPBaseline, ade, best_of_k, evaluate, fde,
                        kalman_baseline)
from memory import CoordinateBank, MemoryStore, fill_memory
from trajectories import build_samples, generate_synthetic_dataset

HORIZONS = {1.0: 2, 4.0: 8}


def test_ade_and_fde_hand_values():
    gt = np.array([[0.0, 0.0], [0.0, 1.0], [0.0, 2.0], [0.0, 3.0]])
    assert ade(np.zeros((4, 2)), gt) == pytest.approx(1.5)
    assert ade(np.zeros((4, 2)), gt, 2) == pytest.approx(0.5)
    assert fde(np.zeros((1, 2)), np.array([[3.0, 4.0]])) == pytest.approx(5.0)
    assert fde(np.zeros((4, 2)), gt, 3) == pytest.approx(2.0)


def test_metrics_reject_bad_horizon_and_shapes():
    gt = np.zeros((4, 2))
    with pytest.raises(ValueError):
        fde(gt, gt, 5)
    with pytest.raises(ValueError):
        ade(gt, gt, 0)
    with pytest.raises(ValueError):
        ade(np.zeros((3, 2)), gt)


def test_best_of_k_takes_the_closest_candidate():
    gt = np.zeros((2, 2))
    futures = np.stack([np.full((2, 2), 3.0), np.full((2, 2), 1.0)])
    assert best_of_k(fde, futures, gt, 1) == pytest.approx(np.sqrt(18.0))
    assert best_of_k(fde, futures, gt, 2) == pytest.approx(np.sqrt(2.0))
    assert best_of_k(fde, futures, gt, 10) == pytest.approx(np.sqrt(2.0))


def test_best_of_k_is_monotone_in_k():
    rng = np.random.default_rng(0)
    futures = rng.normal(size=(6, 5, 2))
    gt = rng.normal(size=(5, 2))
    values = [best_of_k(ade, futures, gt, k) for k in range(1, 7)]
    assert all(b <= a for a, b in zip(values, values[1:]))


# -----------------
# Baselines
# -----------------

def test_kalman_extrapolates_constant_velocity():
    past = np.array([[0.0, float(i)] for i in range(4)])
    out = kalman_baseline(past, 3)
    np.testing.assert_allclose(out, [[0.0, 4.0], [0.0, 5.0], [0.0, 6.0]], atol=1e-9)


def test_kalman_stationary_stays_put():
    out = KalmanBaseline().predict(np.full((5, 2), 2.5), 4)
    np.testing.assert_allclose(out, np.full((4, 2), 2.5), atol=1e-9)


def test_kalman_needs_two_points():
    with pytest.raises(ValueError):
        kalman_baseline(np.zeros((1, 2)), 3)


def test_linear_baseline_is_exact_on_constant_velocity(make_straight):
    train = [make_straight(s, f"t{s}") for s in (1.0, 2.0, 3.0)]
    model = LinearBaseline().fit(train)
    query = make_straight(2.5, "q")
    np.testing.assert_allclose(model.predict(query.past), query.future, atol=1e-8)


def test_linear_baseline_single_sample_reproduces_it(make_straight):
    sample = make_straight(1.7, "only")
    model = LinearBaseline().fit([sample])
    np.testing.assert_allclose(model.predict(sample.past), sample.future, atol=1e-8)


def test_unfitted_linear_baseline_raises():
    with pytest.raises(RuntimeError):
        LinearBaseline().predict(np.zeros((4, 2)))


def test_mlp_baseline_training_reduces_loss(make_straight):
    samples = [make_straight(s, f"s{i}") for i, s in enumerate((0.5, 1.0, 1.5, 2.0))]
    mlp = MLPBaseline(4, 8, hidden=16, rng=np.random.default_rng(0))
    history = mlp.fit(samples, epochs=200, learning_rate=1e-2, batch_size=4, rng=np.random.default_rng(0))
    assert history["train_mse"].iloc[-1] < history["train_mse"].iloc[0]
    assert mlp.predict(samples[0].past).shape == (8, 2)


# -----------------
# Batch evaluation
# -----------------

def _memory_of(samples, codec):
    return fill_memory(samples, codec, None)


def test_memory_holding_the_test_set_gives_zero_error(lookup_codec, make_straight):
    samples = [make_straight(s, f"s{i}") for i, s in enumerate((0.7, 1.4, 2.9))]
    report = evaluate(lookup_codec, _memory_of(samples, lookup_codec), None, samples, [1, 5], HORIZONS)
    assert isinstance(report, EvalReport)
    assert report.value("memory", 1, 4.0, "fde") == pytest.approx(0.0, abs=1e-9)
    assert report.value("memory", 5, 1.0, "ade") == pytest.approx(0.0, abs=1e-9)
    assert report.memory_size == 3
    assert set(report.summary.columns) == {"method", "k", "horizon_s", "ade", "fde"}


def test_duplicated_test_set_gives_identical_summary(lookup_codec, make_straight):
    train = [make_straight(s, f"t{i}") for i, s in enumerate((1.0, 2.0, 3.0))]
    test = [make_straight(s, f"q{i}") for i, s in enumerate((1.2, 2.6))]
    doubled = test + [make_straight(s, f"r{i}") for i, s in enumerate((1.2, 2.6))]
    memory = _memory_of(train, lookup_codec)
    once = evaluate(lookup_codec, memory, None, test, [1, 3], HORIZONS).summary
    twice = evaluate(lookup_codec, memory, None, doubled, [1, 3], HORIZONS).summary
    np.testing.assert_allclose(once[["ade", "fde"]].to_numpy(), twice[["ade", "fde"]].to_numpy(), atol=1e-12)


def test_larger_k_never_hurts(lookup_codec, make_straight):
    rng = np.random.default_rng(1)
    train = [make_straight(float(s), f"t{i}") for i, s in enumerate(rng.uniform(0.5, 3.0, 12))]
    test = [make_straight(float(s), f"q{i}") for i, s in enumerate(rng.uniform(0.5, 3.0, 5))]
    report = evaluate(lookup_codec, _memory_of(train, lookup_codec), None, test, [1, 5], HORIZONS)
    assert report.value("memory", 5, 4.0) <= report.value("memory", 1, 4.0)


def test_baselines_are_reported_at_k1(lookup_codec, make_straight):
    train = [make_straight(s, f"t{i}") for i, s in enumerate((1.0, 2.0, 3.0))]
    test = [make_straight(2.0, "q")]
    report = evaluate(lookup_codec, _memory_of(train, lookup_codec), None, test, [1, 5], HORIZONS,
                      baselines=[KalmanBaseline(), LinearBaseline().fit(train)])
    assert report.value("kalman", 1, 4.0) == pytest.approx(0.0, abs=1e-6)
    assert report.value("linear", 1, 4.0) == pytest.approx(0.0, abs=1e-6)
    with pytest.raises(KeyError):
        report.value("kalman", 5, 4.0)


def test_nearest_mode_uses_the_coordinate_bank(lookup_codec, make_straight):
    train = [make_straight(s, f"t{i}") for i, s in enumerate((1.0, 2.0))]
    report = evaluate(lookup_codec, MemoryStore(48, 48), None, [make_straight(2.0, "q")], [1], HORIZONS,
                      mode="nearest", bank=CoordinateBank.from_samples(train), method="nearest",
                      memory_size=len(train))
    assert report.value("nearest", 1, 4.0) == pytest.approx(0.0, abs=1e-9)
    assert report.memory_size == 2


def test_copy_mode_returns_source_futures(lookup_codec, make_straight):
    train = [make_straight(s, f"t{i}") for i, s in enumerate((1.0, 2.0, 3.0))]
    report = evaluate(lookup_codec, _memory_of(train, lookup_codec), None, [make_straight(2.0, "q")], [1], HORIZONS,
                      mode="copy", method="copy")
    assert report.value("copy", 1, 4.0) == pytest.approx(0.0, abs=1e-9)


def test_evaluate_rejects_bad_inputs(lookup_codec, make_straight):
    memory = _memory_of([make_straight(1.0, "t")], lookup_codec)
    with pytest.raises(ValueError):
        evaluate(lookup_codec, memory, None, [], [1], HORIZONS)
    with pytest.raises(ValueError):
        evaluate(lookup_codec, memory, None, [make_straight(1.0, "q")], [1], HORIZONS, mode="oracle")
    with pytest.raises(ValueError):
        evaluate(lookup_codec, memory, None, [make_straight(1.0, "q")], [1], HORIZONS, mode="nearest")


@pytest.mark.slow
def test_memory_and_linear_beat_kalman_on_curved_roads(lookup_codec):
    config = SyntheticConfig(n_straight=0, n_arc=30, n_junction=30, extra_points=2, map_resolution=5.0)
    dataset = generate_synthetic_dataset(config, seed=1)
    train_tracks, test_tracks = dataset.split(0.2, np.random.default_rng(0))
    train = build_samples(train_tracks, 2.0, 4.0)
    test = build_samples(test_tracks, 2.0, 4.0)
    report = evaluate(lookup_codec, _memory_of(train, lookup_codec), None, test, [1, 5], {4.0: 8},
                      baselines=[KalmanBaseline(), LinearBaseline().fit(train)])
    kalman = report.value("kalman", 1, 4.0)
    assert kalman > report.value("linear", 1, 4.0)
    assert kalman > report.value("memory", 5, 4.0)
