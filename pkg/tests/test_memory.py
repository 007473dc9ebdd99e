"""Tests for the key-value memory, the write controller and memory filling.

Uses an exact lookup codec (keys are flattened pasts, values flattened
futures) so prediction errors are known in closed form.
"""

import logging

import numpy as np
import pytest

from autodiff import ShapeError
from data_models import SyntheticConfig
from evaluation import best_of_k, evaluate, fde
from memory import (Controller, CoordinateBank, EmptyMemoryError, MemoryStore, PredictionSet, copy_future_predict,
                    controller_forward, controller_loss, fill_memory, miss_rate_error,
                    nearest_neighbor_predict, online_ingest, predict, read_top_k, similarity_scores,
                    train_controller)
from trajectories import build_samples, generate_synthetic_dataset, parse_track_id


def _store(keys):
    keys = np.asarray(keys, dtype=np.float64)
    memory = MemoryStore(keys.shape[1], keys.shape[1])
    for i, k in enumerate(keys):
        memory.write(k, np.zeros(keys.shape[1]), f"e{i}")
    return memory


# Trained gates settle near this shape: low write probability when the
# memory already predicts the sample, high when it misses.
def _sharp_controller():
    return Controller(weight=4.0, bias=-2.0)


# -----------------
# Addressing
# -----------------

def test_self_orthogonal_and_antipodal_scores():
    memory = _store([[1.0, 2.0, 0.0], [-2.0, 1.0, 0.0], [-1.0, -2.0, 0.0]])
    scores = similarity_scores(np.array([1.0, 2.0, 0.0]), memory)
    np.testing.assert_allclose(scores, [1.0, 0.0, -1.0], atol=1e-12)


def test_scores_match_direct_formula():
    rng = np.random.default_rng(0)
    keys = rng.normal(size=(20, 6))
    query = rng.normal(size=6)
    expected = keys @ query / (np.linalg.norm(keys, axis=1) * np.linalg.norm(query))
    np.testing.assert_allclose(similarity_scores(query, _store(keys)), expected, atol=1e-12)


def test_empty_memory_read_is_signalled():
    with pytest.raises(EmptyMemoryError):
        similarity_scores(np.ones(3), MemoryStore(3, 3))
    with pytest.raises(EmptyMemoryError):
        read_top_k(np.ones(3), MemoryStore(3, 3), 1)


def test_top1_returns_matching_entry():
    memory = _store([[0.0, 1.0], [1.0, 0.0], [1.0, 1.0]])
    idx, scores = read_top_k(np.array([1.0, 0.0]), memory, 1)
    assert idx.tolist() == [1]
    assert scores[0] == pytest.approx(1.0)


def test_k_larger_than_memory_returns_everything_ranked():
    memory = _store([[0.0, 1.0], [1.0, 0.0], [1.0, 1.0]])
    idx, scores = read_top_k(np.array([1.0, 0.0]), memory, 10)
    assert idx.tolist() == [1, 2, 0]
    assert np.all(np.diff(scores) <= 0)


def test_top_k_matches_full_sort():
    rng = np.random.default_rng(1)
    keys = rng.normal(size=(100, 8))
    query = rng.normal(size=8)
    idx, _ = read_top_k(query, _store(keys), 10)
    full = keys @ query / (np.linalg.norm(keys, axis=1) * np.linalg.norm(query))
    assert idx.tolist() == np.argsort(-full, kind="stable")[:10].tolist()


def test_ties_prefer_older_entries():
    memory = _store([[1.0, 0.0], [2.0, 0.0], [0.0, 1.0]])
    idx, _ = read_top_k(np.array([1.0, 0.0]), memory, 2)
    assert idx.tolist() == [0, 1]


def test_exclude_source_hides_own_entry():
    memory = _store([[1.0, 0.0], [1.0, 0.1]])
    idx, _ = read_top_k(np.array([1.0, 0.0]), memory, 1, exclude_source="e0")
    assert idx.tolist() == [1]


def test_store_rejects_zero_key_and_wrong_width():
    memory = MemoryStore(2, 2)
    with pytest.raises(ValueError):
        memory.write(np.zeros(2), np.zeros(2), "zero")
    with pytest.raises(ShapeError):
        memory.write(np.ones(3), np.zeros(2), "wide")


def test_entries_are_read_only():
    memory = _store([[1.0, 0.0]])
    with pytest.raises(ValueError):
        memory[0].key[0] = 5.0


def test_prediction_scores_must_be_non_increasing():
    with pytest.raises(ValueError):
        PredictionSet(futures=np.zeros((2, 3, 2)), scores=np.array([0.1, 0.9]))


# -----------------
# Prediction
# -----------------

def test_predict_with_own_entry_reproduces_reconstruction(lookup_codec, make_straight):
    sample = make_straight(1.5, "own")
    memory = MemoryStore(48, 48)
    memory.write(lookup_codec.encode_past(sample.past), lookup_codec.encode_future(sample.future), "own")
    pred = predict(sample.past, memory, 1, lookup_codec)
    expected = lookup_codec.decode(lookup_codec.encode_past(sample.past), lookup_codec.encode_future(sample.future))
    np.testing.assert_array_equal(pred.futures[0], expected)
    assert pred.source_ids == ["own"]


def test_predict_on_empty_memory_fails(lookup_codec, make_straight):
    with pytest.raises(EmptyMemoryError):
        predict(make_straight(1.0, "x").past, MemoryStore(48, 48), 1, lookup_codec)


def test_nearest_neighbor_copies_closest_future(make_straight):
    train = [make_straight(s, f"t{s}") for s in (1.0, 2.0, 3.0)]
    bank = CoordinateBank.from_samples(train)
    pred = nearest_neighbor_predict(make_straight(2.1, "q").past, bank, 2)
    assert pred.source_ids == ["t2.0", "t3.0"]
    np.testing.assert_array_equal(pred.futures[0], train[1].future)


def test_copy_mode_returns_stored_source_futures(lookup_codec, make_straight):
    train = [make_straight(s, f"t{s}") for s in (1.0, 3.0)]
    memory = fill_memory(train, lookup_codec, None)
    pred = copy_future_predict(make_straight(2.9, "q").past, memory, 1, lookup_codec)
    assert pred.source_ids == ["t3.0"]
    np.testing.assert_array_equal(pred.futures[0], train[1].future)


def test_copy_mode_needs_stored_futures(lookup_codec, make_straight):
    sample = make_straight(1.0, "a")
    memory = MemoryStore(48, 48)
    memory.write(lookup_codec.encode_past(sample.past), lookup_codec.encode_future(sample.future), "a")
    with pytest.raises(ValueError, match="source futures"):
        copy_future_predict(sample.past, memory, 1, lookup_codec)


# -----------------
# Controller
# -----------------

def test_miss_rate_extremes():
    gt = np.cumsum(np.ones((8, 2)), axis=0)
    assert miss_rate_error(gt, gt) == 0.0
    assert miss_rate_error(gt + 10.0, gt, th_horizon=2.0) == 1.0


def test_miss_rate_hand_evaluation():
    gt = np.zeros((4, 2))
    pred = np.array([[0.4, 0.0], [0.9, 0.0], [2.0, 0.0], [3.0, 0.0]])
    assert miss_rate_error(pred, gt, th_horizon=2.0) == pytest.approx(0.5)


def test_miss_rate_rejects_length_mismatch():
    with pytest.raises(ShapeError):
        miss_rate_error(np.zeros((3, 2)), np.zeros((4, 2)))


def test_flat_controller_is_indifferent():
    controller = Controller()
    for e in (0.0, 0.3, 1.0):
        assert controller_forward(e, controller) == pytest.approx(0.5)


def test_saturated_controller_writes():
    assert Controller(weight=60.0).probability(1.0) == pytest.approx(1.0)


@pytest.mark.parametrize("e,p,expected", [(0.0, 0.3, 0.3), (1.0, 0.3, 0.7), (0.5, 0.1, 0.5), (0.5, 0.9, 0.5)])
def test_controller_loss_examples(e, p, expected):
    assert controller_loss(e, p) == pytest.approx(expected)


def test_controller_loss_is_flat_at_half_error():
    for p in np.random.default_rng(0).uniform(size=100):
        assert controller_loss(0.5, p) == pytest.approx(0.5)


def test_controller_loss_rejects_out_of_range_error():
    with pytest.raises(ValueError):
        controller_loss(1.5, 0.5)


def test_controller_gradient_direction():
    controller = Controller()
    controller_loss(1.0, controller.forward_graph(1.0)).backward()
    # a missed prediction should push the write probability up
    assert controller.weight.grad[0] < 0 and controller.bias.grad[0] < 0


def test_duplicates_leave_one_entry_per_epoch(lookup_codec, make_straight):
    samples = [make_straight(1.0, f"dup{i}") for i in range(12)]
    result = train_controller(samples, lookup_codec, 3, controller=_sharp_controller(),
                              rng=np.random.default_rng(0))
    assert result.history["memory_size"].tolist() == [1, 1, 1]
    assert len(result.memory) == 1


def test_train_controller_rejects_empty_dataset(lookup_codec):
    with pytest.raises(ValueError):
        train_controller([], lookup_codec, 1)


def test_flat_controller_learns_to_separate(lookup_codec, make_straight):
    rng = np.random.default_rng(2)
    samples = [make_straight(float(rng.choice([1.0, 2.0, 3.0])), f"s{i}") for i in range(60)]
    result = train_controller(samples, lookup_codec, 5, learning_rate=0.05, rng=np.random.default_rng(0))
    controller = result.controller
    assert controller.probability(1.0) > controller.probability(0.0)
    assert controller.probability(0.0) < 0.5


# -----------------
# Filling and online ingestion
# -----------------

def test_fill_memory_compacts_repeated_modes(lookup_codec, make_straight):
    rng = np.random.default_rng(3)
    samples = []
    for rep in range(100):
        for mode in range(10):
            samples.append(make_straight(0.5 * (mode + 1), f"m{mode}-{rep}", noise=0.005, rng=rng))
    memory = fill_memory(samples, lookup_codec, _sharp_controller())
    assert len(memory) < 0.1 * len(samples)
    assert len(memory) >= 10


def test_fill_memory_without_controller_writes_everything(lookup_codec, make_straight):
    samples = [make_straight(1.0, f"d{i}") for i in range(7)]
    assert len(fill_memory(samples, lookup_codec, None)) == 7


def test_fill_memory_is_deterministic(lookup_codec, make_straight):
    rng = np.random.default_rng(5)
    samples = [make_straight(float(s), f"s{i}") for i, s in enumerate(rng.uniform(0.5, 4.0, 30))]
    a = fill_memory(samples, lookup_codec, _sharp_controller())
    b = fill_memory(samples, lookup_codec, _sharp_controller())
    assert a.source_ids() == b.source_ids()
    np.testing.assert_array_equal(a.key_matrix(), b.key_matrix())


def test_online_ingest_gates_known_and_novel_samples(lookup_codec, make_straight):
    memory = fill_memory([make_straight(1.0, "seen")], lookup_codec, None)
    written, memory = online_ingest(make_straight(1.0, "again"), memory, lookup_codec, _sharp_controller())
    assert not written and len(memory) == 1
    written, memory = online_ingest(make_straight(4.0, "novel"), memory, lookup_codec, _sharp_controller())
    assert written and len(memory) == 2
    assert memory.source_ids() == ["seen", "novel"]


def test_first_sample_is_always_written(lookup_codec, make_straight):
    written, memory = online_ingest(make_straight(1.0, "first"), MemoryStore(48, 48), lookup_codec,
                                    _sharp_controller())
    assert written and len(memory) == 1


def test_empty_memory_is_written_even_by_a_closed_gate(lookup_codec, make_straight):
    closed = Controller(weight=0.0, bias=-3.0)
    assert closed.probability(1.0) < 0.5
    written, memory = online_ingest(make_straight(1.0, "first"), MemoryStore(48, 48), lookup_codec, closed)
    assert written and len(memory) == 1
    samples = [make_straight(0.5 * (i + 1), f"s{i}") for i in range(5)]
    assert fill_memory(samples, lookup_codec, closed).source_ids() == ["s0"]


def test_closed_gate_training_keeps_one_entry_per_epoch(lookup_codec, make_straight):
    samples = [make_straight(0.5 * (i % 4 + 1), f"s{i}") for i in range(12)]
    result = train_controller(samples, lookup_codec, 2, controller=Controller(weight=0.0, bias=-8.0),
                              learning_rate=1e-8, rng=np.random.default_rng(0))
    assert result.history["memory_size"].tolist() == [1, 1]


@pytest.mark.parametrize("weight,bias,expected", [(4.0, -2.0, True), (0.0, 0.0, False), (-4.0, 2.0, False),
                                                  (1.0, 0.2, False)])
def test_separates(weight, bias, expected):
    assert Controller(weight=weight, bias=bias).separates() is expected


def test_unknown_optimizer_rejected(lookup_codec, make_straight):
    with pytest.raises(ValueError, match="optimizer"):
        train_controller([make_straight(1.0, "a")], lookup_codec, 1, optimizer="rmsprop")


def _duplicated_modes(make_straight, modes, copies, noise=0.0, rng=None):
    return [make_straight(0.5 * (mode + 1), f"m{mode}-{rep}", noise=noise, rng=rng)
            for rep in range(copies) for mode in range(modes)]


def test_default_trained_gate_leaves_a_usable_memory(lookup_codec, make_straight, caplog):
    samples = _duplicated_modes(make_straight, 10, 100, noise=0.005, rng=np.random.default_rng(6))
    with caplog.at_level(logging.WARNING):
        result = train_controller(samples, lookup_codec, rng=np.random.default_rng(0))
    assert result.history["memory_size"].min() >= 1
    if not result.controller.separates():
        assert "does not separate" in caplog.text

    memory = fill_memory(samples, lookup_codec, result.controller)
    assert len(memory) >= 1
    queries = _duplicated_modes(make_straight, 10, 1)
    report = evaluate(lookup_codec, memory, None, queries, [1, 5], {4.0: 8})
    assert np.isfinite(report.value("memory", 5, 4.0))


@pytest.mark.slow
def test_trained_gate_compacts_duplicated_modes(lookup_codec, make_straight):
    samples = _duplicated_modes(make_straight, 10, 100)
    result = train_controller(samples, lookup_codec, 10, learning_rate=1.0, optimizer="sgd",
                              rng=np.random.default_rng(0))
    controller = result.controller
    assert controller.probability(1.0) > 0.5 > controller.probability(0.0)

    compact = fill_memory(samples, lookup_codec, controller)
    everything = fill_memory(samples, lookup_codec, None)
    assert 10 <= len(compact) < 0.1 * len(samples)

    queries = _duplicated_modes(make_straight, 10, 2, noise=0.01, rng=np.random.default_rng(7))
    horizons = {4.0: 8}
    compact_fde = evaluate(lookup_codec, compact, None, queries, [5], horizons).value("memory", 5, 4.0)
    full_fde = evaluate(lookup_codec, everything, None, queries, [5], horizons).value("memory", 5, 4.0)
    assert compact_fde <= 1.2 * full_fde + 1e-9


def test_junction_top2_covers_both_branches(lookup_codec):
    config = SyntheticConfig(n_straight=0, n_arc=0, n_junction=40, noise_sigma=0.0, speed_min=8.0,
                             speed_max=8.5, map_resolution=5.0)
    dataset = generate_synthetic_dataset(config, seed=3)
    train_tracks, test_tracks = dataset.split(0.2, np.random.default_rng(0))
    train = build_samples(train_tracks, 2.0, 4.0)
    test = build_samples(test_tracks, 2.0, 4.0)
    memory = fill_memory(train, lookup_codec, None)

    finals = {}
    for sample in test:
        finals.setdefault(parse_track_id(sample.track_id)[0], {})[sample.branch] = sample.future[-1]
    covered, best_of_2 = 0, []
    for sample in test:
        pred = predict(sample.past, memory, 2, lookup_codec)
        branches = {parse_track_id(source.split("@", 1)[0])[2] for source in pred.source_ids}
        covered += branches == {0, 1}
        best_of_2.append(best_of_k(fde, pred.futures, sample.future, 2))
        ends = finals[parse_track_id(sample.track_id)[0]]
        separation = float(np.linalg.norm(ends[0] - ends[1]))
        # ties go to the older entry, the straight branch
        if sample.branch == 1:
            assert fde(pred.futures[0], sample.future) > 0.5 * separation
    assert covered >= 0.9 * len(test)
    assert np.mean(best_of_2) < 1.0
