import numpy as np
import pytest

from autodiff import ShapeError, Tensor
from data_models import SyntheticConfig
from encdec import EncDecModel
from evaluation import evaluate
from memory import fill_memory
from refinement import (FeatureMap, RefinementModel, extract_feature_map, pool_features, refine,
                        refine_futures, train_refinement)
from trajectories import (NormalizationTransform, SemanticMap, build_samples, generate_synthetic_dataset,
                          rotation_matrix)


def _map(h=64, w=64, seed=0, resolution=0.5, origin=(-16.0, -16.0)):
    rng = np.random.default_rng(seed)
    road = (rng.uniform(size=(h, w)) > 0.5).astype(float)
    return SemanticMap(grid=np.stack([road, 1.0 - road]), resolution=resolution, origin=origin)


def _model(seed=0, **kwargs):
    return RefinementModel(rng=np.random.default_rng(seed), **kwargs).eval()


def test_feature_map_size_follows_conv_arithmetic():
    fm = extract_feature_map(_map(), _model())
    assert fm.shape == (16, 32, 32)
    assert fm.resolution == pytest.approx(1.0)
    assert fm.origin == (-16.0, -16.0)


def test_zero_map_with_zero_biases_gives_zero_features():
    model = _model()
    model.conv1.bias.data[:] = 0.0
    model.conv2.bias.data[:] = 0.0
    fm = extract_feature_map(SemanticMap(grid=np.zeros((2, 16, 16))), model)
    np.testing.assert_array_equal(fm.grid.data, np.zeros((16, 8, 8)))


def test_feature_map_matches_layer_composition():
    model = _model(seed=3)
    semantic_map = _map(h=10, w=12, seed=1)
    x = semantic_map.grid
    expected = model.conv1(Tensor(x))
    expected = np.maximum(model.bn1(expected, training=False).data, 0.0)
    expected = model.conv2(Tensor(expected))
    expected = np.maximum(model.bn2(expected, training=False).data, 0.0)
    np.testing.assert_allclose(extract_feature_map(semantic_map, model).grid.data, expected, atol=1e-12)


def test_map_with_wrong_channels_rejected():
    with pytest.raises(ShapeError):
        _model().features(np.zeros((3, 8, 8)))


# -----------------
# Pooling
# -----------------

def _feature_grid():
    grid = np.arange(16 * 4 * 5, dtype=np.float64).reshape(16, 4, 5)
    return FeatureMap(grid=Tensor(grid), resolution=2.0, origin=(10.0, 20.0)), grid


def test_pool_at_cell_centre_returns_cell():
    fm, grid = _feature_grid()
    # col 3, row 1
    np.testing.assert_allclose(pool_features(fm, [[16.0, 22.0]])[0], grid[:, 1, 3])


def test_pool_outside_map_is_zero():
    fm, _ = _feature_grid()
    np.testing.assert_array_equal(pool_features(fm, [[1000.0, -1000.0]]), np.zeros((1, 16)))


def test_pool_midway_is_mean_of_neighbours():
    fm, grid = _feature_grid()
    np.testing.assert_allclose(pool_features(fm, [[13.0, 20.0]])[0], 0.5 * (grid[:, 0, 1] + grid[:, 0, 2]))


def test_pool_is_consistent_under_map_translation():
    model = _model(seed=2)
    base = _map(h=20, w=20, seed=4)
    moved = SemanticMap(grid=base.grid, resolution=base.resolution,
                        origin=(base.origin[0] + 7.0, base.origin[1] - 3.0))
    pts = np.array([[-12.3, -10.1], [-9.0, -8.4]])
    a = pool_features(extract_feature_map(base, model), pts)
    b = pool_features(extract_feature_map(moved, model), pts + [7.0, -3.0])
    np.testing.assert_allclose(a, b, atol=1e-12)


# -----------------
# Refinement
# -----------------

def test_zero_head_is_identity():
    model = _model()
    fm = extract_feature_map(_map(), model)
    prediction = np.column_stack([np.linspace(-5, 5, 8), np.linspace(0, 7, 8)])
    pi = np.random.default_rng(0).normal(size=48)
    out = refine(prediction, pi, fm, model)
    np.testing.assert_array_equal(out.coords, prediction)
    np.testing.assert_array_equal(out.offsets, np.zeros_like(prediction))
    assert len(out.steps) == 4


def test_refine_is_deterministic():
    model = _model(affine_bridge=True)
    model.head.weight.data = np.random.default_rng(1).normal(scale=0.1, size=model.head.weight.shape)
    fm = extract_feature_map(_map(), model)
    prediction = np.column_stack([np.zeros(8), np.arange(8.0)])
    pi = np.random.default_rng(0).normal(size=48)
    a = refine(prediction, pi, fm, model)
    b = refine(prediction, pi, fm, model)
    np.testing.assert_array_equal(a.coords, b.coords)
    assert not np.allclose(a.coords, prediction)


def test_offsets_accumulate_over_iterations():
    model = _model()
    model.head.bias.data = np.array([0.5, 0.0])
    fm = extract_feature_map(_map(), model)
    prediction = np.zeros((3, 2))
    out = refine(prediction, np.ones(48), fm, model, iterations=3)
    np.testing.assert_allclose(out.coords, [[1.5, 0.0]] * 3, atol=1e-12)
    np.testing.assert_allclose(out.steps[0], [[0.5, 0.0]] * 3, atol=1e-12)


def test_offsets_are_rotated_into_the_world():
    model = _model()
    model.head.bias.data = np.array([0.0, 1.0])
    fm = extract_feature_map(_map(), model)
    transform = NormalizationTransform(translation=(0.0, 0.0), rotation=np.pi / 2)
    out = refine(np.zeros((2, 2)), np.ones(48), fm, model, transform=transform, iterations=1)
    expected = np.array([0.0, 1.0]) @ rotation_matrix(np.pi / 2)
    np.testing.assert_allclose(out.coords, [expected, expected], atol=1e-12)


def test_refine_futures_returns_world_frame(make_straight):
    model = _model()
    sample = make_straight(1.0, "s0000-straight-b0-0@0", map_ref="s0000")
    fm = extract_feature_map(_map(), model)
    out = refine_futures(np.stack([sample.future, sample.future]), sample, np.ones(48), fm, model)
    assert out.shape == (2, 8, 2)
    np.testing.assert_allclose(out[0], sample.world_future(), atol=1e-12)


# -----------------
# Joint training
# -----------------

def test_train_refinement_starts_from_unrefined_loss(make_straight):
    samples = [make_straight(s, f"s000{i}-straight-b0-0@0", map_ref=f"s000{i}") for i, s in enumerate((1.0, 2.0))]
    maps = {"s0000": _map(h=24, w=24, origin=(-6.0, -6.0)), "s0001": _map(h=24, w=24, seed=1, origin=(-6.0, -6.0))}
    encdec = EncDecModel(4, 8, past_hidden=8, future_hidden=8, rng=np.random.default_rng(0))
    memory = fill_memory(samples, encdec, None)
    refiner = RefinementModel(hidden_width=8, iterations=2, rng=np.random.default_rng(0))
    decoder_before = encdec.decoder.w_update.data.copy()
    encoder_before = encdec.past_encoder.w_update.data.copy()

    result = train_refinement(samples, maps, encdec, refiner, memory, 2, learning_rate=1e-3,
                              rng=np.random.default_rng(0))
    assert result.first_step_loss == pytest.approx(result.first_step_unrefined_loss)
    assert len(result.history) == 2
    assert not np.array_equal(encdec.decoder.w_update.data, decoder_before)
    np.testing.assert_array_equal(encdec.past_encoder.w_update.data, encoder_before)
    assert not refiner.training


def test_train_refinement_needs_maps(make_straight):
    samples = [make_straight(1.0, "a", map_ref="missing")]
    encdec = EncDecModel(4, 8, past_hidden=8, future_hidden=8, rng=np.random.default_rng(0))
    with pytest.raises(ValueError):
        train_refinement(samples, {}, encdec, RefinementModel(hidden_width=8), fill_memory(samples, encdec, None), 1)


def test_identity_refiner_keeps_off_road_counts(lookup_codec):
    config = SyntheticConfig(n_straight=3, n_arc=3, n_junction=2, extra_points=2, map_resolution=2.0)
    dataset = generate_synthetic_dataset(config, seed=4)
    samples = build_samples(dataset.trajectories, 2.0, 4.0)
    memory = fill_memory(samples, lookup_codec, None)
    horizons = {4.0: 8}
    plain = evaluate(lookup_codec, memory, None, samples, [1, 3], horizons, maps=dataset.maps)
    refined = evaluate(lookup_codec, memory, _model(), samples, [1, 3], horizons, maps=dataset.maps)
    assert refined.extras["off_road_refined"] == refined.extras["off_road_unrefined"]
    assert refined.extras["off_road_refined"] >= 0.0
    np.testing.assert_allclose(refined.summary[["ade", "fde"]].to_numpy(), plain.summary[["ade", "fde"]].to_numpy(),
                               atol=1e-9)
