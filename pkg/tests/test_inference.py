import numpy as np
import pytest

from scbnet import geodata as G
from scbnet.exceptions import DataError, ShapeError
from scbnet.inference import (MISCLASS_CORRECT, MISCLASS_UNSAMPLED, MISCLASS_WRONG, EnsembleResult, evaluate,
                              mc_predict, predict_once, ramp, tile_layout, window_starts)
from scbnet.model import ArchConfig, build_model

ARCH = ArchConfig(n_aux_channels=2, n_classes=3, depth=2, base_filters=4, embed_channels=4, patch_size=16)


@pytest.fixture(scope="module")
def ckpt():
    return build_model(ARCH, 0, ["a", "b", "c"])


@pytest.fixture
def aux(rng):
    return rng.standard_normal((2, 16, 16)).astype(np.float32)


def test_single_draw_has_zero_std(ckpt, aux):
    r = mc_predict(ckpt, aux, None, n_draws=1, rng=0)
    assert not r.std.any()
    np.testing.assert_array_equal(r.mean, predict_once(ckpt, aux, np.zeros((3, 16, 16)), "mc_sample",
                                                       np.random.default_rng(np.random.SeedSequence(0).spawn(1)[0])))


def test_identical_draws_average_to_the_single_draw(ckpt, aux):
    r = mc_predict(ckpt, aux, None, n_draws=5, mode="deterministic")
    single = predict_once(ckpt, aux, np.zeros((3, 16, 16)))
    np.testing.assert_allclose(r.mean, single, rtol=0, atol=1e-15)
    np.testing.assert_allclose(r.std, 0, atol=1e-7)


def test_ensemble_mean_is_a_distribution_and_std_nonnegative(ckpt, aux):
    r = mc_predict(ckpt, aux, None, n_draws=6, rng=1)
    np.testing.assert_allclose(r.mean.sum(axis=0), 1.0, atol=1e-4)
    assert (r.std >= 0).all() and r.std.max() > 0
    np.testing.assert_array_equal(r.argmax_map, r.mean.argmax(axis=0))
    assert r.mode == "unconstrained" and r.n_draws == 6


def test_std_is_population_std_of_draws(ckpt, aux):
    seeds = np.random.SeedSequence(4).spawn(4)
    zeros = np.zeros((3, 16, 16))
    draws = np.stack([predict_once(ckpt, aux, zeros, "mc_sample", np.random.default_rng(s)) for s in seeds])
    r = mc_predict(ckpt, aux, None, n_draws=4, rng=4)
    np.testing.assert_allclose(r.mean, draws.mean(0), atol=1e-12)
    np.testing.assert_allclose(r.std, draws.std(0), atol=1e-9)


def test_thread_count_does_not_change_the_result(ckpt, aux):
    a = mc_predict(ckpt, aux, None, n_draws=4, rng=2, threads=1)
    b = mc_predict(ckpt, aux, None, n_draws=4, rng=2, threads=3)
    np.testing.assert_allclose(a.mean, b.mean, atol=1e-12)
    np.testing.assert_allclose(a.std, b.std, atol=1e-7)


def test_constrained_masks_change_the_prediction(ckpt, aux):
    masks = np.zeros((3, 16, 16), np.float32)
    masks[1, :, :8] = 1
    a = mc_predict(ckpt, aux, masks, n_draws=1, mode="deterministic")
    b = mc_predict(ckpt, aux, None, n_draws=1, mode="deterministic")
    assert a.mode == "constrained" and np.abs(a.mean - b.mean).max() > 0


def test_rejects_bad_inputs(ckpt, aux):
    with pytest.raises(ValueError):
        mc_predict(ckpt, aux, None, n_draws=0)
    with pytest.raises(ShapeError):
        mc_predict(ckpt, aux, np.zeros((2, 16, 16)), n_draws=1)


def test_window_starts_cover_grid():
    assert window_starts(40, 16, 8) == [0, 8, 16, 24]
    assert window_starts(36, 16, 8) == [0, 8, 16, 20]
    with pytest.raises(ShapeError):
        window_starts(8, 16, 4)


def test_ramp_is_symmetric_and_partitions_unity():
    w = ramp(16, 8, False, False)
    np.testing.assert_allclose(w, w[::-1])
    # overlapped cosine ramps of neighbouring tiles sum to one
    np.testing.assert_allclose(w[8:] + w[:8], 1.0)
    assert ramp(16, 8, True, True).min() == 1.0


def test_tile_layout_weights_cover_every_pixel():
    layout = tile_layout(40, 48, 16, 8, 4, context=8)
    cover = np.zeros((40, 48))
    for r, c, h, w, wt, (a, b, cc, d) in layout:
        cover[r:r + h, c:c + w] += wt
        assert a <= r and r + h <= b and cc <= c and c + w <= d
        assert (b - a) % 4 == 0 and (d - cc) % 4 == 0 and a % 4 == 0 and cc % 4 == 0
    assert cover.min() > 0


def test_tile_layout_errors():
    with pytest.raises(ShapeError):
        tile_layout(30, 32, None, 0, 4)
    with pytest.raises(ShapeError):
        tile_layout(32, 32, 10, 0, 4)
    with pytest.raises(ShapeError):
        tile_layout(32, 32, 16, 16, 4)
    with pytest.raises(ShapeError):
        tile_layout(32, 32, 16, 4, 4, context=-1)


def test_tiled_prediction_with_wide_context_matches_untiled(ckpt, rng):
    aux = rng.standard_normal((2, 32, 32)).astype(np.float32)
    masks = np.zeros((3, 32, 32), np.float32)
    full = predict_once(ckpt, aux, masks)
    tiled = predict_once(ckpt, aux, masks, tile=16, overlap=8, context=16)
    assert np.abs(full - tiled).mean() < 1e-4
    np.testing.assert_allclose(tiled.sum(axis=0), 1.0, atol=1e-5)


def _toy_result():
    mean = np.zeros((2, 3, 3))
    mean[0] = 1.0
    mean[:, 0, 2] = [0.2, 0.8]
    return EnsembleResult(mean, np.zeros_like(mean), 1, "constrained", mean.argmax(axis=0))


def test_evaluate_counts_only_sampled_pixels():
    probs = np.zeros((2, 3, 3))
    valid = np.zeros((1, 3, 3))
    probs[0, 0, 0] = probs[1, 0, 1] = probs[1, 0, 2] = 1
    valid[0, 0, :] = 1
    masks = G.SparseProbMasks(probs, valid)
    out = evaluate(_toy_result(), masks, role=None)
    assert out["n_pixels"] == 3 and np.sum(out["confusion_counts"]) == 3
    assert out["confusion_counts"] == [[1, 0], [1, 1]]
    assert out["weighted_accuracy"] == pytest.approx(0.75)
    assert out["misclassification"].tolist() == [[MISCLASS_CORRECT, MISCLASS_WRONG, MISCLASS_CORRECT],
                                                 [MISCLASS_UNSAMPLED] * 3, [MISCLASS_UNSAMPLED] * 3]
    again = evaluate(_toy_result(), masks, role=None)
    assert again["confusion_rates"] == out["confusion_rates"]


def test_evaluate_role_without_samples_raises():
    probs = np.zeros((2, 3, 3))
    valid = np.zeros((1, 3, 3))
    probs[0, 0, 0] = valid[0, 0, 0] = 1
    masks = G.SparseProbMasks(probs, valid)
    split = G.SpatialSplit(np.array([[G.ROLE_TRAIN]], np.int8), 3, (3, 3))
    with pytest.raises(DataError, match="test"):
        evaluate(_toy_result(), masks, split, "test")
