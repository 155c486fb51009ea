import csv

import numpy as np
import pytest

from scbnet import geodata as G
from scbnet.exceptions import ShapeError
from scbnet.model import ArchConfig, MASK_INPUT_PARAMS, build_model
from scbnet.pipeline import PipelineConfig, prepare
from scbnet.synth import SynthConfig, gen_dataset
from scbnet.training import (HISTORY_FIELDS, TrainConfig, TrainHistory, epochs_to_reach, finetune, masked_ssim,
                             train)

TINY_PATCHES = G.PatchConfig(patch=16, max_overlap=0.5, n_patches=12, downscale_frac=0.0, rotate_frac=0.25)


def _data(seed=0, k=3):
    raw, samples, _ = gen_dataset(SynthConfig(seed=seed, height=32, width=32, n_classes=k, n_aux=2,
                                              n_samples=160, separation=2.0))
    stack = G.ingest_rasters([raw.values])
    return prepare(stack, samples, PipelineConfig(block=8, split_seed=seed, patch_seed=seed, patches=TINY_PATCHES))


def _model(data, seed=0):
    arch = ArchConfig(n_aux_channels=2, n_classes=len(data.vocabulary), depth=2, base_filters=4,
                      embed_channels=4, patch_size=16)
    return build_model(arch, seed, data.vocabulary)


@pytest.fixture(scope="module")
def data():
    return _data()


@pytest.fixture(scope="module")
def run(data):
    cfg = TrainConfig(batch_size=4, learning_rate=3e-3, max_epochs=4, patience=4, seed=0)
    return train(_model(data), data.patches, data.split, cfg, data.stack, data.masks)


def test_history_rows_and_columns(run):
    best, hist = run
    assert [r["epoch"] for r in hist.rows] == [1, 2, 3, 4]
    for r in hist.rows:
        assert set(HISTORY_FIELDS) <= set(r)
        assert 0 <= r["train_acc"] <= 1 and 0 <= r["test_acc"] <= 1
        assert np.isfinite(r["loss"]) and r["loss"] > 0
        assert -1 <= r["train_ssim"] <= 1


def test_returned_checkpoint_is_the_best_epoch(run):
    best, hist = run
    top = hist.best("test_acc")
    assert best.meta["best_epoch"] == top["epoch"]
    assert best.meta["best_test_acc"] == max(hist.column("test_acc"))
    assert best.epoch == top["epoch"]
    assert best.history == hist.rows


def test_training_changes_parameters(data, run):
    start = _model(data)
    best, _ = run
    assert any(not np.array_equal(best.params[k], start.params[k]) for k in start.params)


def test_training_is_deterministic(data, run, tmp_path):
    cfg = TrainConfig(batch_size=4, learning_rate=3e-3, max_epochs=4, patience=4, seed=0)
    again, hist = train(_model(data), data.patches, data.split, cfg, data.stack, data.masks)
    run[1].to_csv(tmp_path / "a.csv")
    hist.to_csv(tmp_path / "b.csv")
    assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()
    for k in again.params:
        np.testing.assert_array_equal(again.params[k], run[0].params[k])


def test_early_stopping_after_patience(data):
    # negligible steps never beat a 0.5 improvement delta
    cfg = TrainConfig(batch_size=4, learning_rate=1e-12, max_epochs=10, patience=2, early_stop_delta=0.5, seed=0)
    _, hist = train(_model(data), data.patches, data.split, cfg, data.stack, data.masks)
    assert len(hist) == 3


def test_target_accuracy_stops_early(data):
    cfg = TrainConfig(batch_size=4, learning_rate=3e-3, max_epochs=5, patience=5, seed=0, target_accuracy=0.0)
    _, hist = train(_model(data), data.patches, data.split, cfg, data.stack, data.masks)
    assert len(hist) == 1


def test_history_csv_excludes_wall_time_by_default(run, tmp_path):
    hist = run[1]
    hist.to_csv(tmp_path / "h.csv")
    rows = list(csv.reader(open(tmp_path / "h.csv")))
    assert tuple(rows[0]) == HISTORY_FIELDS and len(rows) == 5
    hist.to_csv(tmp_path / "t.csv", include_timing=True)
    assert next(csv.reader(open(tmp_path / "t.csv")))[-1] == "wall_time"


def test_history_rejects_bad_rows():
    h = TrainHistory()
    row = {k: 0.0 for k in HISTORY_FIELDS}
    row.update(tag="t", epoch=1)
    h.append(row, 0.1)
    with pytest.raises(ValueError):
        h.append(dict(row), 0.1)
    with pytest.raises(ValueError):
        h.append({"epoch": 2}, 0.1)


def test_epochs_to_reach():
    rows = [{"epoch": 1, "test_acc": 0.4}, {"epoch": 2, "test_acc": 0.75}, {"epoch": 3, "test_acc": 0.8}]
    assert epochs_to_reach(rows, 0.7) == 2
    assert epochs_to_reach(rows, 0.9) is None


def test_masked_ssim_prefers_the_right_classes(data):
    m = data.masks
    onehot = np.eye(m.n_classes)[np.maximum(m.labels(), 0)].transpose(2, 0, 1)
    wrong = np.roll(onehot, 1, axis=0)
    assert masked_ssim(onehot, m) > masked_ssim(wrong, m)
    assert -1 <= masked_ssim(wrong, m) <= 1


def test_finetune_onto_new_vocabulary(data, run):
    other = _data(seed=5, k=2)
    cfg = TrainConfig(batch_size=4, learning_rate=3e-3, max_epochs=2, patience=2, seed=1)
    tuned, hist = finetune(run[0], other.patches, other.split, other.vocabulary, cfg, other.stack, other.masks)
    assert tuned.classes == other.vocabulary and tuned.arch.n_classes == 2
    assert hist.rows[0]["tag"] == "finetune" and hist.rows[0]["epoch"] == 1
    assert tuned.params[MASK_INPUT_PARAMS[0]].shape[1] == run[0].arch.embed_channels + 2
    assert tuned.params["net1.enc0.conv1.w"].shape == run[0].params["net1.enc0.conv1.w"].shape


def test_finetune_same_vocabulary_keeps_head(data, run):
    cfg = TrainConfig(batch_size=4, learning_rate=1e-12, max_epochs=1, patience=1, seed=0)
    tuned, _ = finetune(run[0], data.patches, data.split, data.vocabulary, cfg, data.stack, data.masks)
    np.testing.assert_allclose(tuned.params["net2.head.w"], run[0].params["net2.head.w"], atol=1e-6)


def test_config_validation_and_round_trip():
    for bad in ({"batch_size": 0}, {"learning_rate": -1.0}, {"patience": 600}, {"holdout_rate": 1.0},
                {"early_stop_delta": -0.1}):
        with pytest.raises(ValueError):
            TrainConfig(**bad)
    cfg = TrainConfig(holdout_rate=0.3, class_weights=(1.0, 2.0))
    assert TrainConfig.from_dict(cfg.to_dict()) == cfg
    with pytest.raises(ValueError, match="unknown"):
        TrainConfig.from_dict({"epochs": 3})


def test_default_hyperparameters():
    cfg = TrainConfig()
    assert (cfg.batch_size, cfg.learning_rate, cfg.max_epochs, cfg.patience, cfg.early_stop_delta) == \
        (16, 5e-5, 500, 50, 1e-3)
    assert cfg.holdout_rate == 0.5 and cfg.gamma == 2.0


def test_train_rejects_mismatched_patches(data):
    arch = ArchConfig(n_aux_channels=3, n_classes=len(data.vocabulary), depth=2, base_filters=4, patch_size=16)
    with pytest.raises(ShapeError, match="aux channels"):
        train(build_model(arch, 0, data.vocabulary), data.patches, data.split, TrainConfig(max_epochs=1, patience=1),
              data.stack, data.masks)
