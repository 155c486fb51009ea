import numpy as np
import pytest
from PIL import Image

from scbnet.plotting import (BASE_PALETTE, render_classes, render_curves, render_misclassification, render_scalar,
                             vocabulary_document)


def test_vocabulary_palette_is_fixed_per_position():
    a = vocabulary_document(["granite", "gabbro"])
    b = vocabulary_document(["granite", "gabbro"])
    assert a == b and a["palette"]["granite"] == BASE_PALETTE[0]
    with pytest.raises(ValueError):
        vocabulary_document(["x"], {"y": "#000000"})


def test_class_map_colours(tmp_path):
    vocab = vocabulary_document(["a", "b"], {"a": "#ff0000", "b": "#0000ff"})
    render_classes(np.array([[0, 1], [-1, 0]]), vocab, tmp_path / "c.png", scale=2)
    px = np.asarray(Image.open(tmp_path / "c.png"))
    assert px.shape == (4, 4, 3)
    assert px[0, 0].tolist() == [255, 0, 0] and px[0, 2].tolist() == [0, 0, 255]
    assert px[2, 0].tolist() == [255, 255, 255]
    with pytest.raises(ValueError):
        render_classes(np.array([[2]]), vocab, tmp_path / "bad.png")


def test_scalar_map_spans_grayscale(tmp_path):
    render_scalar(np.array([[0.0, 0.5, 1.0]]), tmp_path / "s.png")
    assert np.asarray(Image.open(tmp_path / "s.png")).tolist() == [[0, 128, 255]]
    render_scalar(np.zeros((2, 2)), tmp_path / "z.png")
    assert not np.asarray(Image.open(tmp_path / "z.png")).any()


def test_misclassification_and_curves(tmp_path):
    render_misclassification(np.array([[0, 1, 2]]), tmp_path / "m.png")
    px = np.asarray(Image.open(tmp_path / "m.png"))
    assert px[0, 0].tolist() == [255, 255, 255] and px[0, 1, 1] > px[0, 1, 0] and px[0, 2, 0] > px[0, 2, 1]
    render_curves({"train_acc": [0.2, 0.5, float("nan"), 0.9], "test_acc": [0.1, 0.4, 0.6, 0.7]},
                  tmp_path / "h.png")
    assert Image.open(tmp_path / "h.png").size == (480, 320)
