import json
import subprocess
import sys

import numpy as np
import pytest

from scbnet import formats
from scbnet.cli import EXIT_DATA, EXIT_NUMERIC, EXIT_OK, EXIT_USAGE, build_parser, main

SUBCOMMANDS = ("synth", "ingest", "rasterize", "split", "patches", "train", "finetune", "predict", "evaluate",
               "plot", "gradcheck")

TINY = {
    "version": 1,
    "pipeline": {"block": 8, "patches": {"patch": 16, "max_overlap": 0.5, "n_patches": 12, "downscale_frac": 0.0,
                                         "rotate_frac": 0.0}},
    "arch": {"depth": 2, "base_filters": 4, "embed_channels": 4, "patch_size": 16},
    "train": {"batch_size": 4, "learning_rate": 0.003, "max_epochs": 2, "patience": 2},
}


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    assert main(["synth", "--seed", "7", "--out", str(root / "data"), "--height", "32", "--width", "32",
                 "--n-aux", "2", "--n-samples", "150", "--separation", "2"]) == EXIT_OK
    cfg = dict(TINY, data={"aux": ["data/aux.grd"], "samples": "data/samples.csv"})
    (root / "cfg.json").write_text(json.dumps(cfg))
    assert main(["train", "--config", str(root / "cfg.json"), "--out", str(root / "run")]) == EXIT_OK
    return root


def test_help_lists_every_subcommand(capsys):
    with pytest.raises(SystemExit) as exc:
        build_parser().parse_args(["--help"])
    assert exc.value.code == 0
    out = capsys.readouterr().out
    for name in SUBCOMMANDS:
        assert name in out


@pytest.mark.parametrize("name", SUBCOMMANDS)
def test_subcommand_help_documents_every_flag(name):
    parser = build_parser()
    sub = parser._subparsers._group_actions[0].choices[name]
    for action in sub._actions:
        if action.dest != "help":
            assert action.help, f"{name} {action.option_strings} lacks help"


def test_training_help_shows_reference_defaults(capsys):
    assert main(["train", "--help"]) == EXIT_OK
    out = " ".join(capsys.readouterr().out.split())
    for text in ("(default 16)", "(default 5e-05)", "(default 500)", "(default 50)", "(default 0.001)",
                 "(default 0.5; 0.3", "patch size 160x160", "DropBlock rate 0.3"):
        assert text in out


def test_unknown_flag_is_a_usage_error(capsys):
    assert main(["train", "--bogus", "1", "--out", "x"]) == EXIT_USAGE
    assert "usage" in capsys.readouterr().err
    assert main(["nosuchcommand"]) == EXIT_USAGE
    assert main([]) == EXIT_USAGE


def test_missing_training_data_is_a_usage_error(tmp_path):
    assert main(["train", "--out", str(tmp_path)]) == EXIT_USAGE


def test_missing_file_is_a_data_error(tmp_path):
    assert main(["split", "--masks", str(tmp_path / "none.grd"), "--out", str(tmp_path / "s.json")]) == EXIT_DATA


def test_bad_config_is_a_data_error(tmp_path):
    (tmp_path / "c.json").write_text(json.dumps({"version": 9}))
    assert main(["train", "--config", str(tmp_path / "c.json"), "--out", str(tmp_path)]) == EXIT_DATA


def test_failed_gradcheck_is_a_numeric_error(tmp_path, capsys):
    assert main(["gradcheck", "--seeds", "1", "--tol", "1e-30", "--out", str(tmp_path)]) == EXIT_NUMERIC
    assert "FAIL" in capsys.readouterr().out


def test_synth_writes_a_trainable_config(workspace):
    cfg = json.loads((workspace / "data" / "config.json").read_text())
    assert cfg["data"] == {"aux": ["aux.grd"], "samples": "samples.csv"}
    assert cfg["arch"]["depth"] == 3 and cfg["train"]["batch_size"] == 8


def test_train_outputs_and_manifest(workspace):
    run = workspace / "run"
    for name in ("checkpoint.scbn", "history.csv", "stack.grd", "masks.grd", "split.json", "vocabulary.json",
                 "learning_curves.png", "run_manifest.json"):
        assert (run / name).is_file(), name
    man = json.loads((run / "run_manifest.json").read_text())
    assert man["subcommand"] == "train" and man["seed"] == 0
    assert set(man["artifact_sha256"]) >= {"checkpoint", "history"}
    assert man["config"]["train"]["max_epochs"] == 2
    vocab = json.loads((run / "vocabulary.json").read_text())
    assert set(vocab["palette"]) == set(vocab["classes"])


def test_train_is_idempotent(workspace):
    again = workspace / "run2"
    assert main(["train", "--config", str(workspace / "cfg.json"), "--out", str(again)]) == EXIT_OK
    a = json.loads((workspace / "run" / "run_manifest.json").read_text())["artifact_sha256"]
    b = json.loads((again / "run_manifest.json").read_text())["artifact_sha256"]
    for key in ("checkpoint", "history", "masks", "split", "stack"):
        assert a[key] == b[key], key


@pytest.mark.parametrize("mode", ["--constrained", "--unconstrained"])
def test_predict_evaluate_plot(workspace, mode):
    run = workspace / "run"
    out = workspace / f"pred{mode}"
    args = ["predict", "--checkpoint", str(run / "checkpoint.scbn"), "--stack", str(run / "stack.grd"),
            "--draws", "3", mode, "--out", str(out)]
    if mode == "--constrained":
        args += ["--masks", str(run / "masks.grd"), "--split", str(run / "split.json")]
    assert main(args) == EXIT_OK
    for name in ("mean.grd", "std.grd", "argmax.grd", "argmax.png", "std_max.png", "run_manifest.json"):
        assert (out / name).is_file()
    mean, names, _ = formats.read_grd(out / "mean.grd")
    std, _, _ = formats.read_grd(out / "std.grd")
    np.testing.assert_allclose(mean.sum(axis=0), 1.0, atol=1e-4)
    assert (std >= 0).all()
    expected = "constrained" if mode == "--constrained" else "unconstrained"
    assert json.loads((out / "run_manifest.json").read_text())["config"]["mode"] == expected

    ev = workspace / f"eval{mode}"
    assert main(["evaluate", "--mean", str(out / "mean.grd"), "--masks", str(run / "masks.grd"), "--split",
                 str(run / "split.json"), "--role", "test", "--out", str(ev)]) == EXIT_OK
    metrics = json.loads((ev / "metrics.json").read_text())
    assert 0 <= metrics["weighted_accuracy"] <= 1 and metrics["classes"] == names
    assert (ev / "misclassification.png").is_file()

    png = workspace / f"classes{mode}.png"
    assert main(["plot", "--input", str(out / "argmax.grd"), "--kind", "classes", "--vocabulary",
                 str(run / "vocabulary.json"), "--out", str(png)]) == EXIT_OK
    assert png.read_bytes()[:8] == b"\x89PNG\r\n\x1a\n"


def test_predict_constrained_needs_masks(workspace):
    run = workspace / "run"
    assert main(["predict", "--checkpoint", str(run / "checkpoint.scbn"), "--stack", str(run / "stack.grd"),
                 "--draws", "1", "--out", str(workspace / "p")]) == EXIT_USAGE


def test_predict_thread_env(workspace, monkeypatch):
    run = workspace / "run"
    base = ["predict", "--checkpoint", str(run / "checkpoint.scbn"), "--stack", str(run / "stack.grd"),
            "--draws", "2", "--unconstrained"]
    monkeypatch.setenv("SCBNET_THREADS", "2")
    assert main(base + ["--out", str(workspace / "t2")]) == EXIT_OK
    assert json.loads((workspace / "t2" / "run_manifest.json").read_text())["config"]["threads"] == 2
    monkeypatch.setenv("SCBNET_THREADS", "zero")
    assert main(base + ["--out", str(workspace / "t3")]) == EXIT_USAGE


def test_predict_is_idempotent(workspace):
    run = workspace / "run"
    hashes = []
    for name in ("i1", "i2"):
        assert main(["predict", "--checkpoint", str(run / "checkpoint.scbn"), "--stack", str(run / "stack.grd"),
                     "--draws", "2", "--unconstrained", "--out", str(workspace / name)]) == EXIT_OK
        hashes.append(json.loads((workspace / name / "run_manifest.json").read_text())["artifact_sha256"])
    assert hashes[0] == hashes[1]


def test_finetune_from_checkpoint(workspace):
    assert main(["synth", "--seed", "8", "--out", str(workspace / "dataB"), "--height", "32", "--width", "32",
                 "--n-aux", "2", "--n-classes", "3", "--n-samples", "150"]) == EXIT_OK
    out = workspace / "ft"
    assert main(["finetune", "--checkpoint", str(workspace / "run" / "checkpoint.scbn"), "--config",
                 str(workspace / "cfg.json"), "--aux", str(workspace / "dataB" / "aux.grd"), "--samples",
                 str(workspace / "dataB" / "samples.csv"), "--epochs", "1", "--out", str(out)]) == EXIT_OK
    assert "finetune" in (out / "history.csv").read_text()


def test_stepwise_data_subcommands(workspace):
    d = workspace / "data"
    steps = workspace / "steps"
    assert main(["ingest", "--aux", str(d / "aux.grd"), "--out", str(steps / "stack.grd")]) == EXIT_OK
    assert main(["rasterize", "--stack", str(steps / "stack.grd"), "--samples", str(d / "samples.csv"),
                 "--out", str(steps)]) == EXIT_OK
    assert main(["split", "--masks", str(steps / "masks.grd"), "--block", "8", "--validation-rect", "0", "0", "8",
                 "8", "--out", str(steps / "split.json")]) == EXIT_OK
    assert main(["patches", "--stack", str(steps / "stack.grd"), "--masks", str(steps / "masks.grd"), "--split",
                 str(steps / "split.json"), "--patch", "16", "--n-patches", "5", "--downscale-frac", "0",
                 "--out", str(steps / "patches.npz")]) == EXIT_OK
    with np.load(steps / "patches.npz") as z:
        assert z["aux"].shape[1:] == (2, 16, 16)
    split = json.loads((steps / "split.json").read_text())
    assert split["roles"][0][0] == "validation"
    assert json.loads((steps / "patches.json").read_text())["n_produced"] == 5


def test_console_script_entry_point():
    out = subprocess.run([sys.executable, "-m", "scbnet.cli", "--version"], capture_output=True, text=True)
    assert out.returncode == 0 and "scbnet" in out.stdout


def test_synth_config_trains_end_to_end(tmp_path):
    data = tmp_path / "data"
    assert main(["synth", "--seed", "7", "--out", str(data), "--height", "64", "--width", "64"]) == EXIT_OK
    assert main(["train", "--config", str(data / "config.json"), "--epochs", "1", "--out",
                 str(tmp_path / "run")]) == EXIT_OK
    assert len((tmp_path / "run" / "history.csv").read_text().splitlines()) == 2
