"""Command-line entry point: ``scbnet <subcommand> [options]``.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numeric failure.
Every subcommand writes ``run_manifest.json`` next to its outputs.
"""
from __future__ import annotations

import argparse
import logging
import os
import sys
from dataclasses import replace
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np

from . import __version__
from .exceptions import DataError, NumericError, ShapeError
from .formats import read_grd, read_json, sha256_file, write_csv_grid, write_grd, write_json
from .geodata import (PatchConfig, RasterStack, SampleTable, SparseProbMasks, SpatialSplit, extract_patches,
                      filter_rare_classes, ingest_rasters, make_spatial_split, rasterize_samples)
from .model import build_model, load_checkpoint, save_checkpoint
from .pipeline import RunConfig, desk_run_config, prepare
from .plotting import (render_classes, render_curves, render_misclassification, render_scalar,
                       vocabulary_document)
from .synth import SynthConfig, write_dataset
from .training import TrainConfig, finetune, train

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3
THREADS_ENV = "SCBNET_THREADS"
VALID_CHANNEL = "__valid__"

_T = TrainConfig()
_P = PatchConfig()


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    """argparse exits with status 2 by default; usage errors here exit 1."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


class _HelpFormatter(argparse.ArgumentDefaultsHelpFormatter):
    """Show ``(default x)`` only for real defaults not already spelled out in the help."""

    def _get_help_string(self, action):
        help_text = action.help or ""
        if action.default is None or action.default is argparse.SUPPRESS or action.nargs == 0 \
                or "default" in help_text:
            return help_text
        return f"{help_text} (default %(default)s)"


# ---------------------------------------------------------------- file helpers

def save_masks(path, masks: SparseProbMasks, vocabulary: Sequence[str]) -> None:
    values = np.concatenate([masks.probs, masks.valid], axis=0)
    write_grd(path, values, list(vocabulary) + [VALID_CHANNEL])


def load_masks(path):
    values, names, _ = read_grd(path)
    if not names or names[-1] != VALID_CHANNEL:
        raise DataError(f"{path}: not a mask raster (last channel must be {VALID_CHANNEL})")
    return SparseProbMasks(values[:-1], values[-1:]), names[:-1]


def load_stack(path) -> RasterStack:
    values, names, nodata = read_grd(path)
    return RasterStack(values, names, nodata)


def save_stack(path, stack: RasterStack) -> None:
    stack.save(path)


def load_split(path) -> SpatialSplit:
    try:
        return SpatialSplit.from_json(read_json(path))
    except (KeyError, TypeError) as exc:
        raise DataError(f"{path}: malformed split file ({exc})") from None


def _out_dir(path) -> Path:
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    return out


def write_manifest(out_dir: Path, subcommand: str, args: argparse.Namespace, inputs: Dict[str, str],
                   outputs: Dict[str, str], seed=None, config: Optional[dict] = None) -> Path:
    def _hash(paths):
        return {k: sha256_file(p) for k, p in paths.items() if p and Path(p).is_file()}

    manifest = {
        "subcommand": subcommand,
        "version": __version__,
        "config_path": getattr(args, "config", None),
        "config": config,
        "seed": seed,
        "inputs": {k: str(v) for k, v in inputs.items()},
        "outputs": {k: str(v) for k, v in outputs.items()},
        "input_sha256": _hash(inputs),
        "artifact_sha256": _hash(outputs),
    }
    path = out_dir / "run_manifest.json"
    write_json(path, manifest)
    return path


def _load_run_config(args) -> tuple:
    raw = read_json(args.config) if getattr(args, "config", None) else {}
    if not isinstance(raw, dict):
        raise DataError("config must be a JSON object")
    cfg = RunConfig.from_dict(raw)
    return cfg, dict(raw.get("data", {}))


def _resolve(base: Optional[str], p) -> str:
    p = Path(p)
    return str(p if p.is_absolute() or base is None else Path(base).parent / p)


def _train_overrides(cfg: TrainConfig, args) -> TrainConfig:
    upd = {}
    for flag, key in (("batch_size", "batch_size"), ("lr", "learning_rate"), ("epochs", "max_epochs"),
                      ("patience", "patience"), ("delta", "early_stop_delta"), ("holdout_rate", "holdout_rate"),
                      ("gamma", "gamma"), ("seed", "seed"), ("target_accuracy", "target_accuracy")):
        v = getattr(args, flag, None)
        if v is not None:
            upd[key] = v
    if getattr(args, "verbose", False):
        upd["verbose"] = True
    if upd.get("max_epochs") is not None and "patience" not in upd and cfg.patience > upd["max_epochs"]:
        upd["patience"] = upd["max_epochs"]
    try:
        return replace(cfg, **upd)
    except ValueError as exc:
        raise UsageError(str(exc)) from None


# ---------------------------------------------------------------- subcommands

def cmd_synth(args) -> int:
    out = _out_dir(args.out)
    d = SynthConfig()
    cfg = SynthConfig(seed=args.seed, height=args.height or d.height, width=args.width or d.width,
                      n_classes=args.n_classes or d.n_classes, n_aux=args.n_aux or d.n_aux,
                      n_samples=args.n_samples or d.n_samples,
                      separation=d.separation if args.separation is None else args.separation,
                      noise_std=d.noise_std if args.noise_std is None else args.noise_std,
                      signature_seed=args.signature_seed)
    paths = write_dataset(cfg, out)
    run = desk_run_config(args.seed).to_dict()
    run["data"] = {"aux": ["aux.grd"], "samples": "samples.csv"}
    write_json(out / "config.json", run)
    paths["config"] = str(out / "config.json")
    write_manifest(out, "synth", args, {}, paths, args.seed, {"synth": cfg.__dict__})
    return EXIT_OK


def cmd_ingest(args) -> int:
    out = Path(args.out)
    _out_dir(out.parent)
    manifest = {}
    if args.names:
        manifest["names"] = args.names.split(",")
    if args.nodata is not None:
        manifest["nodata"] = args.nodata
    stack = ingest_rasters(args.aux, manifest)
    save_stack(out, stack)
    write_manifest(out.parent, "ingest", args, {f"aux{i}": p for i, p in enumerate(args.aux)},
                   {"stack": str(out)}, None, manifest)
    return EXIT_OK


def cmd_rasterize(args) -> int:
    out = _out_dir(args.out)
    stack = load_stack(args.stack)
    samples = SampleTable.read_csv(args.samples)
    kept, vocab = filter_rare_classes(samples, args.rare_threshold)
    masks = rasterize_samples(kept, (stack.height, stack.width), vocab)
    save_masks(out / "masks.grd", masks, vocab)
    write_json(out / "vocabulary.json", vocabulary_document(vocab))
    kept.to_csv(out / "samples_kept.csv")
    outputs = {"masks": str(out / "masks.grd"), "vocabulary": str(out / "vocabulary.json"),
               "samples_kept": str(out / "samples_kept.csv")}
    write_manifest(out, "rasterize", args, {"stack": args.stack, "samples": args.samples}, outputs, None,
                   {"rare_threshold": args.rare_threshold})
    return EXIT_OK


def cmd_split(args) -> int:
    out = Path(args.out)
    _out_dir(out.parent)
    masks, _ = load_masks(args.masks)
    rect = tuple(args.validation_rect) if args.validation_rect else None
    split = make_spatial_split(masks.shape, masks, args.block, args.train_frac, rect, args.seed)
    write_json(out, split.to_json())
    write_manifest(out.parent, "split", args, {"masks": args.masks}, {"split": str(out)}, args.seed,
                   {"block": args.block, "train_frac": args.train_frac, "validation_rect": rect})
    return EXIT_OK


def cmd_patches(args) -> int:
    out = Path(args.out)
    _out_dir(out.parent)
    stack = load_stack(args.stack)
    masks, _ = load_masks(args.masks)
    split = load_split(args.split)
    cfg = PatchConfig(args.patch, args.max_overlap, args.n_patches, args.downscale_frac, args.rotate_frac,
                      args.rotate_range)
    ps = extract_patches(stack, masks, split, cfg, args.seed, "train")
    with open(out, "wb") as fh:
        np.savez(fh, aux=ps.aux, target=ps.target, target_valid=ps.target_valid)
    mpath = out.with_suffix(".json")
    write_json(mpath, ps.manifest())
    write_manifest(out.parent, "patches", args, {"stack": args.stack, "masks": args.masks, "split": args.split},
                   {"patches": str(out), "patch_manifest": str(mpath)}, args.seed, cfg.__dict__)
    return EXIT_OK


def _data_inputs(args, data: dict) -> tuple:
    aux = args.aux or [_resolve(args.config, p) for p in data.get("aux", [])]
    samples = args.samples or (_resolve(args.config, data["samples"]) if "samples" in data else None)
    if not aux or not samples:
        raise UsageError("training data missing: pass --aux and --samples or a config with a data section")
    return list(aux), samples


def _run_training(args, pretrained=None) -> int:
    cfg, data = _load_run_config(args)
    tcfg = _train_overrides(cfg.train, args)
    pipeline = cfg.pipeline
    if args.seed is not None:
        pipeline = replace(pipeline, split_seed=args.seed, patch_seed=args.seed)
    aux_paths, samples_path = _data_inputs(args, data)
    stack = ingest_rasters(aux_paths, data.get("manifest"))
    samples = SampleTable.read_csv(samples_path)
    prep = prepare(stack, samples, pipeline)
    out = _out_dir(args.out)
    if pretrained is None:
        arch = cfg.arch_config(stack.n_channels, len(prep.vocabulary))
        ckpt, hist = train(build_model(arch, tcfg.seed, prep.vocabulary), prep.patches, prep.split, tcfg,
                           stack, prep.masks)
    else:
        ckpt, hist = finetune(pretrained, prep.patches, prep.split, prep.vocabulary, tcfg, stack, prep.masks)
    outputs = {"checkpoint": out / "checkpoint.scbn", "history": out / "history.csv",
               "stack": out / "stack.grd", "masks": out / "masks.grd", "split": out / "split.json",
               "vocabulary": out / "vocabulary.json", "curves": out / "learning_curves.png"}
    save_checkpoint(ckpt, outputs["checkpoint"])
    hist.to_csv(outputs["history"])
    save_stack(outputs["stack"], stack)
    save_masks(outputs["masks"], prep.masks, prep.vocabulary)
    write_json(outputs["split"], prep.split.to_json())
    write_json(outputs["vocabulary"], vocabulary_document(prep.vocabulary))
    render_curves({k: hist.column(k) for k in ("train_acc", "test_acc", "train_ssim", "test_ssim")},
                  outputs["curves"])
    inputs = {f"aux{i}": p for i, p in enumerate(aux_paths)}
    inputs["samples"] = samples_path
    if args.config:
        inputs["config"] = args.config
    if pretrained is not None:
        inputs["checkpoint"] = args.checkpoint
    resolved = RunConfig(pipeline, cfg.arch, tcfg).to_dict()
    write_manifest(out, args.command, args, inputs, {k: str(v) for k, v in outputs.items()}, tcfg.seed, resolved)
    print(f"best epoch {ckpt.meta['best_epoch']}  test_acc {ckpt.meta['best_test_acc']:.4f}  -> {out}")
    return EXIT_OK


def cmd_train(args) -> int:
    return _run_training(args)


def cmd_finetune(args) -> int:
    return _run_training(args, pretrained=load_checkpoint(args.checkpoint))


def _threads(args) -> int:
    if args.threads is not None:
        return args.threads
    env = os.environ.get(THREADS_ENV)
    if env is None:
        return 1
    try:
        n = int(env)
    except ValueError:
        raise UsageError(f"{THREADS_ENV} must be an integer, got {env!r}") from None
    if n < 1:
        raise UsageError(f"{THREADS_ENV} must be >= 1")
    return n


def cmd_predict(args) -> int:
    from .inference import mc_predict

    out = _out_dir(args.out)
    ckpt = load_checkpoint(args.checkpoint)
    stack = load_stack(args.stack)
    masks = None
    inputs = {"checkpoint": args.checkpoint, "stack": args.stack}
    if args.constrained:
        if not args.masks:
            raise UsageError("--constrained needs --masks")
        masks, vocab = load_masks(args.masks)
        if vocab != list(ckpt.classes):
            raise DataError(f"mask classes {vocab} differ from checkpoint classes {list(ckpt.classes)}")
        inputs["masks"] = args.masks
        if args.split:
            masks = masks.restrict(load_split(args.split).role_mask(args.condition_role))
            inputs["split"] = args.split
    threads = _threads(args)
    res = mc_predict(ckpt, stack, masks, n_draws=args.draws, tile=args.tile, overlap=args.overlap,
                     rng=args.seed, threads=threads, context=args.context)
    names = list(ckpt.classes)
    outputs = {"mean": out / "mean.grd", "std": out / "std.grd", "argmax": out / "argmax.grd",
               "argmax_png": out / "argmax.png", "std_png": out / "std_max.png"}
    write_grd(outputs["mean"], res.mean, names)
    write_grd(outputs["std"], res.std, names)
    write_grd(outputs["argmax"], res.argmax_map[None].astype(np.float32), ["class_index"])
    render_classes(res.argmax_map, vocabulary_document(names), outputs["argmax_png"], args.scale)
    render_scalar(res.std.max(axis=0), outputs["std_png"], scale=args.scale)
    write_manifest(out, "predict", args, inputs, {k: str(v) for k, v in outputs.items()}, args.seed,
                   {"draws": args.draws, "mode": res.mode, "tile": args.tile, "overlap": args.overlap,
                    "context": args.context, "threads": threads})
    return EXIT_OK


def cmd_evaluate(args) -> int:
    from .inference import EnsembleResult, evaluate

    out = _out_dir(args.out)
    mean, names, _ = read_grd(args.mean)
    masks, vocab = load_masks(args.masks)
    if vocab != names:
        raise DataError(f"prediction classes {names} differ from mask classes {vocab}")
    split = load_split(args.split) if args.split else None
    role = args.role if split is not None else None
    res = EnsembleResult(mean, np.zeros_like(mean), 0, args.mode, mean.argmax(axis=0))
    report = evaluate(res, masks, split, role)
    mis = report.pop("misclassification")
    outputs = {"metrics": out / "metrics.json", "confusion": out / "confusion_rates.csv",
               "misclassification": out / "misclassification.grd", "misclassification_png": out / "misclassification.png"}
    report["classes"] = vocab
    write_json(outputs["metrics"], report)
    write_csv_grid(outputs["confusion"], np.asarray(report["confusion_rates"]))
    write_grd(outputs["misclassification"], mis[None].astype(np.float32), ["misclassification"])
    render_misclassification(mis, outputs["misclassification_png"])
    inputs = {"mean": args.mean, "masks": args.masks}
    if args.split:
        inputs["split"] = args.split
    write_manifest(out, "evaluate", args, inputs, {k: str(v) for k, v in outputs.items()}, None,
                   {"role": role, "mode": args.mode})
    print(f"weighted accuracy {report['weighted_accuracy']:.4f} over {report['n_pixels']} pixels")
    return EXIT_OK


def cmd_plot(args) -> int:
    out = Path(args.out)
    _out_dir(out.parent)
    inputs = {"input": args.input}
    if args.kind == "curves":
        import csv

        with open(args.input, newline="") as fh:
            rows = list(csv.DictReader(fh))
        if not rows:
            raise DataError(f"{args.input}: empty history")
        keys = [k for k in ("train_acc", "test_acc", "train_ssim", "test_ssim") if k in rows[0]]
        render_curves({k: [float(r[k]) for r in rows] for k in keys}, out)
    else:
        values, names, _ = read_grd(args.input)
        band = values[args.band] if args.band is not None else None
        if args.kind == "classes":
            if not args.vocabulary:
                raise UsageError("--kind classes needs --vocabulary")
            vocab = read_json(args.vocabulary)
            inputs["vocabulary"] = args.vocabulary
            labels = np.rint(band if band is not None else values[0]).astype(int)
            render_classes(labels, vocab, out, args.scale)
        elif args.kind == "misclassification":
            render_misclassification(np.rint(values[0]).astype(int), out, args.scale)
        else:
            render_scalar(band if band is not None else values.max(axis=0), out, scale=args.scale)
    write_manifest(out.parent, "plot", args, inputs, {"png": str(out)}, None, {"kind": args.kind})
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from .gradcheck_suite import run_suite

    out = _out_dir(args.out)
    report = run_suite(seeds=range(args.seeds), tol=args.tol)
    write_json(out / "gradcheck.json", report)
    for name, r in report["ops"].items():
        print(f"{'PASS' if r['passed'] else 'FAIL'}  {name:14s} max rel error {r['max_rel_error']:.2e}")
    write_manifest(out, "gradcheck", args, {}, {"report": str(out / "gradcheck.json")}, None,
                   {"seeds": args.seeds, "tol": args.tol})
    if not report["passed"]:
        raise NumericError(f"gradient check failed (tolerance {args.tol:g})")
    return EXIT_OK


# ---------------------------------------------------------------- parser

def _add_training_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="run config JSON (sections: pipeline, arch, train, data)")
    p.add_argument("--aux", nargs="+", help="auxiliary GRD/CSV rasters (overrides the config data section)")
    p.add_argument("--samples", help="samples CSV with header x,y,code")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--seed", type=int, help="seed for split, patches and training (default 0)")
    p.add_argument("--batch-size", dest="batch_size", type=int, help=f"batch size (default {_T.batch_size})")
    p.add_argument("--lr", type=float, help=f"Adam learning rate (default {_T.learning_rate:g})")
    p.add_argument("--epochs", type=int, help=f"maximum epochs (default {_T.max_epochs})")
    p.add_argument("--patience", type=int, help=f"early-stopping patience in epochs (default {_T.patience})")
    p.add_argument("--delta", type=float, help=f"early-stopping delta on test accuracy (default {_T.early_stop_delta:g})")
    p.add_argument("--holdout-rate", dest="holdout_rate", type=float,
                   help=f"share of sampled pixels hidden from the conditioning input each epoch "
                        f"(default {_T.holdout_rate}; 0.3 is the other common setting)")
    p.add_argument("--gamma", type=float, help=f"focal loss exponent (default {_T.gamma:g})")
    p.add_argument("--target-accuracy", dest="target_accuracy", type=float,
                   help="stop once test accuracy reaches this value (default off)")
    p.add_argument("--verbose", action="store_true", help="print one line per epoch")
    p.epilog = (f"Architecture defaults: patch size {_P.patch}x{_P.patch}, DropBlock rate 0.3, block size 5. "
                f"Patch defaults: {_P.n_patches} patches, overlap up to {_P.max_overlap:.0%}, "
                f"{_P.downscale_frac:.0%} under-sampled x2, {_P.rotate_frac:.0%} rotated within "
                f"+/-{_P.rotate_range:g} deg. Set these in the config file.")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="scbnet", description="Spatially constrained lithology mapping with sparse samples.",
                     formatter_class=_HelpFormatter)
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("--log-level", default="WARNING", help="logging level")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    fmt = {"formatter_class": _HelpFormatter}

    p = sub.add_parser("synth", help="write a synthetic desk dataset", **fmt)
    p.add_argument("--seed", type=int, default=0, help="layout and noise seed")
    p.add_argument("--out", required=True, help="output directory")
    d = SynthConfig()
    p.add_argument("--height", type=int, help=f"grid height (default {d.height})")
    p.add_argument("--width", type=int, help=f"grid width (default {d.width})")
    p.add_argument("--n-classes", dest="n_classes", type=int, help=f"number of classes (default {d.n_classes})")
    p.add_argument("--n-aux", dest="n_aux", type=int, help=f"auxiliary channels (default {d.n_aux})")
    p.add_argument("--n-samples", dest="n_samples", type=int, help=f"field samples (default {d.n_samples})")
    p.add_argument("--separation", type=float, help=f"class-signal separation (default {d.separation})")
    p.add_argument("--noise-std", dest="noise_std", type=float, help=f"white-noise std (default {d.noise_std})")
    p.add_argument("--signature-seed", dest="signature_seed", type=int, default=0,
                   help="seed of the class signatures; equal values give related domains")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("ingest", help="stack and standardize auxiliary rasters", **fmt)
    p.add_argument("--aux", nargs="+", required=True, help="GRD or CSV rasters, one or more channels each")
    p.add_argument("--names", help="comma-separated channel names")
    p.add_argument("--nodata", type=float, help="nodata value (default from the GRD header)")
    p.add_argument("--out", required=True, help="output GRD path")
    p.set_defaults(func=cmd_ingest)

    p = sub.add_parser("rasterize", help="filter rare classes and build sparse probability masks", **fmt)
    p.add_argument("--stack", required=True, help="standardized stack GRD (defines the grid)")
    p.add_argument("--samples", required=True, help="samples CSV with header x,y,code")
    p.add_argument("--rare-threshold", dest="rare_threshold", type=float, default=0.01,
                   help="drop classes whose share of the samples is at most this")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_rasterize)

    p = sub.add_parser("split", help="spatial block split into train / test / validation", **fmt)
    p.add_argument("--masks", required=True, help="mask GRD from rasterize")
    p.add_argument("--block", type=int, default=15, help="block edge in pixels")
    p.add_argument("--train-frac", dest="train_frac", type=float, default=0.8, help="share of sampled blocks used for training")
    p.add_argument("--validation-rect", dest="validation_rect", type=int, nargs=4, metavar=("R0", "C0", "R1", "C1"),
                   help="reserved validation rectangle, exclusive ends")
    p.add_argument("--seed", type=int, default=0, help="block shuffle seed")
    p.add_argument("--out", required=True, help="output split JSON")
    p.set_defaults(func=cmd_split)

    p = sub.add_parser("patches", help="cut training patches", **fmt)
    p.add_argument("--stack", required=True, help="standardized stack GRD")
    p.add_argument("--masks", required=True, help="mask GRD from rasterize")
    p.add_argument("--split", required=True, help="split JSON; targets keep training-role samples only")
    p.add_argument("--patch", type=int, default=_P.patch, help="patch edge in pixels")
    p.add_argument("--max-overlap", dest="max_overlap", type=float, default=_P.max_overlap, help="maximum overlap")
    p.add_argument("--n-patches", dest="n_patches", type=int, default=_P.n_patches, help="patches requested")
    p.add_argument("--downscale-frac", dest="downscale_frac", type=float, default=_P.downscale_frac,
                   help="share of patches cut from the 2x under-sampled grid")
    p.add_argument("--rotate-frac", dest="rotate_frac", type=float, default=_P.rotate_frac, help="share of rotated patches")
    p.add_argument("--rotate-range", dest="rotate_range", type=float, default=_P.rotate_range, help="rotation range in degrees")
    p.add_argument("--seed", type=int, default=0, help="lattice and rotation seed")
    p.add_argument("--out", required=True, help="output .npz (a .json manifest is written alongside)")
    p.set_defaults(func=cmd_patches)

    p = sub.add_parser("train", help="prepare data and train from scratch", **fmt)
    _add_training_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("finetune", help="fine-tune a checkpoint on new data", **fmt)
    p.add_argument("--checkpoint", required=True, help="pretrained checkpoint")
    _add_training_flags(p)
    p.set_defaults(func=cmd_finetune)

    p = sub.add_parser("predict", help="Monte Carlo ensemble prediction", **fmt)
    p.add_argument("--checkpoint", required=True, help="trained checkpoint")
    p.add_argument("--stack", required=True, help="standardized stack GRD")
    p.add_argument("--masks", help="mask GRD used for conditioning")
    p.add_argument("--split", help="split JSON; conditioning is restricted to --condition-role")
    p.add_argument("--condition-role", dest="condition_role", default="train", choices=["train", "test", "validation"],
                   help="split role whose samples condition the prediction")
    mode = p.add_mutually_exclusive_group()
    mode.add_argument("--constrained", dest="constrained", action="store_true", default=True,
                      help="condition on the sampled masks (default)")
    mode.add_argument("--unconstrained", dest="constrained", action="store_false", help="use zeroed masks")
    p.add_argument("--draws", type=int, default=100, help="Monte Carlo draws")
    p.add_argument("--tile", type=int, help="tile edge for large grids (default whole grid)")
    p.add_argument("--overlap", type=int, default=0, help="tile overlap in pixels")
    p.add_argument("--context", type=int, default=0,
                   help="extra input pixels read around each tile and cropped after the pass")
    p.add_argument("--threads", type=int,
                   help=f"parallel draws (default ${THREADS_ENV} or 1); bit-exact reruns are only guaranteed "
                        "with one thread")
    p.add_argument("--seed", type=int, default=0, help="seed of the per-draw DropBlock streams")
    p.add_argument("--scale", type=int, default=1, help="PNG pixel magnification")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("evaluate", help="confusion matrix and weighted accuracy", **fmt)
    p.add_argument("--mean", required=True, help="mean.grd from predict")
    p.add_argument("--masks", required=True, help="mask GRD with the reference samples")
    p.add_argument("--split", help="split JSON; without it every sampled pixel is scored")
    p.add_argument("--role", default="test", choices=["train", "test", "validation"],
                   help="split role whose sampled pixels are scored")
    p.add_argument("--mode", default="constrained", help="label recorded in the report")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("plot", help="render a GRD or history CSV to PNG", **fmt)
    p.add_argument("--input", required=True, help="GRD raster, or history CSV for --kind curves")
    p.add_argument("--kind", choices=["classes", "scalar", "misclassification", "curves"], default="scalar",
                   help="rendering style")
    p.add_argument("--vocabulary", help="vocabulary JSON with the class palette")
    p.add_argument("--band", type=int, help="channel to draw (default first, or max for scalar)")
    p.add_argument("--scale", type=int, default=1, help="PNG pixel magnification")
    p.add_argument("--out", required=True, help="output PNG")
    p.set_defaults(func=cmd_plot)

    p = sub.add_parser("gradcheck", help="finite-difference check of every differentiable op", **fmt)
    p.add_argument("--seeds", type=int, default=5, help="random instances per operation")
    p.add_argument("--tol", type=float, default=1e-4, help="maximum relative error")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_gradcheck)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=getattr(logging, str(args.log_level).upper(), logging.WARNING),
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"scbnet {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NumericError as exc:
        print(f"scbnet {args.command}: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except FloatingPointError as exc:
        print(f"scbnet {args.command}: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DataError, ShapeError, FileNotFoundError, IsADirectoryError, ValueError) as exc:
        print(f"scbnet {args.command}: data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
