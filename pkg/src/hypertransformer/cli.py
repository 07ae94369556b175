"""``htpan`` command line: degrade | train | eval | sharpen | plot | synth.

Exit status is 0 on success, 1 on a runtime error and 2 on a usage error.
Every output file is written atomically, and every subcommand leaves a JSON
manifest describing its inputs, effective settings and outputs.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import checkpoint
from .cubeio import atomic_write, load_cube, save_cube
from .errors import ContractError, DimensionError, FormatError, NonFiniteError
from .pipeline import DEFAULT_SIGMA, HsiCube, PanImage, synth_dataset, synthesize_pan, walds_degrade
from .trainer import (
    TrainConfig, evaluate, evaluate_baseline, load_dataset_dir, predict, save_dataset_dir,
    source_hash, train,
)

log = logging.getLogger("hypertransformer")

RUNTIME_ERRORS = (ContractError, DimensionError, FormatError, NonFiniteError, OSError, ValueError)


class UsageError(Exception):
    pass


def _write_manifest(path, command: str, args: argparse.Namespace, outputs: dict, **extra) -> None:
    settings = {k: v for k, v in vars(args).items() if k not in ("func", "verbose")}
    doc = {
        "command": command,
        "arguments": {k: str(v) if isinstance(v, Path) else v for k, v in settings.items()},
        "source_hash": source_hash(),
        "outputs": {k: str(v) for k, v in outputs.items()},
    }
    doc.update(extra)
    atomic_write(path, json.dumps(doc, sort_keys=True, indent=2).encode("utf-8"))


def _manifest_path(args, default: Path) -> Path:
    return Path(args.manifest) if args.manifest else default


# -- subcommands ------------------------------------------------------------------------
def cmd_degrade(args) -> int:
    ref = load_cube(args.input)
    lr = walds_degrade(ref, args.scale, args.sigma)
    pan = synthesize_pan(ref)
    save_cube(args.out_lr, lr)
    save_cube(args.out_pan, pan.data)
    log.info("wrote %s %s and %s %s", args.out_lr, lr.data.shape, args.out_pan, pan.data.shape)
    _write_manifest(_manifest_path(args, Path(str(args.out_lr) + ".manifest.json")), "degrade", args,
                    {"lr": args.out_lr, "pan": args.out_pan})
    return 0


def _parse_scales(text: str) -> tuple[int, ...]:
    if text.strip().lower() in ("", "none"):
        return ()
    try:
        return tuple(int(s) for s in text.replace(",", " ").split())
    except ValueError:
        raise UsageError(f"--scales expects integers from 1, 2, 4 (or 'none'), got {text!r}") from None


_OVERRIDES = {
    "seed": "seed", "epochs": "epochs", "lr": "learning_rate", "heads": "heads", "beta": "beta",
    "lambda_rec": "lambda_rec", "lambda_vgg": "lambda_vgg_per", "lambda_t": "lambda_t_per",
    "sigma": "sigma", "dtype": "dtype", "checkpoint_every": "checkpoint_every",
    "perceptual_weights": "perceptual_weights",
}


def effective_config(args) -> TrainConfig:
    path = Path(args.config)
    if not path.is_file():
        raise UsageError(f"config file {path} does not exist")
    try:
        values = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise UsageError(f"{path} is not valid JSON: {exc}") from None
    if not isinstance(values, dict):
        raise UsageError(f"{path} must hold a JSON object")
    for flag, key in _OVERRIDES.items():
        value = getattr(args, flag, None)
        if value is not None:
            values[key] = value
    if args.scales is not None:
        values["scales"] = _parse_scales(args.scales)
    if args.bypass_attention:
        values["attention_bypass"] = True
    return TrainConfig.from_dict(values)


def cmd_train(args) -> int:
    config = effective_config(args)
    dataset = load_dataset_dir(args.data_dir, config.sigma)
    eval_set = load_dataset_dir(args.eval_dir, config.sigma) if args.eval_dir else None
    log.info("training on %d patches, config hash %s", len(dataset), config.hash())
    _, manifest = train(config, dataset, args.out_dir, eval_dataset=eval_set)
    print(json.dumps(manifest.final_report, sort_keys=True))
    return 0


def cmd_eval(args) -> int:
    dataset = load_dataset_dir(args.data_dir, args.sigma)
    if args.baseline:
        report = evaluate_baseline(dataset, args.baseline)
    else:
        if not args.checkpoint:
            raise UsageError("eval needs --checkpoint unless --baseline is given")
        report = evaluate(args.checkpoint, dataset)
    text = report.to_json()
    print(text)
    if args.manifest:
        _write_manifest(args.manifest, "eval", args, {}, report=report.to_dict())
    return 0


def cmd_sharpen(args) -> int:
    model, _ = checkpoint.load_model(args.checkpoint)
    lr = load_cube(args.lr_cube)
    pan = PanImage(load_cube(args.pan).data)
    x = predict(model, lr.data.astype(np.float64), pan.data.astype(np.float64))
    save_cube(args.out, HsiCube(x.astype(np.float32) if args.float32 else x))
    log.info("wrote %s %s", args.out, x.shape)
    _write_manifest(_manifest_path(args, Path(str(args.out) + ".manifest.json")), "sharpen", args,
                    {"cube": args.out})
    return 0


def cmd_plot(args) -> int:
    from .plotting import report

    pred = load_cube(args.pred).data
    ref = load_cube(args.ref).data
    if pred.shape != ref.shape:
        raise DimensionError(f"{args.pred} is {pred.shape} but {args.ref} is {ref.shape}")
    outputs = report(pred, ref, args.out_dir, vmax=args.vmax)
    _write_manifest(_manifest_path(args, Path(args.out_dir) / "manifest.json"), "plot", args, outputs)
    for path in outputs.values():
        print(path)
    return 0


def cmd_synth(args) -> int:
    patches = synth_dataset(args.seed, args.patches, args.bands, args.size, args.size, sigma=args.sigma)
    save_dataset_dir(args.out_dir, patches)
    _write_manifest(_manifest_path(args, Path(args.out_dir) / "manifest.json"), "synth", args,
                    {p.name: Path(args.out_dir) / f"{p.name}.ref.hsi" for p in patches})
    return 0


# -- parser -----------------------------------------------------------------------------
def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="htpan", description="Hyperspectral pansharpening toolkit.")
    ap.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("degrade", help="simulate LR-HSI and PAN from a reference cube")
    p.add_argument("input", help="reference cube (.hsi)")
    p.add_argument("--out-lr", required=True)
    p.add_argument("--out-pan", required=True)
    p.add_argument("--sigma", type=float, default=DEFAULT_SIGMA)
    p.add_argument("--scale", type=int, default=4)
    p.add_argument("--manifest")
    p.set_defaults(func=cmd_degrade)

    p = sub.add_parser("train", help="train a model on a directory of cubes")
    p.add_argument("--config", required=True, help="JSON file of training settings")
    p.add_argument("--data-dir", required=True)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--eval-dir", help="patches used for checkpoint selection and the final report")
    p.add_argument("--seed", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--lr", type=float, help="learning rate")
    p.add_argument("--heads", type=int)
    p.add_argument("--beta", type=float)
    p.add_argument("--scales", help="enabled scales, e.g. '1,2,4', '4' or 'none'")
    p.add_argument("--bypass-attention", action="store_true", help="feed PAN features straight to fusion")
    p.add_argument("--lambda-rec", type=float)
    p.add_argument("--lambda-vgg", type=float)
    p.add_argument("--lambda-t", type=float)
    p.add_argument("--sigma", type=float)
    p.add_argument("--dtype", choices=("float32", "float64"))
    p.add_argument("--checkpoint-every", type=int)
    p.add_argument("--perceptual-weights", help="checkpoint with weights for the perceptual net")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="print averaged metrics as JSON")
    p.add_argument("--checkpoint")
    p.add_argument("--data-dir", required=True)
    p.add_argument("--baseline", choices=("bicubic", "reference"), help="score a non-learned predictor instead")
    p.add_argument("--sigma", type=float, default=DEFAULT_SIGMA)
    p.add_argument("--manifest")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("sharpen", help="fuse one LR cube with its PAN image")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--lr-cube", required=True)
    p.add_argument("--pan", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--float32", action="store_true", help="store the result as float32")
    p.add_argument("--manifest")
    p.set_defaults(func=cmd_sharpen)

    p = sub.add_parser("plot", help="MAE heat-map, RGB previews and per-band CSV")
    p.add_argument("--pred", required=True)
    p.add_argument("--ref", required=True)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--vmax", type=float, default=0.1, help="upper end of the heat-map colour scale")
    p.add_argument("--manifest")
    p.set_defaults(func=cmd_plot)

    p = sub.add_parser("synth", help="write a deterministic synthetic dataset")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--patches", type=int, default=8)
    p.add_argument("--bands", type=int, default=8)
    p.add_argument("--size", type=int, default=64, help="HR side length")
    p.add_argument("--sigma", type=float, default=DEFAULT_SIGMA)
    p.add_argument("--manifest")
    p.set_defaults(func=cmd_synth)
    return ap


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"htpan {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except RUNTIME_ERRORS as exc:
        print(f"htpan {args.command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
