"""Command line entry point: synthesize, train, enhance, evaluate, baseline.

Settings are layered: built-in defaults, then a KEY=VALUE config file
(`--config` or NUIGO_CONFIG), then NUIGO_* environment variables, then flags.
Exit codes: 0 success, 1 invalid input or usage, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence

import torch

from nuigo import __version__
from nuigo.baselines import METHODS, run_baseline
from nuigo.degradation_synthesis import read_manifest, synthesize_dataset
from nuigo.loss_suite import DEFAULT_LAYER, load_extractor
from nuigo.nedrb_network import enhance, load_model
from nuigo.quality_metrics import evaluate_pairs, load_niqe, summary_line, write_report
from nuigo.shared.errors import InputValidationError, NuiGoError
from nuigo.shared.schemas import LossWeights, ModelConfig, SynthesisConfig, TrainConfig, utc_now_iso
from nuigo.shared.settings import layered_values, load_runtime_settings
from nuigo.shared.utils_files import atomic_write_text
from nuigo.shared.utils_images import list_images, load_image, save_image
from nuigo.shared.utils_seeds import resolve_device
from nuigo.trainer import train


logger = logging.getLogger("nuigo")

EFFECTIVE_CONFIG_NAME = "effective_config.json"
EXIT_OK = 0
EXIT_INVALID = 1
EXIT_FAILURE = 2

# Layered value name -> config field, per config model.
SYNTHESIS_FIELDS = {
    "thresholds": "thresholds",
    "luminance_floor": "luminance_floor",
    "seed": "rng_seed",
    "gamma_convention": "gamma_convention",
    "image_size": "image_size",
    "save_masks": "save_masks",
    "workers": "workers",
}
TRAIN_FIELDS = {
    "batch_size": "batch_size",
    "learning_rate": "learning_rate",
    "init_std": "init_std",
    "epochs": "epochs",
    "max_steps": "max_steps",
    "image_size": "image_size",
    "seed": "seed",
    "checkpoint_every": "checkpoint_every",
    "patience": "patience",
    "num_workers": "num_workers",
    "device": "device",
}
MODEL_FIELDS = {
    "stages": "stages",
    "channels": "channels",
    "inner_channels": "inner_channels",
    "weight_sharing": "weight_sharing",
    "nonlocal_subsample": "nonlocal_subsample",
}


class CliParser(argparse.ArgumentParser):
    """Usage errors exit with code 1 instead of argparse's 2."""

    def error(self, message: str) -> None:  # type: ignore[override]
        self.print_usage(sys.stderr)
        self.exit(EXIT_INVALID, f"{self.prog}: error: {message}\n")


def _common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", help="KEY=VALUE config file with NUIGO_* keys.")
    parser.add_argument("--seed", type=int, help="Global seed (default 0).")
    verbosity = parser.add_mutually_exclusive_group()
    verbosity.add_argument("-v", "--verbose", action="store_true", help="Debug logging.")
    verbosity.add_argument("-q", "--quiet", action="store_true", help="Warnings only, no progress bars.")


def build_parser() -> CliParser:
    parser = CliParser(prog="nuigo", description="Retinal non-uniform illumination synthesis and removal.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    commands = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")

    synth = commands.add_parser("synthesize", help="Build a paired dataset from well-lit images.")
    _common(synth)
    synth.add_argument("--input", required=True, help="Directory of clean images.")
    synth.add_argument("--output", required=True, help="Dataset directory to create.")
    synth.add_argument("--thresholds", type=float, nargs="+", help="Luminance thresholds in (0, 1).")
    synth.add_argument("--gamma-min", type=float, help="Lower bound of the gamma draw (default 0.1).")
    synth.add_argument("--gamma-max", type=float, help="Upper bound of the gamma draw (default 0.5).")
    synth.add_argument("--gamma-convention", choices=["power", "inverse"], help="Dark-pixel mapping v**g or v**(1/g).")
    synth.add_argument("--luminance-floor", type=float, help="Floor applied before the power law.")
    synth.add_argument("--image-size", type=int, help="Side length the clean images are resized to.")
    synth.add_argument("--save-masks", action=argparse.BooleanOptionalAction, default=None, help="Also write 16-bit masks.")
    synth.add_argument("--workers", type=int, help="Images processed in parallel.")
    synth.set_defaults(handler=cmd_synthesize)

    trn = commands.add_parser("train", help="Train the network on a synthesized dataset.")
    _common(trn)
    trn.add_argument("--manifest", required=True, help="manifest.csv written by synthesize.")
    trn.add_argument("--extractor-weights", help="torchvision VGG-19 state dict (vgg19-dcbb9e9d.pth).")
    trn.add_argument("--extractor-layer", help=f"VGG-19 layer for the perceptual loss (default {DEFAULT_LAYER}).")
    trn.add_argument("--output", required=True, help="Run directory for checkpoints and logs.")
    trn.add_argument("--resume", help="Checkpoint to resume from.")
    trn.add_argument("--batch-size", type=int)
    trn.add_argument("--lr", dest="learning_rate", type=float, help="Fixed Adam learning rate (default 1e-4).")
    trn.add_argument("--init-std", type=float, help="Std of the Gaussian weight init (default 0.02).")
    trn.add_argument("--epochs", type=int)
    trn.add_argument("--max-steps", type=int, help="Stop after this many optimizer steps.")
    trn.add_argument("--checkpoint-every", type=int, help="Steps between checkpoints.")
    trn.add_argument("--patience", type=int, help="Epochs without validation gain before stopping.")
    trn.add_argument("--train-fraction", type=float, help="Share of clean images used for training.")
    trn.add_argument("--lambda-l1", type=float, help="Weight of the final-stage L1 term (default 100).")
    trn.add_argument("--image-size", type=int, help="Training resolution, a multiple of 8.")
    trn.add_argument("--stages", type=int, help="Number of recursive stages (default 3).")
    trn.add_argument("--channels", type=int)
    trn.add_argument("--inner-channels", type=int)
    trn.add_argument("--weight-sharing", action=argparse.BooleanOptionalAction, default=None)
    trn.add_argument("--nonlocal-subsample", action=argparse.BooleanOptionalAction, default=None)
    trn.add_argument("--num-workers", type=int, help="DataLoader worker processes.")
    trn.add_argument("--device", help="auto, cpu or cuda[:N].")
    trn.set_defaults(handler=cmd_train)

    enh = commands.add_parser("enhance", help="Remove non-uniform illumination from images.")
    _common(enh)
    enh.add_argument("--checkpoint", required=True)
    enh.add_argument("--input", required=True, help="Directory of images to enhance.")
    enh.add_argument("--output", required=True)
    enh.add_argument("--all-stages", action="store_true", help="Write every stage output as {name}_stage{k}.png.")
    enh.add_argument("--stages", dest="run_stages", type=int, help="Stop after this many stages.")
    enh.add_argument("--device", help="auto, cpu or cuda[:N].")
    enh.set_defaults(handler=cmd_enhance)

    ev = commands.add_parser("evaluate", help="PSNR/SSIM of predictions against references.")
    _common(ev)
    ev.add_argument("--pred", required=True, help="Directory of predictions.")
    ev.add_argument("--ref", required=True, help="Directory of references, matched by file stem.")
    ev.add_argument("--report", required=True, help="CSV report to write.")
    ev.add_argument("--niqe", help="CSV with id,niqe columns to merge into the report.")
    ev.add_argument("--workers", type=int)
    ev.set_defaults(handler=cmd_evaluate)

    base = commands.add_parser("baseline", help="Apply a traditional correction for comparison.")
    _common(base)
    base.add_argument("--method", choices=METHODS, required=True)
    base.add_argument("--input", required=True)
    base.add_argument("--output", required=True)
    base.add_argument("--gamma", dest="baseline_gamma", type=float, default=0.5, help="Exponent for --method gamma.")
    base.add_argument("--clip-limit", type=float, default=0.01, help="Clip limit for --method clahe.")
    base.set_defaults(handler=cmd_baseline)
    return parser


def resolve_values(args: argparse.Namespace, config_path: Optional[str]) -> Dict[str, Any]:
    """Defaults < config file < environment < flags given on the command line."""
    values = layered_values(args.config or config_path)
    for key, value in vars(args).items():
        if value is not None and key not in {"handler", "command", "config", "verbose", "quiet"}:
            values[key] = value
    return values


def _pick(values: Dict[str, Any], fields: Dict[str, str]) -> Dict[str, Any]:
    return {target: values[source] for source, target in fields.items() if source in values}


def synthesis_config(values: Dict[str, Any]) -> SynthesisConfig:
    kwargs = _pick(values, SYNTHESIS_FIELDS)
    if "gamma_min" in values or "gamma_max" in values:
        low, high = SynthesisConfig().gamma_range
        kwargs["gamma_range"] = (values.get("gamma_min", low), values.get("gamma_max", high))
    return SynthesisConfig(**kwargs)


def train_config(values: Dict[str, Any]) -> TrainConfig:
    kwargs = _pick(values, TRAIN_FIELDS)
    if "train_fraction" in values:
        kwargs["train_fraction"] = values["train_fraction"]
        kwargs["test_fraction"] = 1.0 - values["train_fraction"]
    return TrainConfig(**kwargs)


def model_config(values: Dict[str, Any]) -> ModelConfig:
    return ModelConfig(**_pick(values, MODEL_FIELDS))


def write_effective_config(directory: str | Path, command: str, sections: Dict[str, Any]) -> Path:
    target = Path(directory) / EFFECTIVE_CONFIG_NAME
    payload = {"command": command, "version": __version__, "generated_at": utc_now_iso(), **sections}
    atomic_write_text(target, json.dumps(payload, indent=2, sort_keys=True, default=str) + "\n")
    return target


def _log_run_summary(command: str, rows: List[tuple]) -> None:
    width = max(len(label) for label, _ in rows)
    lines = [
        "============================================================",
        f"nuigo {command}",
        "------------------------------------------------------------",
        *[f"{label.ljust(width)} : {value}" for label, value in rows],
        "============================================================",
    ]
    logger.info("\n%s", "\n".join(lines))


def cmd_synthesize(args: argparse.Namespace, values: Dict[str, Any]) -> int:
    config = synthesis_config(values)
    _log_run_summary(
        "synthesize",
        [
            ("Input", args.input),
            ("Output", args.output),
            ("Thresholds", ", ".join(f"{t:g}" for t in config.thresholds)),
            ("Gamma range", f"{config.gamma_range[0]:g}..{config.gamma_range[1]:g} ({config.gamma_convention})"),
            ("Image size", config.image_size),
            ("Seed", config.rng_seed),
        ],
    )
    manifest = synthesize_dataset(args.input, args.output, config, progress=not args.quiet)
    write_effective_config(args.output, "synthesize", {"synthesis": config.dict()})
    print(f"{len(manifest)} pairs written to {args.output}")
    for threshold, count in manifest.threshold_counts().items():
        print(f"  threshold {threshold:g}: {count}")
    return EXIT_OK


def cmd_train(args: argparse.Namespace, values: Dict[str, Any]) -> int:
    train_cfg = train_config(values)
    model_cfg = model_config(values)
    weights = LossWeights(**_pick(values, {"lambda_l1": "lambda_l1"}))
    manifest = read_manifest(args.manifest)
    _log_run_summary(
        "train",
        [
            ("Manifest", f"{args.manifest} ({len(manifest)} pairs)"),
            ("Output", args.output),
            ("Stages", f"{model_cfg.stages} ({'shared' if model_cfg.weight_sharing else 'separate'} weights)"),
            ("Batch size", train_cfg.batch_size),
            ("Learning rate", train_cfg.learning_rate),
            ("Steps", train_cfg.max_steps or f"{train_cfg.epochs} epochs"),
            ("Lambda L1", weights.lambda_l1),
            ("Device", resolve_device(train_cfg.device)),
            ("Resume", args.resume or "no"),
        ],
    )
    extractor_weights = values.get("extractor_weights")
    extractor_layer = values.get("extractor_layer", DEFAULT_LAYER)
    extractor = load_extractor(extractor_weights, extractor_layer)
    write_effective_config(
        args.output,
        "train",
        {
            "train": train_cfg.dict(),
            "model": model_cfg.dict(),
            "loss": weights.dict(),
            "extractor": {"weights": extractor_weights, "layer": extractor_layer},
            "resume": args.resume,
        },
    )
    result = train(
        manifest,
        model_cfg,
        train_cfg,
        extractor,
        args.output,
        loss_weights=weights,
        resume=args.resume,
        progress=not args.quiet,
    )
    print(f"Trained to step {result.step}; final checkpoint {result.checkpoint}")
    if result.best_psnr is not None:
        print(f"Best validation PSNR {result.best_psnr:.4f} dB")
    return EXIT_OK


def cmd_enhance(args: argparse.Namespace, values: Dict[str, Any]) -> int:
    paths = list_images(args.input)
    if not paths:
        raise InputValidationError(f"No images found in '{args.input}'.")
    model, payload = load_model(args.checkpoint)
    device = resolve_device(values.get("device", "auto"))
    model.to(device).eval()
    out_root = Path(args.output)
    out_root.mkdir(parents=True, exist_ok=True)
    _log_run_summary(
        "enhance",
        [
            ("Checkpoint", f"{args.checkpoint} (step {payload.get('step')})"),
            ("Input", f"{args.input} ({len(paths)} images)"),
            ("Output", args.output),
            ("Stages", args.run_stages or model.stages),
            ("Device", device),
        ],
    )
    written = 0
    for path in paths:
        try:
            img = load_image(path)
        except OSError as exc:
            logger.warning("Skipping unreadable image %s: %s", path, exc)
            continue
        outputs = enhance(model, img, stages=args.run_stages, all_stages=args.all_stages, device=device)
        if args.all_stages:
            for index, out in enumerate(outputs, start=1):
                save_image(out_root / f"{path.stem}_stage{index}.png", out)
        else:
            save_image(out_root / f"{path.stem}.png", outputs[-1])
        written += 1
    write_effective_config(
        out_root,
        "enhance",
        {"checkpoint": str(args.checkpoint), "architecture": model.architecture(), "stages": args.run_stages},
    )
    print(f"{written} images enhanced into {out_root}")
    return EXIT_OK


def cmd_evaluate(args: argparse.Namespace, values: Dict[str, Any]) -> int:
    niqe = load_niqe(args.niqe) if args.niqe else None
    report = evaluate_pairs(args.pred, args.ref, workers=values.get("workers", 1), niqe=niqe)
    if report.count == 0:
        logger.error("None of the matched pairs could be evaluated.")
        return EXIT_FAILURE
    write_report(args.report, report)
    write_effective_config(
        Path(args.report).parent, "evaluate", {"pred": args.pred, "ref": args.ref, "niqe": args.niqe}
    )
    print(summary_line(report))
    if report.failed:
        logger.error("%d pairs could not be evaluated: %s", len(report.failed), ", ".join(report.failed))
        return EXIT_FAILURE
    return EXIT_OK


def cmd_baseline(args: argparse.Namespace, values: Dict[str, Any]) -> int:
    written = run_baseline(
        args.method,
        args.input,
        args.output,
        gamma=args.baseline_gamma,
        clip_limit=args.clip_limit,
        progress=not args.quiet,
    )
    write_effective_config(
        args.output,
        "baseline",
        {"method": args.method, "gamma": args.baseline_gamma, "clip_limit": args.clip_limit},
    )
    print(f"{written} images written by {args.method} into {args.output}")
    return EXIT_OK


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    runtime = load_runtime_settings()
    level = "DEBUG" if args.verbose else "WARNING" if args.quiet else runtime.log_level
    logging.basicConfig(level=level, format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    try:
        values = resolve_values(args, runtime.config_path)
        torch.manual_seed(values.get("seed", 0))
        return args.handler(args, values)
    except ValueError as exc:
        # InputValidationError and pydantic validation errors are both ValueErrors.
        print(f"nuigo {args.command}: invalid input: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except (NuiGoError, OSError) as exc:
        print(f"nuigo {args.command}: {exc}", file=sys.stderr)
        return EXIT_FAILURE


if __name__ == "__main__":
    sys.exit(main())
