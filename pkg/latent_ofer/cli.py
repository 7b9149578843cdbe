#!/usr/bin/env python3
"""
Command line interface for latent-ofer experiments
"""

import argparse
import json
import logging
import os
import sys
from typing import List, Optional

from .config import ExperimentConfig, set_config
from .errors import DataError, LatentOferError, ModelError
from .ferhead import EXPRESSIONS, FUSIONS
from .patchgrid import OcclusionMask, load_image, save_image
from .pipeline import ASSEMBLY_STAGES, SWEEP_FUSION, LatentOfer, fer_stage
from .plotting import plot_ablation, plot_occlusion_sweep, plot_training_curve
from .quality import image_quality

logger = logging.getLogger(__name__)


class CliParser(argparse.ArgumentParser):
    """Usage errors exit with 1, usage on stderr"""

    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"❌ {message}", file=sys.stderr)
        sys.exit(1)


def _stem(path: str) -> str:
    return os.path.splitext(os.path.basename(path))[0]


def _default_output(config: ExperimentConfig, kind: str, source: str, ext: str) -> str:
    return os.path.join(config.out_dir, kind, f"{_stem(source)}{ext}")


def _write_json(payload, path: str) -> str:
    directory = os.path.dirname(path)
    if directory:
        os.makedirs(directory, exist_ok=True)
    with open(path, "w") as f:
        json.dump(payload, f, indent=2, sort_keys=True)
    return path


def gen_data_command(args, config: ExperimentConfig) -> int:
    """Render the toy face dataset and its labels.csv"""
    print("=== Generating toy dataset ===")
    manifest = LatentOfer(config).generate_data(args.n)
    print(f"✓ Manifest written to {manifest}")
    return 0


def train_svdd_command(args, config: ExperimentConfig) -> int:
    """Fit the occlusion detector on clean patch latents"""
    print("=== Training SVDD detector ===")
    model = LatentOfer(config).train_detector()
    print(f"✓ Radius {model.radius:.6f} at quantile {model.quantile}")
    return 0


def train_recon_command(args, config: ExperimentConfig) -> int:
    """Train the hybrid reconstructor (and the semantic FER it needs)"""
    ofer = LatentOfer(config)
    if not ofer.has("fer_semantic"):
        print("=== Training semantic FER ===")
        ofer.train_semantic_fer()
        print("✓ Semantic FER saved")

    variants = list(ASSEMBLY_STAGES) if args.assembly == "both" else [args.assembly or config.get("recon.assembly")]
    for assembly in variants:
        print(f"=== Training reconstructor ({assembly}) ===")
        ofer.train_reconstructor(assembly, resume=args.resume)
        print(f"✓ Saved {ofer.model_path(ASSEMBLY_STAGES[assembly])}")
    return 0


def train_fer_command(args, config: ExperimentConfig) -> int:
    """Train the semantic FER or the fusion variants"""
    ofer = LatentOfer(config)
    if args.semantic:
        print("=== Training semantic FER ===")
        ofer.train_semantic_fer()
        print(f"✓ Saved {ofer.model_path('fer_semantic')}")
        return 0

    fusions = args.fusion or list(FUSIONS)
    print(f"=== Training FER variants: {', '.join(fusions)} ===")
    trained = ofer.train_fer_variants(fusions)
    for fusion in trained:
        print(f"✓ Saved {ofer.model_path(fer_stage(fusion))}")
    return 0


def detect_command(args, config: ExperimentConfig) -> int:
    """Flag occluded patches of one image and write the mask JSON"""
    image = load_image(args.input)
    mask, scores = LatentOfer(config).detect(image)
    path = args.mask_out or _default_output(config, "masks", args.input, ".json")
    mask.save(path)

    print(f"✓ {len(mask.indices)} of {len(scores)} patches flagged ({mask.proportion:.2%})")
    if args.verbose:
        for score in scores:
            marker = "✗" if score.occluded else "✓"
            print(f"  {marker} patch {score.index:3d}  distance {score.distance:.6f}")
    print(f"✓ Mask written to {path}")
    return 0


def reconstruct_command(args, config: ExperimentConfig) -> int:
    """Restore the occluded patches of one image"""
    ofer = LatentOfer(config)
    image = load_image(args.input)
    if args.mask:
        mask = OcclusionMask.load(args.mask)
    else:
        mask, _ = ofer.detect(image)

    stage = ASSEMBLY_STAGES[args.assembly or config.get("recon.assembly")]
    result = ofer.reconstruct(image, mask, stage=stage)
    path = args.image_out or _default_output(config, "reconstructions", args.input, ".png")
    save_image(result.refined, path)
    print(f"✓ Reconstructed {len(mask.indices)} patches into {path}")

    summary = {
        "image": path,
        "mask_proportion": mask.proportion,
        "occluded_patch_indices": [int(i) for i in mask.indices],
        "assembly": args.assembly or config.get("recon.assembly"),
    }
    if args.ground_truth:
        score = image_quality(load_image(args.ground_truth), result.refined)
        summary.update(score.as_dict())
        print(f"  PSNR {score.psnr:.2f} dB  SSIM {score.ssim:.4f}")
    _write_json(summary, os.path.splitext(path)[0] + ".json")
    return 0


def predict_command(args, config: ExperimentConfig) -> int:
    """Classify one image through detect, reconstruct and FER"""
    image = load_image(args.input)
    prediction = LatentOfer(config).predict(image, fusion=args.fusion, reconstruction=not args.no_reconstruction)
    payload = prediction.to_dict()

    path = args.json_out or _default_output(config, "predictions", args.input, ".json")
    _write_json(payload, path)

    print(f"✓ {EXPRESSIONS[prediction.label]} (p={max(payload['probabilities']):.3f})")
    print(f"  occluded patches: {len(payload['occluded_patch_indices'])}")
    print(f"✓ Prediction written to {path}")
    return 0


def sweep_command(args, config: ExperimentConfig) -> int:
    """Accuracy against occlusion proportion for both protocols"""
    print("=== Occlusion sweep ===")
    report = LatentOfer(config).run_occlusion_sweep(with_reconstruction=not args.no_reconstruction)
    reports_dir = config.reports_dir
    report.save(os.path.join(reports_dir, "sweep.json"))
    plot_occlusion_sweep(report.sweep, os.path.join(reports_dir, "sweep.png"))
    for name, curve in sorted(report.sweep.items()):
        points = "  ".join(f"{p}:{acc:.3f}" for p, acc in sorted(curve.items()))
        print(f"  {name:24s} {points}")
    print(f"✓ Report written to {reports_dir}")
    return 0


def ablate_command(args, config: ExperimentConfig) -> int:
    """Reconstruction on/off against every fusion variant"""
    print("=== Ablation ===")
    report = LatentOfer(config).run_ablation()
    reports_dir = config.reports_dir
    report.save(os.path.join(reports_dir, "ablation.json"))
    plot_ablation(report.ablation, os.path.join(reports_dir, "ablation.png"))
    for row in report.ablation:
        marker = "✓" if row["reconstruction"] else "✗"
        print(f"  {marker} reconstruction  {row['fusion']:14s} {row['accuracy']:.4f}")
    print(f"✓ Report written to {reports_dir}")
    return 0


def report_command(args, config: ExperimentConfig) -> int:
    """Detection, reconstruction, sweep and ablation in one report"""
    print("=== Full evaluation report ===")
    ofer = LatentOfer(config)
    report = ofer.report()
    reports_dir = config.reports_dir
    path = report.save(os.path.join(reports_dir, "report.json"))
    plot_occlusion_sweep(report.sweep, os.path.join(reports_dir, "sweep.png"))
    plot_ablation(report.ablation, os.path.join(reports_dir, "ablation.png"))
    for stage, history in ofer.training_histories().items():
        if history:
            keys = sorted(history[0])
            plot_training_curve(history, keys, os.path.join(reports_dir, f"history_{stage}.png"), title=stage)

    detection = report.detection
    print(
        f"  detection  accuracy {detection['accuracy']:.4f}  "
        f"precision {detection['precision']:.4f}  recall {detection['recall']:.4f}"
    )
    for assembly, quality in sorted(report.reconstruction.items()):
        print(f"  {assembly:14s} PSNR {quality['psnr']:.2f}  SSIM {quality['ssim']:.4f}")
    print(f"✓ Report written to {path}")
    return 0


def status_command(args, config: ExperimentConfig) -> int:
    """Show configuration and which stages are trained"""
    config.show_config()
    print()
    ofer = LatentOfer(config)
    stages = ["fer_semantic", *ASSEMBLY_STAGES.values(), "svdd", *[fer_stage(f) for f in FUSIONS]]
    for stage in stages:
        if ofer.has(stage):
            print(f"✓ {stage}")
        else:
            print(f"✗ {stage} (not trained)")
    return 0


COMMANDS = {
    "gen-data": gen_data_command,
    "train-svdd": train_svdd_command,
    "train-recon": train_recon_command,
    "train-fer": train_fer_command,
    "detect": detect_command,
    "reconstruct": reconstruct_command,
    "predict": predict_command,
    "sweep": sweep_command,
    "ablate": ablate_command,
    "report": report_command,
    "status": status_command,
}


def _common_options(parser: argparse.ArgumentParser, suppress: bool):
    default = (lambda value: argparse.SUPPRESS) if suppress else (lambda value: value)
    parser.add_argument("--config", default=default(None), help="TOML or JSON config file")
    parser.add_argument("--seed", type=int, default=default(None), help="override the run seed")
    parser.add_argument("--out", default=default(None), help="output directory for data, models and reports")
    parser.add_argument("-v", "--verbose", action="store_true", default=default(False), help="debug logging")


def build_parser() -> argparse.ArgumentParser:
    parser = CliParser(prog="latent-ofer", description="Occlusion-robust facial expression recognition")
    _common_options(parser, suppress=False)
    # global flags are accepted after the subcommand too
    common = CliParser(add_help=False)
    _common_options(common, suppress=True)

    sub = parser.add_subparsers(dest="command", metavar="<command>")
    sub.required = True

    p = sub.add_parser("gen-data", parents=[common], help="render the toy face dataset")
    p.add_argument("--n", type=int, default=None, help="number of images (default: data.n_images)")

    sub.add_parser("train-svdd", parents=[common], help="train the occlusion detector")

    p = sub.add_parser("train-recon", parents=[common], help="train the hybrid reconstructor")
    p.add_argument("--assembly", choices=[*ASSEMBLY_STAGES, "both"], default=None)
    p.add_argument("--resume", action="store_true", help="continue from the saved checkpoint")

    p = sub.add_parser("train-fer", parents=[common], help="train expression networks")
    p.add_argument("--semantic", action="store_true", help="train only the semantic-consistency FER")
    p.add_argument("--fusion", choices=FUSIONS, action="append", help="fusion variant (repeatable)")

    p = sub.add_parser("detect", parents=[common], help="flag occluded patches of an image")
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--mask-out", default=None)

    p = sub.add_parser("reconstruct", parents=[common], help="restore occluded patches of an image")
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--mask", default=None, help="mask JSON (detected when omitted)")
    p.add_argument("--assembly", choices=list(ASSEMBLY_STAGES), default=None)
    p.add_argument("--image-out", default=None)
    p.add_argument("--ground-truth", default=None, help="clean image for PSNR/SSIM")

    p = sub.add_parser("predict", parents=[common], help="classify an image")
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--fusion", choices=FUSIONS, default=SWEEP_FUSION)
    p.add_argument("--no-reconstruction", action="store_true")
    p.add_argument("--json-out", default=None)

    p = sub.add_parser("sweep", parents=[common], help="accuracy against occlusion proportion")
    p.add_argument("--no-reconstruction", action="store_true")

    sub.add_parser("ablate", parents=[common], help="fusion x reconstruction ablation")
    sub.add_parser("report", parents=[common], help="full evaluation report")
    sub.add_parser("status", parents=[common], help="show configuration and trained stages")
    return parser


def load_config(args) -> ExperimentConfig:
    """Config file, then LATENT_OFER_SEED, then command line flags"""
    config = ExperimentConfig(args.config)
    if args.seed is not None:
        config.set("seed", args.seed)
    if args.out is not None:
        config.set("paths.out_dir", args.out)
    config.validate(check_paths=args.command != "gen-data")
    set_config(config)
    return config


def main(argv: Optional[List[str]] = None) -> int:
    """Main CLI entry point"""
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )

    try:
        config = load_config(args)
        return COMMANDS[args.command](args, config)
    except ModelError as e:
        print(f"❌ {e}", file=sys.stderr)
        print(f"Missing stage: {e.stage}", file=sys.stderr)
        return e.exit_code
    except LatentOferError as e:
        print(f"❌ {e}", file=sys.stderr)
        return e.exit_code
    except ValueError as e:
        # shape and range violations on user-supplied inputs
        print(f"❌ {e}", file=sys.stderr)
        return DataError.exit_code


if __name__ == "__main__":
    sys.exit(main())
