#!/usr/bin/env python3
"""
Command-line entry point.

Usage:
    guided-slots gendata --out data/corpus --n 2000
    guided-slots pretrain --corpus data/corpus --run-dir runs/a
    guided-slots genmasks --checkpoint runs/a/checkpoints/step_002000.pt --corpus data/corpus --n 2000 --out runs/a/guided
    guided-slots genmasks --attn-dir stacks/gen_000000 --classes 1,3 --out masks/gen_000000
    guided-slots train --guided runs/a/guided --corpus data/corpus --pretrained runs/a/checkpoints/step_002000.pt
    guided-slots eval --corpus data/corpus --checkpoint runs/a/checkpoints/step_005000.pt --probe --frechet
    guided-slots plot --run-dir runs/a

Exit codes: 0 success, 2 invalid configuration, 3 numerical failure, 1 any other error.
"""

import argparse
import sys
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple

import torch
from pydantic import ValidationError

from guided_slots.config import PRESETS, RunConfig
from guided_slots.exceptions import NumericalFailureError
from guided_slots.factory import create_bundle
from guided_slots.logger import attach_run_log, cli_logger, detach_run_log
from guided_slots.models.records import SampleRecord
from guided_slots.models.tensors import TensorFile
from guided_slots.repositories.dataset_repository import read_dataset
from guided_slots.repositories.run_repository import RunRepository, load_checkpoint
from guided_slots.repositories.tensor_repository import TENSOR_SUFFIX, read_attn_stack, read_tensor, write_tensor
from guided_slots.services.evaluation_service import EvaluationService
from guided_slots.services.mask_service import MaskService
from guided_slots.services.metric_service import predicted_partition
from guided_slots.services.plot_service import emit_plots
from guided_slots.services.probe_service import ProbeService
from guided_slots.services.scene_service import SceneService
from guided_slots.services.training_service import TrainingService
from guided_slots.utils.image_helpers import labels_to_pil, overlay_labels, save_png
from guided_slots.utils.seeding import is_validation_record

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_CONFIG = 2
EXIT_NUMERIC = 3


# ==================== CONFIG ====================


def load_config(args: argparse.Namespace, overrides: Optional[Dict[str, Any]] = None) -> RunConfig:
    """
    Build the run configuration: defaults and environment, then ``--config``, then flags.

    Raises:
        ValidationError: If any value is invalid
    """
    flags: Dict[str, Any] = dict(overrides or {})
    if getattr(args, "seed", None) is not None:
        flags["seed"] = args.seed
    if getattr(args, "mode", None):
        flags["mode"] = args.mode
    if getattr(args, "train_on", None):
        flags["train_on"] = args.train_on

    if getattr(args, "config", None):
        return RunConfig.from_file(args.config, flags)
    preset = getattr(args, "preset", None) or "toy"
    base = PRESETS[preset]()
    return base.with_overrides(flags) if flags else base


def resolve_run_dir(args: argparse.Namespace, config: RunConfig) -> Path:
    if getattr(args, "run_dir", None):
        return Path(args.run_dir)
    return Path(config.run_root) / config.config_hash


def split_records(records: Sequence[SampleRecord], seed: int) -> Tuple[List[SampleRecord], List[SampleRecord]]:
    """(training, validation) by the seed-stable record-id hash."""
    train, validation = [], []
    for record in records:
        (validation if is_validation_record(seed, record.record_id) else train).append(record)
    return train, validation


def _open_run(config: RunConfig, run_dir: Path) -> RunRepository:
    run = RunRepository(run_dir).create()
    run.save_config(config)
    attach_run_log(str(run_dir))
    return run


# ==================== COMMANDS ====================


def cmd_gendata(args: argparse.Namespace) -> int:
    scene = {
        "image_size": args.image_size,
        "num_classes": args.num_classes,
        "min_objects": args.min_objects,
        "max_objects": args.max_objects,
        "background_mode": args.background_mode,
        "occlusion_allowed": args.occlusion or None,
        "min_area_fraction": args.min_area_fraction,
        "caption_dropout": args.caption_dropout,
        "seed": args.seed,
    }
    overrides: Dict[str, Any] = {"scene": {k: v for k, v in scene.items() if v is not None}}
    if args.image_size is not None:
        overrides["diffusion"] = {"latent_size": args.image_size // 4}
    config = load_config(args, overrides)
    manifest = SceneService(config.scene, workers=args.workers).make_corpus(args.n, args.out)
    cli_logger.info(f"Corpus manifest: {manifest}")
    return EXIT_OK


def cmd_pretrain(args: argparse.Namespace) -> int:
    overrides = {"diffusion": {"pretrain_steps": args.steps}} if args.steps else None
    config = load_config(args, overrides)
    run_dir = resolve_run_dir(args, config)
    run = _open_run(config, run_dir)
    corpus = read_dataset(args.corpus).records
    checkpoint = TrainingService(config, create_bundle(config, args.device), run).pretrain_decoder(corpus)
    cli_logger.info(f"Decoder checkpoint: {checkpoint.path}")
    return EXIT_OK


def cmd_genmasks(args: argparse.Namespace) -> int:
    config = load_config(args)
    if args.attn_dir:
        return _masks_from_stack(args, config)
    if not (args.checkpoint and args.corpus and args.n):
        raise ValueError("genmasks needs either --attn-dir or --checkpoint, --corpus and --n")

    bundle = create_bundle(config, args.device)
    bundle.load_checkpoint(load_checkpoint(args.checkpoint))
    sources, _ = split_records(read_dataset(args.corpus).records, config.seed)
    run = RunRepository(Path(args.out).parent)
    service = TrainingService(config, bundle, run)
    stack_dir = Path(args.out) / "stacks" if args.keep_stacks else None
    manifest = service.generate_guided_set(sources, args.n, args.out, stack_dir=stack_dir, keep_stacks=args.keep_stacks)
    if args.overlays:
        _write_overlays(read_dataset(manifest).records[: args.overlays], Path(args.out) / "overlays")
    cli_logger.info(f"Guided set manifest: {manifest}")
    return EXIT_OK


def _masks_from_stack(args: argparse.Namespace, config: RunConfig) -> int:
    if not args.classes:
        raise ValueError("--attn-dir needs --classes")
    class_ids = [int(c) for c in args.classes.split(",") if c.strip()]
    size = args.image_size or config.scene.image_size
    stack = read_attn_stack(args.attn_dir)
    mask = MaskService(config.mask.tau, config.mask.thresholds).pseudo_mask(stack, class_ids, (size, size))

    out = Path(args.out)
    labels_file = TensorFile.from_tensor(mask.labels, name="pseudo_mask", dtype="int32")
    write_tensor(labels_file, out / f"pseudo_mask{TENSOR_SUFFIX}")
    if args.image:
        image = read_tensor(args.image).to_tensor()
        save_png(overlay_labels(image, mask.labels), out / "overlay.png")
    else:
        save_png(labels_to_pil(mask.labels), out / "pseudo_mask.png")
    cli_logger.info(f"Pseudo mask with classes {list(mask.class_ids)} written to {out}")
    return EXIT_OK


def cmd_train(args: argparse.Namespace) -> int:
    overrides: Dict[str, Any] = {"training": {}}
    if args.steps:
        overrides["training"]["steps"] = args.steps
    if args.resume:
        overrides["training"]["resume_from"] = args.resume
    if args.bce_weight is not None:
        overrides["loss"] = {"bce_weight": args.bce_weight}
    if args.decoder:
        overrides["decoder"] = {"kind": args.decoder}
    config = load_config(args, overrides)
    run_dir = resolve_run_dir(args, config)
    run = _open_run(config, run_dir)

    bundle = create_bundle(config, args.device)
    if args.pretrained:
        bundle.load_checkpoint(load_checkpoint(args.pretrained))
    service = TrainingService(config, bundle, run)

    train_split, validation = split_records(read_dataset(args.corpus).records, config.seed)
    if config.train_on == "generated":
        if not args.guided:
            raise ValueError("train_on=generated needs --guided (a genmasks manifest)")
        guided = read_dataset(args.guided).records
    else:
        guided = service.rendered_guided_set(train_split)

    checkpoint = service.train_guided(guided, validation)
    cli_logger.info(f"Final checkpoint: {checkpoint.path}")
    return EXIT_OK


def cmd_eval(args: argparse.Namespace) -> int:
    checkpoint = load_checkpoint(args.checkpoint)
    if args.config:
        config = load_config(args)
    else:
        config = RunConfig.model_validate_json(checkpoint.config_json)
    bundle = create_bundle(config, args.device)
    bundle.load_checkpoint(checkpoint)

    records = read_dataset(args.corpus).records
    train_split, validation = split_records(records, config.seed)
    eval_records = records if args.split == "all" else validation
    out = RunRepository(args.out or Path(args.checkpoint).parent.parent)

    evaluator = EvaluationService(bundle, batch_size=config.training.batch_size, threshold=config.probe.iou_threshold)
    report = evaluator.evaluate(eval_records, with_frechet=args.frechet)
    out.save_report("eval_report", report)

    if args.probe:
        probe_cfg = config.probe
        service = ProbeService(
            d_slots=config.slots.dim,
            num_classes=config.scene.num_classes,
            steps=probe_cfg.steps,
            lr=probe_cfg.lr,
            eval_every=probe_cfg.eval_every,
            iou_threshold=probe_cfg.iou_threshold,
            seed=config.seed,
        )

        def collect(rs):
            return evaluator.probe_samples(rs, probe_cfg.iou_threshold, probe_cfg.semantic_fallback)

        result = service.run(collect(train_split), collect(validation[1::2]), collect(validation[0::2]))
        out.save_report("probe_report", result)

    if args.overlays:
        overlay_dir = out.run_dir / "overlays"
        for output in evaluator.slot_outputs(eval_records[: args.overlays]):
            # Shift slot indices so slot 0 is not drawn as background
            slots = predicted_partition(output.masks) + 1
            path = overlay_dir / f"{output.record.record_id}_slots.png"
            save_png(overlay_labels(output.record.image_tensor(), slots), path)
        _write_overlays(eval_records[: args.overlays], overlay_dir)
    return EXIT_OK


def cmd_plot(args: argparse.Namespace) -> int:
    for path in emit_plots(args.run_dir):
        cli_logger.info(f"Plot: {path}")
    return EXIT_OK


def _write_overlays(records: Sequence[SampleRecord], out_dir: Path) -> None:
    for record in records:
        if record.semantic_mask is not None:
            overlay = overlay_labels(record.image_tensor(), record.semantic_tensor())
            save_png(overlay, out_dir / f"{record.record_id}_mask.png")


# ==================== PARSER ====================


def _common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", type=str, default=None, help="Run JSON config file")
    parser.add_argument("--preset", choices=sorted(PRESETS), default=None, help="Named preset when no --config")
    parser.add_argument("--seed", type=int, default=None)
    parser.add_argument("--device", default="cuda" if torch.cuda.is_available() else "cpu")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="guided-slots", description="Slot attention guided by diffusion attention")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gendata", help="Render a synthetic scene corpus")
    _common(p)
    p.add_argument("--out", required=True)
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--image-size", type=int, default=None)
    p.add_argument("--num-classes", type=int, default=None)
    p.add_argument("--min-objects", type=int, default=None)
    p.add_argument("--max-objects", type=int, default=None)
    p.add_argument("--background-mode", choices=["solid", "gradient", "textured-noise"], default=None)
    p.add_argument("--occlusion", action="store_true")
    p.add_argument("--min-area-fraction", type=float, default=None)
    p.add_argument("--caption-dropout", type=float, default=None)
    p.add_argument("--workers", type=int, default=1)
    p.set_defaults(func=cmd_gendata)

    p = sub.add_parser("pretrain", help="Phase 1: train the toy denoiser on a corpus")
    _common(p)
    p.add_argument("--corpus", required=True)
    p.add_argument("--run-dir", default=None)
    p.add_argument("--steps", type=int, default=None)
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("genmasks", help="Phase 2: generate images with pseudo masks, or mask one attention stack")
    _common(p)
    p.add_argument("--out", required=True)
    p.add_argument("--mode", choices=["glass", "glass_dagger", "unguided"], default=None)
    p.add_argument("--checkpoint", default=None)
    p.add_argument("--corpus", default=None)
    p.add_argument("--n", type=int, default=None)
    p.add_argument("--keep-stacks", type=int, default=0, help="Persist the attention stacks of the first K images")
    p.add_argument("--overlays", type=int, default=0)
    p.add_argument("--attn-dir", default=None, help="Attention-stack directory to turn into one mask")
    p.add_argument("--classes", default=None, help="Comma-separated class ids for --attn-dir")
    p.add_argument("--image-size", type=int, default=None)
    p.add_argument("--image", default=None, help="Image tensor file to overlay the mask on")
    p.set_defaults(func=cmd_genmasks)

    p = sub.add_parser("train", help="Guided slot-attention training")
    _common(p)
    p.add_argument("--corpus", required=True, help="Rendered corpus (validation split and train_on=rendered)")
    p.add_argument("--guided", default=None, help="Guided set manifest from genmasks")
    p.add_argument("--pretrained", default=None, help="Phase 1 checkpoint")
    p.add_argument("--run-dir", default=None)
    p.add_argument("--mode", choices=["glass", "glass_dagger", "unguided"], default=None)
    p.add_argument("--train-on", choices=["generated", "rendered"], default=None)
    p.add_argument("--decoder", choices=["broadcast", "diffusion"], default=None)
    p.add_argument("--steps", type=int, default=None)
    p.add_argument("--bce-weight", type=float, default=None)
    p.add_argument("--resume", default=None)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="Evaluate a checkpoint on a corpus")
    _common(p)
    p.add_argument("--corpus", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", default=None)
    p.add_argument("--split", choices=["validation", "all"], default="validation")
    p.add_argument("--probe", action="store_true")
    p.add_argument("--frechet", action="store_true")
    p.add_argument("--overlays", type=int, default=0)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("plot", help="Write curves and qualitative grids for a run")
    p.add_argument("--run-dir", required=True)
    p.set_defaults(func=cmd_plot)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    """Parse arguments, run one command and map failures to exit codes."""
    args = build_parser().parse_args(argv)
    torch.use_deterministic_algorithms(True, warn_only=True)
    try:
        return args.func(args)
    except ValidationError as e:
        cli_logger.error(f"Invalid configuration: {e}")
        return EXIT_CONFIG
    except NumericalFailureError as e:
        cli_logger.error(f"{e} (last checkpoint: {e.last_checkpoint})")
        return EXIT_NUMERIC
    except Exception as e:
        cli_logger.error(f"{args.command} failed: {e}", exc_info=True)
        return EXIT_ERROR
    finally:
        detach_run_log()


def run() -> None:
    sys.exit(main())


if __name__ == "__main__":
    run()
