"""
Command-line entry point: `python -m src.cli <command> [flags]`.

Exit codes: 0 success, 1 usage error, 2 runtime error. Logs and progress go to
standard error; results go to files (the `fid` value is also printed).
"""
import argparse
import dataclasses
import logging
import os
import sys
from typing import Dict, List, Optional

from src import pipeline, report
from src.config import TrainConfig, apply_overrides, load_config
from src.errors import DefectForgeError
from src.evalharness import evaluate, fid_eval, select_threshold
from src.nets import FeatureExtractor, GeneratorNet, load_networks
from src.synthworld import load_dataset, make_dataset

logger = logging.getLogger("src.cli")


class UsageError(Exception):
    pass


class Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.format_usage()}{self.prog}: error: {message}")


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="YAML run configuration (defaults apply when omitted)")
    p.add_argument("--seed", type=int, help="run seed (default 0)")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--force", action="store_true", help="allow writing into an existing output directory")
    p.add_argument("--workers", type=int, help="batch / render worker threads (default 2)")
    p.add_argument("--verbose", action="store_true", help="debug logging")


def _training(p: argparse.ArgumentParser) -> None:
    p.add_argument("--data", required=True, help="dataset directory from gen-data")
    p.add_argument("--steps", type=int, help="step budget for this stage (defaults 2000/3000/2000)")
    p.add_argument("--lr", type=float, help="Adam learning rate (default 1e-4)")
    p.add_argument("--weight-decay", type=float, help="weight decay (default 1e-4)")
    p.add_argument("--batch-size", type=int, help="batch size (default 16)")


def _weights(p: argparse.ArgumentParser) -> None:
    p.add_argument("--w-h", type=float, help="hard-example loss weight (default 1.0)")
    p.add_argument("--w-fid", type=float, help="Fréchet loss weight (default 0.1)")


def _switches(p: argparse.ArgumentParser) -> None:
    _weights(p)
    p.add_argument("--use-generator", action=argparse.BooleanOptionalAction, help="train the generator (default on)")
    p.add_argument("--use-fid", action=argparse.BooleanOptionalAction, help="Fréchet loss term (default on)")
    p.add_argument("--use-hard-loss", action=argparse.BooleanOptionalAction, help="hard-example loss term (default on)")


def build_parser() -> Parser:
    parser = Parser(prog="defectforge", description="Joint generator / detector training on a synthetic road world.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=Parser)

    p = sub.add_parser("gen-data", help="render a synthetic dataset")
    _common(p)
    p.add_argument("--n-clean", type=int, help="clean scenes (default 800)")
    p.add_argument("--n-defected", type=int, help="defected scenes (default 800)")

    p = sub.add_parser("pretrain", help="stage 0: detector on real scenes")
    _common(p)
    _training(p)

    p = sub.add_parser("train-joint", help="stage 1: joint generator / discriminators / detector")
    _common(p)
    _training(p)
    _switches(p)
    p.add_argument("--detector", help="stage-0 detector checkpoint (fresh detector when omitted)")

    p = sub.add_parser("augment", help="synthesize an augmentation dataset")
    _common(p)
    p.add_argument("--generator", required=True, help="generator checkpoint")
    p.add_argument("--n-images", type=int, help="images to synthesize (default 512)")
    p.add_argument("--data", help="real dataset; when given the FID against its defected images is logged")

    p = sub.add_parser("retrain", help="stage 2: detector on real + synthesized scenes")
    _common(p)
    _training(p)
    p.add_argument("--augmentation", required=True, help="augmentation dataset directory")
    p.add_argument("--detector", required=True, help="detector checkpoint to start from")

    p = sub.add_parser("eval", help="evaluate a detector checkpoint")
    _common(p)
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--detector", required=True, help="detector checkpoint")
    p.add_argument("--split", default="test", choices=["train", "val", "test"], help="split to score (default test)")
    p.add_argument("--threshold", type=float, help="confidence threshold (selected on val when omitted)")

    p = sub.add_parser("ablate", help="run the E2-E5 ablation over several seeds")
    _common(p)
    _training(p)
    _weights(p)
    p.add_argument("--seeds", type=int, default=5, help="number of seeds, run as 0..S-1 (default 5)")
    p.add_argument("--retrain-from-joint", action="store_true", help="start retraining from the joint detector")

    p = sub.add_parser("fid", help="evaluation-mode Fréchet distance between two datasets")
    p.add_argument("--config", help="YAML run configuration")
    p.add_argument("--set-a", required=True, help="first dataset directory")
    p.add_argument("--set-b", required=True, help="second dataset directory")
    p.add_argument("--verbose", action="store_true", help="debug logging")

    p = sub.add_parser("plot", help="render figures for a run directory")
    p.add_argument("--out", required=True, help="run directory")
    p.add_argument("--verbose", action="store_true", help="debug logging")
    return parser


def _overrides(args: argparse.Namespace) -> Dict:
    get = lambda name: getattr(args, name, None)  # noqa: E731
    overrides = {
        "seed": get("seed"),
        "lr": get("lr"),
        "weight_decay": get("weight_decay"),
        "batch_size": get("batch_size"),
        "workers": get("workers"),
        "n_clean": get("n_clean"),
        "n_defected": get("n_defected"),
        "augment_images": get("n_images"),
        "weights.w_h": get("w_h"),
        "weights.w_fid": get("w_fid"),
        "ablation.use_generator": get("use_generator"),
        "ablation.use_fid": get("use_fid"),
        "ablation.use_hard_loss": get("use_hard_loss"),
        "retrain_from_joint": True if get("retrain_from_joint") else None,
    }
    steps = get("steps")
    stage = {"pretrain": "pretrain", "train-joint": "joint", "retrain": "retrain"}.get(args.command)
    if steps is not None and stage:
        overrides[f"steps.{stage}"] = steps
    elif steps is not None and args.command == "ablate":
        overrides.update({"steps.pretrain": steps, "steps.joint": steps, "steps.retrain": steps})
    return overrides


def _claim_out_dir(path: str, force: bool) -> None:
    if os.path.isdir(path) and os.listdir(path) and not force:
        raise DefectForgeError(f"output directory {path} is not empty; pass --force to reuse it")
    os.makedirs(path, exist_ok=True)


def _with_world(config: TrainConfig, data_dir: str):
    dataset = load_dataset(data_dir)
    return dataclasses.replace(config, world=dataset.params), dataset


def _load_detector(config: TrainConfig, path: str):
    detector = pipeline.build_detector(config)
    load_networks(path, {"detector": detector})
    return detector


def run(args: argparse.Namespace) -> int:
    if args.command == "plot":
        report.plot_run(args.out)
        return 0
    config = apply_overrides(load_config(args.config), _overrides(args))

    if args.command == "fid":
        a, b = load_dataset(args.set_a), load_dataset(args.set_b)
        value = fid_eval([s.image.data for s in a.samples], [s.image.data for s in b.samples],
                         FeatureExtractor(config.nets))
        print(f"{value:.4f}")
        return 0

    _claim_out_dir(args.out, args.force)
    if args.command == "gen-data":
        make_dataset(args.out, config.n_clean, config.n_defected, config.seed, config.world, config.workers)
        return 0

    if args.command == "augment":
        generator = GeneratorNet(config.nets)
        load_networks(args.generator, {"generator": generator})
        reference = None
        if args.data:
            config, dataset = _with_world(config, args.data)
            reference = dataset.defected("train")
        pipeline.synthesize_augmentation(config, generator, config.augment_images, config.seed, args.out, reference)
        return 0

    config, dataset = _with_world(config, args.data)
    if args.command == "pretrain":
        pipeline.pretrain_detector(config, dataset, args.out)
    elif args.command == "train-joint":
        init = _load_detector(config, args.detector) if args.detector else None
        record = pipeline.train_joint(config, dataset, init, args.out)
        if record.diagnostics.get("hard_loss_update_correlation") is not None:
            logger.info("Hard-loss diagnostic: %s", record.diagnostics)
    elif args.command == "retrain":
        augmentation = load_dataset(args.augmentation)
        pipeline.retrain_detector(config, dataset, augmentation, _load_detector(config, args.detector), args.out)
    elif args.command == "eval":
        detector = _load_detector(config, args.detector)
        threshold = args.threshold
        if threshold is None:
            threshold = select_threshold(detector, dataset.split("val"), config.iou_threshold)
        evaluate(detector, dataset.split(args.split), threshold, args.split, config.iou_threshold,
                 os.path.join(args.out, "metrics.json"))
    elif args.command == "ablate":
        pipeline.run_ablation(config, dataset, list(range(args.seeds)), args.out)
    return 0


def dispatch(argv: Optional[List[str]] = None) -> int:
    """Parse argv, run the command and map failures to exit codes."""
    try:
        args = build_parser().parse_args(argv)
    except UsageError as e:
        sys.stderr.write(f"{e}\n")
        return 1
    except SystemExit as e:
        return int(e.code or 0)
    logging.basicConfig(stream=sys.stderr, level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    try:
        return run(args)
    except (DefectForgeError, OSError) as e:
        logger.error("%s", e)
        return 2


def main() -> None:
    sys.exit(dispatch())


if __name__ == "__main__":
    main()
