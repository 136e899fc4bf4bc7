"""Command-line entry point: ``deepvoxels <verb> [options]``."""

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np
from PIL import Image

from . import serialization
from .camera import read_poses
from .config import TrainConfig, load_config_file
from .data import SCENES, default_intrinsics, generate_poses, load_dataset, make_scene, render_dataset, write_image
from .projection import GridNotVisible, depth_range
from .training import Checkpoint, Trainer, TrainingDiverged, evaluate, infer_view

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_USAGE = 2
EXIT_CONFIG = 3
EXIT_INPUT = 4
EXIT_NOT_VISIBLE = 5
EXIT_DIVERGED = 6
EXIT_GRADCHECK = 7

EXIT_CODES = f"""exit codes:
  {EXIT_OK}  success
  {EXIT_FAILURE}  unexpected internal error
  {EXIT_USAGE}  unknown verb or flag, bad flag value
  {EXIT_CONFIG}  invalid configuration (file or flags)
  {EXIT_INPUT}  missing or malformed input (dataset, pose file, checkpoint)
  {EXIT_NOT_VISIBLE}  the voxel grid is not visible from a requested pose
  {EXIT_DIVERGED}  training produced a non-finite loss
  {EXIT_GRADCHECK}  grad-check found an op above tolerance
"""


class CliError(Exception):
    def __init__(self, code: int, message: str):
        super().__init__(message)
        self.code = code


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_USAGE)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="deepvoxels", description="Persistent voxel-feature novel view synthesis.",
                epilog=EXIT_CODES, formatter_class=argparse.RawDescriptionHelpFormatter)
    p.add_argument("--seed", type=int, default=None, help="random seed (overrides config file)")
    p.add_argument("--config", type=Path, default=None, help="flat JSON file of TrainConfig/NetConfig keys")
    p.add_argument("--out", type=Path, default=Path("out"), help="output directory (default: ./out)")
    sub = p.add_subparsers(dest="verb", required=True, parser_class=_Parser)

    g = sub.add_parser("gen-data", help="render a synthetic train/test dataset")
    g.add_argument("--scene", choices=sorted(SCENES), default="cube")
    g.add_argument("--train", type=int, default=50, help="hemisphere training views")
    g.add_argument("--test", type=int, default=20, help="spiral test views")
    g.add_argument("--size", type=int, default=64)
    g.add_argument("--radius", type=float, default=2.2)
    g.add_argument("--supersample", type=int, default=2)

    t = sub.add_parser("train", help="train on a dataset directory, write a checkpoint")
    t.add_argument("--data", type=Path, required=True)
    t.add_argument("--iterations", type=int)
    t.add_argument("--lr", type=float)
    t.add_argument("--adversarial", action="store_true", default=None)
    t.add_argument("--no-occlusion", dest="occlusion", action="store_false", default=None,
                   help="uniform visibility ablation")
    t.add_argument("--dtype", choices=("float64", "float32"))
    t.add_argument("--checkpoint-every", type=int)

    for verb, text in (("render", "render image and depth for poses"), ("depth", "export 16-bit depth maps")):
        r = sub.add_parser(verb, help=text)
        r.add_argument("--checkpoint", type=Path, required=True)
        r.add_argument("--poses", type=Path, required=True, help="pose file or dataset directory")
        r.add_argument("--index", type=int, nargs="*", help="subset of pose indices (default: all)")

    e = sub.add_parser("eval", help="PSNR/SSIM table for a test dataset")
    e.add_argument("--checkpoint", type=Path, required=True)
    e.add_argument("--data", type=Path, required=True, help="test dataset directory")
    e.add_argument("--train-data", type=Path, help="training dataset for the nearest-neighbour baseline")

    c = sub.add_parser("grad-check", help="finite-difference check of every op and the pipeline")
    c.add_argument("--entries", type=int, default=4, help="probed entries per pipeline tensor")
    return p


def resolve_config(args) -> TrainConfig:
    """Flag > config file > default."""
    flat = TrainConfig().to_flat()
    if args.config is not None:
        try:
            flat.update(load_config_file(args.config))
        except FileNotFoundError:
            raise CliError(EXIT_CONFIG, f"{args.config}: config file not found") from None
        except ValueError as exc:
            raise CliError(EXIT_CONFIG, str(exc)) from None
    if args.seed is not None:
        flat["seed"] = args.seed
    overrides = {"iterations": "iterations", "lr": "lr", "adversarial": "adversarial", "occlusion": "occlusion",
                 "dtype": "dtype", "checkpoint_every": "checkpoint_every"}
    for attr, key in overrides.items():
        value = getattr(args, attr, None)
        if value is not None:
            flat[key] = value
    try:
        return TrainConfig.from_flat(flat).validate()
    except (TypeError, ValueError) as exc:
        raise CliError(EXIT_CONFIG, f"invalid configuration: {exc}") from None


def _load_checkpoint(path: Path) -> Checkpoint:
    try:
        return Checkpoint.load(path)
    except FileNotFoundError:
        raise CliError(EXIT_INPUT, f"{path}: checkpoint not found") from None
    except (serialization.FormatError, KeyError, ValueError) as exc:
        raise CliError(EXIT_INPUT, f"{path}: unreadable checkpoint ({exc})") from None


def _load_dataset(path: Path):
    try:
        return load_dataset(path)
    except (FileNotFoundError, ValueError) as exc:
        raise CliError(EXIT_INPUT, str(exc)) from None


def _load_poses(path: Path, index) -> list:
    try:
        records = read_poses(path / "poses.txt" if path.is_dir() else path)
    except (FileNotFoundError, ValueError) as exc:
        raise CliError(EXIT_INPUT, str(exc)) from None
    ids = range(len(records)) if not index else index
    bad = [i for i in ids if not 0 <= i < len(records)]
    if bad:
        raise CliError(EXIT_INPUT, f"pose indices {bad} out of range (have {len(records)})")
    return [(i, records[i].pose) for i in ids]


def depth_to_u16(depth: np.ndarray, near: float, far: float) -> np.ndarray:
    """Linear map of [near, far] onto [0, 65535]."""
    x = (np.asarray(depth, dtype=np.float64) - near) / (far - near)
    return np.round(np.clip(x, 0.0, 1.0) * 65535.0).astype(np.uint16)


def write_depth_png(path, depth: np.ndarray, near: float, far: float) -> None:
    Image.fromarray(depth_to_u16(depth, near, far)).save(path)


def cmd_gen_data(args) -> int:
    if min(args.train, args.test) < 0 or args.size < 1:
        raise CliError(EXIT_USAGE, "counts must be >= 0 and size >= 1")
    scene = make_scene(args.scene)
    K = default_intrinsics(args.size)
    for split, kind, n in (("train", "hemisphere_uniform", args.train), ("test", "archimedean_spiral", args.test)):
        if n == 0:
            continue
        poses = generate_poses(kind, n, args.radius, K=K)
        render_dataset(args.out / split, scene, poses, args.size, split, args.supersample)
        print(f"wrote {n} {split} views to {args.out / split}")
    return EXIT_OK


def cmd_train(args, cfg: TrainConfig) -> int:
    ds = _load_dataset(args.data)
    args.out.mkdir(parents=True, exist_ok=True)
    try:
        trainer = Trainer(ds, cfg)
    except ValueError as exc:
        raise CliError(EXIT_CONFIG, str(exc)) from None
    try:
        ckpt = trainer.run(checkpoint_dir=args.out)
    except TrainingDiverged as exc:
        raise CliError(EXIT_DIVERGED, str(exc)) from None
    path = args.out / "checkpoint.dvc"
    ckpt.save(path)
    (args.out / "loss.json").write_text(json.dumps(ckpt.history) + "\n")
    print(f"trained {ckpt.iteration} iterations, final loss {ckpt.history[-1]:.4f}; wrote {path}")
    return EXIT_OK


def _render_all(args, with_image: bool) -> int:
    ckpt = _load_checkpoint(args.checkpoint)
    model = ckpt.model()
    args.out.mkdir(parents=True, exist_ok=True)
    for i, pose in _load_poses(args.poses, args.index):
        try:
            near, far = depth_range(model.grid, pose)
            image, depth = infer_view(model, pose)
        except GridNotVisible as exc:
            raise CliError(EXIT_NOT_VISIBLE, f"pose {i}: {exc}") from None
        if with_image:
            write_image(args.out / f"render_{i:04d}.png", np.clip(image, 0.0, 1.0))
        write_depth_png(args.out / f"depth_{i:04d}.png", depth, near, far)
        (args.out / f"depth_{i:04d}.json").write_text(json.dumps({"near": near, "far": far}) + "\n")
    print(f"wrote outputs to {args.out}")
    return EXIT_OK


def cmd_eval(args) -> int:
    ckpt = _load_checkpoint(args.checkpoint)
    test = _load_dataset(args.data)
    train = _load_dataset(args.train_data) if args.train_data else None
    args.out.mkdir(parents=True, exist_ok=True)
    try:
        result = evaluate(ckpt, test, train, out_csv=args.out / "eval.csv")
    except GridNotVisible as exc:
        raise CliError(EXIT_NOT_VISIBLE, str(exc)) from None
    mean = result.mean
    print(f"{len(result.rows)} views: PSNR {mean['psnr_db']:.2f} dB, SSIM {mean['ssim']:.4f}"
          f" (baseline {mean['baseline_psnr_db']:.2f} dB); wrote {args.out / 'eval.csv'}")
    return EXIT_OK


def cmd_grad_check(args, cfg: TrainConfig) -> int:
    from .gradcheck import TOLERANCE, run_suite

    failed = []

    def report(name, err):
        ok = err < TOLERANCE
        if not ok:
            failed.append(name)
        print(f"{name:32s} max_rel_err {err:.3e}  {'ok' if ok else 'FAIL'}", flush=True)

    run_suite(seed=cfg.seed, pipeline_entries=args.entries, report=report)
    if failed:
        raise CliError(EXIT_GRADCHECK, f"grad-check failed for {', '.join(failed)}")
    return EXIT_OK


def run_command(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO, format="%(message)s")
    try:
        cfg = resolve_config(args)
        print("config: " + json.dumps(cfg.to_flat(), sort_keys=True), flush=True)
        if args.verb == "gen-data":
            return cmd_gen_data(args)
        if args.verb == "train":
            return cmd_train(args, cfg)
        if args.verb == "render":
            return _render_all(args, with_image=True)
        if args.verb == "depth":
            return _render_all(args, with_image=False)
        if args.verb == "eval":
            return cmd_eval(args)
        return cmd_grad_check(args, cfg)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except Exception as exc:  # noqa: BLE001 - last-resort one-line diagnostic
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_FAILURE


def main() -> None:
    sys.exit(run_command())


if __name__ == "__main__":
    main()
