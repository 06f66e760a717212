"""Command-line entry point: ``dualpix <command> [flags]``.

Commands: gen-data, train, eval, infer, nimat, dump-config. Any command
accepts ``--config FILE`` with ``key = value`` lines (``#`` comments, keys
are flag names with dashes or underscores); explicit flags win over the
file. Exit status: 0 success, 1 runtime failure, 2 usage error.
"""

from __future__ import annotations

import argparse
import csv
import logging
import os
import sys
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from . import __version__
from .losses import LossWeights
from .metrics import psnr
from .model import MdpConfig, build, load_checkpoint
from .nimat import synthesize_eight_views, write_animation_frames
from .scenes import DEFAULT_LEAKAGE, DESK_BLUR_RANGE, RecordError, generate_dataset, load_split, read_png, write_png
from .train import DEFAULT_EPOCHS, DESK_PATCHES_PER_EPOCH, TrainConfig, evaluate, identity_baseline, train_step1, train_step2

EVAL_COLUMNS = ("task", "psnr", "ssim", "mae", "n")
MODEL_FLAGS = ("depth", "base_channels", "stitch", "patch")


class UsageError(Exception):
    """Bad flag combination; reported with exit status 2."""


# ---------------------------------------------------------------------------
# parser


class _Formatter(argparse.ArgumentDefaultsHelpFormatter):
    pass


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, help="key = value file; flags override it")
    p.add_argument("--threads", type=int, default=os.cpu_count() or 1, help="BLAS/worker thread cap")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")


def _add_model(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("model (step 1 only; step 2 inherits from --init)")
    g.add_argument("--depth", type=int, default=None, help="encoder levels [3]")
    g.add_argument("--base-channels", type=int, default=None, help="channels at full resolution [16]")
    g.add_argument("--stitch", choices=("none", "middle", "late"), default=None, help="decoder stitching [middle]")
    g.add_argument("--patch", type=int, default=None, help="training patch side [64]")
    g.add_argument("--model-seed", type=int, default=0, help="weight initialisation seed")


def _float_pair(text: str) -> tuple[float, float]:
    try:
        lo, hi = (float(v) for v in str(text).strip("()").split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected LO,HI, got {text!r}") from None
    return lo, hi


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dualpix", description=__doc__.splitlines()[0],
                                     formatter_class=_Formatter)
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, metavar="command")

    p = sub.add_parser("gen-data", help="render a synthetic DP dataset", formatter_class=_Formatter)
    _add_common(p)
    p.add_argument("--out", type=Path, default=Path("data"), help="dataset root")
    p.add_argument("--scenes", type=int, default=232, help="number of scenes")
    p.add_argument("--size", type=int, default=128, help="scene side in pixels")
    p.add_argument("--seed", type=int, default=0, help="dataset seed")
    p.add_argument("--test", type=int, default=None, help="test scenes (default: 32 of every 232)")
    p.add_argument("--leakage", type=float, default=DEFAULT_LEAKAGE, help="DP half-disc leakage")
    p.add_argument("--levels", type=int, default=16, help="defocus quantisation levels")
    p.add_argument("--focal-length-mm", type=float, default=50.0, help="lens focal length")
    p.add_argument("--pixel-pitch-mm", type=float, default=0.03, help="sensor pixel pitch")
    p.add_argument("--blur-range", type=_float_pair, default=DESK_BLUR_RANGE, metavar="LO,HI",
                   help="accepted mean blur radius per scene, pixels")
    p.add_argument("--force", action="store_true", help="overwrite a non-empty output directory")

    p = sub.add_parser("train", help="run one training step", formatter_class=_Formatter)
    _add_common(p)
    p.add_argument("--data", type=Path, default=Path("data"), help="dataset root")
    p.add_argument("--out", type=Path, default=Path("runs"), help="checkpoint/history directory")
    p.add_argument("--step", type=int, choices=(1, 2), required=True, help="1: views, Dec_s frozen; 2: joint")
    p.add_argument("--init", type=Path, default=None, help="starting checkpoint (required for step 2)")
    p.add_argument("--resume", action="store_true", help="continue from <out>/step<N>_last.mdp")
    p.add_argument("--epochs", type=int, default=None, help=f"epochs (step 1: {DEFAULT_EPOCHS[1]}, "
                                                            f"step 2: {DEFAULT_EPOCHS[2]})")
    p.add_argument("--lr", type=float, default=None, help="initial learning rate (3e-4 / 6e-4)")
    p.add_argument("--halve-every", type=int, default=4, help="halve the learning rate every N epochs")
    p.add_argument("--batch", type=int, default=8, help="patches per step")
    p.add_argument("--seed", type=int, default=0, help="shuffling seed")
    p.add_argument("--patch-stride", type=int, default=32, help="stride of the patch grid")
    p.add_argument("--patches-per-epoch", type=int, default=DESK_PATCHES_PER_EPOCH,
                   help="patches drawn per epoch (0: the whole patch grid)")
    p.add_argument("--lambda1", type=float, default=0.8, help="step 2 weight of the view MSE")
    p.add_argument("--lambda2", type=float, default=0.5, help="step 2 weight of L_C")
    p.add_argument("--lambda3", type=float, default=0.5, help="step 2 weight of L_D")
    p.add_argument("--no-dp-losses", action="store_true", help="step 1 without L_C and L_D")
    p.add_argument("--no-validate", action="store_true", help="skip per-epoch test-split PSNR")
    _add_model(p)

    p = sub.add_parser("eval", help="PSNR/SSIM/MAE on a split", formatter_class=_Formatter)
    _add_common(p)
    p.add_argument("--checkpoint", type=Path, default=None, help="model to evaluate")
    p.add_argument("--identity", action="store_true", help="evaluate the blurry input itself")
    p.add_argument("--data", type=Path, default=Path("data"), help="dataset root")
    p.add_argument("--split", default="test", help="split to evaluate")
    p.add_argument("--csv", type=Path, default=None, help="also write the rows here")

    p = sub.add_parser("infer", help="predict sharp image and DP views", formatter_class=_Formatter)
    _add_common(p)
    p.add_argument("--checkpoint", type=Path, required=True, help="trained model")
    p.add_argument("--image", type=Path, required=True, help="input PNG (grayscale is promoted to RGB)")
    p.add_argument("--out", type=Path, default=Path("."), help="output directory")

    p = sub.add_parser("nimat", help="eight-view animation frames", formatter_class=_Formatter)
    _add_common(p)
    p.add_argument("--checkpoint", type=Path, required=True, help="trained model")
    p.add_argument("--image", type=Path, required=True, help="input PNG")
    p.add_argument("--out", type=Path, default=Path("nimat"), help="frame directory")
    p.add_argument("--gain", type=float, default=2.0, help="display gain applied to each half-light view")

    p = sub.add_parser("dump-config", help="print the effective config of another command",
                       formatter_class=_Formatter)
    p.add_argument("target", choices=("gen-data", "train", "eval", "infer", "nimat"), help="command to describe")
    p.add_argument("rest", nargs=argparse.REMAINDER, help="that command's flags")
    return parser


def _subparser(parser: argparse.ArgumentParser, name: str) -> argparse.ArgumentParser:
    for action in parser._actions:
        if isinstance(action, argparse._SubParsersAction):
            return action.choices[name]
    raise KeyError(name)


def read_config_file(path: Path) -> dict[str, str]:
    items = {}
    for lineno, raw in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise UsageError(f"{path}:{lineno}: expected 'key = value', got {raw!r}")
        items[key.strip().replace("-", "_")] = value.strip()
    return items


def apply_config_file(sub: argparse.ArgumentParser, path: Path) -> None:
    """Turn file entries into parser defaults; unknown keys are an error."""
    actions = {a.dest: a for a in sub._actions if a.dest not in ("help", "config")}
    defaults = {}
    for key, raw in read_config_file(path).items():
        action = actions.get(key)
        if action is None:
            raise UsageError(f"{path}: unknown key {key!r} for {sub.prog}")
        if isinstance(action, argparse._StoreTrueAction):
            if raw.lower() not in ("true", "false", "1", "0", "yes", "no"):
                raise UsageError(f"{path}: {key} must be a boolean, got {raw!r}")
            defaults[key] = raw.lower() in ("true", "1", "yes")
            continue
        value = raw if action.type is None else action.type(raw)
        if action.choices is not None and value not in action.choices:
            raise UsageError(f"{path}: {key} must be one of {list(action.choices)}, got {raw!r}")
        defaults[key] = value
    sub.set_defaults(**defaults)


def parse(argv: list[str]) -> argparse.Namespace:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.command == "dump-config":
        return args
    if args.config is not None:
        sub = _subparser(parser, args.command)
        if not args.config.is_file():
            raise UsageError(f"config file {args.config} not found")
        apply_config_file(sub, args.config)
        args = parser.parse_args(argv)
    return args


# ---------------------------------------------------------------------------
# commands


def cmd_gen_data(args) -> int:
    if args.scenes < 1:
        raise UsageError("--scenes must be at least 1")
    if args.size < 32:
        raise UsageError("--size must be at least 32")
    try:
        manifest = generate_dataset(args.out, n_scenes=args.scenes, size=args.size, seed=args.seed,
                                    n_test=args.test, leakage=args.leakage, levels=args.levels, force=args.force,
                                    focal_length_mm=args.focal_length_mm, pixel_pitch_mm=args.pixel_pitch_mm,
                                    blur_range=args.blur_range)
    except FileExistsError as exc:
        raise UsageError(str(exc).replace("use force", "use --force")) from exc
    print(f"wrote {manifest['scenes']} scenes to {args.out} (train {manifest['train']}, test {manifest['test']})")
    return 0


def _model_config(args, init_config: MdpConfig | None) -> MdpConfig:
    given = {k: getattr(args, k) for k in MODEL_FLAGS if getattr(args, k) is not None}
    if init_config is None:
        return MdpConfig(seed=args.model_seed, **given)
    clash = {k: v for k, v in given.items() if getattr(init_config, k) != v}
    if clash:
        raise UsageError(f"model flags {clash} disagree with the --init checkpoint ({init_config})")
    return init_config


def cmd_train(args) -> int:
    if args.step == 2 and args.init is None and not args.resume:
        raise UsageError("step 2 needs --init <checkpoint>: training runs in two steps, first the DP views "
                         "with the deblurring decoder frozen (--step 1), then everything jointly from that "
                         "step-1 checkpoint (--step 2 --init <out>/step1_last.mdp)")
    train = load_split(args.data, "train")
    if not train:
        raise RuntimeError(f"{args.data}: no training records (run gen-data first)")
    test = [] if args.no_validate else load_split(args.data, "test")
    init = args.init
    last = args.out / f"step{args.step}_last.mdp"
    if init is None and args.resume and last.exists():
        init = last
    if init is not None:
        init_model, _, _ = load_checkpoint(init)
        config = _model_config(args, init_model.config)
        model = init_model
    else:
        config = _model_config(args, None)
        model = build(config)
    cfg = TrainConfig(step=args.step, lr_init=args.lr, halve_every_epochs=args.halve_every, epochs=args.epochs,
                      batch=args.batch, seed=args.seed, weights=LossWeights(args.lambda1, args.lambda2, args.lambda3),
                      patch=config.patch, patch_stride=args.patch_stride,
                      patches_per_epoch=args.patches_per_epoch or None,
                      dp_losses=not args.no_dp_losses)
    runner = train_step1 if args.step == 1 else train_step2
    history = runner(model, train, cfg, eval_dataset=test, out_dir=args.out, resume=args.resume)
    last = history.rows[-1] if history.rows else None
    if last is not None:
        print(f"step {args.step}: {len(history.rows)} epochs, final total {last['total']:.6f}"
              + (f", test psnr_s {last['psnr_s']:.3f} dB" if last.get("psnr_s") is not None else ""))
    print(f"checkpoint: {args.out / f'step{args.step}_last.mdp'}")
    return 0


def cmd_eval(args) -> int:
    if (args.checkpoint is None) == (not args.identity):
        raise UsageError("give exactly one of --checkpoint or --identity")
    records = load_split(args.data, args.split)
    if not records:
        raise RuntimeError(f"{args.data}: split {args.split!r} is empty or missing")
    if args.identity:
        base = identity_baseline(records)
        rows = [base.row("deblur")]
    else:
        model, _, _ = load_checkpoint(args.checkpoint)
        m = 2 ** model.config.depth
        bad = [r.id for r in records if r.size[0] % m or r.size[1] % m]
        if bad:
            raise UsageError(f"record size {records[0].size} is not divisible by 2**depth = {m} "
                             f"(checkpoint depth {model.config.depth}); e.g. {bad[0]}")
        reports = evaluate(model, records)
        rows = [reports["deblur"].row("deblur"), reports["dp"].row("dp")]
    print(",".join(EVAL_COLUMNS))
    for row in rows:
        print(row)
    if args.csv is not None:
        with open(args.csv, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(EVAL_COLUMNS)
            for row in rows:
                w.writerow(row.split(","))
    return 0


def cmd_infer(args) -> int:
    model, _, _ = load_checkpoint(args.checkpoint)
    image = read_png(args.image)
    left, right, sharp = model.predict(image)
    args.out.mkdir(parents=True, exist_ok=True)
    stem = args.image.stem
    for suffix, img in (("s", sharp), ("l", left), ("r", right)):
        write_png(args.out / f"{stem}_{suffix}.png", img)
    print(f"wrote {stem}_s.png, {stem}_l.png, {stem}_r.png to {args.out}")
    print(f"PSNR(l + r, input) = {psnr(np.clip(left + right, 0, 1), image):.3f} dB")
    return 0


def cmd_nimat(args) -> int:
    model, _, _ = load_checkpoint(args.checkpoint)
    views = synthesize_eight_views(model, read_png(args.image), args.image.stem)
    write_animation_frames(views, args.out, gain=args.gain)
    print("angles: " + " ".join(str(a) for a in views.angles))
    print(f"wrote 8 frames and order.txt to {args.out}")
    return 0


def cmd_dump_config(args) -> int:
    inner = parse([args.target] + [a for a in args.rest if a != "--"])
    for key, value in sorted(vars(inner).items()):
        if key in ("command", "config"):
            continue
        print(f"{key} = {'' if value is None else value}")
    return 0


COMMANDS = {"gen-data": cmd_gen_data, "train": cmd_train, "eval": cmd_eval, "infer": cmd_infer,
            "nimat": cmd_nimat, "dump-config": cmd_dump_config}


def main(argv: list[str] | None = None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    try:
        args = parse(argv)
    except UsageError as exc:
        print(f"dualpix: error: {exc}", file=sys.stderr)
        return 2
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if getattr(args, "verbose", False) else logging.WARNING,
                        format="%(asctime)s %(message)s")
    threads = getattr(args, "threads", None)
    try:
        with threadpool_limits(limits=threads if threads and threads > 0 else None):
            return COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"dualpix: error: {exc}", file=sys.stderr)
        return 2
    except (OSError, RecordError, ValueError, RuntimeError) as exc:
        print(f"dualpix: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
