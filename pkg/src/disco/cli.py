"""Operator command line: train, eval, infer, gradcheck, rf.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numeric
failure (including gradient-check failures). Every command is driven by the
flat key=value config format and is deterministic given the config.
"""

from __future__ import annotations

import argparse
import datetime
import os
import sys
import time

import numpy as np

from .blocks import receptive_field, stacked_receptive_field
from .checkpoint import load_checkpoint
from .config import RunConfig, load_config
from .errors import ConfigError, DataError, DiscoError, NumericError
from .gradcheck import OP_SUITES, REL_TOLERANCE, run_gradcheck
from .metrics import CameraParams, EvalReport, disparity_to_depth
from .model import build_model
from .pfm import write_pfm
from .raster import read_image
from .tensor import Tensor, no_grad
from .train import evaluate_model, make_datasets, train_run

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_NUMERIC = 4


def _load_run_config(args) -> RunConfig:
    cfg = load_config(args.config)
    if getattr(args, "seed", None) is not None:
        cfg.seed = args.seed
    if getattr(args, "out", None):
        cfg.out_dir = args.out
    return cfg


def cmd_train(args) -> int:
    cfg = _load_run_config(args)
    result = train_run(cfg, resume_from=args.resume, quiet=args.quiet)
    best = result.best_epe
    print(
        f"training complete: iterations={result.iterations} "
        f"final_loss={result.final_loss:.6f} "
        f"best_holdout_epe={best if best != float('inf') else 'n/a'}"
    )
    return EXIT_OK


def cmd_eval(args) -> int:
    cfg = _load_run_config(args)
    train_ds, holdout_ds = make_datasets(cfg.data)
    dataset = train_ds if args.split == "train" else holdout_ds
    if dataset is None:
        raise ConfigError("no holdout split configured (data.holdout_count = 0)")

    if args.oracle:
        report = _oracle_eval(dataset, args.oracle)
    else:
        if not args.checkpoint:
            raise ConfigError("eval needs --checkpoint (or an --oracle mode)")
        bundle = load_checkpoint(args.checkpoint)
        sample = dataset.sample(0)
        h, w = sample.left.shape[1:]
        if h % 16 or w % 16:
            raise ConfigError(
                f"dataset images {h}x{w} not divisible by 16; the checkpointed "
                f"model cannot evaluate them"
            )
        report = evaluate_model(bundle.model, dataset, cfg.data.batch_size)

    report.timestamp = _timestamp()
    out_dir = cfg.out_dir
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "eval_report.txt"), "w", encoding="utf-8") as fh:
        fh.write(report.to_text())
    with open(os.path.join(out_dir, "eval_report.json"), "w", encoding="utf-8") as fh:
        fh.write(report.to_json())
    print(f"epe = {report.epe:.6f}")
    print(f"three_pixel_error = {report.three_pixel_error:.6f}")
    print(f"report written to {out_dir}")
    return EXIT_OK


def _oracle_eval(dataset, mode: str) -> EvalReport:
    """Sanity modes: score the ground truth (or gt+1) as the prediction."""
    per_image, abs_sums, counts = [], [], []
    t0 = time.perf_counter()
    for i in range(len(dataset)):
        s = dataset.sample(i)
        pred = s.gt_disparity[0].astype(np.float64)
        if mode == "gt+1":
            pred = pred + 1.0
        mask = s.valid_mask[0]
        err = np.abs(pred - s.gt_disparity[0])[mask]
        per_image.append((float(err.mean()), float(100.0 * (err > 3.0).mean())))
        abs_sums.append(float(err.sum()))
        counts.append((int(err.size), int((err > 3.0).sum())))
    return EvalReport.from_samples(per_image, abs_sums, counts, time.perf_counter() - t0)


def cmd_infer(args) -> int:
    bundle = load_checkpoint(args.checkpoint)
    model = bundle.model
    left = read_image(args.left)
    right = read_image(args.right)
    if left.shape != right.shape:
        raise DataError(f"left {left.shape} and right {right.shape} images differ")
    c, h, w = left.shape
    if c != model.config.in_channels:
        raise ConfigError(
            f"model expects {model.config.in_channels} channels, images have {c}"
        )
    pad_h = (-h) % 16
    pad_w = (-w) % 16
    if (pad_h or pad_w) and not args.auto_pad:
        raise ConfigError(
            f"input {h}x{w} not divisible by 16; rerun with --auto-pad"
        )
    if pad_h or pad_w:
        left = np.pad(left, ((0, 0), (0, pad_h), (0, pad_w)))
        right = np.pad(right, ((0, 0), (0, pad_h), (0, pad_w)))

    dtype = model.config.dtype
    with no_grad():
        out = model.forward(Tensor(left[None].astype(dtype)), Tensor(right[None].astype(dtype)))
    disparity = np.maximum(out.full_resolution.data[0, 0], 0.0)[:h, :w]
    write_pfm(args.out_pfm, disparity.astype(np.float32))
    print(f"disparity written to {args.out_pfm}")

    if args.focal is not None or args.baseline is not None:
        if args.focal is None or args.baseline is None or not args.out_depth:
            raise ConfigError("depth output needs --focal, --baseline and --out-depth")
        cam = CameraParams(focal_px=args.focal, baseline_m=args.baseline)
        depth, _valid = disparity_to_depth(disparity, cam)
        write_pfm(args.out_depth, depth.astype(np.float32))
        print(f"depth written to {args.out_depth} (invalid sentinel -1)")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    ops = None if args.op == "all" else [args.op]
    results = run_gradcheck(ops=ops, seeds=args.seeds, corrupt_op=args.corrupt_op)
    failed = False
    print(f"{'op':20s} {'max_rel_err':>12s}  status")
    for name, err in results.items():
        ok = err <= REL_TOLERANCE
        failed |= not ok
        print(f"{name:20s} {err:12.3e}  {'pass' if ok else 'FAIL'}")
    if failed:
        print(f"gradient check FAILED (tolerance {REL_TOLERANCE:g})")
        return EXIT_NUMERIC
    return EXIT_OK


def cmd_rf(args) -> int:
    cfg = _load_run_config(args) if args.config else RunConfig()
    model_cfg = cfg.model
    print("receptive fields (3x3 kernels, composition over unit-stride stacks)")
    schedules = (
        model_cfg.encoder_dilations
        if model_cfg.use_dilations
        else tuple((1,) * model_cfg.encoder_layers for _ in model_cfg.encoder_dilations)
    )
    names = ["encoder1", "encoder2", "bottleneck"]
    for name, sched in zip(names, schedules):
        per_layer = [receptive_field(3, d) for d in sched]
        stacked = stacked_receptive_field([(3, d) for d in sched])
        print(
            f"{name}: dilations={list(sched)} per_layer_rc={per_layer} "
            f"stacked_rf={stacked}"
        )
    lg = model_cfg.lgcf_dilations
    per_layer = [receptive_field(3, d) for d in lg]
    stacked = stacked_receptive_field([(3, d) for d in lg])
    print(
        f"context_branch: dilations={list(lg)} per_layer_rc={per_layer} "
        f"stacked_rf={stacked} "
        f"(composition-rule value; 126 is often quoted for this schedule, "
        f"see README note)"
    )
    return EXIT_OK


def _timestamp() -> str:
    return datetime.datetime.now(datetime.timezone.utc).isoformat()


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="disco",
        description="Stereo disparity estimation: training, evaluation, inference.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_train = sub.add_parser("train", help="run the training loop")
    p_train.add_argument("--config", required=True)
    p_train.add_argument("--seed", type=int, default=None)
    p_train.add_argument("--out", default=None)
    p_train.add_argument("--resume", default=None, help="checkpoint to resume from")
    p_train.add_argument("--quiet", action="store_true")
    p_train.set_defaults(func=cmd_train)

    p_eval = sub.add_parser("eval", help="evaluate a checkpoint (EPE / 3PE)")
    p_eval.add_argument("--config", required=True)
    p_eval.add_argument("--checkpoint", default=None)
    p_eval.add_argument("--split", choices=["holdout", "train"], default="holdout")
    p_eval.add_argument(
        "--oracle",
        choices=["gt", "gt+1"],
        default=None,
        help="score the ground truth (or gt+1) instead of a model",
    )
    p_eval.add_argument("--seed", type=int, default=None)
    p_eval.add_argument("--out", default=None)
    p_eval.set_defaults(func=cmd_eval)

    p_infer = sub.add_parser("infer", help="predict disparity for one stereo pair")
    p_infer.add_argument("--checkpoint", required=True)
    p_infer.add_argument("--left", required=True)
    p_infer.add_argument("--right", required=True)
    p_infer.add_argument("--out-pfm", required=True)
    p_infer.add_argument("--focal", type=float, default=None, help="focal length, px")
    p_infer.add_argument("--baseline", type=float, default=None, help="baseline, m")
    p_infer.add_argument("--out-depth", default=None)
    p_infer.add_argument("--auto-pad", action="store_true")
    p_infer.set_defaults(func=cmd_infer)

    p_grad = sub.add_parser("gradcheck", help="finite-difference gradient suite")
    p_grad.add_argument("--op", default="all", choices=["all", *sorted(OP_SUITES)])
    p_grad.add_argument("--seeds", type=int, default=20)
    p_grad.add_argument("--corrupt-op", default=None, help=argparse.SUPPRESS)
    p_grad.set_defaults(func=cmd_gradcheck)

    p_rf = sub.add_parser("rf", help="receptive-field report per block")
    p_rf.add_argument("--config", default=None)
    p_rf.add_argument("--seed", type=int, default=None)
    p_rf.add_argument("--out", default=None)
    p_rf.set_defaults(func=cmd_rf)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except DiscoError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
