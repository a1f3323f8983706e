"""Command-line entry point: ``repvsr <subcommand> [flags]``.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numeric failure.
"""
from __future__ import annotations

import argparse
import contextlib
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import __version__, backend, clipio, metrics, nas, network, trainer
from . import tensor as T
from .errors import DataError, RepVSRError, ShapeError, TrainingDivergedError

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3

logger = logging.getLogger("repvsr")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: error: {message}")


def _emit(args, payload: dict, lines):
    if args.json:
        print(json.dumps(payload, indent=2, sort_keys=True))
    else:
        for line in lines:
            print(line)


def _threads(n):
    if not n:
        return contextlib.nullcontext()
    try:
        from threadpoolctl import threadpool_limits
    except ImportError:
        logger.warning("threadpoolctl not installed; --threads ignored")
        return contextlib.nullcontext()
    return threadpool_limits(limits=n)


# -- subcommands -------------------------------------------------------------------

def cmd_prepare(args):
    written = clipio.prepare_dataset(args.hr_dir, args.out_dir, args.scale)
    _emit(args, {"clips": [str(p) for p in written]},
          [f"Prepared {len(written)} clip(s) in {args.out_dir}"])


def cmd_synth(args):
    from .synth import write_dataset

    write_dataset(args.out, args.clips, seed=args.seed, frames=args.frames, size=args.size)
    _emit(args, {"root": str(args.out), "clips": args.clips},
          [f"Wrote {args.clips} synthetic clip(s) to {args.out}"])


def _load_train_config(args):
    if args.config:
        try:
            return trainer.TrainConfig.from_json(args.config)
        except ValueError as exc:
            raise DataError(f"invalid training config: {exc}") from exc
    return trainer.TrainConfig.desk_scale()


def cmd_train(args):
    cfg = _load_train_config(args)
    if args.seed is not None:
        cfg = trainer.TrainConfig.from_dict({**cfg.to_dict(), "seed": args.seed})
    data = trainer.ClipDataset.from_dir(args.data)
    val = trainer.ClipDataset.from_dir(args.val) if args.val else None
    if args.init:
        params = clipio.load_weights(args.init, T.get_dtype())
        if params.mode != network.BRANCHED:
            raise DataError("--init needs branched weights (fused weights cannot be fine-tuned)")
    else:
        net_cfg = network.NetConfig(nc=args.nc, nb=args.nb, global_residual=not args.no_global_residual)
        params = network.init_params(net_cfg, seed=cfg.seed)
    result = trainer.train(params, data, cfg, val=val, val_every=args.val_every)
    clipio.save_weights(result.params, args.out)
    curve_path = Path(args.curve) if args.curve else Path(args.out).with_suffix(".csv")
    trainer.write_curve_csv(result.curve, curve_path)
    last = result.curve[-1]
    _emit(args, {"weights": str(args.out), "curve": str(curve_path), "steps": result.steps, **last},
          [f"Trained {result.steps} steps; final train loss {last['train_loss']:.6f}",
           f"PSNR: {last['val_psnr']:.2f} dB" if val else "PSNR: n/a (no --val)",
           f"Weights: {args.out}", f"Curve: {curve_path}"])


def cmd_search(args):
    space = nas.SearchSpace.parse(args.space_grid) if args.space_grid else nas.SearchSpace()
    if args.mock:
        evaluator = nas.MockEvaluator()
    else:
        if not args.data:
            raise UsageError("search: --data is required unless --mock is given")
        data = trainer.ClipDataset.from_dir(args.data)
        val = trainer.ClipDataset.from_dir(args.val) if args.val else data
        cfg = _load_train_config(args)
        bpe = cfg.batches_per_epoch
        epochs = max(1, -(-args.budget // bpe))
        cfg = trainer.TrainConfig.from_dict({**cfg.to_dict(), "total_epochs": epochs, "seed": args.seed,
                                             "warmup_epochs": min(cfg.warmup_epochs, epochs)})
        evaluator = nas.TrainingEvaluator(data, val, cfg, runtime=args.runtime, seed=args.seed)
    report = nas.search(space, evaluator, args.strategy, args.samples, args.seed, args.lam, args.criterion)
    nas.write_report(report, args.report)
    best = report.best
    _emit(args, report.summary(),
          [f"Evaluated {len(report.candidates)} candidate(s); report: {args.report}",
           f"Selected nc={best.nc} nb={best.nb}",
           f"PSNR: {best.val_psnr:.2f} dB", f"Score: {best.score:.4f}"])


def cmd_fuse(args):
    params = clipio.load_weights(args.in_path)
    fused = network.fuse_network(params)
    clipio.save_weights(fused, args.out)
    _emit(args, {"out": str(args.out), "params": network.count_params(fused)},
          [f"Fused {params.config.nb} block(s) -> {args.out}"])


def cmd_infer(args):
    params = clipio.load_weights(args.weights, T.get_dtype())
    in_root = Path(args.in_dir)
    written = []
    for clip_dir in clipio.find_clips(in_root):
        clip = clipio.load_clip(clip_dir, params.dtype)
        out = network.forward_clip(clip, params, deploy=True)
        target = Path(args.out_dir) / clip_dir.relative_to(in_root)
        clipio.save_clip(out, target)
        written.append(str(target))
    _emit(args, {"clips": written}, [f"Wrote {len(written)} clip(s) to {args.out_dir}"])


def cmd_eval(args):
    pred_root, gt_root = Path(args.pred_dir), Path(args.gt_dir)
    reports = []
    for gt_dir in clipio.find_clips(gt_root):
        rel = gt_dir.relative_to(gt_root)
        pred_dir = pred_root / rel
        if not clipio.is_clip_dir(pred_dir):
            raise DataError(f"no predicted clip for {rel} under {pred_root}")
        reports.append(metrics.evaluate(clipio.load_clip(pred_dir, np.float64),
                                        clipio.load_clip(gt_dir, np.float64)))
    report = metrics.merge_reports(reports)
    payload = report.to_dict()
    lines = [f"PSNR: {report.mean_psnr:.2f} dB"]
    if args.runtime_ms is not None:
        payload["score"] = metrics.score_formula(report.mean_psnr, args.runtime_ms)
        lines.append(f"Score: {payload['score']:.4f}")
    _emit(args, payload, lines)


def cmd_score(args):
    value = metrics.score_formula(args.psnr, args.runtime_ms)
    _emit(args, {"psnr": args.psnr, "runtime_ms": args.runtime_ms, "score": value},
          [f"Score: {value:.4f}"])


def cmd_flops(args):
    cfg = network.NetConfig(nc=args.nc, nb=args.nb, frames=args.frames)
    total = network.count_flops(cfg, args.mode, args.height, args.width)
    blocks = network.count_flops(cfg, args.mode, args.height, args.width, part="blocks")
    _emit(args, {"nc": args.nc, "nb": args.nb, "mode": args.mode, "height": args.height,
                 "width": args.width, "frames": args.frames, "flops": total, "block_flops": blocks,
                 "gflops": total / 1e9},
          [f"FLOPs: {total}", f"GFLOPs: {total / 1e9:.3f}", f"Block FLOPs: {blocks}"])


def cmd_bench(args):
    params = clipio.load_weights(args.weights, T.get_dtype())
    dims = (1, 3 * args.frames, args.height, args.width)
    result = metrics.bench_forward(params, dims, trials=args.trials, warmup=args.warmup)
    _emit(args, {**result.to_dict(), "backend": backend.name, "mode": params.mode},
          [f"Runtime: {result.runtime_ms:.2f} ms", f"Backend: {backend.name}", f"Mode: {params.mode}"])


def cmd_gradcheck(args):
    from .checks import CHECKS

    names = list(CHECKS) if args.op == "all" else [args.op]
    results, lines, ok = {}, [], True
    for name in names:
        report = CHECKS[name]()
        results[name] = {"passed": report.passed, "max_error": report.max_error,
                         "tolerance": report.tolerance, "errors": report.errors}
        ok &= report.passed
        lines.append(f"{name}: {'PASS' if report.passed else 'FAIL'} "
                     f"(max rel err {report.max_error:.2e}, tol {report.tolerance:.0e})")
    _emit(args, results, lines)
    if not ok:
        raise TrainingDivergedError("gradient check failed")


# -- parser ------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--json", action="store_true", help="machine-readable output on stdout")
    common.add_argument("--threads", type=int, default=None, help="cap BLAS worker threads")
    common.add_argument("--precision", choices=sorted(T.PRECISIONS), default="f32")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = _Parser(prog="repvsr", description="Reparameterizable x4 video super-resolution engine")
    parser.add_argument("--version", action="version", version=f"repvsr {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("prepare", parents=[common], help="bicubic x4 downscale an HR clip tree")
    p.add_argument("--hr-dir", required=True)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--scale", type=int, default=4, choices=[4])
    p.set_defaults(func=cmd_prepare)

    p = sub.add_parser("synth", parents=[common], help="write a procedural HR/LR clip dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--clips", type=int, default=4)
    p.add_argument("--frames", type=int, default=10)
    p.add_argument("--size", type=int, default=96)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", parents=[common], help="train a branched network")
    p.add_argument("--config", help="TrainConfig JSON (default: desk-scale settings)")
    p.add_argument("--data", required=True, help="dataset root (hr/ and optional lr/)")
    p.add_argument("--val", help="validation dataset root")
    p.add_argument("--out", required=True, help="output weight file")
    p.add_argument("--curve", help="loss-curve CSV (default: <out>.csv)")
    p.add_argument("--nc", type=int, default=16)
    p.add_argument("--nb", type=int, default=4)
    p.add_argument("--init", help="start from these branched weights (phase-2 fine-tuning)")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--val-every", type=int, default=1)
    p.add_argument("--no-global-residual", action="store_true")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("search", parents=[common], help="grid/random search over (nc, nb)")
    p.add_argument("--space-grid", help='e.g. "nc=4,8,16;nb=1-4" (default: nc=1-32;nb=0-8)')
    p.add_argument("--budget", type=int, default=200, help="training steps per candidate")
    p.add_argument("--data", help="training dataset root")
    p.add_argument("--val", help="validation dataset root (default: --data)")
    p.add_argument("--report", required=True, help="CSV report path; JSON summary beside it")
    p.add_argument("--config", help="TrainConfig JSON for short training")
    p.add_argument("--strategy", choices=["grid", "random"], default="grid")
    p.add_argument("--samples", type=int, default=None, help="draws for random strategy")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--lambda", dest="lam", type=float, default=0.0)
    p.add_argument("--criterion", choices=["score", "objective"], default="score")
    p.add_argument("--runtime", choices=["flops", "bench"], default="flops")
    p.add_argument("--mock", action="store_true", help="analytic evaluator instead of training")
    p.set_defaults(func=cmd_search)

    p = sub.add_parser("fuse", parents=[common], help="fuse branched weights into deploy weights")
    p.add_argument("--in", dest="in_path", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_fuse)

    p = sub.add_parser("infer", parents=[common], help="super-resolve clip directories")
    p.add_argument("--weights", required=True)
    p.add_argument("--in-dir", required=True)
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("eval", parents=[common], help="PSNR of predicted clips against ground truth")
    p.add_argument("--pred-dir", required=True)
    p.add_argument("--gt-dir", required=True)
    p.add_argument("--runtime-ms", type=float, default=None, help="also print the challenge score")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("score", parents=[common], help="challenge score from PSNR and runtime")
    p.add_argument("--psnr", type=float, required=True)
    p.add_argument("--runtime-ms", type=float, required=True)
    p.set_defaults(func=cmd_score)

    p = sub.add_parser("flops", parents=[common], help="conv FLOPs for one clip")
    p.add_argument("--nc", type=int, required=True)
    p.add_argument("--nb", type=int, required=True)
    p.add_argument("--mode", choices=list(network.MODES), default=network.FUSED)
    p.add_argument("--height", type=int, default=180)
    p.add_argument("--width", type=int, default=320)
    p.add_argument("--frames", type=int, default=10)
    p.set_defaults(func=cmd_flops)

    p = sub.add_parser("bench", parents=[common], help="median forward wall clock")
    p.add_argument("--weights", required=True)
    p.add_argument("--trials", type=int, default=10)
    p.add_argument("--warmup", type=int, default=2)
    p.add_argument("--height", type=int, default=180)
    p.add_argument("--width", type=int, default=320)
    p.add_argument("--frames", type=int, default=10)
    p.set_defaults(func=cmd_bench)

    from .checks import CHECKS

    p = sub.add_parser("gradcheck", parents=[common], help="finite-difference gradient checks")
    p.add_argument("--op", choices=[*CHECKS, "all"], default="all")
    p.set_defaults(func=cmd_gradcheck)
    return parser


def run(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # --help / --version
        return EXIT_OK if not exc.code else EXIT_USAGE
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        with _threads(args.threads), T.precision(args.precision):
            args.func(args)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except TrainingDivergedError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DataError, ShapeError, RepVSRError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    return EXIT_OK


def main():
    sys.exit(run())


if __name__ == "__main__":
    main()
