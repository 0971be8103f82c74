"""
Command-line entry point.

Exit codes: 0 success, 1 runtime failure, 2 bad arguments or config,
3 verification failure (gradcheck).
"""

from __future__ import annotations

import argparse
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import data as D
from .checkpoint import load_checkpoint, save_checkpoint
from .config import ConfigError, RunConfig
from .evaluation import evaluate, format_report, predict_pixels, render_map, write_report
from .gradcheck import finite_difference_check
from .model import CMTNet, ablation_config, combined_loss
from .tensor import Tensor
from .training import train

EXIT_RUNTIME, EXIT_USAGE, EXIT_VERIFY = 1, 2, 3

GRADCHECK_TOL = 1e-5


class UsageError(Exception):
    pass


def thread_cap() -> int:
    raw = os.environ.get("SPECTRA_THREADS", "1")
    try:
        n = int(raw)
    except ValueError as exc:
        raise UsageError(f"SPECTRA_THREADS must be an integer, got {raw!r}") from exc
    if n < 1:
        raise UsageError("SPECTRA_THREADS must be >= 1")
    return n


def _limit_threads(n: int) -> None:
    from threadpoolctl import threadpool_limits

    # BLAS is the only threaded layer; the numba kernels are serial
    threadpool_limits(limits=n)


def _run_config(args) -> RunConfig:
    cfg = RunConfig.load(args.config) if getattr(args, "config", None) else RunConfig()
    overrides = {}
    for item in getattr(args, "set", None) or []:
        if "=" not in item:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        k, v = item.split("=", 1)
        overrides[k] = v
    for flag in ("seed", "out", "case", "data", "checkpoint", "epochs"):
        val = getattr(args, flag, None)
        if val is not None:
            overrides[flag] = str(val)
    return cfg.updated(overrides) if overrides else cfg


def _load_scene(cfg: RunConfig):
    if not cfg.data:
        raise ConfigError("no data manifest given (--data or 'data = ...' in the config)")
    cube, gt = D.load_cube(cfg.data)
    if cfg.normalize:
        cube = D.normalize(cube)
    return cube, gt


def _log(msg: str) -> None:
    print(msg, file=sys.stderr, flush=True)


# ---------------------------------------------------------------- commands


def cmd_synth(args) -> int:
    h, w = args.height, args.width
    if args.classes > h * w:
        raise UsageError(f"{args.classes} classes do not fit in {h}x{w} pixels")
    _, gt, manifest = D.synth_scene(h, w, args.bands, args.classes, args.sigma, args.seed, out_dir=args.out)
    print(f"wrote {manifest}")
    counts = np.bincount(gt.labels.ravel(), minlength=gt.n_classes + 1)
    for k, name in enumerate(gt.class_names, 1):
        print(f"{k:>4}  {name:<12} {counts[k]:>8}")
    return 0


def _train_one(cfg: RunConfig, cube, gt, case: int | None = None, verbose: bool = True):
    case = cfg.case if case is None else case
    split = D.stratified_split(gt, cfg.train_fraction, cfg.seed)
    model = CMTNet(cfg.model_config(cube.bands, gt.n_classes, ablation_case=case), seed=cfg.seed)
    every = max(1, cfg.epochs // 10)

    def progress(rec):
        if verbose and (rec["epoch"] % every == 0 or rec["epoch"] == cfg.epochs):
            _log(f"[case {case}] epoch {rec['epoch']:>4}  loss {rec['loss']:.5f}  train acc {rec['train_acc']:.4f}")

    log = train(model, cube, gt, split, cfg.train_config(ablation_case=case), progress)
    return model, split, log


def cmd_train(args) -> int:
    cfg = _run_config(args)
    cube, gt = _load_scene(cfg)
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    model, split, log = _train_one(cfg, cube, gt)
    meta = {
        "data": cfg.data,
        "seed": cfg.seed,
        "train_fraction": repr(cfg.train_fraction),
        "normalize": "true" if cfg.normalize else "false",
    }
    save_checkpoint(out / "checkpoint.spck", model, meta)
    log.write(out / "train_log.jsonl")
    (out / "config.txt").write_text(cfg.dumps())
    last = log.epochs[-1]
    print(f"trained case {cfg.case}: {model.num_parameters()} parameters, "
          f"{sum(n for n, _ in split.counts().values())} training pixels")
    print(f"final loss {last['loss']:.6f}  train acc {last['train_acc']:.4f}")
    print(f"wrote {out / 'checkpoint.spck'}")
    return 0


def _restore(cfg: RunConfig):
    ckpt = cfg.checkpoint or str(Path(cfg.out) / "checkpoint.spck")
    if not Path(ckpt).is_file():
        raise ConfigError(f"checkpoint not found: {ckpt}")
    model, meta = load_checkpoint(ckpt)
    if not cfg.data and meta.get("data"):
        cfg = cfg.updated({"data": meta["data"]})
    if "normalize" in meta:
        cfg = cfg.updated({"normalize": meta["normalize"]})
    cube, gt = _load_scene(cfg)
    if cube.bands != model.config.bands or gt.n_classes != model.config.classes:
        raise ConfigError("checkpoint does not match the scene's bands/classes")
    seed = int(meta.get("seed", cfg.seed))
    fraction = float(meta.get("train_fraction", cfg.train_fraction))
    return cfg, model, cube, gt, D.stratified_split(gt, fraction, seed)


def cmd_eval(args) -> int:
    cfg, model, cube, gt, split = _restore(_run_config(args))
    report, raster = evaluate(model, cube, gt, split, cfg.eval_batch)
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    print(format_report(report, gt.class_names, f"case {model.config.ablation_case} test-set accuracy"), end="")
    write_report(report, out / "metrics.txt")
    render_map(raster, gt.palette, out / "prediction_map.ppm")
    render_map(gt.labels, gt.palette, out / "ground_truth.ppm")
    print(f"wrote {out / 'metrics.txt'} and {out / 'prediction_map.ppm'}")
    return 0


def cmd_predict_map(args) -> int:
    cfg, model, cube, gt, _ = _restore(_run_config(args))
    coords = np.argwhere(np.ones(gt.shape, bool))
    preds = predict_pixels(model, cube, coords, cfg.eval_batch)
    raster = (preds + 1).reshape(gt.shape)
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    render_map(raster, gt.palette, out / "full_map.ppm")
    print(f"wrote {out / 'full_map.ppm'}")
    return 0


def gradcheck_report(cfg: RunConfig, cases, h: float = 1e-3) -> dict[int, dict[str, float]]:
    """Per-case, per-parameter worst relative error on a 2-sample batch (d=10, s=7, n=3)."""
    rng = np.random.default_rng(cfg.seed)
    x = Tensor(rng.uniform(size=(2, 10, 7, 7)))
    labels = np.array([0, 2])
    results = {}
    for case in cases:
        mc = cfg.model_config(10, 3, patch_size=7, ablation_case=case)
        model = CMTNet(mc, seed=cfg.seed)
        results[case] = finite_difference_check(
            lambda: combined_loss(model.forward(x, "train"), labels),
            model.trainable(),
            h=h,
            seed=cfg.seed,
            per_group=True,
        )
    return results


def cmd_gradcheck(args) -> int:
    cfg = _run_config(args)
    cases = [args.case] if args.case is not None else [1, 2, 3, 4, 5]
    results = gradcheck_report(cfg, cases)
    worst = 0.0
    for case, errs in results.items():
        name = max(errs, key=errs.get)
        worst = max(worst, errs[name])
        print(f"case {case}: {len(errs)} parameter groups, worst {name} {errs[name]:.3e}")
    ok = worst <= GRADCHECK_TOL
    print(f"max rel err {worst:.3e} {'<=' if ok else '>'} {GRADCHECK_TOL:g}: {'PASS' if ok else 'FAIL'}")
    return 0 if ok else EXIT_VERIFY


def run_ablation(cfg: RunConfig, cube, gt, cases=(1, 2, 3, 4, 5), threads: int = 1) -> list[dict]:
    def one(case):
        model, split, _ = _train_one(cfg, cube, gt, case, verbose=threads == 1)
        report, _ = evaluate(model, cube, gt, split, cfg.eval_batch)
        return {"case": case, "oa": report.oa, "aa": report.aa, "kappa": report.kappa}

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            return list(pool.map(one, cases))
    return [one(c) for c in cases]


def format_ablation(rows: list[dict]) -> str:
    mark = {True: "yes", False: "no"}
    lines = [f"{'Case':>4}  {'CNN':>4}  {'Conv3D':>6}  {'Conv2D':>6}  {'MOCM':>4}  {'OA(%)':>7}  {'AA(%)':>7}  {'k x 100':>7}"]
    for r in rows:
        f = ablation_config(r["case"])
        lines.append(
            f"{r['case']:>4}  {mark[f.cnn_branch]:>4}  {mark[f.conv3d]:>6}  {mark[f.conv2d]:>6}  "
            f"{mark[f.multi_output]:>4}  {100 * r['oa']:>7.2f}  {100 * r['aa']:>7.2f}  {100 * r['kappa']:>7.2f}"
        )
    return "\n".join(lines) + "\n"


def cmd_ablate(args) -> int:
    cfg = _run_config(args)
    cube, gt = _load_scene(cfg)
    rows = run_ablation(cfg, cube, gt, threads=thread_cap())
    table = format_ablation(rows)
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "ablation.txt").write_text(table)
    print(table, end="")
    return 0


# ---------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="spectra", description=__doc__.split("\n\n")[0].strip())
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="key = value run configuration file")
        p.add_argument("--seed", type=int)
        p.add_argument("--out", help="output directory")
        p.add_argument("--case", type=int, choices=range(1, 6), metavar="N", help="ablation case 1..5")
        p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config key")
        return p

    p = sub.add_parser("synth", help="write a synthetic scene")
    p.add_argument("--height", type=int, default=32)
    p.add_argument("--width", type=int, default=32)
    p.add_argument("--bands", type=int, default=20)
    p.add_argument("--classes", type=int, default=4)
    p.add_argument("--sigma", type=float, default=0.02)
    p.add_argument("--seed", type=int, default=7)
    p.add_argument("--out", default="data/synthetic")
    p.set_defaults(func=cmd_synth)

    p = common(sub.add_parser("train", help="train a model and write a checkpoint"))
    p.add_argument("--data", help="scene manifest")
    p.add_argument("--epochs", type=int)
    p.set_defaults(func=cmd_train)

    for name, func, text in (
        ("eval", cmd_eval, "test-set metrics and prediction map"),
        ("predict-map", cmd_predict_map, "classify every pixel and render the map"),
    ):
        p = common(sub.add_parser(name, help=text))
        p.add_argument("--checkpoint", help="defaults to OUT/checkpoint.spck")
        p.add_argument("--data", help="defaults to the path stored in the checkpoint")
        p.set_defaults(func=func)

    p = common(sub.add_parser("gradcheck", help="finite-difference check of every parameter group"))
    p.set_defaults(func=cmd_gradcheck)

    p = common(sub.add_parser("ablate", help="train and evaluate ablation cases 1..5"))
    p.add_argument("--data", help="scene manifest")
    p.add_argument("--epochs", type=int)
    p.set_defaults(func=cmd_ablate)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)  # exits 2 on bad arguments
    try:
        _limit_threads(thread_cap())
        return args.func(args)
    except (UsageError, ConfigError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except Exception as exc:  # noqa: BLE001 - top-level reporter
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
