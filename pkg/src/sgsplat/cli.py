"""Command-line entry point: ``sgs {train,render,eval,check-grads,synth}``."""
from __future__ import annotations

import argparse
import csv
import json
import os
import sys
from pathlib import Path

import numpy as np
import torch

from .errors import ConfigurationError
from .gradients import finite_diff_check
from .io import (
    Checkpoint, export_curve, export_image, export_uncertainty, load_checkpoint, load_config,
    load_dataset, save_checkpoint,
)
from .metrics import ause, pixel_errors, psnr, sparsification, ssim
from .renderer import render
from .scene import Scene
from .stochastic import render_stochastic
from .synthetic import SynthSpec, generate
from .trainer import TrainConfig, train, with_overrides
from .variational import VariationalScene

EVAL_COLUMNS = ("view", "psnr", "ssim", "ause_rmse", "ause_mae")


def _set_threads() -> None:
    value = os.environ.get("SGS_THREADS")
    if value:
        n = int(value)
        if n < 1:
            raise ConfigurationError("SGS_THREADS must be a positive integer")
        torch.set_num_threads(n)


def _config(args) -> TrainConfig:
    cfg = load_config(args.config) if args.config else TrainConfig()
    overrides = {
        "seed": args.seed, "mc_samples": args.mc_samples,
        "lambda_ause": args.lambda_ause, "lambda_kl": args.lambda_kl, "lambda_ssim": args.lambda_ssim,
    }
    if args.iters is not None:
        overrides["total_iters"] = args.iters
        if args.iters < cfg.warmup_iters:
            overrides["warmup_iters"] = args.iters
            overrides["densify_until"] = min(cfg.densify_until, args.iters)
    return with_overrides(cfg, **overrides)


def _model(path):
    ckpt = load_checkpoint(path)
    return ckpt, ckpt.model


def _variational(model) -> VariationalScene:
    return model if isinstance(model, VariationalScene) else VariationalScene.from_scene(model)


def cmd_train(args) -> int:
    cfg = _config(args)
    dataset = load_dataset(args.dataset)
    init = None
    if args.checkpoint:
        model = load_checkpoint(args.checkpoint).model
        init = model.mean_scene() if isinstance(model, VariationalScene) else model
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    res = train(dataset, cfg, init=init, log_path=out / "train_log.csv")
    save_checkpoint(out / "model.sgsckpt", Checkpoint(res.model, res.phase, cfg, res.iteration, cfg.seed))
    last = res.log[-1] if res.log else {}
    print(f"trained {res.iteration} iterations ({res.phase}); K={len(res.model)}; "
          f"final total={last.get('total', float('nan')):.6g}")
    return 0


def _views(dataset, index):
    views = dataset.test or dataset.views
    if index is None:
        return list(enumerate(views))
    if not 0 <= index < len(dataset.views):
        raise ConfigurationError(f"view index {index} out of range (0..{len(dataset.views) - 1})")
    return [(index, dataset.views[index])]


def cmd_render(args) -> int:
    ckpt, model = _model(args.checkpoint)
    dataset = load_dataset(args.dataset)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    seed = ckpt.seed if args.seed is None else args.seed
    samples = args.mc_samples or 8
    for i, view in _views(dataset, args.view_index):
        if isinstance(model, Scene):
            export_image(render(model, view.camera).rgb, out / f"view_{i:03d}.png")
            continue
        r = render_stochastic(model, view.camera, samples, seed)
        export_image(np.clip(r.mean_rgb, 0, 1), out / f"view_{i:03d}.png")
        export_uncertainty(r.uncertainty, out / f"view_{i:03d}_uncertainty.png")
    print(f"wrote renders to {out}")
    return 0


def cmd_eval(args) -> int:
    ckpt, model = _model(args.checkpoint)
    vs = _variational(model)
    dataset = load_dataset(args.dataset)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    seed = ckpt.seed if args.seed is None else args.seed
    samples = args.mc_samples or 8
    rows = []
    for i, view in _views(dataset, args.view_index):
        r = render_stochastic(vs, view.camera, max(samples, 2), seed)
        mean = np.clip(r.mean_rgb, 0, 1)
        e_rmse = pixel_errors(mean, view.image, "rmse")
        e_mae = pixel_errors(mean, view.image, "mae")
        rows.append((i, psnr(mean, view.image), ssim(mean, view.image),
                     ause(e_rmse, r.uncertainty, metric="rmse"), ause(e_mae, r.uncertainty, metric="mae")))
        export_curve(sparsification(e_rmse, r.uncertainty), out / f"sparsification_{i:03d}.csv")
    with open(out / "eval.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(EVAL_COLUMNS)
        for row in rows:
            w.writerow([row[0]] + [f"{x:.9g}" for x in row[1:]])
        means = np.mean([r[1:] for r in rows], axis=0)
        w.writerow(["mean"] + [f"{x:.9g}" for x in means])
    print(" ".join(f"{k}={v:.6g}" for k, v in zip(EVAL_COLUMNS[1:], means)))
    return 0


def cmd_check_grads(args) -> int:
    cfg = _config(args)
    ckpt, model = _model(args.checkpoint)
    vs = _variational(model)
    dataset = load_dataset(args.dataset)
    idx = 0 if args.view_index is None else args.view_index
    view = dataset.views[idx]
    step = 1e-5 if cfg.weights.lambda_ause else 1e-4
    report = finite_diff_check(vs, view.camera, view.image, cfg.weights, step=step,
                               seed=cfg.seed, n_samples=max(args.mc_samples or 2, 2))
    for line in report.lines():
        print(line)
    print("PASS" if report.passed else "FAIL")
    return 0 if report.passed else 1


def cmd_synth(args) -> int:
    spec = SynthSpec(seed=args.seed or 0)
    if args.config:
        overrides = json.loads(Path(args.config).read_text())
        for key, value in overrides.items():
            if not hasattr(spec, key):
                raise ConfigurationError(f"unknown synth key {key!r}")
            setattr(spec, key, tuple(value) if isinstance(value, list) else value)
    res = generate(spec, args.out)
    print(f"wrote {len(res.manifest.views)} views and the ground-truth checkpoint to {args.out}")
    return 0


COMMANDS = {
    "train": cmd_train, "render": cmd_render, "eval": cmd_eval,
    "check-grads": cmd_check_grads, "synth": cmd_synth,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="sgs", description="Stochastic Gaussian splatting")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="training config (INI); JSON SynthSpec overrides for synth")
        p.add_argument("--dataset", help="dataset directory")
        p.add_argument("--out", help="output directory")
        p.add_argument("--seed", type=int)
        p.add_argument("--iters", type=int, help="total iterations")
        p.add_argument("--mc-samples", type=int)
        p.add_argument("--lambda-ause", type=float)
        p.add_argument("--lambda-kl", type=float)
        p.add_argument("--lambda-ssim", type=float)
        p.add_argument("--checkpoint", help="model checkpoint")
        p.add_argument("--view-index", type=int)
    return parser


_REQUIRED = {
    "train": ("dataset", "out"), "render": ("checkpoint", "dataset", "out"),
    "eval": ("checkpoint", "dataset", "out"), "check-grads": ("checkpoint", "dataset"),
    "synth": ("out",),
}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    missing = [f"--{k.replace('_', '-')}" for k in _REQUIRED[args.command] if getattr(args, k) is None]
    if missing:
        parser.error(f"{args.command} requires {', '.join(missing)}")
    try:
        _set_threads()
        return COMMANDS[args.command](args)
    except (ValueError, OSError, RuntimeError, FloatingPointError) as err:
        print(f"sgs {args.command}: error: {err}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
