"""Operator-facing command line: synth-data, train, infer, evaluate.

Exit codes: 0 success, 1 runtime failure, 2 usage error. All commands are
deterministic under fixed flags and seeds. REFLECTDIFF_DATA_ROOT provides
the default output root for synth-data.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

import numpy as np

__all__ = ["main"]

REQUIRED_CONFIG_KEYS = ("lr", "batch_size", "steps_paired", "steps_unpaired", "seed", "out_dir")

CONFIG_DEFAULTS = {
    "lambda1": 1.0,
    "lambda2": 10.0,
    "lambda3": 0.1,
    "lambda_adv": 0.1,
    "adam_beta1": 0.9,
    "adam_beta2": 0.999,
    "adam_eps": 1e-8,
    "checkpoint_every": 500,
    "grad_clip": 1.0,
    "arch": "desk",
    "timesteps": 1000,
    "beta_start": 1e-4,
    "beta_end": 0.02,
    "recon_t_frac": 0.5,
    "unpaired_recon": "chain",
    "unpaired_chain_steps": 8,
    "ablation": [],
    "paired_manifest": None,
    "unpaired_x_manifest": None,
    "unpaired_s_manifest": None,
}


def _positive_int(text: str) -> int:
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {v}")
    return v


def _size(text: str):
    try:
        h, w = text.lower().split("x")
        return int(h), int(w)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected HxW (e.g. 64x64), got {text!r}")


def load_train_config(path, overrides=None):
    """Flat JSON config to TrainConfig plus data paths; missing required keys
    raise a KeyError naming the key. Flag overrides win over file values."""
    from .losses import LossWeights
    from .training import TrainConfig

    with open(path) as f:
        raw = json.load(f)
    if overrides:
        raw.update({k: v for k, v in overrides.items() if v is not None})
    for key in REQUIRED_CONFIG_KEYS:
        if key not in raw:
            raise KeyError(f"config {path} is missing required key {key!r}")
    merged = dict(CONFIG_DEFAULTS)
    merged.update(raw)
    unknown = set(merged) - set(CONFIG_DEFAULTS) - set(REQUIRED_CONFIG_KEYS)
    if unknown:
        raise KeyError(f"config {path} has unknown key(s): {sorted(unknown)}")
    cfg = TrainConfig(
        weights=LossWeights(
            lambda1=float(merged["lambda1"]),
            lambda2=float(merged["lambda2"]),
            lambda3=float(merged["lambda3"]),
            lambda_adv=float(merged["lambda_adv"]),
        ),
        lr=float(merged["lr"]),
        batch_size=int(merged["batch_size"]),
        steps_paired=int(merged["steps_paired"]),
        steps_unpaired=int(merged["steps_unpaired"]),
        seed=int(merged["seed"]),
        ablation=frozenset(merged["ablation"]),
        adam_betas=(float(merged["adam_beta1"]), float(merged["adam_beta2"])),
        adam_eps=float(merged["adam_eps"]),
        checkpoint_every=int(merged["checkpoint_every"]),
        grad_clip=float(merged["grad_clip"]),
        arch=str(merged["arch"]),
        timesteps=int(merged["timesteps"]),
        beta_start=float(merged["beta_start"]),
        beta_end=float(merged["beta_end"]),
        recon_t_frac=float(merged["recon_t_frac"]),
        unpaired_recon=str(merged["unpaired_recon"]),
        unpaired_chain_steps=int(merged["unpaired_chain_steps"]),
    )
    paths = {
        "out_dir": merged["out_dir"],
        "paired_manifest": merged["paired_manifest"],
        "unpaired_x_manifest": merged["unpaired_x_manifest"],
        "unpaired_s_manifest": merged["unpaired_s_manifest"],
    }
    return cfg, paths


def _cmd_synth_data(args) -> int:
    from .data import make_toy_dataset

    out = args.out
    if out is None:
        root = os.environ.get("REFLECTDIFF_DATA_ROOT")
        if root is None:
            print("error: --out not given and REFLECTDIFF_DATA_ROOT unset", file=sys.stderr)
            return 2
        out = Path(root) / "toy"
    manifest = make_toy_dataset(args.n, args.size, args.seed, out)
    print(f"wrote {len(manifest.entries)} triplets under {out} (manifest.jsonl)")
    return 0


def _cmd_train(args) -> int:
    from .data import read_manifest
    from .training import run_two_stage

    overrides = {
        "lr": args.lr,
        "batch_size": args.batch_size,
        "steps_paired": args.steps_paired,
        "steps_unpaired": args.steps_unpaired,
        "seed": args.seed,
        "out_dir": args.out,
        "ablation": args.ablate.split(",") if args.ablate else None,
    }
    cfg, paths = load_train_config(args.config, overrides)
    total = cfg.steps_paired + cfg.steps_unpaired

    paired = None
    unpaired = None
    if cfg.steps_paired > 0:
        if not paths["paired_manifest"]:
            raise KeyError("config is missing required key 'paired_manifest'")
        paired = read_manifest(paths["paired_manifest"]).subset("train")
    if cfg.steps_unpaired > 0:
        for key in ("unpaired_x_manifest", "unpaired_s_manifest"):
            if not paths[key]:
                raise KeyError(f"config is missing required key {key!r}")
        unpaired = (
            read_manifest(paths["unpaired_x_manifest"]).subset("train"),
            read_manifest(paths["unpaired_s_manifest"]).subset("train"),
        )

    if args.resume:
        from .checkpoint import load_checkpoint

        done = int(load_checkpoint(args.resume).manifest["step"])
        if done >= total:
            print(f"checkpoint already at step {done} >= {total}; nothing to do")
            return 0

    every = max(1, total // 10) if total else 1

    def progress(report):
        if report.step % every == 0 or report.step + 1 == total:
            print(report.csv_row())

    state = run_two_stage(
        cfg, paired, unpaired, paths["out_dir"], resume_from=args.resume, log_fn=progress
    )
    print(f"finished at step {state.step} (stage {state.stage}); "
          f"checkpoints in {paths['out_dir']}")
    return 0


def _cmd_infer(args) -> int:
    from .images import load_image, save_image
    from .inference import remove_reflection

    x = load_image(args.input)
    s_hat, r_hat = remove_reflection(
        x,
        args.checkpoint,
        steps=args.steps,
        seed=args.seed,
        deterministic=args.deterministic,
        pad_mode="reflect" if args.pad == "reflect" else "error",
    )
    save_image(args.out, s_hat)
    print(f"wrote transmission estimate to {args.out}")
    if args.emit_reflection:
        save_image(args.emit_reflection, r_hat)
        print(f"wrote reflection estimate to {args.emit_reflection}")
    return 0


def _cmd_evaluate(args) -> int:
    from .data import read_manifest
    from .images import load_image, save_image
    from .metrics import evaluate, write_report

    manifest = read_manifest(args.manifest)
    report = evaluate(manifest, args.pred, split=args.split)
    csv_path = Path(str(args.report) + ".csv")
    json_path = Path(str(args.report) + ".json")
    write_report(report, csv_path, json_path)

    grids_dir = Path(args.grids) if args.grids else Path(str(args.report) + "_grids")
    root = Path(manifest.root)
    for e in manifest.entries:
        if e.split != args.split:
            continue
        x = load_image(root / e.x_path)
        truth = load_image(root / e.s_path)
        pred = load_image(Path(args.pred) / f"{e.id}.png")
        save_image(grids_dir / f"{e.id}.png", np.concatenate([x, pred, truth], axis=1))

    agg = report.aggregate
    print(
        f"{len(report.per_image)} images: PSNR {agg['psnr']:.3f} dB, "
        f"SSIM {agg['ssim']:.4f}, RAM {agg['ram']:.4f}"
    )
    print(f"report: {csv_path}, {json_path}; grids: {grids_dir}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="reflectdiff",
        description="Diffusion-based single-image reflection removal toolkit.",
    )
    sub = p.add_subparsers(dest="command", required=True)

    sp = sub.add_parser("synth-data", help="generate a synthetic paired toy dataset")
    sp.add_argument("--n", type=_positive_int, required=True, help="number of triplets")
    sp.add_argument("--size", type=_size, default=(64, 64), help="image size HxW")
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--out", default=None, help="output root (default $REFLECTDIFF_DATA_ROOT/toy)")
    sp.set_defaults(fn=_cmd_synth_data)

    tp = sub.add_parser("train", help="run the two-stage training protocol")
    tp.add_argument("--config", required=True, help="flat JSON training config")
    tp.add_argument("--resume", default=None, help="checkpoint to resume from")
    tp.add_argument("--ablate", default=None, help="comma list: no_td,no_attention,no_rsn")
    tp.add_argument("--lr", type=float, default=None)
    tp.add_argument("--batch-size", type=int, default=None, dest="batch_size")
    tp.add_argument("--steps-paired", type=int, default=None, dest="steps_paired")
    tp.add_argument("--steps-unpaired", type=int, default=None, dest="steps_unpaired")
    tp.add_argument("--seed", type=int, default=None)
    tp.add_argument("--out", default=None, help="override out_dir from the config")
    tp.set_defaults(fn=_cmd_train)

    ip = sub.add_parser("infer", help="remove the reflection from one image")
    ip.add_argument("--checkpoint", required=True)
    ip.add_argument("--in", dest="input", required=True)
    ip.add_argument("--out", required=True)
    ip.add_argument("--steps", type=_positive_int, default=50)
    ip.add_argument("--seed", type=int, default=0)
    ip.add_argument("--emit-reflection", default=None, help="also write the reflection estimate")
    ip.add_argument("--deterministic", action="store_true", help="mean-only sampling")
    ip.add_argument("--pad", choices=("error", "reflect"), default="error")
    ip.set_defaults(fn=_cmd_infer)

    ep = sub.add_parser("evaluate", help="score predictions against a manifest")
    ep.add_argument("--manifest", required=True)
    ep.add_argument("--pred", required=True, help="directory of <id>.png predictions")
    ep.add_argument("--report", required=True, help="output prefix for .csv/.json")
    ep.add_argument("--split", default="test")
    ep.add_argument("--grids", default=None, help="directory for side-by-side grids")
    ep.set_defaults(fn=_cmd_evaluate)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except (KeyboardInterrupt, BrokenPipeError):
        return 1
    except Exception as exc:  # runtime failure -> exit 1 with a diagnostic
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
