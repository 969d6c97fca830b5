"""Command-line surface for the toolkit.

Subcommands cover the full life cycle: generate a synthetic dataset,
run the training stages (resuming from the latest stage checkpoint),
extend and fine-tune RH heads, evaluate a checkpoint against a dataset,
deploy tiled inference over a tile, and compare two deployments for
canopy-cover loss. Any failure prints a single `error: ...` line and
exits 1; usage problems exit 2.
"""
from __future__ import annotations

import argparse
import os
import sys
from dataclasses import replace

import numpy as np

from .deployment import DeployGrid, change_detection, forest_mask, load_raster, save_raster, tiled_inference
from .evaluation import DEFAULT_BIN_SPECS, EvalReport, pairs_from_arrays
from .network import load_checkpoint
from .synth import RH_QUANTILES, generate_dataset, load_dataset, save_dataset
from .training import (
    TrainConfig,
    TrainLog,
    finetune_rh,
    predict_tile,
    train_stage1,
    train_stage2,
    train_stage3,
)
from .weighting import balanced_subset

STAGE_CKPTS = ("finetune_rh.ckpt", "stage3.ckpt", "stage2.ckpt", "stage1.ckpt")


def _load_config(args) -> TrainConfig:
    if getattr(args, "config", None):
        with open(args.config) as fh:
            cfg = TrainConfig.from_json(fh.read())
    else:
        cfg = TrainConfig()
    if getattr(args, "seed", None) is not None:
        cfg = replace(cfg, seed=args.seed)
    return cfg


def _latest_checkpoint(outdir) -> str | None:
    for name in STAGE_CKPTS:
        path = os.path.join(outdir, name)
        if os.path.exists(path):
            return path
    return None


def _cmd_synth(args) -> int:
    tiles = generate_dataset(args.seed if args.seed is not None else 0, args.tiles)
    save_dataset(tiles, args.out)
    print(f"wrote {len(tiles)} tiles to {args.out}")
    return 0


def _cmd_train(args) -> int:
    cfg = _load_config(args)
    tiles = load_dataset(args.data)
    val = load_dataset(args.val) if args.val else None
    os.makedirs(args.out, exist_ok=True)
    ckpt = lambda name: os.path.join(args.out, name)
    stages = ("1", "2", "3") if args.stage == "all" else (args.stage,)
    log = TrainLog(ckpt("training_log.csv"))
    params = None
    try:
        if "1" in stages:
            if os.path.exists(ckpt("stage1.ckpt")):
                params = load_checkpoint(ckpt("stage1.ckpt"))
                print(f"stage1 already complete: {ckpt('stage1.ckpt')}")
            else:
                params = train_stage1(tiles, cfg, val, log=log, checkpoint_dir=args.out)
                print(f"stage1 done: {ckpt('stage1.ckpt')}")
        if "2" in stages:
            if os.path.exists(ckpt("stage2.ckpt")):
                params = load_checkpoint(ckpt("stage2.ckpt"))
                print(f"stage2 already complete: {ckpt('stage2.ckpt')}")
            else:
                if params is None:
                    if not os.path.exists(ckpt("stage1.ckpt")):
                        raise ValueError("stage2 needs stage1.ckpt; run --stage 1 first")
                    params = load_checkpoint(ckpt("stage1.ckpt"))
                subsets = {v: balanced_subset(tiles, variable=v, seed=cfg.seed)
                           for v in params.config.value_heads}
                params = train_stage2(params, subsets, cfg, val, log=log, checkpoint_dir=args.out)
                print(f"stage2 done: {ckpt('stage2.ckpt')}")
        if "3" in stages:
            if os.path.exists(ckpt("stage3.ckpt")):
                params = load_checkpoint(ckpt("stage3.ckpt"))
                print(f"stage3 already complete: {ckpt('stage3.ckpt')}")
            else:
                if params is None:
                    if not os.path.exists(ckpt("stage2.ckpt")):
                        raise ValueError("stage3 needs stage2.ckpt; run --stage 2 first")
                    params = load_checkpoint(ckpt("stage2.ckpt"))
                sigma_vars = params.config.value_heads[: params.config.n_sigma_heads]
                subsets = {v: balanced_subset(tiles, variable=v, seed=cfg.seed)
                           for v in sigma_vars}
                params = train_stage3(params, subsets, cfg, val, log=log, checkpoint_dir=args.out)
                print(f"stage3 done: {ckpt('stage3.ckpt')}")
    finally:
        log.close()
    return 0


def _cmd_finetune_rh(args) -> int:
    cfg = _load_config(args)
    tiles = load_dataset(args.data)
    val = load_dataset(args.val) if args.val else None
    path = args.checkpoint or os.path.join(args.out, "stage3.ckpt")
    if not os.path.exists(path):
        raise ValueError(f"checkpoint not found: {path}")
    params = load_checkpoint(path)
    qs = tuple(int(q) for q in args.quantiles.split(",")) if args.quantiles else RH_QUANTILES
    os.makedirs(args.out, exist_ok=True)
    log = TrainLog(os.path.join(args.out, "finetune_rh_log.csv"))
    try:
        finetune_rh(params, tiles, qs, cfg, val, log=log, checkpoint_dir=args.out)
    finally:
        log.close()
    print(f"finetune-rh done: {os.path.join(args.out, 'finetune_rh.ckpt')}")
    return 0


def _cmd_eval(args) -> int:
    tiles = load_dataset(args.data)
    path = args.checkpoint or (_latest_checkpoint(args.out) if args.out else None)
    if not path or not os.path.exists(path):
        raise ValueError("no checkpoint found; pass --checkpoint or --out with one")
    params = load_checkpoint(path)
    sigma_vars = set(params.config.value_heads[: params.config.n_sigma_heads])
    report = EvalReport(meta={"checkpoint": os.path.basename(path), "n_tiles": len(tiles)})
    variables = list(params.config.value_heads) + list(params.extended_heads)
    columns = {v: ([], [], []) for v in variables}
    for tile in tiles:
        pred = predict_tile(params, tile)
        for p in tile.quality_points():
            for i, v in enumerate(variables):
                truth = (float(p.rh[RH_QUANTILES.index(int(v[2:]))]) if v.startswith("rh")
                         else float(p.ch) if v == "ch" else float(getattr(p, v)))
                yt, yp, sg = columns[v]
                yt.append(truth)
                yp.append(float(pred.values[v][p.row, p.col]))
                if v in sigma_vars:
                    sg.append(float(pred.sigmas[v][p.row, p.col]))
    for v in variables:
        yt, yp, sg = columns[v]
        spec = DEFAULT_BIN_SPECS["ch" if v.startswith("rh") else v]
        pairs = pairs_from_arrays(yt, yp, sigma_pred=sg if sg else None, variable=v)
        report.add_variable(v, pairs, spec, min_count=args.min_count,
                            with_coverage=bool(sg))
    outdir = args.out or "."
    os.makedirs(outdir, exist_ok=True)
    report.save(os.path.join(outdir, "report.json"), csv_dir=outdir)
    print(f"wrote {os.path.join(outdir, 'report.json')}")
    return 0


def _cmd_deploy(args) -> int:
    tiles = load_dataset(args.data)
    if not 0 <= args.index < len(tiles):
        raise ValueError(f"tile index {args.index} outside dataset of {len(tiles)}")
    if not os.path.exists(args.checkpoint):
        raise ValueError(f"checkpoint not found: {args.checkpoint}")
    params = load_checkpoint(args.checkpoint)
    tile = tiles[args.index]
    h, w = tile.channels.shape[1:]
    grid = DeployGrid(h, w, tile_size=args.tile_size, pad=args.pad)
    planes = tiled_inference(params, tile.channels, grid)
    meta = {"geo": [float(tile.geo[0]), float(tile.geo[1])], "index": args.index,
            "checkpoint": os.path.basename(args.checkpoint),
            "tile_size": args.tile_size, "pad": args.pad}
    save_raster(args.out, planes, meta)
    print(f"wrote {len(planes)} planes to {args.out}")
    return 0


def _cmd_change(args) -> int:
    planes1, _ = load_raster(args.t1)
    planes2, _ = load_raster(args.t2)
    for need in ("cc", "ch", "agbd"):
        if need not in planes1 or need not in planes2:
            raise ValueError(f"deployments lack a '{need}' plane")
    mask, report = change_detection(
        planes1["cc"], planes2["cc"], forest_mask(planes1["ch"]),
        planes1["agbd"], planes2["agbd"],
        label=f"{os.path.basename(args.t1)}->{os.path.basename(args.t2)}")
    print(report.to_json())
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        with open(os.path.join(args.out, "change.json"), "w") as fh:
            fh.write(report.to_json() + "\n")
        save_raster(args.out, {"loss_mask": mask.astype(np.float32)},
                    {"threshold": "cc drop > 20 over t1 forest"})
    return 0


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="canopyreg",
                                 description="sparse-label canopy regression toolkit")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic dataset")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--tiles", type=int, default=50)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_synth)

    p = sub.add_parser("train", help="run training stages, resuming from checkpoints")
    p.add_argument("--data", required=True)
    p.add_argument("--val")
    p.add_argument("--config")
    p.add_argument("--seed", type=int)
    p.add_argument("--stage", choices=("1", "2", "3", "all"), default="all")
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("finetune-rh", help="extend and fine-tune RH quantile heads")
    p.add_argument("--data", required=True)
    p.add_argument("--val")
    p.add_argument("--config")
    p.add_argument("--seed", type=int)
    p.add_argument("--checkpoint", help="explicit checkpoint (default: <out>/stage3.ckpt)")
    p.add_argument("--quantiles", help="comma-separated subset of the RH quantiles")
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_finetune_rh)

    p = sub.add_parser("eval", help="point-level assessment of a checkpoint")
    p.add_argument("--data", required=True)
    p.add_argument("--checkpoint")
    p.add_argument("--min-count", type=int, default=50)
    p.add_argument("--out")
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("deploy", help="tiled inference over one dataset tile")
    p.add_argument("--data", required=True)
    p.add_argument("--index", type=int, default=0)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--tile-size", type=int, default=64)
    p.add_argument("--pad", type=int, default=28)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_deploy)

    p = sub.add_parser("change", help="canopy-cover loss between two deployments")
    p.add_argument("--t1", required=True)
    p.add_argument("--t2", required=True)
    p.add_argument("--out")
    p.set_defaults(func=_cmd_change)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except Exception as err:  # single-line, machine-parsable failure
        reason = " ".join(str(err).split()) or err.__class__.__name__
        print(f"error: {reason}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
