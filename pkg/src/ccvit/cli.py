"""Command-line entry point.

Five subcommands cover the pipeline: train-centroids fits a codebook,
tokenize inspects one image (optionally rendering its centroid
approximation), pretrain runs the masked-modeling loop from a config file,
bench measures tokenizer robustness and latency, and reconstruct renders
original / corrupted / predicted panels for one image through a trained
model.

Every command that produces files writes them under a run directory
together with manifest.json naming the inputs, seeds, and sha256 of each
artifact. Output is deterministic for fixed flags, except wall-clock
timings.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import sys
import time
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import autograd as ag
from .bench import (
    CentroidTokenizer,
    latency_bench,
    report_csv,
    report_table,
    robustness_report,
)
from .config import load_run_config
from .corruption import corrupt, make_plan
from .imaging import (
    Image,
    ImagingError,
    PatchGrid,
    enumerate_images,
    load_image,
    patchify,
    save_image,
    unpatchify,
)
from .model import load_model
from .tokenizer import (
    detokenize,
    load_codebook,
    sample_training_vectors,
    save_codebook,
    tokenize,
    train_codebook,
)
from .trainer import train


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _write_manifest(run_dir: Path, command: str, inputs: dict, seeds: dict, artifacts) -> None:
    manifest = {
        "command": command,
        "inputs": {k: str(v) for k, v in inputs.items()},
        "seeds": seeds,
        "artifacts": {
            str(p.relative_to(run_dir)) if p.is_relative_to(run_dir) else str(p): _sha256(p)
            for p in artifacts
            if p.exists()
        },
    }
    (run_dir / "manifest.json").write_text(json.dumps(manifest, indent=2) + "\n")


# -- subcommands ----------------------------------------------------------------


def cmd_train_centroids(args) -> int:
    run_dir = Path(args.run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    out = Path(args.out) if args.out else run_dir / "codebook.ccvb"
    total = args.images if args.images > 0 else len(enumerate_images(args.data))
    chunks = sample_training_vectors(args.data, total, args.seed, args.patch_size)
    t0 = time.perf_counter()
    history: list[float] = []
    cb = train_codebook(
        chunks, args.k, args.iters, args.seed, args.patch_size,
        init=args.init, cost_history_out=history,
    )
    wall = time.perf_counter() - t0
    save_codebook(cb, out)
    print(
        f"k={cb.k} dim={cb.dim} patch_size={cb.patch_size} "
        f"vectors={cb.meta.n_vectors} iterations={cb.meta.iterations}"
    )
    print(f"final_cost={cb.meta.final_cost:.9g} wall_s={wall:.2f}")
    _write_manifest(
        run_dir, "train-centroids", {"dataset": args.data}, {"seed": args.seed}, [out]
    )
    return 0


def cmd_tokenize(args) -> int:
    cb = load_codebook(args.codebook)
    img = load_image(args.image, target_resolution=args.resolution)
    grid = patchify(img, cb.patch_size)
    tg = tokenize(grid, cb)
    for row in tg.tokens.reshape(tg.grid_h, tg.grid_w):
        print(" ".join(f"{t:4d}" for t in row))
    if args.detokenize:
        recon = unpatchify(detokenize(tg, cb))
        save_image(recon, args.detokenize)
        mse = float(np.mean((img.data - recon.data) ** 2))
        print(f"reconstruction_mse={mse:.9g}")
    return 0


_ABLATIONS = {
    "tokens_only": {"pixel_target_off": True, "replacement_off": True},
    "tokens_replace": {"pixel_target_off": True, "replacement_off": False},
    "full": {"pixel_target_off": False, "replacement_off": False},
}


def cmd_pretrain(args) -> int:
    cfg = load_run_config(args.config, overrides=args.set or [])
    model_cfg, train_cfg = cfg.model, cfg.trainer
    if args.ablation:
        flags = _ABLATIONS[args.ablation]
        model_cfg = replace(model_cfg, pixel_target_off=flags["pixel_target_off"])
        train_cfg = replace(train_cfg, replacement_off=flags["replacement_off"])
    if args.pixel_target_off:
        model_cfg = replace(model_cfg, pixel_target_off=True)
    if args.replacement_off:
        train_cfg = replace(train_cfg, replacement_off=True)
    if args.fixed_corruption:
        train_cfg = replace(train_cfg, fixed_corruption=True)
    run_dir = Path(args.run_dir or cfg.paths.run_dir)
    result = train(
        model_cfg, train_cfg, run_dir,
        resume=args.resume, stop_after_step=args.stop_after_step, log=print,
    )
    if result.metrics:
        step, lr, ce, mse, top1 = result.metrics[-1]
        print(
            f"done: steps={result.steps} loss_ce={ce:.9g} "
            f"loss_mse={mse:.9g} token_top1={top1:.9g}"
        )
    best = run_dir / "model_best.ckpt"
    _write_manifest(
        run_dir,
        "pretrain",
        {
            "config": args.config,
            "dataset": train_cfg.dataset_path,
            "codebook": train_cfg.codebook_path,
        },
        {"seed": train_cfg.seed},
        [result.checkpoint_path, result.state_path, result.metrics_path, best],
    )
    return 0


_BENCH_GRIDS = {
    "table4": {},  # module defaults: mask .1/.2/.5, noise 1/10/25, blur .5/1/2
    "quick": {
        "mask_ratios": (0.1, 0.5),
        "noise_sigmas": (10.0,),
        "blur_sigmas": (1.0,),
    },
}


def cmd_bench(args) -> int:
    run_dir = Path(args.run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    cb = load_codebook(args.codebook)
    paths = enumerate_images(args.data)[: args.images]
    if not paths:
        raise ImagingError(f"no images under {args.data}")
    images = [load_image(p) for p in paths]
    port = CentroidTokenizer(cb)
    rep = robustness_report(port, images, seed=args.seed, **_BENCH_GRIDS[args.grid])
    csv_path = run_dir / "robustness.csv"
    table_path = run_dir / "robustness.txt"
    csv_path.write_text(report_csv(rep))
    table = report_table(rep)
    table_path.write_text(table)
    print(table, end="")
    artifacts = [csv_path, table_path]
    if not args.skip_latency:
        grids = [patchify(img, cb.patch_size) for img in images]
        lat = latency_bench(port, grids, repetitions=args.repetitions)
        lat_path = run_dir / "latency.txt"
        lat_path.write_text(str(lat) + "\n")
        print(lat)
        artifacts.append(lat_path)
    _write_manifest(
        run_dir,
        "bench",
        {"dataset": args.data, "codebook": args.codebook},
        {"seed": args.seed},
        artifacts,
    )
    return 0


def cmd_reconstruct(args) -> int:
    run_dir = Path(args.run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    model = load_model(args.checkpoint)
    mcfg = model.config
    cb = load_codebook(args.codebook)
    res = (mcfg.grid_h * mcfg.patch_size, mcfg.grid_w * mcfg.patch_size)
    img = load_image(args.image, target_resolution=res)
    grid = patchify(img, mcfg.patch_size)
    n = mcfg.n_patches
    mask_count = args.mask_count or max(1, round(n * 75 / 196))
    replace_count = args.replace_count if args.replace_count is not None else round(n * 20 / 196)
    min_block = args.min_block or min(16, mask_count)
    plan = make_plan((mcfg.grid_h, mcfg.grid_w), mask_count, replace_count,
                     args.plan_seed, min_block)
    batch = corrupt(grid, cb, plan)
    with ag.no_grad():
        out = model.forward([batch])
    preds = out.pixel_preds.data[0]
    corrupted = batch.vectors.copy()
    recon = batch.vectors.copy()
    touched = batch.tags != 0
    recon[touched] = np.clip(preds[touched], 0.0, 1.0)
    mse = float(np.mean((preds[touched] - batch.pixel_targets[touched]) ** 2))

    def panel(vectors):
        g = PatchGrid(
            vectors.astype(np.float32), grid.grid_h, grid.grid_w,
            grid.patch_size, grid.channels,
        )
        return unpatchify(g).data

    sep = np.ones((3, res[0], 2), dtype=np.float32)
    strip = np.concatenate(
        [panel(batch.pixel_targets), sep, panel(corrupted), sep, panel(recon)], axis=2
    )
    out_path = Path(args.out) if args.out else run_dir / "reconstruction.png"
    save_image(Image(strip), out_path)
    print(f"masked={len(plan.masked)} replaced={len(plan.replaced)} corrupted_mse={mse:.9g}")
    print(f"wrote {out_path}")
    _write_manifest(
        run_dir,
        "reconstruct",
        {"checkpoint": args.checkpoint, "codebook": args.codebook, "image": args.image},
        {"plan_seed": args.plan_seed},
        [out_path],
    )
    return 0


# -- parser ---------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="ccvit", description="centroid-tokenized masked image modeling"
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train-centroids", help="fit a k-means patch codebook")
    p.add_argument("--data", required=True, help="image directory")
    p.add_argument("--k", type=int, default=512)
    p.add_argument("--iters", type=int, default=20)
    p.add_argument("--images", type=int, default=0, help="sample size, 0 = all")
    p.add_argument("--patch-size", type=int, default=8)
    p.add_argument("--init", choices=("random", "kmeans++"), default="random")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default=None, help="codebook path (default: run dir)")
    p.add_argument("--run-dir", default="runs/centroids")
    p.set_defaults(func=cmd_train_centroids)

    p = sub.add_parser("tokenize", help="print an image's token grid")
    p.add_argument("--codebook", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--resolution", type=int, default=None)
    p.add_argument("--detokenize", default=None, metavar="OUT_PNG",
                   help="also write the centroid approximation")
    p.set_defaults(func=cmd_tokenize)

    p = sub.add_parser("pretrain", help="run masked pre-training from a config")
    p.add_argument("--config", required=True)
    p.add_argument("--run-dir", default=None, help="override paths.run_dir")
    p.add_argument("--resume", action="store_true")
    p.add_argument("--stop-after-step", type=int, default=None,
                   help="pause training after this optimizer step")
    p.add_argument("--set", action="append", metavar="KEY=VALUE",
                   help="config override, e.g. trainer.epochs=5")
    p.add_argument("--ablation", choices=sorted(_ABLATIONS), default=None)
    p.add_argument("--pixel-target-off", action="store_true")
    p.add_argument("--replacement-off", action="store_true")
    p.add_argument("--fixed-corruption", action="store_true")
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("bench", help="tokenizer robustness and latency report")
    p.add_argument("--codebook", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--images", type=int, default=64)
    p.add_argument("--grid", choices=sorted(_BENCH_GRIDS), default="table4")
    p.add_argument("--repetitions", type=int, default=30)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--skip-latency", action="store_true")
    p.add_argument("--run-dir", default="runs/bench")
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("reconstruct", help="render original/corrupted/predicted panels")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--codebook", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--plan-seed", type=int, default=0)
    p.add_argument("--mask-count", type=int, default=None)
    p.add_argument("--replace-count", type=int, default=None)
    p.add_argument("--min-block", type=int, default=None)
    p.add_argument("--out", default=None)
    p.add_argument("--run-dir", default="runs/reconstruct")
    p.set_defaults(func=cmd_reconstruct)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
