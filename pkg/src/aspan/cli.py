"""Command-line front end.

Subcommands: gen, train, match, eval, bench, ablate. Every run is
deterministic given (--config, --seed); reports are JSON with delimited
and figure companions. Exit codes: 0 success, 2 validation error,
3 numeric failure. ASPAN_THREADS caps worker parallelism for dataset
generation and evaluation.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import asdict, replace
from pathlib import Path

import numpy as np

from . import bench as bench_mod
from . import metrics, synth, viz
from .attention import compute_span
from .backbone import InputError
from .config import ConfigError, RunConfig
from .flow import DomainError
from .matcher import MatchSet
from .model import load_checkpoint, match_pair
from .tensor import DimensionError, GradCheckError, ParameterError
from .tensor_io import FormatError, load_tensor
from .train import NumericError, train_model

log = logging.getLogger("aspan")

VALIDATION_ERRORS = (ConfigError, InputError, FormatError, ParameterError,
                     DimensionError, DomainError, ValueError, FileNotFoundError)


def _threads() -> int:
    try:
        return max(1, int(os.environ.get("ASPAN_THREADS", "1")))
    except ValueError:
        return 1


def _load_config(args) -> RunConfig:
    cfg = RunConfig.load(getattr(args, "config", None))
    if getattr(args, "seed", None) is not None:
        cfg.train = replace(cfg.train, seed=args.seed)
        cfg.gen = replace(cfg.gen, seed=args.seed)
    return cfg


def _load_image(path: str | Path) -> np.ndarray:
    """Grayscale H x W x 1 array in [0, 1] from .aspt or a standard image."""
    path = Path(path)
    if path.suffix == ".aspt":
        arr = load_tensor(path).astype(np.float64)
        if arr.ndim == 2:
            arr = arr[..., None]
        return arr
    from PIL import Image
    with Image.open(path) as img:
        arr = np.asarray(img.convert("L"), dtype=np.float64) / 255.0
    return arr[..., None]


def cmd_gen(args) -> int:
    cfg = _load_config(args)
    manifest = synth.write_dataset(args.out, cfg.gen, threads=_threads())
    metrics.validate_json("dataset_manifest", manifest.to_dict())
    print(f"wrote {manifest.n_pairs} pairs ({manifest.tier}, "
          f"{manifest.extent[0]}x{manifest.extent[1]}, seed {manifest.seed}) "
          f"to {args.out}")
    return 0


def cmd_train(args) -> int:
    cfg = _load_config(args)
    _, pairs = synth.read_dataset(args.dataset)
    weights, epoch_rows = train_model(pairs, cfg, args.out)
    out = Path(args.out)
    report = {"kind": "train", "seed": cfg.train.seed, "config": cfg.to_dict(),
              "epochs": epoch_rows}
    metrics.write_report(report, out / "report.json")
    lines = ["epoch,lr,loss_total,loss_coarse,loss_fine,loss_flow"]
    for r in epoch_rows:
        lines.append(f"{r['epoch']},{r['lr']},{r['loss_total']},"
                     f"{r['loss_coarse']},{r['loss_fine']},{r['loss_flow']}")
    (out / "epochs.csv").write_text("\n".join(lines) + "\n")
    viz.save_training_curves(epoch_rows, out / "loss_curves.png")
    first, last = epoch_rows[0]["loss_total"], epoch_rows[-1]["loss_total"]
    print(f"trained {cfg.train.epochs} epochs; total loss {first:.4f} -> {last:.4f}; "
          f"weights in {out / 'weights'}")
    del weights
    return 0


def cmd_match(args) -> int:
    weights, mcfg, train_extent = load_checkpoint(args.weights)
    if args.npe_off:
        mcfg = replace(mcfg, npe=False)
    image_a = _load_image(args.image_a)
    image_b = _load_image(args.image_b)
    matches, enc, _ = match_pair(image_a, image_b, weights, mcfg, train_extent)
    alpha, beta = enc.pe_scale
    if (alpha, beta) != (1.0, 1.0):
        log.warning("resolution differs from training; encoding rescaled "
                    "with alpha=%.4f beta=%.4f", alpha, beta)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    matches.to_jsonl(out / "matches.jsonl")
    for line in (out / "matches.jsonl").read_text().splitlines():
        metrics.validate_json("matchset_line", json.loads(line))
    if args.viz:
        viz.save_match_overlay(image_a, image_b, matches, out / "match_overlay.png")
        if enc.flows:
            flow_a = enc.flows[-1][0]
            sigma = flow_a.values[..., 2:4].mean(axis=-1)
            viz.save_uncertainty_heatmap(sigma, out / "uncertainty_a.png")
            span = compute_span(
                _detached(flow_a), mcfg.gla.cell_size_fine,
                mcfg.gla.sigma_multiplier,
                (enc.feat_b.height, enc.feat_b.width), enc.feat_b.stride,
                mcfg.gla.samples_per_side)
            viz.save_span_overlay(image_b, span, enc.feat_b.stride,
                                  out / "spans_on_b.png")
    print(f"{len(matches.fine)} matches -> {out / 'matches.jsonl'} "
          f"(pe scale alpha={alpha:.4f} beta={beta:.4f})")
    return 0


def _detached(flow):
    from .flow import FlowMap
    return FlowMap(flow.grid.detach(), flow.stride, flow.image_extent)


def cmd_eval(args) -> int:
    weights, mcfg, train_extent = load_checkpoint(args.weights)
    if args.npe_off:
        mcfg = replace(mcfg, npe=False)
    _, pairs = synth.read_dataset(args.dataset)
    if args.rescale != 1.0:
        pairs = [synth.rescale_pair(p, args.rescale) for p in pairs]
    section = metrics.evaluate_pairs(pairs, weights, mcfg, train_extent,
                                     threads=_threads())
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    report = {"kind": "eval", "seed": args.seed if args.seed is not None else 0,
              "config": {"model": asdict(mcfg), "rescale": args.rescale,
                         "npe": mcfg.npe},
              "eval": section}
    metrics.write_report(report, out / "report.json")
    metrics.write_eval_csv(section, out / "eval.csv")
    if args.viz and section["per_block_epe"]:
        viz.save_epe_per_block(section["per_block_epe"], out / "epe_per_block.png")
    print(f"precision@5px {section['precision']['5px']:.3f} "
          f"recall@5px {section['recall']['5px']:.3f} "
          f"per-block EPE {['%.2f' % e for e in section['per_block_epe']]}")
    return 0


def cmd_bench(args) -> int:
    cfg = _load_config(args)
    sizes = tuple(int(s) for s in args.sizes.split(","))
    scaling = bench_mod.run_scaling(sizes, cfg.model.dim, cfg.model.gla,
                                    seed=cfg.train.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    deterministic_rows = [
        {k: r[k] for k in ("size_px", "tokens", "adaptive_madds", "full_madds")}
        for r in scaling["rows"]]
    report = {"kind": "bench", "seed": cfg.train.seed, "config": cfg.to_dict(),
              "scaling": {**scaling, "rows": deterministic_rows}}
    metrics.write_report(report, out / "report.json")
    # wall-clock measurements live only in the csv companion
    (out / "scaling.csv").write_text(bench_mod.scaling_csv(scaling))
    viz.save_scaling_plot(scaling, out / "scaling.png")
    print(f"adaptive slope {scaling['adaptive_slope']:.3f}, "
          f"full slope {scaling['full_slope']:.3f} over sizes {sizes}")
    return 0


def cmd_ablate(args) -> int:
    cfg = _load_config(args)
    _, train_pairs = synth.read_dataset(args.dataset)
    _, eval_pairs = synth.read_dataset(args.eval_dataset)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    for mode in ("single_level", "fixed_span", "adaptive_span"):
        mode_cfg = RunConfig.from_dict(cfg.to_dict())
        mode_cfg.model.gla.attention_mode = mode
        weights, epoch_rows = train_model(train_pairs, mode_cfg, out / mode,
                                          progress=False)
        section = metrics.evaluate_pairs(eval_pairs, weights, mode_cfg.model,
                                         train_pairs[0].extent, threads=_threads())
        rows.append({"attention_mode": mode,
                     "final_train_loss": epoch_rows[-1]["loss_total"],
                     "eval": section})
        print(f"{mode}: precision@5px {section['precision']['5px']:.3f}")
    ordering = [r["eval"]["precision"]["5px"] for r in rows]
    inversions = []
    if ordering[2] < ordering[1]:
        inversions.append("adaptive_span < fixed_span on precision@5px")
    if ordering[1] < ordering[0]:
        inversions.append("fixed_span < single_level on precision@5px")
    report = {"kind": "ablate", "seed": cfg.train.seed, "config": cfg.to_dict(),
              "ablation": {"rows": rows, "ordering_consistent": not inversions,
                           "inversions": inversions}}
    metrics.write_report(report, out / "report.json")
    lines = ["attention_mode,precision_2px,precision_5px,recall_5px,final_train_loss"]
    for r in rows:
        e = r["eval"]
        lines.append(f"{r['attention_mode']},{e['precision']['2px']},"
                     f"{e['precision']['5px']},{e['recall']['5px']},"
                     f"{r['final_train_loss']}")
    (out / "ablation.csv").write_text("\n".join(lines) + "\n")
    viz.save_ablation_chart(rows, out / "ablation.png")
    if inversions:
        print("ordering inversions flagged: " + "; ".join(inversions))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="aspan",
        description="Detector-free image matching with adaptive attention spans")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, viz_flag=True):
        p.add_argument("--config", help="JSON config file")
        p.add_argument("--seed", type=int, help="override config seeds")
        p.add_argument("--out", required=True, help="output directory")
        if viz_flag:
            p.add_argument("--viz", action="store_true",
                           help="also render figures")

    p = sub.add_parser("gen", help="generate a synthetic dataset")
    common(p, viz_flag=False)
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("train", help="train on a dataset")
    p.add_argument("dataset", help="dataset directory")
    common(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("match", help="match two images")
    p.add_argument("weights", help="checkpoint directory")
    p.add_argument("image_a")
    p.add_argument("image_b")
    p.add_argument("--npe-off", action="store_true",
                   help="disable resolution-normalized positional encoding")
    common(p)
    p.set_defaults(func=cmd_match)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a dataset")
    p.add_argument("weights")
    p.add_argument("dataset")
    p.add_argument("--npe-off", action="store_true")
    p.add_argument("--rescale", type=float, default=1.0,
                   help="re-render eval pairs at this scale factor")
    common(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("bench", help="attention scaling benchmark")
    p.add_argument("--sizes", default="64,96,128,192",
                   help="comma-separated image sizes in px")
    common(p, viz_flag=False)
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("ablate", help="train and compare the attention modes")
    p.add_argument("dataset")
    p.add_argument("eval_dataset")
    common(p, viz_flag=False)
    p.set_defaults(func=cmd_ablate)
    return parser


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(message)s")
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except NumericError as exc:
        log.error("numeric failure: %s", exc)
        return 3
    except GradCheckError as exc:
        log.error("numeric failure: %s", exc)
        return 3
    except VALIDATION_ERRORS as exc:
        log.error("%s", exc)
        return 2


if __name__ == "__main__":
    sys.exit(main())
