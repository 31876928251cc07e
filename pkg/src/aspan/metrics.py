"""Evaluation metrics and JSON report assembly.

A report is a single JSON object with a `kind` tag and optional
sections (training curve, evaluation stats, scaling table, ablation
table), validated against the shipped schema before it is written.
"""

from __future__ import annotations

import json
from importlib import resources
from pathlib import Path

import numpy as np

from . import synth
from .config import ModelConfig
from .matcher import MatchSet
from .model import ModelWeights, match_pair
from .synth import SynthPair

THRESHOLDS_PX = (2.0, 5.0)


def load_schema(name: str) -> dict:
    return json.loads(resources.files("aspan").joinpath("schemas")
                      .joinpath(f"{name}.schema.json").read_text())


def validate_json(name: str, obj: dict) -> None:
    import jsonschema
    jsonschema.validate(obj, load_schema(name))


def validate_report(report: dict) -> None:
    validate_json("metrics_report", report)


def write_report(report: dict, path: str | Path) -> None:
    validate_report(report)
    # allow_nan=False guards the "all values finite" report invariant
    Path(path).write_text(
        json.dumps(report, indent=2, sort_keys=True, allow_nan=False) + "\n")


def flow_epe_per_block(flows, pair: SynthPair) -> list[float]:
    """Mean end-point error per block, both directions pooled, visible cells."""
    gt_a, mask_a, gt_b, mask_b = synth.cell_supervision(pair, stride=8)
    out = []
    for flow_a, flow_b in flows:
        errs = []
        for flow, gt, mask in ((flow_a, gt_a, mask_a), (flow_b, gt_b, mask_b)):
            if mask.any():
                diff = flow.values[..., 0:2][mask] - gt[mask]
                errs.append(np.linalg.norm(diff, axis=1))
        out.append(float(np.concatenate(errs).mean()) if errs else float("nan"))
    return out


def sigma_split(flows, pair: SynthPair) -> tuple[float, float]:
    """(mean sigma over matchable cells, over unmatchable cells), final block."""
    _, mask_a, _, mask_b = synth.cell_supervision(pair, stride=8)
    flow_a, flow_b = flows[-1]
    sig_a = flow_a.values[..., 2:4].mean(axis=-1)
    sig_b = flow_b.values[..., 2:4].mean(axis=-1)
    matchable = np.concatenate([sig_a[mask_a], sig_b[mask_b]])
    unmatchable = np.concatenate([sig_a[~mask_a], sig_b[~mask_b]])
    m = float(matchable.mean()) if matchable.size else float("nan")
    u = float(unmatchable.mean()) if unmatchable.size else float("nan")
    return m, u


def match_counts(matches: MatchSet, pair: SynthPair,
                 thresholds=THRESHOLDS_PX) -> dict:
    """Correct/predicted/recalled counts against the exact warp."""
    h, w = pair.extent
    gt_cells = synth.gt_coarse_matches(pair, stride=8)
    gt_rows = {i for i, _ in gt_cells}
    counts = {t: {"correct": 0, "recalled": set()} for t in thresholds}
    for (x_a, y_a, x_b, y_b, _), (i, _, _) in zip(matches.fine, matches.coarse):
        xi = min(max(int(round(x_a)), 0), w - 1)
        yi = min(max(int(round(y_a)), 0), h - 1)
        visible = bool(pair.vis_a[yi, xi])
        target = synth.apply_homography(pair.homography, np.array([x_a, y_a]))
        err = float(np.hypot(x_b - target[0], y_b - target[1]))
        for t in thresholds:
            if visible and err <= t:
                counts[t]["correct"] += 1
                if i in gt_rows:
                    counts[t]["recalled"].add(i)
    return {
        "n_predicted": len(matches.fine),
        "n_gt": len(gt_cells),
        "per_threshold": {
            str(t): {"correct": counts[t]["correct"],
                     "recalled": len(counts[t]["recalled"])}
            for t in thresholds},
    }


def evaluate_pairs(pairs, weights: ModelWeights, config: ModelConfig,
                   train_extent, thresholds=THRESHOLDS_PX, threads: int = 1) -> dict:
    """Aggregate evaluation over a list of pairs (micro-averaged)."""
    def run_one(pair):
        matches, enc, _ = match_pair(pair.image_a, pair.image_b, weights,
                                     config, train_extent)
        counts = match_counts(matches, pair, thresholds)
        epe = flow_epe_per_block(enc.flows, pair) if enc.flows else []
        sig = sigma_split(enc.flows, pair) if enc.flows else (float("nan"),) * 2
        return counts, epe, sig

    if threads > 1:
        from concurrent.futures import ThreadPoolExecutor
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(run_one, pairs))
    else:
        results = [run_one(p) for p in pairs]

    n_predicted = sum(r[0]["n_predicted"] for r in results)
    n_gt = sum(r[0]["n_gt"] for r in results)
    precision, recall = {}, {}
    for t in thresholds:
        correct = sum(r[0]["per_threshold"][str(t)]["correct"] for r in results)
        recalled = sum(r[0]["per_threshold"][str(t)]["recalled"] for r in results)
        precision[f"{t:g}px"] = correct / n_predicted if n_predicted else 0.0
        recall[f"{t:g}px"] = recalled / n_gt if n_gt else 0.0

    epe_lists = [r[1] for r in results if r[1]]
    per_block_epe = ([float(np.mean(col)) for col in zip(*epe_lists)]
                     if epe_lists else [])
    sig_m = [r[2][0] for r in results if np.isfinite(r[2][0])]
    sig_u = [r[2][1] for r in results if np.isfinite(r[2][1])]
    return {
        "n_pairs": len(pairs),
        "n_predicted_matches": n_predicted,
        "n_gt_matches": n_gt,
        "precision": precision,
        "recall": recall,
        "per_block_epe": per_block_epe,
        "sigma_matchable": float(np.mean(sig_m)) if sig_m else None,
        "sigma_unmatchable": float(np.mean(sig_u)) if sig_u else None,
    }


def write_eval_csv(eval_section: dict, path: str | Path) -> None:
    """Flat delimited companion to the JSON report."""
    lines = ["metric,value"]
    for key in ("n_pairs", "n_predicted_matches", "n_gt_matches"):
        lines.append(f"{key},{eval_section[key]}")
    for t, v in eval_section["precision"].items():
        lines.append(f"precision_{t},{v}")
    for t, v in eval_section["recall"].items():
        lines.append(f"recall_{t},{v}")
    for b, v in enumerate(eval_section["per_block_epe"], start=1):
        lines.append(f"epe_block_{b},{v}")
    lines.append(f"sigma_matchable,{eval_section['sigma_matchable']}")
    lines.append(f"sigma_unmatchable,{eval_section['sigma_unmatchable']}")
    Path(path).write_text("\n".join(lines) + "\n")
