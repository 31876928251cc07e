"""Adam optimization of the full matching loss over synthetic pairs.

The learning rate warms up linearly over the first epoch's steps and is
halved every `halving_period` epochs afterwards. Gradients accumulate
over the pairs of a batch (mean of per-pair losses) before each step.
"""

from __future__ import annotations

import json
import logging
import math
from pathlib import Path

import numpy as np

from .config import RunConfig
from .model import (ModelWeights, init_model_weights, named_parameters,
                    pair_losses, save_checkpoint)
from .tensor import Tensor

log = logging.getLogger(__name__)


class NumericError(RuntimeError):
    """Training produced a non-finite loss."""


class Adam:
    def __init__(self, params: dict[str, Tensor], beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.params = params
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.step_count = 0
        self.m = {k: np.zeros_like(t.data) for k, t in params.items()}
        self.v = {k: np.zeros_like(t.data) for k, t in params.items()}

    def zero_grad(self) -> None:
        for t in self.params.values():
            t.zero_grad()

    def step(self, lr: float) -> None:
        self.step_count += 1
        bc1 = 1.0 - self.beta1 ** self.step_count
        bc2 = 1.0 - self.beta2 ** self.step_count
        for name, t in self.params.items():
            if t.grad is None:
                continue
            m = self.m[name]
            v = self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * t.grad
            v *= self.beta2
            v += (1.0 - self.beta2) * t.grad ** 2
            t.data -= lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)


def learning_rate(base: float, epoch: int, step: int, steps_per_epoch: int,
                  warmup_epochs: int = 1, halving_period: int = 2) -> float:
    """Closed-form schedule: linear warmup, then halving every period."""
    if epoch < warmup_epochs:
        done = epoch * steps_per_epoch + step + 1
        return base * done / (warmup_epochs * steps_per_epoch)
    halvings = (epoch - warmup_epochs) // halving_period
    return base * 0.5 ** halvings


def train_model(pairs, run_config: RunConfig, out_dir: str | Path,
                progress: bool = True):
    """Train on synthetic pairs; returns (weights, epoch rows).

    Writes a checkpoint under out_dir/weights and aborts with a
    diagnostic dump on a non-finite loss.
    """
    run_config.validate()
    mcfg, tcfg = run_config.model, run_config.train
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    extents = {p.extent for p in pairs}
    if len(extents) != 1:
        raise ValueError(f"training pairs have mixed extents: {extents}")
    train_extent = pairs[0].extent

    rng = np.random.default_rng(np.random.SeedSequence([tcfg.seed, 0x7EA1]))
    weights = init_model_weights(rng, mcfg)
    params = named_parameters(weights)
    optimizer = Adam(params, tcfg.beta1, tcfg.beta2)
    steps_per_epoch = math.ceil(len(pairs) / tcfg.batch_size)

    epoch_rows = []
    for epoch in range(tcfg.epochs):
        order_rng = np.random.default_rng(np.random.SeedSequence([tcfg.seed, epoch]))
        order = order_rng.permutation(len(pairs))
        sums = {"loss_total": 0.0, "loss_coarse": 0.0, "loss_fine": 0.0,
                "loss_flow": 0.0}
        last_lr = 0.0
        for step in range(steps_per_epoch):
            batch_ids = order[step * tcfg.batch_size:(step + 1) * tcfg.batch_size]
            optimizer.zero_grad()
            batch_losses = []
            for pid in batch_ids:
                losses = pair_losses(pairs[pid], weights, mcfg,
                                     tcfg.flow_loss_weight, train_extent)
                total = float(losses.total.data)
                if not math.isfinite(total):
                    _dump_failure(out_dir, epoch, step, batch_ids, pairs, losses)
                    raise NumericError(
                        f"non-finite loss at epoch {epoch} step {step}; "
                        f"diagnostics in {out_dir / 'failure_dump.json'}")
                (losses.total * (1.0 / len(batch_ids))).backward()
                batch_losses.append(losses)
            last_lr = learning_rate(tcfg.learning_rate, epoch, step,
                                    steps_per_epoch, tcfg.warmup_epochs,
                                    tcfg.halving_period)
            optimizer.step(last_lr)
            for losses in batch_losses:
                sums["loss_total"] += float(losses.total.data) / len(pairs)
                sums["loss_coarse"] += float(losses.coarse.data) / len(pairs)
                sums["loss_fine"] += float(losses.fine.data) / len(pairs)
                sums["loss_flow"] += float(losses.flow.data) / len(pairs)
        row = {"epoch": epoch, "lr": last_lr, **{k: v for k, v in sums.items()}}
        epoch_rows.append(row)
        if progress:
            log.info("epoch %d lr %.2e total %.4f (coarse %.4f fine %.4f flow %.4f)",
                     epoch, row["lr"], row["loss_total"], row["loss_coarse"],
                     row["loss_fine"], row["loss_flow"])
    save_checkpoint(out_dir / "weights", weights, mcfg, train_extent)
    return weights, epoch_rows


def _dump_failure(out_dir: Path, epoch: int, step: int, batch_ids, pairs,
                  losses) -> None:
    dump = {
        "epoch": epoch,
        "step": step,
        "batch_pair_seeds": [int(pairs[i].seed) for i in batch_ids],
        "loss_coarse": repr(float(losses.coarse.data)),
        "loss_fine": repr(float(losses.fine.data)),
        "loss_flow": repr(float(losses.flow.data)),
    }
    (out_dir / "failure_dump.json").write_text(json.dumps(dump, indent=2) + "\n")
