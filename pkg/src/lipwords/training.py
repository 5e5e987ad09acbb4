"""Loss, optimizer, schedule, early stopping, and the staged protocol.

Training follows plain SGD with momentum 0.9 and a learning rate that
decays geometrically ("on log scale") from its initial to its final
value over the configured epoch budget.  A run stops early once the
validation top-1 has not improved for more than three epochs.

The staged protocol trains in three steps: a temporal-convolution
back-end first, then a Bi-LSTM back-end for exactly five epochs with
the frontend+core frozen, then the whole network end-to-end.
"""

from __future__ import annotations

import csv
import math
import time
from dataclasses import dataclass, field, replace

import numpy as np

from .tensor import ConfigError, ContractError, NumericError, Tape, backward
from . import ops
from .checkpoint import load_partial, save_checkpoint
from .data import AugmentSpec, load_batches
from .networks import build_variant

LOSS_MODES = ("every_step", "last_step")


def _step_loss(logits, labels):
    """Mean over the batch of -log softmax(logits)[label]."""
    picked = ops.pick_class(ops.log_softmax(logits, axis=-1), labels)
    return -picked.mean()


def aggregated_loss(logits, labels, mode="every_step"):
    """Word-classification loss for [T, N, V] or [N, V] logits.

    The label is repeated at every timestep: every_step sums the
    per-timestep losses over T (each a batch mean), last_step keeps only
    the final timestep.  A single [N, V] logit vector is used as is.
    The temporal sum accumulates in time order so that the every_step
    value equals the running sum of per-timestep last_step values
    exactly, not just approximately.
    """
    if mode not in LOSS_MODES:
        raise ConfigError(f"unknown loss mode {mode!r}")
    labels = np.asarray(labels)
    vocab = logits.shape[-1]
    if labels.min() < 0 or labels.max() >= vocab:
        raise ContractError(f"label out of range [0, {vocab})")
    if logits.ndim == 2:
        return _step_loss(logits, labels)
    if logits.ndim != 3:
        raise ContractError(f"loss expects [T, N, V] or [N, V], got {tuple(logits.shape)}")
    t_len, n, _ = logits.shape
    if mode == "last_step":
        return _step_loss(logits.narrow(0, t_len - 1, 1).reshape((n, vocab)), labels)
    picked = ops.pick_class(ops.log_softmax(logits, axis=-1), labels)  # [T, N]
    per_t = -picked.mean(axis=1)  # [T]
    total = per_t.narrow(0, 0, 1).reshape(())
    for t in range(1, t_len):
        total = total + per_t.narrow(0, t, 1).reshape(())
    return total


class SgdMomentum:
    """Classical momentum: v <- 0.9 v + g; p <- p - lr v.

    Parameters without requires_grad (frozen) or without a gradient are
    left untouched.  Velocity buffers are keyed by parameter name, so
    iteration and update order are fixed by the parameter dict.
    """

    def __init__(self, momentum=0.9):
        if not 0.0 <= momentum < 1.0:
            raise ConfigError("momentum must be in [0, 1)")
        self.momentum = momentum
        self.velocities = {}

    def step(self, params, lr):
        if lr <= 0:
            raise ContractError("learning rate must be positive")
        for name, p in params.items():
            if not p.requires_grad or p.grad is None:
                continue
            if p.grad.shape != p.data.shape:
                raise ContractError(f"gradient shape mismatch for {name}")
            v = self.velocities.get(name)
            if v is None:
                v = np.zeros_like(p.data)
                self.velocities[name] = v
            v *= self.momentum
            v += p.grad
            p.data -= lr * v


@dataclass(frozen=True)
class LrSchedule:
    """Geometric interpolation from initial to final over ``epochs``."""

    initial: float = 5e-3
    final: float = 5e-5
    epochs: int = 20

    def __post_init__(self):
        if not self.initial >= self.final > 0:
            raise ConfigError("need lr initial >= final > 0")
        if self.epochs < 2 and self.initial != self.final:
            raise ConfigError("a decaying schedule needs at least 2 epochs")

    def at(self, epoch):
        if not 0 <= epoch < self.epochs:
            raise ContractError(f"epoch {epoch} outside schedule of {self.epochs}")
        if self.initial == self.final:
            return self.initial
        frac = epoch / (self.epochs - 1)
        return self.initial * (self.final / self.initial) ** frac


TCONV_SCHEDULE = LrSchedule(5e-3, 5e-5)
BILSTM_SCHEDULE = LrSchedule(5e-4, 5e-5)


class EarlyStop:
    """Stop once validation top-1 has not strictly improved for more
    than ``patience`` epochs (ties are non-improvements)."""

    def __init__(self, patience=3):
        self.patience = patience
        self.best = -math.inf
        self.stale = 0

    def update(self, val_top1):
        if not 0.0 <= val_top1 <= 1.0:
            raise ContractError("validation top-1 must be in [0, 1]")
        if val_top1 > self.best:
            self.best = val_top1
            self.stale = 0
        else:
            self.stale += 1
        return self.stale <= self.patience  # True = keep training


def train_batch(net, clips, labels, optimizer, lr, loss_mode="every_step"):
    """One forward/backward/update step; returns the batch loss."""
    params = net.named_parameters()
    for p in params.values():
        p.grad = None
    with Tape() as tape:
        logits = net.forward(clips)
        loss = aggregated_loss(logits, labels, loss_mode)
    if not np.isfinite(loss.item()):
        raise NumericError(f"non-finite training loss on variant {net.variant}")
    backward(loss, tape)
    optimizer.step(params, lr)
    return loss.item()


def train_epoch(net, dataset, optimizer, lr, epoch_seed, batch_size=16,
                loss_mode="every_step", augment=None):
    """One shuffled, augmented pass over the train split; mean batch loss."""
    if batch_size < 2:
        raise ConfigError("batch size must be >= 2 (train-mode batch norm)")
    net.set_training(True)
    rng = np.random.default_rng(epoch_seed)
    spec = augment or AugmentSpec()
    losses = []
    for clips, labels in load_batches(dataset, "train", batch_size, rng=rng, augment_spec=spec):
        losses.append(train_batch(net, clips, labels, optimizer, lr, loss_mode))
    net.set_training(False)
    if not losses:
        raise ConfigError("train split produced no batches")
    return float(np.mean(losses))


def evaluate_topk(net, dataset, split, batch_size=16, ks=(1, 5, 10)):
    """Eval-mode top-k accuracies on a split; no augmentation."""
    from .evaluate import score_clips, topn  # local import: evaluate builds on networks

    if not dataset.manifest.splits.get(split):
        raise ConfigError(f"split {split!r} is empty")
    scores = score_clips(net, dataset, split, batch_size=batch_size)
    return {k: topn(scores, k) for k in ks}


@dataclass
class EpochLog:
    epoch: int
    stage: int
    lr: float
    train_loss: float
    val_top1: float
    val_top5: float
    val_top10: float
    seconds: float

    FIELDS = ("epoch", "stage", "lr", "train_loss", "val_top1", "val_top5",
              "val_top10", "seconds")

    def row(self):
        return [getattr(self, f) for f in self.FIELDS]


def write_log(path, rows):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(EpochLog.FIELDS)
        for r in rows:
            writer.writerow(r.row())


def _snapshot(net):
    return ({name: p.data.copy() for name, p in net.named_parameters().items()},
            {name: b.copy() for name, b in net.named_buffers().items()})


def _restore(net, snap):
    params, buffers = snap
    for name, p in net.named_parameters().items():
        p.data = params[name].copy()
    owners = net.buffer_owners()
    for name, arr in buffers.items():
        owner, attr = owners[name]
        setattr(owner, attr, arr.copy())


def run_training(net, dataset, schedule, seed, stage=1, batch_size=16,
                 loss_mode="every_step", max_epochs=None, patience=3,
                 fixed_epochs=None, log_rows=None):
    """Epoch loop with early stopping; returns (best_val_top1, rows).

    Early-stopped runs end restored to their best-validation state (the
    point of stopping on a stale metric).  ``fixed_epochs`` disables
    early stopping, runs exactly that many epochs and keeps the final
    state (the frozen Bi-LSTM warm-up stage).  The schedule keeps its
    own epoch budget even when stopping fires sooner.
    """
    optimizer = SgdMomentum()
    stopper = EarlyStop(patience=patience)
    rows = log_rows if log_rows is not None else []
    epochs = fixed_epochs if fixed_epochs is not None else (max_epochs or schedule.epochs)
    best = -1.0
    best_state = None
    for epoch in range(epochs):
        started = time.monotonic()
        lr = schedule.at(min(epoch, schedule.epochs - 1))
        seq = np.random.SeedSequence([seed, stage, epoch])
        loss = train_epoch(net, dataset, optimizer, lr, seq, batch_size=batch_size,
                           loss_mode=loss_mode)
        tops = evaluate_topk(net, dataset, "val", batch_size=batch_size)
        rows.append(EpochLog(epoch, stage, lr, loss, tops[1], tops[5], tops[10],
                             time.monotonic() - started))
        if tops[1] > best:
            best = tops[1]
            if fixed_epochs is None:
                best_state = _snapshot(net)
        if fixed_epochs is None and not stopper.update(tops[1]):
            break
    if best_state is not None:
        _restore(net, best_state)
    return best, rows


@dataclass(frozen=True)
class StagePlan:
    """The three-step protocol and its knobs."""

    stage1_variant: str = "N2"
    bilstm_layers: int = 2
    final_merge: str = "concat"  # "add" -> N6, "concat" -> N7
    stage1_schedule: LrSchedule = field(default_factory=lambda: TCONV_SCHEDULE)
    stage2_schedule: LrSchedule = field(default_factory=lambda: replace(BILSTM_SCHEDULE, epochs=5))
    stage3_schedule: LrSchedule = field(default_factory=lambda: BILSTM_SCHEDULE)
    stage2_epochs: int = 5
    batch_size: int = 16
    loss_mode: str = "every_step"
    patience: int = 3

    def stage2_variant(self):
        return "N4" if self.bilstm_layers == 1 else "N5"

    def stage3_variant(self):
        return "N6" if self.final_merge == "add" else "N7"


@dataclass
class StagedResult:
    checkpoints: dict
    val_top1: dict
    log: list


def staged_train(dataset, cfg, out_dir, plan=None, seed=0, log_path=None):
    """Run the three stages, checkpointing after each.

    Stage 1 trains the temporal-conv variant to early stop.  Stage 2
    builds the Bi-LSTM variant, restores the stage-1 frontend+core,
    keeps them frozen and trains exactly five epochs.  Stage 3 unfreezes
    everything and fine-tunes end-to-end to early stop.
    """
    import os

    plan = plan or StagePlan()
    if plan.stage1_variant not in ("N1", "N2", "N3"):
        raise ConfigError("stage 1 needs a temporal-conv variant (N1, N2 or N3)")
    os.makedirs(out_dir, exist_ok=True)
    rows = []
    checkpoints, val_top1 = {}, {}

    net1 = build_variant(plan.stage1_variant, cfg, seed=seed)
    best1, _ = run_training(net1, dataset, plan.stage1_schedule, seed, stage=1,
                            batch_size=plan.batch_size, loss_mode=plan.loss_mode,
                            patience=plan.patience, log_rows=rows)
    path1 = os.path.join(out_dir, f"stage1_{plan.stage1_variant}.ckpt")
    save_checkpoint(net1, path1, meta={"stage": 1, "best_val_top1": best1})
    checkpoints[1], val_top1[1] = path1, best1

    v2 = plan.stage2_variant()
    net2 = build_variant(v2, cfg, seed=seed + 1)
    load_partial(path1, net2)  # trunk weights in, back-end fresh
    best2, _ = run_training(net2, dataset, plan.stage2_schedule, seed, stage=2,
                            batch_size=plan.batch_size, loss_mode=plan.loss_mode,
                            fixed_epochs=plan.stage2_epochs, log_rows=rows)
    path2 = os.path.join(out_dir, f"stage2_{v2}.ckpt")
    save_checkpoint(net2, path2, meta={"stage": 2, "best_val_top1": best2})
    checkpoints[2], val_top1[2] = path2, best2

    v3 = plan.stage3_variant()
    net3 = build_variant(v3, cfg, seed=seed + 2)
    load_partial(path2, net3)  # all blobs for N6; N7 re-initializes its classifier
    net3.freeze_trunk(False)
    best3, _ = run_training(net3, dataset, plan.stage3_schedule, seed, stage=3,
                            batch_size=plan.batch_size, loss_mode=plan.loss_mode,
                            patience=plan.patience, log_rows=rows)
    path3 = os.path.join(out_dir, f"stage3_{v3}.ckpt")
    save_checkpoint(net3, path3, meta={"stage": 3, "best_val_top1": best3})
    checkpoints[3], val_top1[3] = path3, best3

    if log_path:
        write_log(log_path, rows)
    return StagedResult(checkpoints=checkpoints, val_top1=val_top1, log=rows)
