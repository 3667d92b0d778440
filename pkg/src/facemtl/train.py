"""Adam optimizer and the end-to-end training loop.

Defaults follow the training recipe: Adam, batch size 32, learning rate
0.001, 40 epochs. The loop is deterministic given the config seed; each
epoch draws its own shuffle stream from (seed, epoch).
"""

from __future__ import annotations

import csv
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Mapping

import numpy as np

from .data import Dataset, batch_iter
from .losses import LossBreakdown, multitask_loss
from .models import ModelSpec, ParamStore, forward
from .tensor import Tensor, gradients

__all__ = [
    "AdamState",
    "TrainConfig",
    "EpochStats",
    "NonFiniteLossError",
    "adam_step",
    "train",
    "write_training_log",
    "TRAINING_LOG_FIELDS",
]

log = logging.getLogger("facemtl.train")

TRAINING_LOG_FIELDS = ("epoch", "total", "age_l1", "gender_bce", "ethnicity_cce",
                       "soft_penalty", "seconds")


class NonFiniteLossError(RuntimeError):
    """Training produced a NaN/inf loss; carries the failing step index."""

    def __init__(self, step: int, value: float):
        super().__init__(f"non-finite loss {value} at step {step}")
        self.step = step


@dataclass
class AdamState:
    """Per-parameter first/second moments plus the shared step counter."""

    lr: float = 0.001
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(params: ParamStore, grads: Mapping[str, Tensor], state: AdamState) -> tuple[ParamStore, AdamState]:
    """One bias-corrected Adam update, in place.

    ``grads`` may cover a subset of the parameters; parameters without a
    gradient are left untouched (their moments do not decay either).
    """
    state.t += 1
    t = state.t
    for name, g in grads.items():
        p = params[name]
        gd = g.data if isinstance(g, Tensor) else np.asarray(g)
        if gd.shape != p.shape:
            raise ValueError(f"gradient shape {gd.shape} does not match parameter {name!r} {p.shape}")
        if name not in state.m:
            state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        m, v = state.m[name], state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * gd
        v *= state.beta2
        v += (1.0 - state.beta2) * gd * gd
        m_hat = m / (1.0 - state.beta1 ** t)
        v_hat = v / (1.0 - state.beta2 ** t)
        p.data -= (state.lr * m_hat / (np.sqrt(v_hat) + state.eps)).astype(p.dtype)
    return params, state


@dataclass
class TrainConfig:
    batch_size: int = 32
    epochs: int = 40
    lr: float = 0.001
    seed: int = 0
    soft_lambda: float = 1e-3
    checkpoint_every: int = 0  # epochs between periodic checkpoints; 0 = off
    shuffle: bool = True

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if self.soft_lambda < 0:
            raise ValueError("soft_lambda must be >= 0")


@dataclass
class EpochStats:
    epoch: int
    total: float
    age_l1: float
    gender_bce: float
    ethnicity_cce: float
    soft_penalty: float
    seconds: float

    def as_row(self) -> list:
        return [self.epoch, self.total, self.age_l1, self.gender_bce,
                self.ethnicity_cce, self.soft_penalty, self.seconds]


def train(
    params: ParamStore,
    spec: ModelSpec,
    dataset: Dataset,
    cfg: TrainConfig,
    on_epoch: Callable[[int, ParamStore], None] | None = None,
) -> tuple[list[EpochStats], ParamStore]:
    """Train in place for ``cfg.epochs`` epochs and return the per-epoch log.

    Every sample is visited exactly once per epoch (last partial batch
    kept). ``on_epoch`` runs after each epoch's log row is recorded, for
    validation or checkpoint hooks.
    """
    if len(dataset) == 0:
        raise ValueError("train: dataset is empty")
    state = AdamState(lr=cfg.lr)
    history: list[EpochStats] = []
    step = 0
    for epoch in range(1, cfg.epochs + 1):
        started = time.perf_counter()
        sums = np.zeros(5)
        batches = 0
        for images, labels in batch_iter(dataset, cfg.batch_size,
                                         seed=(cfg.seed, epoch), shuffle=cfg.shuffle):
            breakdown = _step(params, spec, images, labels, cfg, state, step)
            vals = breakdown.as_floats()
            sums += [vals["total"], vals["age_l1"], vals["gender_bce"],
                     vals["ethnicity_cce"], vals["soft_penalty"]]
            batches += 1
            step += 1
        avg = sums / batches
        stats = EpochStats(epoch, *avg, seconds=time.perf_counter() - started)
        history.append(stats)
        log.info("epoch %d: total=%.4f age_l1=%.3f gender_bce=%.4f ethnicity_cce=%.4f",
                 epoch, stats.total, stats.age_l1, stats.gender_bce, stats.ethnicity_cce)
        if on_epoch is not None:
            on_epoch(epoch, params)
    return history, params


def _step(params, spec, images, labels, cfg, state, step) -> LossBreakdown:
    pred = forward(params, spec, images)
    breakdown = multitask_loss(pred, labels, spec, params=params, soft_lambda=cfg.soft_lambda)
    total = breakdown.total.item()
    if not np.isfinite(total):
        raise NonFiniteLossError(step, total)
    grads = gradients(breakdown.total, dict(params.items()))
    adam_step(params, grads, state)
    return breakdown


def write_training_log(history: list[EpochStats], path: str | Path) -> None:
    """CSV log: epoch,total,age_l1,gender_bce,ethnicity_cce,soft_penalty,seconds."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(TRAINING_LOG_FIELDS)
        for stats in history:
            writer.writerow(stats.as_row())
