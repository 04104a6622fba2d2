"""Mini-batch training of a cascade with the summed multi-exit loss."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .cascade import CascadeConfig, CascadeParams, infer_all_exits, init_cascade, parameters, train_step
from .data import DatasetHandle, augment
from .optim import Adam

log = logging.getLogger(__name__)


@dataclass
class EpochRecord:
    epoch: int
    mean_loss: float
    exit_accuracy: list[float] = field(default_factory=list)  # on the monitor split, if any


def exit_accuracies(params: CascadeParams, config: CascadeConfig, ds: DatasetHandle) -> list[float]:
    probs = infer_all_exits(ds.images, params, config).probs
    return [float((probs[:, i].argmax(axis=1) == ds.labels).mean()) for i in range(config.num_stages)]


def train_cascade(
    config: CascadeConfig,
    train: DatasetHandle,
    *,
    seed: int,
    epochs: int = 3,
    batch: int = 128,
    lr: float = 1e-3,
    augment_policy: str = "none",
    monitor: DatasetHandle | None = None,
    on_epoch: Callable[[EpochRecord], None] | None = None,
) -> tuple[CascadeParams, list[EpochRecord]]:
    """Adam with a cosine learning-rate decay over all steps.

    Shuffling and augmentation draw from streams derived from ``seed``, so
    a run is reproducible end to end.
    """
    params = init_cascade(config, seed)
    n = len(train)
    steps_per_epoch = -(-n // batch)
    opt = Adam(parameters(params), lr=lr, total_steps=epochs * steps_per_epoch)
    history = []
    for epoch in range(epochs):
        order = np.random.default_rng([seed, 1000, epoch]).permutation(n)
        losses = []
        for b in range(steps_per_epoch):
            idx = order[b * batch : (b + 1) * batch]
            images = augment(train.images[idx], augment_policy, [seed, 2000, epoch, b])
            losses.append(train_step(images, train.labels[idx], params, config, opt))
        rec = EpochRecord(epoch + 1, float(np.mean(losses)))
        if monitor is not None and len(monitor):
            rec.exit_accuracy = exit_accuracies(params, config, monitor)
        log.info(
            "epoch %d loss %.4f exit acc %s",
            rec.epoch,
            rec.mean_loss,
            " ".join(f"{a:.4f}" for a in rec.exit_accuracy) or "-",
        )
        history.append(rec)
        if on_epoch is not None:
            on_epoch(rec)
    return params, history
