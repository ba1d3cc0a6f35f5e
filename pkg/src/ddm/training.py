"""Minibatch training loop shared by the DDM and DPM estimators."""

from __future__ import annotations

import logging
import math
from typing import Callable

import numpy as np

from ddm.exceptions import NumericalError
from ddm.tensor import RngStream

log = logging.getLogger(__name__)


def cosine_lr(base: float, step: int, total: int, floor=0.1) -> float:
    """Cosine decay from ``base`` to ``floor * base`` over ``total`` steps."""
    if total <= 1:
        return base
    frac = min(step / (total - 1), 1.0)
    return base * (floor + (1 - floor) * 0.5 * (1 + math.cos(math.pi * frac)))


def run_training(step_fn: Callable, n_items: int, batch_size: int, max_iter: int,
                 rng: RngStream, base_lr: float, on_epoch=None):
    """Drive ``step_fn(batch_indices, step_rng, lr) -> loss`` for ``max_iter`` steps.

    Items are visited in a fresh permutation each epoch. Returns the per-step
    and per-epoch mean losses.
    """
    batch_size = max(1, min(batch_size, n_items))
    per_epoch = math.ceil(n_items / batch_size)
    step_losses, epoch_losses, current = [], [], []
    step = 0
    epoch = 0
    while step < max_iter:
        perm = rng.child(f"epoch{epoch}").generator.permutation(n_items)
        for b in range(per_epoch):
            if step >= max_iter:
                break
            idx = perm[b * batch_size:(b + 1) * batch_size]
            loss = float(step_fn(idx, rng.child(f"step{step}"), cosine_lr(base_lr, step, max_iter)))
            if not np.isfinite(loss):
                raise NumericalError(f"non-finite loss {loss} at step {step}")
            step_losses.append(loss)
            current.append(loss)
            step += 1
        epoch_losses.append(float(np.mean(current)))
        if on_epoch is not None:
            on_epoch(epoch, epoch_losses[-1])
        log.debug("epoch %d loss %.6g", epoch, epoch_losses[-1])
        current = []
        epoch += 1
    return np.array(step_losses), np.array(epoch_losses)
