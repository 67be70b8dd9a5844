"""Minibatch training loop shared by the three networks."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from . import nn
from .tensor import Tensor

log = logging.getLogger(__name__)


@dataclass
class TrainRecipe:
    lr: float = 0.001
    momentum: float = 0.9
    weight_decay: float = 0.0005
    batch_size: int = 32
    epochs: int = 30
    patience: int = 5
    min_delta: float = 1e-4
    max_drops: int = 3
    clip_norm: Optional[float] = None
    seed: int = 0


@dataclass
class History:
    losses: list = field(default_factory=list)  # mean training loss per epoch
    monitor: list = field(default_factory=list)  # value fed to the schedule
    lrs: list = field(default_factory=list)
    first_batch_loss: float = float("nan")
    last_batch_loss: float = float("nan")
    # whole-set loss before and after training, filled by trainers that measure it
    initial_loss: float = float("nan")
    final_loss: float = float("nan")
    stopped_early: bool = False


def fit(model: nn.Module, x: np.ndarray, y, loss_fn: Callable[[nn.Module, Tensor, object], Tensor],
        recipe: TrainRecipe, monitor: Optional[Callable[[], float]] = None,
        on_epoch: Optional[Callable[[int, History], None]] = None) -> History:
    """Momentum SGD over shuffled minibatches with a plateau schedule.

    ``y`` is anything indexable by an integer array (an ndarray or a list
    wrapper). ``monitor`` returns a value to minimise after each epoch; the
    mean training loss is used when it is None.
    """
    rng = np.random.default_rng([recipe.seed, 17])
    scales = model.lr_scales() if hasattr(model, "lr_scales") else None
    opt = nn.SGD(model.parameters(), recipe.lr, recipe.momentum, recipe.weight_decay,
                 recipe.clip_norm, scales)
    sched = nn.PlateauSchedule(opt, recipe.patience, recipe.min_delta, recipe.max_drops)
    hist = History()
    n = len(x)
    for epoch in range(recipe.epochs):
        model.train()
        order = rng.permutation(n)
        total, count = 0.0, 0
        for start in range(0, n, recipe.batch_size):
            idx = order[start:start + recipe.batch_size]
            opt.zero_grad()
            loss = loss_fn(model, Tensor(x[idx]), _take(y, idx))
            loss.backward()
            opt.step()
            value = float(loss.data)
            if not np.isfinite(value):
                raise FloatingPointError(f"loss became {value} at epoch {epoch}")
            if epoch == 0 and start == 0:
                hist.first_batch_loss = value
            hist.last_batch_loss = value
            total += value * len(idx)
            count += len(idx)
        hist.losses.append(total / count)
        hist.lrs.append(opt.lr)
        model.eval()
        m = monitor() if monitor is not None else hist.losses[-1]
        hist.monitor.append(m)
        log.info("epoch %d loss %.6f monitor %.6f lr %.2e", epoch, hist.losses[-1], m, opt.lr)
        if on_epoch is not None:
            on_epoch(epoch, hist)
        sched.update(m)
        if sched.stop:
            hist.stopped_early = True
            break
    model.eval()
    return hist


def _take(y, idx):
    if isinstance(y, np.ndarray):
        return y[idx]
    return [y[i] for i in idx]
