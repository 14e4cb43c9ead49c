"""Plain supervised training loops (dense pre-training and fine-tuning)."""
from __future__ import annotations

import logging
from typing import Callable

import numpy as np

from . import tensor as T
from .errors import DivergenceError
from .model import accuracy
from .optim import MomentumSGD

log = logging.getLogger(__name__)


def train_epoch(model, x, y, opt: MomentumSGD, batch_size: int, rng: np.random.Generator) -> float:
    """One pass of momentum SGD on the cross-entropy. Returns the mean batch loss."""
    order = rng.permutation(len(y))
    total, steps = 0.0, 0
    for s in range(0, len(order), batch_size):
        idx = order[s : s + batch_size]
        for p in model.params.values():
            p.zero_grad()
        loss = T.softmax_cross_entropy(model.forward(x[idx], "train"), y[idx])
        if not np.isfinite(loss.data):
            raise DivergenceError(f"training loss became {float(loss.data)} at step {steps}")
        T.backward(loss)
        opt.step(model.params, {k: p.grad for k, p in model.params.items() if p.grad is not None})
        total += float(loss.data)
        steps += 1
    return total / max(steps, 1)


def train(
    model,
    data,
    epochs: int,
    lr: float = 0.1,
    momentum: float = 0.9,
    lr_decay: float = 0.9,
    weight_decay: float = 0.0,
    batch_size: int = 128,
    rng: np.random.Generator | None = None,
    select_best: bool = False,
    on_epoch: Callable[[dict], None] | None = None,
):
    """Train for ``epochs`` with exponential lr decay per epoch.

    With ``select_best`` the weights with the highest validation accuracy seen
    (including before the first epoch) are restored at the end.
    """
    rng = np.random.default_rng(0) if rng is None else rng
    opt = MomentumSGD(lr, momentum, weight_decay)
    history = []
    best_state, best_acc = None, -1.0
    if select_best:
        best_acc = accuracy(model, data.val_x, data.val_y)
        best_state = model.state()
        history.append({"epoch": 0, "loss": float("nan"), "val_acc": best_acc, "lr": 0.0})
    for epoch in range(epochs):
        opt.lr = lr * lr_decay**epoch
        loss = train_epoch(model, data.train_x, data.train_y, opt, batch_size, rng)
        val = accuracy(model, data.val_x, data.val_y)
        row = {"epoch": epoch + 1, "loss": loss, "val_acc": val, "lr": opt.lr}
        history.append(row)
        log.info("epoch %d loss %.4f val %.2f", row["epoch"], loss, val)
        if on_epoch is not None:
            on_epoch(row)
        if select_best and val > best_acc:
            best_acc, best_state = val, model.state()
    if select_best and best_state is not None:
        model.load_state(best_state)
    return model, history


def finetune(model, data, epochs: int, lr: float = 0.01, **kwargs):
    """Gradient descent on the task loss only; best-validation weights are returned."""
    return train(model, data, epochs, lr=lr, select_best=True, **kwargs)
