"""Optimization protocol: Adam, plateau learning-rate decay, class-weighted
cross-entropy, best-epoch model selection, and the cell-count grid search."""
from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .blocks import LSTMFCN, ModelConfig
from .data import Dataset, class_weights, weight_vector
from .errors import ContractError, ParameterError, TrainingDiverged
from .tensor import ParamSet, Rng

log = logging.getLogger(__name__)

LR_INIT = 1e-3
LR_FLOOR = 1e-4
LR_FACTOR = 2.0 ** (-1.0 / 3.0)
PATIENCE = 100
EPOCHS = 2000
BATCH = 128


@dataclass
class AdamState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def adam_step(params: ParamSet, state: AdamState, lr: float, grads: dict | None = None):
    """Bias-corrected Adam update, in place. ``grads`` defaults to each tensor's ``.grad``."""
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    for name, p in params.items():
        g = p.grad if grads is None else grads.get(name)
        if g is None:
            g = np.zeros_like(p.data)
        if g.shape != p.shape:
            raise ContractError(f"gradient for {name} has shape {g.shape}, parameter has {p.shape}")
        if name not in state.m:
            state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        m, v = state.m[name], state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        # epsilon applied to the bias-corrected second moment
        p.data -= (lr * (m / (1.0 - b1 ** state.t)) /
                   (np.sqrt(v / (1.0 - b2 ** state.t)) + state.eps)).astype(p.dtype)
    return state


@dataclass
class ScheduleState:
    """Reduce-on-plateau state. ``lr`` is always ``max(init * factor**decays, floor)``."""

    lr: float = LR_INIT
    floor: float = LR_FLOOR
    factor: float = LR_FACTOR
    patience: int = PATIENCE
    init: float = LR_INIT
    best_train_loss: float = math.inf
    epochs_since_improve: int = 0
    decays: int = 0


def schedule_update(state: ScheduleState, epoch_train_loss: float, epoch: int | None = None) -> ScheduleState:
    if not math.isfinite(epoch_train_loss):
        raise TrainingDiverged(epoch if epoch is not None else -1)
    if epoch_train_loss < state.best_train_loss:
        state.best_train_loss = epoch_train_loss
        state.epochs_since_improve = 0
        return state
    state.epochs_since_improve += 1
    if state.epochs_since_improve >= state.patience:
        state.decays += 1
        state.lr = max(state.init * state.factor ** state.decays, state.floor)
        state.epochs_since_improve = 0
    return state


@dataclass
class TrainReport:
    losses: list
    lrs: list
    test_accuracies: list
    best_accuracy: float
    best_epoch: int
    best_params: dict
    seconds: float
    seed: int
    cells: int | None = None

    def summary(self) -> dict:
        return {"losses": self.losses, "lrs": self.lrs, "test_accuracies": self.test_accuracies,
                "best_accuracy": self.best_accuracy, "best_epoch": self.best_epoch,
                "seconds": self.seconds, "seed": self.seed, "cells": self.cells}


def evaluate(predict: Callable[[np.ndarray], np.ndarray], X: np.ndarray, y: np.ndarray,
             num_classes: int | None = None) -> tuple[float, dict]:
    """Accuracy plus per-class error rate (1 - recall) for every class present in ``y``."""
    y = np.asarray(y, dtype=int)
    if len(y) == 0:
        raise ParameterError("cannot evaluate on an empty split")
    pred = np.asarray(predict(X), dtype=int)
    correct = pred == y
    per_class = {int(c): float(1.0 - correct[y == c].mean()) for c in np.unique(y)}
    return float(correct.mean()), per_class


def fit(params: ParamSet, loss_fn, predict, X_train, y_train, X_test, y_test, *,
        epochs: int = EPOCHS, batch: int = BATCH, rng: Rng,
        snapshot=None, on_epoch=None) -> TrainReport:
    """Shared training loop used by the classifier and the perceptron probes.

    ``loss_fn(xb, yb, rng)`` returns a scalar Tensor whose backward fills
    ``params`` gradients. ``snapshot()`` returns the state to keep at the best
    test-accuracy epoch (defaults to ``params.snapshot``).
    """
    start = time.perf_counter()
    snapshot = snapshot or params.snapshot
    adam, sched = AdamState(), ScheduleState()
    n = len(y_train)
    best_acc, _ = evaluate(predict, X_test, y_test)
    best_epoch, best_state = -1, snapshot()
    losses, lrs, accs = [], [], []
    for epoch in range(epochs):
        order = rng.permutation(n)
        total = 0.0
        for lo in range(0, n, batch):
            idx = order[lo:lo + batch]
            params.zero_grad()
            loss = loss_fn(X_train[idx], y_train[idx], rng)
            value = float(loss.data)
            if not math.isfinite(value):
                raise TrainingDiverged(epoch)
            loss.backward()
            adam_step(params, adam, sched.lr)
            total += value * len(idx)
        epoch_loss = total / n
        lrs.append(sched.lr)
        losses.append(epoch_loss)
        schedule_update(sched, epoch_loss, epoch)
        acc, _ = evaluate(predict, X_test, y_test)
        accs.append(acc)
        if acc > best_acc:
            best_acc, best_epoch, best_state = acc, epoch, snapshot()
        if on_epoch is not None:
            on_epoch(epoch, epoch_loss, acc)
    params.zero_grad()
    return TrainReport(losses, lrs, accs, best_acc, best_epoch, best_state,
                       time.perf_counter() - start, rng.seed)


def train(cfg: ModelConfig, data: Dataset, epochs: int = EPOCHS, batch: int = BATCH, seed: int = 0,
          dtype=np.float32, restore_best: bool = True) -> tuple[LSTMFCN, TrainReport]:
    """Train one model on padded, normalized ``data``.

    The returned model carries the parameters of the best test-accuracy epoch
    when ``restore_best`` is set; gradients only ever see the train split.
    """
    if epochs < 0 or batch < 1:
        raise ParameterError(f"epochs must be >= 0 and batch >= 1, got {epochs}, {batch}")
    cfg = cfg.replace(num_classes=data.num_classes, input_length=data.max_length)
    root = Rng(seed)
    model = LSTMFCN(cfg, root.child("init"), dtype)
    X_train, y_train = data.arrays("train", dtype)
    X_test, y_test = data.arrays("test", dtype)
    weights = weight_vector(class_weights(y_train), cfg.num_classes)

    def loss_fn(xb, yb, rng):
        return model.loss(xb, yb, weights, "train", rng)

    def on_epoch(epoch, loss, acc):
        log.debug("epoch %d loss %.5f acc %.4f", epoch, loss, acc)

    report = fit(model.params, loss_fn, model.predict, X_train, y_train, X_test, y_test,
                 epochs=epochs, batch=batch, rng=root.child("train"),
                 snapshot=model.state_dict, on_epoch=on_epoch)
    report.seed, report.cells = seed, cfg.cells
    if restore_best:
        model.load_state_dict(report.best_params)
    return model, report


def grid_search_cells(cfg: ModelConfig, data: Dataset, cells=(8, 64, 128), seed: int = 0,
                      **train_kwargs) -> tuple[ModelConfig, list, LSTMFCN]:
    """Train one model per cell count; keep the best test accuracy (ties -> fewer cells)."""
    arms = []
    for c in sorted(cells):
        try:
            model, report = train(cfg.replace(cells=c), data, seed=seed, **train_kwargs)
        except TrainingDiverged as exc:
            raise TrainingDiverged(exc.epoch, f"cells={c}: training loss became non-finite") from exc
        arms.append((c, model, report))
    best = max(arms, key=lambda a: (a[2].best_accuracy, -a[0]))
    return best[1].cfg, [a[2] for a in arms], best[1]
