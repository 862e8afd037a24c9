"""Optimizer, learning-rate schedule, and the shared epoch loop."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Iterable

import numpy as np

from .diffcore import Graph
from .model import CRITERIA, Checkpoint, ModelParams


class TrainingDiverged(RuntimeError):
    pass


class AdamW:
    """Adam with decoupled weight decay applied to every array."""

    def __init__(self, arrays, weight_decay=1e-4, betas=(0.9, 0.999), eps=1e-8):
        self.weight_decay = weight_decay
        self.b1, self.b2 = betas
        self.eps = eps
        self.m = [np.zeros_like(a) for a in arrays]
        self.v = [np.zeros_like(a) for a in arrays]
        self.t = 0

    def step(self, arrays: list[np.ndarray], grads: list[np.ndarray], lr: float) -> list[np.ndarray]:
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        out = []
        for i, (p, g) in enumerate(zip(arrays, grads)):
            self.m[i] = self.b1 * self.m[i] + (1 - self.b1) * g
            self.v[i] = self.b2 * self.v[i] + (1 - self.b2) * g * g
            update = (self.m[i] / c1) / (np.sqrt(self.v[i] / c2) + self.eps)
            out.append(p - lr * (update + self.weight_decay * p))
        return out


def noam_lr(step: int, base_lr: float, warmup: int) -> float:
    """Linear warmup to ``base_lr`` at ``warmup`` steps, then inverse-sqrt decay."""
    step = max(step, 1)
    warmup = max(warmup, 1)
    return base_lr * min(step / warmup, math.sqrt(warmup / step))


def scaled_warmup(ref_steps: int, ref_size: int, n_train: int) -> int:
    return max(1, int(round(ref_steps * n_train / ref_size)))


@dataclass
class EpochStats:
    epoch: int
    train_loss: float
    val_loss: float
    val_balanced_accuracy: float
    extra: dict = field(default_factory=dict)

    def row(self) -> dict:
        return {"epoch": self.epoch, "train_loss": self.train_loss, "val_loss": self.val_loss,
                "val_balanced_accuracy": self.val_balanced_accuracy, **self.extra}


class CheckpointTracker:
    """Keeps the best snapshot per criterion; picks the final one by val accuracy."""

    def __init__(self):
        self.best: dict[str, Checkpoint] = {}
        self.val_acc: dict[str, float] = {}

    def update(self, params: ModelParams, stats: EpochStats) -> None:
        values = {
            "best_train_loss": (stats.train_loss, False),
            "best_val_loss": (stats.val_loss, False),
            "best_val_balanced_accuracy": (stats.val_balanced_accuracy, True),
        }
        for crit, (value, maximize) in values.items():
            cur = self.best.get(crit)
            better = cur is None or (value > cur.metric if maximize else value < cur.metric)
            if better:
                self.best[crit] = Checkpoint(params.copy(), crit, stats.epoch, float(value))
                self.val_acc[crit] = stats.val_balanced_accuracy

    def select(self) -> Checkpoint:
        """Max validation balanced accuracy across the three; earliest epoch on ties."""
        if not self.best:
            raise RuntimeError("no checkpoints recorded")
        crit = min(CRITERIA, key=lambda c: (-self.val_acc[c], self.best[c].epoch, CRITERIA.index(c)))
        return self.best[crit]

    def summary(self) -> dict:
        return {c: {"epoch": ck.epoch, "metric": ck.metric, "val_balanced_accuracy": self.val_acc[c]}
                for c, ck in self.best.items()}


StepFn = Callable[[Graph, list, ModelParams, object, int], object]


def run_epochs(
    params: ModelParams,
    *,
    epochs: int,
    lr_at: Callable[[int], float],
    weight_decay: float,
    batches: Callable[[int], Iterable],
    step_loss: StepFn,
    evaluate: Callable[[ModelParams, int, float], EpochStats],
    track_from: int = 0,
    on_epoch_end: Callable[[ModelParams, EpochStats], None] | None = None,
):
    """Generic loop. ``batches(epoch)`` yields batch specs; ``step_loss`` builds a loss node.

    Checkpoints are tracked only from epoch ``track_from`` on.
    Returns ``(final params, tracker, history)``.
    """
    arrays = params.arrays()
    opt = AdamW(arrays, weight_decay=weight_decay)
    tracker = CheckpointTracker()
    history: list[EpochStats] = []
    step = 0
    for epoch in range(epochs):
        losses = []
        for batch in batches(epoch):
            step += 1
            g = Graph()
            nodes = [g.param(a) for a in arrays]
            loss = step_loss(g, nodes, params, batch, epoch)
            value = float(loss.value)
            if not np.isfinite(value):
                raise TrainingDiverged(f"non-finite loss {value} at epoch {epoch}, step {step}")
            grads = g.backward(loss)
            arrays = opt.step(arrays, [grads[n.id] for n in nodes], lr_at(step))
            params = params.with_arrays(arrays)
            losses.append(value)
        stats = evaluate(params, epoch, float(np.mean(losses)))
        history.append(stats)
        if on_epoch_end is not None:
            on_epoch_end(params, stats)
        if epoch >= track_from:
            tracker.update(params, stats)
    return params, tracker, history
