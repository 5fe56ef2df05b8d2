"""SGD training and fine-tuning with a milestone learning-rate schedule."""

from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .data import Dataset, batches
from .functional import softmax_cross_entropy
from .optim import SGD
from .rng import derive_seed
from .tensor import Tensor
from .zoo import Network, evaluate_accuracy

log = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    def __init__(self, epoch: int, loss: float):
        super().__init__(f"training diverged at epoch {epoch}: loss became {loss}")
        self.epoch = epoch


@dataclass(frozen=True)
class TrainConfig:
    epochs: int
    lr0: float
    weight_decay: float = 0.005
    momentum: float = 0.9
    batch_size: int = 128
    milestones: tuple[int, ...] = ()
    decay_factor: float = 0.5
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "milestones", tuple(int(m) for m in self.milestones))
        if self.epochs < 1:
            raise ValueError(f"epochs must be >= 1, got {self.epochs}")
        if self.lr0 < 0:
            raise ValueError(f"lr0 must be >= 0, got {self.lr0}")
        if not 0 < self.decay_factor <= 1:
            raise ValueError(f"decay_factor must be in (0, 1], got {self.decay_factor}")
        ms = self.milestones
        if any(b <= a for a, b in zip(ms, ms[1:])) or any(m < 0 or m >= self.epochs for m in ms):
            raise ValueError(f"milestones must be strictly increasing and within [0, {self.epochs}), got {list(ms)}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")


# Fine-tuning protocols. ``desk`` is the scaled-down configuration used in CI.
PRESETS = {
    "cifar": TrainConfig(epochs=50, lr0=0.001, weight_decay=0.005, batch_size=128, milestones=(20, 30, 40)),
    "imagenet": TrainConfig(epochs=10, lr0=0.0001, weight_decay=0.005, batch_size=128, milestones=(5, 8)),
    "desk": TrainConfig(epochs=30, lr0=0.01, weight_decay=0.005, batch_size=32, milestones=(15, 25)),
}


def preset_config(name: str, **overrides) -> TrainConfig:
    if name not in PRESETS:
        raise KeyError(f"unknown training preset {name!r}; choose from {sorted(PRESETS)}")
    return replace(PRESETS[name], **overrides)


def lr_at_epoch(cfg: TrainConfig, epoch: int) -> float:
    """Learning rate in effect during 0-indexed ``epoch``; a decay at milestone m applies from epoch m on."""
    passed = sum(1 for m in cfg.milestones if m <= epoch)
    return cfg.lr0 * cfg.decay_factor**passed


@dataclass
class EpochStats:
    epoch: int
    lr: float
    train_loss: float
    val_acc: float


@dataclass
class TrainReport:
    epochs: list[EpochStats] = field(default_factory=list)
    initial_val_acc: float = float("nan")
    wall_time: float = 0.0

    @property
    def final_val_acc(self) -> float:
        return self.epochs[-1].val_acc if self.epochs else self.initial_val_acc

    def to_csv(self, path) -> None:
        lines = ["epoch,lr,train_loss,val_acc"]
        lines += [f"{e.epoch},{e.lr:.6g},{e.train_loss:.6g},{e.val_acc:.6g}" for e in self.epochs]
        Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8", newline="\n")


def train(net: Network, train_ds: Dataset, val_ds: Dataset, cfg: TrainConfig) -> TrainReport:
    """Train ``net`` in place; shuffling uses ``derive_seed(cfg.seed, "epoch", e)``."""
    expected = net.spec.input_shape
    for ds in (train_ds, val_ds):
        if ds.shape != expected:
            raise ValueError(f"{ds.split} images have shape {ds.shape}, network expects {expected}")
    start = time.perf_counter()
    report = TrainReport(initial_val_acc=evaluate_accuracy(net, val_ds))
    params = net.params
    opt = SGD(params, cfg.lr0, cfg.weight_decay, cfg.momentum)
    for epoch in range(cfg.epochs):
        opt.lr = lr_at_epoch(cfg, epoch)
        total, seen = 0.0, 0
        for x, y in batches(train_ds, cfg.batch_size, derive_seed(cfg.seed, "epoch", epoch)):
            loss = softmax_cross_entropy(net.forward(Tensor(x), training=True), y)
            value = loss.item()
            if not math.isfinite(value):
                raise TrainingDiverged(epoch, value)
            loss.backward()
            opt.step()
            total += value * len(y)
            seen += len(y)
        acc = evaluate_accuracy(net, val_ds)
        report.epochs.append(EpochStats(epoch, opt.lr, total / seen, acc))
        log.info("epoch %d lr %.6g loss %.4f val_acc %.4f", epoch, opt.lr, total / seen, acc)
    report.wall_time = time.perf_counter() - start
    return report


def finetune(net: Network, train_ds: Dataset, val_ds: Dataset, preset: str | TrainConfig = "desk", **overrides) -> TrainReport:
    cfg = preset if isinstance(preset, TrainConfig) else preset_config(preset, **overrides)
    return train(net, train_ds, val_ds, cfg)
