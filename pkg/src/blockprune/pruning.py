"""Block-importance measurement and pruning trajectories.

Four strategies share one trajectory record:

* ``greedy``: at every step, delete each remaining valid block in turn, measure
  the accuracy of the resulting network, and remove the block whose deletion
  hurts least.
* ``sequential``: remove valid blocks from the deepest toward the shallowest.
* ``srinit``: rank blocks once by the mean accuracy after re-initializing that
  block's parameters; the block with the highest re-init accuracy goes first.
* ``brute``: evaluate every subset of the valid set (the optimum reference).

Ties are always broken toward the lowest block index, or the
lexicographically smallest subset.
"""

from __future__ import annotations

import itertools
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from .data import Dataset
from .trainer import finetune as run_finetune
from .zoo import (
    Network,
    block_rng,
    count_flops,
    evaluate_accuracy,
    prune,
    prune_set,
    valid_blocks,
)
from .blocks import build_block

FINETUNE_MODES = ("off", "final", "each")
BRUTE_FORCE_LIMIT = 20

__all__ = [
    "BruteForceResult",
    "ImportanceTable",
    "PruneStep",
    "PruneTrajectory",
    "brute_force",
    "evaluate_accuracy",
    "greedy_prune",
    "importance_direct",
    "sequential_baseline",
    "srinit_importance",
    "srinit_prune",
]


class BudgetError(ValueError):
    """Exhaustive search over the valid set would be too expensive."""


def _map(fn, items, workers: int):
    if workers <= 1 or len(items) <= 1:
        return [fn(i) for i in items]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))


@dataclass
class ImportanceTable:
    entries: dict[int, float]
    base_accuracy: float

    @property
    def empty(self) -> bool:
        return not self.entries

    def ranking(self) -> list[int]:
        """Block indices from most to least removable (highest accuracy first)."""
        return sorted(self.entries, key=lambda i: (-self.entries[i], i))

    def best(self) -> int:
        return self.ranking()[0]

    def to_csv(self, path) -> None:
        lines = ["block,base_accuracy,accuracy_after_removal,drop"]
        for i in sorted(self.entries):
            a = self.entries[i]
            lines.append(f"{i},{self.base_accuracy:.6g},{a:.6g},{self.base_accuracy - a:.6g}")
        Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8", newline="\n")


@dataclass
class PruneStep:
    removed: int
    acc_raw: float
    params_remaining: int
    flops_remaining: int
    blocks_remaining: int
    acc_finetuned: float | None = None
    latency: object | None = None


@dataclass
class PruneTrajectory:
    method: str
    base_accuracy: float
    base_params: int
    base_flops: int
    base_blocks: int
    steps: list[PruneStep] = field(default_factory=list)
    importance: list[ImportanceTable] = field(default_factory=list)
    base_latency: object | None = None
    base_acc_finetuned: float | None = None
    network: Network | None = field(default=None, repr=False, compare=False)

    @property
    def removed(self) -> list[int]:
        return [s.removed for s in self.steps]


def importance_direct(net: Network, val_ds: Dataset, workers: int = 1) -> ImportanceTable:
    """Accuracy of ``net`` with each valid block actually deleted."""
    base = evaluate_accuracy(net, val_ds)
    indices = valid_blocks(net.spec)
    accs = _map(lambda i: evaluate_accuracy(prune(net, i), val_ds), indices, workers)
    return ImportanceTable(dict(zip(indices, accs)), base)


def _start(method: str, net: Network, val_ds: Dataset | None, latency_fn) -> PruneTrajectory:
    return PruneTrajectory(
        method=method,
        base_accuracy=evaluate_accuracy(net, val_ds) if val_ds is not None else float("nan"),
        base_params=net.param_count(),
        base_flops=count_flops(net.spec),
        base_blocks=len(net.all_blocks()),
        base_latency=latency_fn(net) if latency_fn else None,
    )


def _record(traj, net, removed, val_ds, latency_fn) -> PruneStep:
    step = PruneStep(
        removed=removed,
        acc_raw=evaluate_accuracy(net, val_ds) if val_ds is not None else float("nan"),
        params_remaining=net.param_count(),
        flops_remaining=count_flops(net.spec),
        blocks_remaining=len(net.all_blocks()),
        latency=latency_fn(net) if latency_fn else None,
    )
    traj.steps.append(step)
    return step


def _check_finetune(mode: str, train_ds, val_ds) -> None:
    if mode not in FINETUNE_MODES:
        raise ValueError(f"finetune must be one of {FINETUNE_MODES}, got {mode!r}")
    if mode != "off" and (train_ds is None or val_ds is None):
        raise ValueError(f"finetune={mode!r} needs both a training and a validation dataset")


def _check_k(k: int, available: int) -> None:
    if not 0 <= k <= available:
        raise ValueError(f"k must lie in [0, {available}] (the number of valid blocks), got {k}")


def _finish(traj, net, finetune, train_ds, val_ds, ft_preset) -> PruneTrajectory:
    if finetune == "final" and traj.steps:
        run_finetune(net, train_ds, val_ds, ft_preset)
        traj.steps[-1].acc_finetuned = evaluate_accuracy(net, val_ds)
    traj.network = net
    return traj


def greedy_prune(
    net: Network,
    val_ds: Dataset,
    k: int,
    finetune: str = "off",
    ft_preset="desk",
    train_ds: Dataset | None = None,
    workers: int = 1,
    latency_fn: Callable | None = None,
    on_step: Callable[[int, Network], None] | None = None,
) -> PruneTrajectory:
    """Iteratively remove the block whose direct removal keeps accuracy highest."""
    _check_finetune(finetune, train_ds, val_ds)
    _check_k(k, len(valid_blocks(net.spec)))
    traj = _start("greedy", net, val_ds, latency_fn)
    current = net
    for _ in range(k):
        table = importance_direct(current, val_ds, workers)
        traj.importance.append(table)
        choice = table.best()
        current = prune(current, choice)
        step = _record(traj, current, choice, val_ds, latency_fn)
        if finetune == "each":
            run_finetune(current, train_ds, val_ds, ft_preset)
            step.acc_finetuned = evaluate_accuracy(current, val_ds)
        if on_step:
            on_step(len(traj.steps), current)
    if current is net:
        current = net.copy()
    return _finish(traj, current, finetune, train_ds, val_ds, ft_preset)


def _follow_order(method, net, order, val_ds, finetune, ft_preset, train_ds, latency_fn, on_step=None):
    _check_finetune(finetune, train_ds, val_ds)
    traj = _start(method, net, val_ds, latency_fn)
    current = net.copy()
    for i in order:
        current = prune(current, i)
        step = _record(traj, current, i, val_ds, latency_fn)
        if finetune == "each":
            run_finetune(current, train_ds, val_ds, ft_preset)
            step.acc_finetuned = evaluate_accuracy(current, val_ds)
        if on_step:
            on_step(len(traj.steps), current)
    return _finish(traj, current, finetune, train_ds, val_ds, ft_preset)


def sequential_baseline(
    net: Network,
    k: int,
    val_ds: Dataset | None = None,
    finetune: str = "off",
    ft_preset="desk",
    train_ds: Dataset | None = None,
    latency_fn: Callable | None = None,
    on_step: Callable[[int, Network], None] | None = None,
) -> PruneTrajectory:
    """Remove the ``k`` deepest valid blocks, deepest first."""
    valid = valid_blocks(net.spec)
    _check_k(k, len(valid))
    order = sorted(valid, reverse=True)[:k]
    return _follow_order("sequential", net, order, val_ds, finetune, ft_preset, train_ds, latency_fn, on_step)


def srinit_importance(net: Network, val_ds: Dataset, trials: int = 3, seed: int = 0) -> ImportanceTable:
    """Mean accuracy after re-initializing each valid block, one at a time.

    Trial ``t`` draws block ``i`` exactly as ``build_network(spec, seed + t)``
    would. The original parameters and buffers are written back bit-exactly
    after every evaluation.
    """
    if trials < 1:
        raise ValueError(f"trials must be >= 1, got {trials}")
    base = evaluate_accuracy(net, val_ds)
    entries = {}
    for i in valid_blocks(net.spec):
        block = net.block(i)
        saved = [arr.copy() for _, _, arr in block.state()]
        accs = []
        try:
            for t in range(trials):
                fresh = build_block(block.spec, block_rng(seed + t, i))
                for (_, _, dst), (_, _, src) in zip(block.state(), fresh.state()):
                    dst[...] = src
                accs.append(evaluate_accuracy(net, val_ds))
        finally:
            for (_, _, dst), src in zip(block.state(), saved):
                dst[...] = src
        entries[i] = float(math.fsum(accs) / len(accs))
    return ImportanceTable(entries, base)


def srinit_prune(
    net: Network,
    val_ds: Dataset,
    k: int,
    trials: int = 3,
    seed: int = 0,
    finetune: str = "off",
    ft_preset="desk",
    train_ds: Dataset | None = None,
    latency_fn: Callable | None = None,
    on_step: Callable[[int, Network], None] | None = None,
) -> PruneTrajectory:
    """Remove blocks in the order of one up-front re-initialization ranking."""
    _check_k(k, len(valid_blocks(net.spec)))
    table = srinit_importance(net, val_ds, trials, seed)
    traj = _follow_order("srinit", net, table.ranking()[:k], val_ds, finetune, ft_preset, train_ds, latency_fn, on_step)
    traj.importance.append(table)
    return traj


@dataclass
class BruteForceResult:
    base_accuracy: float
    best: dict[int, tuple[tuple[int, ...], float]]
    table: dict[int, list[tuple[tuple[int, ...], float]]]

    def best_accuracy(self, k: int) -> float:
        return self.best[k][1]

    def best_subset(self, k: int) -> tuple[int, ...]:
        return self.best[k][0]

    def to_csv(self, path) -> None:
        lines = ["k,subset,accuracy,is_best"]
        for k in sorted(self.table):
            for subset, acc in self.table[k]:
                flag = int(subset == self.best[k][0])
                lines.append(f"{k},{';'.join(map(str, subset))},{acc:.6g},{flag}")
        Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8", newline="\n")


def check_brute_force_budget(n_valid: int) -> None:
    if n_valid > BRUTE_FORCE_LIMIT:
        raise BudgetError(
            f"brute force over {n_valid} valid blocks needs 2^{n_valid} = {2**n_valid:,} subset evaluations; "
            f"the limit is {BRUTE_FORCE_LIMIT} valid blocks (2^{BRUTE_FORCE_LIMIT} = {2**BRUTE_FORCE_LIMIT:,})"
        )


def brute_force(net: Network, val_ds: Dataset, max_k: int | None = None, workers: int = 1) -> BruteForceResult:
    """Accuracy of every subset of the valid set with at most ``max_k`` blocks removed."""
    valid = valid_blocks(net.spec)
    check_brute_force_budget(len(valid))
    max_k = len(valid) if max_k is None else max_k
    _check_k(max_k, len(valid))
    table, best = {}, {}
    for k in range(max_k + 1):
        subsets = list(itertools.combinations(valid, k))
        accs = _map(lambda s: evaluate_accuracy(prune_set(net, s), val_ds), subsets, workers)
        table[k] = list(zip(subsets, accs))
        j = int(np.argmax(accs))  # first maximum = lexicographically smallest subset
        best[k] = (subsets[j], accs[j])
    return BruteForceResult(best[0][1], best, table)
