"""Latency measurement, cost counting, and accuracy-vs-cost curve files."""

from __future__ import annotations

import csv
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from .pruning import PruneStep, PruneTrajectory
from .tensor import Tensor, no_grad
from .zoo import Network, count_flops, forward

CURVE_COLUMNS = (
    "step",
    "removed_block",
    "blocks_remaining",
    "params",
    "flops",
    "mean_latency_us",
    "acc_raw",
    "acc_finetuned",
)


@dataclass(frozen=True)
class LatencyReport:
    runs: int
    warmup: int
    mean: float
    median: float
    p95: float
    min: float
    max: float
    input_shape: tuple[int, ...]

    def to_text(self) -> str:
        rows = [
            ("runs", self.runs),
            ("warmup", self.warmup),
            ("mean_us", f"{self.mean:.6g}"),
            ("median_us", f"{self.median:.6g}"),
            ("p95_us", f"{self.p95:.6g}"),
            ("min_us", f"{self.min:.6g}"),
            ("max_us", f"{self.max:.6g}"),
            ("input_shape", "x".join(map(str, self.input_shape))),
        ]
        return "".join(f"{k}={v}\n" for k, v in rows)

    @classmethod
    def from_samples(cls, samples_us, warmup: int, input_shape) -> "LatencyReport":
        s = np.asarray(samples_us, dtype=np.float64)
        lo, hi = float(s.min()), float(s.max())
        return cls(
            runs=len(s),
            warmup=warmup,
            # the clip only absorbs float summation rounding when all samples are equal
            mean=float(np.clip(s.mean(), lo, hi)),
            median=float(np.median(s)),
            p95=float(np.percentile(s, 95)),
            min=lo,
            max=hi,
            input_shape=tuple(input_shape),
        )


def measure_latency(net: Network, runs: int = 1000, warmup: int = 50, image: np.ndarray | None = None) -> LatencyReport:
    """Time single-image eval-mode forwards with a monotonic clock, BLAS pinned to one thread."""
    if runs < 1:
        raise ValueError(f"runs must be >= 1, got {runs}")
    if warmup < 0:
        raise ValueError(f"warmup must be >= 0, got {warmup}")
    shape = (1, *net.spec.input_shape)
    x = Tensor(np.zeros(shape, np.float32) if image is None else np.asarray(image, np.float32).reshape(shape))
    samples = np.empty(runs, dtype=np.float64)
    with threadpool_limits(limits=1), no_grad():
        for _ in range(warmup):
            forward(net, x)
        for r in range(runs):
            t0 = time.perf_counter_ns()
            forward(net, x)
            samples[r] = (time.perf_counter_ns() - t0) / 1000.0
    return LatencyReport.from_samples(samples, warmup, shape)


def count_network_flops(net: Network) -> int:
    """Multiply-accumulates of one single-image forward at the spec input resolution."""
    return count_flops(net.spec)


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return f"{float(v):.6g}"


def _latency_mean(report) -> float | None:
    return None if report is None else report.mean


def curve_rows(traj: PruneTrajectory) -> list[tuple]:
    rows = [
        (
            0,
            None,
            traj.base_blocks,
            traj.base_params,
            traj.base_flops,
            _latency_mean(traj.base_latency),
            traj.base_accuracy,
            traj.base_acc_finetuned,
        )
    ]
    for n, s in enumerate(traj.steps, 1):
        rows.append(
            (
                n,
                s.removed,
                s.blocks_remaining,
                s.params_remaining,
                s.flops_remaining,
                _latency_mean(s.latency),
                s.acc_raw,
                s.acc_finetuned,
            )
        )
    return rows


def emit_curve(traj: PruneTrajectory, path) -> None:
    """Write the original-model row then one row per removal (LF endings, 6 significant digits)."""
    lines = [",".join(CURVE_COLUMNS)]
    lines += [",".join(_fmt(v) for v in row) for row in curve_rows(traj)]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8", newline="\n")


def read_curve(path, method: str = "unknown") -> PruneTrajectory:
    """Parse a curve file back into a trajectory (latencies become bare means)."""
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != CURVE_COLUMNS:
            raise ValueError(f"{path}: unexpected curve header {reader.fieldnames}")
        rows = list(reader)
    opt = lambda v, conv: conv(v) if v != "" else None  # noqa: E731
    first = rows[0]
    traj = PruneTrajectory(
        method=method,
        base_accuracy=float(first["acc_raw"]),
        base_params=int(first["params"]),
        base_flops=int(first["flops"]),
        base_blocks=int(first["blocks_remaining"]),
        base_latency=opt(first["mean_latency_us"], _BareLatency.parse),
        base_acc_finetuned=opt(first["acc_finetuned"], float),
    )
    for r in rows[1:]:
        traj.steps.append(
            PruneStep(
                removed=int(r["removed_block"]),
                acc_raw=float(r["acc_raw"]),
                params_remaining=int(r["params"]),
                flops_remaining=int(r["flops"]),
                blocks_remaining=int(r["blocks_remaining"]),
                acc_finetuned=opt(r["acc_finetuned"], float),
                latency=opt(r["mean_latency_us"], _BareLatency.parse),
            )
        )
    return traj


@dataclass(frozen=True)
class _BareLatency:
    mean: float

    @classmethod
    def parse(cls, text: str) -> "_BareLatency":
        return cls(float(text))
