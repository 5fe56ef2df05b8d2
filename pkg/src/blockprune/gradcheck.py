"""Central finite-difference oracle for reverse-mode gradients.

The scalar probed is ``sum(f(inputs) * R)`` for a fixed random projection
``R``; the analytic side runs :meth:`Tensor.backward` on exactly that
expression, the numeric side perturbs one input coordinate at a time by
``+-step`` in float32 and differences the two forward values. Coordinates
whose stencil changes the pattern of any relu or max-pool selection sit on a
non-differentiable point and are skipped.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .rng import Rng
from .tensor import DTYPE, Tensor, record_kinks


@dataclass
class GradCheck:
    rel_error: dict[int, float]
    checked: dict[int, int]
    skipped: dict[int, int]

    @property
    def max_rel_error(self) -> float:
        return max(self.rel_error.values()) if self.rel_error else 0.0


def _patterns_equal(a: list, b: list) -> bool:
    return len(a) == len(b) and all(np.array_equal(x, y) for x, y in zip(a, b))


def gradcheck(
    fn: Callable[..., Tensor],
    inputs: Sequence[Tensor],
    step: float = 1e-2,
    max_coords: int = 40,
    seed: int = 0,
) -> GradCheck:
    rng = Rng(seed)
    with record_kinks() as base_pattern:
        out = fn(*inputs)
    proj = rng.normal(out.shape)
    for t in inputs:
        t.grad = None
    (out * Tensor(proj)).sum().backward()
    analytic = [None if t.grad is None else t.grad.copy() for t in inputs]

    def probe() -> tuple[float, list]:
        with record_kinks() as pattern:
            y = fn(*inputs)
        return float(np.sum(y.data.astype(np.float64) * proj)), pattern

    rel, checked, skipped = {}, {}, {}
    for k, t in enumerate(inputs):
        if not t.requires_grad:
            continue
        flat = t.data.reshape(-1)
        if flat.size <= max_coords:
            coords = np.arange(flat.size)
        else:
            coords = np.sort(rng.permutation(flat.size)[:max_coords])
        a_vals, n_vals = [], []
        skipped[k] = 0
        for c in coords:
            orig = flat[c]
            flat[c] = orig + DTYPE(step)
            plus, p_pat = probe()
            flat[c] = orig - DTYPE(step)
            minus, m_pat = probe()
            flat[c] = orig
            if not (_patterns_equal(p_pat, base_pattern) and _patterns_equal(m_pat, base_pattern)):
                skipped[k] += 1
                continue
            n_vals.append((plus - minus) / (2 * step))
            g = analytic[k]
            a_vals.append(0.0 if g is None else float(g.reshape(-1)[c]))
        a, n = np.asarray(a_vals), np.asarray(n_vals)
        denom = max(np.linalg.norm(a), np.linalg.norm(n), 1e-12)
        rel[k] = float(np.linalg.norm(a - n) / denom) if a.size else 0.0
        checked[k] = int(a.size)
    for t in inputs:
        t.grad = None
    return GradCheck(rel, checked, skipped)
