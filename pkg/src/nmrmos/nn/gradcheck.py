"""Central finite-difference verification of analytic gradients."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor


@dataclass
class GradCheckReport:
    max_rel_error: float
    tolerance: float
    per_param: dict[str, float] = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return bool(self.max_rel_error < self.tolerance)


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float) -> np.ndarray:
    return np.abs(analytic - numeric) / np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)


def grad_check(fn: Callable[[], Tensor], params: Sequence[Tensor], tolerance: float = 1e-4,
               h: float = 1e-4, floor: float = 1e-6, max_entries: int | None = None,
               rng: np.random.Generator | None = None) -> GradCheckReport:
    """Compare backprop gradients of the scalar ``fn()`` against central differences.

    Parameters should hold float64 data; in float32 a step of 1e-4 loses most
    significant digits to cancellation. ``floor`` bounds the denominator of the
    relative error so coordinates with (near-)zero gradient compare absolutely.
    ``max_entries`` subsamples coordinates of large parameters.
    """
    for p in params:
        p.grad = None
    loss = fn()
    loss.backward()
    analytic = [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params]

    report = GradCheckReport(max_rel_error=0.0, tolerance=tolerance)
    for idx, (p, ga) in enumerate(zip(params, analytic)):
        flat = p.data.reshape(-1)
        coords = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            picker = rng if rng is not None else np.random.default_rng(0)
            coords = np.sort(picker.choice(flat.size, size=max_entries, replace=False))
        numeric = np.empty(coords.size)
        for n, c in enumerate(coords):
            orig = flat[c]
            flat[c] = orig + h
            up = float(fn().data)
            flat[c] = orig - h
            down = float(fn().data)
            flat[c] = orig
            numeric[n] = (up - down) / (2 * h)
        err = relative_error(ga.reshape(-1)[coords].astype(np.float64), numeric, floor)
        worst = float(err.max()) if err.size else 0.0
        report.per_param[p.name or f"param{idx}"] = worst
        report.max_rel_error = max(report.max_rel_error, worst)
    for p in params:
        p.grad = None
    return report
