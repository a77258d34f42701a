"""Central-difference verification of reverse-mode gradients."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor, no_grad


@dataclass
class GradCheckReport:
    max_rel_error: list = field(default_factory=list)
    passed: bool = True
    failure: str = ""

    def __str__(self):
        errs = ", ".join(f"{e:.2e}" for e in self.max_rel_error)
        status = "pass" if self.passed else f"FAIL {self.failure}"
        return f"grad_check[{errs}] {status}"


def grad_check(
    f: Callable[[], Tensor],
    params: Sequence[Tensor],
    h: float = 1e-4,
    tol: float = 1e-5,
) -> GradCheckReport:
    """Compare ``f``'s reverse-mode gradient with ``(f(θ+h) − f(θ−h)) / 2h``.

    ``f`` takes no arguments and reads ``params`` (float64 tensors) directly;
    it is re-evaluated with each component perturbed in place.
    """
    report = GradCheckReport()
    for p in params:
        if p.dtype != np.float64:
            raise ValueError("grad_check requires 64-bit parameters")
        p.grad = None
        p.requires_grad = True

    out = f()
    if out.size != 1:
        raise ValueError(f"grad_check needs a scalar function, got shape {out.shape}")
    if not np.isfinite(out.data).all():
        report.passed = False
        report.failure = "non-finite f at theta"
        return report
    out.backward()

    for k, p in enumerate(params):
        analytic = p.grad if p.grad is not None else np.zeros_like(p.data)
        worst = 0.0
        for idx in range(p.size):
            pos = np.unravel_index(idx, p.shape)
            orig = p.data[pos]
            with no_grad():
                p.data[pos] = orig + h
                fp = float(f().data)
                p.data[pos] = orig - h
                fm = float(f().data)
            p.data[pos] = orig
            if not (math.isfinite(fp) and math.isfinite(fm)):
                report.passed = False
                report.failure = f"non-finite f probing parameter {k} index {idx}"
                report.max_rel_error.append(math.inf)
                break
            numeric = (fp - fm) / (2.0 * h)
            a = float(analytic.reshape(-1)[idx])
            err = abs(a - numeric) / max(abs(a), abs(numeric), 1e-8)
            worst = max(worst, err)
        else:
            report.max_rel_error.append(worst)
            if worst > tol:
                report.passed = False
                report.failure = report.failure or f"parameter {k} rel error {worst:.3e} > {tol:.1e}"
    return report
