"""Central finite-difference verification of tape gradients."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .tensor import Tensor, backward, no_grad, recording


@dataclass
class GroupResult:
    name: str
    rel_error: float
    max_abs_error: float
    passed: bool


@dataclass
class GradCheckReport:
    groups: list[GroupResult] = field(default_factory=list)
    tol: float = 1e-4

    @property
    def passed(self) -> bool:
        return all(g.passed for g in self.groups)

    def worst(self) -> GroupResult:
        return max(self.groups, key=lambda g: g.rel_error)

    def __str__(self):
        lines = [f"{'PASS' if g.passed else 'FAIL'} {g.name}: rel={g.rel_error:.2e} abs={g.max_abs_error:.2e}"
                 for g in self.groups]
        return "\n".join(lines)


def numeric_grad(f: Callable[[], Tensor], p: Tensor, h: float = 1e-5,
                 indices=None) -> np.ndarray:
    """d f / d p by central differences, perturbing ``p.data`` in place."""
    grad = np.zeros_like(p.data)
    flat = p.data.reshape(-1)
    gflat = grad.reshape(-1)
    idx = range(flat.size) if indices is None else indices
    for i in idx:
        orig = flat[i]
        flat[i] = orig + h
        fp = float(f().data)
        flat[i] = orig - h
        fm = float(f().data)
        flat[i] = orig
        gflat[i] = (fp - fm) / (2.0 * h)
    return grad


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-8) -> float:
    """||a - n|| / max(||a|| + ||n||, floor), L2 over the whole group."""
    diff = np.linalg.norm(analytic - numeric)
    scale = np.linalg.norm(analytic) + np.linalg.norm(numeric)
    return float(diff / max(scale, floor))


def grad_check(f: Callable[[], Tensor], params, h: float = 1e-5, tol: float = 1e-4,
               max_entries: int | None = None, seed: int = 0) -> GradCheckReport:
    """Compare tape gradients of scalar ``f()`` against central differences.

    ``params`` is a dict name -> Tensor or a list of tensors.  With
    ``max_entries`` only a seeded random subset of each group is perturbed.
    """
    if not isinstance(params, dict):
        params = {f"param[{i}]": p for i, p in enumerate(params)}
    for p in params.values():
        p.grad = None
    with recording():
        loss = f()
        backward(loss)
    rng = np.random.default_rng(seed)
    report = GradCheckReport(tol=tol)
    for name, p in params.items():
        analytic = p.grad if p.grad is not None else np.zeros_like(p.data)
        idx = None
        if max_entries is not None and p.size > max_entries:
            idx = np.sort(rng.choice(p.size, size=max_entries, replace=False))
        with no_grad():
            numeric = numeric_grad(f, p, h, idx)
        if idx is not None:
            analytic = analytic.reshape(-1)[idx]
            numeric = numeric.reshape(-1)[idx]
        rel = relative_error(analytic, numeric)
        report.groups.append(GroupResult(name, rel, float(np.max(np.abs(analytic - numeric))), rel <= tol))
    return report
