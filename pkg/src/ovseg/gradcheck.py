"""Central finite-difference gradient checks for every trainable parameter group."""

from __future__ import annotations

import sys
import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .ndtensor import Tape, Tensor

REL_TOL = 1e-4
STEP = 1e-5


def rel_error(analytic: np.ndarray, numeric: np.ndarray) -> np.ndarray:
    return np.abs(analytic - numeric) / (np.abs(numeric) + 1e-8)


def numeric_grad(loss_fn: Callable[[], Tensor], param: Tensor, indices, h: float = STEP):
    out = []
    flat = param.data.reshape(-1)
    for i in indices:
        old = flat[i]
        flat[i] = old + h
        fp = loss_fn().item()
        flat[i] = old - h
        fm = loss_fn().item()
        flat[i] = old
        out.append((fp - fm) / (2 * h))
    return np.array(out)


def analytic_grads(loss_fn: Callable[[], Tensor], params: dict[str, Tensor]) -> dict[str, np.ndarray]:
    for p in params.values():
        p.requires_grad = True
        p.grad = np.zeros_like(p.data)
    with Tape() as tape:
        loss = loss_fn()
    tape.backward(loss)
    return {k: p.grad.copy() for k, p in params.items()}


@dataclass
class GroupResult:
    group: str
    checked: int
    max_rel_error: float
    worst: str

    @property
    def passed(self) -> bool:
        return self.max_rel_error < REL_TOL


def check_group(group: str, loss_fn: Callable[[], Tensor], params: dict[str, Tensor],
                samples_per_tensor: int = 4, seed: int = 0, h: float = STEP) -> GroupResult:
    """Compare tape gradients with central differences on sampled entries of each tensor."""
    rng = np.random.default_rng(seed)
    grads = analytic_grads(loss_fn, params)
    worst, worst_name, checked = 0.0, "", 0
    for name, p in params.items():
        n = p.data.size
        idx = np.arange(n) if n <= samples_per_tensor else \
            np.sort(rng.choice(n, samples_per_tensor, replace=False))
        num = numeric_grad(loss_fn, p, idx, h)
        err = rel_error(grads[name].reshape(-1)[idx], num)
        checked += len(idx)
        if err.max() > worst:
            worst, worst_name = float(err.max()), f"{name}[{int(idx[err.argmax()])}]"
    return GroupResult(group, checked, worst, worst_name)


def run_suite(seed: int = 0, samples_per_tensor: int = 4) -> list[GroupResult]:
    """Gradient suite on the 32x32 micro configuration.

    Groups: ``jbu``, ``crn``, ``down`` on the upsampler objective and
    ``student`` plus ``tau`` on the combined distillation objective.
    """
    from .distill import micro_distill_problem
    from .upsampler import micro_upsampler_problem

    results = []
    loss_fn, groups = micro_upsampler_problem(seed)
    for gname, params in groups.items():
        results.append(check_group(gname, loss_fn, params, samples_per_tensor, seed))
    loss_fn, groups = micro_distill_problem(seed)
    for gname, params in groups.items():
        results.append(check_group(gname, loss_fn, params, samples_per_tensor, seed))
    return results


def report(results: list[GroupResult], elapsed: float | None = None) -> str:
    lines = []
    for r in results:
        status = "PASS" if r.passed else "FAIL"
        lines.append(f"{status} {r.group:8s} checked={r.checked:4d} "
                     f"max_rel_err={r.max_rel_error:.3e} worst={r.worst}")
    if elapsed is not None:
        lines.append(f"elapsed {elapsed:.1f}s")
    return "\n".join(lines)


def main(seed: int = 0) -> int:
    t0 = time.perf_counter()
    results = run_suite(seed)
    print(report(results))
    print(f"elapsed {time.perf_counter() - t0:.1f}s", file=sys.stderr)
    return 0 if all(r.passed for r in results) else 1
