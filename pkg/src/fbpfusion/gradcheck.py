"""Central finite-difference checks of analytic gradients."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, List, Sequence

import numpy as np

from fbpfusion import ops
from fbpfusion.tensor import Tensor, backward, no_grad

# absolute floor in the relative-error denominator, so coordinates whose true
# gradient is ~0 are judged by absolute error instead
REL_FLOOR = 1e-6


@dataclass
class GradCheckResult:
    max_rel_error: float
    n_coords: int
    worst: tuple  # (input index, flat coordinate, analytic, numeric)
    skipped: int = 0  # coordinates whose +-h evaluations crossed a kink

    def passed(self, tol: float = 1e-4) -> bool:
        return self.n_coords > 0 and self.max_rel_error < tol


def rel_error(analytic: float, numeric: float, floor: float = REL_FLOOR) -> float:
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor)


def _same_pattern(a: List[np.ndarray], b: List[np.ndarray]) -> bool:
    return len(a) == len(b) and all(np.array_equal(x, y) for x, y in zip(a, b))


def gradcheck(fn: Callable[..., Tensor], inputs: Sequence[Tensor], n_coords: int = 100, h: float = 1e-5,
              seed: int = 0, per_input: bool = False) -> GradCheckResult:
    """Compare backward() against central differences on randomly chosen coordinates.

    ``fn`` may return a tensor of any shape; it is reduced to a scalar by a
    fixed random projection so every output entry contributes.  Inputs must be
    float64 leaves with ``requires_grad=True``.  ``n_coords`` coordinates are
    drawn over all inputs together, or from each input when ``per_input``.
    A coordinate whose perturbation flips a ReLU mask or a max-pool argmax is
    replaced by another one; finite differences are meaningless across kinks.
    """
    rng = np.random.default_rng(seed)
    probe = fn(*inputs)
    weights = Tensor(rng.standard_normal(probe.shape))

    def scalar() -> Tensor:
        return ops.total(ops.mul(fn(*inputs), weights))

    for t in inputs:
        t.zero_grad()
    backward(scalar())
    analytic = [np.zeros_like(t.data) if t.grad is None else t.grad.copy() for t in inputs]

    if per_input:
        groups = [[(i, j) for j in rng.permutation(t.size)] for i, t in enumerate(inputs)]
    else:
        pool = [(i, j) for i, t in enumerate(inputs) for j in range(t.size)]
        groups = [[pool[p] for p in rng.permutation(len(pool))]]

    worst = (-1, -1, 0.0, 0.0)
    max_err = 0.0
    checked = skipped = 0
    for group in groups:
        done = 0
        for i, j in group:
            if done >= n_coords:
                break
            flat = inputs[i].data.reshape(-1)
            orig = flat[j]
            with no_grad():
                flat[j] = orig + h
                with ops.record_kinks() as kp:
                    fp = scalar().item()
                flat[j] = orig - h
                with ops.record_kinks() as km:
                    fm = scalar().item()
                flat[j] = orig
            if not _same_pattern(kp, km):
                skipped += 1
                continue
            numeric = (fp - fm) / (2 * h)
            a = float(analytic[i].reshape(-1)[j])
            err = rel_error(a, numeric)
            if err > max_err:
                max_err, worst = err, (i, j, a, numeric)
            done += 1
        checked += done
    return GradCheckResult(max_err, checked, worst, skipped)


def leaves(*arrays) -> List[Tensor]:
    return [Tensor(np.array(a, dtype=np.float64), requires_grad=True) for a in arrays]
