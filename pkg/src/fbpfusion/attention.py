"""Additive attention pooling over a variable-length set of feature vectors.

Scores are ``u . tanh(W x_i + b)``, normalised with a scaled softmax.  The audio
stream pools the original elements; the video stream (``pool_transformed``)
pools the reduced elements ``W x_i + b`` instead.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import Iterable, Optional, Tuple

import numpy as np

from fbpfusion import ops
from fbpfusion.errors import DimensionError, InputError
from fbpfusion.tensor import Tensor


@dataclass
class AttentionParams:
    W: Tensor  # d x C
    b: Tensor  # d
    u: Tensor  # d
    lam: float = 1.0
    pool_transformed: bool = False

    def __post_init__(self):
        if not 0.0 <= self.lam <= 1.0:
            raise ValueError(f"lambda must lie in [0, 1], got {self.lam}")
        d, c = self.W.shape
        if self.b.shape != (d,) or self.u.shape != (d,):
            raise DimensionError(f"attention: W {self.W.shape}, b {self.b.shape}, u {self.u.shape} disagree")

    @property
    def in_dim(self) -> int:
        return self.W.shape[1]

    @property
    def hidden_dim(self) -> int:
        return self.W.shape[0]

    @classmethod
    def init(cls, in_dim: int, hidden_dim: int, rng: np.random.Generator, lam: float = 1.0,
             pool_transformed: bool = False, dtype=np.float64, prefix: str = "att") -> "AttentionParams":
        bound = 1.0 / np.sqrt(in_dim)
        W = Tensor(rng.uniform(-bound, bound, (hidden_dim, in_dim)), requires_grad=True, dtype=dtype, name=f"{prefix}.W")
        b = Tensor(np.zeros(hidden_dim), requires_grad=True, dtype=dtype, name=f"{prefix}.b")
        u = Tensor(rng.uniform(-bound, bound, hidden_dim), requires_grad=True, dtype=dtype, name=f"{prefix}.u")
        return cls(W, b, u, lam, pool_transformed)

    def tensors(self) -> Tuple[Tensor, Tensor, Tensor]:
        return self.W, self.b, self.u


@dataclass
class AttentionOutput:
    pooled: Tensor
    weights: Tensor  # length L, sums to 1


def attention_pool(elements: Tensor, params: AttentionParams) -> AttentionOutput:
    if elements.data.ndim != 2 or elements.shape[0] < 1:
        raise InputError(f"attention_pool needs a non-empty L x C element set, got shape {elements.shape}")
    if elements.shape[1] != params.in_dim:
        raise DimensionError(f"attention_pool: elements have dim {elements.shape[1]}, params expect {params.in_dim}")
    n = elements.shape[0]
    hidden = ops.add_rowwise(ops.matmul(elements, ops.transpose(params.W)), params.b)
    scores = ops.reshape(ops.matmul(ops.tanh(hidden), ops.reshape(params.u, (-1, 1))), (n,))
    weights = ops.scaled_softmax(scores, params.lam)
    source = hidden if params.pool_transformed else elements
    pooled = ops.reshape(ops.matmul(ops.reshape(weights, (1, n)), source), (-1,))
    return AttentionOutput(pooled=pooled, weights=weights)


def flatten_grid(grid: Tensor) -> Tensor:
    """C x F x T feature grid to an (F*T) x C element set, row-major over (F, T)."""
    if grid.data.ndim != 3:
        raise DimensionError(f"flatten_grid expects C x F x T, got {grid.shape}")
    c = grid.shape[0]
    return ops.transpose(ops.reshape(grid, (c, -1)))


def unflatten_grid(elements: Tensor, f: int, t: int) -> Tensor:
    if elements.data.ndim != 2 or elements.shape[0] != f * t:
        raise DimensionError(f"unflatten_grid: {elements.shape} cannot be a {f} x {t} grid")
    return ops.reshape(ops.transpose(elements), (elements.shape[1], f, t))


def weights_per_time(weights: np.ndarray, grid_shape: Tuple[int, int]) -> np.ndarray:
    """Collapse grid weights over frequency: one weight per time step."""
    f, t = grid_shape
    return np.asarray(weights).reshape(f, t).sum(axis=0)


def write_weights_csv(path, rows: Iterable[Tuple[str, str, int, float]], header: bool = True) -> None:
    """Rows of ``sample_id, stream, index, weight``."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        if header:
            w.writerow(["sample_id", "stream", "index", "weight"])
        for sid, stream, idx, weight in rows:
            if stream not in ("audio", "video"):
                raise ValueError(f"stream must be audio or video, got {stream!r}")
            w.writerow([sid, stream, int(idx), repr(float(weight))])


def read_weights_csv(path) -> list:
    with open(path, newline="") as fh:
        return [(r["sample_id"], r["stream"], int(r["index"]), float(r["weight"])) for r in csv.DictReader(fh)]
