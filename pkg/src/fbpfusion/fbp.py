"""Factorized bilinear pooling of an audio vector and a video vector."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from fbpfusion import ops
from fbpfusion.errors import DimensionError
from fbpfusion.tensor import Tensor


@dataclass
class FBPParams:
    U: Tensor  # m x (k*o); column block j*k..(j+1)*k-1 factors output j
    V: Tensor  # n x (k*o)
    k: int = 4
    o: int = 128
    dropout_p: float = 0.3

    def __post_init__(self):
        if self.k < 1 or self.o < 1:
            raise ValueError(f"k and o must be positive, got k={self.k} o={self.o}")
        ko = self.k * self.o
        if self.U.data.ndim != 2 or self.V.data.ndim != 2 or self.U.shape[1] != ko or self.V.shape[1] != ko:
            raise DimensionError(f"FBP factors {self.U.shape}, {self.V.shape} need exactly k*o={ko} columns")
        if not 0.0 <= self.dropout_p < 1.0:
            raise ValueError(f"dropout_p must be in [0, 1), got {self.dropout_p}")

    @property
    def m(self) -> int:
        return self.U.shape[0]

    @property
    def n(self) -> int:
        return self.V.shape[0]

    @classmethod
    def init(cls, m: int, n: int, k: int, o: int, rng: np.random.Generator, dropout_p: float = 0.3,
             dtype=np.float64) -> "FBPParams":
        U = rng.uniform(-1 / np.sqrt(m), 1 / np.sqrt(m), (m, k * o))
        V = rng.uniform(-1 / np.sqrt(n), 1 / np.sqrt(n), (n, k * o))
        return cls(Tensor(U, requires_grad=True, dtype=dtype, name="fbp.U"),
                   Tensor(V, requires_grad=True, dtype=dtype, name="fbp.V"), k, o, dropout_p)


def fbp_forward(a: Tensor, v: Tensor, params: FBPParams, training: bool = False, rng=None,
                normalize: bool = True) -> Tensor:
    """``l2norm(SumPool(dropout(U^T a * V^T v), k))``; ``normalize=False`` skips the last stage."""
    if a.data.ndim != 1 or a.shape[0] != params.m:
        raise DimensionError(f"fbp: audio vector {a.shape} does not match U {params.U.shape}")
    if v.data.ndim != 1 or v.shape[0] != params.n:
        raise DimensionError(f"fbp: video vector {v.shape} does not match V {params.V.shape}")
    joint = ops.mul(ops.vecmat(a, params.U), ops.vecmat(v, params.V))
    joint = ops.dropout(joint, params.dropout_p, training, rng)
    z = ops.sum_pool_segments(joint, params.k)
    return ops.l2_normalize(z) if normalize else z


def bilinear_pool_naive(a, v, W) -> np.ndarray:
    """``z_i = a^T W[:, :, i] v`` by explicit loops.  Test oracle only."""
    a = np.asarray(a, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    W = np.asarray(W, dtype=np.float64)
    if W.ndim != 3 or W.shape[0] != a.shape[0] or W.shape[1] != v.shape[0]:
        raise DimensionError(f"bilinear_pool_naive: a {a.shape}, v {v.shape}, W {W.shape} disagree")
    m, n, o = W.shape
    z = np.zeros(o)
    for i in range(o):
        acc = 0.0
        for p in range(m):
            for q in range(n):
                acc += a[p] * W[p, q, i] * v[q]
        z[i] = acc
    return z


def reconstruct_W(params: FBPParams) -> np.ndarray:
    """Full m x n x o bilinear tensor implied by the factors: ``W_i = U_i V_i^T``."""
    U, V, k = params.U.data, params.V.data, params.k
    W = np.zeros((params.m, params.n, params.o))
    for i in range(params.o):
        for d in range(k):
            W[:, :, i] += np.outer(U[:, i * k + d], V[:, i * k + d])
    return W
