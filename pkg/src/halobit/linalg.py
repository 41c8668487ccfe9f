"""Dense/sparse numerics for the trainer: products, activations, loss, Adam.

Dense matrices are plain float64 numpy arrays. Sparse matrices use a small
CSR container (scipy-backed products). All operations are pure and use fixed
accumulation order, so repeated runs are bit-reproducible.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp


class ShapeError(ValueError):
    pass


@dataclass(frozen=True)
class CsrMatrix:
    rows: int
    cols: int
    row_ptr: np.ndarray
    col_idx: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        rp, ci, v = self.row_ptr, self.col_idx, self.values
        if len(rp) != self.rows + 1 or rp[-1] != len(ci) or len(ci) != len(v):
            raise ShapeError("inconsistent CSR arrays")
        if np.any(np.diff(rp) < 0):
            raise ShapeError("row_ptr must be nondecreasing")
        if len(ci) and (ci.min() < 0 or ci.max() >= self.cols):
            raise ShapeError("column index out of range")
        for r in range(self.rows):
            seg = ci[rp[r]:rp[r + 1]]
            if np.any(np.diff(seg) <= 0):
                raise ShapeError(f"columns not strictly increasing in row {r}")

    @classmethod
    def from_scipy(cls, a: sp.spmatrix) -> "CsrMatrix":
        a = sp.csr_matrix(a)
        a.sort_indices()
        a.sum_duplicates()
        return cls(a.shape[0], a.shape[1],
                   a.indptr.astype(np.int64), a.indices.astype(np.int64),
                   a.data.astype(np.float64))

    def to_scipy(self) -> sp.csr_matrix:
        return sp.csr_matrix((self.values, self.col_idx, self.row_ptr),
                             shape=(self.rows, self.cols))

    @classmethod
    def identity(cls, n: int) -> "CsrMatrix":
        return cls.from_scipy(sp.identity(n, format="csr"))

    def to_dense(self) -> np.ndarray:
        return self.to_scipy().toarray()

    def transpose(self) -> "CsrMatrix":
        return CsrMatrix.from_scipy(self.to_scipy().T)


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul shape mismatch {a.shape} x {b.shape}")
    return a @ b


def spmm(a: CsrMatrix, h: np.ndarray) -> np.ndarray:
    """result[i] = sum over stored (i, j) of values * h[j], in index order."""
    if a.cols != h.shape[0]:
        raise ShapeError(f"spmm shape mismatch ({a.rows}x{a.cols}) x {h.shape}")
    return a.to_scipy() @ h


def relu(m: np.ndarray) -> np.ndarray:
    return np.maximum(m, 0.0)


def relu_grad(pre_activation: np.ndarray) -> np.ndarray:
    """Subgradient at 0 is taken as 0."""
    return (pre_activation > 0.0).astype(np.float64)


def softmax_cross_entropy(logits: np.ndarray, labels: np.ndarray,
                          mask: np.ndarray, norm: int):
    """Masked mean cross-entropy with the stated global normalizer.

    Returns (loss, grad). Gradient rows outside the mask are zero; on masked
    rows grad = (softmax - onehot) / norm. Softmax uses row-max subtraction.
    An empty mask yields loss 0 and a zero gradient.
    """
    if norm <= 0:
        raise ShapeError("norm must be positive")
    mask = np.asarray(mask, dtype=bool)
    grad = np.zeros_like(logits)
    idx = np.flatnonzero(mask)
    if idx.size == 0:
        return 0.0, grad
    z = logits[idx]
    z = z - z.max(axis=1, keepdims=True)
    expz = np.exp(z)
    softmax = expz / expz.sum(axis=1, keepdims=True)
    y = np.asarray(labels)[idx]
    logprob = z[np.arange(idx.size), y] - np.log(expz.sum(axis=1))
    loss = -logprob.sum() / norm
    g = softmax
    g[np.arange(idx.size), y] -= 1.0
    grad[idx] = g / norm
    return float(loss), grad


@dataclass
class AdamState:
    """Per-layer Adam moments with bias correction."""

    lr: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: np.ndarray | None = field(default=None)
    v: np.ndarray | None = field(default=None)


def adam_step(w: np.ndarray, g: np.ndarray, s: AdamState) -> np.ndarray:
    """One bias-corrected Adam update. Mutates s, returns the new weights."""
    if w.shape != g.shape:
        raise ShapeError(f"adam shape mismatch {w.shape} vs {g.shape}")
    if s.m is None:
        s.m = np.zeros_like(w)
        s.v = np.zeros_like(w)
    s.t += 1
    s.m = s.beta1 * s.m + (1.0 - s.beta1) * g
    s.v = s.beta2 * s.v + (1.0 - s.beta2) * g * g
    m_hat = s.m / (1.0 - s.beta1 ** s.t)
    v_hat = s.v / (1.0 - s.beta2 ** s.t)
    return w - s.lr * m_hat / (np.sqrt(v_hat) + s.eps)
