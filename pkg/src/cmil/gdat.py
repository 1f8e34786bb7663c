"""Grouped double attention re-embedding.

Instances are average-pooled into one token per ``F x F`` grid window.  Each
block then routes information through those ``m`` tokens with two chained
attentions, so the cost is ``O(mM)`` instead of ``O(M^2)``:

    out = Attn(Q, K_A, Attn(Q_A, K, V)) + eta * V

followed by an output projection and a residual connection.
"""

from __future__ import annotations

import contextlib
import math
from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from .numeric import NonFiniteError, softmax_rows
from .owlora import AdapterStack


@dataclass(frozen=True)
class GdatConfig:
    model_dim: int = 32
    num_blocks: int = 2
    grouping_factor: int = 16
    eta: float = 0.1
    scale_dim: int | None = None  # defaults to model_dim

    def __post_init__(self):
        if self.eta < 0:
            raise ValueError("eta must be >= 0")
        if self.grouping_factor < 1:
            raise ValueError("grouping_factor must be >= 1")
        if self.num_blocks < 1:
            raise ValueError("num_blocks must be >= 1")

    @property
    def attn_scale_dim(self) -> int:
        return self.scale_dim or self.model_dim


# Debug allocation accounting: when active, double_attn records the shape of
# every intermediate it materialises.
_ALLOC_TRACE: list[tuple[int, ...]] | None = None


@contextlib.contextmanager
def trace_allocations():
    global _ALLOC_TRACE
    prev, _ALLOC_TRACE = _ALLOC_TRACE, []
    try:
        yield _ALLOC_TRACE
    finally:
        _ALLOC_TRACE = prev


def _note(*tensors):
    if _ALLOC_TRACE is not None:
        _ALLOC_TRACE.extend(tuple(t.shape) for t in tensors)


def group_assignment(positions: np.ndarray, F: int) -> tuple[np.ndarray, int]:
    """Map each grid position to the index of its ``F x F`` window (nonempty windows only)."""
    windows = np.asarray(positions) // F
    _, assignment = np.unique(windows, axis=0, return_inverse=True)
    assignment = assignment.reshape(-1)
    return assignment.astype(np.int64), int(assignment.max()) + 1


def group_pool(X, positions, F: int):
    """Mean of each window's members; returns ``(X_A, assignment)``."""
    assignment, m = group_assignment(positions, F)
    return pool_by_assignment(X, assignment, m), assignment


def pool_by_assignment(X, assignment, m: int):
    if isinstance(X, torch.Tensor):
        idx = torch.as_tensor(assignment)
        sums = torch.zeros(m, X.shape[1], dtype=X.dtype).index_add(0, idx, X)
        counts = torch.bincount(idx, minlength=m).to(X.dtype)
        return sums / counts[:, None]
    X = np.asarray(X, dtype=np.float64)
    sums = np.zeros((m, X.shape[1]))
    np.add.at(sums, assignment, X)
    return sums / np.bincount(assignment, minlength=m)[:, None]


def attention_weights(Q, K, scale_dim: int):
    if Q.shape[-1] != K.shape[-1]:
        raise ValueError(f"query/key dims differ: {Q.shape[-1]} vs {K.shape[-1]}")
    # scale the query side: O(rows * D) instead of O(rows * keys)
    return softmax_rows((Q / math.sqrt(scale_dim)) @ K.T)


def attn(Q, K, V, scale_dim: int):
    """Softmax attention: row i is a convex combination of the rows of V."""
    if K.shape[0] != V.shape[0]:
        raise ValueError(f"{K.shape[0]} keys but {V.shape[0]} values")
    return attention_weights(Q, K, scale_dim) @ V


class GdatBlock(nn.Module):
    def __init__(self, dim: int, model_dim: int, init_std: float, generator: torch.Generator | None):
        super().__init__()
        self.q = AdapterStack(dim, model_dim, init_std=init_std, generator=generator)
        self.k = AdapterStack(dim, model_dim, init_std=init_std, generator=generator)
        self.v = AdapterStack(dim, model_dim, init_std=init_std, generator=generator)
        self.o = AdapterStack(model_dim, dim, init_std=init_std, generator=generator)


def double_attn(X: torch.Tensor, X_A: torch.Tensor, block: GdatBlock, eta: float,
                scale_dim: int, return_weights: bool = False):
    """``Attn(Q, K_A, Attn(Q_A, K, V)) + eta * V``; never forms an ``M x M`` matrix."""
    Q, K, V = block.q(X), block.k(X), block.v(X)
    Q_A, K_A = block.q(X_A), block.k(X_A)
    inner_w = attention_weights(Q_A, K, scale_dim)  # m x M
    inner = inner_w @ V  # m x D1
    outer_w = attention_weights(Q, K_A, scale_dim)  # M x m
    out = outer_w @ inner + eta * V
    _note(Q, K, V, Q_A, K_A, inner_w, inner, outer_w, out)
    if return_weights:
        return out, inner_w, outer_w
    return out


class Gdat(nn.Module):
    def __init__(self, dim: int, config: GdatConfig, init_std: float = 0.02,
                 generator: torch.Generator | None = None):
        super().__init__()
        self.config = config
        self.blocks = nn.ModuleList(
            GdatBlock(dim, config.model_dim, init_std, generator) for _ in range(config.num_blocks)
        )

    def forward(self, X: torch.Tensor, assignment: np.ndarray, m: int) -> torch.Tensor:
        H = X
        for block in self.blocks:
            X_A = pool_by_assignment(H, assignment, m)
            out = double_attn(H, X_A, block, self.config.eta, self.config.attn_scale_dim)
            H = H + block.o(out)
        if not torch.isfinite(H).all():
            raise NonFiniteError("non-finite GDAT output")
        return H


def gdat_forward(bag, config: GdatConfig, params: Gdat) -> torch.Tensor:
    """Refine a bag's instance features through every block."""
    assignment, m = group_assignment(bag.positions, config.grouping_factor)
    X = torch.as_tensor(bag.instances, dtype=torch.float64)
    return params(X, assignment, m)
