"""Orthogonal weighted low-rank adaptation of linear layers.

A layer's weight after task n is ``W_n = sum_k U_k diag(S_k) V_k^T`` (shape
``D_out x D_in``).  Task 1 trains a dense weight which is then truncated by SVD
to the smallest rank holding a fraction ``eps`` of its squared singular-value
mass.  Every later task trains one new triple whose U and V columns are kept in
the orthogonal complement of all frozen U (resp. V) columns.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from .numeric import svd


class RankExhaustedError(RuntimeError):
    """The orthogonal complement has fewer dimensions than the requested rank."""


def retained_rank(s, eps: float) -> int:
    """Smallest i with ``sum(s[:i]**2) / sum(s**2) >= eps`` (1 for an all-zero spectrum)."""
    s = np.asarray(s, dtype=np.float64)
    total = float(np.sum(s * s))
    if total == 0.0:
        return 1
    ratios = np.cumsum(s * s) / total
    # guard the comparison against round-off in the last cumulative entry
    hit = np.nonzero(ratios >= eps - 1e-12)[0]
    return int(hit[0]) + 1 if hit.size else len(s)


def truncate_first_task(W, eps: float):
    """Return ``(U, s, V, rank)`` keeping the leading singular triples of ``W``."""
    U, s, V = svd(W)
    rank = retained_rank(s.detach().numpy() if isinstance(s, torch.Tensor) else s, eps)
    if float((s * s).sum()) == 0.0:
        zeros = (lambda shape: torch.zeros(shape, dtype=W.dtype)) if isinstance(W, torch.Tensor) else np.zeros
        return zeros((W.shape[0], 1)), zeros(1), zeros((W.shape[1], 1)), 1
    return U[:, :rank], s[:rank], V[:, :rank], rank


def intra_ortho_loss(U, V):
    """``||U^T U - I||_F^2 + ||V^T V - I||_F^2``."""
    if isinstance(U, torch.Tensor):
        eye = torch.eye(U.shape[1], dtype=U.dtype)
        return ((U.mT @ U - eye) ** 2).sum() + ((V.mT @ V - eye) ** 2).sum()
    eye = np.eye(U.shape[1])
    return float(((U.T @ U - eye) ** 2).sum() + ((V.T @ V - eye) ** 2).sum())


def project_gradient(G, basis):
    """``(I - B B^T) G`` for a frozen basis ``B`` with orthonormal columns (``None`` = no-op)."""
    if basis is None or basis.shape[1] == 0:
        return G
    Bt = basis.mT if isinstance(basis, torch.Tensor) else basis.T
    return G - basis @ (Bt @ G)


def _orthonormal_span(B: torch.Tensor) -> torch.Tensor:
    q, r = torch.linalg.qr(B)
    keep = torch.abs(torch.diagonal(r)) > 1e-10 * max(1.0, float(torch.abs(r).max()))
    return q[:, keep]


def reproject_params(U: torch.Tensor, V: torch.Tensor, basis_u, basis_v):
    """Strip every frozen-span component from ``U`` and ``V``.

    The spans are re-orthonormalised first, so the result is exact even when
    the frozen columns are only approximately orthonormal.
    """
    out = []
    for P, B in ((U, basis_u), (V, basis_v)):
        if B is None or B.shape[1] == 0:
            out.append(P)
            continue
        Q = _orthonormal_span(B)
        P = P - Q @ (Q.mT @ P)
        # a second pass removes the round-off left by the first
        P = P - Q @ (Q.mT @ P)
        out.append(P)
    return out[0], out[1]


def sample_complement(basis, dim: int, d: int, rng: np.random.Generator) -> np.ndarray:
    """Gaussian ``dim x d`` sample, frozen span projected out, then orthonormalised."""
    have = 0 if basis is None else basis.shape[1]
    if dim - have < d:
        raise RankExhaustedError(f"complement has {dim - have} dimensions, rank {d} requested")
    G = rng.standard_normal((dim, d))
    for _ in range(2):
        if basis is not None and have:
            G = G - basis @ (basis.T @ G)
        G, _ = np.linalg.qr(G)
    return G


@dataclass
class Factor:
    U: torch.Tensor  # D_out x r
    S: torch.Tensor  # r
    V: torch.Tensor  # D_in x r
    task: int

    def __post_init__(self):
        # LAPACK hands back column-major factors; a fixed row-major layout keeps
        # matmul round-off identical before and after a checkpoint reload
        self.U, self.S, self.V = self.U.contiguous(), self.S.contiguous(), self.V.contiguous()

    def product(self) -> torch.Tensor:
        return (self.U * self.S) @ self.V.mT


class AdapterStack(nn.Module):
    """Linear layer ``y = x W^T + b`` whose weight is either dense or a stack of factors."""

    def __init__(self, d_in: int, d_out: int, bias: bool = True, init_std: float = 0.02,
                 generator: torch.Generator | None = None):
        super().__init__()
        self.d_in, self.d_out = d_in, d_out
        w = torch.randn(d_out, d_in, generator=generator, dtype=torch.float64) * init_std
        self.weight: nn.Parameter | None = nn.Parameter(w)
        self.bias = nn.Parameter(torch.zeros(d_out, dtype=torch.float64)) if bias else None
        self.frozen: list[Factor] = []
        self.U: nn.Parameter | None = None
        self.S: nn.Parameter | None = None
        self.V: nn.Parameter | None = None
        self.task = 1
        self._frozen_sum = torch.zeros(d_out, d_in, dtype=torch.float64)

    # -- composition ---------------------------------------------------------

    @property
    def low_rank(self) -> bool:
        return self.weight is None

    def effective_weight(self) -> torch.Tensor:
        if self.weight is not None:
            return self.weight
        W = self._frozen_sum
        if self.U is not None:
            W = W + (self.U * self.S) @ self.V.mT
        return W

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return nn.functional.linear(x, self.effective_weight(), self.bias)

    def frozen_basis(self) -> tuple[torch.Tensor | None, torch.Tensor | None]:
        if not self.frozen:
            return None, None
        return (torch.cat([f.U for f in self.frozen], dim=1),
                torch.cat([f.V for f in self.frozen], dim=1))

    def _refresh_frozen_sum(self) -> None:
        W = torch.zeros(self.d_out, self.d_in, dtype=torch.float64)
        for f in self.frozen:
            W = W + f.product()
        self._frozen_sum = W.detach()

    # -- task transitions ----------------------------------------------------

    def truncate(self, eps: float) -> int:
        """Replace the dense task-1 weight by its truncated SVD; returns the kept rank."""
        if self.weight is None:
            raise RuntimeError("layer already truncated")
        with torch.no_grad():
            U, s, V, rank = truncate_first_task(self.weight.detach(), eps)
        self.frozen = [Factor(U.clone(), s.clone(), V.clone(), task=1)]
        self.weight = None
        self._refresh_frozen_sum()
        return rank

    def freeze_adapter(self, confine: bool = True) -> None:
        """Freeze the trainable triple, re-factorised so its U and V are exactly orthonormal.

        The product ``U diag(S) V^T`` is preserved; directions with zero
        singular value are re-drawn inside the frozen complement when
        ``confine`` is set.
        """
        if self.U is None:
            return
        with torch.no_grad():
            U, S, V = self.U.detach(), self.S.detach(), self.V.detach()
            qu, ru = torch.linalg.qr(U)
            qv, rv = torch.linalg.qr(V)
            core = (ru * S) @ rv.mT
            p, sig, rt = torch.linalg.svd(core)
            Un, Vn = qu @ p, qv @ rt.mT
            if confine:
                bu, bv = self.frozen_basis()
                Un, Vn = reproject_params(Un, Vn, bu, bv)
                Un, Vn = _reorthonormalise(Un), _reorthonormalise(Vn)
        self.frozen.append(Factor(Un.clone(), sig.clone(), Vn.clone(), task=self.task))
        self.U = self.S = self.V = None
        self._refresh_frozen_sum()

    def init_adapter(self, d: int, rng: np.random.Generator, task: int, confine: bool = True) -> None:
        """Start task ``task`` with a fresh triple; ``S = 0`` keeps the weight unchanged."""
        if self.weight is not None:
            raise RuntimeError("truncate the task-1 weight before adding adapters")
        self.freeze_adapter(confine=confine)
        bu, bv = self.frozen_basis()
        np_bu = bu.numpy() if (confine and bu is not None) else None
        np_bv = bv.numpy() if (confine and bv is not None) else None
        U = sample_complement(np_bu, self.d_out, d, rng)
        V = sample_complement(np_bv, self.d_in, d, rng)
        self.U = nn.Parameter(torch.from_numpy(np.ascontiguousarray(U)))
        self.V = nn.Parameter(torch.from_numpy(np.ascontiguousarray(V)))
        self.S = nn.Parameter(torch.zeros(d, dtype=torch.float64))
        self.task = task

    # -- training hooks ------------------------------------------------------

    def ortho_loss(self) -> torch.Tensor:
        if self.U is None:
            return torch.zeros((), dtype=torch.float64)
        return intra_ortho_loss(self.U, self.V)

    def project_grads(self) -> None:
        bu, bv = self.frozen_basis()
        if self.U is None or bu is None:
            return
        if self.U.grad is not None:
            self.U.grad = project_gradient(self.U.grad, bu)
        if self.V.grad is not None:
            self.V.grad = project_gradient(self.V.grad, bv)

    def reproject(self) -> None:
        bu, bv = self.frozen_basis()
        if self.U is None or bu is None:
            return
        with torch.no_grad():
            U, V = reproject_params(self.U.data, self.V.data, bu, bv)
            self.U.data.copy_(U)
            self.V.data.copy_(V)

    # -- serialisation -------------------------------------------------------

    def layout(self) -> dict:
        return {
            "d_in": self.d_in,
            "d_out": self.d_out,
            "dense": self.weight is not None,
            "frozen": [{"task": f.task, "rank": int(f.S.numel())} for f in self.frozen],
            "adapter_rank": None if self.U is None else int(self.S.numel()),
            "task": self.task,
        }

    def named_state(self) -> dict[str, torch.Tensor]:
        out = {}
        if self.weight is not None:
            out["weight"] = self.weight.detach()
        if self.bias is not None:
            out["bias"] = self.bias.detach()
        for i, f in enumerate(self.frozen):
            out[f"frozen.{i}.U"], out[f"frozen.{i}.S"], out[f"frozen.{i}.V"] = f.U, f.S, f.V
        if self.U is not None:
            out["U"], out["S"], out["V"] = self.U.detach(), self.S.detach(), self.V.detach()
        return out

    def load_named_state(self, layout: dict, tensors: dict[str, torch.Tensor]) -> None:
        self.weight = nn.Parameter(tensors["weight"].clone()) if layout["dense"] else None
        if self.bias is not None:
            self.bias = nn.Parameter(tensors["bias"].clone())
        self.frozen = [
            Factor(tensors[f"frozen.{i}.U"].clone(), tensors[f"frozen.{i}.S"].reshape(-1).clone(),
                   tensors[f"frozen.{i}.V"].clone(), task=entry["task"])
            for i, entry in enumerate(layout["frozen"])
        ]
        if layout["adapter_rank"] is None:
            self.U = self.S = self.V = None
        else:
            self.U = nn.Parameter(tensors["U"].clone())
            self.S = nn.Parameter(tensors["S"].reshape(-1).clone())
            self.V = nn.Parameter(tensors["V"].clone())
        self.task = layout["task"]
        self._refresh_frozen_sum()


def _reorthonormalise(P: torch.Tensor) -> torch.Tensor:
    q, r = torch.linalg.qr(P)
    sign = torch.sign(torch.diagonal(r))
    sign[sign == 0] = 1.0
    return q * sign


def adapter_layers(module: nn.Module) -> dict[str, AdapterStack]:
    return {name: m for name, m in module.named_modules() if isinstance(m, AdapterStack)}
