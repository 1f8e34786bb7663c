"""Dense matrix primitives, a finite-difference gradient oracle and the CMLM container.

Every primitive accepts either a numpy array or a torch tensor and returns the
same kind, so the model code and the reference checks share one definition.
"""

from __future__ import annotations

import io
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Mapping

import numpy as np
import torch

MAGIC = b"CMLM"
NORM_EPS = 1e-12


class NonFiniteError(ValueError):
    """Raised when NaN or Inf reaches an API boundary."""


def _is_tensor(x) -> bool:
    return isinstance(x, torch.Tensor)


def check_finite(x, what: str = "input") -> None:
    ok = bool(torch.isfinite(x).all()) if _is_tensor(x) else bool(np.isfinite(x).all())
    if not ok:
        raise NonFiniteError(f"{what} contains non-finite entries")


def softmax_rows(M):
    """Row-wise softmax, stabilised by subtracting the row maximum."""
    if _is_tensor(M):
        # one reduction catches NaN and +-inf; the elementwise scan only runs to confirm
        if not torch.isfinite(M.detach().sum()):
            check_finite(M, "softmax_rows input")
        return torch.softmax(M, dim=-1)  # fused kernel, same max-shift inside
    check_finite(M, "softmax_rows input")
    M = np.asarray(M, dtype=np.float64)
    e = np.exp(M - M.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def cosine_sim(u, v):
    """Cosine similarity along the last axis (broadcasting).

    Returns 0 wherever either vector has norm below 1e-12.
    """
    if u.shape[-1] != v.shape[-1]:
        raise ValueError(f"dimension mismatch: {u.shape[-1]} vs {v.shape[-1]}")
    if _is_tensor(u) or _is_tensor(v):
        u = torch.as_tensor(u)
        v = torch.as_tensor(v, dtype=u.dtype)
        nu = torch.linalg.vector_norm(u, dim=-1)
        nv = torch.linalg.vector_norm(v, dim=-1)
        degenerate = (nu < NORM_EPS) | (nv < NORM_EPS)
        # keep the backward pass finite on the masked branch
        denom = torch.where(degenerate, torch.ones_like(nu * nv), nu * nv)
        cos = (u * v).sum(dim=-1) / denom
        return torch.where(degenerate, torch.zeros_like(cos), cos)
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    nu = np.linalg.norm(u, axis=-1)
    nv = np.linalg.norm(v, axis=-1)
    degenerate = (nu < NORM_EPS) | (nv < NORM_EPS)
    denom = np.where(degenerate, 1.0, nu * nv)
    cos = np.where(degenerate, 0.0, (u * v).sum(axis=-1) / denom)
    cos = np.clip(cos, -1.0, 1.0)
    return float(cos) if cos.ndim == 0 else cos


def svd(W):
    """Thin SVD ``W = U diag(s) V^T`` with ``s`` nonincreasing.

    Note that the third return value is ``V`` (columns are right singular
    vectors), not ``V^T``.
    """
    check_finite(W, "svd input")
    if _is_tensor(W):
        U, s, Vh = torch.linalg.svd(W, full_matrices=False)
        return U, s, Vh.mT
    U, s, Vh = np.linalg.svd(np.asarray(W, dtype=np.float64), full_matrices=False)
    return U, s, Vh.T


# ---------------------------------------------------------------------------
# gradient oracle
# ---------------------------------------------------------------------------


@dataclass
class GradReport:
    errors: dict[str, float]
    tol: float
    analytic: dict[str, np.ndarray] = field(repr=False, default_factory=dict)
    numeric: dict[str, np.ndarray] = field(repr=False, default_factory=dict)

    @property
    def max_error(self) -> float:
        return max(self.errors.values(), default=0.0)

    @property
    def passed(self) -> bool:
        return self.max_error <= self.tol

    def summary(self) -> str:
        worst = max(self.errors, key=self.errors.get) if self.errors else "-"
        return f"max rel err {self.max_error:.2e} ({worst}), tol {self.tol:.0e}, {'pass' if self.passed else 'FAIL'}"


def relative_error(a: np.ndarray, f: np.ndarray) -> float:
    """``|a - f| / max(1e-8, |a| + |f|)`` with tensor norms in place of absolute values."""
    num = float(np.linalg.norm(a - f))
    return num / max(1e-8, float(np.linalg.norm(a)) + float(np.linalg.norm(f)))


def grad_check(
    loss_fn: Callable[[Mapping[str, torch.Tensor]], torch.Tensor],
    params: Mapping[str, np.ndarray | torch.Tensor],
    tol: float = 1e-4,
    h: float = 1e-5,
    analytic: Mapping[str, np.ndarray] | None = None,
) -> GradReport:
    """Compare analytic gradients against central finite differences.

    ``loss_fn`` receives a dict of float64 tensors and returns a scalar tensor.
    Analytic gradients come from autograd unless ``analytic`` is supplied
    (used for negative controls).
    """
    base = {k: torch.as_tensor(np.asarray(v.detach() if _is_tensor(v) else v), dtype=torch.float64).clone()
            for k, v in params.items()}

    def evaluate(p: Mapping[str, torch.Tensor]) -> float:
        with torch.no_grad():
            return float(loss_fn(p))

    first, second = evaluate(base), evaluate(base)
    if first != second:
        raise ValueError(f"loss_fn is not deterministic ({first!r} != {second!r})")
    if not np.isfinite(first):
        raise NonFiniteError("loss_fn returned a non-finite value")

    if analytic is None:
        leaves = {k: v.clone().requires_grad_(True) for k, v in base.items()}
        loss = loss_fn(leaves)
        grads = torch.autograd.grad(loss, list(leaves.values()), allow_unused=True)
        analytic = {
            k: (np.zeros(v.shape) if g is None else g.detach().numpy().copy())
            for (k, v), g in zip(leaves.items(), grads)
        }

    numeric: dict[str, np.ndarray] = {}
    errors: dict[str, float] = {}
    for name, value in base.items():
        fd = np.zeros(value.shape)
        flat = value.view(-1)
        for i in range(flat.numel()):
            orig = float(flat[i])
            flat[i] = orig + h
            up = evaluate(base)
            flat[i] = orig - h
            down = evaluate(base)
            flat[i] = orig
            fd.reshape(-1)[i] = (up - down) / (2 * h)
        numeric[name] = fd
        errors[name] = relative_error(np.asarray(analytic[name]).reshape(fd.shape), fd)
    return GradReport(errors=errors, tol=tol, analytic=dict(analytic), numeric=numeric)


# ---------------------------------------------------------------------------
# CMLM binary container: b"CMLM", u32 rows, u32 cols, little-endian f64 payload
# ---------------------------------------------------------------------------


def dumps_matrix(M) -> bytes:
    a = np.asarray(M.detach() if _is_tensor(M) else M, dtype="<f8")
    if a.ndim == 1:
        a = a[None, :]
    if a.ndim != 2:
        raise ValueError(f"CMLM stores 2-D matrices, got shape {a.shape}")
    check_finite(a, "matrix")
    return MAGIC + struct.pack("<II", *a.shape) + np.ascontiguousarray(a).tobytes()


def loads_matrix(buf: bytes) -> np.ndarray:
    if buf[:4] != MAGIC:
        raise ValueError("not a CMLM container (bad magic)")
    rows, cols = struct.unpack("<II", buf[4:12])
    payload = buf[12:]
    if len(payload) != rows * cols * 8:
        raise ValueError(f"CMLM payload has {len(payload)} bytes, expected {rows * cols * 8}")
    return np.frombuffer(payload, dtype="<f8").reshape(rows, cols).astype(np.float64)


def write_matrix(path: str | Path | io.IOBase, M) -> None:
    data = dumps_matrix(M)
    if isinstance(path, io.IOBase):
        path.write(data)
    else:
        Path(path).write_bytes(data)


def read_matrix(path: str | Path) -> np.ndarray:
    return loads_matrix(Path(path).read_bytes())
