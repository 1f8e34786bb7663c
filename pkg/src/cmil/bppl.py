"""Bag-prototype pseudo-labelling of instances.

Attention is rescaled to per-instance class probabilities, a positive and a
negative prototype are pooled from the bag, and each instance is labelled by
which side of the prototype midpoint its residual points to.  Confident labels
from correctly classified bags supervise the normalised attention.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch

from .model import BagOutput, bag_loss
from .numeric import cosine_sim, softmax_rows

POSITIVE, NEGATIVE = 0, 1  # column order of the pseudo-label probabilities


@dataclass(frozen=True)
class BpplConfig:
    temperature: float = 0.5
    tau: float = 0.35
    lambda1: float = 0.5
    lambda2: float = 1.0
    delta: float = 1e-6
    positive_classes: frozenset[int] = field(default_factory=lambda: frozenset({1}))

    def __post_init__(self):
        if self.temperature <= 0:
            raise ValueError("temperature must be > 0")
        if not 0 <= self.tau <= 0.5:
            raise ValueError("tau must lie in [0, 0.5]")
        if self.lambda1 < 0 or self.lambda2 < 0:
            raise ValueError("loss weights must be >= 0")


@dataclass
class AccEstimator:
    """Exponential moving average of training-bag correctness."""

    momentum: float = 0.99
    value: float = 0.0

    def update(self, correct: bool) -> float:
        self.value = self.momentum * self.value + (1 - self.momentum) * float(correct)
        self.value = min(1.0, max(0.0, self.value))
        return self.value


@dataclass
class PrototypePair:
    x_bag: torch.Tensor
    x_rev: torch.Tensor
    reversed_attention: torch.Tensor

    @property
    def midpoint(self) -> torch.Tensor:
        return (self.x_bag + self.x_rev) / 2

    @property
    def r(self) -> torch.Tensor:
        return self.x_bag - self.midpoint

    @property
    def r_rev(self) -> torch.Tensor:
        return self.x_rev - self.midpoint


def normalize_attention(A):
    """``alpha_m = (a_m - min a) / max a``; all zeros when ``max a < 1e-12``."""
    if isinstance(A, torch.Tensor):
        top = A.max()
        if top.item() < 1e-12:
            return torch.zeros_like(A)
        return (A - A.min()) / top
    A = np.asarray(A, dtype=np.float64)
    top = A.max()
    if top < 1e-12:
        return np.zeros_like(A)
    return (A - A.min()) / top


def reversed_attention(alpha):
    weights = 1 - alpha
    total = weights.sum()
    if (total.item() if isinstance(total, torch.Tensor) else total) <= 0:
        n = alpha.shape[0]
        return torch.full_like(alpha, 1.0 / n) if isinstance(alpha, torch.Tensor) else np.full(n, 1.0 / n)
    return weights / total


def compute_prototypes(H: torch.Tensor, A: torch.Tensor, alpha: torch.Tensor) -> PrototypePair:
    rev = reversed_attention(alpha)
    return PrototypePair(x_bag=A @ H, x_rev=rev @ H, reversed_attention=rev)


def sep_loss(pair: PrototypePair) -> torch.Tensor:
    return cosine_sim(pair.x_bag, pair.x_rev)


def pseudo_label_probs(H: torch.Tensor, pair: PrototypePair, temperature: float):
    """Return ``(p, y_hat, p_hat)``; ``p[:, 0]`` is the positive-class probability."""
    resid = H - pair.midpoint
    logits = torch.stack([cosine_sim(resid, pair.r), cosine_sim(resid, pair.r_rev)], dim=-1) / temperature
    p = softmax_rows(logits)
    # argmax with lowest-index tie-break; index 0 is the positive class
    y_hat = (p[:, POSITIVE] >= p[:, NEGATIVE]).to(torch.int64)
    p_hat = p.max(dim=-1).values
    return p, y_hat, p_hat


def adaptive_threshold(acc: AccEstimator | float, tau: float) -> float:
    value = acc.value if isinstance(acc, AccEstimator) else float(acc)
    return 0.5 + tau * value


def predict_instances(A) -> np.ndarray:
    """Evaluation rule shared by every instance metric: positive iff alpha >= 0.5."""
    alpha = normalize_attention(A.detach() if isinstance(A, torch.Tensor) else A)
    return (np.asarray(alpha) >= 0.5).astype(np.int64)


@dataclass
class InstanceTerms:
    """Everything the instance loss computed, for logging and tests."""

    loss: torch.Tensor
    sep: torch.Tensor | None = None
    per_instance: torch.Tensor | None = None
    selected: torch.Tensor | None = None  # mask of instances whose pseudo-label was used
    pseudo_labels: torch.Tensor | None = None
    threshold: float | None = None


def instance_loss(bag, out: BagOutput, config: BpplConfig, acc: AccEstimator | float,
                  detail: bool = False, gates_open: bool = False):
    """``1(Y in Y_pos) * (lambda1/M * sum L_m + lambda2 * L_sep)`` with hard gates.

    ``gates_open`` forces the correctness and confidence gates to 1; it exists
    for gradient oracles and is never used in training.
    """
    zero = torch.zeros((), dtype=out.logits.dtype)
    if bag.bag_label not in config.positive_classes:
        terms = InstanceTerms(loss=zero)
        return terms if detail else terms.loss

    alpha = normalize_attention(out.A)
    pair = compute_prototypes(out.H, out.A, alpha)
    sep = sep_loss(pair)

    with torch.no_grad():
        _, y_hat, p_hat = pseudo_label_probs(out.H.detach(), compute_prototypes(
            out.H.detach(), out.A.detach(), alpha.detach()), config.temperature)
    tau1 = adaptive_threshold(acc, config.tau)
    bag_ok = float(out.Y_hat == bag.bag_label)
    gate = bag_ok * (p_hat > tau1).to(alpha.dtype)
    if gates_open:
        gate = torch.ones_like(alpha)

    a = alpha.clamp(config.delta, 1 - config.delta)
    target = y_hat.to(alpha.dtype)
    bce = -(target * torch.log(a) + (1 - target) * torch.log(1 - a))
    per_instance = gate * bce
    M = alpha.shape[0]
    loss = config.lambda1 / M * per_instance.sum() + config.lambda2 * sep
    if not detail:
        return loss
    return InstanceTerms(loss=loss, sep=sep, per_instance=per_instance, selected=gate > 0,
                         pseudo_labels=y_hat, threshold=tau1)


def wsi_loss(bag, out: BagOutput, config: BpplConfig, acc: AccEstimator | float) -> torch.Tensor:
    return bag_loss(out.logits, bag.bag_label) + instance_loss(bag, out, config, acc)
