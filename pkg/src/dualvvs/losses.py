"""NT-Xent contrastive loss, relative-position cross-entropy and their sum."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import torch
import torch.nn.functional as F

PROB_EPS = 1e-12


@dataclass(frozen=True)
class LossBreakdown:
    cl_loss: float
    rpl_loss: float
    total: float
    alpha: float

    def __post_init__(self):
        for name in ("cl_loss", "rpl_loss", "total", "alpha"):
            if not math.isfinite(getattr(self, name)):
                raise ValueError(f"{name} is not finite: {getattr(self, name)}")

    def to_dict(self) -> dict:
        return asdict(self)


def nt_xent(projections: torch.Tensor, temperature: float = 0.5, literal_temperature: bool = False) -> torch.Tensor:
    """Normalized temperature-scaled cross-entropy over ``2N`` projections.

    Rows ``2i`` and ``2i + 1`` (0-based) are views of the same image. The
    pairwise score is ``exp(cos / tau)``; with ``literal_temperature`` it is
    ``exp(cos) / tau`` instead, under which ``tau`` cancels out of every ratio.
    """
    if temperature <= 0:
        raise ValueError(f"temperature must be positive, got {temperature}")
    z = projections
    if z.ndim != 2:
        raise ValueError("projections must be a [2N, m] matrix")
    two_n = z.shape[0]
    if two_n < 4 or two_n % 2:
        raise ValueError(f"need an even number of rows >= 4, got {two_n}")
    norms = z.norm(dim=1, keepdim=True)
    if torch.any(norms == 0):
        raise ValueError("zero-norm projection row: cosine similarity is undefined")
    u = z / norms
    sim = u @ u.t()
    logits = sim if literal_temperature else sim / temperature
    # exp(sim)/tau contributes a -log(tau) to every logit; it cancels in the ratio
    self_mask = torch.eye(two_n, dtype=torch.bool, device=z.device)
    logits = logits.masked_fill(self_mask, float("-inf"))
    partner = torch.arange(two_n, device=z.device) ^ 1
    log_prob = logits[torch.arange(two_n), partner] - torch.logsumexp(logits, dim=1)
    return -log_prob.mean()


def _check_labels(labels: torch.Tensor, n_classes: int, n_rows: int) -> torch.Tensor:
    labels = torch.as_tensor(labels, dtype=torch.int64)
    if labels.shape != (n_rows,):
        raise ValueError(f"labels must have shape ({n_rows},), got {tuple(labels.shape)}")
    if labels.numel() and (labels.min() < 0 or labels.max() >= n_classes):
        raise ValueError(f"labels must lie in 0..{n_classes - 1}")
    return labels


def rp_loss(probs: torch.Tensor, labels) -> torch.Tensor:
    """Mean ``-log p[i, d_i]`` over the batch, for rows that are distributions."""
    probs = torch.as_tensor(probs)
    if probs.ndim != 2 or probs.shape[1] != 8:
        raise ValueError("probs must be [N, 8]")
    labels = _check_labels(labels, 8, probs.shape[0])
    if torch.any(probs < 0) or torch.any((probs.sum(dim=1) - 1).abs() > 1e-4):
        raise ValueError("each probs row must be a probability distribution (sum 1 within 1e-4)")
    picked = probs[torch.arange(probs.shape[0]), labels]
    return -torch.log(picked.clamp_min(PROB_EPS)).mean()


def rp_loss_from_log_probs(log_probs: torch.Tensor, labels) -> torch.Tensor:
    """Same quantity as :func:`rp_loss`, computed from log-softmax outputs."""
    labels = _check_labels(labels, log_probs.shape[1], log_probs.shape[0])
    return F.nll_loss(log_probs, labels)


def combine(cl, rpl, alpha: float):
    """``cl + alpha * rpl`` on tensors (keeps the graph)."""
    if alpha < 0:
        raise ValueError(f"alpha must be >= 0, got {alpha}")
    return cl + alpha * rpl


def combined_loss(cl: float, rpl: float, alpha: float) -> LossBreakdown:
    if alpha < 0:
        raise ValueError(f"alpha must be >= 0, got {alpha}")
    cl, rpl = float(cl), float(rpl)
    return LossBreakdown(cl, rpl, cl + alpha * rpl, float(alpha))
