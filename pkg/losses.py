"""
Training losses: prototype, one-vs-all, loss mixup, bi-level contrastive,
consistency, sharpened pseudo-label and the joint objective.

Per-sample functions take a `reduction` of "mean" (default), "sum" or "none".
"""

from dataclasses import dataclass
from typing import Callable, Dict, Optional, Union

import torch
import torch.nn.functional as F

from errors import ContractError
from identify import Subset

EPS = 1e-12

Weight = Union[float, torch.Tensor]


def _reduce(values: torch.Tensor, reduction: str) -> torch.Tensor:
    if reduction == "none":
        return values
    if reduction == "sum":
        return values.sum()
    if reduction == "mean":
        return values.mean() if values.numel() else values.sum()
    raise ValueError(f"Unknown reduction: {reduction}")


def _as_batch(t: torch.Tensor, single_dim: int):
    """Lift a single sample to a batch of one; report whether it was lifted"""
    if t.dim() == single_dim:
        return t.unsqueeze(0), True
    return t, False


def proto_loss(z: torch.Tensor, y: torch.Tensor, prototypes: torch.Tensor, tau: float,
               reduction: str = "mean") -> torch.Tensor:
    """-P_y . z / tau + log sum_c exp(P_c . z / tau)"""
    z, single = _as_batch(z, 1)
    y = torch.as_tensor(y, device=z.device).reshape(-1).long()
    if (y >= prototypes.shape[0]).any() or (y < 0).any():
        raise IndexError(f"label out of range for {prototypes.shape[0]} prototypes")
    logits = z @ prototypes.t() / tau
    losses = torch.logsumexp(logits, dim=1) - logits.gather(1, y.unsqueeze(1)).squeeze(1)
    return losses[0] if single else _reduce(losses, reduction)


def ova_loss(ova_probs: torch.Tensor, y: torch.Tensor, reduction: str = "mean") -> torch.Tensor:
    """-log p^y(z=1) - sum_{j != y} log p^j(z=0), probabilities clamped at EPS"""
    ova_probs, single = _as_batch(ova_probs, 2)
    y = torch.as_tensor(y, device=ova_probs.device).reshape(-1).long()
    log_pos = ova_probs[..., 1].clamp_min(EPS).log()
    log_neg = ova_probs[..., 0].clamp_min(EPS).log()
    is_label = F.one_hot(y, ova_probs.shape[1]).bool()
    losses = -(log_pos.gather(1, y.unsqueeze(1)).squeeze(1)) - log_neg.masked_fill(is_label, 0.0).sum(1)
    return losses[0] if single else _reduce(losses, reduction)


def mixup_loss(loss_fn: Callable[[torch.Tensor, torch.Tensor], torch.Tensor], x_mix: torch.Tensor,
               y_a: torch.Tensor, y_b: torch.Tensor, lam: float) -> torch.Tensor:
    """lam * loss(x_mix, y_a) + (1 - lam) * loss(x_mix, y_b)"""
    return lam * loss_fn(x_mix, y_a) + (1 - lam) * loss_fn(x_mix, y_b)


def bcl_loss(z_weak: torch.Tensor, z_strong: torch.Tensor, labels: torch.Tensor, weights: Weight,
             tau: float, reduction: str = "mean") -> torch.Tensor:
    """
    Bi-level contrastive loss over 2|B| views.

    Every anchor gets the instance term against its other view plus one class term per
    view of another sample sharing its given label; class terms are scaled by
    w(x_i) * w(x_j) outside the log. The anchor sum is divided by 1 + |P(i)|.
    """
    n = z_weak.shape[0]
    if n < 2:
        return z_weak.new_zeros(())
    z = torch.cat((z_weak, z_strong), dim=0)
    labels = torch.as_tensor(labels, device=z.device).reshape(-1)
    weights = torch.as_tensor(weights, dtype=z.dtype, device=z.device)
    if weights.dim() == 0:
        weights = weights.expand(n)
    lab2 = torch.cat((labels, labels))
    w2 = torch.cat((weights, weights))

    sim = z @ z.t() / tau
    self_mask = torch.eye(2 * n, dtype=torch.bool, device=z.device)
    log_denom = torch.logsumexp(sim.masked_fill(self_mask, float("-inf")), dim=1, keepdim=True)
    log_prob = sim - log_denom

    anchors = torch.arange(2 * n, device=z.device)
    partner = (anchors + n) % (2 * n)
    instance = -log_prob[anchors, partner]

    pair_mask = torch.zeros_like(self_mask)
    pair_mask[anchors, partner] = True
    class_mask = (lab2.unsqueeze(0) == lab2.unsqueeze(1)) & ~self_mask & ~pair_mask
    pair_weight = w2.unsqueeze(1) * w2.unsqueeze(0)
    class_term = -torch.where(class_mask, pair_weight * log_prob, torch.zeros_like(log_prob)).sum(1)

    per_anchor = (instance + class_term) / (1.0 + class_mask.sum(1).to(z.dtype))
    return _reduce(per_anchor, reduction)


def consistency_loss(ova_probs_strong: torch.Tensor, ova_probs_weak: torch.Tensor,
                     reduction: str = "mean") -> torch.Tensor:
    """sum_c sum_j (p^c(z=j|strong) - p^c(z=j|weak))^2 per sample"""
    if ova_probs_strong.shape != ova_probs_weak.shape:
        raise ContractError(
            f"consistency_loss shape mismatch: {tuple(ova_probs_strong.shape)} vs {tuple(ova_probs_weak.shape)}"
        )
    strong, _ = _as_batch(ova_probs_strong, 2)
    weak, _ = _as_batch(ova_probs_weak, 2)
    per_sample = (strong - weak).pow(2).sum(dim=(1, 2))
    return _reduce(per_sample, reduction)


def sharpen(ybar: torch.Tensor, w: Weight, T: float) -> torch.Tensor:
    """
    Raise each component to the power w / T and renormalize.

    w = 0 makes every component 1 before normalization, giving the uniform vector.
    """
    w = torch.as_tensor(w, dtype=ybar.dtype, device=ybar.device)
    if w.dim() == 1:
        w = w.unsqueeze(1)
    return torch.softmax((w / T) * ybar.clamp_min(EPS).log(), dim=-1)


def pu_loss(proto_logits: torch.Tensor, ybar: torch.Tensor, w: Weight, T: float,
            reduction: str = "mean") -> torch.Tensor:
    """||softmax(proto_logits) - Sharpen(ybar, w, T)||^2 with no gradient through the target"""
    target = sharpen(ybar.detach(), w, T)
    p = torch.softmax(proto_logits, dim=-1)
    per_sample = (p - target).pow(2).sum(-1)
    if per_sample.dim() == 0:
        return per_sample
    return _reduce(per_sample, reduction)


@dataclass
class LossBreakdown:
    """Loss components of one batch and their weighted total"""
    l_proto: torch.Tensor
    l_ova: torch.Tensor
    l_pu: torch.Tensor
    l_con: torch.Tensor
    l_bcl: torch.Tensor
    total: torch.Tensor

    def as_dict(self) -> Dict[str, float]:
        return {name: float(getattr(self, name).detach()) for name in
                ("l_proto", "l_ova", "l_pu", "l_con", "l_bcl", "total")}

    def is_finite(self) -> bool:
        return all(torch.isfinite(getattr(self, name)).all() for name in
                   ("l_proto", "l_ova", "l_pu", "l_con", "l_bcl", "total"))


def _subset_mean(values: Optional[torch.Tensor], mask: torch.Tensor, like: torch.Tensor) -> torch.Tensor:
    if values is None or not bool(mask.any()):
        return like.new_zeros(())
    return values[mask].mean()


def total_loss(membership: torch.Tensor, ova_mix: Optional[torch.Tensor], proto_mix: Optional[torch.Tensor],
               pu_mix: Optional[torch.Tensor], con: Optional[torch.Tensor], bcl: Optional[torch.Tensor],
               lambda_con: float, lambda_bcl: float, lambda_proto: float = 1.0) -> LossBreakdown:
    """
    Route per-sample losses to their subsets and combine them.

    OVA^mix and Proto^mix average over clean samples, PU^mix over close samples,
    Con over clean and close, BCL is already a batch scalar. Per-sample tensors are
    full-batch length; entries outside a loss's subset are ignored.

    Raises:
        ContractError: a sample without a valid subset assignment
    """
    membership = torch.as_tensor(membership).long()
    valid = (membership == Subset.CLEAN) | (membership == Subset.CLOSE) | (membership == Subset.OPEN)
    if not bool(valid.all()):
        bad = torch.nonzero(~valid).flatten().tolist()
        raise ContractError(f"Batch positions {bad} have no partition assignment")

    present = [t for t in (ova_mix, proto_mix, pu_mix, con, bcl) if t is not None]
    like = present[0] if present else torch.zeros(())
    clean = membership == Subset.CLEAN
    close = membership == Subset.CLOSE

    l_ova = _subset_mean(ova_mix, clean, like)
    l_proto = _subset_mean(proto_mix, clean, like)
    l_pu = _subset_mean(pu_mix, close, like)
    l_con = _subset_mean(con, clean | close, like)
    l_bcl = bcl if bcl is not None else like.new_zeros(())
    total = l_ova + lambda_proto * l_proto + l_pu + lambda_con * l_con + lambda_bcl * l_bcl
    return LossBreakdown(l_proto=l_proto, l_ova=l_ova, l_pu=l_pu, l_con=l_con, l_bcl=l_bcl, total=total)
