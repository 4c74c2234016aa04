from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F


@dataclass
class ReidLossConfig:
    smoothing_epsilon: float = 0.1
    triplet_margin: float = 0.3
    w_cls: float = 1.0
    w_tri: float = 1.0

    def __post_init__(self):
        if not 0.0 <= self.smoothing_epsilon < 1.0:
            raise ValueError(f"smoothing_epsilon must lie in [0, 1), got {self.smoothing_epsilon}")
        if not (self.triplet_margin >= 0 and self.triplet_margin < float("inf")):
            raise ValueError(f"triplet_margin must be finite and >= 0, got {self.triplet_margin}")


def smoothed_cls_loss(logits: torch.Tensor, labels: torch.Tensor, epsilon: float = 0.1):
    """Cross-entropy against targets of 1-eps on the true class and eps/(C-1) elsewhere."""
    n, c = logits.shape
    labels = torch.as_tensor(labels, dtype=torch.long)
    if labels.numel() and (labels.min() < 0 or labels.max() >= c):
        raise ValueError(f"labels must lie in [0, {c}), got range "
                         f"[{int(labels.min())}, {int(labels.max())}]")
    log_p = F.log_softmax(logits, dim=1)
    if epsilon == 0 or c == 1:
        return F.nll_loss(log_p, labels)
    target = torch.full_like(log_p, epsilon / (c - 1))
    target.scatter_(1, labels.unsqueeze(1), 1.0 - epsilon)
    return -(target * log_p).sum(1).mean()


def pairwise_euclidean(features: torch.Tensor) -> torch.Tensor:
    """Exact pairwise distances with a zero (not NaN) gradient on coincident points."""
    diff = features.unsqueeze(1) - features.unsqueeze(0)
    sq = (diff * diff).sum(-1)
    pos = sq > 0
    return torch.where(pos, torch.sqrt(torch.where(pos, sq, torch.ones_like(sq))),
                       torch.zeros_like(sq))


def check_pk_labels(labels: torch.Tensor):
    uniq, counts = torch.unique(labels, return_counts=True)
    if len(uniq) < 2:
        raise ValueError("batch-hard triplet needs at least two identities in the batch")
    if bool((counts < 2).any()):
        raise ValueError("batch-hard triplet needs every identity at least twice in the batch")


def batch_hard_triplet(features: torch.Tensor, labels: torch.Tensor, margin: float = 0.3):
    """Mean over anchors of ``max(0, margin + hardest_pos - hardest_neg)``."""
    labels = torch.as_tensor(labels)
    check_pk_labels(labels)
    dist = pairwise_euclidean(features)
    same = labels.unsqueeze(0) == labels.unsqueeze(1)
    hardest_pos = dist.masked_fill(~same, float("-inf")).max(dim=1).values
    hardest_neg = dist.masked_fill(same, float("inf")).min(dim=1).values
    return F.relu(margin + hardest_pos - hardest_neg).mean()


def reid_loss(logits, embeddings, labels, config: ReidLossConfig):
    """Weighted classification + triplet loss; returns ``(total, {"cls": .., "tri": ..})``."""
    cls = smoothed_cls_loss(logits, labels, config.smoothing_epsilon)
    tri = batch_hard_triplet(embeddings, labels, config.triplet_margin)
    return config.w_cls * cls + config.w_tri * tri, {"cls": cls, "tri": tri}
