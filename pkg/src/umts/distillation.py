"""Projection heads, uncertainty heads and the teacher-to-student distillation losses.

Per stage b, teacher and student features are embedded into a shared space
by ``relu(bn(W x))`` and compared by squared Euclidean distance. The
uncertainty-aware variant weights each shot's distance by ``exp(-v) / 2``
where ``v = relu(w . [t, s])`` is the predicted log-variance, and adds
``reg_factor * v`` so that large variances are not free.
"""
from __future__ import annotations

from collections.abc import Iterable, Mapping, Sequence

import torch
import torch.nn as nn
import torch.nn.functional as F

STAGES = (1, 2, 3, 4, 5)
DEFAULT_REDUCTIONS = (16, 16, 16, 16, 4)
DEFAULT_LAMBDAS = (0.1, 0.1, 0.1, 0.1, 0.5)


class NonFiniteError(FloatingPointError):
    pass


def _check_finite(name, t):
    if not torch.isfinite(t).all():
        raise NonFiniteError(f"{name} contains non-finite values")


class ProjectionHead(nn.Module):
    def __init__(self, in_dim: int, reduction: int, stage: int | None = None):
        super().__init__()
        if reduction <= 0 or in_dim % reduction:
            raise ValueError(f"reduction {reduction} must divide feature length {in_dim}")
        self.stage = stage
        self.reduction = reduction
        self.in_dim = in_dim
        self.out_dim = in_dim // reduction
        self.fc = nn.Linear(in_dim, self.out_dim, bias=False)
        self.bn = nn.BatchNorm1d(self.out_dim)

    def forward(self, x):
        if x.shape[-1] != self.in_dim:
            raise ValueError(f"stage {self.stage} projection expects length {self.in_dim}, "
                             f"got {x.shape[-1]}")
        return F.relu(self.bn(self.fc(x)))


class UncertaintyHead(nn.Module):
    """Maps a concatenated (teacher, student) embedding pair to a log-variance >= 0."""

    def __init__(self, emb_dim: int, stage: int | None = None):
        super().__init__()
        self.stage = stage
        self.emb_dim = emb_dim
        self.fc = nn.Linear(2 * emb_dim, 1, bias=False)

    def forward(self, t_emb, s_emb):
        if t_emb.shape[-1] != self.emb_dim or s_emb.shape[-1] != self.emb_dim:
            raise ValueError(f"stage {self.stage} uncertainty head expects embeddings of length "
                             f"{self.emb_dim}, got {t_emb.shape[-1]} and {s_emb.shape[-1]}")
        t_emb, s_emb = torch.broadcast_tensors(t_emb, s_emb)
        return F.relu(self.fc(torch.cat([t_emb, s_emb], dim=-1))).squeeze(-1)


def project(head: ProjectionHead, feature, mode: str = "infer"):
    """Embed one feature vector (or a batch of them) with ``head``.

    ``mode="train"`` normalises with batch statistics and needs a batch;
    ``"infer"`` uses the running statistics.
    """
    if mode not in ("train", "infer"):
        raise ValueError(f"mode must be 'train' or 'infer', got {mode!r}")
    feature = torch.as_tensor(feature)
    head.train(mode == "train")
    if feature.dim() == 1:
        return head(feature.unsqueeze(0)).squeeze(0)
    return head(feature)


def kd_loss(t_emb, s_emb):
    """Squared Euclidean distance over the last axis."""
    t_emb, s_emb = torch.as_tensor(t_emb), torch.as_tensor(s_emb)
    if t_emb.shape[-1] != s_emb.shape[-1]:
        raise ValueError(f"embedding lengths differ: {t_emb.shape[-1]} vs {s_emb.shape[-1]}")
    return ((t_emb - s_emb) ** 2).sum(-1)


def kd_loss_group(t_emb, s_embs):
    """Sum of ``kd_loss(t_emb, s)`` over the K student embeddings.

    ``s_embs`` is a list of K vectors or a ``(..., K, d)`` tensor with
    ``t_emb`` shaped ``(..., d)``.
    """
    t_emb = torch.as_tensor(t_emb)
    if isinstance(s_embs, (list, tuple)):
        s_embs = torch.stack([torch.as_tensor(s) for s in s_embs])
    return kd_loss(t_emb.unsqueeze(-2), s_embs).sum(-1)


def log_uncertainty(head: UncertaintyHead, t_emb, s_emb):
    return head(torch.as_tensor(t_emb), torch.as_tensor(s_emb))


def _split_shots(s_features):
    if isinstance(s_features, (list, tuple)):
        s_features = torch.stack([torch.as_tensor(s) for s in s_features])
    return s_features


def _project_pair(teacher_head, student_head, t_feature, s_features, mode):
    """Project teacher ``(P, c)`` / ``(c,)`` and student ``(P, K, c)`` / ``(K, c)`` features."""
    t_feature = torch.as_tensor(t_feature)
    s_features = _split_shots(s_features)
    if s_features.dim() != t_feature.dim() + 1:
        raise ValueError(f"student features {tuple(s_features.shape)} do not match teacher "
                         f"features {tuple(t_feature.shape)} plus a shot axis")
    if t_feature.shape[-1] != s_features.shape[-1]:
        raise ValueError(f"teacher/student feature lengths differ: "
                         f"{t_feature.shape[-1]} vs {s_features.shape[-1]}")
    _check_finite("teacher features", t_feature)
    _check_finite("student features", s_features)
    single = t_feature.dim() == 1
    if single:
        t_feature, s_features = t_feature.unsqueeze(0), s_features.unsqueeze(0)
    P, K, c = s_features.shape
    t_emb = project(teacher_head, t_feature, mode)
    s_emb = project(student_head, s_features.reshape(P * K, c), mode).reshape(P, K, -1)
    return t_emb, s_emb, single


def ua_kdl(teacher_head: ProjectionHead, student_head: ProjectionHead,
           uncertainty_head: UncertaintyHead, t_feature, s_features, mode: str = "train", *,
           reg_factor: float = 0.5, upsilon=None):
    """Uncertainty-aware distillation loss for one stage.

    Returns ``(loss, upsilon)``. For a single identity (teacher feature of
    shape ``(c,)`` and K student features) the loss is
    ``sum_k exp(-v_k) / 2 * d_k + reg_factor * v_k`` and ``upsilon`` has shape
    ``(K,)``. For a batch of P identities the per-identity sums are averaged
    and ``upsilon`` is ``(P, K)``. Passing ``upsilon`` overrides the predicted
    log-variances (used to pin them to a fixed value).
    """
    t_emb, s_emb, single = _project_pair(teacher_head, student_head, t_feature, s_features, mode)
    dist = kd_loss(t_emb.unsqueeze(1), s_emb)
    if upsilon is None:
        ups = uncertainty_head(t_emb.unsqueeze(1), s_emb)
    else:
        ups = torch.as_tensor(upsilon, dtype=dist.dtype).expand_as(dist)
    per_shot = 0.5 * torch.exp(-ups) * dist + reg_factor * ups
    loss = per_shot.sum(-1).mean()
    return loss, (ups[0] if single else ups)


def grouped_kdl(teacher_head: ProjectionHead, student_head: ProjectionHead, t_feature, s_features,
                mode: str = "train"):
    """Plain grouped distillation (no uncertainty): mean over identities of the K-shot sum."""
    t_emb, s_emb, _ = _project_pair(teacher_head, student_head, t_feature, s_features, mode)
    return kd_loss_group(t_emb, s_emb).mean()


def backprop_scope(loss: torch.Tensor, groups: Mapping[str, Iterable[torch.nn.Parameter]]
                   ) -> dict[str, bool]:
    """Which parameter groups receive a nonzero gradient from ``loss``."""
    names = list(groups)
    flat, owner = [], []
    for name in names:
        for p in groups[name]:
            if p.requires_grad:
                flat.append(p)
                owner.append(name)
    mask = {name: False for name in names}
    if not flat:
        return mask
    grads = torch.autograd.grad(loss, flat, retain_graph=True, allow_unused=True)
    for name, g in zip(owner, grads):
        if g is not None and bool(torch.any(g != 0)):
            mask[name] = True
    return mask


class DistillHeads(nn.Module):
    """Teacher projections, student projections and uncertainty heads for the enabled stages."""

    def __init__(self, stage_dims: Sequence[int], reductions: Sequence[int] = DEFAULT_REDUCTIONS,
                 stages: Iterable[int] = STAGES):
        super().__init__()
        if len(stage_dims) != 5 or len(reductions) != 5:
            raise ValueError("stage_dims and reductions need one entry per stage (5)")
        self.stages = tuple(sorted(set(int(b) for b in stages)))
        if not self.stages or any(b not in STAGES for b in self.stages):
            raise ValueError(f"stages must be a nonempty subset of {STAGES}, got {self.stages}")
        self.stage_dims = tuple(int(d) for d in stage_dims)
        self.reductions = tuple(int(r) for r in reductions)
        self.teacher_proj = nn.ModuleDict()
        self.student_proj = nn.ModuleDict()
        self.uncertainty = nn.ModuleDict()
        for b in self.stages:
            c, r = self.stage_dims[b - 1], self.reductions[b - 1]
            self.teacher_proj[str(b)] = ProjectionHead(c, r, b)
            self.student_proj[str(b)] = ProjectionHead(c, r, b)
            self.uncertainty[str(b)] = UncertaintyHead(c // r, b)

    def reset_parameters(self, seed: int):
        gen = torch.Generator().manual_seed(int(seed))
        for m in self.modules():
            if isinstance(m, nn.Linear):
                nn.init.kaiming_normal_(m.weight, nonlinearity="relu", generator=gen)
            elif isinstance(m, nn.BatchNorm1d):
                nn.init.ones_(m.weight)
                nn.init.zeros_(m.bias)
                m.reset_running_stats()
        for head in self.uncertainty.values():
            nn.init.normal_(head.fc.weight, std=0.01, generator=gen)

    def stage_heads(self, b: int):
        key = str(b)
        return self.teacher_proj[key], self.student_proj[key], self.uncertainty[key]

    def stage_losses(self, t_pooled: Sequence[torch.Tensor], s_pooled: Sequence[torch.Tensor],
                     K: int, kind: str = "umts", reg_factor: float = 0.5,
                     stages: Iterable[int] | None = None):
        """Per-stage distillation losses for a batch of P groups.

        ``t_pooled[b-1]`` is ``(P, c_b)``; ``s_pooled[b-1]`` is ``(P*K, c_b)``
        with the K shots of each group contiguous. Returns
        ``{stage: (loss, upsilon or None)}``.
        """
        mode = "train" if self.training else "infer"
        out = {}
        for b in (self.stages if stages is None else stages):
            th, sh, uh = self.stage_heads(b)
            t = t_pooled[b - 1]
            s = s_pooled[b - 1].reshape(t.shape[0], K, -1)
            if kind == "umts":
                out[b] = ua_kdl(th, sh, uh, t, s, mode, reg_factor=reg_factor)
            elif kind == "mts":
                out[b] = (grouped_kdl(th, sh, t, s, mode), None)
            else:
                raise ValueError(f"unknown distillation kind {kind!r}")
        self.train(mode == "train")
        return out
