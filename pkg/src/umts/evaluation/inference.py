"""Inference-mode feature extraction and per-shot uncertainty dumps."""
from __future__ import annotations

import csv
import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch

from ..backbone import Backbone, forward_staged
from ..distillation import DistillHeads


@torch.no_grad()
def extract_features(model: Backbone, images, batch_size: int = 256) -> np.ndarray:
    """Stage-5 embeddings (N x embed_dim) for an N x H x W x C array, in eval mode."""
    images = np.asarray(images)
    c = model.config.input_channels
    if images.ndim != 4 or images.shape[-1] != c:
        raise ValueError(f"expected N x H x W x {c} images, got {images.shape}")
    was_training = model.training
    model.eval()
    try:
        chunks = [forward_staged(model, images[i:i + batch_size]).embedding.double().numpy()
                  for i in range(0, len(images), batch_size)]
    finally:
        model.train(was_training)
    if not chunks:
        return np.zeros((0, model.config.embed_dim))
    return np.concatenate(chunks)


@dataclass
class UncertaintyRow:
    identity: int
    shot: int
    stage: int
    upsilon: float
    sigma2: float
    record: int = -1
    occluded: bool = False


@torch.no_grad()
def dump_uncertainty(teacher: Backbone, student: Backbone, heads: DistillHeads, shot_groups,
                     occluded=None) -> list[UncertaintyRow]:
    """Predicted log-variance and variance for every (group, shot, stage).

    ``occluded`` optionally maps dataset record index -> flag, copied into
    the rows for cohort comparisons.
    """
    K = teacher.config.shots
    for g in shot_groups:
        if g.K != K:
            raise ValueError(f"teacher expects {K}-shot groups, got a {g.K}-shot group")
    dims = student.config.stage_dims()
    for b in heads.stages:
        if heads.stage_dims[b - 1] != dims[b - 1]:
            raise ValueError(f"stage {b} heads expect length {heads.stage_dims[b - 1]}, "
                             f"student produces {dims[b - 1]}")
    modes = (teacher.training, student.training, heads.training)
    teacher.eval()
    student.eval()
    heads.eval()
    rows = []
    try:
        t_in = np.stack([g.teacher_input for g in shot_groups])
        s_in = np.concatenate([g.shots for g in shot_groups])
        t_feat = forward_staged(teacher, t_in).pooled
        s_feat = forward_staged(student, s_in).pooled
        P = len(shot_groups)
        for b in heads.stages:
            th, sh, uh = heads.stage_heads(b)
            t_emb = th(t_feat[b - 1])
            s_emb = sh(s_feat[b - 1]).reshape(P, K, -1)
            ups = uh(t_emb.unsqueeze(1), s_emb).double().numpy()
            for i, g in enumerate(shot_groups):
                for k in range(K):
                    rec = int(g.indices[k])
                    u = float(ups[i, k])
                    rows.append(UncertaintyRow(
                        g.identity_id, k, b, u, math.exp(u), rec,
                        bool(occluded[rec]) if occluded is not None else False))
    finally:
        teacher.train(modes[0])
        student.train(modes[1])
        heads.train(modes[2])
    return rows


UNCERTAINTY_HEADER = ("identity", "shot", "stage", "upsilon", "sigma2", "record", "occluded")


def write_uncertainty_table(rows, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, delimiter="\t", lineterminator="\n")
        w.writerow(UNCERTAINTY_HEADER)
        for r in rows:
            d = asdict(r)
            d["occluded"] = int(d["occluded"])
            d["upsilon"] = f"{r.upsilon:.9g}"
            d["sigma2"] = f"{r.sigma2:.9g}"
            w.writerow([d[k] for k in UNCERTAINTY_HEADER])
    return Path(path)


def occlusion_contrast(rows, stage: int = 5) -> tuple[float, float]:
    """Mean sigma^2 of occluded vs clean shots at ``stage``."""
    occ = [r.sigma2 for r in rows if r.stage == stage and r.occluded]
    clean = [r.sigma2 for r in rows if r.stage == stage and not r.occluded]
    mean = lambda xs: float(np.mean(xs)) if xs else float("nan")  # noqa: E731
    return mean(occ), mean(clean)
