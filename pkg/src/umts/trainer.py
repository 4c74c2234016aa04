"""Two-phase optimisation: teacher on K-shot inputs, then student plus distillation heads.

Phase 1 trains the teacher with the re-id loss only. Phase 2 loads the
teacher, freezes it (eval mode, no gradient), and minimises
``reid(student) + sum_b lambda_b * distill_b`` over the student backbone and
the distillation heads. Stages with ``lambda_b == 0`` are dropped, so all-zero
weights give plain single-image training (the baseline).
"""
from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .backbone import Backbone, BackboneConfig, build_backbone
from .checkpoint import save_checkpoint, state_hash
from .config import Config
from .data import AugmentConfig, IdentityDataset, SamplerConfig, augment, concat_channels
from .data.sampling import build_shot_group, pk_batches
from .distillation import DistillHeads, NonFiniteError
from .reid_losses import ReidLossConfig, reid_loss

log = logging.getLogger(__name__)

_STREAMS = {"teacher": 1, "student": 2, "heads": 3, "batches": 4, "augment": 5, "eval": 6}


def derive_seed(seed: int, stream: str) -> int:
    """Independent 32-bit seed per named random stream."""
    return int(np.random.SeedSequence([int(seed), _STREAMS[stream]]).generate_state(1)[0])


def set_deterministic(enabled: bool = True):
    torch.use_deterministic_algorithms(enabled)
    if enabled:
        torch.set_num_threads(1)


@dataclass
class PhaseReport:
    phase: str
    seed: int
    epochs: list[dict] = field(default_factory=list)
    steps: int = 0
    wall_clock: float = 0.0
    checkpoint: str | None = None
    stopped_early: bool = False
    extra: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return dict(self.__dict__)


class StepLog:
    """JSON-lines sink for per-step loss breakdowns (kept in memory too)."""

    def __init__(self, path=None):
        self.records: list[dict] = []
        self._fh = None
        if path is not None:
            Path(path).parent.mkdir(parents=True, exist_ok=True)
            self._fh = open(path, "w")

    def write(self, record: dict):
        self.records.append(record)
        if self._fh is not None:
            self._fh.write(json.dumps(record, sort_keys=True) + "\n")

    def close(self):
        if self._fh is not None:
            self._fh.close()
            self._fh = None


def backbone_config(cfg: Config, num_classes: int, shots: int = 1) -> BackboneConfig:
    return BackboneConfig(
        input_channels=3 * shots,
        stage_channels=list(cfg.backbone.stage_channels),
        embed_dim=cfg.backbone.embed_dim,
        input_height=cfg.data.height,
        input_width=cfg.data.width,
        num_classes=num_classes,
    )


def reid_config(cfg: Config) -> ReidLossConfig:
    r = cfg.reid
    return ReidLossConfig(r.smoothing_epsilon, r.triplet_margin, r.w_cls, r.w_tri)


def augment_config(cfg: Config, dataset: IdentityDataset) -> AugmentConfig:
    fill = tuple(float(x) for x in dataset.channel_mean("train"))
    return AugmentConfig(pad=cfg.data.pad, flip_prob=cfg.data.flip_prob,
                         erase_prob=cfg.data.erase_prob, fill=fill)


def make_optimizer(params, cfg: Config, epochs: int):
    o = cfg.optimizer
    opt = torch.optim.Adam(params, lr=o.lr, betas=(o.beta1, o.beta2), weight_decay=o.weight_decay)
    milestone = max(1, int(round(o.decay_at * epochs)))
    sched = torch.optim.lr_scheduler.MultiStepLR(opt, milestones=[milestone], gamma=o.decay_factor)
    return opt, sched


def _nchw(arr: np.ndarray) -> torch.Tensor:
    return torch.from_numpy(np.ascontiguousarray(arr.transpose(0, 3, 1, 2)))


def _augmented_shots(group, aug: AugmentConfig, rng):
    return np.stack([augment(s, aug, rng) for s in group.shots])


def _finite_or_abort(value: torch.Tensor, step: int, steplog: StepLog, what: str):
    if not torch.isfinite(value).all():
        steplog.write({"event": "nonfinite", "step": step, "what": what})
        raise NonFiniteError(f"non-finite {what} at step {step}")


def _epoch_summary(records: list[dict], epoch: int) -> dict:
    rows = [r for r in records if r.get("epoch") == epoch and "total" in r]
    keys = sorted({k for r in rows for k in r if isinstance(r[k], float)})
    return {"epoch": epoch, **{k: float(np.mean([r[k] for r in rows if k in r])) for k in keys}}


def train_teacher(dataset: IdentityDataset, cfg: Config, log_path=None, checkpoint_path=None,
                  max_steps: int | None = None) -> tuple[Backbone, PhaseReport]:
    """Phase 1: re-id loss on channel-concatenated K-shot inputs.

    Each batch draws P identities; every identity contributes
    ``teacher_groups_per_id`` independently sampled K-shot groups, so the
    triplet loss has positives on the teacher side.
    """
    cfg.validate()
    K, P, seed = cfg.sampler.K, cfg.sampler.P, cfg.sampler.seed
    groups_per_id = cfg.distill.teacher_groups_per_id
    if groups_per_id < 2:
        raise ValueError("teacher_groups_per_id must be >= 2 for batch-hard mining")
    dataset.check_shots(K)
    labels_of = dataset.label_map("train")
    teacher = build_backbone(backbone_config(cfg, len(labels_of), K), derive_seed(seed, "teacher"))
    teacher.train()
    opt, sched = make_optimizer(teacher.parameters(), cfg, cfg.optimizer.teacher_epochs)
    batch_rng = np.random.default_rng(derive_seed(seed, "batches"))
    aug_rng = np.random.default_rng(derive_seed(seed, "augment"))
    aug = augment_config(cfg, dataset)
    rcfg = reid_config(cfg)
    sampler = SamplerConfig(P, K, seed)
    steplog = StepLog(log_path)
    report = PhaseReport("teacher", seed)
    start, step = time.perf_counter(), 0
    best, best_epoch = math.inf, 0
    try:
        for epoch in range(cfg.optimizer.teacher_epochs):
            for batch in pk_batches(dataset, sampler, batch_rng):
                inputs, labels = [], []
                for group in batch:
                    extra = [build_shot_group(dataset, group.identity_id, K, batch_rng)
                             for _ in range(groups_per_id - 1)]
                    for g in [group] + extra:
                        inputs.append(concat_channels(_augmented_shots(g, aug, aug_rng)))
                        labels.append(labels_of[g.identity_id])
                out = teacher(_nchw(np.stack(inputs)))
                y = torch.tensor(labels)
                loss, parts = reid_loss(out.logits, out.embedding, y, rcfg)
                _finite_or_abort(loss, step, steplog, "teacher loss")
                opt.zero_grad(set_to_none=True)
                loss.backward()
                opt.step()
                acc = float((out.logits.argmax(1) == y).float().mean())
                steplog.write({"phase": "teacher", "epoch": epoch, "step": step,
                               "total": loss.item(), "cls": parts["cls"].item(),
                               "tri": parts["tri"].item(), "acc": acc})
                step += 1
                if max_steps is not None and step >= max_steps:
                    break
            sched.step()
            summary = _epoch_summary(steplog.records, epoch)
            report.epochs.append(summary)
            log.info("teacher epoch %d loss %.4f acc %.3f", epoch, summary["total"], summary["acc"])
            if max_steps is not None and step >= max_steps:
                break
            if summary["total"] < best - cfg.optimizer.early_stop_delta:
                best, best_epoch = summary["total"], epoch
            elif epoch - best_epoch >= cfg.optimizer.early_stop_patience:
                report.stopped_early = True
                break
    finally:
        steplog.close()
    teacher.eval()
    report.steps = step
    report.wall_clock = time.perf_counter() - start
    report.extra["state_hash"] = state_hash(teacher.state_dict())
    if checkpoint_path is not None:
        save_checkpoint(checkpoint_path, teacher.state_dict(), phase="teacher",
                        config=cfg.to_dict(), extra={"K": K, "num_classes": len(labels_of)})
        report.checkpoint = str(checkpoint_path)
    return teacher, report


def active_stages(cfg: Config) -> list[int]:
    return [b for b in cfg.distill.stages if cfg.distill.lambdas[b - 1] > 0]


def build_heads(cfg: Config, student_cfg: BackboneConfig, seed: int, stages) -> DistillHeads:
    heads = DistillHeads(student_cfg.stage_dims(), cfg.distill.reductions, stages)
    heads.reset_parameters(derive_seed(seed, "heads"))
    return heads


def train_student(dataset: IdentityDataset, teacher: Backbone | None, cfg: Config, log_path=None,
                  checkpoint_path=None, heads_path=None, max_steps: int | None = None
                  ) -> tuple[Backbone, DistillHeads | None, PhaseReport]:
    """Phase 2: student re-id loss plus the weighted per-stage distillation losses.

    The teacher stays in eval mode and its features are computed without a
    graph, so its backbone parameters cannot change. Returns the student,
    the heads (None when no stage is active) and the report.
    """
    cfg.validate()
    K, P, seed = cfg.sampler.K, cfg.sampler.P, cfg.sampler.seed
    kind = cfg.distill.kind
    dataset.check_shots(K)
    labels_of = dataset.label_map("train")
    stages = active_stages(cfg)
    if stages and teacher is None:
        raise ValueError("distillation stages are enabled but no teacher was given")
    if teacher is not None and teacher.config.shots != K:
        raise ValueError(f"teacher was trained with K={teacher.config.shots}, config has K={K}")
    student_cfg = backbone_config(cfg, len(labels_of), 1)
    if teacher is not None and teacher.config.stage_dims() != student_cfg.stage_dims():
        raise ValueError(f"teacher stage dims {teacher.config.stage_dims()} do not match "
                         f"student {student_cfg.stage_dims()}")
    student = build_backbone(student_cfg, derive_seed(seed, "student"))
    student.train()
    heads = build_heads(cfg, student_cfg, seed, stages) if stages else None
    params = list(student.parameters())
    if heads is not None:
        heads.train()
        params += list(heads.parameters())
    teacher_hash = None
    if teacher is not None:
        teacher.eval()
        teacher_hash = state_hash(teacher.state_dict())
    opt, sched = make_optimizer(params, cfg, cfg.optimizer.student_epochs)
    batch_rng = np.random.default_rng(derive_seed(seed, "batches"))
    aug_rng = np.random.default_rng(derive_seed(seed, "augment"))
    aug = augment_config(cfg, dataset)
    rcfg = reid_config(cfg)
    sampler = SamplerConfig(P, K, seed)
    lambdas = cfg.distill.lambdas
    steplog = StepLog(log_path)
    report = PhaseReport("student" if stages else "baseline", seed)
    start, step = time.perf_counter(), 0
    try:
        for epoch in range(cfg.optimizer.student_epochs):
            for batch in pk_batches(dataset, sampler, batch_rng):
                shots = [_augmented_shots(g, aug, aug_rng) for g in batch]
                labels = torch.tensor([labels_of[g.identity_id] for g in batch for _ in range(K)])
                out = student(_nchw(np.concatenate(shots)))
                reid, parts = reid_loss(out.logits, out.embedding, labels, rcfg)
                total = reid
                record = {"phase": report.phase, "epoch": epoch, "step": step,
                          "reid": reid.item(), "cls": parts["cls"].item(),
                          "tri": parts["tri"].item()}
                if stages:
                    with torch.no_grad():
                        t_in = np.stack([concat_channels(s) for s in shots])
                        t_out = teacher(_nchw(t_in))
                    kd = heads.stage_losses(t_out.pooled, out.pooled, K, kind,
                                            cfg.distill.upsilon_reg_factor)
                    for b, (loss_b, ups) in kd.items():
                        total = total + lambdas[b - 1] * loss_b
                        record[f"kd{b}"] = loss_b.item()
                        record[f"lambda{b}"] = float(lambdas[b - 1])
                        if ups is not None:
                            u = ups.detach()
                            record[f"ups{b}_mean"] = float(u.mean())
                            record[f"ups{b}_max"] = float(u.max())
                record["total"] = total.item()
                _finite_or_abort(total, step, steplog, "student loss")
                opt.zero_grad(set_to_none=True)
                total.backward()
                opt.step()
                record["acc"] = float((out.logits.argmax(1) == labels).float().mean())
                steplog.write(record)
                step += 1
                if max_steps is not None and step >= max_steps:
                    break
            sched.step()
            report.epochs.append(_epoch_summary(steplog.records, epoch))
            log.info("%s epoch %d loss %.4f", report.phase, epoch, report.epochs[-1]["total"])
            if max_steps is not None and step >= max_steps:
                break
    finally:
        steplog.close()
    student.eval()
    if heads is not None:
        heads.eval()
    if teacher is not None and state_hash(teacher.state_dict()) != teacher_hash:
        raise RuntimeError("teacher backbone changed during student training")
    report.steps = step
    report.wall_clock = time.perf_counter() - start
    report.extra["teacher_hash"] = teacher_hash
    report.extra["state_hash"] = state_hash(student.state_dict())
    report.extra["stages"] = stages
    if checkpoint_path is not None:
        save_checkpoint(checkpoint_path, student.state_dict(), phase=report.phase,
                        config=cfg.to_dict(), extra={"num_classes": len(labels_of)})
        report.checkpoint = str(checkpoint_path)
    if heads_path is not None and heads is not None:
        save_checkpoint(heads_path, heads.state_dict(), phase="heads", config=cfg.to_dict(),
                        extra={"stages": stages, "K": K})
    return student, heads, report
