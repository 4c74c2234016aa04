"""Scheme comparison harness.

Schemes, all evaluated on the same query/gallery split:

* ``A``    single-image baseline (student trained without distillation)
* ``B``    baseline features averaged over K shots of the ground-truth identity
* ``C``    the K-shot teacher on channel-concatenated shots
* ``MTS``  student distilled with the plain grouped loss
* ``UMTS`` student distilled with the uncertainty-aware loss

B and C read identity labels at test time, so they are upper bounds rather
than deployable methods.
"""
from __future__ import annotations

import copy
import csv
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .backbone import Backbone
from .config import Config
from .data import IdentityDataset, anchored_group
from .evaluation import (EvalResult, distance_matrix, dump_uncertainty, evaluate,
                         extract_features, occlusion_contrast)
from .trainer import derive_seed, train_student, train_teacher

log = logging.getLogger(__name__)

SCHEMES = ("A", "B", "C", "MTS", "UMTS")
EVAL_SPLITS = ("query", "gallery")


def scheme_b_feature(model: Backbone, shots) -> np.ndarray:
    """Mean stage-5 feature over K shots."""
    return extract_features(model, np.asarray(shots)).mean(axis=0)


def eval_groups(dataset: IdentityDataset, K: int, seed: int):
    """One K-shot group per query/gallery image, led by that image."""
    rng = np.random.default_rng(derive_seed(seed, "eval"))
    idx = np.flatnonzero(np.isin(dataset.splits, EVAL_SPLITS))
    return {int(i): anchored_group(dataset, int(i), K, rng, EVAL_SPLITS) for i in idx}


def _retrieval(dataset: IdentityDataset, feats_of, max_rank: int) -> EvalResult:
    q = dataset.split_indices("query")
    g = dataset.split_indices("gallery")
    dists = distance_matrix(feats_of(q), feats_of(g))
    return evaluate(dists, dataset.identity_ids[q], dataset.camera_ids[q],
                    dataset.identity_ids[g], dataset.camera_ids[g], max_rank)


def evaluate_single(model: Backbone, dataset: IdentityDataset, max_rank: int = 20) -> EvalResult:
    return _retrieval(dataset, lambda idx: extract_features(model, dataset.images[idx]), max_rank)


def evaluate_mean_shots(model: Backbone, dataset: IdentityDataset, groups, max_rank: int = 20):
    def feats(idx):
        shots = np.concatenate([groups[int(i)].shots for i in idx])
        f = extract_features(model, shots)
        return f.reshape(len(idx), -1, f.shape[1]).mean(axis=1)
    return _retrieval(dataset, feats, max_rank)


def evaluate_teacher(teacher: Backbone, dataset: IdentityDataset, groups, max_rank: int = 20):
    def feats(idx):
        return extract_features(teacher, np.stack([groups[int(i)].teacher_input for i in idx]))
    return _retrieval(dataset, feats, max_rank)


@dataclass
class AblationRow:
    scheme: str
    seed: int
    mAP: float
    rank1: float
    rank5: float


@dataclass
class AblationReport:
    rows: list[AblationRow] = field(default_factory=list)
    uncertainty: list[dict] = field(default_factory=list)

    def metric(self, scheme: str, seed: int, name: str = "mAP") -> float:
        for r in self.rows:
            if r.scheme == scheme and r.seed == seed:
                return getattr(r, name)
        raise KeyError((scheme, seed))

    @property
    def seeds(self) -> list[int]:
        return sorted({r.seed for r in self.rows})

    def wins(self, a: str, b: str, strict: bool = True) -> int:
        """Seeds where scheme ``a`` beats (or, non-strict, ties) scheme ``b`` in mAP."""
        n = 0
        for s in self.seeds:
            x, y = self.metric(a, s), self.metric(b, s)
            n += (x > y) if strict else (x >= y)
        return n

    def write(self, out_dir) -> Path:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        with open(out / "ablation.tsv", "w", newline="") as fh:
            w = csv.writer(fh, delimiter="\t", lineterminator="\n")
            w.writerow(["scheme", "seed", "mAP", "rank1", "rank5"])
            for r in self.rows:
                w.writerow([r.scheme, r.seed, f"{r.mAP:.6f}", f"{r.rank1:.6f}", f"{r.rank5:.6f}"])
        summary = {
            "schemes": {
                s: {
                    "mAP_mean": float(np.mean([r.mAP for r in self.rows if r.scheme == s])),
                    "rank1_mean": float(np.mean([r.rank1 for r in self.rows if r.scheme == s])),
                }
                for s in SCHEMES if any(r.scheme == s for r in self.rows)
            },
            "seeds": self.seeds,
            "rows": [asdict(r) for r in self.rows],
            "uncertainty": self.uncertainty,
        }
        (out / "ablation_summary.json").write_text(json.dumps(summary, indent=1, sort_keys=True))
        return out / "ablation.tsv"


def _with(cfg: Config, **changes) -> Config:
    new = copy.deepcopy(cfg)
    for dotted, value in changes.items():
        section, key = dotted.split("__")
        setattr(getattr(new, section), key, value)
    new.validate()
    return new


def run_seed(dataset: IdentityDataset, cfg: Config, seed: int, report: AblationReport,
             log_dir=None):
    cfg = _with(cfg, sampler__seed=seed)
    K, max_rank = cfg.sampler.K, cfg.eval.max_rank
    log_of = (lambda name: None) if log_dir is None else (
        lambda name: Path(log_dir) / f"seed{seed}_{name}.jsonl")

    teacher, _ = train_teacher(dataset, cfg, log_path=log_of("teacher"))
    baseline, _, _ = train_student(dataset, None, _with(cfg, distill__lambdas=[0.0] * 5),
                                   log_path=log_of("baseline"))
    mts, _, _ = train_student(dataset, teacher, _with(cfg, distill__kind="mts"),
                              log_path=log_of("mts"))
    umts, heads, _ = train_student(dataset, teacher, _with(cfg, distill__kind="umts"),
                                   log_path=log_of("umts"))

    groups = eval_groups(dataset, K, seed)
    results = {
        "A": evaluate_single(baseline, dataset, max_rank),
        "B": evaluate_mean_shots(baseline, dataset, groups, max_rank),
        "C": evaluate_teacher(teacher, dataset, groups, max_rank),
        "MTS": evaluate_single(mts, dataset, max_rank),
        "UMTS": evaluate_single(umts, dataset, max_rank),
    }
    for scheme, res in results.items():
        report.rows.append(AblationRow(scheme, seed, res.map, res.rank(1),
                                       res.rank(min(5, len(res.cmc)))))
        log.info("seed %d scheme %s mAP %.4f rank1 %.4f", seed, scheme, res.map, res.rank(1))
    if heads is not None and 5 in heads.stages:
        rows = dump_uncertainty(teacher, umts, heads, list(groups.values()), dataset.occluded)
        occ, clean = occlusion_contrast(rows, stage=5)
        report.uncertainty.append({"seed": seed, "sigma2_occluded": occ, "sigma2_clean": clean})
    return results


def run_ablation(dataset: IdentityDataset, cfg: Config, seeds=None, out_dir=None,
                 log_dir=None) -> AblationReport:
    """Train and evaluate every scheme for each seed; optionally write the report files."""
    for split in EVAL_SPLITS:
        if not len(dataset.split_indices(split)):
            raise ValueError(f"dataset has no {split} records")
    report = AblationReport()
    for seed in (cfg.eval.seeds if seeds is None else seeds):
        run_seed(dataset, cfg, int(seed), report, log_dir)
    if out_dir is not None:
        report.write(out_dir)
    return report
