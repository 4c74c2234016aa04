"""Command-line entry point.

    umts gen-data --ids 50 --shots 8 --seed 1 --out runs/data
    umts train-teacher --config configs/bench.cfg --out runs/t
    umts train-student --config configs/bench.cfg --teacher runs/t/checkpoints/teacher.ckpt
    umts evaluate --checkpoint runs/s/checkpoints/student.ckpt
    umts ablate --config configs/bench.cfg --out runs/ablation
    umts dump-uncertainty --teacher T.ckpt --student S.ckpt --heads H.ckpt

Every run writes ``manifest.json`` (config echo, seed, version, wall clock)
to ``--out`` and puts artifacts under ``checkpoints/``, ``logs/`` and
``reports/``. Usage errors exit with status 2 and runtime failures with 1.
"""
from __future__ import annotations

import argparse
import json
import logging
import subprocess
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .ablation import eval_groups, evaluate_single, evaluate_teacher, run_ablation
from .backbone import build_backbone
from .checkpoint import load_checkpoint, load_into
from .config import Config, dump_config, load_config
from .data import SyntheticNoise, generate_synthetic_reid, load_dataset, save_dataset
from .distillation import DistillHeads
from .evaluation import dump_uncertainty, occlusion_contrast, write_uncertainty_table
from .trainer import backbone_config, set_deterministic, train_student, train_teacher

log = logging.getLogger("umts")


class UsageError(Exception):
    pass


def version_string() -> str:
    """``git describe`` when run from a checkout, else the package version."""
    try:
        out = subprocess.run(["git", "describe", "--always", "--dirty", "--tags"],
                             cwd=Path(__file__).resolve().parent, capture_output=True,
                             text=True, timeout=5)
        if out.returncode == 0 and out.stdout.strip():
            return f"{__version__}+g{out.stdout.strip()}"
    except (OSError, subprocess.SubprocessError):
        pass
    return __version__


def _common(p: argparse.ArgumentParser):
    p.add_argument("--config", help="INI config file")
    p.add_argument("--data-root", help="dataset directory holding manifest.tsv")
    p.add_argument("--out", default="out", help="output directory (default: out)")
    p.add_argument("--seed", type=int, help="run seed (overrides sampler.seed)")
    p.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE",
                   help="config override, repeatable")
    p.add_argument("--deterministic", action="store_true",
                   help="deterministic kernels and a single thread")
    p.add_argument("-v", "--verbose", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="umts", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")

    p = sub.add_parser("gen-data", help="write a synthetic multi-shot dataset")
    _common(p)
    p.add_argument("--ids", type=int, help="training identities")
    p.add_argument("--shots", type=int, help="images per identity")
    p.add_argument("--test-ids", type=int, help="query/gallery identities")

    p = sub.add_parser("train-teacher", help="phase 1: train the K-shot teacher")
    _common(p)
    p.add_argument("--max-steps", type=int)

    p = sub.add_parser("train-student", help="phase 2: distil into the single-image student")
    _common(p)
    p.add_argument("--teacher", help="teacher checkpoint (omit for a baseline student)")
    p.add_argument("--max-steps", type=int)

    p = sub.add_parser("evaluate", help="CMC/mAP of a student or teacher checkpoint")
    _common(p)
    p.add_argument("--checkpoint", required=True)

    p = sub.add_parser("ablate", help="train and compare schemes A, B, C, MTS and UMTS")
    _common(p)
    p.add_argument("--seeds", help="comma-separated seeds (default: eval.seeds)")

    p = sub.add_parser("dump-uncertainty", help="per-shot, per-stage uncertainty table")
    _common(p)
    p.add_argument("--teacher", required=True)
    p.add_argument("--student", required=True)
    p.add_argument("--heads", required=True)
    return parser


def _config(args) -> Config:
    try:
        cfg = load_config(args.config, args.set)
    except KeyError as exc:
        raise UsageError(exc.args[0]) from None
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    if args.seed is not None:
        cfg.sampler.seed = args.seed
    if args.data_root:
        cfg.data.data_root = args.data_root
    return cfg


def _dataset(cfg: Config):
    if cfg.data.data_root:
        return load_dataset(cfg.data.data_root)
    d = cfg.data
    return generate_synthetic_reid(
        d.num_ids, d.shots_per_id, SyntheticNoise(d.occlusion_prob, d.blur_prob, d.viewpoint_jitter),
        seed=d.seed, num_test_ids=d.num_test_ids, query_per_id=d.query_per_id,
        height=d.height, width=d.width, num_cameras=d.num_cameras)


def _load_model(path, cfg: Config, what: str):
    state, manifest = load_checkpoint(path)
    shots = int(manifest["extra"].get("K", cfg.sampler.K)) if manifest["phase"] == "teacher" else 1
    num_classes = int(manifest["extra"]["num_classes"])
    model = build_backbone(backbone_config(cfg, num_classes, shots), 0)
    load_into(model, state, what)
    return model.eval(), manifest


def cmd_gen_data(args, cfg: Config, out: Path) -> dict:
    d = cfg.data
    ids = d.num_ids if args.ids is None else args.ids
    shots = d.shots_per_id if args.shots is None else args.shots
    test_ids = d.num_test_ids if args.test_ids is None else args.test_ids
    seed = d.seed if args.seed is None else args.seed
    ds = generate_synthetic_reid(
        ids, shots, SyntheticNoise(d.occlusion_prob, d.blur_prob, d.viewpoint_jitter), seed=seed,
        num_test_ids=test_ids, query_per_id=d.query_per_id, height=d.height, width=d.width,
        num_cameras=d.num_cameras)
    root = Path(args.data_root) if args.data_root else out / "data"
    save_dataset(ds, root)
    print(f"wrote {len(ds)} images to {root}")
    return {"data_root": str(root), "images": len(ds), "data_seed": seed}


def cmd_train_teacher(args, cfg: Config, out: Path) -> dict:
    ds = _dataset(cfg)
    _, report = train_teacher(ds, cfg, log_path=out / "logs" / "teacher.jsonl",
                              checkpoint_path=out / "checkpoints" / "teacher.ckpt",
                              max_steps=args.max_steps)
    _write_json(out / "reports" / "teacher_report.json", report.to_dict())
    print(f"teacher: {report.steps} steps, checkpoint {report.checkpoint}")
    return {"checkpoint": report.checkpoint}


def cmd_train_student(args, cfg: Config, out: Path) -> dict:
    ds = _dataset(cfg)
    teacher = None
    if args.teacher:
        teacher, _ = _load_model(args.teacher, cfg, "teacher")
    _, heads, report = train_student(ds, teacher, cfg, log_path=out / "logs" / "student.jsonl",
                                     checkpoint_path=out / "checkpoints" / "student.ckpt",
                                     heads_path=out / "checkpoints" / "heads.ckpt",
                                     max_steps=args.max_steps)
    _write_json(out / "reports" / "student_report.json", report.to_dict())
    print(f"{report.phase}: {report.steps} steps, checkpoint {report.checkpoint}")
    return {"checkpoint": report.checkpoint, "heads": heads is not None}


def cmd_evaluate(args, cfg: Config, out: Path) -> dict:
    ds = _dataset(cfg)
    model, manifest = _load_model(args.checkpoint, cfg, "checkpoint")
    if manifest["phase"] == "teacher":
        res = evaluate_teacher(model, ds, eval_groups(ds, model.config.shots, cfg.sampler.seed),
                               cfg.eval.max_rank)
    else:
        res = evaluate_single(model, ds, cfg.eval.max_rank)
    summary = res.summary()
    _write_json(out / "reports" / "eval.json", summary)
    print(f"mAP {res.map:.4f}  rank-1 {res.rank(1):.4f}  "
          f"({res.num_valid_queries} queries, {res.num_excluded_queries} excluded)")
    return summary


def cmd_ablate(args, cfg: Config, out: Path) -> dict:
    ds = _dataset(cfg)
    seeds = [int(s) for s in args.seeds.split(",")] if args.seeds else None
    if seeds is None and args.seed is not None:
        seeds = [args.seed]
    report = run_ablation(ds, cfg, seeds, out_dir=out / "reports", log_dir=out / "logs")
    for row in report.rows:
        print(f"seed {row.seed}  {row.scheme:<5} mAP {row.mAP:.4f}  rank-1 {row.rank1:.4f}")
    return {"report": str(out / "reports" / "ablation.tsv"), "seeds": report.seeds}


def cmd_dump_uncertainty(args, cfg: Config, out: Path) -> dict:
    ds = _dataset(cfg)
    teacher, _ = _load_model(args.teacher, cfg, "teacher")
    student, _ = _load_model(args.student, cfg, "student")
    state, manifest = load_checkpoint(args.heads)
    heads = DistillHeads(student.config.stage_dims(), cfg.distill.reductions,
                         manifest["extra"].get("stages", cfg.distill.stages))
    load_into(heads, state, "heads")
    heads.eval()
    groups = list(eval_groups(ds, teacher.config.shots, cfg.sampler.seed).values())
    rows = dump_uncertainty(teacher, student, heads, groups, ds.occluded)
    (out / "reports").mkdir(parents=True, exist_ok=True)
    path = write_uncertainty_table(rows, out / "reports" / "uncertainty.tsv")
    result = {"table": str(path), "rows": len(rows)}
    if 5 in heads.stages:
        occ, clean = occlusion_contrast(rows, stage=5)
        result.update(sigma2_occluded=occ, sigma2_clean=clean)
        print(f"stage-5 mean sigma^2: occluded {occ:.4f}  clean {clean:.4f}")
    print(f"wrote {len(rows)} rows to {path}")
    return result


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train-teacher": cmd_train_teacher,
    "train-student": cmd_train_student,
    "evaluate": cmd_evaluate,
    "ablate": cmd_ablate,
    "dump-uncertainty": cmd_dump_uncertainty,
}


def _write_json(path: Path, obj):
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=1, sort_keys=True, default=_jsonable))


def _jsonable(x):
    if isinstance(x, np.generic):
        return x.item()
    if isinstance(x, np.ndarray):
        return x.tolist()
    return str(x)


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        cfg = _config(args)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"umts: error: {exc}", file=sys.stderr)
        return 2
    if args.deterministic:
        set_deterministic(True)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    dump_config(cfg, out / "config.cfg")
    manifest = {"command": args.command, "argv": list(sys.argv[1:] if argv is None else argv),
                "config": cfg.to_dict(), "seed": cfg.sampler.seed, "version": version_string(),
                "deterministic": bool(args.deterministic)}
    start = time.perf_counter()
    status = 0
    try:
        manifest["result"] = COMMANDS[args.command](args, cfg, out)
    except Exception as exc:  # one-line diagnostic, details in the log
        log.debug("command failed", exc_info=True)
        print(f"umts: error: {type(exc).__name__}: {exc}", file=sys.stderr)
        manifest["error"] = f"{type(exc).__name__}: {exc}"
        status = 1
    manifest["status"] = status
    manifest["wall_clock"] = time.perf_counter() - start
    _write_json(out / "manifest.json", manifest)
    return status


if __name__ == "__main__":
    sys.exit(main())
