"""End-to-end synthetic experiment: corpus -> pretrain -> fine-tune -> the
ablation ladder of students, evaluated per seed and aggregated."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
import torch

from .config import RunConfig
from .losses import KDConfig
from .metrics import MetricReport
from .models import build_classifier, build_discriminator, load_checkpoint, save_checkpoint
from .pipeline import evaluate
from .signal_core import (
    SignalRecord,
    Split,
    load_class_names,
    load_dataset,
    preprocess,
    split_dataset,
    synth_generate,
)
from .training import (
    TensorSet,
    distill,
    finetune,
    pretrain_restoration,
    pretrain_teacher,
    train_supervised_student,
    with_restored,
)

log = logging.getLogger(__name__)

METRIC_KEYS = ("ranking_loss", "coverage", "map", "macro_auc", "macro_f1", "macro_fbeta")

VARIANTS = ("baseline", "vanilla_kd", "liteheart_i", "liteheart_ii", "liteheart")


def variant_kd(name: str, base: KDConfig) -> KDConfig | None:
    """KD settings for each rung of the ablation ladder (``None`` = no distillation)."""
    if name == "baseline":
        return None
    if name == "vanilla_kd":
        return replace(base, region_mix=False, loss_beta=0.0, semi_supervised=False)
    if name == "liteheart_i":
        return replace(base, region_mix=True, loss_beta=0.0, semi_supervised=False)
    if name == "liteheart_ii":
        return replace(base, region_mix=True, semi_supervised=False)
    if name == "liteheart":
        return replace(base, region_mix=True, semi_supervised=True)
    raise ValueError(f"unknown variant {name!r}")


@dataclass
class Prepared:
    split: Split
    labeled: TensorSet
    unlabeled: TensorSet
    val: TensorSet
    test: TensorSet
    class_names: list


def prepare_records(records: list[SignalRecord], target_fs: float | None = None) -> list[SignalRecord]:
    return [preprocess(r, target_fs) for r in records]


def prepare_downstream(records: list[SignalRecord], cfg: RunConfig, class_names=None) -> Prepared:
    split = split_dataset(records, cfg.split)
    return Prepared(
        split,
        TensorSet.from_records(split.labeled),
        TensorSet.from_records(split.unlabeled, labeled=False),
        TensorSet.from_records(split.val),
        TensorSet.from_records(split.test),
        list(class_names or [f"class{k}" for k in range(len(split.labeled[0].labels))]),
    )


def load_records(path, cfg: RunConfig) -> tuple[list[SignalRecord], list[str]]:
    """Read a dataset directory and preprocess it at the configured sample rate."""
    records = prepare_records(load_dataset(path), cfg.sample_rate)
    lengths = {r.length for r in records}
    if len(lengths) > 1:
        raise ValueError(f"{path}: records must share one length after resampling, found {sorted(lengths)[:5]}")
    labeled = [r for r in records if r.labels is not None]
    n_classes = len(labeled[0].labels) if labeled else 0
    names = load_class_names(path) or [f"class{k}" for k in range(n_classes)]
    if len(names) != n_classes:
        raise ValueError(f"{path}: {len(names)} class names for {n_classes} label columns")
    return records, names


def synth_downstream(cfg: RunConfig) -> Prepared:
    records = prepare_records(synth_generate(cfg.synth), cfg.sample_rate)
    return prepare_downstream(records, cfg, cfg.synth.class_names)


def downstream_data(cfg: RunConfig) -> Prepared:
    """Downstream splits from ``data.dataset`` when set, else from the synthetic corpus."""
    if cfg.data.dataset:
        records, names = load_records(cfg.data.dataset, cfg)
        return prepare_downstream(records, cfg, names)
    return synth_downstream(cfg)


def synth_pretrain_sets(cfg: RunConfig) -> tuple[TensorSet, TensorSet]:
    pc = cfg.pretrain_corpus
    if cfg.data.pretrain_dataset:
        records, _ = load_records(cfg.data.pretrain_dataset, cfg)
    else:
        scfg = replace(cfg.synth, n_records=pc.n_records, seed=pc.seed)
        records = prepare_records(synth_generate(scfg), cfg.sample_rate)
    n_val = max(1, int(len(records) * pc.val_frac))
    return TensorSet.from_records(records[n_val:]), TensorSet.from_records(records[:n_val])


def pretrain_upstream(cfg: RunConfig, out: Path) -> tuple[Path, Path]:
    """Pretrain teacher and restoration once; cached as checkpoints under ``out``."""
    out.mkdir(parents=True, exist_ok=True)
    t_path, r_path = out / "teacher_pretrained.pt", out / "restoration_pretrained.pt"
    if t_path.exists() and r_path.exists():
        return t_path, r_path
    train, val = synth_pretrain_sets(cfg)
    n_classes = train.y.shape[1]
    torch.manual_seed(cfg.pretrain.seed)
    teacher, t_run = pretrain_teacher(train, val, cfg.pretrain, cfg.models.teacher, n_classes)
    t_run.write(out / "pretrain_teacher")
    save_checkpoint(teacher, t_path)
    torch.manual_seed(cfg.pretrain.seed)
    restoration, r_run = pretrain_restoration(train, val, cfg.pretrain, cfg.models.restoration, cfg.models.lead_index)
    r_run.write(out / "pretrain_restoration")
    save_checkpoint(restoration, r_path)
    return t_path, r_path


def finetune_upstream(prep: Prepared, cfg: RunConfig, seed: int, t_path: Path, r_path: Path, out: Path):
    teacher, _ = load_checkpoint(t_path)
    restoration, _ = load_checkpoint(r_path)
    ft = replace(cfg.finetune, seed=seed)
    teacher, t_run = finetune(teacher, prep.labeled, None, prep.val, ft)
    t_run.write(out / "finetune_teacher")
    rft = replace(ft, max_epochs=cfg.restoration_finetune_epochs)
    restoration, r_run = finetune(restoration, prep.labeled, prep.unlabeled, prep.val, rft, cfg.models.lead_index)
    r_run.write(out / "finetune_restoration")
    return teacher, restoration


def _fresh_student(cfg: RunConfig, n_classes: int, seed: int):
    torch.manual_seed(seed)
    student = build_classifier(cfg.models.student, n_classes, strides=tuple(cfg.models.student_strides) or None)
    disc = build_discriminator(student.feature_dim, n_classes)
    return student, disc


def train_variant(name: str, prep: Prepared, teacher, cfg: RunConfig, seed: int, out: Path):
    """Train one ladder rung; ``prep`` splits must already carry restored signals."""
    n_classes = prep.labeled.y.shape[1]
    student, disc = _fresh_student(cfg, n_classes, seed)
    tcfg = replace(cfg.train, seed=seed)
    kd = variant_kd(name, cfg.kd)
    if kd is None:
        student, run = train_supervised_student(student, prep.labeled, prep.val, tcfg)
    else:
        student, run = distill(teacher, None, student, disc, prep.labeled, prep.unlabeled, prep.val, kd, tcfg,
                               cfg.models.lead_index)
    run.write(out / name)
    return student, run


def _report_dict(rep: MetricReport) -> dict:
    return {k: float(v) if not isinstance(v, list) else [float(a) for a in v] for k, v in rep.to_dict().items()}


def write_json(path: Path, obj) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


@dataclass
class SeedResult:
    seed: int
    reports: dict = field(default_factory=dict)  # name -> MetricReport dict (incl. "teacher")


def restore_splits(prep: Prepared, restoration, lead_index: int) -> Prepared:
    return replace(
        prep,
        labeled=with_restored(prep.labeled, restoration, lead_index),
        unlabeled=with_restored(prep.unlabeled, restoration, lead_index),
        val=with_restored(prep.val, restoration, lead_index),
        test=with_restored(prep.test, restoration, lead_index),
    )


def checkpoint_meta(prep: Prepared, cfg: RunConfig) -> dict:
    return {"class_names": list(prep.class_names), "lead_index": cfg.models.lead_index}


def finetune_stage(prep: Prepared, cfg: RunConfig, seed: int, t_path: Path, r_path: Path, out: Path):
    """Fine-tune both upstream models for one seed and checkpoint them under ``out``."""
    out.mkdir(parents=True, exist_ok=True)
    teacher, restoration = finetune_upstream(prep, cfg, seed, t_path, r_path, out)
    meta = checkpoint_meta(prep, cfg)
    save_checkpoint(teacher, out / "teacher.pt", meta)
    save_checkpoint(restoration, out / "restoration.pt", meta)
    return teacher, restoration


def variant_stage(name: str, rp: Prepared, teacher, cfg: RunConfig, seed: int, out: Path):
    """Train and test one ladder rung on restored splits; returns (student, report dict)."""
    student, _ = train_variant(name, rp, teacher, cfg, seed, out)
    save_checkpoint(student, out / f"{name}.pt", checkpoint_meta(rp, cfg))
    rep = evaluate(student, rp.test, cfg.threshold, cfg.beta, use_restored=True)
    log.info("seed %d %-13s macro F1 %.4f  AUC %.4f", seed, name, rep.macro_f1, rep.macro_auc)
    return student, _report_dict(rep)


def run_seed(prep: Prepared, cfg: RunConfig, seed: int, t_path: Path, r_path: Path, out: Path,
             variants=VARIANTS, keep_models: bool = False):
    teacher, restoration = finetune_stage(prep, cfg, seed, t_path, r_path, out)
    rp = restore_splits(prep, restoration, cfg.models.lead_index)
    result = SeedResult(seed)
    result.reports["teacher"] = _report_dict(evaluate(teacher, rp.test, cfg.threshold, cfg.beta))
    models = {"teacher": teacher, "restoration": restoration}
    for name in variants:
        student, result.reports[name] = variant_stage(name, rp, teacher, cfg, seed, out)
        if keep_models:
            models[name] = student
    write_json(out / "metrics.json", result.reports)
    return (result, rp, models) if keep_models else result


def aggregate(results: list[SeedResult], names=("teacher",) + VARIANTS) -> dict:
    """mean and std (population, over seeds) of every metric for every row."""
    table = {}
    for name in names:
        if not all(name in r.reports for r in results):
            continue
        row = {}
        for key in METRIC_KEYS:
            vals = np.array([r.reports[name][key] for r in results])
            row[key] = {"mean": float(vals.mean()), "std": float(vals.std())}
        table[name] = row
    return table


def format_table(table: dict) -> str:
    head = f"{'system':<14}" + "".join(f"{k:>22}" for k in METRIC_KEYS)
    lines = [head]
    for name, row in table.items():
        cells = []
        for k in METRIC_KEYS:
            scale = 1 if k in ("ranking_loss", "coverage") else 100
            cells.append(f"{scale * row[k]['mean']:>12.3f} ± {scale * row[k]['std']:<7.3f}")
        lines.append(f"{name:<14}" + "".join(cells))
    return "\n".join(lines)


def run_experiment(cfg: RunConfig, out=None, seeds=None, variants=VARIANTS) -> dict:
    """Full ablation ladder over ``seeds``; writes per-seed metrics and the aggregated table."""
    out = Path(out or cfg.out)
    seeds = list(cfg.seeds if seeds is None else seeds)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(cfg.snapshot() + "\n")
    prep = downstream_data(cfg)
    t_path, r_path = pretrain_upstream(cfg, out / "pretrain")
    results = [run_seed(prep, cfg, s, t_path, r_path, out / f"seed{s}", variants) for s in seeds]
    table = aggregate(results, ("teacher",) + tuple(variants))
    write_json(out / "ablation.json", table)
    (out / "ablation.txt").write_text(format_table(table) + "\n")
    return {"seeds": {r.seed: r.reports for r in results}, "table": table}


def saliency_cases(y: torch.Tensor, synth, length: int, n: int = 50,
                   lead_index: int = 0) -> list[tuple[int, int, tuple[int, int]]]:
    """Up to ``n`` (row, class, window) triples: positive test records of classes visible in the input lead.

    Classes are visited round-robin so each contributes about equally.
    """
    classes = [k for k, p in enumerate(synth.pattern_table) if lead_index in p.leads]
    pools = {k: torch.nonzero(y[:, k] > 0.5).flatten().tolist() for k in classes}
    cases, pos = [], 0
    while len(cases) < n and any(pos < len(pools[k]) for k in classes):
        for k in classes:
            if pos < len(pools[k]) and len(cases) < n:
                cases.append((pools[k][pos], k, synth.pattern_table[k].window_samples(length)))
        pos += 1
    return cases
