"""``liteheart`` command line.

Exit codes: 0 success, 1 invalid input (bad config, missing checkpoint,
empty class intersection), 2 failure while running.
"""

from __future__ import annotations

import argparse
import json
import logging
import subprocess
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np
import torch

from . import experiment as ex
from .bench import efficiency_report
from .config import ConfigError, RunConfig, _build, load_config
from .metrics import compute_report
from .models import build_classifier, build_restoration, load_checkpoint
from .pipeline import CardiacSystem, evaluate
from .signal_core import save_dataset, synth_generate
from .training import TensorSet

log = logging.getLogger("liteheart")


class UsageError(Exception):
    """Input problem detected before any compute; maps to exit code 1."""


# -- helpers -------------------------------------------------------------------------


def _require(path: Path, what: str = "checkpoint") -> Path:
    path = Path(path)
    if not path.exists():
        raise UsageError(f"missing {what}: {path}")
    return path


def _resolve_config(args) -> RunConfig:
    overrides = {}
    if args.out is not None:
        overrides["out"] = str(args.out)
    if args.tier_student is not None:
        overrides["models.student"] = args.tier_student
    if args.tier_restoration is not None:
        overrides["models.restoration"] = args.tier_restoration
    if args.lead_index is not None:
        overrides["models.lead_index"] = args.lead_index
    if args.labeled_frac is not None:
        overrides["split.labeled_frac"] = args.labeled_frac
    if getattr(args, "resolved", None):
        data = json.loads(Path(args.resolved).read_text())
        for dotted, value in overrides.items():
            node = data
            *head, last = dotted.split(".")
            for p in head:
                node = node.setdefault(p, {})
            node[last] = value
        return _build(RunConfig, data, "")
    return load_config(args.config, overrides)


def _out(cfg: RunConfig) -> Path:
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(cfg.snapshot() + "\n")
    return out


def _seed(args, cfg: RunConfig) -> int:
    return args.seed if args.seed is not None else int(cfg.seeds[0])


def _seed_dir(out: Path, seed: int) -> Path:
    return out / f"seed{seed}"


def _write_json(path: Path, obj) -> None:
    ex.write_json(Path(path), obj)


def _report_out(rep, class_names, path: Path, per_class_csv: Path | None = None, extra: dict | None = None) -> None:
    d = ex._report_dict(rep)
    d["class_names"] = list(class_names)
    if extra:
        d.update(extra)
    _write_json(path, d)
    if per_class_csv is not None:
        from .report import write_per_class_csv

        write_per_class_csv(per_class_csv, list(class_names), {"system": rep.per_class_auc})


def _pretrained_paths(out: Path) -> tuple[Path, Path]:
    return out / "pretrain" / "teacher_pretrained.pt", out / "pretrain" / "restoration_pretrained.pt"


def _load_student_system(args, cfg: RunConfig, seed_dir: Path):
    ckpt = _require(Path(args.checkpoint) if args.checkpoint else seed_dir / f"{args.variant}.pt")
    model, payload = load_checkpoint(ckpt)
    meta = payload.get("extra", {})
    if getattr(model, "features", None) is None:
        raise UsageError(f"{ckpt} is not a classifier checkpoint")
    in_leads = model.features.conv[0][0].in_channels
    restoration = None
    if in_leads == 12 and not args.teacher_input:
        r_path = _require(Path(args.restoration) if args.restoration else seed_dir / "restoration.pt")
        restoration, _ = load_checkpoint(r_path)
    lead = meta.get("lead_index", cfg.models.lead_index)
    return CardiacSystem(model, restoration, lead), meta


# -- commands ------------------------------------------------------------------------


def cmd_synth(args, cfg: RunConfig) -> int:
    out = _out(cfg)
    synth = cfg.synth if args.n_records is None else replace(cfg.synth, n_records=args.n_records)
    if args.seed is not None:
        synth = replace(synth, seed=args.seed)
    records = synth_generate(synth)
    save_dataset(records, out / "dataset", synth.class_names)
    log.info("wrote %d records to %s", len(records), out / "dataset")
    return 0


def cmd_pretrain(args, cfg: RunConfig) -> int:
    out = _out(cfg)
    t, r = ex.pretrain_upstream(cfg, out / "pretrain")
    log.info("pretrained checkpoints: %s, %s", t, r)
    return 0


def cmd_finetune(args, cfg: RunConfig) -> int:
    out = _out(cfg)
    t_path, r_path = _pretrained_paths(out)
    t_path = _require(Path(args.teacher) if args.teacher else t_path)
    r_path = _require(Path(args.restoration) if args.restoration else r_path)
    seed = _seed(args, cfg)
    prep = ex.downstream_data(cfg)
    ex.finetune_stage(prep, cfg, seed, t_path, r_path, _seed_dir(out, seed))
    return 0


def cmd_distill(args, cfg: RunConfig) -> int:
    out = _out(cfg)
    seed = _seed(args, cfg)
    sd = _seed_dir(out, seed)
    t_path = _require(Path(args.teacher) if args.teacher else sd / "teacher.pt")
    r_path = _require(Path(args.restoration) if args.restoration else sd / "restoration.pt")
    teacher, _ = load_checkpoint(t_path)
    restoration, _ = load_checkpoint(r_path)
    prep = ex.downstream_data(cfg)
    rp = ex.restore_splits(prep, restoration, cfg.models.lead_index)
    _, rep = ex.variant_stage(args.variant, rp, teacher, cfg, seed, sd)
    _write_json(sd / f"metrics_{args.variant}.json", rep)
    return 0


def cmd_eval(args, cfg: RunConfig) -> int:
    out = _out(cfg)
    if args.scores is not None:
        scores = np.load(_require(Path(args.scores), "scores file"))
        labels = np.load(_require(Path(args.labels), "labels file")) if args.labels else None
        if labels is None:
            raise UsageError("--scores needs --labels")
        if scores.shape != labels.shape:
            raise UsageError(f"scores {scores.shape} and labels {labels.shape} differ in shape")
        rep = compute_report(scores, labels, cfg.threshold, cfg.beta)
        names = [f"class{k}" for k in range(scores.shape[1])]
    else:
        seed = _seed(args, cfg)
        system, meta = _load_student_system(args, cfg, _seed_dir(out, seed))
        prep = ex.downstream_data(cfg)
        names = meta.get("class_names", prep.class_names)
        rep = evaluate(system, prep.test, cfg.threshold, cfg.beta)
    csv_path = out / "eval_per_class_auc.csv" if args.per_class_csv else None
    _report_out(rep, names, out / "eval.json", csv_path)
    print(rep.table())
    return 0


def class_intersection(model_classes: list[str], data_classes: list[str]) -> tuple[list[str], list[str], list[str]]:
    """Shared class names (in model order) plus those dropped from each side."""
    shared = [c for c in model_classes if c in data_classes]
    return shared, [c for c in model_classes if c not in shared], [c for c in data_classes if c not in shared]


def cmd_external_eval(args, cfg: RunConfig) -> int:
    out = _out(cfg)
    path = args.external_dataset or cfg.data.external_dataset
    if not path:
        raise UsageError("no external dataset given (--external-dataset or data.external_dataset)")
    _require(Path(path) / "manifest.jsonl", "external dataset manifest")
    seed = _seed(args, cfg)
    system, meta = _load_student_system(args, cfg, _seed_dir(out, seed))
    model_classes = meta.get("class_names")
    if not model_classes:
        raise UsageError("checkpoint carries no class names; cannot match classes")
    records, data_classes = ex.load_records(path, cfg)
    shared, dropped_model, dropped_data = class_intersection(model_classes, data_classes)
    if not shared:
        raise UsageError("empty class intersection")
    if dropped_model or dropped_data:
        log.info("external eval: excluded model-only classes %s and dataset-only classes %s", dropped_model, dropped_data)
    labeled = [r for r in records if r.labels is not None]
    if not labeled:
        raise UsageError(f"{path}: no labeled records")
    ts = TensorSet.from_records(labeled)
    m_idx = [model_classes.index(c) for c in shared]
    d_idx = [data_classes.index(c) for c in shared]
    with torch.no_grad():
        system.eval()
        scores = torch.sigmoid(torch.cat([system(ts.x[i:i + 256]) for i in range(0, len(ts), 256)]))
    rep = compute_report(scores[:, m_idx].double().numpy(), ts.y[:, d_idx].numpy(), cfg.threshold, cfg.beta)
    extra = {"excluded_model_classes": dropped_model, "excluded_dataset_classes": dropped_data, "n_records": len(ts)}
    csv_path = out / "external_per_class_auc.csv" if args.per_class_csv else None
    _report_out(rep, shared, out / "external_eval.json", csv_path, extra)
    print(rep.table())
    return 0


def cmd_explain(args, cfg: RunConfig) -> int:
    from .xai import grad_cam, top_fraction_recall

    out = _out(cfg)
    seed = _seed(args, cfg)
    system, _ = _load_student_system(args, cfg, _seed_dir(out, seed))
    prep = ex.downstream_data(cfg)
    inputs = prep.test.x
    if system.restoration is not None:
        with torch.no_grad():
            system.restoration.eval()
            inputs = system.restoration(inputs[:, system.lead_index:system.lead_index + 1])
    lead = system.lead_index if system.restoration is not None else 0
    cases = ex.saliency_cases(prep.test.y, cfg.synth, inputs.shape[-1], args.n, lead)
    if not cases:
        raise UsageError("no positive test records of a class visible in the input lead")
    rows = []
    for row, cls, window in cases:
        cam = grad_cam(system.classifier, inputs[row], cls, args.variant)
        recall = top_fraction_recall(cam.heatmap, window)
        rows.append({"row": row, "class": prep.class_names[cls], "window": list(window), "recall": recall})
        if args.plot and len(rows) <= args.plot:
            from .report import plot_saliency

            plot_saliency(prep.test.x[row, lead].numpy(), cam.heatmap, out / "saliency" / f"case{len(rows):03d}.svg",
                          window, f"{prep.class_names[cls]} (record {row})")
    summary = {"mean_recall": float(np.mean([r["recall"] for r in rows])), "n": len(rows), "cases": rows}
    _write_json(out / "saliency.json", summary)
    print(f"mean top-decile recall over {len(rows)} records: {summary['mean_recall']:.3f}")
    return 0


def bench_rows(cfg: RunConfig, length: int, reps: int, n_classes: int, student_tiers=("tiny", "small", "base")) -> list[dict]:
    shape12, shape1 = (4, 12, length), (4, 1, length)
    rows = []
    torch.manual_seed(0)
    teacher = build_classifier("teacher", n_classes)
    rows.append({"name": "teacher", **json.loads(efficiency_report(teacher, shape12, reps).to_json())})
    del teacher
    for tier in student_tiers:
        system = CardiacSystem(build_classifier(tier, n_classes), build_restoration(tier), cfg.models.lead_index)
        rows.append({"name": f"system-{tier}", **json.loads(efficiency_report(system, shape1, reps).to_json())})
    return rows


def cmd_bench(args, cfg: RunConfig) -> int:
    out = _out(cfg)
    torch.set_num_threads(1)
    rows = bench_rows(cfg, args.length, args.reps, cfg.synth.n_classes, tuple(args.tiers))
    _write_json(out / "bench.json", rows)
    if args.plot:
        from .report import plot_tier_sweep

        plot_tier_sweep(rows, out / "bench.svg")
    for r in rows:
        print(f"{r['name']:<14} params {r['param_count'] / 1e6:8.2f}M  GFLOPs {r['flops_per_forward'] / 1e9:8.2f}  "
              f"latency {r['latency_ms']['median_ms']:8.1f} ms  peak {r['peak_memory_mb']:8.1f} MB")
    return 0


def _seed_command(cfg_path: Path, seed: int, out: Path, variants) -> list[str]:
    return [sys.executable, "-m", "liteheart.cli", "seed-run", "--resolved", str(cfg_path), "--seed", str(seed),
            "--out", str(out), "--variants", *variants]


def cmd_seed_run(args, cfg: RunConfig) -> int:
    """One seed of the ablation; launched as a separate process by ``ablate``."""
    out = Path(cfg.out)
    t_path, r_path = (_require(p) for p in _pretrained_paths(out))
    prep = ex.downstream_data(cfg)
    ex.run_seed(prep, cfg, _seed(args, cfg), t_path, r_path, _seed_dir(out, _seed(args, cfg)), tuple(args.variants))
    return 0


def cmd_ablate(args, cfg: RunConfig) -> int:
    out = _out(cfg)
    seeds = [args.seed] if args.seed is not None else list(cfg.seeds)
    variants = tuple(args.variants)
    ex.pretrain_upstream(cfg, out / "pretrain")
    if args.jobs > 1:
        pending = [subprocess.Popen(_seed_command(out / "config.json", s, out, variants)) for s in seeds[: args.jobs]]
        queue = seeds[args.jobs:]
        while pending:
            proc = pending.pop(0)
            if proc.wait() != 0:
                raise RuntimeError(f"seed process {proc.args} exited with {proc.returncode}")
            if queue:
                pending.append(subprocess.Popen(_seed_command(out / "config.json", queue.pop(0), out, variants)))
        results = [ex.SeedResult(s, json.loads((_seed_dir(out, s) / "metrics.json").read_text())) for s in seeds]
    else:
        prep = ex.downstream_data(cfg)
        t_path, r_path = _pretrained_paths(out)
        results = [ex.run_seed(prep, cfg, s, t_path, r_path, _seed_dir(out, s), variants) for s in seeds]
    table = ex.aggregate(results, ("teacher",) + variants)
    _write_json(out / "ablation.json", table)
    (out / "ablation.txt").write_text(ex.format_table(table) + "\n")
    names = cfg.synth.class_names if not cfg.data.dataset else None
    if args.per_class_csv:
        from .report import write_per_class_csv

        for r in results:
            cols = names or [f"class{k}" for k in range(len(r.reports["teacher"]["per_class_auc"]))]
            write_per_class_csv(_seed_dir(out, r.seed) / "per_class_auc.csv", cols,
                                {k: v["per_class_auc"] for k, v in r.reports.items()})
    if args.plot:
        from .report import plot_ablation

        plot_ablation(table, out / "ablation.svg")
    print(ex.format_table(table))
    return 0


# -- parser ----------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="TOML run configuration")
    common.add_argument("--seed", type=int)
    common.add_argument("--out", type=Path, help="run directory (overrides the config's out)")
    common.add_argument("--tier-student", choices=("micro", "tiny", "small", "base"))
    common.add_argument("--tier-restoration", choices=("micro", "tiny", "small", "base"))
    common.add_argument("--lead-index", type=int)
    common.add_argument("--labeled-frac", type=float)
    common.add_argument("-v", "--verbose", action="store_true")

    model_args = argparse.ArgumentParser(add_help=False)
    model_args.add_argument("--checkpoint", help="classifier checkpoint (default: <out>/seed<k>/<variant>.pt)")
    model_args.add_argument("--restoration", help="restoration checkpoint (default: <out>/seed<k>/restoration.pt)")
    model_args.add_argument("--variant", default="liteheart", choices=ex.VARIANTS)
    model_args.add_argument("--teacher-input", action="store_true", help="feed 12-lead signals straight to the classifier")
    model_args.add_argument("--per-class-csv", action="store_true")

    p = argparse.ArgumentParser(prog="liteheart", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", parents=[common], help="write a synthetic corpus")
    s.add_argument("--n-records", type=int)
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("pretrain", parents=[common], help="pretrain teacher and restoration nets")
    s.set_defaults(func=cmd_pretrain)

    s = sub.add_parser("finetune", parents=[common], help="fine-tune pretrained nets on the downstream split")
    s.add_argument("--teacher")
    s.add_argument("--restoration")
    s.set_defaults(func=cmd_finetune)

    s = sub.add_parser("distill", parents=[common], help="train one student variant")
    s.add_argument("--teacher")
    s.add_argument("--restoration")
    s.add_argument("--variant", default="liteheart", choices=ex.VARIANTS)
    s.set_defaults(func=cmd_distill)

    s = sub.add_parser("eval", parents=[common, model_args], help="evaluate on the test split")
    s.add_argument("--scores", help=".npy score matrix to evaluate instead of a model")
    s.add_argument("--labels", help=".npy label matrix matching --scores")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("external_eval", aliases=["external-eval"], parents=[common, model_args],
                       help="evaluate on an unseen corpus over the shared classes")
    s.add_argument("--external-dataset")
    s.set_defaults(func=cmd_external_eval)

    s = sub.add_parser("explain", parents=[common, model_args], help="Grad-CAM localization on test positives")
    s.add_argument("--n", type=int, default=50)
    s.add_argument("--plot", type=int, default=0, metavar="K", help="write overlays for the first K cases")
    s.set_defaults(func=cmd_explain)

    s = sub.add_parser("bench", parents=[common], help="parameters, FLOPs, latency and memory at batch 4")
    s.add_argument("--length", type=int, default=4096)
    s.add_argument("--reps", type=int, default=100)
    s.add_argument("--tiers", nargs="+", default=["tiny", "small", "base"], choices=("micro", "tiny", "small", "base"))
    s.add_argument("--plot", action="store_true")
    s.set_defaults(func=cmd_bench)

    s = sub.add_parser("ablate", parents=[common], help="full ablation ladder over the configured seeds")
    s.add_argument("--jobs", type=int, default=1, help="seed processes to run at once")
    s.add_argument("--variants", nargs="+", default=list(ex.VARIANTS), choices=ex.VARIANTS)
    s.add_argument("--plot", action="store_true")
    s.add_argument("--per-class-csv", action="store_true")
    s.set_defaults(func=cmd_ablate)

    s = sub.add_parser("seed-run", parents=[common], help=argparse.SUPPRESS)
    s.add_argument("--resolved", required=True)
    s.add_argument("--variants", nargs="+", default=list(ex.VARIANTS), choices=ex.VARIANTS)
    s.set_defaults(func=cmd_seed_run)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(stream=sys.stderr, level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s", force=True)
    try:
        if args.config is not None and not getattr(args, "resolved", None):
            _require(args.config, "config file")
        cfg = _resolve_config(args)
        return args.func(args, cfg)
    except (UsageError, ConfigError) as exc:
        log.error("%s", exc)
        return 1
    except Exception as exc:  # noqa: BLE001 - every other failure is a runtime error
        log.error("%s: %s", type(exc).__name__, exc)
        log.debug("traceback", exc_info=True)
        return 2


if __name__ == "__main__":
    sys.exit(main())
